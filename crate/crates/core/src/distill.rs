//! Self-distillation: teacher centering and sharpening, DINO cross-entropy,
//! entropy-weighted (UWSD) aggregation and the EMA teacher.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::model::{Adapters, ModelParams};
use crate::numeric::{logsumexp, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    /// Teacher also sees view a and the student view b (two-way DINO swap).
    pub symmetric_views: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            ema_momentum: 0.996,
            symmetric_views: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::field("gamma", "must be >= 0"));
        }
        if !(self.student_temp > 0.0) || !(self.teacher_temp > 0.0) {
            return Err(Error::field("student_temp", "temperatures must be positive"));
        }
        if self.teacher_temp >= self.student_temp {
            return Err(Error::Conflict {
                first: "teacher_temp".into(),
                second: "student_temp".into(),
                reason: "teacher must be sharper than student (teacher_temp < student_temp)".into(),
            });
        }
        for (name, v) in [("center_momentum", self.center_momentum), ("ema_momentum", self.ema_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::field(name, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// EMA teacher: dense weights (adapters merged in) plus the logit center.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T> {
    pub params: ModelParams<T>,
    pub center: Array1<T>,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
}

impl<T: Real> TeacherState<T> {
    pub fn from_student(student: &ModelParams<T>, adapters: Option<&Adapters<T>>, cfg: &LossConfig) -> Self {
        let params = match adapters {
            Some(a) => student.merged(a),
            None => student.clone(),
        };
        let k = params.config.head.num_prototypes;
        Self {
            params,
            center: Array1::zeros(k),
            ema_momentum: cfg.ema_momentum,
            center_momentum: cfg.center_momentum,
            teacher_temp: cfg.teacher_temp,
            student_temp: cfg.student_temp,
        }
    }

    /// Teacher distributions for a `[batch, K]` logit matrix.
    pub fn probs(&self, logits: &Array2<T>) -> Result<Array2<T>> {
        let mut out = Array2::zeros(logits.raw_dim());
        for (row, mut o) in logits.rows().into_iter().zip(out.rows_mut()) {
            o.assign(&teacher_probs(row, self.center.view(), self.teacher_temp)?);
        }
        Ok(out)
    }

    /// EMA step towards the student's effective (merged) weights.
    pub fn update_params(&mut self, student: &ModelParams<T>, adapters: Option<&Adapters<T>>) -> Result<()> {
        match adapters {
            Some(a) if !a.is_empty() => ema_update(&mut self.params, &student.merged(a), self.ema_momentum),
            _ => ema_update(&mut self.params, student, self.ema_momentum),
        }
    }

    pub fn update_center(&mut self, teacher_logits: &Array2<T>) -> Result<()> {
        center_update(&mut self.center, teacher_logits.view(), self.center_momentum)
    }
}

/// `softmax((logits - center) / temp)`.
pub fn teacher_probs<T: Real>(logits: ArrayView1<T>, center: ArrayView1<T>, temp: f64) -> Result<Array1<T>> {
    if logits.len() != center.len() {
        return Err(Error::Dimension(format!(
            "{} logits against a center of length {}",
            logits.len(),
            center.len()
        )));
    }
    if logits.iter().chain(center.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite teacher logits".into()));
    }
    let t = T::lit(temp);
    let z = Zip::from(&logits).and(&center).map_collect(|&l, &c| (l - c) / t);
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut e = z.mapv(|v| (v - max).exp());
    let inv = T::one() / e.sum();
    e.mapv_inplace(|v| v * inv);
    Ok(e)
}

/// `log softmax(x / temp)`, log-sum-exp stabilised.
pub fn log_softmax<T: Real>(x: ArrayView1<T>, temp: f64) -> Array1<T> {
    let t = T::lit(temp);
    let z = x.mapv(|v| v / t);
    let lse = logsumexp(z.view());
    z.mapv(|v| v - lse)
}

pub fn dino_ce<T: Real>(q: ArrayView1<T>, student_logits: ArrayView1<T>, student_temp: f64) -> T {
    let ls = log_softmax(student_logits, student_temp);
    -q.iter().zip(ls.iter()).map(|(&p, &l)| p * l).sum::<T>()
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy<T: Real>(q: ArrayView1<T>) -> T {
    -q.iter().filter(|&&p| p > T::zero()).map(|&p| p * p.ln()).sum::<T>()
}

pub fn uwsd_weight<T: Real>(q: ArrayView1<T>, gamma: f64) -> T {
    T::one() + T::lit(gamma) * entropy(q)
}

/// One teacher target set: `[batch, K]` probabilities matched against the
/// student views listed by index.
#[derive(Debug, Clone)]
pub struct Assignment<'a, T> {
    pub teacher: ArrayView2<'a, T>,
    pub student_views: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct UwsdOutput<T> {
    pub loss: T,
    /// Gradient of `loss` for each student view, `[batch, K]`.
    pub grads: Vec<Array2<T>>,
    pub entropies: Array1<T>,
    pub weights: Array1<T>,
}

/// UWSD loss over student views `students[j]` (each `[batch, K]`).
///
/// Every (assignment, pair) entry contributes `w(q) * mean_j CE(q, s_j)`; the
/// loss is the mean over entries. `q` and `w(q)` are constants for the
/// gradient.
pub fn uwsd_loss<T: Real>(assignments: &[Assignment<'_, T>], students: &[Array2<T>], gamma: f64, student_temp: f64) -> Result<UwsdOutput<T>> {
    let batch = assignments.first().map_or(0, |a| a.teacher.nrows());
    if batch == 0 {
        return Err(Error::Config("uwsd_loss needs a non-empty batch".into()));
    }
    let k = assignments[0].teacher.ncols();
    for s in students {
        if s.dim() != (batch, k) {
            return Err(Error::Dimension(format!("student logits {:?}, expected {:?}", s.dim(), (batch, k))));
        }
    }
    for a in assignments {
        if a.teacher.dim() != (batch, k) {
            return Err(Error::Dimension("teacher probability shapes differ".into()));
        }
        if a.student_views.is_empty() || a.student_views.iter().any(|&j| j >= students.len()) {
            return Err(Error::Config("assignment references missing student views".into()));
        }
    }
    let n_entries = T::from_usize(assignments.len() * batch).expect("count");
    let tau = T::lit(student_temp);
    let log_probs: Vec<Array2<T>> = students
        .iter()
        .map(|s| {
            let mut out = Array2::zeros(s.raw_dim());
            for (row, mut o) in s.rows().into_iter().zip(out.rows_mut()) {
                o.assign(&log_softmax(row, student_temp));
            }
            out
        })
        .collect();
    let mut grads: Vec<Array2<T>> = students.iter().map(|s| Array2::zeros(s.raw_dim())).collect();
    let mut entropies = Vec::with_capacity(assignments.len() * batch);
    let mut weights = Vec::with_capacity(assignments.len() * batch);
    let mut loss = T::zero();
    for a in assignments {
        let n_views = T::from_usize(a.student_views.len()).expect("count");
        for i in 0..batch {
            let q = a.teacher.row(i);
            let h = entropy(q);
            let w = T::one() + T::lit(gamma) * h;
            entropies.push(h);
            weights.push(w);
            let mut term = T::zero();
            for &j in &a.student_views {
                let lp = log_probs[j].row(i);
                term -= q.iter().zip(lp.iter()).map(|(&p, &l)| p * l).sum::<T>();
                let coef = w / (n_entries * n_views * tau);
                let mut g = grads[j].row_mut(i);
                for ((g, &l), &p) in g.iter_mut().zip(lp.iter()).zip(q.iter()) {
                    *g += coef * (l.exp() - p);
                }
            }
            loss += w * term / n_views;
        }
    }
    loss /= n_entries;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite UWSD loss {loss}")));
    }
    Ok(UwsdOutput {
        loss,
        grads,
        entropies: Array1::from(entropies),
        weights: Array1::from(weights),
    })
}

/// `theta_t <- m theta_t + (1 - m) theta_s` over every shared tensor.
pub fn ema_update<T: Real>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::field("ema_momentum", "must lie in [0, 1]"));
    }
    if teacher.config != student.config {
        return Err(Error::Dimension("teacher and student configs differ".into()));
    }
    let m = T::lit(momentum);
    let one_m = T::one() - m;
    let src = student.named_tensors();
    for ((_, mut t), (_, s)) in teacher.named_tensors_mut().into_iter().zip(src) {
        Zip::from(&mut t).and(&s).for_each(|t, &s| *t = m * *t + one_m * s);
    }
    Ok(())
}

/// `center <- cm center + (1 - cm) mean_batch(teacher_logits)`.
pub fn center_update<T: Real>(center: &mut Array1<T>, teacher_logits: ArrayView2<T>, center_momentum: f64) -> Result<()> {
    if teacher_logits.ncols() != center.len() || teacher_logits.nrows() == 0 {
        return Err(Error::Dimension("teacher logits do not match center".into()));
    }
    let mean = teacher_logits.mean_axis(Axis(0)).expect("non-empty");
    let cm = T::lit(center_momentum);
    Zip::from(center).and(&mean).for_each(|c, &b| *c = cm * *c + (T::one() - cm) * b);
    Ok(())
}
