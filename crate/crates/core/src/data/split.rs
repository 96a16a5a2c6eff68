use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::VideoClip;
use crate::seed;
use crate::{Error, Image, Result};

/// One held-out frame: the middle frame of a test video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestFrame {
    pub clip: usize,
    pub frame: usize,
    pub class_id: usize,
}

/// Partition of a clip list by video. Indices refer to the input slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<TestFrame>,
}

impl DatasetSplit {
    pub fn train_clips<'a>(&self, clips: &'a [VideoClip]) -> Vec<&'a VideoClip> {
        self.train.iter().map(|&i| &clips[i]).collect()
    }

    pub fn train_owned(&self, clips: &[VideoClip]) -> Vec<VideoClip> {
        self.train.iter().map(|&i| clips[i].clone()).collect()
    }

    pub fn test_frames<'a>(&self, clips: &'a [VideoClip]) -> Vec<(&'a Image, usize)> {
        self.test
            .iter()
            .map(|t| (&clips[t.clip].frames[t.frame], t.class_id))
            .collect()
    }
}

/// Shuffles each class independently and puts `floor(ratio * n)` clips
/// (clamped to `1..n`) on the train side.
pub fn split_dataset(clips: &[VideoClip], ratio: f64, seed_value: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::field("ratio", "must be in (0, 1)"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        by_class.entry(c.class_id).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(Error::Config("cannot split an empty clip list".into()));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (&class_id, members) in &by_class {
        let n = members.len();
        if n < 2 {
            return Err(Error::Split { class_id, count: n });
        }
        let mut order = members.clone();
        order.shuffle(&mut seed::rng(seed_value, &[class_id as u64]));
        let n_train = ((ratio * n as f64).floor() as usize).clamp(1, n - 1);
        let (train, test) = order.split_at(n_train);
        split.train.extend_from_slice(train);
        split.test.extend(test.iter().map(|&i| TestFrame {
            clip: i,
            frame: clips[i].middle_index(),
            class_id,
        }));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::collections::BTreeSet;

    fn clips(per_class: &[usize]) -> Vec<VideoClip> {
        let mut out = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                let frames = (0..5).map(|t| Array3::from_elem((2, 2, 3), t as f32 / 10.0)).collect();
                out.push(VideoClip::new(format!("c{c}v{i}"), c, frames).unwrap());
            }
        }
        out
    }

    #[test]
    fn four_clips_split_three_one() {
        let s = split_dataset(&clips(&[4]), 0.75, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (3, 1));
        assert_eq!(s.test[0].frame, 2);
    }

    #[test]
    fn two_clips_half_ratio() {
        let s = split_dataset(&clips(&[2]), 0.5, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 1));
    }

    #[test]
    fn forty_clips_partition_exactly() {
        let cs = clips(&[10, 10, 10, 10]);
        let s = split_dataset(&cs, 0.75, 9).unwrap();
        let mut seen: Vec<usize> = s.train.clone();
        seen.extend(s.test.iter().map(|t| t.clip));
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        let train: BTreeSet<_> = s.train.iter().collect();
        assert!(s.test.iter().all(|t| !train.contains(&t.clip)));
        for c in 0..4 {
            assert_eq!(s.train.iter().filter(|&&i| cs[i].class_id == c).count(), 7);
        }
    }

    #[test]
    fn singleton_class_names_the_class() {
        let err = split_dataset(&clips(&[3, 1]), 0.75, 0).unwrap_err();
        assert!(matches!(err, Error::Split { class_id: 1, count: 1 }));
    }

    #[test]
    fn ratio_bounds() {
        assert!(split_dataset(&clips(&[4]), 0.0, 0).is_err());
        assert!(split_dataset(&clips(&[4]), 1.0, 0).is_err());
    }
}
