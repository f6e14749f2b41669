//! Frame accuracy, unit accuracy and the Jaccard alignment measure.

use crate::error::{Error, Result};
use crate::lattice::Path;

/// Run-length form of a frame labelling: `(action, first, last)` with `last`
/// inclusive, 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentList {
    pub segments: Vec<(usize, usize, usize)>,
}

impl SegmentList {
    pub fn from_path(path: &Path) -> Self {
        let mut segments: Vec<(usize, usize, usize)> = Vec::new();
        for (t, &k) in path.labels().iter().enumerate() {
            match segments.last_mut() {
                Some(last) if last.0 == k => last.2 = t,
                _ => segments.push((k, t, t)),
            }
        }
        SegmentList { segments }
    }

    pub fn frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.2 + 1)
    }
}

pub fn frame_accuracy(pred: &Path, gt: &Path) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::InvalidInput("empty ground truth".into()));
    }
    let hits = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Unit-cost edit distance (substitution, insertion, deletion).
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `max(0, 1 - edits / |gt|)` over the best global alignment of the unit
/// sequences. Takes raw slices so an empty prediction can be scored.
pub fn unit_accuracy(pred_units: &[usize], gt_units: &[usize]) -> Result<f64> {
    if gt_units.is_empty() {
        return Err(Error::InvalidInput("empty ground-truth unit sequence".into()));
    }
    let edits = edit_distance(pred_units, gt_units) as f64;
    Ok((1.0 - edits / gt_units.len() as f64).max(0.0))
}

/// Mean over ground-truth segments of `|I ∩ P_a| / |I ∪ P_a|`, where `P_a`
/// holds the frames predicted as the segment's action, minus those lying in
/// other ground-truth segments of that same action.
pub fn jaccard(pred: &Path, gt: &SegmentList) -> Result<f64> {
    if gt.segments.is_empty() {
        return Err(Error::InvalidInput("no ground-truth segments".into()));
    }
    let per_segment = segment_jaccards(pred, gt)?;
    Ok(per_segment.iter().sum::<f64>() / per_segment.len() as f64)
}

pub fn segment_jaccards(pred: &Path, gt: &SegmentList) -> Result<Vec<f64>> {
    if pred.len() != gt.frames() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth covers {}",
            pred.len(),
            gt.frames()
        )));
    }
    let labels = pred.labels();
    // frames owned by some ground-truth segment of each action
    let mut owner = vec![usize::MAX; labels.len()];
    for &(action, first, last) in &gt.segments {
        owner[first..=last].iter_mut().for_each(|o| *o = action);
    }
    Ok(gt
        .segments
        .iter()
        .map(|&(action, first, last)| {
            let inter = labels[first..=last].iter().filter(|&&k| k == action).count();
            let stray = labels
                .iter()
                .zip(&owner)
                .filter(|&(&k, &o)| k == action && o != action)
                .count();
            let union = (last - first + 1) + stray;
            inter as f64 / union as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::collapse;
    use proptest::prelude::*;

    #[test]
    fn frame_accuracy_examples() {
        let gt = Path(vec![0, 0, 1, 1]);
        assert_eq!(frame_accuracy(&gt, &gt).unwrap(), 1.0);
        assert_eq!(frame_accuracy(&Path(vec![2, 2, 0, 0]), &gt).unwrap(), 0.0);
        assert_eq!(frame_accuracy(&Path(vec![0, 1, 1, 1]), &gt).unwrap(), 0.75);
        assert!(frame_accuracy(&Path(vec![0]), &gt).is_err());
    }

    #[test]
    fn unit_accuracy_examples() {
        assert_eq!(unit_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(unit_accuracy(&[0, 1, 2], &[0, 2]).unwrap(), 0.5);
        assert_eq!(unit_accuracy(&[], &[0]).unwrap(), 0.0);
        assert!(unit_accuracy(&[0], &[]).is_err());
    }

    #[test]
    fn unit_accuracy_is_clamped_at_zero() {
        assert_eq!(unit_accuracy(&[1, 2, 1, 2, 1], &[0]).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_examples() {
        let gt_path = Path([vec![0; 10], vec![1; 10]].concat());
        let gt = SegmentList::from_path(&gt_path);
        assert_eq!(jaccard(&gt_path, &gt).unwrap(), 1.0);

        // a on frames 1-10 in truth, predicted a on frames 6-15 only
        let pred = Path([vec![2; 5], vec![0; 10], vec![2; 5]].concat());
        let per_segment = segment_jaccards(&pred, &gt).unwrap();
        assert!((per_segment[0] - 1.0 / 3.0).abs() < 1e-15);
        // b is never predicted
        assert_eq!(per_segment[1], 0.0);
        assert!((jaccard(&pred, &gt).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn jaccard_repeated_action_scores_one_on_itself() {
        let gt_path = Path(vec![3, 0, 3]);
        assert_eq!(jaccard(&gt_path, &SegmentList::from_path(&gt_path)).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_one_on_equal(
            gt in prop::collection::vec(0usize..4, 1..40),
            pred in prop::collection::vec(0usize..4, 1..40),
        ) {
            let gt = Path(gt);
            let n = gt.len().min(pred.len());
            let gt = Path(gt.labels()[..n].to_vec());
            let pred = Path(pred[..n].to_vec());
            let segs = SegmentList::from_path(&gt);
            let gt_units = collapse(&gt).unwrap();
            let pred_units = collapse(&pred).unwrap();
            for v in [
                frame_accuracy(&pred, &gt).unwrap(),
                unit_accuracy(pred_units.labels(), gt_units.labels()).unwrap(),
                jaccard(&pred, &segs).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(frame_accuracy(&gt, &gt).unwrap(), 1.0);
            prop_assert_eq!(unit_accuracy(gt_units.labels(), gt_units.labels()).unwrap(), 1.0);
            prop_assert_eq!(jaccard(&gt, &segs).unwrap(), 1.0);
        }

        #[test]
        fn unit_accuracy_ignores_timing(
            units in prop::collection::vec(0usize..3, 1..6),
            stretch in prop::collection::vec(1usize..5, 6),
        ) {
            let mut ordering = units.clone();
            ordering.dedup();
            let stretched: Vec<usize> = ordering
                .iter()
                .zip(&stretch)
                .flat_map(|(&k, &n)| std::iter::repeat_n(k, n))
                .collect();
            let collapsed = collapse(&Path(stretched)).unwrap();
            prop_assert_eq!(unit_accuracy(collapsed.labels(), &ordering).unwrap(), 1.0);
        }
    }
}
