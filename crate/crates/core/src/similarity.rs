//! Frame-to-frame similarity tracks built from features.
//!
//! A temporally constrained k-means over-segments the sequence; frames inside
//! one cluster are hard-linked (`Similarity::Infinite`) and cluster boundaries
//! take either zero or the cosine similarity of the two frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Similarity, SimilarityTrack};
use crate::tensor::{dot, Matrix};

pub const DEFAULT_CLUSTER_LEN: usize = 20;
pub const DEFAULT_KMEANS_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Plain CTC.
    None,
    Kmeans,
    Cosine,
    Both,
}

impl FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SimilarityMode::None),
            "kmeans" => Ok(SimilarityMode::Kmeans),
            "cosine" => Ok(SimilarityMode::Cosine),
            "both" => Ok(SimilarityMode::Both),
            other => Err(Error::InvalidInput(format!("unknown similarity mode `{other}`"))),
        }
    }
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMode::None => "none",
            SimilarityMode::Kmeans => "kmeans",
            SimilarityMode::Cosine => "cosine",
            SimilarityMode::Both => "both",
        })
    }
}

/// Contiguous segment index per frame, starting at 0 and stepping by 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSegmentation {
    pub segment_id: Vec<usize>,
}

impl ClusterSegmentation {
    pub fn segments(&self) -> usize {
        self.segment_id.last().map_or(0, |&s| s + 1)
    }

    /// Frame index where each segment starts.
    pub fn starts(&self) -> Vec<usize> {
        let mut out = vec![0];
        for t in 1..self.segment_id.len() {
            if self.segment_id[t] != self.segment_id[t - 1] {
                out.push(t);
            }
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn validate_features(features: &Matrix) -> Result<()> {
    if features.rows() == 0 || features.cols() == 0 {
        return Err(Error::InvalidInput("features must be non-empty".into()));
    }
    for (t, row) in features.iter_rows().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature at frame {t}")));
        }
    }
    Ok(())
}

/// SLIC-style k-means along time: `ceil(T/M)` centers placed uniformly, each
/// frame compared only with centers within `M` frames of it, then a
/// contiguity pass that splits runs and folds single-frame runs into the more
/// similar neighbour.
pub fn temporal_cluster(features: &Matrix, cluster_len: usize, iters: usize) -> Result<ClusterSegmentation> {
    validate_features(features)?;
    if cluster_len < 2 {
        return Err(Error::InvalidInput(format!(
            "mean cluster length must be at least 2, got {cluster_len}"
        )));
    }
    let frames = features.rows();
    if frames < cluster_len {
        return Ok(ClusterSegmentation {
            segment_id: vec![0; frames],
        });
    }
    let count = frames.div_ceil(cluster_len);
    let window = cluster_len as f64;
    let mut positions: Vec<f64> = (0..count)
        .map(|k| (k as f64 + 0.5) * frames as f64 / count as f64 - 0.5)
        .collect();
    let mut centers: Vec<Vec<f64>> = positions
        .iter()
        .map(|&p| features.row((p.round() as usize).min(frames - 1)).to_vec())
        .collect();

    let mut assign = vec![usize::MAX; frames];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for t in 0..frames {
            let x = features.row(t);
            let tf = t as f64;
            let mut best: Option<(f64, f64, usize)> = None;
            for k in 0..count {
                let gap = (positions[k] - tf).abs();
                if gap > window {
                    continue;
                }
                let key = (sq_dist(x, &centers[k]), gap, k);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
            let k = match best {
                Some((_, _, k)) => k,
                None => (0..count)
                    .min_by(|&a, &b| {
                        (positions[a] - tf)
                            .abs()
                            .total_cmp(&(positions[b] - tf).abs())
                    })
                    .unwrap_or(0),
            };
            if assign[t] != k {
                assign[t] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dims = features.cols();
        let mut sums = vec![vec![0.0; dims]; count];
        let mut pos_sums = vec![0.0; count];
        let mut sizes = vec![0usize; count];
        for (t, &k) in assign.iter().enumerate() {
            for (s, v) in sums[k].iter_mut().zip(features.row(t)) {
                *s += v;
            }
            pos_sums[k] += t as f64;
            sizes[k] += 1;
        }
        for k in 0..count {
            if sizes[k] > 0 {
                let n = sizes[k] as f64;
                centers[k] = sums[k].iter().map(|s| s / n).collect();
                positions[k] = pos_sums[k] / n;
            }
        }
    }

    // runs as (start, len)
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for t in 0..frames {
        match runs.last_mut() {
            Some(run) if assign[run.0] == assign[t] => run.1 += 1,
            _ => runs.push((t, 1)),
        }
    }
    while runs.len() > 1 {
        let Some(i) = runs.iter().position(|&(_, len)| len < 2) else {
            break;
        };
        let (start, len) = runs[i];
        let left_cost = (i > 0).then(|| sq_dist(features.row(start - 1), features.row(start)));
        let right_cost = (i + 1 < runs.len())
            .then(|| sq_dist(features.row(start + len - 1), features.row(start + len)));
        let merge_left = match (left_cost, right_cost) {
            (Some(l), Some(r)) => l <= r,
            (Some(_), None) => true,
            _ => false,
        };
        if merge_left {
            runs[i - 1].1 += len;
        } else {
            runs[i + 1].0 = start;
            runs[i + 1].1 += len;
        }
        runs.remove(i);
    }
    let mut segment_id = Vec::with_capacity(frames);
    for (id, &(_, len)) in runs.iter().enumerate() {
        segment_id.extend(std::iter::repeat_n(id, len));
    }
    Ok(ClusterSegmentation { segment_id })
}

/// `(1 + cos(x_t, x_{t+1})) / 2` for each consecutive pair; zero when either
/// frame has zero norm.
pub fn cosine_track(features: &Matrix) -> Vec<f64> {
    let norms: Vec<f64> = features.iter_rows().map(|r| dot(r, r).sqrt()).collect();
    (1..features.rows())
        .map(|t| {
            let denom = norms[t - 1] * norms[t];
            if denom == 0.0 {
                return 0.0;
            }
            let cos = (dot(features.row(t - 1), features.row(t)) / denom).clamp(-1.0, 1.0);
            (1.0 + cos) / 2.0
        })
        .collect()
}

/// Hard links inside clusters, `boundary[t]` between clusters.
pub fn compose_track(seg: &ClusterSegmentation, boundary: &[f64], theta: f64) -> Result<SimilarityTrack> {
    let frames = seg.segment_id.len();
    if boundary.len() + 1 != frames {
        return Err(Error::Shape(format!(
            "{} boundary similarities for {frames} frames",
            boundary.len()
        )));
    }
    let sims = (0..frames.saturating_sub(1))
        .map(|t| {
            if seg.segment_id[t] == seg.segment_id[t + 1] {
                Similarity::Infinite
            } else {
                Similarity::Finite(boundary[t])
            }
        })
        .collect();
    SimilarityTrack::new(sims, theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackParams {
    pub mode: SimilarityMode,
    pub theta: f64,
    pub cluster_len: usize,
    pub iters: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            mode: SimilarityMode::Both,
            theta: crate::lattice::DEFAULT_THETA,
            cluster_len: DEFAULT_CLUSTER_LEN,
            iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

pub fn build_track(features: &Matrix, params: &TrackParams) -> Result<SimilarityTrack> {
    validate_features(features)?;
    let frames = features.rows();
    match params.mode {
        SimilarityMode::None => SimilarityTrack::flat(frames, params.theta),
        SimilarityMode::Cosine => SimilarityTrack::new(
            cosine_track(features).into_iter().map(Similarity::Finite).collect(),
            params.theta,
        ),
        SimilarityMode::Kmeans => {
            let seg = temporal_cluster(features, params.cluster_len, params.iters)?;
            compose_track(&seg, &vec![0.0; frames - 1], params.theta)
        }
        SimilarityMode::Both => {
            let seg = temporal_cluster(features, params.cluster_len, params.iters)?;
            compose_track(&seg, &cosine_track(features), params.theta)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repeated(rows: &[(Vec<f64>, usize)]) -> Matrix {
        let all: Vec<Vec<f64>> = rows
            .iter()
            .flat_map(|(r, n)| std::iter::repeat_n(r.clone(), *n))
            .collect();
        Matrix::from_rows(&all).unwrap()
    }

    #[test]
    fn constant_features_split_evenly() {
        let f = repeated(&[(vec![1.0, 2.0], 40)]);
        let seg = temporal_cluster(&f, 20, 10).unwrap();
        assert_eq!(seg.segments(), 2);
        assert_eq!(seg.starts(), vec![0, 20]);
    }

    #[test]
    fn prototype_change_is_a_boundary() {
        let f = repeated(&[(vec![1.0, 0.0, 0.5], 30), (vec![-0.2, 1.0, 0.0], 30)]);
        let seg = temporal_cluster(&f, 20, 10).unwrap();
        assert!(seg.starts().contains(&30), "{:?}", seg.starts());
        assert_ne!(seg.segment_id[29], seg.segment_id[30]);
    }

    #[test]
    fn short_sequence_is_one_segment() {
        let f = repeated(&[(vec![1.0], 5)]);
        assert_eq!(temporal_cluster(&f, 20, 10).unwrap().segment_id, vec![0; 5]);
    }

    #[test]
    fn clustering_rejects_bad_input() {
        let mut f = repeated(&[(vec![1.0], 30)]);
        f.set(3, 0, f64::NAN);
        assert!(temporal_cluster(&f, 20, 10).is_err());
        assert!(temporal_cluster(&repeated(&[(vec![1.0], 30)]), 1, 10).is_err());
    }

    #[test]
    fn segments_are_contiguous_and_not_singletons() {
        // alternating noise would fragment a naive assignment
        let rows: Vec<Vec<f64>> = (0..97)
            .map(|t| vec![((t * 7919) % 13) as f64, ((t * 104729) % 5) as f64])
            .collect();
        let f = Matrix::from_rows(&rows).unwrap();
        let seg = temporal_cluster(&f, 6, 10).unwrap();
        assert_eq!(seg.segment_id[0], 0);
        for w in seg.segment_id.windows(2) {
            assert!(w[1] == w[0] || w[1] == w[0] + 1);
        }
        let starts = seg.starts();
        let mut ends = starts[1..].to_vec();
        ends.push(97);
        assert!(starts.iter().zip(&ends).all(|(s, e)| e - s >= 2));
    }

    #[test]
    fn clustering_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..80).map(|t| vec![(t as f64 * 0.37).sin(), (t / 25) as f64]).collect();
        let f = Matrix::from_rows(&rows).unwrap();
        assert_eq!(temporal_cluster(&f, 10, 10).unwrap(), temporal_cluster(&f, 10, 10).unwrap());
    }

    #[test]
    fn cosine_examples() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![0.0, -3.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let c = cosine_track(&f);
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!((c[1] - 0.5).abs() < 1e-15);
        assert!(c[2].abs() < 1e-15);
        assert_eq!(c[3], 0.0);
    }

    #[test]
    fn compose_marks_clusters_infinite() {
        let seg = ClusterSegmentation {
            segment_id: vec![0, 0, 0, 1, 1, 2],
        };
        let track = compose_track(&seg, &[0.9, 0.9, 0.7, 0.9, 0.3], 0.5).unwrap();
        let finite: Vec<_> = track.sims().iter().filter(|s| !s.is_infinite()).collect();
        assert_eq!(finite.len(), seg.segments() - 1);
        assert_eq!(track.sims()[2], Similarity::Finite(0.7));
        assert_eq!(track.sims()[4], Similarity::Finite(0.3));

        let one = ClusterSegmentation { segment_id: vec![0; 4] };
        assert!(compose_track(&one, &[0.0; 3], 0.5).unwrap().sims().iter().all(|s| s.is_infinite()));
    }

    #[test]
    fn identical_boundary_frames_have_similarity_one() {
        let f = repeated(&[(vec![1.0, 1.0], 4)]);
        let seg = ClusterSegmentation { segment_id: vec![0, 0, 1, 1] };
        let track = compose_track(&seg, &cosine_track(&f), 0.5).unwrap();
        match track.sims()[1] {
            Similarity::Finite(v) => assert!((v - 1.0).abs() < 1e-15),
            Similarity::Infinite => panic!("boundary must be finite"),
        }
    }

    #[test]
    fn kmeans_mode_uses_zero_at_boundaries() {
        let f = repeated(&[(vec![1.0, 0.0], 30), (vec![1.0, 0.1], 30)]);
        let params = TrackParams {
            mode: SimilarityMode::Kmeans,
            cluster_len: 20,
            ..TrackParams::default()
        };
        let track = build_track(&f, &params).unwrap();
        for s in track.sims() {
            if let Similarity::Finite(v) = s {
                assert_eq!(*v, 0.0);
            }
        }
        let none = build_track(&f, &TrackParams { mode: SimilarityMode::None, ..params }).unwrap();
        assert!(none.is_flat());
    }

    #[test]
    fn mode_parses() {
        for m in ["none", "kmeans", "cosine", "both"] {
            assert_eq!(m.parse::<SimilarityMode>().unwrap().to_string(), m);
        }
        assert!("fancy".parse::<SimilarityMode>().is_err());
    }
}
