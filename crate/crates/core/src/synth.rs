//! Synthetic "video" corpora: per-action feature prototypes, sampled
//! orderings and segment lengths, drift and Gaussian noise.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::DatasetRecord;
use crate::error::{Error, Result};
use crate::lattice::{collapse, LabelVocab, Path, SparseAnnotations};
use crate::similarity::cosine_track;
use crate::tensor::Matrix;

/// How many frames carry a ground-truth anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AnchorLevel {
    /// One uniformly chosen frame inside every segment.
    PerSegment,
    /// This fraction of all frames, chosen uniformly.
    Fraction(f64),
}

impl FromStr for AnchorLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "per-segment-1" {
            return Ok(AnchorLevel::PerSegment);
        }
        let f: f64 = s
            .parse()
            .map_err(|_| Error::InvalidInput(format!("annotation level `{s}` is neither per-segment-1 nor a fraction")))?;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidInput(format!("annotation fraction {f} outside (0, 1]")));
        }
        Ok(AnchorLevel::Fraction(f))
    }
}

impl fmt::Display for AnchorLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorLevel::PerSegment => f.write_str("per-segment-1"),
            AnchorLevel::Fraction(x) => write!(f, "{x}"),
        }
    }
}

impl TryFrom<String> for AnchorLevel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AnchorLevel> for String {
    fn from(level: AnchorLevel) -> String {
        level.to_string()
    }
}

pub fn sample_anchors<R: Rng>(labels: &Path, level: AnchorLevel, rng: &mut R) -> SparseAnnotations {
    let frames = labels.len();
    let mut picked: Vec<usize> = match level {
        AnchorLevel::PerSegment => {
            let mut out = Vec::new();
            let mut start = 0;
            for t in 1..=frames {
                if t == frames || labels.labels()[t] != labels.labels()[start] {
                    out.push(rng.random_range(start..t));
                    start = t;
                }
            }
            out
        }
        AnchorLevel::Fraction(f) => {
            let count = ((f * frames as f64).round() as usize).clamp(1, frames);
            sample(rng, frames, count).into_vec()
        }
    };
    picked.sort_unstable();
    SparseAnnotations::new(picked.into_iter().map(|t| (t, labels.labels()[t])).collect())
        .expect("sampled frames are distinct")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub actions: usize,
    pub dim: usize,
    pub proto_scale: f64,
    pub sigma: f64,
    pub segments_min: usize,
    pub segments_max: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub videos: usize,
    pub test_videos: usize,
    pub drift: f64,
    pub seed: u64,
    pub anchors: Option<AnchorLevel>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            actions: 5,
            dim: 16,
            proto_scale: 1.0,
            sigma: 0.3,
            segments_min: 3,
            segments_max: 5,
            length_min: 15,
            length_max: 30,
            videos: 200,
            test_videos: 50,
            drift: 0.02,
            seed: 0,
            anchors: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.actions == 0 || self.dim == 0 {
            return bad("actions and dim must be positive".into());
        }
        if self.segments_min == 0 || self.segments_min > self.segments_max {
            return bad(format!(
                "segment range [{}, {}] is invalid",
                self.segments_min, self.segments_max
            ));
        }
        if self.length_min == 0 || self.length_min > self.length_max {
            return bad(format!(
                "segment length range [{}, {}] is invalid",
                self.length_min, self.length_max
            ));
        }
        if self.segments_max > 1 && self.actions < 2 {
            return bad("distinct neighbouring actions need at least two actions".into());
        }
        if !(self.sigma >= 0.0) || !(self.drift >= 0.0) || !(self.proto_scale > 0.0) {
            return bad("sigma and drift must be non-negative, proto_scale positive".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> LabelVocab {
        LabelVocab::new((0..self.actions).map(|k| format!("a{k}"))).expect("generated names are unique")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: LabelVocab,
    pub prototypes: Matrix,
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn generate_video<R: Rng>(spec: &SyntheticSpec, prototypes: &Matrix, id: String, rng: &mut R) -> DatasetRecord {
    let segments = rng.random_range(spec.segments_min..=spec.segments_max);
    let mut order: Vec<usize> = Vec::with_capacity(segments);
    for s in 0..segments {
        let action = if s == 0 {
            rng.random_range(0..spec.actions)
        } else {
            // uniform over the other actions
            let k = rng.random_range(0..spec.actions - 1);
            if k >= order[s - 1] {
                k + 1
            } else {
                k
            }
        };
        order.push(action);
    }
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for &action in &order {
        let len = rng.random_range(spec.length_min..=spec.length_max);
        let mut walk = vec![0.0; spec.dim];
        for i in 0..len {
            if i > 0 {
                for w in walk.iter_mut() {
                    *w += spec.drift * normal(rng);
                }
            }
            let row: Vec<f64> = prototypes
                .row(action)
                .iter()
                .zip(&walk)
                .map(|(p, w)| p + w + spec.sigma * normal(rng))
                .collect();
            rows.push(row);
            labels.push(action);
        }
    }
    let path = Path(labels);
    let annotations = spec.anchors.map(|level| sample_anchors(&path, level, rng));
    DatasetRecord {
        id,
        features: Matrix::from_rows(&rows).expect("rows share the feature dimension"),
        ordering: Some(collapse(&path).expect("videos have at least one frame")),
        frame_labels: Some(path),
        annotations,
    }
}

/// Deterministic under `spec.seed`; train and test share the prototypes.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proto: Vec<f64> = (0..spec.actions * spec.dim)
        .map(|_| spec.proto_scale * normal(&mut rng))
        .collect();
    let prototypes = Matrix::from_vec(spec.actions, spec.dim, proto)?;
    let train = (0..spec.videos)
        .map(|i| generate_video(spec, &prototypes, format!("train-{i:04}"), &mut rng))
        .collect();
    let test = (0..spec.test_videos)
        .map(|i| generate_video(spec, &prototypes, format!("test-{i:04}"), &mut rng))
        .collect();
    Ok(SyntheticCorpus {
        vocab: spec.vocab(),
        prototypes,
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub records: usize,
    pub frames: usize,
    pub mean_segments: f64,
    /// Mean cosine between consecutive frames of the same segment.
    pub within_cosine: f64,
    /// Mean cosine across segment boundaries.
    pub between_cosine: f64,
}

/// Plain cosine, in `[-1, 1]`.
fn raw_cosine(mapped: f64) -> f64 {
    2.0 * mapped - 1.0
}

pub fn corpus_stats(records: &[DatasetRecord]) -> CorpusStats {
    let mut frames = 0;
    let mut segments = 0;
    let (mut within, mut within_n) = (0.0, 0usize);
    let (mut between, mut between_n) = (0.0, 0usize);
    for r in records {
        frames += r.features.rows();
        segments += r.ordering.as_ref().map_or(0, |o| o.len());
        let Some(labels) = &r.frame_labels else { continue };
        for (t, c) in cosine_track(&r.features).into_iter().enumerate() {
            if labels.labels()[t] == labels.labels()[t + 1] {
                within += raw_cosine(c);
                within_n += 1;
            } else {
                between += raw_cosine(c);
                between_n += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    CorpusStats {
        records: records.len(),
        frames,
        mean_segments: mean(segments as f64, records.len()),
        within_cosine: mean(within, within_n),
        between_cosine: mean(between, between_n),
    }
}
