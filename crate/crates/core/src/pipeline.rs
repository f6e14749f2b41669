//! Corpus-level evaluation and training-set alignment.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::data_io::DatasetRecord;
use crate::error::{Error, Result};
use crate::lattice::{collapse, forward_backward, posterior_target, LabelVocab, Path, PosteriorGrid};
use crate::metrics::{frame_accuracy, jaccard, unit_accuracy, SegmentList};
use crate::model::{net_forward, prepare_item, uniform_target, ModelParams, Target, TrainConfig};
use crate::tensor::argmax;

/// Metrics of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub frames: usize,
    pub frame_acc: f64,
    pub unit_acc: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub videos: usize,
    pub frame_acc: f64,
    pub unit_acc: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<VideoMetrics>,
    pub summary: EvalSummary,
}

pub fn score(id: &str, pred: &Path, gt: &Path) -> Result<VideoMetrics> {
    let pred_units = collapse(pred)?;
    let gt_units = collapse(gt)?;
    Ok(VideoMetrics {
        id: id.to_string(),
        frames: gt.len(),
        frame_acc: frame_accuracy(pred, gt)?,
        unit_acc: unit_accuracy(pred_units.labels(), gt_units.labels())?,
        jaccard: jaccard(pred, &SegmentList::from_path(gt))?,
    })
}

/// Unweighted means over videos.
pub fn summarize(rows: &[VideoMetrics]) -> EvalSummary {
    let n = rows.len().max(1) as f64;
    EvalSummary {
        videos: rows.len(),
        frame_acc: rows.iter().map(|r| r.frame_acc).sum::<f64>() / n,
        unit_acc: rows.iter().map(|r| r.unit_acc).sum::<f64>() / n,
        jaccard: rows.iter().map(|r| r.jaccard).sum::<f64>() / n,
    }
}

/// One line of an evaluation report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReportRow {
    Video(VideoMetrics),
    Summary(EvalSummary),
}

impl EvalReport {
    pub fn to_rows(&self) -> Vec<ReportRow> {
        self.rows
            .iter()
            .cloned()
            .map(ReportRow::Video)
            .chain(std::iter::once(ReportRow::Summary(self.summary.clone())))
            .collect()
    }
}

/// Writes serializable rows, one JSON object per line.
pub fn write_jsonl<T: Serialize>(rows: &[T], path: &FsPath) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &FsPath) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Per-frame argmax decoding scored against each record's frame labels.
pub fn evaluate(params: &ModelParams, records: &[DatasetRecord]) -> Result<EvalReport> {
    let rows = records
        .iter()
        .map(|r| {
            let gt = r.frame_labels.as_ref().ok_or_else(|| Error::Record {
                id: r.id.clone(),
                msg: "evaluation needs frame labels".into(),
            })?;
            let out = net_forward(params, &r.features).map_err(|e| e.in_record(&r.id))?;
            let pred = Path((0..out.z.frames()).map(|t| argmax(out.z.row(t))).collect());
            score(&r.id, &pred, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&rows);
    Ok(EvalReport { rows, summary })
}

/// One aligned training video. Accuracies are present when the record has
/// frame labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub id: String,
    pub alignment: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<f64>,
    /// Frame accuracy of the evenly spread ordering, for comparison.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniform_frame_acc: Option<f64>,
}

/// The frame labelling a record's training target selects under `z`: the
/// per-frame argmax of the posterior target for lattice targets, the target
/// itself for frame targets.
pub fn target_alignment(z: &PosteriorGrid, target: &Target) -> Result<Path> {
    match target {
        Target::Frames(path) => Ok(path.clone()),
        Target::Lattice {
            ordering,
            track,
            anchors,
        } => {
            let lat = forward_backward(z, ordering, track, anchors.as_ref())?;
            let gamma = posterior_target(&lat, z, ordering)?;
            Ok(Path(gamma.iter_rows().map(argmax).collect()))
        }
    }
}

/// Aligns each record with the supervision `config` prescribes, under the
/// network output of `params`.
pub fn align(
    params: &ModelParams,
    config: &TrainConfig,
    vocab: &LabelVocab,
    records: &[DatasetRecord],
) -> Result<Vec<AlignmentRow>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let item = prepare_item(r, config, i)?;
            let out = net_forward(params, &r.features).map_err(|e| e.in_record(&r.id))?;
            let path = target_alignment(&out.z, &item.target).map_err(|e| e.in_record(&r.id))?;
            let (frame_acc, jac, uniform_frame_acc) = match &r.frame_labels {
                Some(gt) => {
                    let baseline = match &r.ordering {
                        Some(ell) => Some(frame_accuracy(&uniform_target(ell, r.frames(), None)?, gt)?),
                        None => None,
                    };
                    (
                        Some(frame_accuracy(&path, gt)?),
                        Some(jaccard(&path, &SegmentList::from_path(gt))?),
                        baseline,
                    )
                }
                None => (None, None, None),
            };
            Ok(AlignmentRow {
                id: r.id.clone(),
                alignment: path.labels().iter().map(|&k| vocab.name(k).to_string()).collect(),
                frame_acc,
                jaccard: jac,
                uniform_frame_acc,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Ordering, SimilarityTrack, SparseAnnotations};
    use crate::tensor::Matrix;

    #[test]
    fn score_perfect_prediction() {
        let gt = Path(vec![0, 0, 1, 1, 2]);
        let m = score("v", &gt, &gt).unwrap();
        assert_eq!((m.frame_acc, m.unit_acc, m.jaccard), (1.0, 1.0, 1.0));
    }

    #[test]
    fn summary_is_unweighted_mean() {
        let rows = vec![
            score("a", &Path(vec![0, 0]), &Path(vec![0, 0])).unwrap(),
            score("b", &Path(vec![1, 1, 1, 1]), &Path(vec![0, 0, 0, 0])).unwrap(),
        ];
        let s = summarize(&rows);
        assert_eq!(s.videos, 2);
        assert_eq!(s.frame_acc, 0.5);
    }

    #[test]
    fn report_rows_round_trip() {
        let rows = vec![score("a", &Path(vec![0, 1, 1]), &Path(vec![0, 0, 1])).unwrap()];
        let report = EvalReport {
            summary: summarize(&rows),
            rows,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        write_jsonl(&report.to_rows(), &path).unwrap();
        let back: Vec<ReportRow> = read_jsonl(&path).unwrap();
        assert_eq!(back, report.to_rows());
    }

    #[test]
    fn lattice_alignment_respects_anchors() {
        let z = PosteriorGrid::new(Matrix::filled(6, 2, 0.5)).unwrap();
        let ell = Ordering::new(vec![0, 1]).unwrap();
        let anchors = SparseAnnotations::new(vec![(1, 0), (3, 1)]).unwrap();
        let target = Target::Lattice {
            ordering: ell,
            track: SimilarityTrack::flat(6, 0.5).unwrap(),
            anchors: Some(anchors.clone()),
        };
        let path = target_alignment(&z, &target).unwrap();
        for &(t, k) in anchors.anchors() {
            assert_eq!(path.labels()[t], k);
        }
    }
}
