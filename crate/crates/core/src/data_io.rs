//! Line-delimited corpus files, vocabulary files and model checkpoints.
//!
//! A corpus is one JSON object per line:
//!
//! ```text
//! {"id":"v1","features":[[0.1,0.2],[0.3,0.4]],"frame_labels":["a","b"],
//!  "ordering":["a","b"],"annotations":[[1,"b"]]}
//! ```
//!
//! `frame_labels`, `ordering` and `annotations` are optional; any other key
//! is rejected. Action names resolve through a vocabulary file holding one
//! name per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{collapse, LabelVocab, Ordering, Path, SparseAnnotations};
use crate::model::{ModelParams, TrainConfig, TENSOR_NAMES};
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub features: Matrix,
    pub frame_labels: Option<Path>,
    pub ordering: Option<Ordering>,
    pub annotations: Option<SparseAnnotations>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ordering: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<Vec<(usize, String)>>,
}

impl DatasetRecord {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Checks every cross-field invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Record { id: self.id.clone(), msg });
        let frames = self.features.rows();
        if frames == 0 || self.features.cols() == 0 {
            return fail("features are empty".into());
        }
        if !self.features.all_finite() {
            return fail("features contain non-finite values".into());
        }
        if let Some(labels) = &self.frame_labels {
            if labels.len() != frames {
                return fail(format!("{} frame labels for {frames} frames", labels.len()));
            }
            if let Some(ordering) = &self.ordering {
                if &collapse(labels)? != ordering {
                    return fail("ordering differs from the collapsed frame labels".into());
                }
            }
        }
        if let Some(ann) = &self.annotations {
            for &(t, a) in ann.anchors() {
                if t >= frames {
                    return fail(format!("annotation frame {t} outside {frames} frames"));
                }
                if let Some(labels) = &self.frame_labels {
                    if labels.labels()[t] != a {
                        return fail(format!("annotation at frame {t} disagrees with the frame label"));
                    }
                }
            }
        }
        Ok(())
    }

    fn to_line(&self, vocab: &LabelVocab) -> RecordLine {
        let names = |v: &[usize]| v.iter().map(|&k| vocab.name(k).to_string()).collect::<Vec<_>>();
        RecordLine {
            id: self.id.clone(),
            features: self.features.to_rows(),
            frame_labels: self.frame_labels.as_ref().map(|p| names(p.labels())),
            ordering: self.ordering.as_ref().map(|o| names(o.labels())),
            annotations: self.annotations.as_ref().map(|a| {
                a.anchors()
                    .iter()
                    .map(|&(t, k)| (t, vocab.name(k).to_string()))
                    .collect()
            }),
        }
    }

    fn from_line(line: RecordLine, vocab: &LabelVocab) -> Result<Self> {
        let id = line.id;
        let in_record = |e: Error| match e {
            Error::UnknownAction(name) => Error::Record {
                id: id.clone(),
                msg: format!("unknown action `{name}`"),
            },
            Error::Record { .. } => e,
            other => Error::Record {
                id: id.clone(),
                msg: other.to_string(),
            },
        };
        let indices = |names: &[String]| -> Result<Vec<usize>> {
            names.iter().map(|n| vocab.index_of(n)).collect()
        };
        let features = Matrix::from_rows(&line.features).map_err(in_record)?;
        let frame_labels = line
            .frame_labels
            .map(|n| indices(&n).map(Path))
            .transpose()
            .map_err(in_record)?;
        let ordering = line
            .ordering
            .map(|n| indices(&n).and_then(Ordering::new))
            .transpose()
            .map_err(in_record)?;
        let annotations = line
            .annotations
            .map(|pairs| {
                pairs
                    .iter()
                    .map(|(t, n)| vocab.index_of(n).map(|k| (*t, k)))
                    .collect::<Result<Vec<_>>>()
                    .and_then(SparseAnnotations::new)
            })
            .transpose()
            .map_err(in_record)?;
        let record = DatasetRecord {
            id: id.clone(),
            features,
            frame_labels,
            ordering,
            annotations,
        };
        record.validate().map_err(in_record)?;
        Ok(record)
    }
}

pub fn write_corpus(records: &[DatasetRecord], vocab: &LabelVocab, path: &FsPath) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &r.to_line(vocab))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: &FsPath, vocab: &LabelVocab) -> Result<Vec<DatasetRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(DatasetRecord::from_line(parsed, vocab)?);
    }
    Ok(records)
}

pub fn write_vocab(vocab: &LabelVocab, path: &FsPath) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for name in vocab.actions() {
        writeln!(out, "{name}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_vocab(path: &FsPath) -> Result<LabelVocab> {
    let text = std::fs::read_to_string(path)?;
    LabelVocab::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    vocab: Vec<String>,
    config: TrainConfig,
    input_dim: usize,
    hidden: usize,
    actions: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: LabelVocab,
    pub config: TrainConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    /// Refuses data labelled with a different vocabulary.
    pub fn ensure_vocab(&self, data_vocab: &LabelVocab) -> Result<()> {
        if self.vocab.actions() != data_vocab.actions() {
            return Err(Error::VocabMismatch(format!(
                "checkpoint has [{}], data has [{}]",
                self.vocab.actions().join(","),
                data_vocab.actions().join(",")
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &FsPath) -> Result<()> {
    let p = &ckpt.params;
    let tensors = TENSOR_NAMES
        .iter()
        .zip(p.tensor_dims())
        .zip(p.tensors())
        .map(|((name, dims), data)| TensorEntry {
            name: name.to_string(),
            dims,
            data: data.to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        vocab: ckpt.vocab.actions().to_vec(),
        config: ckpt.config.clone(),
        input_dim: p.input_dim,
        hidden: p.hidden,
        actions: p.actions,
        tensors,
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &file)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &FsPath) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "checkpoint has no format_version".into(),
        })?;
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::Version {
            found: found as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value)?;
    let vocab = LabelVocab::new(file.vocab)?;
    if vocab.len() != file.actions {
        return Err(Error::Shape(format!(
            "vocabulary of {} actions for a model with {}",
            vocab.len(),
            file.actions
        )));
    }
    let mut params = ModelParams::zeros(file.input_dim, file.hidden, file.actions);
    if file.tensors.len() != TENSOR_NAMES.len() {
        return Err(Error::Shape(format!(
            "{} tensors, expected {}",
            file.tensors.len(),
            TENSOR_NAMES.len()
        )));
    }
    let dims = params.tensor_dims();
    for (((entry, name), want), slot) in file
        .tensors
        .iter()
        .zip(TENSOR_NAMES)
        .zip(dims)
        .zip(params.tensors_mut())
    {
        if entry.name != name {
            return Err(Error::Shape(format!("tensor `{}` where `{name}` belongs", entry.name)));
        }
        if entry.dims != want {
            return Err(Error::Shape(format!("{name}: dims {:?}, expected {want:?}", entry.dims)));
        }
        if entry.data.len() != slot.len() {
            return Err(Error::Shape(format!(
                "{name}: {} values for dims {want:?}",
                entry.data.len()
            )));
        }
        slot.copy_from_slice(&entry.data);
    }
    Ok(Checkpoint {
        vocab,
        config: file.config,
        params,
    })
}
