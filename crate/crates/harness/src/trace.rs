//! Per-iteration selection records and optional feature recordings.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unixkd_core::Tensor64;

use crate::error::{HarnessError, Result};

/// One training iteration: the batch's dataset indices and the batch
/// positions of the samples the teacher was queried on (for mixed inputs,
/// the sort-side base sample).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub batch: Vec<usize>,
    pub selected: Vec<usize>,
}

impl IterationRecord {
    pub fn selected_dataset_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().map(|&p| self.batch[p])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SamplingTrace {
    pub records: Vec<IterationRecord>,
}

impl SamplingTrace {
    pub fn epochs(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch + 1)
    }

    /// Check indices and that every epoch selects the same number of samples.
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Analysis(m));
        let mut per_epoch: Vec<usize> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.batch.iter().any(|&d| d >= dataset_size) {
                return bad(format!("iteration {i}: dataset index out of range"));
            }
            if r.selected.iter().any(|&p| p >= r.batch.len()) {
                return bad(format!("iteration {i}: selected position outside the batch"));
            }
            if per_epoch.len() <= r.epoch {
                per_epoch.resize(r.epoch + 1, 0);
            }
            per_epoch[r.epoch] += r.selected.len();
        }
        if per_epoch.windows(2).any(|w| w[0] != w[1]) {
            return bad("epochs select different numbers of samples".into());
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
        f.write_all(&out).map_err(|e| HarnessError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| HarnessError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(&line)
                .map_err(|e| HarnessError::Analysis(format!("{} line {}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

/// Shapes of the recorded tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingsMeta {
    pub iterations: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub has_teacher_logits: bool,
}

/// Student penultimate features of each raw batch (taken before the
/// update) and teacher logits of each selected input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Recordings {
    /// `[N, d]` per iteration.
    pub features: Vec<Tensor64>,
    /// `[k, C]` per iteration; empty when no teacher was used.
    pub teacher_logits: Vec<Tensor64>,
}

fn write_f32(path: &Path, tensors: &[Tensor64]) -> Result<()> {
    let bytes: Vec<u8> = tensors
        .iter()
        .flat_map(|t| t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect();
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn read_f32(path: &Path, count: usize, shape: [usize; 2]) -> Result<Vec<Tensor64>> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let per = shape[0] * shape[1];
    if bytes.len() != count * per * 4 {
        return Err(HarnessError::Analysis(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            count * per * 4,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(values
        .chunks(per.max(1))
        .take(count)
        .map(|c| Tensor64::from_vec(&shape, c.to_vec()).expect("sized"))
        .collect())
}

impl Recordings {
    pub fn meta(&self, n: usize, k: usize, num_classes: usize) -> RecordingsMeta {
        RecordingsMeta {
            iterations: self.features.len(),
            n,
            k,
            feature_dim: self.features.first().map_or(0, |f| f.item_len()),
            num_classes,
            has_teacher_logits: !self.teacher_logits.is_empty(),
        }
    }

    pub fn write(&self, dir: &Path, meta: &RecordingsMeta) -> Result<()> {
        let path = dir.join("recordings.json");
        let text = serde_json::to_string_pretty(meta).expect("meta serializes");
        fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
        write_f32(&dir.join("features.f32le"), &self.features)?;
        if meta.has_teacher_logits {
            write_f32(&dir.join("teacher_logits.f32le"), &self.teacher_logits)?;
        }
        Ok(())
    }

    /// `None` when the run did not record features.
    pub fn read(dir: &Path) -> Result<Option<(RecordingsMeta, Self)>> {
        let path = dir.join("recordings.json");
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let meta: RecordingsMeta =
            serde_json::from_str(&text).map_err(|e| HarnessError::Analysis(format!("{}: {e}", path.display())))?;
        let features = read_f32(&dir.join("features.f32le"), meta.iterations, [meta.n, meta.feature_dim])?;
        let teacher_logits = if meta.has_teacher_logits {
            read_f32(&dir.join("teacher_logits.f32le"), meta.iterations, [meta.k, meta.num_classes])?
        } else {
            Vec::new()
        };
        Ok(Some((
            meta,
            Self {
                features,
                teacher_logits,
            },
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_round_trips_and_validates() {
        let trace = SamplingTrace {
            records: vec![
                IterationRecord {
                    epoch: 0,
                    batch: vec![4, 1, 3],
                    selected: vec![2, 0],
                },
                IterationRecord {
                    epoch: 1,
                    batch: vec![0, 2, 4],
                    selected: vec![1, 2],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("selection.jsonl");
        trace.write_jsonl(&p).unwrap();
        assert_eq!(SamplingTrace::read_jsonl(&p).unwrap(), trace);
        assert!(trace.validate(5).is_ok());
        assert!(trace.validate(4).is_err());
        assert_eq!(trace.records[0].selected_dataset_indices().collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(trace.epochs(), 2);
    }

    #[test]
    fn recordings_round_trip() {
        let rec = Recordings {
            features: vec![Tensor64::from_vec(&[2, 3], vec![0.5, 1.0, -2.0, 0.25, 0.0, 3.0]).unwrap()],
            teacher_logits: vec![Tensor64::from_vec(&[1, 2], vec![1.5, -0.5]).unwrap()],
        };
        let dir = tempfile::tempdir().unwrap();
        let meta = rec.meta(2, 1, 2);
        rec.write(dir.path(), &meta).unwrap();
        let (m, back) = Recordings::read(dir.path()).unwrap().unwrap();
        assert_eq!(m, meta);
        assert_eq!(back, rec);
    }
}
