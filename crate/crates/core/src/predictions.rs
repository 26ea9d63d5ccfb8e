//! Prediction files: one JSON object per line, one line per example, in
//! corpus order. Tags and relation labels are stored as strings so the
//! files stand on their own without a vocabulary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ExampleRecord;
use crate::ensemble::RunPredictions;
use crate::error::{Error, Result};
use crate::labels::{parse_tag, LabelVocab, RelationVocab};
use crate::model::Prediction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub relations: Vec<(usize, usize, String)>,
    pub run_id: String,
    pub checkpoint: String,
}

impl PredictionRecord {
    pub fn from_prediction(
        record: &ExampleRecord,
        prediction: &Prediction,
        labels: &LabelVocab,
        relations: &RelationVocab,
        run_id: &str,
        checkpoint: &str,
    ) -> PredictionRecord {
        PredictionRecord {
            tokens: record.tokens.clone(),
            tags: prediction.tags.iter().map(|&t| labels.tag(t).to_string()).collect(),
            relations: prediction
                .relations
                .iter()
                .map(|&(h, t, k)| (h, t, relations.label(k).to_string()))
                .collect(),
            run_id: run_id.to_string(),
            checkpoint: checkpoint.to_string(),
        }
    }

    pub fn validate(&self, where_: &str) -> Result<()> {
        if self.tags.len() != self.tokens.len() {
            return Err(Error::Schema(format!(
                "{where_}: {} tags for {} tokens",
                self.tags.len(),
                self.tokens.len()
            )));
        }
        for (h, t, _) in &self.relations {
            if *h >= self.tokens.len() || *t >= self.tokens.len() {
                return Err(Error::Schema(format!(
                    "{where_}: relation ({h}, {t}) outside 0..{}",
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for record in records {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| Error::Schema(format!("serializing prediction: {e}")))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, i + 1, format!("bad prediction record: {e}")))?;
        record.validate(&format!("{}:{}", path.display(), i + 1))?;
        records.push(record);
    }
    Ok(records)
}

/// Convert a prediction file back to id space for voting or scoring.
pub fn to_run_predictions(
    records: &[PredictionRecord],
    labels: &LabelVocab,
    relations: &RelationVocab,
) -> Result<RunPredictions> {
    let run_id = records
        .first()
        .map(|r| r.run_id.clone())
        .unwrap_or_else(|| "empty".into());
    let mut tags = Vec::with_capacity(records.len());
    let mut rels = Vec::with_capacity(records.len());
    for record in records {
        tags.push(
            record
                .tags
                .iter()
                .map(|t| parse_tag(labels, t))
                .collect::<Result<Vec<usize>>>()?,
        );
        rels.push(
            record
                .relations
                .iter()
                .map(|(h, t, l)| {
                    let k = relations
                        .id(l)
                        .ok_or_else(|| Error::Schema(format!("unknown relation label {l:?}")))?;
                    Ok((*h, *t, k))
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(RunPredictions {
        run_id,
        tags,
        relations: Some(rels),
    })
}
