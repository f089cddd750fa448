use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::Session;
use crate::scoring::{logistic_fit, plcc, srocc, LogisticFit, ScoreBatch};
use crate::storage::Split;

use super::{Checkpoint, Dataset, HarnessError};

/// One video's prediction next to its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video_id: String,
    pub q_pre: f64,
    pub q_gt: f64,
    pub s_pos: f64,
    pub s_neg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub n: usize,
    pub srocc: f64,
    pub plcc: f64,
    pub logistic: Option<LogisticFit>,
    /// Why the logistic fit is missing, if it is.
    pub logistic_error: Option<String>,
    pub scores: Vec<ScoreRow>,
    /// SHA-256 of config, checkpoint weights, evaluated data and split.
    pub fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Data(format!("malformed report: {e}")))
    }

    /// Metrics and logistic fit over `scores`. A failed fit is recorded in
    /// `logistic_error` rather than failing the report.
    pub fn from_scores(dataset: &str, split: &str, scores: Vec<ScoreRow>, fingerprint: String) -> Result<Self, HarnessError> {
        let batch = ScoreBatch::new(
            scores.iter().map(|r| r.q_pre).collect(),
            scores.iter().map(|r| r.q_gt).collect(),
        )?;
        let (logistic, logistic_error) = match logistic_fit(&batch) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(Self {
            dataset: dataset.to_string(),
            split: split.to_string(),
            n: scores.len(),
            srocc: srocc(&batch)?,
            plcc: plcc(&batch)?,
            logistic,
            logistic_error,
            scores,
            fingerprint,
        })
    }

    pub fn batch(&self) -> Result<ScoreBatch, HarnessError> {
        Ok(ScoreBatch::new(
            self.scores.iter().map(|r| r.q_pre).collect(),
            self.scores.iter().map(|r| r.q_gt).collect(),
        )?)
    }
}

/// Eval-mode predictions for the given records, centred frame windows.
pub fn predict(ckpt: &Checkpoint, data: &Dataset, indices: &[usize]) -> Result<Vec<ScoreRow>, HarnessError> {
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(ckpt.config.batch.max(1)) {
        let batch = data.batch::<f32>(chunk, ckpt.config.num_frames, None)?;
        let mut s = Session::new(&ckpt.store, false);
        let out = ckpt.model.forward(&mut s, &batch, &data.text)?;
        let q = s.graph.value(out.scores.q_pre).data();
        let sp = s.graph.value(out.scores.s_pos).data();
        let sn = s.graph.value(out.scores.s_neg).data();
        for (k, id) in batch.ids.iter().enumerate() {
            rows.push(ScoreRow {
                video_id: id.clone(),
                q_pre: q[k] as f64,
                q_gt: batch.gt[k],
                s_pos: sp[k] as f64,
                s_neg: sn[k] as f64,
            });
        }
    }
    Ok(rows)
}

pub fn split_name(split: Option<Split>) -> String {
    split.map_or_else(|| "all".to_string(), |s| s.to_string())
}

pub fn fingerprint(ckpt: &Checkpoint, data: &Dataset, split: Option<Split>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&ckpt.config).expect("config serializes").as_bytes());
    h.update(ckpt.digest().as_bytes());
    h.update(data.digest.as_bytes());
    h.update(split_name(split).as_bytes());
    hex::encode(h.finalize())
}

/// SROCC, PLCC and a logistic fit over one split (`None` = all records).
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, split: Option<Split>) -> Result<EvalReport, HarnessError> {
    ckpt.config.check_dataset(data)?;
    let indices = data.select(split, ckpt.config.seed)?;
    if indices.len() < 2 {
        return Err(HarnessError::Data(format!(
            "split {} has {} videos; need at least 2",
            split_name(split),
            indices.len()
        )));
    }
    let scores = predict(ckpt, data, &indices)?;
    EvalReport::from_scores(&data.name, &split_name(split), scores, fingerprint(ckpt, data, split))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    pub train_dataset: String,
    pub train_digest: String,
    pub reports: Vec<EvalReport>,
}

/// Evaluates a trained model on every record of each test corpus.
pub fn cross_dataset_eval(ckpt: &Checkpoint, train: &Dataset, tests: &[Dataset]) -> Result<CrossDatasetReport, HarnessError> {
    let reports = tests
        .iter()
        .map(|d| evaluate(ckpt, d, None))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CrossDatasetReport {
        train_dataset: train.name.clone(),
        train_digest: train.digest.clone(),
        reports,
    })
}
