//! TOML result files.
//!
//! A result embeds everything needed to re-check it: the original problem
//! text (with its SHA-256 digest), the trained weights in the network text
//! format, per-condition verdicts, derived bounds, and the iteration trace.
//! In sequential mode the wall-clock field is zeroed so identical runs
//! produce byte-identical files.

use anyhow::{anyhow, Result};
use certkit::cegis::CegisResult;
use certkit::net::Network;
use certkit::verifier::Verdict;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub version: String,
    /// "certified" or "not-certified".
    pub status: String,
    pub problem_digest: String,
    pub restarts: usize,
    /// Zero when the run was in bit-reproducible sequential mode.
    pub wall_ms: u64,
    pub verdicts: Vec<VerdictRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundRecord>,
    pub iterations: Vec<IterationRecordRow>,
    pub problem: EmbeddedText,
    pub certificate: EmbeddedText,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<EmbeddedText>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddedText {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRecord {
    pub id: String,
    /// "certified", "falsified", "unknown", or "resource-exhausted".
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes_processed: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undecided: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smallest_width: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundRecord {
    pub description: String,
    pub value: f64,
    pub vacuous: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationRecordRow {
    pub iteration: usize,
    pub restart: usize,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub epochs: usize,
    pub counterexamples: usize,
}

pub fn problem_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    format!("sha256:{:x}", hasher.finalize())
}

pub fn verdict_record(id: &str, verdict: &Verdict) -> VerdictRecord {
    let mut rec = VerdictRecord {
        id: id.to_string(),
        verdict: String::new(),
        boxes_processed: None,
        counterexample: None,
        violation: None,
        undecided: None,
        smallest_width: None,
    };
    match verdict {
        Verdict::Certified { boxes_processed } => {
            rec.verdict = "certified".into();
            rec.boxes_processed = Some(*boxes_processed);
        }
        Verdict::Falsified {
            counterexample,
            violation,
        } => {
            rec.verdict = "falsified".into();
            rec.counterexample = Some(counterexample.clone());
            rec.violation = Some(*violation);
        }
        Verdict::Unknown {
            undecided,
            smallest_width,
            boxes_processed,
            ..
        } => {
            rec.verdict = "unknown".into();
            rec.undecided = Some(*undecided);
            rec.smallest_width = Some(*smallest_width);
            rec.boxes_processed = Some(*boxes_processed);
        }
        Verdict::ResourceExhausted { boxes_processed } => {
            rec.verdict = "resource-exhausted".into();
            rec.boxes_processed = Some(*boxes_processed);
        }
    }
    rec
}

/// Assemble a result file from a finished run.
pub fn build_result(problem_text: &str, result: &CegisResult, wall_ms: u64) -> ResultFile {
    ResultFile {
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: if result.certified {
            "certified".into()
        } else {
            "not-certified".into()
        },
        problem_digest: problem_digest(problem_text),
        restarts: result.restarts,
        wall_ms,
        verdicts: result
            .verdicts
            .iter()
            .map(|(id, v)| verdict_record(id, v))
            .collect(),
        bound: result.bound.as_ref().map(|b| BoundRecord {
            description: b.description.clone(),
            value: b.value,
            vacuous: b.vacuous,
        }),
        iterations: result
            .iterations
            .iter()
            .map(|it| IterationRecordRow {
                iteration: it.iteration,
                restart: it.restart,
                initial_loss: it.train.initial_loss,
                best_loss: it.train.best_loss,
                epochs: it.train.epochs_run,
                counterexamples: it.counterexamples.iter().map(|(_, n)| n).sum(),
            })
            .collect(),
        problem: EmbeddedText {
            text: problem_text.to_string(),
        },
        certificate: EmbeddedText {
            text: result.certificate.to_text(),
        },
        controller: result.controller.as_ref().map(|c| EmbeddedText {
            text: c.to_text(),
        }),
    }
}

impl ResultFile {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("result files serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("result file: {e}"))
    }

    pub fn certificate_network(&self) -> Result<Network> {
        Network::from_text(&self.certificate.text).map_err(|e| anyhow!("certificate weights: {e}"))
    }

    pub fn controller_network(&self) -> Result<Option<Network>> {
        self.controller
            .as_ref()
            .map(|c| Network::from_text(&c.text).map_err(|e| anyhow!("controller weights: {e}")))
            .transpose()
    }
}
