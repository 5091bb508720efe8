use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{bleu, cider_d, rouge_l, tokenize, Tokens};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "B1")]
    pub b1: f64,
    #[serde(rename = "B2")]
    pub b2: f64,
    #[serde(rename = "B3")]
    pub b3: f64,
    #[serde(rename = "B4")]
    pub b4: f64,
    #[serde(rename = "ROUGE_L")]
    pub rouge_l: f64,
    #[serde(rename = "CIDEr_D")]
    pub cider_d: f64,
}

impl MetricReport {
    pub fn compute(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<Self> {
        let [b1, b2, b3, b4] = bleu(cands, refs)?;
        Ok(MetricReport {
            b1,
            b2,
            b3,
            b4,
            rouge_l: rouge_l(cands, refs)?,
            cider_d: cider_d(cands, refs)?,
        })
    }

    /// Tokenizes raw strings, then scores.
    pub fn from_text<S: AsRef<str>>(cands: &[S], refs: &[Vec<S>]) -> Result<Self> {
        let c: Vec<Tokens> = cands.iter().map(|s| tokenize(s.as_ref())).collect();
        let r: Vec<Vec<Tokens>> = refs
            .iter()
            .map(|rs| rs.iter().map(|s| tokenize(s.as_ref())).collect())
            .collect();
        Self::compute(&c, &r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }

    pub fn csv_header() -> &'static str {
        "B1,B2,B3,B4,ROUGE_L,CIDEr_D"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.b1, self.b2, self.b3, self.b4, self.rouge_l, self.cider_d
        )
    }
}

/// One line of an evaluation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

pub fn read_eval_jsonl(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format("evaluation record", format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
