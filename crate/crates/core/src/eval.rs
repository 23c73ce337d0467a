//! Accuracy over multiple-choice and exact-match QA.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Choice,
    Exact,
}

impl std::str::FromStr for EvalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "choice" => Ok(Self::Choice),
            "exact" => Ok(Self::Exact),
            _ => Err(Error::InvalidConfig(format!("unknown eval kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    pub kind: EvalKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub n: usize,
}

/// First letter A–E that is not part of a longer word.
pub fn choice_letter(text: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len()).find_map(|i| {
        let c = chars[i];
        let standalone = ('A'..='E').contains(&c)
            && (i == 0 || !chars[i - 1].is_alphanumeric())
            && chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        standalone.then_some(c)
    })
}

fn correct(rec: &EvalRecord) -> bool {
    match rec.kind {
        EvalKind::Choice => {
            let p = choice_letter(&rec.prediction);
            p.is_some() && p == choice_letter(&rec.gold)
        }
        EvalKind::Exact => rec.prediction.trim().to_lowercase() == rec.gold.trim().to_lowercase(),
    }
}

pub fn evaluate(records: &[EvalRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if let Some(r) = records.iter().find(|r| r.gold.trim().is_empty()) {
        return Err(Error::InvalidRecord(format!("empty gold for {}", r.id)));
    }
    let hits = records.iter().filter(|r| correct(r)).count();
    Ok(Metrics {
        accuracy: hits as f64 / records.len() as f64,
        n: records.len(),
    })
}

#[derive(Debug, Deserialize)]
struct Line {
    id: String,
    text: String,
}

fn read_lines(path: &Path) -> Result<Vec<Line>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Joins prediction and gold JSON Lines files (`{"id", "text"}`) on id, in
/// gold order. A missing prediction counts as an empty one.
pub fn load_pairs(pred: &Path, gold: &Path, kind: EvalKind) -> Result<Vec<EvalRecord>> {
    let preds: HashMap<String, String> = read_lines(pred)?.into_iter().map(|l| (l.id, l.text)).collect();
    Ok(read_lines(gold)?
        .into_iter()
        .map(|g| EvalRecord {
            prediction: preds.get(&g.id).cloned().unwrap_or_default(),
            id: g.id,
            gold: g.text,
            kind,
        })
        .collect())
}
