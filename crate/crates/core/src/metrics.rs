//! Identification quality of a score table against class pseudo-labels.
//!
//! For each valuation record, training records get pseudo-label 1 when
//! their class matches (and, in mislabel mode, when they are also clean).
//! AUC is the Mann–Whitney statistic of the scores against those labels;
//! recall is the positive fraction among the top `p` scores, where `p` is
//! the number of positives.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::ScoreTable;
use crate::valuation::rank_scores;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// 1 iff same class.
    Influence,
    /// 1 iff same class and the training record is clean.
    Mislabel,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "influence" => Ok(LabelMode::Influence),
            "mislabel" => Ok(LabelMode::Mislabel),
            other => Err(Error::InvalidArgument(format!("unknown label mode {other:?}"))),
        }
    }
}

/// Binary pseudo-labels of the training set for one valuation class.
pub fn pseudo_labels(
    train_labels: &[&str],
    valuation_label: &str,
    mode: LabelMode,
    clean: Option<&[bool]>,
) -> Result<Vec<bool>> {
    match mode {
        LabelMode::Influence => Ok(train_labels.iter().map(|&l| l == valuation_label).collect()),
        LabelMode::Mislabel => {
            let clean = clean.ok_or_else(|| Error::InvalidArgument("mislabel mode needs clean flags".into()))?;
            if clean.len() != train_labels.len() {
                return Err(Error::LengthMismatch {
                    what: "clean flags",
                    expected: train_labels.len(),
                    found: clean.len(),
                });
            }
            Ok(train_labels
                .iter()
                .zip(clean)
                .map(|(&l, &c)| c && l == valuation_label)
                .collect())
        }
    }
}

/// Area under the ROC curve, `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`,
/// computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of midranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        rank_sum += midrank * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * q))
}

/// Fraction of positives among the top-`p` scores (descending, ties by
/// ascending index), `p` = number of positives.
pub fn recall_at_class(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    let p = labels.iter().filter(|&&l| l).count();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits = order[..p].iter().filter(|&&i| labels[i]).count();
    Ok(hits as f64 / p as f64)
}

/// Class label and optional clean flag per sample id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelTable {
    entries: HashMap<String, (String, Option<bool>)>,
}

impl LabelTable {
    pub fn insert(&mut self, id: impl Into<String>, class: impl Into<String>, clean: Option<bool>) {
        self.entries.insert(id.into(), (class.into(), clean));
    }

    pub fn class(&self, id: &str) -> Option<&str> {
        self.entries.get(id).map(|e| e.0.as_str())
    }

    pub fn clean(&self, id: &str) -> Option<bool> {
        self.entries.get(id).and_then(|e| e.1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `id class [clean]` lines, separated by commas and/or
    /// whitespace. `clean` is `0`/`1` (or `false`/`true`). Blank lines and
    /// lines starting with `#` are ignored, as is a leading `id,class...`
    /// header.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = LabelTable::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            if n == 0 && fields.first() == Some(&"id") {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("labels line {}: {line:?}", n + 1));
            let clean = match fields.as_slice() {
                [_, _] => None,
                [_, _, c] => Some(match *c {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(bad()),
                }),
                _ => return Err(bad()),
            };
            if table.entries.contains_key(fields[0]) {
                return Err(Error::DuplicateId(fields[0].to_string()));
            }
            table.insert(fields[0], fields[1], clean);
        }
        Ok(table)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuationMetrics {
    pub valuation_id: String,
    pub auc: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedValuation {
    pub valuation_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: LabelMode,
    pub per_valuation: Vec<ValuationMetrics>,
    pub mean_auc: f64,
    pub mean_recall: f64,
    /// Sample standard deviation across valuation points.
    pub std_auc: f64,
    pub std_recall: f64,
    pub n_valuation: usize,
    pub skipped: Vec<SkippedValuation>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "AUC     {:.3} ± {:.3}  (std across {} valuation points)",
            self.mean_auc, self.std_auc, self.n_valuation
        )?;
        write!(
            f,
            "Recall  {:.3} ± {:.3}  (std across {} valuation points)",
            self.mean_recall, self.std_recall, self.n_valuation
        )?;
        if !self.skipped.is_empty() {
            write!(f, "\nskipped {} valuation points", self.skipped.len())?;
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// AUC and recall for every valuation row of `table`, and their means.
/// Rows whose metrics are undefined (no positives or no negatives) are
/// skipped and listed in the report.
pub fn evaluate(table: &ScoreTable, labels: &LabelTable, mode: LabelMode) -> Result<EvalReport> {
    let train_labels = table
        .training_ids
        .iter()
        .map(|id| labels.class(id).ok_or_else(|| Error::UnknownId(format!("no label for {id}"))))
        .collect::<Result<Vec<_>>>()?;
    let clean = match mode {
        LabelMode::Influence => None,
        LabelMode::Mislabel => Some(
            table
                .training_ids
                .iter()
                .map(|id| labels.clean(id).ok_or_else(|| Error::UnknownId(format!("no clean flag for {id}"))))
                .collect::<Result<Vec<_>>>()?,
        ),
    };

    let mut per_valuation = Vec::new();
    let mut skipped = Vec::new();
    for (v, vid) in table.valuation_ids.iter().enumerate() {
        let vlabel = labels
            .class(vid)
            .ok_or_else(|| Error::UnknownId(format!("no label for {vid}")))?;
        let pl = pseudo_labels(&train_labels, vlabel, mode, clean.as_deref())?;
        let scores = table.row(v);
        match (auc(scores, &pl), recall_at_class(scores, &pl)) {
            (Ok(a), Ok(r)) => per_valuation.push(ValuationMetrics {
                valuation_id: vid.clone(),
                auc: a,
                recall: r,
            }),
            (Err(e), _) | (_, Err(e)) => skipped.push(SkippedValuation {
                valuation_id: vid.clone(),
                reason: e.to_string(),
            }),
        }
    }
    if per_valuation.is_empty() {
        return Err(Error::Empty("valuation points with defined metrics"));
    }
    let aucs: Vec<f64> = per_valuation.iter().map(|m| m.auc).collect();
    let recalls: Vec<f64> = per_valuation.iter().map(|m| m.recall).collect();
    let (mean_auc, std_auc) = mean_std(&aucs);
    let (mean_recall, std_recall) = mean_std(&recalls);
    Ok(EvalReport {
        mode,
        n_valuation: per_valuation.len(),
        per_valuation,
        mean_auc,
        mean_recall,
        std_auc,
        std_recall,
        skipped,
    })
}

/// Training ids flagged as suspicious: the lowest `fraction` of
/// `group_scores` (rounded to the nearest count), lowest first.
pub fn bottom_fraction<'a>(ids: &'a [String], group_scores: &[f64], fraction: f64) -> Result<Vec<(&'a str, f64)>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} not in (0, 1)")));
    }
    let mut ranked = rank_scores(ids, group_scores);
    ranked.reverse();
    let n = (fraction * ids.len() as f64).round() as usize;
    ranked.truncate(n);
    Ok(ranked)
}

/// Training ids whose group score is strictly below `threshold`, lowest
/// first.
pub fn below_value<'a>(ids: &'a [String], group_scores: &[f64], threshold: f64) -> Vec<(&'a str, f64)> {
    let mut ranked = rank_scores(ids, group_scores);
    ranked.reverse();
    ranked.retain(|(_, s)| *s < threshold);
    ranked
}
