//! Binary classification metrics and the pretrained-vs-scratch transfer gain.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

/// Label index treated as positive for F1 and AUC.
pub const POSITIVE_CLASS: usize = 1;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return contract_err(format!("metric inputs must be nonempty and equal length, got {a} and {b}"));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Binary confusion counts; every prediction and label must be 0 or 1.
pub fn confusion(preds: &[usize], labels: &[usize], positive_class: usize) -> Result<Confusion> {
    check_lengths(preds.len(), labels.len())?;
    if positive_class > 1 || preds.iter().chain(labels).any(|&v| v > 1) {
        return contract_err("F1 needs binary predictions and labels");
    }
    let mut c = Confusion::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive_class, l == positive_class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    /// `2PR / (P + R)`, zero when both vanish.
    pub fn f1(&self) -> f64 {
        let precision = if self.tp + self.fp == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 };
        let recall = if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

pub fn f1(preds: &[usize], labels: &[usize], positive_class: usize) -> Result<f64> {
    Ok(confusion(preds, labels, positive_class)?.f1())
}

/// Mann-Whitney estimate of ROC AUC for binary labels (positive = 1), with
/// tied scores sharing their mean rank.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if labels.iter().any(|&l| l > 1) {
        return contract_err("AUC needs binary labels");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return contract_err("AUC scores contain NaN");
    }
    let n_pos = labels.iter().filter(|&&l| l == POSITIVE_CLASS).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == POSITIVE_CLASS {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EvalResult {
    /// `scores` are positive-class scores used for AUC.
    pub fn compute(preds: &[usize], scores: &[f64], labels: &[usize]) -> Result<Self> {
        let c = confusion(preds, labels, POSITIVE_CLASS)?;
        Ok(Self {
            accuracy: accuracy(preds, labels)?,
            f1: c.f1(),
            auc: auc(scores, labels)?,
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        })
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `{accuracy, f1, auc, tp, fp, tn, fn}` with six decimals.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"accuracy\": {:.6}, \"f1\": {:.6}, \"auc\": {:.6}, \"tp\": {}, \"fp\": {}, \"tn\": {}, \"fn\": {}}}",
            self.accuracy, self.f1, self.auc, self.tp, self.fp, self.tn, self.fn_
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Trained from scratch.
    pub p_n: EvalResult,
    /// Finetuned from a pretrained model.
    pub p_p: EvalResult,
    pub improvement: MetricDelta,
}

pub fn transfer_gain(p_n: &EvalResult, p_p: &EvalResult) -> TransferReport {
    TransferReport {
        p_n: *p_n,
        p_p: *p_p,
        improvement: MetricDelta {
            accuracy: p_p.accuracy - p_n.accuracy,
            f1: p_p.f1 - p_n.f1,
            auc: p_p.auc - p_n.auc,
        },
    }
}

impl TransferReport {
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let d = &self.improvement;
        write!(
            s,
            "{{\"scratch\": {}, \"pretrained\": {}, \"improvement\": {{\"accuracy\": {:.6}, \"f1\": {:.6}, \"auc\": {:.6}}}}}",
            self.p_n.to_json(),
            self.p_p.to_json(),
            d.accuracy,
            d.f1,
            d.auc
        )
        .expect("writing to a string");
        s
    }
}
