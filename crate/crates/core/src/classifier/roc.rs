use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

/// Receiver operating characteristic for class 1 as the positive class.
///
/// Points are listed for decreasing thresholds; the first threshold is `+inf`
/// (nothing predicted positive) and the last is the minimum score (everything
/// predicted positive), so `(0, 0)` and `(1, 1)` are always present. Tied
/// scores form a single step, which makes the trapezoidal area equal to
/// `P(s_pos > s_neg) + P(s_pos == s_neg) / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    pub fn from_scores(scores: &[f64], labels: &[Label]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::contract("scores and labels differ in length"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::contract("NaN score"));
        }
        let n_pos = labels.iter().filter(|&&l| l == Label::Class1).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::contract(
                "ROC needs both classes present; AUC is undefined for a single class",
            ));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

        let mut curve = Self {
            thresholds: vec![f64::INFINITY],
            tpr: vec![0.0],
            fpr: vec![0.0],
            auc: 0.0,
        };
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let threshold = scores[order[i]];
            while i < order.len() && scores[order[i]] == threshold {
                match labels[order[i]] {
                    Label::Class1 => tp += 1,
                    Label::Class0 => fp += 1,
                }
                i += 1;
            }
            let (t, f) = (tp as f64 / n_pos as f64, fp as f64 / n_neg as f64);
            let (pt, pf) = (*curve.tpr.last().unwrap(), *curve.fpr.last().unwrap());
            curve.auc += (f - pf) * (t + pt) / 2.0;
            curve.thresholds.push(threshold);
            curve.tpr.push(t);
            curve.fpr.push(f);
        }
        Ok(curve)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for ((t, f), p) in self.thresholds.iter().zip(&self.fpr).zip(&self.tpr) {
            writeln!(out, "{t},{f},{p}").expect("write to String");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
