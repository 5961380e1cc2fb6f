//! CSV and JSON serialization of evaluation results.
//!
//! Floats are printed with a fixed number of decimals so reruns produce
//! byte-identical files; undefined values print as `nan`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AblationCell, Metrics};
use crate::error::{Error, Result};

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub classes: usize,
    pub mode: String,
    pub best_epoch: usize,
    pub val_auc: f64,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub datasets: Vec<DatasetReport>,
}

pub fn eval_report_csv(reports: &[DatasetReport]) -> String {
    let mut out = String::from("dataset,classes,mode,n,auc,accuracy,f1,best_epoch,val_auc\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.dataset,
            r.classes,
            r.mode,
            r.test.n,
            num(r.test.auc),
            num(r.test.accuracy),
            num(r.test.f1),
            r.best_epoch,
            num(r.val_auc)
        ));
    }
    out
}

/// Row-normalized confusion matrix with a `true\pred` header.
pub fn confusion_csv(m: &Metrics) -> String {
    let c = m.confusion.len();
    let mut out = String::from("true\\pred");
    for k in 0..c {
        out.push_str(&format!(",{k}"));
    }
    out.push('\n');
    for (k, row) in m.confusion.iter().enumerate() {
        out.push_str(&k.to_string());
        for v in row {
            out.push_str(&format!(",{v:.9}"));
        }
        out.push('\n');
    }
    out
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from(
        "dataset,label_fraction,dropout,mode,status,train_n,best_epoch,val_auc,test_auc,test_accuracy,test_f1\n",
    );
    for c in cells {
        let status = if c.test.is_some() { "ok" } else { "skipped" };
        let (auc, acc, f1) = c
            .test
            .as_ref()
            .map_or((String::new(), String::new(), String::new()), |m| {
                (num(m.auc), num(m.accuracy), num(m.f1))
            });
        out.push_str(&format!(
            "{},{},{},{},{status},{},{},{},{auc},{acc},{f1}\n",
            c.dataset,
            c.fraction,
            c.dropout,
            c.mode.as_str(),
            opt(c.train_n),
            opt(c.best_epoch),
            c.val_auc.map_or_else(String::new, num),
        ));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}
