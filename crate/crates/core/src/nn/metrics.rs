use std::fmt::Write as _;

use super::data::Dataset;
use super::net::DenseNet;
use super::NnError;

/// Counts and scores for one class, treated one-vs-rest.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClass {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose true label is this class.
    pub support: usize,
    /// No true samples: scores are 0 and the class is left out of the
    /// aggregates.
    pub zero_support: bool,
    /// Never predicted: precision's denominator was 0, reported as 0.
    pub no_predictions: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub per_class: Vec<PerClass>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub samples: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_labels(truth: &[usize], pred: &[usize], classes: usize) -> Result<ClassMetrics, NnError> {
    if truth.is_empty() {
        return Err(NnError::Data("cannot evaluate an empty dataset".into()));
    }
    if truth.len() != pred.len() {
        return Err(NnError::Data(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&l| l >= classes) {
        return Err(NnError::Data(format!("label {bad} outside {classes} classes")));
    }
    let n = truth.len();
    let per_class: Vec<PerClass> = (0..classes)
        .map(|c| {
            let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count();
            let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count();
            let fn_ = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count();
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            PerClass {
                tp,
                fp,
                fn_,
                tn: n - tp - fp - fn_,
                precision,
                recall,
                f1,
                support: tp + fn_,
                zero_support: tp + fn_ == 0,
                no_predictions: tp + fp == 0,
            }
        })
        .collect();

    let present: Vec<&PerClass> = per_class.iter().filter(|c| !c.zero_support).collect();
    let k = present.len() as f64;
    let mean = |f: fn(&PerClass) -> f64| present.iter().map(|c| f(c)).sum::<f64>() / k;
    let weighted = |f: fn(&PerClass) -> f64| present.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / n as f64;
    Ok(ClassMetrics {
        accuracy: ratio(truth.iter().zip(pred).filter(|(t, p)| t == p).count(), n),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        weighted_precision: weighted(|c| c.precision),
        weighted_recall: weighted(|c| c.recall),
        weighted_f1: weighted(|c| c.f1),
        per_class,
        samples: n,
    })
}

pub fn evaluate(net: &DenseNet, data: &Dataset) -> Result<ClassMetrics, NnError> {
    if data.is_empty() {
        return Err(NnError::Data("cannot evaluate an empty dataset".into()));
    }
    let pred = net.predict_labels(&data.features)?;
    metrics_from_labels(&data.label_indices(), &pred, data.classes.max(net.classes()))
}

impl ClassMetrics {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples {}", self.samples);
        let _ = writeln!(s, "accuracy {:.6}", self.accuracy);
        let _ = writeln!(
            s,
            "macro precision {:.6} recall {:.6} f1 {:.6}",
            self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(
            s,
            "weighted precision {:.6} recall {:.6} f1 {:.6}",
            self.weighted_precision, self.weighted_recall, self.weighted_f1
        );
        for (i, c) in self.per_class.iter().enumerate() {
            let flag = if c.zero_support { " (no support)" } else { "" };
            let _ = writeln!(
                s,
                "class {i}: precision {:.6} recall {:.6} f1 {:.6} support {}{flag}",
                c.precision, c.recall, c.f1, c.support
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,tp,fp,fn,tn,precision,recall,f1,support,zero_support\n");
        for (i, c) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{:?},{:?},{:?},{},{}",
                c.tp, c.fp, c.fn_, c.tn, c.precision, c.recall, c.f1, c.support, c.zero_support
            );
        }
        s
    }
}
