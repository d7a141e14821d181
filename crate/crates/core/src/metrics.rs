//! Classification and regression metrics.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{FstMamba, Task};
use crate::tensor::Tensor;
use crate::train::{batch_loss, Dataset};

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub loss: f64,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted
/// half. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over runs of equal scores
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Model outputs `[n, outputs]` for the samples in `idx`, batched.
pub fn predict(model: &FstMamba, data: &Dataset, idx: &[usize], batch_size: usize) -> Result<Tensor> {
    let k = model.n_outputs();
    let mut out = Vec::with_capacity(idx.len() * k);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk);
        out.extend_from_slice(model.forward(&x)?.data());
    }
    Tensor::from_vec(&[idx.len(), k], out)
}

/// Positive-class score `logit_1 - logit_0` and argmax class per row.
pub fn class_scores(logits: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let rows = logits.shape()[0];
    let d = logits.data();
    let scores: Vec<f64> = (0..rows).map(|r| d[2 * r + 1] - d[2 * r]).collect();
    let predicted = scores.iter().map(|&s| usize::from(s > 0.0)).collect();
    (scores, predicted)
}

pub fn evaluate(model: &FstMamba, data: &Dataset, batch_size: usize) -> Result<MetricReport> {
    let idx: Vec<usize> = (0..data.len()).collect();
    evaluate_indices(model, data, &idx, batch_size)
}

/// Metrics over the samples in `idx`.
pub fn evaluate_indices(model: &FstMamba, data: &Dataset, idx: &[usize], batch_size: usize) -> Result<MetricReport> {
    if idx.is_empty() {
        return Err(Error::Config("cannot evaluate an empty sample set".into()));
    }
    if model.cfg.task != data.task {
        return Err(Error::Config("model and dataset tasks differ".into()));
    }
    let mut loss = 0.0;
    let mut outputs = Vec::with_capacity(idx.len() * model.n_outputs());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let (l, out) = batch_loss(model, &x, &y)?;
        loss += l * chunk.len() as f64;
        outputs.extend_from_slice(out.data());
    }
    let mut report = MetricReport { n: idx.len(), loss: loss / idx.len() as f64, ..Default::default() };
    let out = Tensor::from_vec(&[idx.len(), model.n_outputs()], outputs)?;
    let targets: Vec<f64> = idx.iter().map(|&i| data.targets[i]).collect();
    match data.task {
        Task::BinaryClassification => {
            let labels: Vec<usize> = targets.iter().map(|&y| y as usize).collect();
            let (scores, predicted) = class_scores(&out);
            report.acc = Some(accuracy(&predicted, &labels));
            report.auc = auc(&scores, &labels);
            if report.auc.is_none() {
                report.warnings.push("AUC undefined: evaluation set holds a single class".into());
            }
        }
        Task::Regression => {
            let n = targets.len() as f64;
            let (mut ae, mut se) = (0.0, 0.0);
            for (p, y) in out.data().iter().zip(&targets) {
                ae += (p - y).abs();
                se += (p - y) * (p - y);
            }
            report.mae = Some(ae / n);
            report.mse = Some(se / n);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_and_reversed_rankings() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]), Some(0.0));
    }

    #[test]
    fn six_sample_hand_case_matches_pair_counting() {
        let scores = [0.3, 0.7, 0.7, 0.1, 0.5, 0.7];
        let labels = [0, 1, 0, 0, 1, 1];
        // positives 0.7, 0.5, 0.7 against negatives 0.3, 0.7, 0.1
        // wins: 0.7 → 2 + 0.5, 0.5 → 2, 0.7 → 2 + 0.5  = 7 of 9
        assert!((auc(&scores, &labels).unwrap() - 7.0 / 9.0).abs() < 1e-15);
        assert!((brute_auc(&scores, &labels) - 7.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn ties_everywhere_give_one_half() {
        assert_eq!(auc(&[1.0; 6], &[0, 1, 0, 1, 1, 0]), Some(0.5));
    }

    #[test]
    fn single_class_is_undefined() {
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), None);
        assert_eq!(auc(&[0.1, 0.2], &[0, 0]), None);
    }

    #[test]
    fn random_scores_match_brute_force_and_hover_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for n in [7, 40, 200] {
            // coarse scores force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 10.0).floor()).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let a = auc(&scores, &labels).unwrap();
            assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
        }
        let n = 20000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn accuracy_counts_hits() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]), 0.5);
    }
}
