//! Evaluation metrics: AUC-ROC with midrank tie handling, MAE, RMSE.

use super::TrainError;

pub fn mae(pred: &[f64], label: &[f64]) -> f64 {
    assert_eq!(pred.len(), label.len());
    assert!(!pred.is_empty());
    pred.iter().zip(label).map(|(p, l)| (p - l).abs()).sum::<f64>() / pred.len() as f64
}

pub fn rmse(pred: &[f64], label: &[f64]) -> f64 {
    assert_eq!(pred.len(), label.len());
    assert!(!pred.is_empty());
    let mse = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / pred.len() as f64;
    mse.sqrt()
}

/// AUC-ROC via the rank-sum statistic; tied scores share their midrank.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64, TrainError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must be comparable"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties take the average rank of their block
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-target and averaged regression metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMetrics {
    pub per_target_mae: Vec<f64>,
    pub per_target_rmse: Vec<f64>,
    pub avg_mae: f64,
    pub avg_rmse: f64,
}

/// `pred[i][t]` and `label[i][t]`: row per sample, column per target.
pub fn evaluate_regression(pred: &[Vec<f64>], label: &[Vec<f64>]) -> RegressionMetrics {
    assert_eq!(pred.len(), label.len());
    assert!(!pred.is_empty());
    let targets = pred[0].len();
    let mut per_target_mae = Vec::with_capacity(targets);
    let mut per_target_rmse = Vec::with_capacity(targets);
    for t in 0..targets {
        let p: Vec<f64> = pred.iter().map(|r| r[t]).collect();
        let l: Vec<f64> = label.iter().map(|r| r[t]).collect();
        per_target_mae.push(mae(&p, &l));
        per_target_rmse.push(rmse(&p, &l));
    }
    let avg_mae = per_target_mae.iter().sum::<f64>() / targets as f64;
    let avg_rmse = per_target_rmse.iter().sum::<f64>() / targets as f64;
    RegressionMetrics { per_target_mae, per_target_rmse, avg_mae, avg_rmse }
}
