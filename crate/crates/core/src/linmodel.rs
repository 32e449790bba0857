//! Class-weighted logistic regression trained by full-batch gradient descent
//! with a backtracking line search.
//!
//! Season one-hot columns act as per-season intercepts (`alpha`, unpenalized);
//! every other column gets a ridge-penalized coefficient (`beta`). There is no
//! separate global intercept, which avoids collinearity with the full one-hot.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;

/// Exponent clamp keeping the sigmoid strictly inside (0, 1) in f64.
const SCORE_CLAMP: f64 = 30.0;

const CHUNK: usize = 4096;

/// Fitted logistic regression model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LRModel {
    /// Column names, in table order; names starting with `season_` are
    /// intercept columns.
    pub feature_names: Vec<String>,
    /// Intercept weight per season column (may be empty).
    pub alpha: Vec<f64>,
    /// Coefficient per non-season column.
    pub beta: Vec<f64>,
    pub l2: f64,
    /// Decision threshold on predicted probability; `None` until calibrated.
    pub threshold: Option<f64>,
}

impl LRModel {
    fn weights_by_column(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.feature_names.len());
        let mut ai = 0;
        let mut bi = 0;
        for name in &self.feature_names {
            if name.starts_with("season_") {
                w.push(self.alpha[ai]);
                ai += 1;
            } else {
                w.push(self.beta[bi]);
                bi += 1;
            }
        }
        w
    }
}

/// Options for [`lr_fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrOptions {
    /// `(w_pos, w_neg)`; `None` selects `(N_neg / N_pos, 1)` on the train rows.
    pub class_weights: Option<(f64, f64)>,
    pub l2: f64,
    pub max_iters: usize,
    /// Convergence threshold on the gradient ∞-norm.
    pub tol: f64,
    /// Initial step size handed to the backtracking line search.
    pub init_step: f64,
}

impl Default for LrOptions {
    fn default() -> Self {
        Self {
            class_weights: None,
            l2: 1e-4,
            max_iters: 500,
            tol: 1e-6,
            init_step: 1.0,
        }
    }
}

fn sigmoid(score: f64) -> f64 {
    let z = score.clamp(-SCORE_CLAMP, SCORE_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

/// Predicted occupancy probability for one feature vector, strictly in (0, 1).
pub fn lr_predict_proba(model: &LRModel, x: &[f64]) -> Result<f64> {
    let d = model.feature_names.len();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let w = model.weights_by_column();
    let score: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
    Ok(sigmoid(score))
}

fn raw_score(weights: &[f64], row: &[f64]) -> f64 {
    weights.iter().zip(row).map(|(w, x)| w * x).sum()
}

/// Mean weighted negative log-likelihood plus ridge on the beta columns,
/// with its gradient over the per-column weight vector.
fn loss_and_grad(
    table: &FeatureTable,
    rows: &std::ops::Range<usize>,
    weights: &[f64],
    sample_weights: (f64, f64),
    l2: f64,
    season_col: &[bool],
) -> (f64, Vec<f64>) {
    let d = table.n_cols();
    let n = rows.len() as f64;
    let row_ids: Vec<usize> = rows.clone().collect();
    let partials: Vec<(f64, Vec<f64>)> = row_ids
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; d];
            for &i in chunk {
                let row = table.row(i);
                let y = table.labels[i] as f64;
                let sw = if table.labels[i] == 1 {
                    sample_weights.0
                } else {
                    sample_weights.1
                };
                let z = raw_score(weights, row).clamp(-SCORE_CLAMP, SCORE_CLAMP);
                // -[w_p y ln p + (1-y) ln(1-p)] in the stable softplus form
                let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
                loss += sw * (y * softplus(-z) + (1.0 - y) * softplus(z));
                let p = sigmoid(z);
                let residual = sw * ((1.0 - y) * p - y * (1.0 - p));
                for j in 0..d {
                    grad[j] += residual * row[j];
                }
            }
            (loss, grad)
        })
        .collect();
    // fixed-order reduction keeps the fit bit-reproducible
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    for (l, g) in partials {
        loss += l;
        for j in 0..d {
            grad[j] += g[j];
        }
    }
    loss /= n;
    for j in 0..d {
        grad[j] /= n;
        if !season_col[j] {
            loss += 0.5 * l2 * weights[j] * weights[j];
            grad[j] += l2 * weights[j];
        }
    }
    (loss, grad)
}

/// Fit by full-batch gradient descent with Armijo backtracking.
///
/// Converges when the gradient ∞-norm drops below `tol` or `max_iters` is
/// reached; the returned model has no threshold yet.
pub fn lr_fit(table: &FeatureTable, opts: &LrOptions) -> Result<LRModel> {
    let rows = table.split.train.clone();
    let n_pos = rows.clone().filter(|&i| table.labels[i] == 1).count();
    let n_neg = rows.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassTraining);
    }
    let sample_weights = opts
        .class_weights
        .unwrap_or((n_neg as f64 / n_pos as f64, 1.0));

    let d = table.n_cols();
    let season_col: Vec<bool> = table.names.iter().map(|n| n.starts_with("season_")).collect();
    let mut weights = vec![0.0; d];
    let mut step = opts.init_step;
    let (mut loss, mut grad) = loss_and_grad(
        table,
        &rows,
        &weights,
        sample_weights,
        opts.l2,
        &season_col,
    );
    for iter in 0..opts.max_iters {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }
        let grad_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf < opts.tol {
            break;
        }
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        // Armijo backtracking
        let mut s = step;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = weights
                .iter()
                .zip(&grad)
                .map(|(w, g)| w - s * g)
                .collect();
            let (trial_loss, trial_grad) = loss_and_grad(
                table,
                &rows,
                &trial,
                sample_weights,
                opts.l2,
                &season_col,
            );
            if trial_loss <= loss - 1e-4 * s * grad_sq {
                weights = trial;
                loss = trial_loss;
                grad = trial_grad;
                step = (s * 2.0).min(1e3);
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            break; // step underflow: gradient noise floor reached
        }
    }

    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    for (j, &is_season) in season_col.iter().enumerate() {
        if is_season {
            alpha.push(weights[j]);
        } else {
            beta.push(weights[j]);
        }
    }
    Ok(LRModel {
        feature_names: table.names.clone(),
        alpha,
        beta,
        l2: opts.l2,
        threshold: None,
    })
}

/// Probabilities for a row range of a table.
pub fn lr_scores(model: &LRModel, table: &FeatureTable, rows: std::ops::Range<usize>) -> Vec<f64> {
    let w = model.weights_by_column();
    rows.map(|i| sigmoid(raw_score(&w, table.row(i)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SplitRanges;
    use crate::features::table_from_parts;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn all_train(rows: &[Vec<f64>], labels: &[u8], names: &[&str]) -> FeatureTable {
        let n = rows.len();
        table_from_parts(
            names,
            rows,
            labels,
            SplitRanges {
                train: 0..n,
                val: 0..0,
                test: 0..0,
            },
        )
    }

    #[test]
    fn zero_weights_give_half() {
        let model = LRModel {
            feature_names: vec!["co2".into(), "rh".into()],
            alpha: vec![],
            beta: vec![0.0, 0.0],
            l2: 0.0,
            threshold: None,
        };
        assert_eq!(lr_predict_proba(&model, &[3.0, -2.0]).unwrap(), 0.5);
    }

    #[test]
    fn log_three_score_gives_three_quarters() {
        let model = LRModel {
            feature_names: vec!["x".into()],
            alpha: vec![],
            beta: vec![3.0f64.ln()],
            l2: 0.0,
            threshold: None,
        };
        let p = lr_predict_proba(&model, &[1.0]).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = LRModel {
            feature_names: vec!["x".into()],
            alpha: vec![],
            beta: vec![1.0],
            l2: 0.0,
            threshold: None,
        };
        assert!(matches!(
            lr_predict_proba(&model, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn probability_strictly_inside_unit_interval() {
        let model = LRModel {
            feature_names: vec!["x".into()],
            alpha: vec![],
            beta: vec![1e6],
            l2: 0.0,
            threshold: None,
        };
        let hi = lr_predict_proba(&model, &[1.0]).unwrap();
        let lo = lr_predict_proba(&model, &[-1.0]).unwrap();
        assert!(hi < 1.0 && hi > 0.99);
        assert!(lo > 0.0 && lo < 0.01);
    }

    #[test]
    fn matches_direct_logit_evaluation() {
        // independent route: p = exp(z) / (1 + exp(z)) with z assembled by hand
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = LRModel {
            feature_names: vec!["season_winter".into(), "a".into(), "b".into()],
            alpha: vec![rng.gen_range(-0.5..0.5)],
            beta: vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
            l2: 0.0,
            threshold: None,
        };
        for _ in 0..5 {
            let x = vec![1.0, rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let z = model.alpha[0] * x[0] + model.beta[0] * x[1] + model.beta[1] * x[2];
            let oracle = z.exp() / (1.0 + z.exp());
            let got = lr_predict_proba(&model, &x).unwrap();
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    fn separable_table() -> FeatureTable {
        let rows: Vec<Vec<f64>> = vec![
            vec![-2.0],
            vec![-1.5],
            vec![-1.0],
            vec![-0.5],
            vec![0.5],
            vec![1.0],
            vec![1.5],
            vec![2.0],
        ];
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
        all_train(&rows, &labels, &["x"])
    }

    #[test]
    fn separable_data_reaches_full_train_accuracy() {
        let table = separable_table();
        let opts = LrOptions {
            l2: 0.01,
            ..Default::default()
        };
        let model = lr_fit(&table, &opts).unwrap();
        let scores = lr_scores(&model, &table, 0..table.n_rows());
        for (p, &y) in scores.iter().zip(&table.labels) {
            assert_eq!((*p >= 0.5) as u8, y);
        }
        // oracle: exhaustive grid over the single coefficient must not find a
        // lower penalized loss than the fitted one
        let season = vec![false];
        let (fit_loss, _) = loss_and_grad(&table, &(0..8), &[model.beta[0]], (1.0, 1.0), 0.01, &season);
        let mut best = f64::INFINITY;
        let mut k = -80.0f64;
        while k <= 80.0 {
            let (l, _) = loss_and_grad(&table, &(0..8), &[k * 0.1], (1.0, 1.0), 0.01, &season);
            best = best.min(l);
            k += 1.0;
        }
        assert!(fit_loss <= best + 1e-6, "fit {fit_loss} vs grid {best}");
    }

    #[test]
    fn duplicated_dataset_gives_identical_parameters() {
        let table = separable_table();
        let mut rows2: Vec<Vec<f64>> = Vec::new();
        let mut labels2 = Vec::new();
        for i in 0..table.n_rows() {
            rows2.push(table.row(i).to_vec());
            rows2.push(table.row(i).to_vec());
            labels2.push(table.labels[i]);
            labels2.push(table.labels[i]);
        }
        let doubled = all_train(&rows2, &labels2, &["x"]);
        let opts = LrOptions::default();
        let m1 = lr_fit(&table, &opts).unwrap();
        let m2 = lr_fit(&doubled, &opts).unwrap();
        assert!((m1.beta[0] - m2.beta[0]).abs() < 1e-10);
    }

    #[test]
    fn unit_class_weights_match_auto_on_balanced_data() {
        let table = separable_table(); // 4 vs 4, so auto weights are (1, 1)
        let auto = lr_fit(&table, &LrOptions::default()).unwrap();
        let explicit = lr_fit(
            &table,
            &LrOptions {
                class_weights: Some((1.0, 1.0)),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((auto.beta[0] - explicit.beta[0]).abs() < 1e-8);
    }

    #[test]
    fn single_class_rejected() {
        let rows = vec![vec![0.1], vec![0.2]];
        let table = all_train(&rows, &[1, 1], &["x"]);
        assert!(matches!(
            lr_fit(&table, &LrOptions::default()),
            Err(Error::SingleClassTraining)
        ));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = 12;
            let d = 3;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
            if !labels.contains(&0) || !labels.contains(&1) {
                continue;
            }
            let table = all_train(&rows, &labels, &["season_winter", "a", "b"]);
            let season = vec![true, false, false];
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let sw = (1.7, 1.0);
            let (_, grad) = loss_and_grad(&table, &(0..n), &w, sw, 0.05, &season);
            for j in 0..d {
                let h = 1e-6;
                let mut wp = w.clone();
                wp[j] += h;
                let mut wm = w.clone();
                wm[j] -= h;
                let (lp, _) = loss_and_grad(&table, &(0..n), &wp, sw, 0.05, &season);
                let (lm, _) = loss_and_grad(&table, &(0..n), &wm, sw, 0.05, &season);
                let fd = (lp - lm) / (2.0 * h);
                let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "col {j}: analytic {} vs fd {fd}", grad[j]);
            }
        }
    }

    #[test]
    fn loss_non_increasing_over_iterations() {
        // re-run the descent manually and watch the accepted losses
        let table = separable_table();
        let season = vec![false];
        let mut w = vec![0.0];
        let (mut loss, mut grad) = loss_and_grad(&table, &(0..8), &w, (1.0, 1.0), 1e-4, &season);
        let mut step = 1.0;
        for _ in 0..50 {
            let gsq: f64 = grad.iter().map(|g| g * g).sum();
            let mut s = step;
            loop {
                let trial: Vec<f64> = w.iter().zip(&grad).map(|(w, g)| w - s * g).collect();
                let (tl, tg) = loss_and_grad(&table, &(0..8), &trial, (1.0, 1.0), 1e-4, &season);
                if tl <= loss - 1e-4 * s * gsq {
                    assert!(tl <= loss, "loss increased");
                    w = trial;
                    loss = tl;
                    grad = tg;
                    step = s * 2.0;
                    break;
                }
                s *= 0.5;
                assert!(s > 1e-30);
            }
        }
    }

    #[test]
    fn prediction_invariant_under_affine_reparameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = LRModel {
            feature_names: vec![
                "season_winter".into(),
                "season_spring".into(),
                "a".into(),
                "b".into(),
            ],
            alpha: vec![0.3, -0.2],
            beta: vec![0.7, -1.1],
            l2: 0.0,
            threshold: None,
        };
        // rescale continuous features x' = a*x + c and transform parameters:
        // beta' = beta / a, alpha' = alpha - sum_j beta_j c_j / a_j
        let scale = [2.5, 0.4];
        let shift = [1.0, -3.0];
        let alpha_shift: f64 = (0..2).map(|j| model.beta[j] * shift[j] / scale[j]).sum();
        let transformed = LRModel {
            feature_names: model.feature_names.clone(),
            alpha: model.alpha.iter().map(|a| a - alpha_shift).collect(),
            beta: (0..2).map(|j| model.beta[j] / scale[j]).collect(),
            l2: 0.0,
            threshold: None,
        };
        for _ in 0..20 {
            let season = if rng.gen_bool(0.5) { [1.0, 0.0] } else { [0.0, 1.0] };
            let x = [season[0], season[1], rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let xs = [
                x[0],
                x[1],
                scale[0] * x[2] + shift[0],
                scale[1] * x[3] + shift[1],
            ];
            let p = lr_predict_proba(&model, &x).unwrap();
            let ps = lr_predict_proba(&transformed, &xs).unwrap();
            assert!((p - ps).abs() < 1e-10);
        }
    }
}
