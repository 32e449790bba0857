//! Soft-margin RBF-kernel SVM with class-dependent penalties, solved in the
//! dual by sequential minimal optimization.
//!
//! The solver keeps the dual gradient incrementally updated, picks working
//! pairs by maximal KKT violation with a second-order tie-break, and bounds
//! kernel recomputation with an LRU row cache. The returned solution is
//! certifiable: [`check_kkt`] verifies the optimality conditions on every
//! training point and fits report their final dual objective.
//!
//! Model files use a small binary container: magic `OSV1`, `u64` support
//! vector count, `u64` dimension, `f64` gamma, `f64` bias, `u8` flag plus
//! `f64` threshold, then support vectors row-major `f64` and dual
//! coefficients `f64`, all little-endian.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;

const TAU: f64 = 1e-12;
/// Dual coefficients below this are dropped from the support set.
const SV_EPS: f64 = 1e-12;

/// Solver and model hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SVMConfig {
    /// Base penalty; the per-class penalties are `c * w_pos` and `c * w_neg`.
    pub c: f64,
    /// RBF bandwidth.
    pub gamma: f64,
    /// Positive-class weight multiplier; `None` selects `N_neg / N_pos`.
    pub class_weight_pos: Option<f64>,
    /// Stratified subsample cap applied to the training rows.
    pub max_train_size: usize,
    /// KKT tolerance (stopping criterion of the solver).
    pub tol: f64,
    /// Iteration cap for the SMO loop.
    pub max_iter: usize,
    /// Kernel row cache capacity, in rows.
    pub cache_rows: usize,
    /// Seed for the stratified subsample.
    pub seed: u64,
}

impl Default for SVMConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: 0.5,
            class_weight_pos: None,
            max_train_size: 100_000,
            tol: 1e-3,
            max_iter: 10_000_000,
            cache_rows: 1024,
            seed: 0,
        }
    }
}

/// Fitted SVM in dual form.
#[derive(Debug, Clone, PartialEq)]
pub struct SVMModel {
    /// Support vectors, row-major `n_sv × d`.
    pub support_vectors: Vec<f64>,
    pub d: usize,
    /// `alpha_t * y_t` per support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    /// Decision threshold on the signed margin; `None` until calibrated.
    pub threshold: Option<f64>,
}

impl SVMModel {
    pub fn n_sv(&self) -> usize {
        self.dual_coefs.len()
    }
}

/// Solver outcome details kept for certification and reporting.
#[derive(Debug, Clone)]
pub struct SmoReport {
    /// Final dual coefficients over the (subsampled) training set.
    pub alphas: Vec<f64>,
    /// Training rows actually used (table indices).
    pub train_rows: Vec<usize>,
    pub iterations: usize,
    /// Maximized dual objective Σα − ½ αᵀQα.
    pub dual_objective: f64,
    pub c_pos: f64,
    pub c_neg: f64,
}

/// `exp(-γ ‖a − b‖²)`.
pub fn rbf_kernel(a: &[f64], b: &[f64], gamma: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-gamma * sq).exp())
}

/// `{0,1} → {−1,+1}` via `2y − 1`.
pub fn label_map(y: u8) -> f64 {
    2.0 * y as f64 - 1.0
}

/// Deterministic stratified subsample of `indices` preserving the class mix.
///
/// Returns `min(len, max_size)` indices in time order; per-class counts match
/// the full proportions within one sample.
pub fn stratified_subsample(
    labels: &[u8],
    indices: &[usize],
    max_size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    assert!(max_size >= 2);
    let mut pos: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClassTraining);
    }
    if indices.len() <= max_size {
        return Ok(indices.to_vec());
    }
    let n = indices.len() as f64;
    let n_pos = ((pos.len() as f64 / n) * max_size as f64).round() as usize;
    let n_pos = n_pos.clamp(1, max_size - 1);
    let n_neg = max_size - n_pos;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut subset: Vec<usize> = pos[..n_pos.min(pos.len())]
        .iter()
        .chain(neg[..n_neg.min(neg.len())].iter())
        .copied()
        .collect();
    subset.sort_unstable();
    Ok(subset)
}

/// LRU cache of kernel rows over a fixed training matrix.
struct KernelCache<'a> {
    x: &'a [f64],
    d: usize,
    n: usize,
    gamma: f64,
    rows: HashMap<usize, (Vec<f64>, u64)>,
    capacity: usize,
    clock: u64,
}

impl<'a> KernelCache<'a> {
    fn new(x: &'a [f64], d: usize, gamma: f64, capacity: usize) -> Self {
        let n = x.len() / d;
        Self {
            x,
            d,
            n,
            gamma,
            rows: HashMap::new(),
            capacity: capacity.max(2),
            clock: 0,
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        self.clock += 1;
        let clock = self.clock;
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.capacity {
                let oldest = *self
                    .rows
                    .iter()
                    .min_by_key(|(_, (_, stamp))| *stamp)
                    .map(|(k, _)| k)
                    .unwrap();
                self.rows.remove(&oldest);
            }
            let xi = &self.x[i * self.d..(i + 1) * self.d];
            let row: Vec<f64> = (0..self.n)
                .map(|t| {
                    let xt = &self.x[t * self.d..(t + 1) * self.d];
                    let sq: f64 = xi.iter().zip(xt).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-self.gamma * sq).exp()
                })
                .collect();
            self.rows.insert(i, (row, clock));
        }
        let entry = self.rows.get_mut(&i).unwrap();
        entry.1 = clock;
        &entry.0
    }
}

/// Solve the dual problem on raw data. `y` entries must be ±1.
///
/// Returns the model plus the full dual solution; `train_rows` of the report
/// is left empty here and filled by [`svm_fit`].
#[allow(clippy::too_many_arguments)]
pub fn svm_fit_raw(
    x: &[f64],
    d: usize,
    y: &[f64],
    c_pos: f64,
    c_neg: f64,
    gamma: f64,
    tol: f64,
    max_iter: usize,
    cache_rows: usize,
) -> Result<(SVMModel, SmoReport)> {
    let n = y.len();
    assert_eq!(x.len(), n * d);
    if !y.iter().any(|&v| v > 0.0) || !y.iter().any(|&v| v < 0.0) {
        return Err(Error::SingleClassTraining);
    }
    let cost = |t: usize| if y[t] > 0.0 { c_pos } else { c_neg };

    let mut cache = KernelCache::new(x, d, gamma, cache_rows);
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n]; // G = Qα + p with p = −1, α = 0
    let mut iterations = 0usize;

    loop {
        if iterations >= max_iter {
            return Err(Error::NoConvergence(max_iter));
        }
        // working-set selection: i maximizes the up-violation, j minimizes the
        // second-order objective decrease among down-candidates
        let mut g_max = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            let up = (y[t] > 0.0 && alpha[t] < cost(t)) || (y[t] < 0.0 && alpha[t] > 0.0);
            if up {
                let v = -y[t] * grad[t];
                if v > g_max {
                    g_max = v;
                    i = t;
                }
            }
        }
        let mut g_min = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best_obj = f64::INFINITY;
        {
            let row_i = cache.row(i).to_vec();
            for t in 0..n {
                let down = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < cost(t));
                if !down {
                    continue;
                }
                let v = -y[t] * grad[t];
                if v < g_min {
                    g_min = v;
                }
                let grad_diff = g_max - v;
                if grad_diff > 0.0 {
                    // RBF diagonal is 1
                    let quad = (2.0 - 2.0 * y[i] * y[t] * row_i[t]).max(TAU);
                    let obj = -(grad_diff * grad_diff) / quad;
                    if obj < best_obj {
                        best_obj = obj;
                        j = t;
                    }
                }
            }
        }
        if g_max - g_min <= tol || j == usize::MAX {
            break;
        }

        let row_i = cache.row(i).to_vec();
        let row_j = cache.row(j).to_vec();
        let (ci, cj) = (cost(i), cost(j));
        let old_ai = alpha[i];
        let old_aj = alpha[j];
        if y[i] != y[j] {
            let quad = (2.0 + 2.0 * row_i[j]).max(TAU); // Q_ii + Q_jj + 2Q_ij, Q_ij = −K_ij
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let quad = (2.0 - 2.0 * row_i[j]).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let da_i = alpha[i] - old_ai;
        let da_j = alpha[j] - old_aj;
        for t in 0..n {
            grad[t] += y[t] * y[i] * row_i[t] * da_i + y[t] * y[j] * row_j[t] * da_j;
        }
        iterations += 1;
    }

    // bias from free vectors, midpoint of the bound estimates otherwise
    let mut upper = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    let mut sum_free = 0.0;
    let mut n_free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= cost(t) {
            if y[t] < 0.0 {
                upper = upper.min(yg);
            } else {
                lower = lower.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                upper = upper.min(yg);
            } else {
                lower = lower.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (upper + lower) / 2.0
    };
    let bias = -rho;

    // W(α) = Σα − ½ αᵀQα = −(½ Σ α_t (G_t − 1))
    let dual_objective = -0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>();

    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    for t in 0..n {
        if alpha[t] > SV_EPS {
            support_vectors.extend_from_slice(&x[t * d..(t + 1) * d]);
            dual_coefs.push(alpha[t] * y[t]);
        }
    }
    Ok((
        SVMModel {
            support_vectors,
            d,
            dual_coefs,
            bias,
            gamma,
            threshold: None,
        },
        SmoReport {
            alphas: alpha,
            train_rows: Vec::new(),
            iterations,
            dual_objective,
            c_pos,
            c_neg,
        },
    ))
}

/// Fit on the training split of a table, with class weights and the
/// stratified subsample cap applied.
pub fn svm_fit(table: &FeatureTable, config: &SVMConfig) -> Result<(SVMModel, SmoReport)> {
    let rows: Vec<usize> = table.split.train.clone().collect();
    let n_pos = rows.iter().filter(|&&i| table.labels[i] == 1).count();
    let n_neg = rows.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassTraining);
    }
    let rows = stratified_subsample(&table.labels, &rows, config.max_train_size, config.seed)?;
    let w_pos = config
        .class_weight_pos
        .unwrap_or(n_neg as f64 / n_pos as f64);
    let d = table.n_cols();
    let mut x = Vec::with_capacity(rows.len() * d);
    let mut y = Vec::with_capacity(rows.len());
    for &i in &rows {
        x.extend_from_slice(table.row(i));
        y.push(label_map(table.labels[i]));
    }
    let (model, mut report) = svm_fit_raw(
        &x,
        d,
        &y,
        config.c * w_pos,
        config.c,
        config.gamma,
        config.tol,
        config.max_iter,
        config.cache_rows,
    )?;
    report.train_rows = rows;
    Ok((model, report))
}

/// Signed margin `f(x) = Σ dual_coefs_i K(sv_i, x) + b`.
pub fn svm_decision(model: &SVMModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            got: x.len(),
        });
    }
    let mut f = model.bias;
    for (i, coef) in model.dual_coefs.iter().enumerate() {
        let sv = &model.support_vectors[i * model.d..(i + 1) * model.d];
        let sq: f64 = sv.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        f += coef * (-model.gamma * sq).exp();
    }
    Ok(f)
}

/// Margins for a row range of a table; rows scored in parallel.
pub fn svm_scores(model: &SVMModel, table: &FeatureTable, rows: std::ops::Range<usize>) -> Vec<f64> {
    rows.collect::<Vec<_>>()
        .par_iter()
        .map(|&i| svm_decision(model, table.row(i)).expect("dimension checked by caller"))
        .collect()
}

/// Maximum KKT violation of a dual solution over its training set.
///
/// Checks, per point: α = 0 ⇒ y·f ≥ 1 − tol, free ⇒ |y·f − 1| ≤ tol,
/// α = C ⇒ y·f ≤ 1 + tol. Returns the largest violation margin (≤ 0 means
/// every condition holds with slack).
#[allow(clippy::too_many_arguments)]
pub fn check_kkt(
    x: &[f64],
    d: usize,
    y: &[f64],
    alphas: &[f64],
    c_pos: f64,
    c_neg: f64,
    gamma: f64,
    bias: f64,
) -> f64 {
    let n = y.len();
    let decision = |q: &[f64]| -> f64 {
        let mut f = bias;
        for t in 0..n {
            if alphas[t] == 0.0 {
                continue;
            }
            let xt = &x[t * d..(t + 1) * d];
            let sq: f64 = xt.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            f += alphas[t] * y[t] * (-gamma * sq).exp();
        }
        f
    };
    let mut worst = f64::NEG_INFINITY;
    for t in 0..n {
        let c_t = if y[t] > 0.0 { c_pos } else { c_neg };
        let margin = y[t] * decision(&x[t * d..(t + 1) * d]);
        let violation = if alphas[t] <= SV_EPS {
            1.0 - margin // require margin ≥ 1
        } else if alphas[t] >= c_t - SV_EPS {
            margin - 1.0 // require margin ≤ 1
        } else {
            (margin - 1.0).abs()
        };
        worst = worst.max(violation);
    }
    worst
}

/// Write a model in the binary container described in the module docs.
pub fn save_model(model: &SVMModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(b"OSV1")?;
    out.write_all(&(model.n_sv() as u64).to_le_bytes())?;
    out.write_all(&(model.d as u64).to_le_bytes())?;
    out.write_all(&model.gamma.to_le_bytes())?;
    out.write_all(&model.bias.to_le_bytes())?;
    out.write_all(&[model.threshold.is_some() as u8])?;
    out.write_all(&model.threshold.unwrap_or(0.0).to_le_bytes())?;
    for v in &model.support_vectors {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in &model.dual_coefs {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Load a model written by [`save_model`].
pub fn load_model(path: &Path) -> Result<SVMModel> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if &magic != b"OSV1" {
        return Err(Error::BadArtifact("svm model magic mismatch".into()));
    }
    fn read_u64(inp: &mut impl Read) -> Result<u64> {
        let mut b = [0u8; 8];
        inp.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn read_f64(inp: &mut impl Read) -> Result<f64> {
        let mut b = [0u8; 8];
        inp.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    let n_sv = read_u64(&mut inp)? as usize;
    let d = read_u64(&mut inp)? as usize;
    let gamma = read_f64(&mut inp)?;
    let bias = read_f64(&mut inp)?;
    let mut flag = [0u8; 1];
    inp.read_exact(&mut flag)?;
    let tau = read_f64(&mut inp)?;
    let threshold = (flag[0] == 1).then_some(tau);
    let mut support_vectors = vec![0.0; n_sv * d];
    for v in support_vectors.iter_mut() {
        *v = read_f64(&mut inp)?;
    }
    let mut dual_coefs = vec![0.0; n_sv];
    for v in dual_coefs.iter_mut() {
        *v = read_f64(&mut inp)?;
    }
    Ok(SVMModel {
        support_vectors,
        d,
        dual_coefs,
        bias,
        gamma,
        threshold,
    })
}
