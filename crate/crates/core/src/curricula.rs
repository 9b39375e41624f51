//! Dataset orderings for sequential training: transfer-learning probe
//! difficulty, optimal-transport dataset distances with label-Gaussian
//! ground costs, and the order constructors (easy-to-hard variants,
//! OT-greedy variants, switch, domain order).

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClassSplit, DatasetRecord};
use crate::error::{Error, Result};
use crate::seeding;

// ---------------------------------------------------------------------------
// Probe difficulty
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub dataset_id: String,
    /// Held-out accuracy of the probe head; higher = easier.
    pub probe_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of each class's samples held out for scoring.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Trains a one-hidden-layer ReLU head on the dataset's train-split
/// classes and scores it on held-out samples of the same classes.
/// Features are standardized with train-set statistics. Adam with
/// cosine-annealed learning rate.
pub fn probe_difficulty(
    ds: &DatasetRecord,
    split: &ClassSplit,
    cfg: &ProbeConfig,
) -> Result<DifficultyScore> {
    if cfg.epochs == 0 || cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("probe config fields must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) || cfg.holdout_fraction == 0.0 {
        return Err(Error::Config(format!(
            "holdout_fraction must be in (0,1), got {}",
            cfg.holdout_fraction
        )));
    }
    let classes: Vec<&crate::data::ClassGroup> = ds
        .classes
        .iter()
        .filter(|c| split.train_classes.contains(&c.class_id))
        .collect();
    if classes.len() < 2 {
        return Err(Error::Invalid(format!(
            "probe needs at least 2 train-split classes in {}, found {}",
            ds.id,
            classes.len()
        )));
    }
    let mut rng = seeding::rng(cfg.seed, &[seeding::word("probe"), seeding::word(&ds.id)]);
    let dim = ds.dim;
    let n_classes = classes.len();
    let mut train_x: Vec<Vec<f64>> = Vec::new();
    let mut train_y: Vec<usize> = Vec::new();
    let mut test_x: Vec<Vec<f64>> = Vec::new();
    let mut test_y: Vec<usize> = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let n = class.samples.nrows();
        let n_hold = ((cfg.holdout_fraction * n as f64).floor() as usize).max(1);
        if n_hold >= n {
            return Err(Error::Invalid(format!(
                "class {} of {} has too few samples ({n}) for a probe split",
                class.class_id, ds.id
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            let row: Vec<f64> = class.samples.row(i).iter().map(|&v| v as f64).collect();
            if pos < n - n_hold {
                train_x.push(row);
                train_y.push(ci);
            } else {
                test_x.push(row);
                test_y.push(ci);
            }
        }
    }
    // standardize with train statistics
    let nt = train_x.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for row in &train_x {
        for (j, v) in row.iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= nt;
    }
    for row in &train_x {
        for (j, v) in row.iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / nt).sqrt().max(1e-8)).collect();
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean[j]) / std[j])
            .collect()
    };
    let train_x: Vec<Vec<f64>> = train_x.iter().map(|r| norm(r)).collect();
    let test_x: Vec<Vec<f64>> = test_x.iter().map(|r| norm(r)).collect();

    // one-hidden-layer ReLU classifier
    let h = cfg.hidden;
    let gauss = rand_distr::Normal::new(0.0, 1.0).expect("normal");
    let mut draw = |rows: usize, cols: usize, scale: f64| {
        Array2::from_shape_fn((rows, cols), |_| {
            use rand::Rng;
            rng.sample::<f64, _>(gauss) * scale
        })
    };
    let mut w1 = draw(dim, h, 1.0 / (dim as f64).sqrt());
    let mut b1 = Array1::<f64>::zeros(h);
    let mut w2 = draw(h, n_classes, 1.0 / (h as f64).sqrt());
    let mut b2 = Array1::<f64>::zeros(n_classes);

    let mut adam: Vec<(Array2<f64>, Array2<f64>)> = Vec::new();
    let mut adam_v: Vec<(Array1<f64>, Array1<f64>)> = Vec::new();
    adam.push((Array2::zeros(w1.raw_dim()), Array2::zeros(w1.raw_dim())));
    adam.push((Array2::zeros(w2.raw_dim()), Array2::zeros(w2.raw_dim())));
    adam_v.push((Array1::zeros(b1.raw_dim()), Array1::zeros(b1.raw_dim())));
    adam_v.push((Array1::zeros(b2.raw_dim()), Array1::zeros(b2.raw_dim())));

    let steps_per_epoch = train_x.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            // cosine-annealed learning rate
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            let bsz = chunk.len();
            let mut x = Array2::<f64>::zeros((bsz, dim));
            for (r, &i) in chunk.iter().enumerate() {
                for j in 0..dim {
                    x[[r, j]] = train_x[i][j];
                }
            }
            let z1 = x.dot(&w1) + &b1;
            let a1 = z1.mapv(|v| v.max(0.0));
            let logits = a1.dot(&w2) + &b2;
            // softmax CE gradient
            let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
            for (r, &i) in chunk.iter().enumerate() {
                let row = logits.row(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..n_classes {
                    let p = (row[j] - mx).exp() / total;
                    dlogits[[r, j]] = (p - if j == train_y[i] { 1.0 } else { 0.0 }) / bsz as f64;
                }
            }
            let gw2 = a1.t().dot(&dlogits);
            let gb2 = dlogits.sum_axis(Axis(0));
            let da1 = dlogits.dot(&w2.t());
            let dz1 = &da1 * &z1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let gw1 = x.t().dot(&dz1);
            let gb1 = dz1.sum_axis(Axis(0));

            let t = step as i32;
            let bc1 = 1.0 - 0.9f64.powi(t);
            let bc2 = 1.0 - 0.999f64.powi(t);
            let upd2 = |p: &mut Array2<f64>, g: &Array2<f64>, st: &mut (Array2<f64>, Array2<f64>)| {
                ndarray::Zip::from(p)
                    .and(g)
                    .and(&mut st.0)
                    .and(&mut st.1)
                    .for_each(|p, &g, m, v| {
                        *m = 0.9 * *m + 0.1 * g;
                        *v = 0.999 * *v + 0.001 * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + 1e-8);
                    });
            };
            upd2(&mut w1, &gw1, &mut adam[0]);
            upd2(&mut w2, &gw2, &mut adam[1]);
            let upd1 = |p: &mut Array1<f64>, g: &Array1<f64>, st: &mut (Array1<f64>, Array1<f64>)| {
                ndarray::Zip::from(p)
                    .and(g)
                    .and(&mut st.0)
                    .and(&mut st.1)
                    .for_each(|p, &g, m, v| {
                        *m = 0.9 * *m + 0.1 * g;
                        *v = 0.999 * *v + 0.001 * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + 1e-8);
                    });
            };
            upd1(&mut b1, &gb1, &mut adam_v[0]);
            upd1(&mut b2, &gb2, &mut adam_v[1]);
        }
    }

    let mut correct = 0usize;
    for (x, &y) in test_x.iter().zip(&test_y) {
        let xv = Array1::from_vec(x.clone());
        let z1 = xv.dot(&w1) + &b1;
        let a1 = z1.mapv(|v| v.max(0.0));
        let logits = a1.dot(&w2) + &b2;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (j, &v)| {
                if v > acc.1 {
                    (j, v)
                } else {
                    acc
                }
            })
            .0;
        if pred == y {
            correct += 1;
        }
    }
    Ok(DifficultyScore {
        dataset_id: ds.id.clone(),
        probe_accuracy: correct as f64 / test_x.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Label Gaussians and the 2-Wasserstein distance between them
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelGaussian {
    pub class_id: String,
    pub mean: Vec<f64>,
    /// Per-coordinate variances (diagonal mode).
    pub diag: Option<Vec<f64>>,
    /// Row-major covariance (full mode).
    pub cov: Option<Vec<Vec<f64>>>,
}

/// Sample mean and unbiased (co)variance of one class.
pub fn label_gaussian_stats(
    ds: &DatasetRecord,
    class_id: &str,
    mode: CovMode,
) -> Result<LabelGaussian> {
    let class = ds
        .classes
        .iter()
        .find(|c| c.class_id == class_id)
        .ok_or_else(|| Error::Invalid(format!("class {class_id} not in dataset {}", ds.id)))?;
    let n = class.samples.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "class {class_id} has {n} sample(s); need at least 2 for covariance"
        )));
    }
    let d = ds.dim;
    let nf = n as f64;
    let mut mean = vec![0.0f64; d];
    for row in class.samples.rows() {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= nf;
    }
    match mode {
        CovMode::Diagonal => {
            let mut var = vec![0.0f64; d];
            for row in class.samples.rows() {
                for (j, &v) in row.iter().enumerate() {
                    var[j] += (v as f64 - mean[j]).powi(2);
                }
            }
            for v in var.iter_mut() {
                *v /= nf - 1.0;
            }
            Ok(LabelGaussian {
                class_id: class_id.into(),
                mean,
                diag: Some(var),
                cov: None,
            })
        }
        CovMode::Full => {
            let mut cov = vec![vec![0.0f64; d]; d];
            for row in class.samples.rows() {
                let dev: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| v as f64 - mean[j])
                    .collect();
                for i in 0..d {
                    for j in 0..d {
                        cov[i][j] += dev[i] * dev[j];
                    }
                }
            }
            for r in cov.iter_mut() {
                for v in r.iter_mut() {
                    *v /= nf - 1.0;
                }
            }
            Ok(LabelGaussian {
                class_id: class_id.into(),
                mean,
                diag: None,
                cov: Some(cov),
            })
        }
    }
}

/// Jacobi eigendecomposition of a symmetric matrix: returns
/// (eigenvalues, eigenvectors as columns).
fn sym_eig(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-15 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (eig, v)
}

/// Symmetric PSD matrix square root via eigendecomposition.
fn sym_sqrt(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (eig, v) = sym_eig(a);
    let tol = -1e-8 * eig.iter().cloned().fold(1.0f64, f64::max).abs();
    if eig.iter().any(|&e| e < tol) {
        return Err(Error::Invalid(format!(
            "covariance is not positive semidefinite (eigenvalue {})",
            eig.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    let sq = Array2::from_diag(&eig.mapv(|e| e.max(0.0).sqrt()));
    Ok(v.dot(&sq).dot(&v.t()))
}

/// 2-Wasserstein distance between Gaussians. Diagonal mode uses the
/// commuting closed form; full mode the Bures metric.
pub fn gaussian_w2(a: &LabelGaussian, b: &LabelGaussian) -> Result<f64> {
    Ok(gaussian_w2_squared(a, b)?.sqrt())
}

pub fn gaussian_w2_squared(a: &LabelGaussian, b: &LabelGaussian) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!(
            "gaussian dims differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let mean_gap: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let bures = match (&a.diag, &b.diag, &a.cov, &b.cov) {
        (Some(va), Some(vb), _, _) => {
            if va.iter().chain(vb.iter()).any(|&v| v < 0.0) {
                return Err(Error::Invalid("negative variance".into()));
            }
            va.iter()
                .zip(vb)
                .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
                .sum()
        }
        (_, _, Some(ca), Some(cb)) => {
            let d = a.mean.len();
            let to_arr = |m: &Vec<Vec<f64>>| {
                Array2::from_shape_fn((d, d), |(i, j)| m[i][j])
            };
            let sa = to_arr(ca);
            let sb = to_arr(cb);
            let rb = sym_sqrt(&sb)?;
            let inner = rb.dot(&sa).dot(&rb);
            // symmetrize against rounding before the second root
            let inner = (&inner + &inner.t()) * 0.5;
            let cross = sym_sqrt(&inner)?;
            let tr = |m: &Array2<f64>| (0..d).map(|i| m[[i, i]]).sum::<f64>();
            (tr(&sa) + tr(&sb) - 2.0 * tr(&cross)).max(0.0)
        }
        _ => {
            return Err(Error::Invalid(
                "gaussians must both be diagonal or both full".into(),
            ))
        }
    };
    Ok(mean_gap + bures)
}

// ---------------------------------------------------------------------------
// Optimal transport dataset distance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtSolver {
    Exact,
    Sinkhorn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OtddConfig {
    pub solver: OtSolver,
    /// Entropic regularization; default 0.05 * mean ground cost.
    pub epsilon: Option<f64>,
    pub max_iter: usize,
    /// Sinkhorn stopping tolerance on the worst marginal violation.
    pub tol: f64,
    pub cov_mode: CovMode,
    /// Use every sample as a support point instead of class means.
    pub full_samples: bool,
}

impl Default for OtddConfig {
    fn default() -> Self {
        Self {
            solver: OtSolver::Exact,
            epsilon: None,
            max_iter: 1000,
            tol: 1e-9,
            cov_mode: CovMode::Diagonal,
            full_samples: false,
        }
    }
}

const EXACT_SUPPORT_CAP: usize = 64;

struct Support {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// Label Gaussian per point.
    gauss: Vec<LabelGaussian>,
}

fn class_mean_support(ds: &DatasetRecord, mode: CovMode) -> Result<Support> {
    let total: usize = ds.classes.iter().map(|c| c.samples.nrows()).sum();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut gauss = Vec::new();
    for class in &ds.classes {
        let g = label_gaussian_stats(ds, &class.class_id, mode)?;
        points.push(g.mean.clone());
        weights.push(class.samples.nrows() as f64 / total as f64);
        gauss.push(g);
    }
    Ok(Support {
        points,
        weights,
        gauss,
    })
}

fn full_sample_support(ds: &DatasetRecord, mode: CovMode) -> Result<Support> {
    let total: usize = ds.classes.iter().map(|c| c.samples.nrows()).sum();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut gauss = Vec::new();
    for class in &ds.classes {
        let g = label_gaussian_stats(ds, &class.class_id, mode)?;
        for row in class.samples.rows() {
            points.push(row.iter().map(|&v| v as f64).collect());
            weights.push(1.0 / total as f64);
            gauss.push(g.clone());
        }
    }
    Ok(Support {
        points,
        weights,
        gauss,
    })
}

/// OT distance between two datasets. Ground cost between support
/// points: squared feature distance plus squared W2 between the label
/// Gaussians; the returned distance is the square root of the OT value.
pub fn otdd(ds_a: &DatasetRecord, ds_b: &DatasetRecord, cfg: &OtddConfig) -> Result<f64> {
    if ds_a.dim != ds_b.dim {
        return Err(Error::Shape(format!(
            "dataset dims differ: {} vs {}",
            ds_a.dim, ds_b.dim
        )));
    }
    let (sa, sb) = if cfg.full_samples {
        (
            full_sample_support(ds_a, cfg.cov_mode)?,
            full_sample_support(ds_b, cfg.cov_mode)?,
        )
    } else {
        (
            class_mean_support(ds_a, cfg.cov_mode)?,
            class_mean_support(ds_b, cfg.cov_mode)?,
        )
    };
    if sa.points.is_empty() || sb.points.is_empty() {
        return Err(Error::Invalid("empty dataset in otdd".into()));
    }
    let m = sa.points.len();
    let n = sb.points.len();
    if cfg.solver == OtSolver::Exact && (m > EXACT_SUPPORT_CAP || n > EXACT_SUPPORT_CAP) {
        return Err(Error::Invalid(format!(
            "exact solver limited to {EXACT_SUPPORT_CAP} support points per side, got {m}x{n}"
        )));
    }
    // The feature term already carries the mean gap, so the label term
    // compares centered Gaussians (covariance shape only).
    let centered = |g: &LabelGaussian| LabelGaussian {
        mean: vec![0.0; g.mean.len()],
        ..g.clone()
    };
    let ga: Vec<LabelGaussian> = sa.gauss.iter().map(centered).collect();
    let gb: Vec<LabelGaussian> = sb.gauss.iter().map(centered).collect();
    let mut cost = Array2::<f64>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let feat: f64 = sa.points[i]
                .iter()
                .zip(&sb.points[j])
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            cost[[i, j]] = feat + gaussian_w2_squared(&ga[i], &gb[j])?;
        }
    }
    let value = match cfg.solver {
        OtSolver::Exact => exact_ot(&cost, &sa.weights, &sb.weights)?,
        OtSolver::Sinkhorn => {
            let eps = cfg
                .epsilon
                .unwrap_or_else(|| 0.05 * cost.iter().sum::<f64>() / (m * n) as f64)
                .max(1e-12);
            sinkhorn_ot(&cost, &sa.weights, &sb.weights, eps, cfg.tol, cfg.max_iter)?
        }
    };
    Ok(value.max(0.0).sqrt())
}

/// Exact OT value by the transportation simplex (MODI) with Bland's
/// anti-cycling rule. Flows are recomputed on the final basis, so
/// identical inputs give an exactly-zero distance.
pub fn exact_ot(cost: &Array2<f64>, a: &[f64], b: &[f64]) -> Result<f64> {
    let m = a.len();
    let n = b.len();
    if cost.nrows() != m || cost.ncols() != n {
        return Err(Error::Shape("cost matrix does not match marginals".into()));
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if (sa - sb).abs() > 1e-9 || a.iter().chain(b).any(|&w| w < 0.0) {
        return Err(Error::Invalid(
            "marginals must be nonnegative with equal mass".into(),
        ));
    }

    // northwest-corner initial basis; exactly m+n-1 basic cells
    let mut flow: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut basis: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut ra: Vec<f64> = a.to_vec();
    let mut rb: Vec<f64> = b.to_vec();
    let (mut i, mut j) = (0usize, 0usize);
    while basis.len() < m + n - 1 {
        let send = ra[i].min(rb[j]);
        basis.insert((i, j));
        flow.insert((i, j), send);
        ra[i] -= send;
        rb[j] -= send;
        if ra[i] <= rb[j] && i + 1 < m {
            i += 1;
        } else if j + 1 < n {
            j += 1;
        } else if i + 1 < m {
            i += 1;
        } else {
            break;
        }
    }

    let max_pivots = 10_000 * (m + n);
    for _pivot in 0..max_pivots {
        // potentials from the basis tree: u[0] = 0
        let mut u = vec![f64::NAN; m];
        let mut v = vec![f64::NAN; n];
        u[0] = 0.0;
        let mut changed = true;
        while changed {
            changed = false;
            for &(bi, bj) in &basis {
                if u[bi].is_nan() && !v[bj].is_nan() {
                    u[bi] = cost[[bi, bj]] - v[bj];
                    changed = true;
                } else if v[bj].is_nan() && !u[bi].is_nan() {
                    v[bj] = cost[[bi, bj]] - u[bi];
                    changed = true;
                }
            }
        }
        if u.iter().any(|x| x.is_nan()) || v.iter().any(|x| x.is_nan()) {
            return Err(Error::Invalid("degenerate transportation basis".into()));
        }
        // Bland: first cell (row-major) with negative reduced cost
        let mut entering = None;
        'scan: for ei in 0..m {
            for ej in 0..n {
                if basis.contains(&(ei, ej)) {
                    continue;
                }
                if cost[[ei, ej]] - u[ei] - v[ej] < -1e-12 {
                    entering = Some((ei, ej));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            // optimal
            let value = basis
                .iter()
                .map(|&(bi, bj)| flow.get(&(bi, bj)).copied().unwrap_or(0.0) * cost[[bi, bj]])
                .sum();
            return Ok(value);
        };
        // unique cycle: path from row ei to col ej in the basis tree
        // nodes: rows 0..m, cols m..m+n
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m + n];
        for &(bi, bj) in &basis {
            adj[bi].push(m + bj);
            adj[m + bj].push(bi);
        }
        let mut prev = vec![usize::MAX; m + n];
        let mut queue = std::collections::VecDeque::from([ei]);
        prev[ei] = ei;
        while let Some(node) = queue.pop_front() {
            if node == m + ej {
                break;
            }
            for &next in &adj[node] {
                if prev[next] == usize::MAX {
                    prev[next] = node;
                    queue.push_back(next);
                }
            }
        }
        if prev[m + ej] == usize::MAX {
            return Err(Error::Invalid("disconnected transportation basis".into()));
        }
        let mut path = vec![m + ej];
        while *path.last().unwrap() != ei {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse(); // ei ... m+ej
        // cycle cells alternate +,-,+,- starting with entering (+)
        let mut minus_cells: Vec<(usize, usize)> = Vec::new();
        let mut plus_cells: Vec<(usize, usize)> = vec![(ei, ej)];
        for (k, pair) in path.windows(2).enumerate() {
            let cell = if pair[0] < m {
                (pair[0], pair[1] - m)
            } else {
                (pair[1], pair[0] - m)
            };
            if k % 2 == 0 {
                minus_cells.push(cell);
            } else {
                plus_cells.push(cell);
            }
        }
        let theta = minus_cells
            .iter()
            .map(|c| flow.get(c).copied().unwrap_or(0.0))
            .fold(f64::INFINITY, f64::min);
        // leaving: lexicographically first minus-cell at theta (Bland)
        let leaving = *minus_cells
            .iter()
            .filter(|c| (flow.get(*c).copied().unwrap_or(0.0) - theta).abs() <= 1e-15)
            .min()
            .expect("nonempty cycle");
        for c in &plus_cells {
            *flow.entry(*c).or_insert(0.0) += theta;
        }
        for c in &minus_cells {
            *flow.entry(*c).or_insert(0.0) -= theta;
        }
        basis.remove(&leaving);
        flow.remove(&leaving);
        basis.insert((ei, ej));
        flow.entry((ei, ej)).or_insert(0.0);
    }
    Err(Error::Invalid(
        "transportation simplex exceeded its pivot budget".into(),
    ))
}

/// Entropic OT value (transport-cost part, <pi, C>) via log-domain
/// Sinkhorn. Stops once the worst marginal violation drops below `tol`.
pub fn sinkhorn_ot(
    cost: &Array2<f64>,
    a: &[f64],
    b: &[f64],
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let m = a.len();
    let n = b.len();
    if cost.nrows() != m || cost.ncols() != n {
        return Err(Error::Shape("cost matrix does not match marginals".into()));
    }
    let log_a: Vec<f64> = a.iter().map(|&w| w.max(1e-300).ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|&w| w.max(1e-300).ln()).collect();
    let mut f = vec![0.0f64; m];
    let mut g = vec![0.0f64; n];
    let lse = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let mut violation = f64::INFINITY;
    for iter in 0..max_iter {
        for i in 0..m {
            let s = lse(&mut (0..n).map(|j| (g[j] - cost[[i, j]]) / eps + log_b[j]));
            f[i] = -eps * s;
        }
        for j in 0..n {
            let s = lse(&mut (0..m).map(|i| (f[i] - cost[[i, j]]) / eps + log_a[i]));
            g[j] = -eps * s;
        }
        // row marginals are exact after the g update's counterpart;
        // check column marginals of the current plan
        violation = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..n {
                row += ((f[i] + g[j] - cost[[i, j]]) / eps + log_a[i] + log_b[j]).exp();
            }
            violation = violation.max((row - a[i]).abs());
        }
        if violation < tol {
            // round the plan onto the feasible polytope so its value is a
            // true upper bound on the exact optimum
            let mut plan = Array2::<f64>::zeros((m, n));
            for i in 0..m {
                for j in 0..n {
                    plan[[i, j]] =
                        ((f[i] + g[j] - cost[[i, j]]) / eps + log_a[i] + log_b[j]).exp();
                }
            }
            for i in 0..m {
                let r: f64 = plan.row(i).sum();
                if r > a[i] && r > 0.0 {
                    let s = a[i] / r;
                    plan.row_mut(i).mapv_inplace(|p| p * s);
                }
            }
            for j in 0..n {
                let c: f64 = plan.column(j).sum();
                if c > b[j] && c > 0.0 {
                    let s = b[j] / c;
                    plan.column_mut(j).mapv_inplace(|p| p * s);
                }
            }
            let err_a: Vec<f64> = (0..m).map(|i| a[i] - plan.row(i).sum()).collect();
            let err_b: Vec<f64> = (0..n).map(|j| b[j] - plan.column(j).sum()).collect();
            let total: f64 = err_a.iter().sum();
            if total > 0.0 {
                for i in 0..m {
                    for j in 0..n {
                        plan[[i, j]] += err_a[i] * err_b[j] / total;
                    }
                }
            }
            let mut value = 0.0;
            for i in 0..m {
                for j in 0..n {
                    value += plan[[i, j]] * cost[[i, j]];
                }
            }
            return Ok(value);
        }
        let _ = iter;
    }
    Err(Error::SinkhornDiverged {
        iterations: max_iter,
        violation,
    })
}

// ---------------------------------------------------------------------------
// Distance matrix and curriculum construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    /// Row-major symmetric distances.
    pub values: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.values.len() != n || self.values.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("distance matrix is not square".into()));
        }
        if self.ids.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::Invalid("duplicate ids in distance matrix".into()));
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.values[i][j];
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::Invalid(format!("distance [{i}][{j}] = {v}")));
                }
                if (v - self.values[j][i]).abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "asymmetric distances at ({i},{j}): {v} vs {}",
                        self.values[j][i]
                    )));
                }
            }
        }
        Ok(())
    }

    fn index_of(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Invalid(format!("id {id} not in distance matrix")))
    }
}

/// Pairwise OT distances over a registry slice; deterministic assembly
/// by (i, j) index with an exactly zero diagonal.
pub fn distance_matrix(records: &[&DatasetRecord], cfg: &OtddConfig) -> Result<DistanceMatrix> {
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let n = ids.len();
    let mut values = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = otdd(records[i], records[j], cfg)?;
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    let dm = DistanceMatrix { ids, values };
    dm.validate()?;
    Ok(dm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DomainBased,
    E2h,
    H2e,
    E2e,
    H2h,
    Switch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumOrder {
    pub strategy: Strategy,
    pub order: Vec<String>,
}

/// Difficulty-sorted orders. E2H puts the highest probe accuracy
/// (easiest) first; H2E is the reverse. Ties break lexicographically.
pub fn order_by_difficulty(scores: &[DifficultyScore], strategy: Strategy) -> Result<CurriculumOrder> {
    if scores.is_empty() {
        return Err(Error::Invalid("no difficulty scores".into()));
    }
    let ids: BTreeSet<&str> = scores.iter().map(|s| s.dataset_id.as_str()).collect();
    if ids.len() != scores.len() {
        return Err(Error::Invalid("duplicate dataset ids in scores".into()));
    }
    let mut sorted: Vec<&DifficultyScore> = scores.iter().collect();
    sorted.sort_by(|x, y| {
        y.probe_accuracy
            .partial_cmp(&x.probe_accuracy)
            .expect("finite scores")
            .then_with(|| x.dataset_id.cmp(&y.dataset_id))
    });
    let mut order: Vec<String> = sorted.iter().map(|s| s.dataset_id.clone()).collect();
    match strategy {
        Strategy::E2h => {}
        Strategy::H2e => order.reverse(),
        _ => {
            return Err(Error::Invalid(
                "difficulty scores drive only e2h and h2e".into(),
            ))
        }
    }
    Ok(CurriculumOrder { strategy, order })
}

/// OT-greedy orders. E2E appends the nearest unvisited dataset to the
/// last appended one, H2H the farthest; Switch alternates farthest /
/// nearest starting with farthest. Ties break lexicographically.
pub fn order_by_distance(
    dm: &DistanceMatrix,
    strategy: Strategy,
    start_id: &str,
) -> Result<CurriculumOrder> {
    dm.validate()?;
    let start = dm.index_of(start_id)?;
    let n = dm.ids.len();
    let mut remaining: BTreeSet<usize> = (0..n).collect();
    remaining.remove(&start);
    let mut order = vec![start];
    let mut step = 0usize;
    while !remaining.is_empty() {
        let last = *order.last().unwrap();
        let want_far = match strategy {
            Strategy::E2e => false,
            Strategy::H2h => true,
            Strategy::Switch => step % 2 == 0,
            _ => {
                return Err(Error::Invalid(
                    "distance matrices drive only e2e, h2h and switch".into(),
                ))
            }
        };
        let pick = remaining
            .iter()
            .copied()
            .min_by(|&x, &y| {
                let dx = dm.values[last][x];
                let dy = dm.values[last][y];
                let primary = if want_far {
                    dy.partial_cmp(&dx)
                } else {
                    dx.partial_cmp(&dy)
                }
                .expect("finite distances");
                primary.then_with(|| dm.ids[x].cmp(&dm.ids[y]))
            })
            .unwrap();
        remaining.remove(&pick);
        order.push(pick);
        step += 1;
    }
    Ok(CurriculumOrder {
        strategy,
        order: order.into_iter().map(|i| dm.ids[i].clone()).collect(),
    })
}

/// Domain order: concatenates domains in the given sequence, datasets
/// in registry order within each domain.
pub fn order_by_domain(
    datasets: &[(String, String)],
    domain_order: &[String],
) -> Result<CurriculumOrder> {
    let present: BTreeSet<&str> = datasets.iter().map(|(_, d)| d.as_str()).collect();
    let listed: BTreeSet<&str> = domain_order.iter().map(|d| d.as_str()).collect();
    if present != listed || domain_order.len() != listed.len() {
        return Err(Error::Invalid(
            "domain order must list each present domain exactly once".into(),
        ));
    }
    let mut order = Vec::with_capacity(datasets.len());
    for dom in domain_order {
        for (id, d) in datasets {
            if d == dom {
                order.push(id.clone());
            }
        }
    }
    Ok(CurriculumOrder {
        strategy: Strategy::DomainBased,
        order,
    })
}

/// Maps a curriculum built on a proxy registry onto full-size ids.
/// The mapping must cover every proxy id exactly once.
pub fn apply_proxy_mapping(
    order: &CurriculumOrder,
    mapping: &BTreeMap<String, String>,
) -> Result<CurriculumOrder> {
    let mut mapped = Vec::with_capacity(order.order.len());
    for id in &order.order {
        let full = mapping
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("proxy id {id} missing from mapping")))?;
        mapped.push(full.clone());
    }
    if mapped.iter().collect::<BTreeSet<_>>().len() != mapped.len() {
        return Err(Error::Invalid("proxy mapping is not injective".into()));
    }
    Ok(CurriculumOrder {
        strategy: order.strategy,
        order: mapped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_classes, synth_generate, SyntheticSpec};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn synth(seed: u64, separation: f64, noise: f64) -> DatasetRecord {
        let spec = SyntheticSpec {
            n_domains: 1,
            datasets_per_domain: 1,
            classes_per_dataset: 8,
            samples_per_class: 30,
            dim: 12,
            class_separation: separation,
            noise_scale: noise,
            seed,
        };
        synth_generate(&spec).unwrap().remove(0)
    }

    fn gauss_diag(mean: &[f64], var: &[f64]) -> LabelGaussian {
        LabelGaussian {
            class_id: "g".into(),
            mean: mean.to_vec(),
            diag: Some(var.to_vec()),
            cov: None,
        }
    }

    #[test]
    fn probe_separable_dataset_scores_high() {
        let ds = synth(5, 10.0, 0.3);
        let split = split_classes(&ds, 0.2, 5).unwrap();
        let score = probe_difficulty(&ds, &split, &ProbeConfig::default()).unwrap();
        assert!(score.probe_accuracy >= 0.99, "got {}", score.probe_accuracy);
    }

    #[test]
    fn probe_shuffled_labels_near_chance() {
        let mut ds = synth(6, 10.0, 0.3);
        // destroy label structure: pool all samples, deal them back round-robin
        let all: Vec<Vec<f32>> = ds
            .classes
            .iter()
            .flat_map(|c| c.samples.rows().into_iter().map(|r| r.to_vec()))
            .collect();
        let mut rng = crate::seeding::rng(1, &[]);
        let mut idx: Vec<usize> = (0..all.len()).collect();
        idx.shuffle(&mut rng);
        let per = all.len() / ds.classes.len();
        for (ci, class) in ds.classes.iter_mut().enumerate() {
            let rows: Vec<&Vec<f32>> = idx[ci * per..(ci + 1) * per].iter().map(|&i| &all[i]).collect();
            class.samples = Array2::from_shape_fn((per, ds.dim), |(r, c)| rows[r][c]);
        }
        let split = split_classes(&ds, 0.2, 5).unwrap();
        let score = probe_difficulty(&ds, &split, &ProbeConfig::default()).unwrap();
        // 3 train-split classes? no: 8 classes, test 5 -> train 3; chance = 1/3
        let chance = 1.0 / split.train_classes.len() as f64;
        let n_test = 18.0; // 3 classes * 6 held-out samples
        let sigma = (chance * (1.0 - chance) / n_test).sqrt();
        assert!(
            (score.probe_accuracy - chance).abs() <= 3.0 * sigma + 1e-9,
            "score {} vs chance {chance}",
            score.probe_accuracy
        );
    }

    #[test]
    fn probe_deterministic() {
        let ds = synth(7, 4.0, 1.0);
        let split = split_classes(&ds, 0.2, 5).unwrap();
        let a = probe_difficulty(&ds, &split, &ProbeConfig::default()).unwrap();
        let b = probe_difficulty(&ds, &split, &ProbeConfig::default()).unwrap();
        assert_eq!(a.probe_accuracy, b.probe_accuracy);
    }

    #[test]
    fn label_gaussian_two_point_example() {
        let ds = DatasetRecord {
            id: "t".into(),
            domain: "d".into(),
            dim: 2,
            classes: vec![crate::data::ClassGroup {
                class_id: "c".into(),
                samples: array![[0.0f32, 0.0], [2.0, 2.0]],
            }],
            source: crate::data::Source::Synthetic,
        };
        let g = label_gaussian_stats(&ds, "c", CovMode::Diagonal).unwrap();
        assert_eq!(g.mean, vec![1.0, 1.0]);
        assert_eq!(g.diag.unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn label_gaussian_identical_samples_zero_variance() {
        let ds = DatasetRecord {
            id: "t".into(),
            domain: "d".into(),
            dim: 2,
            classes: vec![crate::data::ClassGroup {
                class_id: "c".into(),
                samples: array![[3.0f32, -1.0], [3.0, -1.0], [3.0, -1.0]],
            }],
            source: crate::data::Source::Synthetic,
        };
        let g = label_gaussian_stats(&ds, "c", CovMode::Diagonal).unwrap();
        assert_eq!(g.diag.unwrap(), vec![0.0, 0.0]);
        assert!(label_gaussian_stats(&ds, "missing", CovMode::Diagonal).is_err());
    }

    #[test]
    fn w2_closed_form_examples() {
        let a = gauss_diag(&[0.0, 0.0], &[1.0, 1.0]);
        let b = gauss_diag(&[3.0, 4.0], &[1.0, 1.0]);
        assert_relative_eq!(gaussian_w2(&a, &b).unwrap(), 5.0, epsilon = 1e-12);
        assert_relative_eq!(gaussian_w2(&a, &a).unwrap(), 0.0);
        let s1 = gauss_diag(&[0.0], &[4.0]);
        let s2 = gauss_diag(&[0.0], &[9.0]);
        assert_relative_eq!(gaussian_w2(&s1, &s2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_diag_and_full_agree_on_axis_aligned() {
        let mut rng = crate::seeding::rng(9, &[]);
        for _ in 0..20 {
            let d = 4;
            let mean_a: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mean_b: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let va: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
            let vb: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
            let diag_a = gauss_diag(&mean_a, &va);
            let diag_b = gauss_diag(&mean_b, &vb);
            let full = |mean: &[f64], var: &[f64]| LabelGaussian {
                class_id: "g".into(),
                mean: mean.to_vec(),
                diag: None,
                cov: Some(
                    (0..d)
                        .map(|i| (0..d).map(|j| if i == j { var[i] } else { 0.0 }).collect())
                        .collect(),
                ),
            };
            let w_diag = gaussian_w2(&diag_a, &diag_b).unwrap();
            let w_full = gaussian_w2(&full(&mean_a, &va), &full(&mean_b, &vb)).unwrap();
            assert_relative_eq!(w_diag, w_full, epsilon = 1e-9);
        }
    }

    #[test]
    fn w2_metric_properties_on_random_diagonal_triples() {
        let mut rng = crate::seeding::rng(10, &[]);
        for _ in 0..1000 {
            let d = 3;
            let g = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let var: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..2.0)).collect();
                gauss_diag(&mean, &var)
            };
            let (x, y, z) = (g(&mut rng), g(&mut rng), g(&mut rng));
            let dxy = gaussian_w2(&x, &y).unwrap();
            let dyx = gaussian_w2(&y, &x).unwrap();
            assert_relative_eq!(dxy, dyx, epsilon = 1e-12);
            assert_relative_eq!(gaussian_w2(&x, &x).unwrap(), 0.0);
            let dxz = gaussian_w2(&x, &z).unwrap();
            let dyz = gaussian_w2(&y, &z).unwrap();
            assert!(dxz <= dxy + dyz + 1e-9);
        }
    }

    #[test]
    fn w2_dim_mismatch_rejected() {
        let a = gauss_diag(&[0.0], &[1.0]);
        let b = gauss_diag(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(gaussian_w2(&a, &b).is_err());
    }

    #[test]
    fn exact_ot_identity_is_zero() {
        let ds = synth(11, 4.0, 1.0);
        let d = otdd(&ds, &ds, &OtddConfig::default()).unwrap();
        assert!(d.abs() < 1e-9, "d(A,A) = {d}");
    }

    #[test]
    fn one_class_offset_example() {
        // identical label gaussians, class means offset by v -> d = |v|
        let base = array![[0.0f32, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let mut shifted = base.clone();
        for mut row in shifted.rows_mut() {
            row[0] += 3.0;
            row[1] += 4.0;
        }
        let ds = |samples: Array2<f32>, id: &str| DatasetRecord {
            id: id.into(),
            domain: "d".into(),
            dim: 2,
            classes: vec![crate::data::ClassGroup {
                class_id: "c".into(),
                samples,
            }],
            source: crate::data::Source::Synthetic,
        };
        let a = ds(base, "a");
        let b = ds(shifted, "b");
        let d = otdd(&a, &b, &OtddConfig::default()).unwrap();
        assert_relative_eq!(d, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn sinkhorn_close_to_exact_at_small_epsilon() {
        let a = synth(12, 3.0, 1.0);
        let b = synth(13, 3.0, 1.0);
        let exact = otdd(&a, &b, &OtddConfig::default()).unwrap();
        let sink = otdd(
            &a,
            &b,
            &OtddConfig {
                solver: OtSolver::Sinkhorn,
                epsilon: Some(1e-3 * mean_ground_cost(&a, &b)),
                tol: 1e-6,
                max_iter: 2_000_000,
                ..OtddConfig::default()
            },
        )
        .unwrap();
        assert!(
            (sink - exact).abs() / exact.max(1e-12) < 0.02,
            "sinkhorn {sink} vs exact {exact}"
        );
        // raw regularized transport cost can only exceed the optimum
        assert!(sink * sink >= exact * exact - 1e-9);
    }

    pub(crate) fn mean_ground_cost(a: &DatasetRecord, b: &DatasetRecord) -> f64 {
        let sa = class_mean_support(a, CovMode::Diagonal).unwrap();
        let sb = class_mean_support(b, CovMode::Diagonal).unwrap();
        let zero = |g: &LabelGaussian| LabelGaussian {
            mean: vec![0.0; g.mean.len()],
            ..g.clone()
        };
        let mut total = 0.0;
        for i in 0..sa.points.len() {
            for j in 0..sb.points.len() {
                let feat: f64 = sa.points[i]
                    .iter()
                    .zip(&sb.points[j])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                total += feat
                    + gaussian_w2_squared(&zero(&sa.gauss[i]), &zero(&sb.gauss[j])).unwrap();
            }
        }
        total / (sa.points.len() * sb.points.len()) as f64
    }

    #[test]
    fn sinkhorn_divergence_reported() {
        let cost = array![[0.0, 1.0], [1.3, 0.2]];
        let err =
            sinkhorn_ot(&cost, &[0.9, 0.1], &[0.3, 0.7], 1e-4, 1e-9, 1).unwrap_err();
        assert!(matches!(err, Error::SinkhornDiverged { iterations: 1, .. }), "{err}");
    }

    #[test]
    fn exact_ot_random_vs_sinkhorn_small() {
        let mut rng = crate::seeding::rng(14, &[]);
        for _ in 0..20 {
            let cost = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.1..2.0));
            let a = [0.2, 0.3, 0.5];
            let b = [0.4, 0.4, 0.2];
            let exact = exact_ot(&cost, &a, &b).unwrap();
            let sink = sinkhorn_ot(&cost, &a, &b, 1e-3, 1e-6, 2_000_000).unwrap();
            assert!((exact - sink).abs() < 0.01, "exact {exact} sink {sink}");
            assert!(sink >= exact - 1e-9);
        }
    }

    #[test]
    fn distance_matrix_properties() {
        let mut specs: Vec<DatasetRecord> = (0..4).map(|s| synth(20 + s, 3.0, 1.0)).collect();
        for (i, r) in specs.iter_mut().enumerate() {
            r.id = format!("ds{i}");
        }
        let refs: Vec<&DatasetRecord> = specs.iter().collect();
        let dm = distance_matrix(&refs, &OtddConfig::default()).unwrap();
        for i in 0..4 {
            assert_eq!(dm.values[i][i], 0.0);
            for j in 0..4 {
                assert!((dm.values[i][j] - dm.values[j][i]).abs() < 1e-9);
                assert!(dm.values[i][j] >= 0.0);
            }
        }
    }

    #[test]
    fn difficulty_sort_examples() {
        let scores = vec![
            DifficultyScore { dataset_id: "A".into(), probe_accuracy: 0.9 },
            DifficultyScore { dataset_id: "B".into(), probe_accuracy: 0.5 },
            DifficultyScore { dataset_id: "C".into(), probe_accuracy: 0.7 },
        ];
        let e2h = order_by_difficulty(&scores, Strategy::E2h).unwrap();
        assert_eq!(e2h.order, vec!["A", "C", "B"]);
        let h2e = order_by_difficulty(&scores, Strategy::H2e).unwrap();
        assert_eq!(h2e.order, vec!["B", "C", "A"]);
    }

    #[test]
    fn h2e_is_reverse_of_e2h_without_ties() {
        let mut rng = crate::seeding::rng(15, &[]);
        for _ in 0..100 {
            let scores: Vec<DifficultyScore> = (0..6)
                .map(|i| DifficultyScore {
                    dataset_id: format!("ds{i}"),
                    probe_accuracy: rng.gen_range(0.0..1.0),
                })
                .collect();
            let e2h = order_by_difficulty(&scores, Strategy::E2h).unwrap();
            let mut h2e = order_by_difficulty(&scores, Strategy::H2e).unwrap();
            h2e.order.reverse();
            assert_eq!(e2h.order, h2e.order);
        }
    }

    fn spec_matrix() -> DistanceMatrix {
        DistanceMatrix {
            ids: vec!["0".into(), "1".into(), "2".into()],
            values: vec![
                vec![0.0, 1.0, 5.0],
                vec![1.0, 0.0, 2.0],
                vec![5.0, 2.0, 0.0],
            ],
        }
    }

    #[test]
    fn greedy_order_examples() {
        let dm = spec_matrix();
        let e2e = order_by_distance(&dm, Strategy::E2e, "0").unwrap();
        assert_eq!(e2e.order, vec!["0", "1", "2"]);
        let h2h = order_by_distance(&dm, Strategy::H2h, "0").unwrap();
        assert_eq!(h2h.order, vec!["0", "2", "1"]);
        let sw = order_by_distance(&dm, Strategy::Switch, "0").unwrap();
        assert_eq!(sw.order, vec!["0", "2", "1"]);
    }

    /// Step-by-step reference: at each step scans all remaining ids.
    pub(crate) fn reference_greedy(
        dm: &DistanceMatrix,
        strategy: Strategy,
        start: &str,
    ) -> Vec<String> {
        let mut remaining: Vec<String> = dm.ids.clone();
        let start_pos = remaining.iter().position(|x| x == start).unwrap();
        let mut order = vec![remaining.remove(start_pos)];
        let mut step = 0;
        while !remaining.is_empty() {
            let last = dm.index_of(order.last().unwrap()).unwrap();
            let far = match strategy {
                Strategy::E2e => false,
                Strategy::H2h => true,
                Strategy::Switch => step % 2 == 0,
                _ => unreachable!(),
            };
            let mut best: Option<(f64, String)> = None;
            for id in &remaining {
                let d = dm.values[last][dm.index_of(id).unwrap()];
                let better = match &best {
                    None => true,
                    Some((bd, bid)) => {
                        if far {
                            d > *bd || (d == *bd && id < bid)
                        } else {
                            d < *bd || (d == *bd && id < bid)
                        }
                    }
                };
                if better {
                    best = Some((d, id.clone()));
                }
            }
            let (_, pick) = best.unwrap();
            remaining.retain(|x| x != &pick);
            order.push(pick);
            step += 1;
        }
        order
    }

    #[test]
    fn greedy_matches_reference_on_random_matrices() {
        let mut rng = crate::seeding::rng(16, &[]);
        for trial in 0..500 {
            let n = rng.gen_range(2..=7);
            let mut values = vec![vec![0.0f64; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = rng.gen_range(0.0..10.0);
                    values[i][j] = v;
                    values[j][i] = v;
                }
            }
            let dm = DistanceMatrix {
                ids: (0..n).map(|i| format!("d{i:02}")).collect(),
                values,
            };
            let start = format!("d{:02}", rng.gen_range(0..n));
            for strategy in [Strategy::E2e, Strategy::H2h, Strategy::Switch] {
                let got = order_by_distance(&dm, strategy, &start).unwrap().order;
                let want = reference_greedy(&dm, strategy, &start);
                assert_eq!(got, want, "trial {trial} strategy {strategy:?}");
            }
        }
    }

    #[test]
    fn domain_order_and_errors() {
        let datasets = vec![
            ("m-a".into(), "micro".into()),
            ("l-a".into(), "large".into()),
            ("m-b".into(), "micro".into()),
        ];
        let order = order_by_domain(&datasets, &["large".into(), "micro".into()]).unwrap();
        assert_eq!(order.order, vec!["l-a", "m-a", "m-b"]);
        assert!(order_by_domain(&datasets, &["micro".into()]).is_err());
    }

    #[test]
    fn proxy_mapping_roundtrip() {
        let order = CurriculumOrder {
            strategy: Strategy::E2h,
            order: vec!["micro-a".into(), "micro-b".into()],
        };
        let mut map = BTreeMap::new();
        map.insert("micro-a".to_string(), "mini-a".to_string());
        map.insert("micro-b".to_string(), "mini-b".to_string());
        let full = apply_proxy_mapping(&order, &map).unwrap();
        assert_eq!(full.order, vec!["mini-a", "mini-b"]);
        map.insert("micro-b".to_string(), "mini-a".to_string());
        assert!(apply_proxy_mapping(&order, &map).is_err());
    }

    #[test]
    fn curriculum_order_serializes() {
        let order = CurriculumOrder {
            strategy: Strategy::Switch,
            order: vec!["a".into()],
        };
        let json = serde_json::to_string(&order).unwrap();
        assert!(json.contains("\"switch\""));
        let back: CurriculumOrder = serde_json::from_str(&json).unwrap();
        assert_eq!(back.order, order.order);
    }
}
