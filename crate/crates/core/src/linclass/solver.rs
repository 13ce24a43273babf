//! Dual coordinate descent for the L1-loss (hinge) linear SVM.
//!
//! Minimizes `1/2 |w|^2 + sum_i C_i max(0, 1 - y_i w . x_i)` with the bias
//! folded into `w` through a constant unit feature. The dual is a box
//! constrained QP `min 1/2 a'Qa - e'a, 0 <= a_i <= C_i` with
//! `Q_ij = y_i y_j x_i . x_j`; each coordinate step solves its
//! one-dimensional subproblem exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LinearModel, TrainConfig};
use crate::error::{Error, Result};
use crate::scalar::{dot, sq_norm, Scalar};

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: LinearModel<T>,
    /// Dual multipliers, one per sample.
    pub alphas: Vec<T>,
    pub passes: usize,
    pub converged: bool,
    /// Largest projected-gradient magnitude seen in the final pass.
    pub kkt_violation: T,
    /// Primal minus dual objective over the primal objective, measured once
    /// the projected gradient is within tolerance; infinite before that.
    pub duality_gap: f64,
    /// Dual objective after every pass; non-increasing.
    pub dual_trace: Vec<T>,
}

fn sign<T: Scalar>(y: bool) -> T {
    if y {
        T::one()
    } else {
        -T::one()
    }
}

fn upper_bound<T: Scalar>(y: bool, cost: f64, config: &TrainConfig) -> T {
    T::from_f64_lossy(if y { cost * config.positive_weight } else { cost })
}

pub fn train_binary<T: Scalar>(
    features: &[Vec<T>],
    labels: &[bool],
    cost: f64,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if !(cost > 0.0 && cost.is_finite()) {
        return Err(Error::InvalidConfig(format!("cost {cost} must be positive")));
    }
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: features.len(), got: labels.len() });
    }
    let positives = labels.iter().filter(|y| **y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateLabels(format!("{positives} positives among {} samples", labels.len())));
    }
    let dim = features[0].len();
    for (i, x) in features.iter().enumerate() {
        if x.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("sample {i} has non-finite features")));
        }
    }

    let m = features.len();
    let one = T::one();
    let ys: Vec<T> = labels.iter().map(|&y| sign(y)).collect();
    let uppers: Vec<T> = labels.iter().map(|&y| upper_bound(y, cost, config)).collect();
    // diagonal of Q including the unit bias feature
    let diag: Vec<T> = features.iter().map(|x| sq_norm(x) + one).collect();
    let mut alphas = vec![T::zero(); m];
    let mut w = vec![T::zero(); dim];
    let mut b = T::zero();
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut violation = T::infinity();
    let mut passes = 0;
    let mut gap = f64::INFINITY;
    let tol = T::from_f64_lossy(config.tolerance);

    while passes < config.max_passes {
        passes += 1;
        order.shuffle(&mut rng);
        let mut max_pg = T::zero();
        for &i in &order {
            let x = &features[i];
            let g = ys[i] * (dot(&w, x) + b) - one;
            let a = alphas[i];
            let pg = if a <= T::zero() {
                g.min(T::zero())
            } else if a >= uppers[i] {
                g.max(T::zero())
            } else {
                g
            };
            max_pg = max_pg.max(pg.abs());
            if pg != T::zero() {
                let new = (a - g / diag[i]).max(T::zero()).min(uppers[i]);
                let step = (new - a) * ys[i];
                if step != T::zero() {
                    alphas[i] = new;
                    for (wj, &xj) in w.iter_mut().zip(x) {
                        *wj = *wj + step * xj;
                    }
                    b = b + step;
                }
            }
        }
        trace.push(dual_value(&w, b, &alphas));
        violation = max_pg;
        if max_pg > tol {
            continue;
        }
        gap = relative_gap(&w, b, &alphas, features, &ys, &uppers);
        if gap <= config.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("svm solver stopped at {passes} passes with relative duality gap {gap}");
    }
    Ok(TrainOutcome {
        model: LinearModel::new("", w, b),
        alphas,
        passes,
        converged,
        kkt_violation: violation,
        duality_gap: gap,
        dual_trace: trace,
    })
}

/// `(P - (-D)) / P` in `f64`; `P` is positive whenever some sample exists.
fn relative_gap<T: Scalar>(w: &[T], b: T, alphas: &[T], features: &[Vec<T>], ys: &[T], uppers: &[T]) -> f64 {
    let norm = sq_norm(w).to_f64_lossless() + b.to_f64_lossless() * b.to_f64_lossless();
    let mut hinge = 0.0;
    let mut alpha_sum = 0.0;
    for (((x, y), c), a) in features.iter().zip(ys).zip(uppers).zip(alphas) {
        let margin = (*y * (dot(w, x) + b)).to_f64_lossless();
        hinge += c.to_f64_lossless() * (1.0 - margin).max(0.0);
        alpha_sum += a.to_f64_lossless();
    }
    let primal = 0.5 * norm + hinge;
    ((norm - alpha_sum + hinge) / primal).max(0.0)
}

fn dual_value<T: Scalar>(w: &[T], b: T, alphas: &[T]) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (sq_norm(w) + b * b) - alphas.iter().copied().sum::<T>()
}

/// `1/2 (|w|^2 + b^2) + sum_i C_i hinge_i`, evaluated in `f64`.
pub fn primal_objective<T: Scalar>(
    model: &LinearModel<T>,
    features: &[Vec<T>],
    labels: &[bool],
    cost: f64,
    config: &TrainConfig,
) -> f64 {
    let w: Vec<f64> = model.weights.iter().map(|v| v.to_f64_lossless()).collect();
    let b = model.bias.to_f64_lossless();
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    let loss: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let s: f64 = w.iter().zip(x).map(|(a, c)| a * c.to_f64_lossless()).sum::<f64>() + b;
            let c = if y { cost * config.positive_weight } else { cost };
            c * (1.0 - if y { s } else { -s }).max(0.0)
        })
        .sum();
    reg + loss
}

/// Dual objective `1/2 a'Qa - sum a` for multipliers `alphas`, in `f64`.
pub fn dual_objective<T: Scalar>(alphas: &[T], features: &[Vec<T>], labels: &[bool]) -> f64 {
    let dim = features.first().map_or(0, Vec::len);
    let mut w = vec![0.0f64; dim + 1];
    for ((x, &y), a) in features.iter().zip(labels).zip(alphas) {
        let c = a.to_f64_lossless() * if y { 1.0 } else { -1.0 };
        for (wj, xj) in w.iter_mut().zip(x) {
            *wj += c * xj.to_f64_lossless();
        }
        w[dim] += c;
    }
    0.5 * w.iter().map(|v| v * v).sum::<f64>() - alphas.iter().map(|a| a.to_f64_lossless()).sum::<f64>()
}

/// Largest projected-gradient magnitude of the dual at `alphas`.
pub fn kkt_violation<T: Scalar>(
    alphas: &[T],
    features: &[Vec<T>],
    labels: &[bool],
    cost: f64,
    config: &TrainConfig,
) -> f64 {
    let dim = features.first().map_or(0, Vec::len);
    let mut w = vec![0.0f64; dim + 1];
    for ((x, &y), a) in features.iter().zip(labels).zip(alphas) {
        let c = a.to_f64_lossless() * if y { 1.0 } else { -1.0 };
        for (wj, xj) in w.iter_mut().zip(x) {
            *wj += c * xj.to_f64_lossless();
        }
        w[dim] += c;
    }
    let mut worst = 0.0f64;
    for ((x, &y), a) in features.iter().zip(labels).zip(alphas) {
        let a = a.to_f64_lossless();
        let upper = if y { cost * config.positive_weight } else { cost };
        let s: f64 = w.iter().zip(x).map(|(p, q)| p * q.to_f64_lossless()).sum::<f64>() + w[dim];
        let g = if y { s } else { -s } - 1.0;
        let pg = if a <= 0.0 {
            g.min(0.0)
        } else if a >= upper {
            g.max(0.0)
        } else {
            g
        };
        worst = worst.max(pg.abs());
    }
    worst
}
