//! Reconstruction of the reparametrized spherical dynamics from trajectories:
//! normalized directions, effective step-sizes, simplex weights, aggregated
//! tangential direction, martingale noise, and the second-order remainder,
//! plus the log-growth fit and late-training diagnostics.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{self, LossKind};
use crate::net::{conservative_grad, KinkSelection, NetSpec, WeightVector};
use crate::optim::{signed_outputs_unit, StepRecord, StepSchedule};
use crate::vector;

/// u = w / |w|.
pub fn normalize(w: &[f64]) -> Result<Vec<f64>> {
    let n = vector::norm(w);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(vector::scale(w, 1.0 / n))
}

/// lambda_i = l'(p_i(w)) / sum_j l'(p_j(w)), evaluated by log-sum-exp on
/// log(-l'). For the exponential loss this is the softmax of -scale * p(u).
pub fn simplex_weights(loss_kind: LossKind, p_unit: &[f64], scale: f64) -> Vec<f64> {
    let logs: Vec<f64> = p_unit
        .iter()
        .map(|&p| loss::log_neg_deriv_extended(loss_kind, scale * p))
        .collect();
    let lse = vector::log_sum_exp(&logs);
    if lse == f64::NEG_INFINITY {
        // all derivatives vanished identically; fall back to uniform
        return vec![1.0 / p_unit.len() as f64; p_unit.len()];
    }
    logs.iter().map(|&l| (l - lse).exp()).collect()
}

/// (log gamma_tilde, log gamma_bar) for the full batch at w:
/// gamma_tilde = -(gamma/n) |w|^{L-1} sum_j l'(p_j(w)), gamma_bar =
/// gamma_tilde/|w|. The 1/n matches the risk normalization of the update
/// rule, so that w_{k+1} = w_k + gamma_tilde (g_bar + eta_tilde) exactly.
pub fn effective_steps_log(
    gamma: f64,
    norm_w: f64,
    depth: usize,
    loss_kind: LossKind,
    p_w: &[f64],
) -> (f64, f64) {
    let logs: Vec<f64> = p_w
        .iter()
        .map(|&q| loss::log_neg_deriv_extended(loss_kind, q))
        .collect();
    let lse = vector::log_sum_exp(&logs);
    let norm_term = if depth > 1 {
        (depth as f64 - 1.0) * norm_w.ln()
    } else {
        0.0
    };
    let log_tilde = gamma.ln() - (p_w.len() as f64).ln() + norm_term + lse;
    (log_tilde, log_tilde - norm_w.ln())
}

/// Linear-domain effective steps; underflow to 0 signals that callers must
/// use the log variant.
pub fn effective_steps(
    gamma: f64,
    norm_w: f64,
    depth: usize,
    loss_kind: LossKind,
    p_w: &[f64],
) -> (f64, f64) {
    let (lt, lb) = effective_steps_log(gamma, norm_w, depth, loss_kind, p_w);
    (lt.exp(), lb.exp())
}

/// g_bar = sum_i lambda_i g_i and its tangential part at u.
pub fn aggregated_direction(
    grads: &[WeightVector],
    lambda: &[f64],
    u: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grads.len() != lambda.len() {
        return Err(Error::InvalidConfig(format!(
            "{} gradients but {} weights",
            grads.len(),
            lambda.len()
        )));
    }
    let d = u.len();
    let mut g_bar = vec![0.0; d];
    for (g, &l) in grads.iter().zip(lambda) {
        vector::axpy(&mut g_bar, l, &g.data);
    }
    let g_bar_s = vector::tangent_project(&g_bar, u);
    Ok((g_bar, g_bar_s))
}

/// Second-order remainder r_k = (u_{k+1} - u_k - gb*g_s - gb*eta) / gb^2.
pub fn decompose_update(
    u_k: &[f64],
    u_k1: &[f64],
    gamma_bar: f64,
    g_bar_s: &[f64],
    eta_bar: &[f64],
) -> Result<Vec<f64>> {
    if !(gamma_bar > 0.0) {
        return Err(Error::InvalidConfig(
            "remainder undefined for gamma_bar = 0".into(),
        ));
    }
    let mut r = vector::sub(u_k1, u_k);
    vector::axpy(&mut r, -gamma_bar, g_bar_s);
    vector::axpy(&mut r, -gamma_bar, eta_bar);
    Ok(vector::scale(&r, 1.0 / (gamma_bar * gamma_bar)))
}

/// Pre-projection noise eta_tilde at w for a given batch, scaled so that
/// gamma_tilde * eta_tilde equals gamma times the raw sampling noise. Equals
/// -sum_i c_i lambda_i g_i(u) with c_i = (n_b-n)/n_b inside the batch and 1
/// outside, which makes it immune to loss-scale underflow.
pub fn noise_term_tilde(
    spec: &NetSpec,
    w: &WeightVector,
    batch: &[usize],
    dataset: &Dataset,
    loss_kind: LossKind,
    kink: KinkSelection,
) -> Result<Vec<f64>> {
    let n = dataset.len();
    let n_b = batch.len();
    let u = WeightVector::new(normalize(&w.data)?, w.shapes.clone())?;
    let p_unit = signed_outputs_unit(spec, &u, dataset)?;
    let scale = w.norm().powi(spec.depth() as i32);
    let lambda = simplex_weights(loss_kind, &p_unit, scale);
    let in_batch: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in batch {
            v[i] = true;
        }
        v
    };
    let c_in = (n_b as f64 - n as f64) / n_b as f64;
    let c_out = 1.0;
    let mut eta = vec![0.0; w.len()];
    for i in 0..n {
        let c = if in_batch[i] { c_in } else { c_out };
        if c == 0.0 || lambda[i] == 0.0 {
            continue;
        }
        let g = conservative_grad(spec, &u, &dataset.samples[i], kink)?;
        vector::axpy(&mut eta, -c * lambda[i], &g.data);
    }
    Ok(eta)
}

/// Tangentially projected noise eta_bar; zero for the full batch.
pub fn noise_term(
    spec: &NetSpec,
    w: &WeightVector,
    batch: &[usize],
    dataset: &Dataset,
    loss_kind: LossKind,
    kink: KinkSelection,
) -> Result<Vec<f64>> {
    if batch.len() == dataset.len() {
        return Ok(vec![0.0; w.len()]);
    }
    let u = normalize(&w.data)?;
    let eta_tilde = noise_term_tilde(spec, w, batch, dataset, loss_kind, kink)?;
    Ok(vector::tangent_project(&eta_tilde, &u))
}

/// Full decomposition of one recorded step.
#[derive(Debug, Clone)]
pub struct DecompositionRecord {
    pub k: u64,
    pub gamma_bar: f64,
    pub g_bar_s: Vec<f64>,
    pub eta_bar: Vec<f64>,
    pub r: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Reconstructs the decomposition at a snapshot pair (w_k, w_{k+1}).
/// `batch` must be the minibatch drawn at iteration k (None for GD).
pub fn decomposition_at(
    spec: &NetSpec,
    k: u64,
    w_k: &WeightVector,
    w_k1: &WeightVector,
    dataset: &Dataset,
    loss_kind: LossKind,
    kink: KinkSelection,
    gamma: f64,
    batch: Option<&[usize]>,
) -> Result<DecompositionRecord> {
    let norm = w_k.norm();
    let u = normalize(&w_k.data)?;
    let u1 = normalize(&w_k1.data)?;
    let uw = WeightVector::new(u.clone(), w_k.shapes.clone())?;
    let p_unit = signed_outputs_unit(spec, &uw, dataset)?;
    let scale = norm.powi(spec.depth() as i32);
    let p_w: Vec<f64> = p_unit.iter().map(|&p| scale * p).collect();
    let lambda = simplex_weights(loss_kind, &p_unit, scale);
    let grads: Result<Vec<WeightVector>> = dataset
        .samples
        .iter()
        .map(|s| conservative_grad(spec, &uw, s, kink))
        .collect();
    let grads = grads?;
    let (_, g_bar_s) = aggregated_direction(&grads, &lambda, &u)?;
    let (_, log_gb) = effective_steps_log(gamma, norm, spec.depth(), loss_kind, &p_w);
    let gamma_bar = log_gb.exp();
    let eta_bar = match batch {
        Some(b) if b.len() < dataset.len() => {
            noise_term(spec, w_k, b, dataset, loss_kind, kink)?
        }
        _ => vec![0.0; w_k.len()],
    };
    let r = decompose_update(&u, &u1, gamma_bar, &g_bar_s, &eta_bar)?;
    Ok(DecompositionRecord {
        k,
        gamma_bar,
        g_bar_s,
        eta_bar,
        r,
        lambda,
    })
}

/// Recomputes u_{k+1} = normalize(u_k + gamma_bar (g_bar + eta_tilde)) from
/// the state at w_k; an independent route for checking stored directions.
pub fn reconstruct_next_direction(
    spec: &NetSpec,
    w: &WeightVector,
    dataset: &Dataset,
    loss_kind: LossKind,
    kink: KinkSelection,
    gamma: f64,
    batch: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let norm = w.norm();
    let u = normalize(&w.data)?;
    let uw = WeightVector::new(u.clone(), w.shapes.clone())?;
    let p_unit = signed_outputs_unit(spec, &uw, dataset)?;
    let scale = norm.powi(spec.depth() as i32);
    let p_w: Vec<f64> = p_unit.iter().map(|&p| scale * p).collect();
    let lambda = simplex_weights(loss_kind, &p_unit, scale);
    let grads: Result<Vec<WeightVector>> = dataset
        .samples
        .iter()
        .map(|s| conservative_grad(spec, &uw, s, kink))
        .collect();
    let grads = grads?;
    let (g_bar, _) = aggregated_direction(&grads, &lambda, &u)?;
    let (_, log_gb) = effective_steps_log(gamma, norm, spec.depth(), loss_kind, &p_w);
    let gamma_bar = log_gb.exp();
    let eta_tilde = match batch {
        Some(b) if b.len() < dataset.len() => {
            noise_term_tilde(spec, w, b, dataset, loss_kind, kink)?
        }
        _ => vec![0.0; w.len()],
    };
    let mut next = u.clone();
    for i in 0..next.len() {
        next[i] += gamma_bar * (g_bar[i] + eta_tilde[i]);
    }
    normalize(&next)
}

/// Ordinary least squares of ys against xs: (slope, intercept, r_squared).
pub fn linear_regression(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct GrowthFit {
    /// Envelope constants: min and max of |w_k|^L / log k over the window.
    pub c1_hat: f64,
    pub c2_hat: f64,
    /// OLS fit of |w_k|^L against log k.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
}

/// Fits |w_k|^L ~ slope * log k on the given window of recorded steps. The
/// window must lie past the detected separation.
pub fn fit_log_growth(
    records: &[StepRecord],
    depth: usize,
    window: (u64, u64),
    k_sep: Option<u64>,
) -> Result<GrowthFit> {
    let k_sep = k_sep.ok_or(Error::NoSeparation)?;
    if window.0 < k_sep {
        return Err(Error::WindowBeforeSeparation {
            lo: window.0,
            hi: window.1,
            k_sep,
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut c1 = f64::INFINITY;
    let mut c2 = f64::NEG_INFINITY;
    for r in records {
        if r.k < window.0.max(2) || r.k > window.1 {
            continue;
        }
        let lk = (r.k as f64).ln();
        let m = r.norm_w.powi(depth as i32);
        xs.push(lk);
        ys.push(m);
        c1 = c1.min(m / lk);
        c2 = c2.max(m / lk);
    }
    if xs.len() < 2 {
        return Err(Error::InvalidConfig(
            "growth window contains fewer than 2 records".into(),
        ));
    }
    let (slope, intercept, r_squared) = linear_regression(&xs, &ys);
    Ok(GrowthFit {
        c1_hat: c1,
        c2_hat: c2,
        slope,
        intercept,
        r_squared,
        window,
    })
}

/// Default growth-fit window: the last 50% of post-separation records.
pub fn default_growth_window(records: &[StepRecord], k_sep: u64) -> (u64, u64) {
    let post: Vec<u64> = records
        .iter()
        .filter(|r| r.k >= k_sep)
        .map(|r| r.k)
        .collect();
    if post.is_empty() {
        return (k_sep, k_sep);
    }
    let lo = post[post.len() / 2];
    (lo, *post.last().unwrap())
}

/// Late-training diagnostics for the relaxed event of the general-loss
/// setting: norm growth, vanishing normalized step factor, margin floor.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EprimeReport {
    pub window: (u64, u64),
    pub norm_to_infinity: bool,
    pub norm_slope: f64,
    /// |w|^{L-2} sum_i (-l'(p_i(w))) = gamma_bar / gamma at the window ends.
    pub step_factor_first: f64,
    pub step_factor_last: f64,
    pub step_factor_vanishes: bool,
    pub margin_above_q0: bool,
    pub min_margin_w: f64,
}

pub fn eprime_diagnostics(records: &[StepRecord], depth: usize, schedule: StepSchedule) -> EprimeReport {
    let window_records: Vec<&StepRecord> = {
        let start = records.len() / 2;
        records[start..].iter().collect()
    };
    let window = (
        window_records.first().map_or(0, |r| r.k),
        window_records.last().map_or(0, |r| r.k),
    );
    let norms: Vec<f64> = window_records.iter().map(|r| r.norm_w).collect();
    let ks: Vec<f64> = window_records.iter().map(|r| r.k as f64).collect();
    let (norm_slope, _, _) = linear_regression(&ks, &norms);
    let norm_to_infinity = norm_slope > 0.0
        && norms.last().copied().unwrap_or(0.0) > norms.first().copied().unwrap_or(0.0);

    let step_factor = |r: &StepRecord| (r.log_gamma_bar - schedule.gamma(r.k).ln()).exp();
    let step_factor_first = window_records.first().map_or(f64::NAN, |r| step_factor(r));
    let step_factor_last = window_records.last().map_or(f64::NAN, |r| step_factor(r));
    let step_factor_vanishes = step_factor_last.is_finite()
        && step_factor_first.is_finite()
        && step_factor_last < step_factor_first
        && step_factor_last < 1.0;

    let min_margin_w = window_records
        .iter()
        .map(|r| r.norm_w.powi(depth as i32) * r.normalized_margin)
        .fold(f64::INFINITY, f64::min);
    EprimeReport {
        window,
        norm_to_infinity,
        norm_slope,
        step_factor_first,
        step_factor_last,
        step_factor_vanishes,
        margin_above_q0: min_margin_w >= 0.0,
        min_margin_w,
    }
}
