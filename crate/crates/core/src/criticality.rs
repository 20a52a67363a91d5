//! Margin criticality on the sphere: active sets, convex hulls of
//! conservative gradients, the min-norm point in a hull (Wolfe's algorithm),
//! stationarity residuals, a KKT residual for the max-margin program, and an
//! explicit Euler discretization of the spherical margin flow.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{
    conservative_grad_generators, signed_output, KinkSelection, NetSpec, WeightVector,
};
use crate::vector;
use nalgebra::{DMatrix, DVector};

/// Default cap on enumerated zero pre-activations per sample (2^8 kink
/// assignments).
pub const MAX_KINK_ZEROS: usize = 8;

/// Indices attaining the minimum of `p` up to a relative tolerance.
pub fn active_set(p: &[f64], tol: f64) -> Vec<usize> {
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let cut = min + tol * (1.0 + min.abs());
    p.iter()
        .enumerate()
        .filter(|(_, &v)| v <= cut)
        .map(|(i, _)| i)
        .collect()
}

/// Anything exposing per-sample margins and the extreme points of their
/// conservative gradients, so both networks and hand-built toy examples run
/// through the same hull machinery.
pub trait SubgradientModel {
    fn dim(&self) -> usize;
    fn margins(&self, u: &[f64]) -> Result<Vec<f64>>;
    /// Extreme conservative-gradient generators of p_i at u. The flag is
    /// false when kink enumeration was truncated.
    fn generators(&self, u: &[f64], i: usize) -> Result<(Vec<Vec<f64>>, bool)>;
}

/// A network with a dataset.
pub struct NetModel<'a> {
    pub spec: &'a NetSpec,
    pub dataset: &'a Dataset,
    pub kink: KinkSelection,
    pub max_zeros: usize,
}

impl<'a> NetModel<'a> {
    pub fn new(spec: &'a NetSpec, dataset: &'a Dataset, kink: KinkSelection) -> Self {
        NetModel {
            spec,
            dataset,
            kink,
            max_zeros: MAX_KINK_ZEROS,
        }
    }
}

impl SubgradientModel for NetModel<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn margins(&self, u: &[f64]) -> Result<Vec<f64>> {
        let w = WeightVector::from_flat(self.spec, u.to_vec())?;
        self.dataset
            .samples
            .iter()
            .map(|s| signed_output(self.spec, &w, s))
            .collect()
    }

    fn generators(&self, u: &[f64], i: usize) -> Result<(Vec<Vec<f64>>, bool)> {
        let w = WeightVector::from_flat(self.spec, u.to_vec())?;
        let gens = conservative_grad_generators(
            self.spec,
            &w,
            &self.dataset.samples[i],
            self.kink,
            self.max_zeros,
        )?;
        Ok((gens.grads.into_iter().map(|g| g.data).collect(), gens.exact))
    }
}

/// One-dimensional toy with p_1(w) = relu(w) and p_2(w) = relu(-w). The
/// margin is identically zero, each selection gradient vanishes away from
/// the origin, yet kink enumeration at w = 0 produces the hull [-1, 1].
pub struct MinPairModel;

impl SubgradientModel for MinPairModel {
    fn dim(&self) -> usize {
        1
    }

    fn margins(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![u[0].max(0.0), (-u[0]).max(0.0)])
    }

    fn generators(&self, u: &[f64], i: usize) -> Result<(Vec<Vec<f64>>, bool)> {
        let w = u[0];
        // d/dw relu(w) and d/dw relu(-w)
        let gens = match (i, w) {
            (0, w) if w > 0.0 => vec![vec![1.0]],
            (0, w) if w < 0.0 => vec![vec![0.0]],
            (0, _) => vec![vec![0.0], vec![1.0]],
            (1, w) if w < 0.0 => vec![vec![-1.0]],
            (1, w) if w > 0.0 => vec![vec![0.0]],
            _ => vec![vec![0.0], vec![-1.0]],
        };
        Ok((gens, true))
    }
}

/// Generators of the margin hull at u: extreme conservative gradients of all
/// active samples, in the ambient space.
pub fn hull_generators(
    model: &dyn SubgradientModel,
    u: &[f64],
    active_tol: f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>, bool)> {
    let p = model.margins(u)?;
    let active = active_set(&p, active_tol);
    let mut gens = Vec::new();
    let mut exact = true;
    for &i in &active {
        let (g, ex) = model.generators(u, i)?;
        exact &= ex;
        gens.extend(g);
    }
    Ok((gens, active, exact))
}

/// Same generators projected onto the tangent space at u.
pub fn spherical_generators(
    model: &dyn SubgradientModel,
    u: &[f64],
    active_tol: f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>, bool)> {
    let (gens, active, exact) = hull_generators(model, u, active_tol)?;
    let projected = gens
        .iter()
        .map(|g| vector::tangent_project(g, u))
        .collect();
    Ok((projected, active, exact))
}

#[derive(Debug, Clone)]
pub struct MinNormResult {
    pub point: Vec<f64>,
    /// Convex coefficients over the input generators.
    pub coeffs: Vec<f64>,
    pub converged: bool,
}

/// Norm of the returned point.
impl MinNormResult {
    pub fn norm(&self) -> f64 {
        vector::norm(&self.point)
    }
}

/// Affine minimizer over the corral S: minimizes |G alpha| subject to
/// sum alpha = 1, via the KKT system solved with SVD.
fn affine_minimizer(gens: &[Vec<f64>], corral: &[usize]) -> Vec<f64> {
    let m = corral.len();
    if m == 1 {
        return vec![1.0];
    }
    let mut sys = DMatrix::zeros(m + 1, m + 1);
    for a in 0..m {
        for b in 0..m {
            sys[(a, b)] = vector::dot(&gens[corral[a]], &gens[corral[b]]);
        }
        sys[(a, m)] = 1.0;
        sys[(m, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;
    let sol = sys
        .svd(true, true)
        .solve(&rhs, 1e-13)
        .unwrap_or_else(|_| DVector::from_element(m + 1, 1.0 / m as f64));
    (0..m).map(|a| sol[a]).collect()
}

/// Wolfe's min-norm-point algorithm on conv{generators}.
pub fn min_norm_in_hull(gens: &[Vec<f64>], tol: f64) -> Result<MinNormResult> {
    if gens.is_empty() {
        return Err(Error::InvalidConfig("empty generator set".into()));
    }
    let m = gens.len();
    // start from the shortest generator
    let start = (0..m)
        .min_by(|&a, &b| {
            vector::norm(&gens[a])
                .partial_cmp(&vector::norm(&gens[b]))
                .unwrap()
        })
        .unwrap();
    let mut corral = vec![start];
    let mut lambda = vec![1.0];
    let cap = 10 * m * m + 100;
    let mut converged = false;

    let point_of = |corral: &[usize], lambda: &[f64]| -> Vec<f64> {
        let mut x = vec![0.0; gens[0].len()];
        for (&j, &l) in corral.iter().zip(lambda) {
            vector::axpy(&mut x, l, &gens[j]);
        }
        x
    };

    for _ in 0..cap {
        let x = point_of(&corral, &lambda);
        let xx = vector::dot(&x, &x);
        // most violating generator
        let (best, best_ip) = (0..m)
            .map(|j| (j, vector::dot(&x, &gens[j])))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if best_ip >= xx - tol * (1.0 + xx) {
            converged = true;
            break;
        }
        if !corral.contains(&best) {
            corral.push(best);
            lambda.push(0.0);
        }
        // minor loop: pull lambda toward the affine minimizer, dropping
        // vertices whose coefficient hits zero
        loop {
            let alpha = affine_minimizer(gens, &corral);
            if alpha.iter().all(|&a| a > 1e-12) {
                lambda = alpha;
                break;
            }
            let mut theta = 1.0f64;
            for (l, a) in lambda.iter().zip(&alpha) {
                if *a <= 1e-12 && l - a > 0.0 {
                    theta = theta.min(l / (l - a));
                }
            }
            for (l, a) in lambda.iter_mut().zip(&alpha) {
                *l = (1.0 - theta) * *l + theta * a;
            }
            let keep: Vec<usize> = (0..corral.len())
                .filter(|&i| lambda[i] > 1e-12)
                .collect();
            if keep.len() == corral.len() {
                // numerical stall: renormalize and accept
                let s: f64 = lambda.iter().sum();
                for l in &mut lambda {
                    *l /= s;
                }
                break;
            }
            corral = keep.iter().map(|&i| corral[i]).collect();
            lambda = keep.iter().map(|&i| lambda[i]).collect();
            let s: f64 = lambda.iter().sum();
            for l in &mut lambda {
                *l /= s;
            }
        }
    }

    let point = point_of(&corral, &lambda);
    let mut coeffs = vec![0.0; m];
    for (&j, &l) in corral.iter().zip(&lambda) {
        coeffs[j] += l;
    }
    Ok(MinNormResult {
        point,
        coeffs,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct CriticalityReport {
    /// dist(0, projected hull) at u.
    pub residual: f64,
    pub active: Vec<usize>,
    /// Min-norm point of the projected hull (the steepest margin-ascent
    /// direction when nonzero).
    pub direction: Vec<f64>,
    pub exact: bool,
    pub converged: bool,
}

/// Distance from zero to the tangentially projected hull of active-sample
/// gradients; zero characterizes margin-critical directions.
pub fn criticality_residual(
    model: &dyn SubgradientModel,
    u: &[f64],
    active_tol: f64,
    mnp_tol: f64,
) -> Result<CriticalityReport> {
    let (gens, active, exact) = spherical_generators(model, u, active_tol)?;
    let mnp = min_norm_in_hull(&gens, mnp_tol)?;
    Ok(CriticalityReport {
        residual: mnp.norm(),
        active,
        direction: mnp.point,
        exact,
        converged: mnp.converged,
    })
}

/// Non-negative least squares min_{alpha >= 0} |b - A alpha| by active-set
/// iteration; columns of A are the generator vectors.
fn nnls(cols: &[Vec<f64>], b: &[f64], tol: f64) -> (Vec<f64>, f64) {
    let m = cols.len();
    let d = b.len();
    let mut alpha = vec![0.0; m];
    let mut passive: Vec<usize> = Vec::new();
    let mut residual = b.to_vec();

    let solve_ls = |p: &[usize]| -> Vec<f64> {
        let a = DMatrix::from_fn(d, p.len(), |r, c| cols[p[c]][r]);
        let bb = DVector::from_row_slice(b);
        a.svd(true, true)
            .solve(&bb, 1e-13)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_else(|_| vec![0.0; p.len()])
    };

    for _ in 0..(3 * m + 30) {
        // most positively correlated excluded column
        let mut best = None;
        for j in 0..m {
            if passive.contains(&j) {
                continue;
            }
            let w = vector::dot(&cols[j], &residual);
            if w > tol && best.map_or(true, |(_, bw)| w > bw) {
                best = Some((j, w));
            }
        }
        let Some((j, _)) = best else { break };
        passive.push(j);
        loop {
            let s = solve_ls(&passive);
            if s.iter().all(|&v| v > 0.0) {
                for (idx, &pj) in passive.iter().enumerate() {
                    alpha[pj] = s[idx];
                }
                break;
            }
            let mut theta = f64::INFINITY;
            for (idx, &pj) in passive.iter().enumerate() {
                if s[idx] <= 0.0 {
                    let denom = alpha[pj] - s[idx];
                    if denom > 0.0 {
                        theta = theta.min(alpha[pj] / denom);
                    } else {
                        theta = 0.0;
                    }
                }
            }
            for (idx, &pj) in passive.iter().enumerate() {
                alpha[pj] += theta * (s[idx] - alpha[pj]);
            }
            passive.retain(|&pj| alpha[pj] > 1e-14);
            if passive.is_empty() {
                break;
            }
        }
        residual = b.to_vec();
        for (j, &a) in alpha.iter().enumerate() {
            if a != 0.0 {
                vector::axpy(&mut residual, -a, &cols[j]);
            }
        }
    }
    (alpha, vector::norm(&residual))
}

#[derive(Debug, Clone)]
pub struct KktReport {
    /// |w* - sum_i alpha_i v_i| with v_i the active conservative gradients
    /// at the rescaled point w* = u / m(u)^{1/L}.
    pub residual: f64,
    pub w_star: WeightVector,
    pub alpha: Vec<f64>,
    pub active: Vec<usize>,
    /// Normalized margin m(u).
    pub margin: f64,
}

/// First-order optimality residual of u for the minimum-norm separation
/// program: rescale u to unit margin, then measure how far w* is from the
/// non-negative cone spanned by the active gradients.
pub fn kkt_residual(
    spec: &NetSpec,
    dataset: &Dataset,
    u: &[f64],
    kink: KinkSelection,
    active_tol: f64,
) -> Result<KktReport> {
    let model = NetModel::new(spec, dataset, kink);
    let p = model.margins(u)?;
    let margin = p.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(margin > 0.0) {
        return Err(Error::NonPositiveMargin { margin });
    }
    let depth = spec.depth() as f64;
    let scale = margin.powf(-1.0 / depth);
    let w_star_data = vector::scale(u, scale);
    let (gens, active, _) = hull_generators(&model, &w_star_data, active_tol)?;
    let (alpha, residual) = nnls(&gens, &w_star_data, 1e-12);
    Ok(KktReport {
        residual,
        w_star: WeightVector::from_flat(spec, w_star_data)?,
        alpha,
        active,
        margin,
    })
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub u: Vec<f64>,
    /// Margin after each executed step (index 0 = initial margin).
    pub margins: Vec<f64>,
    pub residuals: Vec<f64>,
    pub steps_taken: usize,
    pub converged: bool,
}

/// Explicit Euler steps of the spherical margin-ascent inclusion:
/// u <- normalize(u + h v) with v the min-norm point of the projected hull.
/// Stops when |v| < stop_tol.
pub fn euler_di_flow(
    model: &dyn SubgradientModel,
    u0: &[f64],
    h: f64,
    max_steps: usize,
    stop_tol: f64,
    active_tol: f64,
) -> Result<FlowResult> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be > 0, got {h}")));
    }
    let n0 = vector::norm(u0);
    if n0 == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut u = vector::scale(u0, 1.0 / n0);
    let margin_of = |model: &dyn SubgradientModel, u: &[f64]| -> Result<f64> {
        Ok(model
            .margins(u)?
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min))
    };
    let mut margins = vec![margin_of(model, &u)?];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut steps_taken = 0;
    for _ in 0..max_steps {
        let report = criticality_residual(model, &u, active_tol, 1e-12)?;
        residuals.push(report.residual);
        if report.residual < stop_tol {
            converged = true;
            break;
        }
        let mut next = u.clone();
        vector::axpy(&mut next, h, &report.direction);
        let n = vector::norm(&next);
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        u = vector::scale(&next, 1.0 / n);
        steps_taken += 1;
        margins.push(margin_of(model, &u)?);
    }
    Ok(FlowResult {
        u,
        margins,
        residuals,
        steps_taken,
        converged,
    })
}
