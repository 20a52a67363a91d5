//! Test-side oracles, independent of the library's solvers.

use marginflow::net::Sample;

/// Max-margin direction for 2-d linear classification by exhaustive angle
/// grid plus ternary refinement. Returns (unit direction, margin).
pub fn max_margin_2d(samples: &[Sample]) -> (Vec<f64>, f64) {
    let margin = |theta: f64| -> f64 {
        let (c, s) = (theta.cos(), theta.sin());
        samples
            .iter()
            .map(|p| p.y * (c * p.x[0] + s * p.x[1]))
            .fold(f64::INFINITY, f64::min)
    };
    let n = 200_000;
    let mut best_t = 0.0;
    let mut best_m = f64::NEG_INFINITY;
    for i in 0..n {
        let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let m = margin(t);
        if m > best_m {
            best_m = m;
            best_t = t;
        }
    }
    // the margin is concave in theta near an isolated maximizer
    let step = 2.0 * std::f64::consts::PI / n as f64;
    let (mut lo, mut hi) = (best_t - step, best_t + step);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if margin(m1) < margin(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let t = 0.5 * (lo + hi);
    (vec![t.cos(), t.sin()], margin(t))
}

fn hull_point(gens: &[Vec<f64>], lambda: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; gens[0].len()];
    for (g, &l) in gens.iter().zip(lambda) {
        for (xi, gi) in x.iter_mut().zip(g) {
            *xi += l * gi;
        }
    }
    x
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Min norm over the convex hull of up to 4 generators by coarse-to-fine
/// grid search on the simplex. The objective is convex, so shrinking the
/// search box around the incumbent loses at most one grid cell per round.
pub fn min_norm_grid(gens: &[Vec<f64>]) -> f64 {
    let m = gens.len();
    assert!((1..=4).contains(&m), "oracle supports 1..=4 generators");
    if m == 1 {
        return norm(&gens[0]);
    }
    let per_dim = 21usize;
    let mut center = vec![1.0 / m as f64; m];
    let mut radius: f64 = 1.0;
    let mut best = f64::INFINITY;
    for _ in 0..9 {
        let mut best_lambda = center.clone();
        let total = per_dim.pow((m - 1) as u32);
        for idx in 0..total {
            // grid point in [0,1]^{m-1}, mapped into the box around the
            // incumbent; last coordinate takes the slack
            let mut lam = vec![0.0; m];
            let mut rest = idx;
            let mut sum = 0.0;
            for coord in lam.iter_mut().take(m - 1) {
                let t = (rest % per_dim) as f64 / (per_dim - 1) as f64;
                rest /= per_dim;
                *coord = t;
            }
            for i in 0..m - 1 {
                lam[i] = (center[i] - radius + 2.0 * radius * lam[i]).clamp(0.0, 1.0);
                sum += lam[i];
            }
            if sum > 1.0 {
                continue;
            }
            lam[m - 1] = 1.0 - sum;
            let v = norm(&hull_point(gens, &lam));
            if v < best {
                best = v;
                best_lambda = lam;
            }
        }
        center = best_lambda;
        radius *= 0.25;
    }
    best
}

pub fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}
