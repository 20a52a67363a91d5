//! Bias-free homogeneous feedforward networks.
//!
//! The network output is `W_L s(W_{L-1} ... s(W_1 x))` with a piecewise
//! linear activation `s` and no biases, so it is positively L-homogeneous
//! in the stacked weights. Backpropagation with an explicit derivative
//! choice at activation kinks yields a selection of a conservative field
//! satisfying the Euler identity `<a(w), w> = L p(w)`.

use crate::error::{Error, Result};
use crate::vector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Linear,
}

impl Activation {
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Linear => z,
        }
    }

    /// Derivative away from zero; at exactly zero the kink selection applies.
    pub fn derivative(&self, z: f64, kink: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    0.0
                } else {
                    kink
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    slope
                } else {
                    kink
                }
            }
            Activation::Linear => 1.0,
        }
    }

    /// Endpoints of the subdifferential at zero.
    pub fn kink_extremes(&self) -> Option<(f64, f64)> {
        match *self {
            Activation::Relu => Some((0.0, 1.0)),
            Activation::LeakyRelu { slope } => Some((slope, 1.0)),
            Activation::Linear => None,
        }
    }

    pub fn kink_range(&self) -> (f64, f64) {
        self.kink_extremes().unwrap_or((1.0, 1.0))
    }
}

/// Element of the activation subdifferential used when a pre-activation
/// is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinkSelection {
    pub e: f64,
}

impl Default for KinkSelection {
    fn default() -> Self {
        KinkSelection { e: 0.0 }
    }
}

impl KinkSelection {
    pub fn new(e: f64) -> Self {
        KinkSelection { e }
    }

    pub fn validate(&self, activation: &Activation) -> Result<()> {
        let Some((lo, hi)) = activation.kink_extremes() else {
            return Ok(()); // no kink, selection never consulted
        };
        if self.e < lo || self.e > hi {
            return Err(Error::InvalidConfig(format!(
                "kink selection {} outside subdifferential [{lo}, {hi}]",
                self.e
            )));
        }
        Ok(())
    }
}

/// Architecture of a bias-free feedforward network with scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Input dim, hidden dims, output dim (must be 1).
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = NetSpec {
            layer_widths,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least input and output widths".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if *self.layer_widths.last().unwrap() != 1 {
            return Err(Error::InvalidConfig("output width must be 1".into()));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::InvalidConfig(
                    "leaky slope must lie in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of weight layers; equals the homogeneity degree L.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    /// (rows, cols) per weight layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth())
            .map(|l| (self.layer_widths[l + 1], self.layer_widths[l]))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Flat parameter array with a shape table mapping segments to layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub data: Vec<f64>,
    pub shapes: Vec<(usize, usize)>,
}

impl WeightVector {
    pub fn new(data: Vec<f64>, shapes: Vec<(usize, usize)>) -> Result<Self> {
        let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if data.len() != expected {
            return Err(Error::WeightLengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(WeightVector { data, shapes })
    }

    pub fn zeros(spec: &NetSpec) -> Self {
        WeightVector {
            data: vec![0.0; spec.param_count()],
            shapes: spec.shapes(),
        }
    }

    pub fn from_flat(spec: &NetSpec, data: Vec<f64>) -> Result<Self> {
        WeightVector::new(data, spec.shapes())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        vector::norm(&self.data)
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(|(r, c)| r * c).sum()
    }

    /// Row-major slice of the given layer's weight matrix.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let off = self.layer_offset(layer);
        let (r, c) = self.shapes[layer];
        &self.data[off..off + r * c]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        let off = self.layer_offset(layer);
        let (r, c) = self.shapes[layer];
        &mut self.data[off..off + r * c]
    }

    pub fn scaled(&self, c: f64) -> Self {
        WeightVector {
            data: vector::scale(&self.data, c),
            shapes: self.shapes.clone(),
        }
    }

    fn check_spec(&self, spec: &NetSpec) -> Result<()> {
        let shapes = spec.shapes();
        if self.shapes != shapes {
            return Err(Error::WeightLengthMismatch {
                expected: spec.param_count(),
                got: self.data.len(),
            });
        }
        Ok(())
    }
}

/// Labeled sample for binary classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Result<Self> {
        if y != 1.0 && y != -1.0 {
            return Err(Error::InvalidConfig(format!("label must be +-1, got {y}")));
        }
        Ok(Sample { x, y })
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = vector::dot(row, x);
    }
    out
}

struct ForwardTrace {
    /// Activations entering each layer; activations[0] = x.
    activations: Vec<Vec<f64>>,
    /// Pre-activations z_l = W_l a_l for each layer.
    pre_activations: Vec<Vec<f64>>,
    output: f64,
}

fn forward_trace(spec: &NetSpec, w: &WeightVector, x: &[f64]) -> Result<ForwardTrace> {
    w.check_spec(spec)?;
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    let depth = spec.depth();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut pre_activations = Vec::with_capacity(depth);
    activations.push(x.to_vec());
    for l in 0..depth {
        let (rows, cols) = w.shapes[l];
        let z = matvec(w.layer(l), rows, cols, activations.last().unwrap());
        let a = if l + 1 < depth {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        pre_activations.push(z);
        activations.push(a);
    }
    let output = pre_activations.last().unwrap()[0];
    Ok(ForwardTrace {
        activations,
        pre_activations,
        output,
    })
}

/// Network output Phi(x; w).
pub fn forward(spec: &NetSpec, w: &WeightVector, x: &[f64]) -> Result<f64> {
    Ok(forward_trace(spec, w, x)?.output)
}

/// Signed output p(w) = y * Phi(x; w).
pub fn signed_output(spec: &NetSpec, w: &WeightVector, sample: &Sample) -> Result<f64> {
    Ok(sample.y * forward(spec, w, &sample.x)?)
}

/// Derivative choice for hidden unit (layer, index) whose pre-activation is
/// exactly zero.
trait KinkRule {
    fn at(&self, layer: usize, unit: usize) -> f64;
}

struct UniformKink(f64);

impl KinkRule for UniformKink {
    fn at(&self, _layer: usize, _unit: usize) -> f64 {
        self.0
    }
}

struct TableKink<'a> {
    base: f64,
    // (layer, unit) -> derivative value
    table: &'a [((usize, usize), f64)],
}

impl KinkRule for TableKink<'_> {
    fn at(&self, layer: usize, unit: usize) -> f64 {
        self.table
            .iter()
            .find(|(pos, _)| *pos == (layer, unit))
            .map(|(_, v)| *v)
            .unwrap_or(self.base)
    }
}

fn backprop(
    spec: &NetSpec,
    w: &WeightVector,
    trace: &ForwardTrace,
    y: f64,
    kinks: &dyn KinkRule,
) -> WeightVector {
    let depth = spec.depth();
    let mut grad = WeightVector::zeros(spec);
    // dL/dz for the current layer, starting at the scalar output.
    let mut delta = vec![y];
    for l in (0..depth).rev() {
        let (rows, cols) = w.shapes[l];
        let a = &trace.activations[l];
        {
            let g = grad.layer_mut(l);
            for r in 0..rows {
                for c in 0..cols {
                    g[r * cols + c] = delta[r] * a[c];
                }
            }
        }
        if l == 0 {
            break;
        }
        // delta for the previous layer: sigma'(z_{l-1}) . (W_l^T delta)
        let wl = w.layer(l);
        let z_prev = &trace.pre_activations[l - 1];
        let mut next = vec![0.0; cols];
        for c in 0..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += wl[r * cols + c] * delta[r];
            }
            let z = z_prev[c];
            let d = if z == 0.0 {
                kinks.at(l - 1, c)
            } else {
                spec.activation.derivative(z, 0.0)
            };
            next[c] = d * s;
        }
        delta = next;
    }
    grad
}

/// Conservative-field backpropagation: reverse-mode chain rule where every
/// activation derivative at an exactly-zero pre-activation is replaced by
/// the kink selection. Satisfies `<grad, w> = L p(w)` and
/// `grad(lambda w) = lambda^{L-1} grad(w)`.
pub fn conservative_grad(
    spec: &NetSpec,
    w: &WeightVector,
    sample: &Sample,
    ks: KinkSelection,
) -> Result<WeightVector> {
    let trace = forward_trace(spec, w, &sample.x)?;
    Ok(backprop(spec, w, &trace, sample.y, &UniformKink(ks.e)))
}

/// Result of kink enumeration at one point.
pub struct GradGenerators {
    pub grads: Vec<WeightVector>,
    /// False when more than `max_zeros` pre-activations were exactly zero
    /// and only the configured selection was used.
    pub exact: bool,
}

/// Enumerates conservative gradients over extreme kink selections at the
/// zero pre-activations. At most `max_zeros` kinks are enumerated (2^max_zeros
/// combinations); beyond that only the base selection is returned and the
/// result is flagged as an under-approximation.
pub fn conservative_grad_generators(
    spec: &NetSpec,
    w: &WeightVector,
    sample: &Sample,
    base: KinkSelection,
    max_zeros: usize,
) -> Result<GradGenerators> {
    let trace = forward_trace(spec, w, &sample.x)?;
    let mut zeros = Vec::new();
    // only hidden layers feed an activation
    for l in 0..spec.depth().saturating_sub(1) {
        for (j, &z) in trace.pre_activations[l].iter().enumerate() {
            if z == 0.0 {
                zeros.push((l, j));
            }
        }
    }
    let extremes = spec.activation.kink_extremes();
    if zeros.is_empty() || extremes.is_none() {
        return Ok(GradGenerators {
            grads: vec![backprop(spec, w, &trace, sample.y, &UniformKink(base.e))],
            exact: true,
        });
    }
    if zeros.len() > max_zeros {
        return Ok(GradGenerators {
            grads: vec![backprop(spec, w, &trace, sample.y, &UniformKink(base.e))],
            exact: false,
        });
    }
    let (lo, hi) = extremes.unwrap();
    let mut grads = Vec::with_capacity(1 << zeros.len());
    for mask in 0..(1usize << zeros.len()) {
        let table: Vec<((usize, usize), f64)> = zeros
            .iter()
            .enumerate()
            .map(|(b, &pos)| (pos, if mask >> b & 1 == 1 { hi } else { lo }))
            .collect();
        let rule = TableKink {
            base: base.e,
            table: &table,
        };
        grads.push(backprop(spec, w, &trace, sample.y, &rule));
    }
    Ok(GradGenerators { grads, exact: true })
}

/// Hidden-layer pre-activations, flattened; empty for L = 1. Useful for
/// detecting proximity to activation kinks.
pub fn hidden_preactivations(spec: &NetSpec, w: &WeightVector, x: &[f64]) -> Result<Vec<f64>> {
    let trace = forward_trace(spec, w, x)?;
    let mut zs = Vec::new();
    for l in 0..spec.depth().saturating_sub(1) {
        zs.extend_from_slice(&trace.pre_activations[l]);
    }
    Ok(zs)
}

/// Max relative homogeneity error over the given scalings.
pub fn homogeneity_check(
    spec: &NetSpec,
    w: &WeightVector,
    x: &[f64],
    lambdas: &[f64],
) -> Result<f64> {
    let base = forward(spec, w, x)?;
    let deg = spec.depth() as i32;
    let mut worst: f64 = 0.0;
    for &lambda in lambdas {
        let scaled = forward(spec, &w.scaled(lambda), x)?;
        let factor = lambda.powi(deg);
        let err = (scaled - factor * base).abs() / (1.0 + (base * factor).abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Product of layer operator norms, estimated by power iteration. Together
/// with `|x|` this bounds `|Phi(x; w)|` for the given weights.
pub fn operator_norm_product(spec: &NetSpec, w: &WeightVector) -> Result<f64> {
    w.check_spec(spec)?;
    let mut prod = 1.0;
    for l in 0..spec.depth() {
        let (rows, cols) = w.shapes[l];
        let m = w.layer(l);
        // power iteration on M^T M
        let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
        let mut sigma = 0.0;
        for _ in 0..100 {
            let mv = matvec(m, rows, cols, &v);
            // u = M^T (M v)
            let mut u = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    u[c] += m[r * cols + c] * mv[r];
                }
            }
            let n = vector::norm(&u);
            if n == 0.0 {
                sigma = 0.0;
                break;
            }
            sigma = n.sqrt();
            v = vector::scale(&u, 1.0 / n);
        }
        prod *= sigma;
    }
    Ok(prod)
}
