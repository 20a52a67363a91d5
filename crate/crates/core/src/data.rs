//! Synthetic separable dataset generators with certified margins, plus CSV
//! ingestion.

use crate::error::{Error, Result};
use crate::net::{Activation, NetSpec, Sample, WeightVector};
use crate::vector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Explicit separating network stored as evidence that a dataset is
/// separable at positive margin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessNet {
    pub spec: NetSpec,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Guaranteed lower bound on min_i y_i <nu, x_i> for the stored normal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certified_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<WitnessNet>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, meta: DatasetMeta) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = samples[0].x.len();
        if samples.iter().any(|s| s.x.len() != d) {
            return Err(Error::InvalidConfig(
                "samples have inconsistent dimensions".into(),
            ));
        }
        Ok(Dataset { samples, meta })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        writeln!(out, "{},y", header.join(","))?;
        for s in &self.samples {
            let row: Vec<String> = s.x.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{},{}", row.join(","), s.y as i64)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn unit_normal(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let n = vector::norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return vector::scale(&v, 1.0 / n);
        }
    }
}

fn uniform_in_ball(rng: &mut ChaCha12Rng, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| rng.gen_range(-radius..=radius))
            .collect();
        if vector::norm(&v) <= radius {
            return v;
        }
    }
}

/// Linearly separable points in the ball of radius `radius`, with the slab
/// |<nu, x>| < `margin` removed; the stored unit normal attains margin
/// >= `margin` on every sample.
pub fn gen_linear_separable(
    seed: u64,
    n: usize,
    d: usize,
    margin: f64,
    radius: f64,
) -> Result<Dataset> {
    if !(margin > 0.0 && margin < radius) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < margin < radius, got margin={margin}, radius={radius}"
        )));
    }
    if n == 0 || d == 0 {
        return Err(Error::InvalidConfig("need n >= 1 and d >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let nu = unit_normal(&mut rng, d);
    let mut samples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let cap = 1000 * n;
    while samples.len() < n {
        attempts += 1;
        if attempts > cap {
            return Err(Error::RejectionFailure { attempts });
        }
        let x = uniform_in_ball(&mut rng, d, radius);
        let p = vector::dot(&nu, &x);
        if p.abs() < margin {
            continue;
        }
        samples.push(Sample {
            y: p.signum(),
            x,
        });
    }
    Dataset::new(
        samples,
        DatasetMeta {
            generator: "linear".into(),
            seed: Some(seed),
            certified_margin: Some(margin),
            normal: Some(nu),
            witness: None,
        },
    )
}

/// Four clusters at (+-1, +-1) with XOR labels and cluster radius 0.2.
/// Not linearly separable; separable by the stored width-4 ReLU witness.
pub fn gen_xor_ring(seed: u64, n: usize) -> Result<Dataset> {
    if n < 8 || n % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "xor-ring needs n >= 8 divisible by 4, got {n}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let centers = [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)];
    let mut samples = Vec::with_capacity(n);
    for (ci, &(cx, cy)) in centers.iter().enumerate() {
        let label = if ci < 2 { 1.0 } else { -1.0 };
        for _ in 0..n / 4 {
            let dx = uniform_in_ball(&mut rng, 2, 0.2);
            samples.push(Sample {
                x: vec![cx + dx[0], cy + dx[1]],
                y: label,
            });
        }
    }
    let spec = NetSpec::new(vec![2, 4, 1], Activation::Relu)?;
    // rows of W1 point at the clusters; output weights subtract the XOR pair
    let witness_w = vec![
        1.0, 1.0, //
        -1.0, -1.0, //
        1.0, -1.0, //
        -1.0, 1.0, //
        1.0, 1.0, -1.0, -1.0,
    ];
    Dataset::new(
        samples,
        DatasetMeta {
            generator: "xor_ring".into(),
            seed: Some(seed),
            certified_margin: None,
            normal: None,
            witness: Some(WitnessNet {
                spec,
                weights: witness_w,
            }),
        },
    )
}

impl WitnessNet {
    pub fn weight_vector(&self) -> Result<WeightVector> {
        WeightVector::from_flat(&self.spec, self.weights.clone())
    }
}

/// Parses "x1,...,xd,y" rows; an optional header line is skipped. Labels
/// must be -1 or +1.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut samples = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if idx == 0 && fields.last().map(|s| s.eq_ignore_ascii_case("y")) == Some(true) {
            continue; // header
        }
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: "need at least one feature and a label".into(),
            });
        }
        let mut values = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid number \"{f}\""),
            })?;
            values.push(v);
        }
        let y = values.pop().unwrap();
        if y != 1.0 && y != -1.0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label must be -1 or +1, got {y}"),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {d} features, got {}", values.len()),
                });
            }
            _ => {}
        }
        samples.push(Sample { x: values, y });
    }
    Dataset::new(
        samples,
        DatasetMeta {
            generator: "csv".into(),
            ..Default::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::forward;
    use std::io::Write as _;

    #[test]
    fn linear_generator_certifies_margin() {
        let ds = gen_linear_separable(7, 100, 3, 0.5, 2.0).unwrap();
        let nu = ds.meta.normal.clone().unwrap();
        let min_p = ds
            .samples
            .iter()
            .map(|s| s.y * vector::dot(&nu, &s.x))
            .fold(f64::INFINITY, f64::min);
        assert!(min_p >= 0.5);
        assert_eq!(ds.len(), 100);
    }

    #[test]
    fn linear_generator_deterministic() {
        let a = gen_linear_separable(11, 20, 2, 0.3, 1.0).unwrap();
        let b = gen_linear_separable(11, 20, 2, 0.3, 1.0).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn linear_generator_rejects_bad_margin() {
        assert!(gen_linear_separable(1, 4, 2, 2.0, 1.0).is_err());
    }

    #[test]
    fn xor_ring_witness_separates() {
        let ds = gen_xor_ring(3, 16).unwrap();
        assert_eq!(ds.len(), 16);
        let witness = ds.meta.witness.clone().unwrap();
        let w = witness.weight_vector().unwrap();
        let mut min_p = f64::INFINITY;
        for s in &ds.samples {
            let p = s.y * forward(&witness.spec, &w, &s.x).unwrap();
            min_p = min_p.min(p);
        }
        assert!(min_p > 0.0, "witness margin = {min_p}");
        // cluster counts
        let pos = ds.samples.iter().filter(|s| s.y > 0.0).count();
        assert_eq!(pos, 8);
    }

    #[test]
    fn xor_ring_validates_n() {
        assert!(gen_xor_ring(0, 6).is_err());
        assert!(gen_xor_ring(0, 10).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("marginflow-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let path = dir.join("ok.csv");
        std::fs::write(&path, "1.0,2.0,1\n-1.0,0.5,-1\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);

        let out = dir.join("echo.csv");
        ds.save_csv(&out).unwrap();
        let echoed = load_csv(&out).unwrap();
        assert_eq!(ds.samples, echoed.samples);

        let bad_label = dir.join("bad_label.csv");
        std::fs::write(&bad_label, "1.0,2.0,0\n").unwrap();
        assert!(load_csv(&bad_label).is_err());

        let ragged = dir.join("ragged.csv");
        let mut f = std::fs::File::create(&ragged).unwrap();
        writeln!(f, "1.0,2.0,1").unwrap();
        writeln!(f, "1.0,1").unwrap();
        drop(f);
        let err = load_csv(&ragged).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let empty = dir.join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_csv(&empty).is_err());
    }
}
