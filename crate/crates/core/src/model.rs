//! Problem specifications: the network `f`, Gaussian noise, the sets of the
//! safety problem, optional affine control input and certification knobs.
//!
//! The closed-loop system is `x' = f(x) + g·u + v` with `v ~ N(0, diag(σ²))`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Hyperbox};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Validation { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }
}

/// Affine map followed by an element-wise activation; `weights` is row-major
/// with one row per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Self {
        Self { weights, bias, activation }
    }

    pub fn rows(&self) -> usize {
        self.weights.len()
    }

    pub fn cols(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.pre_activation(x).into_iter().map(|z| self.activation.apply(z)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralNetwork {
    pub layers: Vec<Layer>,
}

impl NeuralNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self, ModelError> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(invalid("network.layers", "at least one layer is required"));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let cols = layer.cols();
            if layer.rows() == 0 || cols == 0 {
                return Err(invalid(format!("network.layers[{k}].weights"), "empty weight matrix"));
            }
            if layer.weights.iter().any(|r| r.len() != cols) {
                return Err(invalid(format!("network.layers[{k}].weights"), "ragged weight matrix"));
            }
            if layer.bias.len() != layer.rows() {
                return Err(invalid(
                    format!("network.layers[{k}].bias"),
                    format!("length {} does not match {} weight rows", layer.bias.len(), layer.rows()),
                ));
            }
            if layer.weights.iter().flatten().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(invalid(format!("network.layers[{k}]"), "non-finite parameter"));
            }
            if k > 0 && self.layers[k - 1].rows() != cols {
                return Err(invalid(
                    format!("network.layers[{k}].weights"),
                    format!("expects {cols} inputs but previous layer has {} outputs", self.layers[k - 1].rows()),
                ));
            }
        }
        Ok(())
    }

    pub fn dim_in(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn dim_out(&self) -> usize {
        self.layers.last().map_or(0, Layer::rows)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.dim_in() {
            return Err(ModelError::Dimension { expected: self.dim_in(), got: x.len() });
        }
        Ok(self.evaluate_unchecked(x))
    }

    pub(crate) fn evaluate_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.layers.iter().fold(x.to_vec(), |a, layer| layer.forward(&a))
    }

    /// On/off pattern of every relu neuron at `x` (identity neurons omitted).
    pub fn activation_pattern(&self, x: &[f64]) -> Vec<bool> {
        let mut pattern = Vec::new();
        let mut a = x.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&a);
            if layer.activation == Activation::Relu {
                pattern.extend(z.iter().map(|&v| v > 0.0));
            }
            a = z.into_iter().map(|v| layer.activation.apply(v)).collect();
        }
        pattern
    }
}

/// Diagonal Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub variances: Vec<f64>,
}

impl GaussianNoise {
    pub fn new(variances: Vec<f64>) -> Result<Self, ModelError> {
        let noise = Self { variances };
        noise.validate()?;
        Ok(noise)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if let Some((i, v)) = self.variances.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!("noise.variances[{i}]"), format!("must be finite and nonnegative, got {v}")));
        }
        Ok(())
    }

    pub fn zero(n: usize) -> Self {
        Self { variances: vec![0.0; n] }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.variances
            .iter()
            .map(|&s2| {
                let z: f64 = rng.sample(StandardNormal);
                s2.sqrt() * z
            })
            .collect()
    }
}

/// Affine input `g·u` with `u` in the box `[u_lower, u_upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlStructure {
    pub g: Vec<Vec<f64>>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
}

impl ControlStructure {
    pub fn dim(&self) -> usize {
        self.u_lower.len()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.g.iter().map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim() && u.iter().zip(&self.u_lower).zip(&self.u_upper).all(|((v, l), h)| l <= v && v <= h)
    }

    pub fn clip(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.u_lower).zip(&self.u_upper).map(|((v, l), h)| v.clamp(*l, *h)).collect()
    }

    fn validate(&self, n: usize) -> Result<(), ModelError> {
        let c = self.u_lower.len();
        if c == 0 {
            return Err(invalid("control.u_lower", "empty control vector"));
        }
        if self.u_upper.len() != c {
            return Err(invalid("control.u_upper", format!("length {} differs from u_lower length {c}", self.u_upper.len())));
        }
        if self.g.len() != n || self.g.iter().any(|r| r.len() != c) {
            return Err(invalid("control.g", format!("must be {n}x{c}")));
        }
        for i in 0..c {
            if !self.u_lower[i].is_finite() || !self.u_upper[i].is_finite() {
                return Err(invalid(format!("control.u_lower[{i}]"), "control bounds must be finite"));
            }
            if self.u_lower[i] > self.u_upper[i] {
                return Err(invalid(format!("control.u_lower[{i}]"), "exceeds u_upper"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub network: NeuralNetwork,
    pub noise: GaussianNoise,
    pub state_space: Hyperbox,
    pub safe_set: Hyperbox,
    pub initial_set: Hyperbox,
    pub horizon: usize,
    pub threshold: f64,
    pub barrier_degree: u32,
    pub eta_step: f64,
    pub partition_widths: Vec<f64>,
    pub control: Option<ControlStructure>,
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.network.dim_in()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.network.validate()?;
        let n = self.network.dim_in();
        if self.network.dim_out() != n {
            return Err(invalid(
                "network",
                format!("closed-loop model must map R^{n} to itself, output dimension is {}", self.network.dim_out()),
            ));
        }
        self.noise.validate()?;
        if self.noise.variances.len() != n {
            return Err(invalid("noise.variances", format!("expected {n} entries, got {}", self.noise.variances.len())));
        }
        for (name, b) in [("sets.state", &self.state_space), ("sets.safe", &self.safe_set), ("sets.initial", &self.initial_set)] {
            b.validate().map_err(|e: GeometryError| invalid(name, e.to_string()))?;
            if b.dim() != n {
                return Err(invalid(name, format!("expected dimension {n}, got {}", b.dim())));
            }
        }
        if !self.safe_set.contains_box(&self.initial_set) {
            return Err(invalid("sets.initial", "initial set must lie inside the safe set"));
        }
        if !self.state_space.contains_box(&self.safe_set) {
            return Err(invalid("sets.safe", "safe set must lie inside the state space"));
        }
        if self.horizon == 0 {
            return Err(invalid("certify.horizon", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid("certify.threshold", format!("must lie in [0, 1], got {}", self.threshold)));
        }
        if self.barrier_degree < 2 || self.barrier_degree % 2 == 1 {
            return Err(invalid("certify.degree", format!("must be an even integer >= 2, got {}", self.barrier_degree)));
        }
        if !(self.eta_step > 0.0) || !self.eta_step.is_finite() {
            return Err(invalid("certify.eta_step", "must be positive"));
        }
        if self.partition_widths.len() != n {
            return Err(invalid("certify.partition_widths", format!("expected {n} entries")));
        }
        if self.partition_widths.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(invalid("certify.partition_widths", "widths must be strictly positive"));
        }
        if let Some(c) = &self.control {
            c.validate(n)?;
        }
        Ok(())
    }

    /// One transition `f(x) + g·u + v`.
    pub fn step_sample<R: Rng + ?Sized>(&self, x: &[f64], u: Option<&[f64]>, rng: &mut R) -> Result<Vec<f64>, ModelError> {
        let mut next = self.network.evaluate(x)?;
        if let Some(u) = u {
            let c = self
                .control
                .as_ref()
                .ok_or_else(|| invalid("control", "control input given but the problem has no control structure"))?;
            if u.len() != c.dim() {
                return Err(ModelError::Dimension { expected: c.dim(), got: u.len() });
            }
            for (xi, gi) in next.iter_mut().zip(c.apply(u)) {
                *xi += gi;
            }
        }
        for (xi, vi) in next.iter_mut().zip(self.noise.sample(rng)) {
            *xi += vi;
        }
        Ok(next)
    }

    pub fn to_file(&self) -> ProblemFile {
        let bx = |b: &Hyperbox| BoxFile { lower: b.lower.clone(), upper: b.upper.clone() };
        ProblemFile {
            schema_version: SCHEMA_VERSION,
            network: NetworkFile { layers: self.network.layers.clone() },
            noise: self.noise.clone(),
            sets: SetsFile {
                state: bx(&self.state_space),
                safe: bx(&self.safe_set),
                initial: bx(&self.initial_set),
            },
            certify: CertifyFile {
                horizon: self.horizon,
                threshold: self.threshold,
                degree: self.barrier_degree,
                eta_step: self.eta_step,
                partition_widths: self.partition_widths.clone(),
            },
            control: self.control.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("problem spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub schema_version: u32,
    pub network: NetworkFile,
    pub noise: GaussianNoise,
    pub sets: SetsFile,
    pub certify: CertifyFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlStructure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxFile {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsFile {
    pub state: BoxFile,
    pub safe: BoxFile,
    pub initial: BoxFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyFile {
    pub horizon: usize,
    pub threshold: f64,
    pub degree: u32,
    pub eta_step: f64,
    pub partition_widths: Vec<f64>,
}

impl TryFrom<ProblemFile> for ProblemSpec {
    type Error = ModelError;

    fn try_from(f: ProblemFile) -> Result<Self, ModelError> {
        if f.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("unsupported version {}", f.schema_version)));
        }
        let bx = |b: BoxFile| Hyperbox { lower: b.lower, upper: b.upper };
        let spec = ProblemSpec {
            network: NeuralNetwork { layers: f.network.layers },
            noise: f.noise,
            state_space: bx(f.sets.state),
            safe_set: bx(f.sets.safe),
            initial_set: bx(f.sets.initial),
            horizon: f.certify.horizon,
            threshold: f.certify.threshold,
            barrier_degree: f.certify.degree,
            eta_step: f.certify.eta_step,
            partition_widths: f.certify.partition_widths,
            control: f.control,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn parse_problem(text: &str) -> Result<ProblemSpec, ModelError> {
    let file: ProblemFile = serde_json::from_str(text)?;
    file.try_into()
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemSpec, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    parse_problem(&text)
}

pub fn save_problem(spec: &ProblemSpec, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, spec.to_json()).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(n: usize) -> NeuralNetwork {
        let w = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        NeuralNetwork::new(vec![Layer::new(w, vec![0.0; n], Activation::Identity)]).unwrap()
    }

    fn minimal_json(initial: &str) -> String {
        format!(
            r#"{{
  "schema_version": 1,
  "network": {{"layers": [{{"weights": [[1.0]], "bias": [0.0], "activation": "identity"}}]}},
  "noise": {{"variances": [0.01]}},
  "sets": {{
    "state": {{"lower": [-2.0], "upper": [2.0]}},
    "safe": {{"lower": [-1.0], "upper": [1.0]}},
    "initial": {initial}
  }},
  "certify": {{"horizon": 10, "threshold": 0.9, "degree": 4, "eta_step": 0.05, "partition_widths": [0.5]}}
}}"#
        )
    }

    #[test]
    fn loads_minimal_spec() {
        let spec = parse_problem(&minimal_json(r#"{"lower": [-0.1], "upper": [0.1]}"#)).unwrap();
        assert_eq!(spec.dim(), 1);
        assert_eq!(spec.horizon, 10);
        assert!(spec.control.is_none());
    }

    #[test]
    fn rejects_initial_outside_safe() {
        let err = parse_problem(&minimal_json(r#"{"lower": [-2.0], "upper": [2.0]}"#)).unwrap_err();
        match err {
            ModelError::Validation { field, .. } => assert_eq!(field, "sets.initial"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(parse_problem("{ not json"), Err(ModelError::Parse(_))));
    }

    #[test]
    fn round_trip_through_file() {
        let spec = parse_problem(&minimal_json(r#"{"lower": [-0.1], "upper": [0.1]}"#)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_problem(&spec, &path).unwrap();
        assert_eq!(load_problem(&path).unwrap(), spec);
    }

    #[test]
    fn evaluate_examples() {
        let net = identity_net(2);
        assert_eq!(net.evaluate(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
        assert!(net.evaluate(&[0.3]).is_err());

        let relu = NeuralNetwork::new(vec![Layer::new(vec![vec![2.0]], vec![1.0], Activation::Relu)]).unwrap();
        assert_eq!(relu.evaluate(&[-1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn relu_pair_halves_input() {
        let net = NeuralNetwork::new(vec![
            Layer::new(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0], Activation::Relu),
            Layer::new(vec![vec![0.5, -0.5]], vec![0.0], Activation::Identity),
        ])
        .unwrap();
        assert!((net.evaluate(&[0.8]).unwrap()[0] - 0.4).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-10.0..10.0);
            assert!((net.evaluate(&[x]).unwrap()[0] - 0.5 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_checks() {
        let bad = NeuralNetwork::new(vec![
            Layer::new(vec![vec![1.0, 0.0]], vec![0.0], Activation::Relu),
            Layer::new(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity),
        ]);
        assert!(bad.is_err());
        let bad_bias = NeuralNetwork::new(vec![Layer::new(vec![vec![1.0]], vec![0.0, 1.0], Activation::Relu)]);
        assert!(bad_bias.is_err());
    }

    fn spec_1d(variance: f64, control: Option<ControlStructure>) -> ProblemSpec {
        ProblemSpec {
            network: identity_net(1),
            noise: GaussianNoise::new(vec![variance]).unwrap(),
            state_space: Hyperbox::new(vec![-2.0], vec![2.0]).unwrap(),
            safe_set: Hyperbox::new(vec![-1.0], vec![1.0]).unwrap(),
            initial_set: Hyperbox::new(vec![-0.1], vec![0.1]).unwrap(),
            horizon: 5,
            threshold: 0.9,
            barrier_degree: 2,
            eta_step: 0.1,
            partition_widths: vec![0.5],
            control,
        }
    }

    #[test]
    fn noiseless_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = spec_1d(0.0, None);
        assert_eq!(spec.step_sample(&[1.0], None, &mut rng).unwrap(), vec![1.0]);
        let ctrl = ControlStructure { g: vec![vec![1.0]], u_lower: vec![-1.0], u_upper: vec![1.0] };
        let spec = spec_1d(0.0, Some(ctrl));
        assert_eq!(spec.step_sample(&[1.0], Some(&[-0.5]), &mut rng).unwrap(), vec![0.5]);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let spec = spec_1d(0.01, None);
        let a = spec.step_sample(&[0.2], None, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = spec.step_sample(&[0.2], None, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_ne!(a[0], 0.2);
    }

    #[test]
    fn piecewise_linear_on_shared_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = NeuralNetwork::new(vec![
            Layer::new(
                (0..6).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
                (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                Activation::Relu,
            ),
            Layer::new(
                (0..2).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
                vec![0.0, 0.1],
                Activation::Identity,
            ),
        ])
        .unwrap();
        let mut checked = 0;
        for _ in 0..2000 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            if net.activation_pattern(&x) != net.activation_pattern(&y) {
                continue;
            }
            let lam: f64 = rng.gen_range(0.0..1.0);
            let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
            let fx = net.evaluate(&x).unwrap();
            let fy = net.evaluate(&y).unwrap();
            let fm = net.evaluate(&mid).unwrap();
            for i in 0..2 {
                assert!((fm[i] - (lam * fx[i] + (1.0 - lam) * fy[i])).abs() < 1e-12);
            }
            checked += 1;
        }
        assert!(checked > 100);
    }
}
