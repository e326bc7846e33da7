//! Sound per-region bounds of the network: interval bound propagation and a
//! backward linear relaxation in the CROWN style.
//!
//! Unstable relus (`l < 0 < u`) are bounded above by the chord
//! `u/(u−l)·(z−l)` and below by `α·z`, `α = 1` when `u >= |l|` and `0`
//! otherwise. Pre-activation bounds come from interval propagation.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::geometry::{Hyperbox, Partition};
use crate::model::{Activation, NeuralNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEnvelope {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub region: Hyperbox,
}

/// `A_low·x + b_low <= f(x) <= A_up·x + b_up` on `region`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEnvelope {
    pub a_low: Vec<Vec<f64>>,
    pub b_low: Vec<f64>,
    pub a_up: Vec<Vec<f64>>,
    pub b_up: Vec<f64>,
    pub region: Hyperbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    Interval,
    Linear,
}

impl std::fmt::Display for BoundMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundMode::Interval => "interval",
            BoundMode::Linear => "linear",
        })
    }
}

impl std::str::FromStr for BoundMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "interval" => Ok(BoundMode::Interval),
            "linear" => Ok(BoundMode::Linear),
            other => Err(format!("unknown bound mode `{other}` (expected interval|linear)")),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearEnvelope {
    pub fn lower_at(&self, x: &[f64]) -> Vec<f64> {
        self.a_low.iter().zip(&self.b_low).map(|(r, b)| dot(r, x) + b).collect()
    }

    pub fn upper_at(&self, x: &[f64]) -> Vec<f64> {
        self.a_up.iter().zip(&self.b_up).map(|(r, b)| dot(r, x) + b).collect()
    }

    pub fn is_constant(&self) -> bool {
        self.a_low.iter().chain(&self.a_up).flatten().all(|&v| v == 0.0)
    }

    pub fn from_interval(env: &IntervalEnvelope) -> Self {
        let n_in = env.region.dim();
        let n_out = env.lo.len();
        Self {
            a_low: vec![vec![0.0; n_in]; n_out],
            b_low: env.lo.clone(),
            a_up: vec![vec![0.0; n_in]; n_out],
            b_up: env.hi.clone(),
            region: env.region.clone(),
        }
    }

    /// Adds a constant offset (e.g. a control contribution `g·u`) to both
    /// bounds.
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, s) in shift.iter().enumerate() {
            out.b_low[i] += s;
            out.b_up[i] += s;
        }
        out
    }
}

impl IntervalEnvelope {
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, s) in shift.iter().enumerate() {
            out.lo[i] += s;
            out.hi[i] += s;
        }
        out
    }
}

fn min_over_box(row: &[f64], b: f64, region: &Hyperbox) -> f64 {
    row.iter()
        .enumerate()
        .map(|(j, &a)| if a >= 0.0 { a * region.lower[j] } else { a * region.upper[j] })
        .sum::<f64>()
        + b
}

fn max_over_box(row: &[f64], b: f64, region: &Hyperbox) -> f64 {
    row.iter()
        .enumerate()
        .map(|(j, &a)| if a >= 0.0 { a * region.upper[j] } else { a * region.lower[j] })
        .sum::<f64>()
        + b
}

/// Interval bounds of each layer's pre-activation (the final entry is the
/// output layer's pre-activation).
fn preactivation_bounds(net: &NeuralNetwork, region: &Hyperbox) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut lo = region.lower.clone();
    let mut hi = region.upper.clone();
    let mut out = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let mut zl = Vec::with_capacity(layer.rows());
        let mut zh = Vec::with_capacity(layer.rows());
        for (row, &b) in layer.weights.iter().zip(&layer.bias) {
            let (mut l, mut h) = (b, b);
            for (j, &w) in row.iter().enumerate() {
                if w >= 0.0 {
                    l += w * lo[j];
                    h += w * hi[j];
                } else {
                    l += w * hi[j];
                    h += w * lo[j];
                }
            }
            zl.push(l);
            zh.push(h);
        }
        lo = zl.iter().map(|&z| layer.activation.apply(z)).collect();
        hi = zh.iter().map(|&z| layer.activation.apply(z)).collect();
        out.push((zl, zh));
    }
    out
}

pub fn ibp(net: &NeuralNetwork, region: &Hyperbox) -> IntervalEnvelope {
    let pre = preactivation_bounds(net, region);
    let last = net.layers.last().expect("network has layers");
    let (zl, zh) = pre.last().expect("network has layers");
    IntervalEnvelope {
        lo: zl.iter().map(|&z| last.activation.apply(z)).collect(),
        hi: zh.iter().map(|&z| last.activation.apply(z)).collect(),
        region: region.clone(),
    }
}

/// Linear relaxation of one relu neuron: `(lower slope, lower offset, upper slope, upper offset)`.
fn relu_relaxation(l: f64, u: f64) -> (f64, f64, f64, f64) {
    if l >= 0.0 {
        (1.0, 0.0, 1.0, 0.0)
    } else if u <= 0.0 {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        let s = u / (u - l);
        let alpha = if u >= -l { 1.0 } else { 0.0 };
        (alpha, 0.0, s, -s * l)
    }
}

/// Backward pass for one side; `upper = true` bounds `f` from above.
fn backward(net: &NeuralNetwork, pre: &[(Vec<f64>, Vec<f64>)], upper: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_out = net.dim_out();
    // coef[i] is the linear functional on the current layer's output for output i.
    let mut coef: Vec<Vec<f64>> = (0..n_out).map(|i| (0..n_out).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut offset = vec![0.0; n_out];
    for (k, layer) in net.layers.iter().enumerate().rev() {
        if layer.activation == Activation::Relu {
            let (zl, zh) = &pre[k];
            for (row, off) in coef.iter_mut().zip(offset.iter_mut()) {
                for j in 0..row.len() {
                    let c = row[j];
                    if c == 0.0 {
                        continue;
                    }
                    let (ls, lb, us, ub) = relu_relaxation(zl[j], zh[j]);
                    // Positive coefficients on an upper bound take the upper relaxation.
                    let (s, b) = if (c > 0.0) == upper { (us, ub) } else { (ls, lb) };
                    row[j] = c * s;
                    *off += c * b;
                }
            }
        }
        let cols = layer.cols();
        for (row, off) in coef.iter_mut().zip(offset.iter_mut()) {
            let mut next = vec![0.0; cols];
            for (j, &c) in row.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                *off += c * layer.bias[j];
                for (nv, w) in next.iter_mut().zip(&layer.weights[j]) {
                    *nv += c * w;
                }
            }
            *row = next;
        }
    }
    (coef, offset)
}

pub fn crown(net: &NeuralNetwork, region: &Hyperbox) -> LinearEnvelope {
    let pre = preactivation_bounds(net, region);
    let (a_up, b_up) = backward(net, &pre, true);
    let (a_low, b_low) = backward(net, &pre, false);
    LinearEnvelope { a_low, b_low, a_up, b_up, region: region.clone() }
}

pub fn envelope_extremes(env: &LinearEnvelope) -> IntervalEnvelope {
    IntervalEnvelope {
        lo: env.a_low.iter().zip(&env.b_low).map(|(r, &b)| min_over_box(r, b, &env.region)).collect(),
        hi: env.a_up.iter().zip(&env.b_up).map(|(r, &b)| max_over_box(r, b, &env.region)).collect(),
        region: env.region.clone(),
    }
}

/// Per-region envelope in the requested mode. In linear mode every output
/// row keeps whichever of the linear bound and the interval bound has the
/// tighter extreme over the region.
pub fn bound_region(net: &NeuralNetwork, region: &Hyperbox, mode: BoundMode) -> LinearEnvelope {
    let iv = ibp(net, region);
    match mode {
        BoundMode::Interval => LinearEnvelope::from_interval(&iv),
        BoundMode::Linear => {
            let mut env = crown(net, region);
            let n_in = region.dim();
            for i in 0..env.b_up.len() {
                if max_over_box(&env.a_up[i], env.b_up[i], region) > iv.hi[i] {
                    env.a_up[i] = vec![0.0; n_in];
                    env.b_up[i] = iv.hi[i];
                }
                if min_over_box(&env.a_low[i], env.b_low[i], region) < iv.lo[i] {
                    env.a_low[i] = vec![0.0; n_in];
                    env.b_low[i] = iv.lo[i];
                }
            }
            env
        }
    }
}

/// Bound width below which a row is treated as an exact affine map.
pub const EXACT_WIDTH: f64 = 1e-12;

/// Bounds attached to one partition region: the envelope of the selected
/// mode plus the interval bounds, which linear mode keeps as an extra sandwich.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBounds {
    pub mode: BoundMode,
    pub envelope: LinearEnvelope,
    pub interval: IntervalEnvelope,
}

impl RegionBounds {
    pub fn new(net: &NeuralNetwork, region: &Hyperbox, mode: BoundMode) -> Self {
        RegionBounds { mode, envelope: bound_region(net, region, mode), interval: ibp(net, region) }
    }

    pub fn region(&self) -> &Hyperbox {
        &self.envelope.region
    }

    pub fn shifted(&self, shift: &[f64]) -> Self {
        RegionBounds {
            mode: self.mode,
            envelope: self.envelope.shifted(shift),
            interval: self.interval.shifted(shift),
        }
    }

    /// Output rows whose linear bounds differ from the interval bounds.
    pub fn linear_rows(&self) -> Vec<usize> {
        if self.mode == BoundMode::Interval {
            return Vec::new();
        }
        let e = &self.envelope;
        (0..e.b_low.len())
            .filter(|&i| {
                let flat = e.a_low[i].iter().chain(&e.a_up[i]).all(|&v| v == 0.0);
                !(flat && e.b_low[i] == self.interval.lo[i] && e.b_up[i] == self.interval.hi[i])
            })
            .collect()
    }

    /// Rows whose successor is pinned to an affine function of `x`: the
    /// lower and upper bounds coincide (width at most [`EXACT_WIDTH`] over
    /// the region). Returns `(row, a, b)` with `y_row = a·x + b`.
    pub fn exact_rows(&self) -> Vec<(usize, Vec<f64>, f64)> {
        let n = self.interval.lo.len();
        let w = self.region().widths();
        let mut out = Vec::new();
        for i in 0..n {
            if self.interval.hi[i] - self.interval.lo[i] <= EXACT_WIDTH {
                out.push((i, vec![0.0; w.len()], 0.5 * (self.interval.lo[i] + self.interval.hi[i])));
                continue;
            }
            if self.mode == BoundMode::Interval {
                continue;
            }
            let e = &self.envelope;
            let spread: f64 = e.a_up[i].iter().zip(&e.a_low[i]).zip(&w).map(|((u, l), wj)| (u - l).abs() * wj).sum::<f64>()
                + (e.b_up[i] - e.b_low[i]).abs();
            if spread <= EXACT_WIDTH {
                let a = e.a_up[i].iter().zip(&e.a_low[i]).map(|(u, l)| 0.5 * (u + l)).collect();
                out.push((i, a, 0.5 * (e.b_up[i] + e.b_low[i])));
            }
        }
        out
    }

    /// Whether `y` lies inside every sandwich at `x`.
    pub fn admits(&self, x: &[f64], y: &[f64], tol: f64) -> bool {
        let inside = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).zip(y).all(|((l, h), v)| *v >= l - tol && *v <= h + tol);
        let iv = inside(&self.interval.lo, &self.interval.hi);
        iv && (self.mode == BoundMode::Interval || inside(&self.envelope.lower_at(x), &self.envelope.upper_at(x)))
    }
}

/// Bounds for every region, computed in parallel.
pub fn bound_partition(net: &NeuralNetwork, partition: &Partition, mode: BoundMode) -> Vec<RegionBounds> {
    partition.regions.par_iter().map(|q| RegionBounds::new(net, q, mode)).collect()
}

/// CSV rows `region_id, mode, A_low (row-major), b_low, A_up, b_up`.
pub fn envelopes_to_csv(envelopes: &[LinearEnvelope], mode: BoundMode) -> String {
    let mut out = String::new();
    if let Some(first) = envelopes.first() {
        let n_out = first.b_low.len();
        let n_in = first.region.dim();
        out.push_str("region_id,mode");
        for tag in ["a_low", "b_low", "a_up", "b_up"] {
            if tag.starts_with('a') {
                for i in 1..=n_out {
                    for j in 1..=n_in {
                        out.push_str(&format!(",{tag}_{i}_{j}"));
                    }
                }
            } else {
                for i in 1..=n_out {
                    out.push_str(&format!(",{tag}_{i}"));
                }
            }
        }
        out.push('\n');
    }
    for (id, env) in envelopes.iter().enumerate() {
        out.push_str(&format!("{id},{mode}"));
        let values = env
            .a_low
            .iter()
            .flatten()
            .chain(&env.b_low)
            .chain(env.a_up.iter().flatten())
            .chain(&env.b_up);
        for v in values {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(l: &[f64], u: &[f64]) -> Hyperbox {
        Hyperbox::new(l.to_vec(), u.to_vec()).unwrap()
    }

    fn identity(n: usize) -> NeuralNetwork {
        let w = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        NeuralNetwork::new(vec![Layer::new(w, vec![0.0; n], Activation::Identity)]).unwrap()
    }

    pub(crate) fn random_net(rng: &mut ChaCha8Rng, n: usize, depth: usize, width: usize) -> NeuralNetwork {
        let mut layers = Vec::new();
        let mut fan_in = n;
        for _ in 0..depth {
            let scale = 1.0 / (fan_in as f64).sqrt();
            layers.push(Layer::new(
                (0..width).map(|_| (0..fan_in).map(|_| rng.gen_range(-1.0..1.0) * scale * 2.0).collect()).collect(),
                (0..width).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                Activation::Relu,
            ));
            fan_in = width;
        }
        let scale = 1.0 / (fan_in as f64).sqrt();
        layers.push(Layer::new(
            (0..n).map(|_| (0..fan_in).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).collect(),
            (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            Activation::Identity,
        ));
        NeuralNetwork::new(layers).unwrap()
    }

    #[test]
    fn ibp_examples() {
        let env = ibp(&identity(3), &bx(&[0.0; 3], &[1.0; 3]));
        assert_eq!(env.lo, vec![0.0; 3]);
        assert_eq!(env.hi, vec![1.0; 3]);

        let affine = NeuralNetwork::new(vec![Layer::new(vec![vec![2.0]], vec![1.0], Activation::Identity)]).unwrap();
        let env = ibp(&affine, &bx(&[0.0], &[1.0]));
        assert_eq!((env.lo[0], env.hi[0]), (1.0, 3.0));

        let relu = NeuralNetwork::new(vec![Layer::new(vec![vec![1.0]], vec![0.0], Activation::Relu)]).unwrap();
        let env = ibp(&relu, &bx(&[-1.0], &[1.0]));
        assert_eq!((env.lo[0], env.hi[0]), (0.0, 1.0));
    }

    #[test]
    fn crown_identity_is_exact() {
        let env = crown(&identity(2), &bx(&[-0.3, 0.2], &[0.5, 0.9]));
        assert_eq!(env.a_low, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(env.a_up, env.a_low);
        assert_eq!(env.b_low, vec![0.0, 0.0]);
        assert_eq!(env.b_up, vec![0.0, 0.0]);
    }

    #[test]
    fn single_unstable_relu() {
        let relu = NeuralNetwork::new(vec![Layer::new(vec![vec![1.0]], vec![0.0], Activation::Relu)]).unwrap();
        let region = bx(&[-1.0], &[1.0]);
        let env = crown(&relu, &region);
        assert_eq!(env.a_up[0][0], 0.5);
        assert_eq!(env.b_up[0], 0.5);
        // u >= |l| picks the identity lower line.
        assert_eq!(env.a_low[0][0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let x = [rng.gen_range(-1.0..=1.0)];
            let f = relu.evaluate(&x).unwrap()[0];
            assert!(env.lower_at(&x)[0] <= f + 1e-12 && f <= env.upper_at(&x)[0] + 1e-12);
        }
    }

    #[test]
    fn stable_relu_passes_through() {
        let net = NeuralNetwork::new(vec![
            Layer::new(vec![vec![1.0]], vec![0.0], Activation::Relu),
            Layer::new(vec![vec![3.0]], vec![-1.0], Activation::Identity),
        ])
        .unwrap();
        let env = crown(&net, &bx(&[0.2], &[0.9]));
        assert_eq!(env.a_low, vec![vec![3.0]]);
        assert_eq!(env.a_up, vec![vec![3.0]]);
        assert_eq!(env.b_low, vec![-1.0]);
        assert_eq!(env.b_up, vec![-1.0]);
    }

    #[test]
    fn extremes_examples() {
        let env = LinearEnvelope {
            a_low: vec![vec![1.0]],
            b_low: vec![0.0],
            a_up: vec![vec![1.0]],
            b_up: vec![0.0],
            region: bx(&[-1.0], &[1.0]),
        };
        assert_eq!(envelope_extremes(&env).hi, vec![1.0]);
        let env = LinearEnvelope {
            a_low: vec![vec![0.0, 0.0]],
            b_low: vec![0.0],
            a_up: vec![vec![1.0, -2.0]],
            b_up: vec![0.5],
            region: bx(&[0.0, 0.0], &[1.0, 1.0]),
        };
        assert_eq!(envelope_extremes(&env).hi, vec![1.5]);
        let region = bx(&[-0.2, 0.1], &[0.3, 0.4]);
        let ex = envelope_extremes(&crown(&identity(2), &region));
        assert_eq!(ex.lo, region.lower);
        assert_eq!(ex.hi, region.upper);
    }

    #[test]
    fn bound_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_net(&mut rng, 2, 2, 8);
        let region = bx(&[-0.5, -0.5], &[0.0, 0.25]);
        let env = bound_region(&net, &region, BoundMode::Interval);
        assert!(env.is_constant());
        let id = bound_region(&identity(2), &region, BoundMode::Linear);
        assert_eq!(id, crown(&identity(2), &region));
    }

    #[test]
    fn linear_extremes_within_ibp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let net = random_net(&mut rng, 1, 1, 8);
            let c: f64 = rng.gen_range(-1.0..1.0);
            let w: f64 = rng.gen_range(0.01..1.0);
            let region = bx(&[c - w], &[c + w]);
            let lin = envelope_extremes(&bound_region(&net, &region, BoundMode::Linear));
            let iv = ibp(&net, &region);
            assert!(lin.lo[0] >= iv.lo[0] - 1e-12 && lin.hi[0] <= iv.hi[0] + 1e-12);
        }
    }

    #[test]
    fn ibp_monotone_under_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let net = random_net(&mut rng, 2, 2, 16);
            let region = bx(&[-0.6, -0.2], &[0.4, 0.7]);
            let parent = ibp(&net, &region);
            for axis in 0..2 {
                let (a, b) = region.bisect(axis);
                for child in [ibp(&net, &a), ibp(&net, &b)] {
                    for i in 0..2 {
                        assert!(child.lo[i] >= parent.lo[i] - 1e-9);
                        assert!(child.hi[i] <= parent.hi[i] + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn csv_shape() {
        let region = bx(&[0.0], &[1.0]);
        let csv = envelopes_to_csv(&[crown(&identity(1), &region)], BoundMode::Linear);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "region_id,mode,a_low_1_1,b_low_1,a_up_1_1,b_up_1");
        assert_eq!(lines[1], "0,linear,1.0,0.0,1.0,0.0");
    }
}
