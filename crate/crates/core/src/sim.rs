//! Monte-Carlo trajectory simulation and empirical safety estimation.
//!
//! Trajectory `j` draws its noise from `ChaCha8Rng::seed_from_u64(seed)` on
//! stream `j`, with Gaussian samples from `rand_distr::StandardNormal`, so
//! estimates are bit-for-bit reproducible regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlPolicy;
use crate::geometry::Partition;
use crate::model::{ModelError, ProblemSpec};

/// Two-sided 99% standard normal quantile.
pub const Z_99: f64 = 2.5758293035489004;

/// A per-region policy together with the partition its ids refer to.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub policy: &'a ControlPolicy,
    pub partition: &'a Partition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    /// Control applied at each state (zeros where none applies).
    pub controls: Vec<Vec<f64>>,
    pub safe: bool,
}

impl Trajectory {
    /// CSV `k, x_1..x_n, u_1..u_c, safe_flag`; `safe_flag` marks states in
    /// the safe set.
    pub fn to_csv(&self, spec: &ProblemSpec) -> String {
        let n = spec.dim();
        let c = self.controls.first().map_or(0, Vec::len);
        let mut out = String::from("k");
        (1..=n).for_each(|i| out.push_str(&format!(",x_{i}")));
        (1..=c).for_each(|j| out.push_str(&format!(",u_{j}")));
        out.push_str(",safe_flag\n");
        for (k, (x, u)) in self.states.iter().zip(&self.controls).enumerate() {
            out.push_str(&k.to_string());
            for v in x.iter().chain(u) {
                out.push_str(&format!(",{v:?}"));
            }
            let safe = spec.safe_set.contains(x).unwrap_or(false);
            out.push_str(if safe { ",1\n" } else { ",0\n" });
        }
        out
    }
}

fn control_dim(spec: &ProblemSpec) -> usize {
    spec.control.as_ref().map_or(0, |c| c.dim())
}

/// Runs `N` steps from `x0`; the trajectory is safe iff all `N + 1` states
/// lie in the safe set.
pub fn simulate(
    spec: &ProblemSpec,
    policy: Option<ClosedLoop<'_>>,
    x0: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, ModelError> {
    let zero = vec![0.0; control_dim(spec)];
    let lookup = |x: &[f64]| -> Option<Vec<f64>> {
        policy.and_then(|p| p.policy.control_at(p.partition, x)).map(<[f64]>::to_vec)
    };
    let mut states = Vec::with_capacity(spec.horizon + 1);
    let mut controls = Vec::with_capacity(spec.horizon + 1);
    let mut safe = spec.safe_set.contains(x0).unwrap_or(false);
    let mut x = x0.to_vec();
    for _ in 0..spec.horizon {
        let u = lookup(&x);
        let next = spec.step_sample(&x, u.as_deref(), rng)?;
        states.push(std::mem::replace(&mut x, next));
        controls.push(u.unwrap_or_else(|| zero.clone()));
        safe &= spec.safe_set.contains(&x).unwrap_or(false);
    }
    controls.push(lookup(&x).unwrap_or(zero));
    states.push(x);
    Ok(Trajectory { states, controls, safe })
}

/// Wilson score interval half-width at confidence `z`.
pub fn wilson_half_width(successes: usize, n: usize, z: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    z / (1.0 + z2 / nf) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyEstimate {
    pub p_hat: f64,
    pub samples: usize,
    /// Wilson 99% half-width over all samples.
    pub ci_half_width: f64,
    /// Lowest safe rate over the initial grid points.
    pub per_init_min: f64,
    /// Wilson 99% half-width at the worst grid point.
    pub per_init_ci: f64,
    pub init_points: usize,
    pub seed: u64,
}

impl SafetyEstimate {
    pub fn lower(&self) -> f64 {
        (self.p_hat - self.ci_half_width).clamp(0.0, 1.0)
    }

    pub fn upper(&self) -> f64 {
        (self.p_hat + self.ci_half_width).clamp(0.0, 1.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("at least 100 samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("initial grid needs at least one point per axis")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `per_axis` evenly spaced points on each axis of the initial set,
/// including its corners (the center when `per_axis == 1`).
pub fn initial_grid(spec: &ProblemSpec, per_axis: usize) -> Vec<Vec<f64>> {
    let b = &spec.initial_set;
    let axes: Vec<Vec<f64>> = (0..b.dim())
        .map(|i| {
            if per_axis == 1 {
                vec![0.5 * (b.lower[i] + b.upper[i])]
            } else {
                (0..per_axis)
                    .map(|k| b.lower[i] + (b.upper[i] - b.lower[i]) * k as f64 / (per_axis - 1) as f64)
                    .collect()
            }
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    points
}

/// Estimates the probability of staying safe for `N` steps. `samples` are
/// split evenly over the `init_grid^n` initial points (at least one each).
pub fn estimate_safety(
    spec: &ProblemSpec,
    policy: Option<ClosedLoop<'_>>,
    samples: usize,
    init_grid: usize,
    seed: u64,
) -> Result<SafetyEstimate, SimError> {
    if samples < 100 {
        return Err(SimError::TooFewSamples(samples));
    }
    if init_grid == 0 {
        return Err(SimError::EmptyGrid);
    }
    let points = initial_grid(spec, init_grid);
    let per_point = (samples / points.len()).max(1);
    let counts: Vec<usize> = points
        .iter()
        .enumerate()
        .map(|(p, x0)| {
            (0..per_point)
                .into_par_iter()
                .map(|j| -> Result<usize, ModelError> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((p * per_point + j) as u64);
                    Ok(simulate(spec, policy, x0, &mut rng)?.safe as usize)
                })
                .try_reduce(|| 0, |a, b| Ok(a + b))
        })
        .collect::<Result<_, _>>()?;
    let total = per_point * points.len();
    let safe: usize = counts.iter().sum();
    let worst = *counts.iter().min().expect("nonempty grid");
    Ok(SafetyEstimate {
        p_hat: safe as f64 / total as f64,
        samples: total,
        ci_half_width: wilson_half_width(safe, total, Z_99),
        per_init_min: worst as f64 / per_point as f64,
        per_init_ci: wilson_half_width(worst, per_point, Z_99),
        init_points: points.len(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessVerdict {
    pub pass: bool,
    /// `per_init_min + 3·ci − P_s`.
    pub margin: f64,
}

/// Passes iff the certified bound does not exceed the empirical worst case
/// plus three half-widths.
pub fn check_certificate_soundness(p_s: f64, estimate: &SafetyEstimate) -> SoundnessVerdict {
    let margin = estimate.per_init_min + 3.0 * estimate.ci_half_width - p_s;
    SoundnessVerdict { pass: margin >= 0.0, margin }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{partition_uniform, Hyperbox};
    use crate::model::{Activation, ControlStructure, GaussianNoise, Layer, NeuralNetwork};

    fn drift_spec(variance: f64, horizon: usize) -> ProblemSpec {
        let net = NeuralNetwork::new(vec![
            Layer::new(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0], Activation::Relu),
            Layer::new(vec![vec![1.0, -1.0]], vec![0.2], Activation::Identity),
        ])
        .unwrap();
        ProblemSpec {
            network: net,
            noise: GaussianNoise::new(vec![variance]).unwrap(),
            state_space: Hyperbox::new(vec![-2.0], vec![2.0]).unwrap(),
            safe_set: Hyperbox::new(vec![-1.0], vec![1.0]).unwrap(),
            initial_set: Hyperbox::new(vec![-0.1], vec![0.1]).unwrap(),
            horizon,
            threshold: 0.95,
            barrier_degree: 2,
            eta_step: 0.05,
            partition_widths: vec![0.5],
            control: Some(ControlStructure { g: vec![vec![1.0]], u_lower: vec![-1.0], u_upper: vec![1.0] }),
        }
    }

    fn zero_map(variance: f64, horizon: usize) -> ProblemSpec {
        let mut spec = drift_spec(variance, horizon);
        spec.network = NeuralNetwork::new(vec![Layer::new(vec![vec![0.0]], vec![0.0], Activation::Identity)]).unwrap();
        spec.initial_set = Hyperbox::new(vec![0.0], vec![0.0]).unwrap();
        spec.control = None;
        spec
    }

    #[test]
    fn deterministic_trajectories() {
        let spec = zero_map(0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = simulate(&spec, None, &[0.3], &mut rng).unwrap();
        assert!(t.safe);
        assert_eq!(t.states[0], vec![0.3]);
        assert!(t.states[1..].iter().all(|x| x == &vec![0.0]));

        let spec = drift_spec(0.0, 2);
        let t = simulate(&spec, None, &[0.9], &mut rng).unwrap();
        assert!(!t.safe);
        assert!((t.states[1][0] - 1.1).abs() < 1e-12);
        assert!(!spec.safe_set.contains(&t.states[1]).unwrap());

        let spec = drift_spec(0.01, 10);
        let run = |s| simulate(&spec, None, &[0.0], &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn policy_is_applied_inside_partition() {
        let spec = drift_spec(0.0, 3);
        let part = partition_uniform(&spec.safe_set, &[0.5]).unwrap();
        let mut policy = ControlPolicy::default();
        for q in 0..part.len() {
            policy.entries.insert(q, vec![-0.2]);
        }
        let cl = ClosedLoop { policy: &policy, partition: &part };
        let t = simulate(&spec, Some(cl), &[0.9], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(t.safe);
        assert!(t.states.iter().all(|x| (x[0] - 0.9).abs() < 1e-12));
        assert_eq!(t.controls[0], vec![-0.2]);
        let csv = t.to_csv(&spec);
        assert_eq!(csv.lines().next().unwrap(), "k,x_1,u_1,safe_flag");
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn gaussian_exit_probability() {
        // P(|v| <= 1) for v ~ N(0, 0.25) is 2Φ(2) − 1.
        let spec = zero_map(0.25, 1);
        let est = estimate_safety(&spec, None, 10_000, 1, 3).unwrap();
        let exact = 0.9544997361036416;
        let se = (exact * (1.0 - exact) / est.samples as f64).sqrt();
        assert!((est.p_hat - exact).abs() <= 3.0 * se, "{est:?}");
        assert_eq!(est, estimate_safety(&spec, None, 10_000, 1, 3).unwrap());
    }

    #[test]
    fn noiseless_is_certain() {
        let spec = zero_map(0.0, 4);
        let small = estimate_safety(&spec, None, 100, 3, 0).unwrap();
        let large = estimate_safety(&spec, None, 10_000, 3, 0).unwrap();
        assert_eq!(small.p_hat, 1.0);
        assert_eq!(large.per_init_min, 1.0);
        assert!(large.ci_half_width < small.ci_half_width);
        assert!(matches!(estimate_safety(&spec, None, 99, 3, 0), Err(SimError::TooFewSamples(99))));
    }

    #[test]
    fn grid_includes_corners() {
        let mut spec = drift_spec(0.0, 1);
        spec.initial_set = Hyperbox::new(vec![-0.1], vec![0.1]).unwrap();
        let g = initial_grid(&spec, 3);
        assert_eq!(g, vec![vec![-0.1], vec![0.0], vec![0.1]]);
    }

    #[test]
    fn wilson_matches_closed_form() {
        // p = 0.5, n = 100, z = 1: 1/(1.01) * sqrt(0.0025 + 0.000025)
        let w = wilson_half_width(50, 100, 1.0);
        assert!((w - (0.002525f64).sqrt() / 1.01).abs() < 1e-15);
    }

    #[test]
    fn soundness_verdicts() {
        let est = |m: f64, ci: f64| SafetyEstimate {
            p_hat: m,
            samples: 100,
            ci_half_width: ci,
            per_init_min: m,
            per_init_ci: ci,
            init_points: 1,
            seed: 0,
        };
        let v = check_certificate_soundness(0.8, &est(0.99, 0.01));
        assert!(v.pass && (v.margin - 0.22).abs() < 1e-12);
        assert!(!check_certificate_soundness(0.99, &est(0.90, 0.01)).pass);
    }
}
