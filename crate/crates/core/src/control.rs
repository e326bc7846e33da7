//! Minimally-invasive per-region controllers.
//!
//! Regions whose martingale compensation `β_q` is too large for the safety
//! threshold get a constant control `u_q`, chosen by a linear program that
//! steers the relaxed successor set towards the barrier minimizer.

use std::collections::BTreeMap;
use std::time::Instant;

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{
    beta_threshold, eval_beta_all, eval_beta_region, populate_region_betas, safety_probability, synthesize,
    BarrierCertificate, BarrierError, SynthesisOptions,
};
use crate::geometry::{Hyperbox, Partition};
use crate::model::{ControlStructure, ProblemSpec};
use crate::poly::Polynomial;
use crate::relax::{LinearEnvelope, RegionBounds};
use crate::sos::ConicBackend;

/// `β_q` values within this margin of the threshold count as meeting it.
pub const FLAG_TOLERANCE: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("control structure required: the problem has no `control` section")]
    MissingControl,
    #[error("control LP failed: {0}")]
    Lp(String),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
}

/// Constant control per region; regions without an entry apply zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlPolicy {
    pub entries: BTreeMap<usize, Vec<f64>>,
}

impl ControlPolicy {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, region: usize) -> Option<&[f64]> {
        self.entries.get(&region).map(Vec::as_slice)
    }

    /// Control applied at `x`: the entry of the region containing `x`, or
    /// `None` outside the partition and in uncontrolled regions.
    pub fn control_at(&self, partition: &Partition, x: &[f64]) -> Option<&[f64]> {
        partition.locate(x).and_then(|q| self.get(q))
    }

    /// Per-region shifts `g·u_q` (`None` where no control is installed).
    pub fn shifts(&self, regions: usize, control: &ControlStructure) -> Vec<Option<Vec<f64>>> {
        (0..regions).map(|q| self.get(q).map(|u| control.apply(u))).collect()
    }

    /// CSV `region_id, u_1..u_c` covering every region (zeros where no
    /// control is installed).
    pub fn to_csv(&self, regions: usize, control_dim: usize) -> String {
        let mut out = String::from("region_id");
        for j in 1..=control_dim {
            out.push_str(&format!(",u_{j}"));
        }
        out.push('\n');
        let zero = vec![0.0; control_dim];
        for q in 0..regions {
            out.push_str(&q.to_string());
            for v in self.get(q).unwrap_or(&zero) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let q: usize = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| format!("line {}: bad region id", lineno + 1))?;
            let u: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 1)))
                .collect::<Result<_, _>>()?;
            if u.iter().any(|v| *v != 0.0) {
                entries.insert(q, u);
            }
        }
        Ok(ControlPolicy { entries })
    }
}

pub fn controlled_fraction(policy: &ControlPolicy, partition: &Partition) -> f64 {
    if partition.is_empty() {
        return 0.0;
    }
    policy.len() as f64 / partition.len() as f64
}

/// Bounds with each controlled region shifted by its `g·u_q`.
pub fn apply_policy(bounds: &[RegionBounds], policy: &ControlPolicy, control: &ControlStructure) -> Vec<RegionBounds> {
    bounds
        .iter()
        .enumerate()
        .map(|(q, rb)| match policy.get(q) {
            Some(u) => rb.shifted(&control.apply(u)),
            None => rb.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierMin {
    pub x_star: Vec<f64>,
    pub value: f64,
    pub restarts_agreeing: usize,
    pub restarts: usize,
}

fn project(x: &mut [f64], domain: &Hyperbox) {
    for (i, v) in x.iter_mut().enumerate() {
        *v = v.clamp(domain.lower[i], domain.upper[i]);
    }
}

fn descend(b: &Polynomial, grad: &[Polynomial], domain: &Hyperbox, mut x: Vec<f64>) -> (Vec<f64>, f64) {
    let eval = |x: &[f64]| b.eval(x).expect("arity checked");
    let mut fx = eval(&x);
    let mut step = 1.0;
    for _ in 0..5000 {
        let g: Vec<f64> = grad.iter().map(|p| p.eval(&x).expect("arity checked")).collect();
        let mut accepted = false;
        while step > 1e-16 {
            let mut cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            project(&mut cand, domain);
            let d2: f64 = cand.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 == 0.0 {
                break;
            }
            let fc = eval(&cand);
            if fc <= fx - 1e-4 / step * d2 {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step = (step * 2.0).min(1e3);
    }
    (x, fx)
}

/// Multi-start projected gradient descent for `min_{x ∈ domain} B(x)`.
/// Starts: the center, up to 8 corners, then Latin-hypercube samples.
pub fn find_barrier_min(b: &Polynomial, domain: &Hyperbox, restarts: usize, seed: u64) -> BarrierMin {
    let n = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![domain.center()];
    let mut corners = domain.vertices();
    if corners.len() > 8 {
        corners.shuffle(&mut rng);
        corners.truncate(8);
    }
    starts.extend(corners);
    starts.truncate(restarts.max(1));
    let lhs = restarts.saturating_sub(starts.len());
    if lhs > 0 {
        let mut perms: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut p: Vec<usize> = (0..lhs).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        for k in 0..lhs {
            let x = (0..n)
                .map(|i| {
                    let cell = perms[i][k] as f64 + rng.gen::<f64>();
                    domain.lower[i] + (domain.upper[i] - domain.lower[i]) * cell / lhs as f64
                })
                .collect();
            starts.push(x);
        }
        perms.clear();
    }
    let grad = b.gradient();
    let results: Vec<(Vec<f64>, f64)> = starts.into_iter().map(|s| descend(b, &grad, domain, s)).collect();
    let (x_star, value) = results
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("at least one start");
    let restarts_agreeing = results.iter().filter(|r| r.1 <= value + 1e-6).count();
    if restarts_agreeing * 2 < results.len() {
        log::warn!(
            "barrier minimizer: only {restarts_agreeing}/{} restarts agree; landscape may be nonconvex",
            results.len()
        );
    }
    BarrierMin { x_star, value, restarts_agreeing, restarts: results.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LpMode {
    /// Some `z ∈ q` and some `y` inside the envelope at `z` approach `x*`.
    #[default]
    Existential,
    /// Worst case over the vertices of `q` and over the envelope.
    VertexRobust,
}

impl std::str::FromStr for LpMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "existential" => Ok(LpMode::Existential),
            "vertex-robust" => Ok(LpMode::VertexRobust),
            other => Err(format!("unknown LP mode `{other}` (expected existential|vertex-robust)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpControl {
    pub u: Vec<f64>,
    pub objective: f64,
}

const INF: f64 = f64::INFINITY;

/// Builds the LP and returns `(problem, u variables, objective terms)`.
fn build_lp(
    x_star: &[f64],
    q: &Hyperbox,
    env: &LinearEnvelope,
    control: &ControlStructure,
    mode: LpMode,
) -> (Problem, Vec<microlp::Variable>, Vec<microlp::Variable>) {
    let n = x_star.len();
    let c = control.dim();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let u: Vec<_> = (0..c).map(|j| lp.add_var(0.0, (control.u_lower[j], control.u_upper[j]))).collect();
    let gu = |i: usize| -> Vec<(microlp::Variable, f64)> { (0..c).map(|j| (u[j], control.g[i][j])).collect() };
    let mut objective = Vec::new();
    match mode {
        LpMode::Existential => {
            let theta: Vec<_> = (0..n).map(|_| lp.add_var(1.0, (0.0, INF))).collect();
            let y: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (-INF, INF))).collect();
            let zp: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (0.0, INF))).collect();
            let zm: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (0.0, INF))).collect();
            for i in 0..n {
                lp.add_constraint([(y[i], 1.0), (theta[i], -1.0)], ComparisonOp::Le, x_star[i]);
                lp.add_constraint([(y[i], -1.0), (theta[i], -1.0)], ComparisonOp::Le, -x_star[i]);
                lp.add_constraint([(zp[i], 1.0), (zm[i], -1.0)], ComparisonOp::Ge, q.lower[i]);
                lp.add_constraint([(zp[i], 1.0), (zm[i], -1.0)], ComparisonOp::Le, q.upper[i]);
                // y − A_low z − g u >= b_low
                let mut lo = vec![(y[i], 1.0)];
                let mut hi = vec![(y[i], 1.0)];
                for j in 0..n {
                    lo.push((zp[j], -env.a_low[i][j]));
                    lo.push((zm[j], env.a_low[i][j]));
                    hi.push((zp[j], -env.a_up[i][j]));
                    hi.push((zm[j], env.a_up[i][j]));
                }
                for (v, g) in gu(i) {
                    lo.push((v, -g));
                    hi.push((v, -g));
                }
                lp.add_constraint(lo, ComparisonOp::Ge, env.b_low[i]);
                lp.add_constraint(hi, ComparisonOp::Le, env.b_up[i]);
            }
            objective.extend(theta);
        }
        LpMode::VertexRobust => {
            let t = lp.add_var(1.0, (0.0, INF));
            for v in q.vertices() {
                let theta: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (0.0, INF))).collect();
                let up = env.upper_at(&v);
                let lo = env.lower_at(&v);
                for i in 0..n {
                    // θ_i >= up_i + (g u)_i − x*_i and θ_i >= x*_i − lo_i − (g u)_i
                    let mut a = vec![(theta[i], 1.0)];
                    let mut b = vec![(theta[i], 1.0)];
                    for (var, g) in gu(i) {
                        a.push((var, -g));
                        b.push((var, g));
                    }
                    lp.add_constraint(a, ComparisonOp::Ge, up[i] - x_star[i]);
                    lp.add_constraint(b, ComparisonOp::Ge, x_star[i] - lo[i]);
                }
                let mut sum: Vec<_> = theta.iter().map(|&th| (th, 1.0)).collect();
                sum.push((t, -1.0));
                lp.add_constraint(sum, ComparisonOp::Le, 0.0);
            }
            objective.push(t);
        }
    }
    (lp, u, objective)
}

/// Control for one region; ties are broken by minimizing `‖u‖₁` at the
/// optimal objective.
pub fn synthesize_control_lp(
    x_star: &[f64],
    q: &Hyperbox,
    env: &LinearEnvelope,
    control: &ControlStructure,
    mode: LpMode,
) -> Result<LpControl, ControlError> {
    let (lp, _, _) = build_lp(x_star, q, env, control, mode);
    let first = lp
        .solve()
        .map_err(|e| ControlError::Lp(e.to_string()))?
        .into_solution()
        .map_err(|_| ControlError::Lp("interrupted".into()))?;
    let best = first.objective();

    // Second stage: same feasible set, objective within the optimum, minimal |u|.
    let (mut lp2, u, obj_vars) = build_lp(x_star, q, env, control, mode);
    let c = u.len();
    let abs: Vec<_> = (0..c).map(|_| lp2.add_var(1.0, (0.0, INF))).collect();
    for j in 0..c {
        lp2.add_constraint([(abs[j], 1.0), (u[j], -1.0)], ComparisonOp::Ge, 0.0);
        lp2.add_constraint([(abs[j], 1.0), (u[j], 1.0)], ComparisonOp::Ge, 0.0);
    }
    let slack = 1e-9 * (1.0 + best.abs());
    let obj: Vec<_> = obj_vars.iter().map(|&v| (v, 1.0)).collect();
    lp2.add_constraint(obj, ComparisonOp::Le, best + slack);
    let (u_vals, objective) = match lp2.solve().map(|s| s.into_solution()) {
        Ok(Ok(sol)) => {
            let objective: f64 = obj_vars.iter().map(|&v| sol.var_value(v)).sum();
            (u.iter().map(|&v| sol.var_value(v)).collect::<Vec<_>>(), objective)
        }
        _ => {
            let (_, u1, _) = build_lp(x_star, q, env, control, mode);
            (u1.iter().map(|&v| first.var_value(v)).collect(), best)
        }
    };
    Ok(LpControl { u: control.clip(&u_vals), objective })
}

#[derive(Debug, Clone)]
pub struct ControlOptions {
    pub synthesis: SynthesisOptions,
    pub lp_mode: LpMode,
    pub restarts: usize,
    pub seed: u64,
    /// Also certify the closed-loop system after installing controls and
    /// keep whichever certified bound is higher.
    pub closed_loop_recertify: bool,
}

impl ControlOptions {
    pub fn from_spec(spec: &ProblemSpec) -> Self {
        ControlOptions {
            synthesis: SynthesisOptions::from_spec(spec),
            lp_mode: LpMode::Existential,
            restarts: 32,
            seed: 0,
            closed_loop_recertify: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ControlTimings {
    pub sos_s: f64,
    pub lp_s: f64,
}

#[derive(Debug, Clone)]
pub struct Algorithm1Result {
    pub policy: ControlPolicy,
    pub certificate: BarrierCertificate,
    pub p_s_before: f64,
    pub p_s_after: f64,
    /// Bound from the design barrier with shifted `β_q` only, before any
    /// closed-loop re-certification.
    pub p_s_literal: f64,
    pub iterations: usize,
    pub reached: bool,
    /// `β_q` of the barrier used to design the final policy, without and
    /// with the installed controls.
    pub betas_before: Vec<f64>,
    pub betas_after: Vec<f64>,
    pub design_barrier: Option<Polynomial>,
    pub x_star: Option<BarrierMin>,
    pub closed_loop_certificate: bool,
    pub eta_caps: Vec<f64>,
    pub timings: ControlTimings,
}

/// Upper bound on the loop iterations: `⌈(1 − δ_s)/Δη⌉ + 1`.
pub fn iteration_bound(delta_s: f64, eta_step: f64) -> usize {
    ((1.0 - delta_s) / eta_step - 1e-9).ceil().max(0.0) as usize + 1
}

struct Round {
    policy: ControlPolicy,
    certificate: BarrierCertificate,
    betas_before: Vec<f64>,
    betas_after: Vec<f64>,
    design_barrier: Polynomial,
    x_star: BarrierMin,
    closed_loop: bool,
    p_s_literal: f64,
}

#[allow(clippy::too_many_arguments)]
fn control_round(
    spec: &ProblemSpec,
    partition: &Partition,
    bounds: &[RegionBounds],
    control: &ControlStructure,
    eta_cap: f64,
    options: &ControlOptions,
    backend: &dyn ConicBackend,
    timings: &mut ControlTimings,
) -> Result<Round, ControlError> {
    let so = &options.synthesis;
    let t = Instant::now();
    let cert = synthesize(spec, partition, bounds, Some(eta_cap), so, backend)?;
    let variances = &spec.noise.variances;
    let betas = eval_beta_all(&cert.barrier, bounds, variances, None, so, backend)?;
    timings.sos_s += t.elapsed().as_secs_f64();
    let threshold = beta_threshold(spec.threshold, cert.eta, spec.horizon);
    let x_star = find_barrier_min(&cert.barrier, &spec.safe_set, options.restarts, options.seed);
    let flagged: Vec<usize> = (0..bounds.len()).filter(|&q| betas[q] > threshold + FLAG_TOLERANCE).collect();
    log::info!(
        "η cap {eta_cap:.4}: η {:.4}, β {:.4e}, threshold {threshold:.4e}, {} of {} regions flagged",
        cert.eta,
        cert.beta,
        flagged.len(),
        bounds.len()
    );

    let t = Instant::now();
    let designs: Vec<(usize, Result<LpControl, ControlError>)> = flagged
        .par_iter()
        .map(|&q| {
            let rb = &bounds[q];
            (q, synthesize_control_lp(&x_star.x_star, rb.region(), &rb.envelope, control, options.lp_mode))
        })
        .collect();
    timings.lp_s += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let evaluated: Vec<(usize, Vec<f64>, f64)> = designs
        .into_par_iter()
        .map(|(q, r)| -> Result<Option<(usize, Vec<f64>, f64)>, ControlError> {
            let lc = r?;
            if lc.u.iter().all(|v| *v == 0.0) {
                return Ok(None);
            }
            let shift = control.apply(&lc.u);
            let after = eval_beta_region(&cert.barrier, &bounds[q], variances, Some(&shift), so, backend)?;
            Ok(Some((q, lc.u, after.beta)))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    timings.sos_s += t.elapsed().as_secs_f64();

    let mut policy = ControlPolicy::default();
    let mut betas_after = betas.clone();
    for (q, u, after) in evaluated {
        if after < betas[q] {
            policy.entries.insert(q, u);
            betas_after[q] = after;
        } else {
            log::debug!("region {q}: control does not lower β_q ({:.3e} -> {after:.3e}); dropped", betas[q]);
        }
    }
    let max_after = betas_after.iter().cloned().fold(0.0_f64, f64::max);
    let mut certificate = cert.clone();
    certificate.beta = max_after;
    certificate.per_region_beta = betas_after.clone();
    certificate.p_s = safety_probability(certificate.eta, max_after, spec.horizon);
    let mut closed_loop = false;
    let p_s_literal = certificate.p_s;

    if options.closed_loop_recertify && !policy.is_empty() {
        let t = Instant::now();
        let shifted = apply_policy(bounds, &policy, control);
        match synthesize(spec, partition, &shifted, None, so, backend) {
            Ok(mut cl) => {
                populate_region_betas(&mut cl, &shifted, variances, so, backend)?;
                if cl.p_s > certificate.p_s {
                    certificate = cl;
                    closed_loop = true;
                }
            }
            Err(e) => log::warn!("closed-loop certification failed: {e}"),
        }
        timings.sos_s += t.elapsed().as_secs_f64();
    }
    Ok(Round {
        policy,
        certificate,
        betas_before: betas,
        betas_after,
        design_barrier: cert.barrier,
        x_star,
        closed_loop,
        p_s_literal,
    })
}

/// Certify, then alternately cap η and install controls until the
/// threshold is met or the cap is exhausted. The cap starts at `1 − δ_s`
/// and decreases by `Δη` each iteration.
pub fn run_algorithm1(
    spec: &ProblemSpec,
    partition: &Partition,
    bounds: &[RegionBounds],
    options: &ControlOptions,
    backend: &dyn ConicBackend,
) -> Result<Algorithm1Result, ControlError> {
    let control = spec.control.as_ref().ok_or(ControlError::MissingControl)?;
    let mut timings = ControlTimings::default();
    let t = Instant::now();
    let mut initial = synthesize(spec, partition, bounds, None, &options.synthesis, backend)?;
    populate_region_betas(&mut initial, bounds, &spec.noise.variances, &options.synthesis, backend)?;
    timings.sos_s += t.elapsed().as_secs_f64();
    let p_s_before = initial.p_s;
    let delta = spec.threshold;
    let mut result = Algorithm1Result {
        policy: ControlPolicy::default(),
        betas_before: initial.per_region_beta.clone(),
        betas_after: initial.per_region_beta.clone(),
        certificate: initial,
        p_s_before,
        p_s_after: p_s_before,
        p_s_literal: p_s_before,
        iterations: 0,
        reached: p_s_before >= delta,
        design_barrier: None,
        x_star: None,
        closed_loop_certificate: false,
        eta_caps: Vec::new(),
        timings: ControlTimings::default(),
    };
    let mut k = 0usize;
    while !result.reached {
        let cap = 1.0 - delta - k as f64 * spec.eta_step;
        if cap < -1e-12 {
            break;
        }
        let cap = cap.max(0.0);
        k += 1;
        result.iterations += 1;
        result.eta_caps.push(cap);
        match control_round(spec, partition, bounds, control, cap, options, backend, &mut timings) {
            Ok(round) => {
                if round.certificate.p_s > result.p_s_after || result.design_barrier.is_none() {
                    result.p_s_after = round.certificate.p_s;
                    result.p_s_literal = round.p_s_literal;
                    result.policy = round.policy;
                    result.certificate = round.certificate;
                    result.betas_before = round.betas_before;
                    result.betas_after = round.betas_after;
                    result.design_barrier = Some(round.design_barrier);
                    result.x_star = Some(round.x_star);
                    result.closed_loop_certificate = round.closed_loop;
                }
                result.reached = result.p_s_after >= delta;
            }
            Err(ControlError::Barrier(BarrierError::Infeasible { family })) => {
                log::warn!("η cap {cap:.4}: barrier program infeasible ({family})");
            }
            Err(e) => return Err(e),
        }
        if cap <= 0.0 {
            break;
        }
    }
    result.timings = timings;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    #[serde(rename = "P_s_before")]
    pub p_s_before: f64,
    #[serde(rename = "P_s_after")]
    pub p_s_after: f64,
    pub controlled_fraction: f64,
    pub iterations: usize,
}

impl Algorithm1Result {
    pub fn summary(&self, partition: &Partition) -> PolicySummary {
        PolicySummary {
            p_s_before: self.p_s_before,
            p_s_after: self.p_s_after,
            controlled_fraction: controlled_fraction(&self.policy, partition),
            iterations: self.iterations,
        }
    }
}
