//! Stochastic barrier certificates.
//!
//! A certificate is a polynomial `B` with `B >= 0`, `B <= η` on the initial
//! set, `B >= 1` on the unsafe set and `E[B(f(x) + v)] <= B(x) + β` on the
//! safe set. Over a horizon of `N` steps the system stays safe with
//! probability at least `1 − (η + βN)`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{box_to_polynomials, unsafe_decomposition, Hyperbox, Partition, SemiAlgebraicSet};
use crate::model::ProblemSpec;
use crate::poly::{PolyError, Polynomial};
use crate::relax::{BoundMode, RegionBounds};
use crate::sos::{
    ConicBackend, PolyExpr, PolyVar, SolveStatus, SosError, SosProgram, SosSolution, Tolerances,
};

#[derive(Debug, thiserror::Error)]
pub enum BarrierError {
    #[error("invalid barrier degree {degree}: {reason}")]
    Degree { degree: u32, reason: String },
    #[error("barrier program infeasible (most implicated constraint family: {family})")]
    Infeasible { family: String },
    #[error("numerical failure: max residual {residual:.3e}, min eigenvalue {eigenvalue:.3e}")]
    Numerical { residual: f64, eigenvalue: f64 },
    #[error("bounds cover {got} regions, partition has {expected}")]
    Coverage { expected: usize, got: usize },
    #[error("eta cap must lie in [0, 1], got {0}")]
    EtaCap(f64),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Rejects barrier degrees for which no useful certificate exists: constant
/// and linear barriers only certify the trivial bound, and odd degrees
/// cannot be SOS.
pub fn degree_guard(m: u32) -> Result<(), BarrierError> {
    if m < 2 {
        return Err(BarrierError::Degree {
            degree: m,
            reason: "barriers of degree below 2 are trivial (certified bound 0); use an even degree >= 2".into(),
        });
    }
    if m % 2 == 1 {
        return Err(BarrierError::Degree { degree: m, reason: "SOS barriers need an even degree".into() });
    }
    Ok(())
}

pub fn safety_probability(eta: f64, beta: f64, horizon: usize) -> f64 {
    (1.0 - (eta + beta * horizon as f64)).clamp(0.0, 1.0)
}

/// Largest `β_q` that still allows threshold `δ_s` with the given `η`.
pub fn beta_threshold(delta_s: f64, eta: f64, horizon: usize) -> f64 {
    (1.0 - delta_s - eta) / horizon as f64
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub degree: u32,
    /// Multiplier degree for every Putinar block; `None` uses the largest
    /// even degree keeping each product within the barrier degree.
    pub multiplier_degree: Option<u32>,
    pub enforce_degree_guard: bool,
    /// Additionally certify `wᵀ ∇²B(x) w` as SOS in `(x, w)`.
    pub sos_convex: bool,
    /// Weight on η when minimizing β under an η cap.
    pub eta_tiebreak: f64,
    pub tolerances: Tolerances,
}

impl SynthesisOptions {
    pub fn from_spec(spec: &ProblemSpec) -> Self {
        SynthesisOptions {
            degree: spec.barrier_degree,
            multiplier_degree: None,
            enforce_degree_guard: true,
            sos_convex: false,
            eta_tiebreak: 1e-6,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTimings {
    pub build_s: f64,
    pub solve_s: f64,
}

#[derive(Debug, Clone)]
pub struct BarrierCertificate {
    pub barrier: Polynomial,
    pub eta: f64,
    pub beta: f64,
    pub horizon: usize,
    pub per_region_beta: Vec<f64>,
    pub p_s: f64,
    pub mode: BoundMode,
    pub degree: u32,
    pub max_residual: f64,
    pub timings: SynthesisTimings,
}

impl BarrierCertificate {
    pub fn recompute_probability(&mut self) {
        self.p_s = safety_probability(self.eta, self.beta, self.horizon);
    }

    pub fn to_report(&self) -> CertificateReport {
        CertificateReport {
            arity: self.barrier.arity(),
            barrier: self.barrier.to_string(),
            eta: self.eta,
            beta: self.beta,
            horizon: self.horizon,
            per_region_beta: self.per_region_beta.clone(),
            p_s: self.p_s,
            mode: self.mode,
            degree: self.degree,
            max_residual: self.max_residual,
            timings: self.timings.clone(),
        }
    }
}

/// Serialized form of a [`BarrierCertificate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub arity: usize,
    pub barrier: String,
    pub eta: f64,
    pub beta: f64,
    pub horizon: usize,
    pub per_region_beta: Vec<f64>,
    pub p_s: f64,
    pub mode: BoundMode,
    pub degree: u32,
    pub max_residual: f64,
    #[serde(default)]
    pub timings: SynthesisTimings,
}

impl CertificateReport {
    pub fn to_certificate(&self) -> Result<BarrierCertificate, PolyError> {
        Ok(BarrierCertificate {
            barrier: Polynomial::parse(&self.barrier, self.arity)?,
            eta: self.eta,
            beta: self.beta,
            horizon: self.horizon,
            per_region_beta: self.per_region_beta.clone(),
            p_s: self.p_s,
            mode: self.mode,
            degree: self.degree,
            max_residual: self.max_residual,
            timings: self.timings.clone(),
        })
    }
}

/// Affine polynomial `Σ a_j x_j + Σ c_j y_j + b` in the joint `(x, y)` space.
fn joint_affine(n: usize, a_x: &[f64], a_y: &[f64], b: f64) -> Polynomial {
    let mut coeffs = vec![0.0; 2 * n];
    coeffs[..n].copy_from_slice(a_x);
    coeffs[n..].copy_from_slice(a_y);
    Polynomial::affine(&coeffs, b)
}

/// Sandwich constraints `(upper_i − y_i)(y_i − lower_i) >= 0` over `(x, y)`
/// for every row not pinned by [`RegionBounds::exact_rows`].
pub fn sandwich_set(bounds: &RegionBounds) -> SemiAlgebraicSet {
    let n = bounds.region().dim();
    let exact: Vec<usize> = bounds.exact_rows().iter().map(|r| r.0).collect();
    let mut hs = Vec::new();
    let zero = vec![0.0; n];
    for i in (0..n).filter(|i| !exact.contains(i)) {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let neg_e: Vec<f64> = e.iter().map(|v| -v).collect();
        let up = joint_affine(n, &zero, &neg_e, bounds.interval.hi[i]);
        let lo = joint_affine(n, &zero, &e, -bounds.interval.lo[i]);
        hs.push(up.mul(&lo).expect("same arity"));
    }
    let env = &bounds.envelope;
    for i in bounds.linear_rows().into_iter().filter(|i| !exact.contains(i)) {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let neg_e: Vec<f64> = e.iter().map(|v| -v).collect();
        let neg_low: Vec<f64> = env.a_low[i].iter().map(|v| -v).collect();
        let up = joint_affine(n, &env.a_up[i], &neg_e, env.b_up[i]);
        let lo = joint_affine(n, &neg_low, &e, -env.b_low[i]);
        hs.push(up.mul(&lo).expect("same arity"));
    }
    SemiAlgebraicSet::new(2 * n, hs).expect("joint arity")
}

/// Region box plus sandwiches, all in the joint `(x, y)` space.
fn region_set(bounds: &RegionBounds) -> SemiAlgebraicSet {
    let n = bounds.region().dim();
    let mut hs: Vec<Polynomial> = box_to_polynomials(bounds.region()).embed(2 * n, 0).constraints().to_vec();
    hs.extend(sandwich_set(bounds).constraints().iter().cloned());
    SemiAlgebraicSet::new(2 * n, hs).expect("joint arity")
}

/// Affine substitution `(x, y) ↦ (x, y')` replacing each pinned `y_i` by
/// its exact image, or `None` when no row is pinned.
fn pinned_substitution(bounds: &RegionBounds) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
    let exact = bounds.exact_rows();
    if exact.is_empty() {
        return None;
    }
    let n = bounds.region().dim();
    let mut m: Vec<Vec<f64>> = (0..2 * n)
        .map(|r| {
            let mut row = vec![0.0; 2 * n];
            row[r] = 1.0;
            row
        })
        .collect();
    let mut c = vec![0.0; 2 * n];
    for (i, a, b) in exact {
        let row = &mut m[n + i];
        row.iter_mut().for_each(|v| *v = 0.0);
        row[..n].copy_from_slice(&a);
        c[n + i] = b;
    }
    Some((m, c))
}

/// Martingale gap `B(x) − E[B(y + v)] + β` restricted to the region's
/// successor relation, as a Putinar-ready expression.
fn pin_region(expr: PolyExpr, bounds: &RegionBounds) -> Result<PolyExpr, BarrierError> {
    match pinned_substitution(bounds) {
        Some((m, c)) => Ok(expr.map_linear(expr.arity(), |p| p.substitute_affine(&m, &c))?),
        None => Ok(expr),
    }
}

/// `B(x) − E[B(y + v)]` over the joint space for a decision polynomial `B`.
fn gap_expr(b: &PolyVar, variances: &[f64]) -> Result<PolyExpr, BarrierError> {
    let n = b.arity;
    let mut e = b.expr_mapped(2 * n, |p| p.embed(2 * n, 0));
    let mut expectation = PolyExpr::zero(2 * n);
    for (mono, id) in b.monomials.iter().zip(&b.coeffs) {
        let ex = Polynomial::monomial(mono.clone(), 1.0).expect_shifted(variances)?;
        expectation.add_scalar(*id, ex.embed(2 * n, n))?;
    }
    e.sub_expr(&expectation)?;
    Ok(e)
}

fn gap_poly(b: &Polynomial, variances: &[f64]) -> Result<Polynomial, BarrierError> {
    let n = b.arity();
    let ex = b.expect_shifted(variances)?.embed(2 * n, n);
    Ok(b.embed(2 * n, 0).sub(&ex)?)
}

/// Hessian form `Σ_ij w_i w_j ∂_i ∂_j p(x)` over `(x, w)`.
fn hessian_form(p: &Polynomial) -> Polynomial {
    let n = p.arity();
    let mut out = Polynomial::zero(2 * n);
    for i in 0..n {
        let di = p.partial(i);
        for j in 0..n {
            let dij = di.partial(j).embed(2 * n, 0);
            let ww = Polynomial::var(2 * n, n + i).mul(&Polynomial::var(2 * n, n + j)).expect("same arity");
            out = out.add(&dij.mul(&ww).expect("same arity")).expect("same arity");
        }
    }
    out
}

fn family(name: &str) -> String {
    name.split('[').next().unwrap_or(name).to_string()
}

/// Maps a failed solve to an error naming the implicated constraint family.
fn solve_error(prog: &SosProgram, sol: &SosSolution) -> BarrierError {
    match sol.status {
        SolveStatus::Infeasible => {
            let fam = sol
                .constraint_dual_mass
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| family(&prog.constraints()[i].name))
                .unwrap_or_else(|| "unknown".into());
            BarrierError::Infeasible { family: fam }
        }
        _ => BarrierError::Numerical { residual: sol.max_residual, eigenvalue: sol.min_eigenvalue },
    }
}

/// Builds and solves the barrier program over all regions.
pub fn synthesize(
    spec: &ProblemSpec,
    partition: &Partition,
    bounds: &[RegionBounds],
    eta_cap: Option<f64>,
    options: &SynthesisOptions,
    backend: &dyn ConicBackend,
) -> Result<BarrierCertificate, BarrierError> {
    let m = options.degree;
    if options.enforce_degree_guard {
        degree_guard(m)?;
    }
    if bounds.len() != partition.len() {
        return Err(BarrierError::Coverage { expected: partition.len(), got: bounds.len() });
    }
    if let Some(cap) = eta_cap {
        if !(0.0..=1.0).contains(&cap) {
            return Err(BarrierError::EtaCap(cap));
        }
    }
    let mode = bounds.first().map(|b| b.mode).unwrap_or(BoundMode::Linear);
    let start = Instant::now();
    let n = spec.dim();
    let mut prog = SosProgram::new();
    prog.tolerances = options.tolerances;
    let eta = prog.new_scalar("eta", Some(0.0), Some(eta_cap.unwrap_or(1.0)));
    let beta = prog.new_scalar("beta", Some(0.0), Some(1.0));
    let b = prog.new_poly_var("B", n, m);
    let mult = options.multiplier_degree;

    prog.assert_sos("nonneg", b.expr())?;

    let mut init = b.expr().scaled(-1.0);
    init.add_scalar(eta, Polynomial::constant(n, 1.0))?;
    let init = prog.putinar_block(&init, &box_to_polynomials(&spec.initial_set), mult, m)?;
    prog.assert_sos("initial", init)?;

    for (k, slab) in unsafe_decomposition(&spec.state_space, &spec.safe_set).iter().enumerate() {
        let mut e = b.expr();
        e.add_constant(&Polynomial::constant(n, -1.0))?;
        let e = prog.putinar_block(&e, slab, mult, m)?;
        prog.assert_sos(&format!("unsafe[{k}]"), e)?;
    }

    let gap = gap_expr(&b, &spec.noise.variances)?;
    for (q, rb) in bounds.iter().enumerate() {
        let mut e = gap.clone();
        e.add_scalar(beta, Polynomial::constant(2 * n, 1.0))?;
        let e = pin_region(e, rb)?;
        let e = prog.putinar_block(&e, &region_set(rb), mult, m)?;
        prog.assert_sos(&format!("region[{q}]"), e)?;
    }

    if options.sos_convex {
        let e = b.expr_mapped(2 * n, hessian_form);
        prog.assert_sos("convex", e)?;
    }

    match eta_cap {
        None => prog.set_objective(vec![(eta, 1.0), (beta, spec.horizon as f64)]),
        Some(_) => prog.set_objective(vec![(beta, 1.0), (eta, options.eta_tiebreak)]),
    }
    let build_s = start.elapsed().as_secs_f64();
    let t = Instant::now();
    let sol = prog.solve(backend);
    let solve_s = t.elapsed().as_secs_f64();
    log::info!(
        "barrier program: {} constraints, status {:?}, {} iterations, {solve_s:.2}s",
        prog.constraints().len(),
        sol.status,
        sol.iterations
    );
    if !sol.is_optimal() {
        return Err(solve_error(&prog, &sol));
    }
    let eta_v = sol.scalar(eta).clamp(0.0, 1.0);
    let beta_v = sol.scalar(beta).clamp(0.0, 1.0);
    let mut cert = BarrierCertificate {
        barrier: b.value(&sol),
        eta: eta_v,
        beta: beta_v,
        horizon: spec.horizon,
        per_region_beta: Vec::new(),
        p_s: 0.0,
        mode,
        degree: m,
        max_residual: sol.max_residual,
        timings: SynthesisTimings { build_s, solve_s },
    };
    cert.recompute_probability();
    Ok(cert)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEvaluation {
    pub beta: f64,
    pub feasible: bool,
}

/// Smallest `β_q` certifying the martingale condition on one region with
/// `B` fixed. An optional `shift` (a control contribution `g·u`) moves both
/// bounds. Infeasible or failed solves fall back to `1.0`.
pub fn eval_beta_region(
    barrier: &Polynomial,
    bounds: &RegionBounds,
    variances: &[f64],
    shift: Option<&[f64]>,
    options: &SynthesisOptions,
    backend: &dyn ConicBackend,
) -> Result<BetaEvaluation, BarrierError> {
    let shifted;
    let rb = match shift {
        Some(s) => {
            shifted = bounds.shifted(s);
            &shifted
        }
        None => bounds,
    };
    let n = barrier.arity();
    let m = options.degree.max(barrier.degree() + barrier.degree() % 2);
    let mut prog = SosProgram::new();
    prog.tolerances = options.tolerances;
    let beta = prog.new_scalar("beta", Some(0.0), None);
    let mut e = PolyExpr::from_poly(gap_poly(barrier, variances)?);
    e.add_scalar(beta, Polynomial::constant(2 * n, 1.0))?;
    let e = pin_region(e, rb)?;
    let e = prog.putinar_block(&e, &region_set(rb), options.multiplier_degree, m)?;
    prog.assert_sos("region", e)?;
    prog.set_objective(vec![(beta, 1.0)]);
    let sol = prog.solve(backend);
    if !sol.is_optimal() {
        log::warn!("β_q evaluation failed ({:?}); using the conservative value 1", sol.status);
        return Ok(BetaEvaluation { beta: 1.0, feasible: false });
    }
    Ok(BetaEvaluation { beta: sol.scalar(beta).clamp(0.0, 1.0), feasible: true })
}

/// Per-region `β_q` for every region, in parallel; `shifts[q]` applies a
/// control contribution to region `q`.
pub fn eval_beta_all(
    barrier: &Polynomial,
    bounds: &[RegionBounds],
    variances: &[f64],
    shifts: Option<&[Option<Vec<f64>>]>,
    options: &SynthesisOptions,
    backend: &dyn ConicBackend,
) -> Result<Vec<f64>, BarrierError> {
    bounds
        .par_iter()
        .enumerate()
        .map(|(q, rb)| {
            let s = shifts.and_then(|v| v[q].as_deref());
            eval_beta_region(barrier, rb, variances, s, options, backend).map(|r| r.beta)
        })
        .collect()
}

/// Fills `per_region_beta` and tightens `β` to their maximum.
pub fn populate_region_betas(
    cert: &mut BarrierCertificate,
    bounds: &[RegionBounds],
    variances: &[f64],
    options: &SynthesisOptions,
    backend: &dyn ConicBackend,
) -> Result<(), BarrierError> {
    let betas = eval_beta_all(&cert.barrier, bounds, variances, None, options, backend)?;
    let max = betas.iter().cloned().fold(0.0_f64, f64::max);
    cert.per_region_beta = betas;
    cert.beta = cert.beta.min(max);
    cert.recompute_probability();
    Ok(())
}

/// Result of sampling each certificate condition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub min_barrier: f64,
    pub max_initial_excess: f64,
    pub min_unsafe: f64,
    pub max_martingale_excess: f64,
    pub samples: usize,
    pub violations: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn sample_box<R: Rng>(b: &Hyperbox, rng: &mut R) -> Vec<f64> {
    b.lower
        .iter()
        .zip(&b.upper)
        .map(|(&l, &u)| if u > l { rng.gen_range(l..=u) } else { l })
        .collect()
}

/// Samples every certificate condition. `bounds` must describe the
/// dynamics the certificate claims (shifted by any installed control).
/// About `samples` points are split across the conditions, with at least
/// `per_region` `(x, y)` pairs per region.
pub fn audit_certificate(
    cert: &BarrierCertificate,
    spec: &ProblemSpec,
    bounds: &[RegionBounds],
    samples: usize,
    per_region: usize,
    tol: f64,
    seed: u64,
) -> Result<AuditReport, BarrierError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &cert.barrier;
    let n = b.arity();
    let eb = b.expect_shifted(&spec.noise.variances)?;
    let mut report = AuditReport {
        min_barrier: f64::INFINITY,
        max_initial_excess: f64::NEG_INFINITY,
        min_unsafe: f64::INFINITY,
        max_martingale_excess: f64::NEG_INFINITY,
        ..AuditReport::default()
    };
    let quarter = (samples / 4).max(1);
    for _ in 0..quarter {
        let x = sample_box(&spec.state_space, &mut rng);
        let v = b.eval(&x)?;
        report.min_barrier = report.min_barrier.min(v);
        report.violations += usize::from(v < -tol);
    }
    for _ in 0..quarter {
        let x = sample_box(&spec.initial_set, &mut rng);
        let v = b.eval(&x)? - cert.eta;
        report.max_initial_excess = report.max_initial_excess.max(v);
        report.violations += usize::from(v > tol);
    }
    // Unsafe slabs clipped to the state space; flat slabs sample their face.
    let slabs = 2 * n;
    for k in 0..quarter {
        let axis = (k % slabs) / 2;
        let upper_side = k % 2 == 0;
        let mut shell = spec.state_space.clone();
        if upper_side {
            shell.lower[axis] = spec.safe_set.upper[axis];
        } else {
            shell.upper[axis] = spec.safe_set.lower[axis];
        }
        let x = sample_box(&shell, &mut rng);
        let v = b.eval(&x)?;
        report.min_unsafe = report.min_unsafe.min(v);
        report.violations += usize::from(v < 1.0 - tol);
    }
    let per_q = (quarter / bounds.len().max(1)).max(per_region);
    for (q, rb) in bounds.iter().enumerate() {
        let beta_q = cert.per_region_beta.get(q).copied().unwrap_or(cert.beta).max(0.0);
        for _ in 0..per_q {
            let x = sample_box(rb.region(), &mut rng);
            let mut lo = rb.interval.lo.clone();
            let mut hi = rb.interval.hi.clone();
            if rb.mode == BoundMode::Linear {
                for (i, (l, h)) in rb.envelope.lower_at(&x).into_iter().zip(rb.envelope.upper_at(&x)).enumerate() {
                    lo[i] = lo[i].max(l);
                    hi[i] = hi[i].min(h);
                }
            }
            let y: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| if h > l { rng.gen_range(l..=h) } else { l }).collect();
            let v = eb.eval(&y)? - b.eval(&x)? - beta_q;
            report.max_martingale_excess = report.max_martingale_excess.max(v);
            report.violations += usize::from(v > tol);
        }
    }
    report.samples = 3 * quarter + per_q * bounds.len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::partition_uniform;
    use crate::model::{Activation, GaussianNoise, Layer, NeuralNetwork};
    use crate::relax::bound_partition;
    use crate::sos::{InteriorPoint, IpmSettings};

    fn backend() -> InteriorPoint {
        InteriorPoint::new(IpmSettings { parallel: false, ..IpmSettings::default() })
    }

    fn zero_spec(variance: f64, degree: u32) -> ProblemSpec {
        let net = NeuralNetwork::new(vec![Layer::new(vec![vec![0.0]], vec![0.0], Activation::Identity)]).unwrap();
        ProblemSpec {
            network: net,
            noise: GaussianNoise::new(vec![variance]).unwrap(),
            state_space: Hyperbox::new(vec![-2.0], vec![2.0]).unwrap(),
            safe_set: Hyperbox::new(vec![-1.0], vec![1.0]).unwrap(),
            initial_set: Hyperbox::new(vec![-0.1], vec![0.1]).unwrap(),
            horizon: 10,
            threshold: 0.9,
            barrier_degree: degree,
            eta_step: 0.05,
            partition_widths: vec![0.5],
            control: None,
        }
    }

    fn x2() -> Polynomial {
        Polynomial::var(1, 0).pow(2)
    }

    #[test]
    fn guard_and_formulas() {
        assert!(degree_guard(1).is_err());
        assert!(degree_guard(3).is_err());
        assert!(degree_guard(2).is_ok());
        assert!((safety_probability(0.1, 0.01, 10) - 0.8).abs() < 1e-12);
        assert_eq!(safety_probability(0.0, 0.0, 50), 1.0);
        assert_eq!(safety_probability(0.5, 0.2, 10), 0.0);
        assert!((beta_threshold(0.95, 0.02, 10) - 0.003).abs() < 1e-12);
        assert!(beta_threshold(0.95, 0.05, 10).abs() < 1e-12);
        assert!((beta_threshold(0.95, 0.10, 10) + 0.005).abs() < 1e-12);
    }

    #[test]
    fn zero_map_certificate() {
        let spec = zero_spec(0.0, 2);
        let part = partition_uniform(&spec.safe_set, &spec.partition_widths).unwrap();
        let bounds = bound_partition(&spec.network, &part, BoundMode::Linear);
        let opts = SynthesisOptions::from_spec(&spec);
        let cert = synthesize(&spec, &part, &bounds, None, &opts, &backend()).unwrap();
        assert!(cert.p_s >= 0.98 - 1e-6, "{cert:?}");
        let audit = audit_certificate(&cert, &spec, &bounds, 20_000, 100, 1e-6, 3).unwrap();
        assert!(audit.passed(), "{audit:?}");
    }

    #[test]
    fn beta_of_fixed_barrier() {
        let spec = zero_spec(0.0, 2);
        let part = partition_uniform(&spec.safe_set, &spec.partition_widths).unwrap();
        let bounds = bound_partition(&spec.network, &part, BoundMode::Linear);
        let opts = SynthesisOptions::from_spec(&spec);
        for rb in &bounds {
            let r = eval_beta_region(&x2(), rb, &[0.0], None, &opts, &backend()).unwrap();
            assert!(r.beta.abs() < 1e-6);
            let r = eval_beta_region(&x2(), rb, &[0.04], None, &opts, &backend()).unwrap();
            let q = rb.region();
            let closest = if q.lower[0] <= 0.0 && q.upper[0] >= 0.0 { 0.0 } else { q.lower[0].abs().min(q.upper[0].abs()) };
            let expect = (0.04 - closest * closest).max(0.0);
            assert!((r.beta - expect).abs() < 1e-4, "{r:?} vs {expect}");
        }
    }

    #[test]
    fn shift_cancels_drift() {
        // f(x) = 0.3 everywhere shifted by −0.3 matches f ≡ 0.
        let spec = zero_spec(0.01, 2);
        let drift = NeuralNetwork::new(vec![Layer::new(vec![vec![0.0]], vec![0.3], Activation::Identity)]).unwrap();
        let q = Hyperbox::new(vec![0.0], vec![0.5]).unwrap();
        let opts = SynthesisOptions::from_spec(&spec);
        let base = RegionBounds::new(&spec.network, &q, BoundMode::Linear);
        let moved = RegionBounds::new(&drift, &q, BoundMode::Linear);
        let a = eval_beta_region(&x2(), &base, &[0.01], None, &opts, &backend()).unwrap();
        let b = eval_beta_region(&x2(), &moved, &[0.01], Some(&[-0.3]), &opts, &backend()).unwrap();
        assert!((a.beta - b.beta).abs() < 1e-6, "{a:?} {b:?}");
    }

    #[test]
    fn degree_zero_gives_trivial_bound() {
        let spec = zero_spec(0.0, 2);
        let part = partition_uniform(&spec.safe_set, &spec.partition_widths).unwrap();
        let bounds = bound_partition(&spec.network, &part, BoundMode::Linear);
        let mut opts = SynthesisOptions::from_spec(&spec);
        opts.degree = 0;
        assert!(synthesize(&spec, &part, &bounds, None, &opts, &backend()).is_err());
        opts.enforce_degree_guard = false;
        let cert = synthesize(&spec, &part, &bounds, None, &opts, &backend()).unwrap();
        assert!(cert.p_s.abs() < 1e-6, "{cert:?}");
    }

    #[test]
    fn report_round_trip() {
        let cert = BarrierCertificate {
            barrier: x2().scale(1.5),
            eta: 0.1,
            beta: 0.01,
            horizon: 10,
            per_region_beta: vec![0.0, 0.01],
            p_s: 0.8,
            mode: BoundMode::Interval,
            degree: 2,
            max_residual: 1e-9,
            timings: SynthesisTimings::default(),
        };
        let json = serde_json::to_string(&cert.to_report()).unwrap();
        let back: CertificateReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cert.to_report());
        assert_eq!(back.to_certificate().unwrap().barrier, cert.barrier);
    }

    #[test]
    fn hessian_form_of_quadratic() {
        let p = x2().scale(3.0);
        let h = hessian_form(&p);
        // 6 w²
        assert_eq!(h.coeff(&[0, 2]), 6.0);
        assert_eq!(h.num_terms(), 1);
    }

    #[test]
    fn eta_cap_is_respected() {
        let spec = zero_spec(0.01, 2);
        let part = partition_uniform(&spec.safe_set, &spec.partition_widths).unwrap();
        let bounds = bound_partition(&spec.network, &part, BoundMode::Interval);
        let opts = SynthesisOptions::from_spec(&spec);
        let cert = synthesize(&spec, &part, &bounds, Some(0.05), &opts, &backend()).unwrap();
        assert!(cert.eta <= 0.05 + 1e-7);
        assert!(matches!(
            synthesize(&spec, &part, &bounds, Some(1.5), &opts, &backend()),
            Err(BarrierError::EtaCap(_))
        ));
    }
}
