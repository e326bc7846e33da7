//! Sum-of-squares programs over [`Polynomial`] expressions.
//!
//! A program has scalar decision variables, Gram-parametrized SOS variables
//! and constraints `expr ∈ Λ`, where `expr` is affine in the decision
//! variables with polynomial coefficients. Each constraint gets its own
//! certificate Gram matrix; compilation matches coefficients monomial by
//! monomial and produces a [`ConicProblem`].

pub mod conic;
pub mod ipm;

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::SemiAlgebraicSet;
use crate::poly::{monomial_degree, monomials_up_to, Exponents, PolyError, Polynomial};
pub use conic::{BackendResult, BackendStatus, ConicBackend, ConicProblem, ConicRow, PsdEntry};
pub use ipm::{InteriorPoint, IpmSettings};

#[derive(Debug, thiserror::Error)]
pub enum SosError {
    #[error("SOS degree must be even, got {0}")]
    OddDegree(u32),
    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("constraint '{constraint}': monomial {monomial} exceeds certificate degree {degree}")]
    DegreeExceeded { constraint: String, monomial: String, degree: u32 },
    #[error("cannot map an expression that already contains SOS terms")]
    MapWithSos,
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScalarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SosVarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConstraintId(pub usize);

#[derive(Debug, Clone)]
pub struct ScalarVar {
    pub name: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Gram-parametrized SOS polynomial `z(x)ᵀ Q z(x)`, `Q ⪰ 0`.
#[derive(Debug, Clone)]
pub struct SosVar {
    pub id: SosVarId,
    pub arity: usize,
    pub degree: u32,
    pub basis: Vec<Exponents>,
}

impl SosVar {
    pub fn gram_dim(&self) -> usize {
        self.basis.len()
    }
}

/// Polynomial with one free scalar per monomial up to a degree.
#[derive(Debug, Clone)]
pub struct PolyVar {
    pub arity: usize,
    pub monomials: Vec<Exponents>,
    pub coeffs: Vec<ScalarId>,
}

impl PolyVar {
    pub fn expr(&self) -> PolyExpr {
        self.expr_mapped(self.arity, |p| p.clone())
    }

    /// Expression `Σ c_α T(x^α)` for a linear map `T` on polynomials.
    pub fn expr_mapped(&self, arity: usize, f: impl Fn(&Polynomial) -> Polynomial) -> PolyExpr {
        let mut e = PolyExpr::zero(arity);
        for (mono, id) in self.monomials.iter().zip(&self.coeffs) {
            let p = f(&Polynomial::monomial(mono.clone(), 1.0));
            debug_assert_eq!(p.arity(), arity);
            e.scalars.push((*id, p));
        }
        e
    }

    pub fn value(&self, solution: &SosSolution) -> Polynomial {
        let mut p = Polynomial::zero(self.arity);
        for (mono, id) in self.monomials.iter().zip(&self.coeffs) {
            p.add_term(mono.clone(), solution.scalar(*id));
        }
        p
    }
}

/// `constant + Σ s_i p_i + Σ λ_j h_j` with scalars `s_i` and SOS variables `λ_j`.
#[derive(Debug, Clone)]
pub struct PolyExpr {
    arity: usize,
    constant: Polynomial,
    scalars: Vec<(ScalarId, Polynomial)>,
    sos: Vec<(SosVarId, Polynomial)>,
}

impl PolyExpr {
    pub fn zero(arity: usize) -> Self {
        PolyExpr { arity, constant: Polynomial::zero(arity), scalars: Vec::new(), sos: Vec::new() }
    }

    pub fn from_poly(p: Polynomial) -> Self {
        PolyExpr { arity: p.arity(), constant: p, scalars: Vec::new(), sos: Vec::new() }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    fn check(&self, p: &Polynomial) -> Result<(), SosError> {
        if p.arity() != self.arity {
            return Err(SosError::Arity { expected: self.arity, got: p.arity() });
        }
        Ok(())
    }

    pub fn add_constant(&mut self, p: &Polynomial) -> Result<&mut Self, SosError> {
        self.check(p)?;
        self.constant = self.constant.add(p)?;
        Ok(self)
    }

    /// Adds `s · p`.
    pub fn add_scalar(&mut self, s: ScalarId, p: Polynomial) -> Result<&mut Self, SosError> {
        self.check(&p)?;
        self.scalars.push((s, p));
        Ok(self)
    }

    /// Adds `λ(x) · h(x)`.
    pub fn add_sos(&mut self, v: SosVarId, h: Polynomial) -> Result<&mut Self, SosError> {
        self.check(&h)?;
        self.sos.push((v, h));
        Ok(self)
    }

    pub fn add_expr(&mut self, other: &PolyExpr) -> Result<&mut Self, SosError> {
        if other.arity != self.arity {
            return Err(SosError::Arity { expected: self.arity, got: other.arity });
        }
        self.constant = self.constant.add(&other.constant)?;
        self.scalars.extend(other.scalars.iter().cloned());
        self.sos.extend(other.sos.iter().cloned());
        Ok(self)
    }

    pub fn sub_expr(&mut self, other: &PolyExpr) -> Result<&mut Self, SosError> {
        self.add_expr(&other.scaled(-1.0))
    }

    pub fn scaled(&self, c: f64) -> Self {
        PolyExpr {
            arity: self.arity,
            constant: self.constant.scale(c),
            scalars: self.scalars.iter().map(|(s, p)| (*s, p.scale(c))).collect(),
            sos: self.sos.iter().map(|(v, h)| (*v, h.scale(c))).collect(),
        }
    }

    /// Applies a linear map to every polynomial coefficient.
    pub fn map_linear(
        &self,
        arity: usize,
        f: impl Fn(&Polynomial) -> Result<Polynomial, PolyError>,
    ) -> Result<Self, SosError> {
        if !self.sos.is_empty() {
            return Err(SosError::MapWithSos);
        }
        let mut out = PolyExpr::zero(arity);
        let c = f(&self.constant)?;
        out.add_constant(&c)?;
        for (s, p) in &self.scalars {
            out.add_scalar(*s, f(p)?)?;
        }
        Ok(out)
    }

    /// Upper bound on the degree of the expression.
    pub fn degree(&self, program: &SosProgram) -> u32 {
        let mut d = self.constant.degree();
        for (_, p) in &self.scalars {
            d = d.max(p.degree());
        }
        for (v, h) in &self.sos {
            d = d.max(program.sos_vars[v.0].degree + h.degree());
        }
        d
    }

    /// The polynomial obtained by substituting solved values.
    pub fn value(&self, program: &SosProgram, solution: &SosSolution) -> Polynomial {
        let mut p = self.constant.clone();
        for (s, q) in &self.scalars {
            p = p.add(&q.scale(solution.scalar(*s))).expect("arity checked");
        }
        for (v, h) in &self.sos {
            let var = &program.sos_vars[v.0];
            let lam = gram_polynomial(var.arity, &var.basis, &solution.sos_grams[v.0]);
            p = p.add(&lam.mul(h).expect("arity checked")).expect("arity checked");
        }
        p
    }
}

/// `z(x)ᵀ G z(x)` for a Gram matrix over `basis`.
pub fn gram_polynomial(arity: usize, basis: &[Exponents], gram: &DMatrix<f64>) -> Polynomial {
    let mut p = Polynomial::zero(arity);
    for (r, zr) in basis.iter().enumerate() {
        for (c, zc) in basis.iter().enumerate().skip(r) {
            let e: Exponents = zr.iter().zip(zc).map(|(a, b)| a + b).collect();
            let v = if r == c { gram[(r, c)] } else { gram[(r, c)] + gram[(c, r)] };
            p.add_term(e, v);
        }
    }
    p
}

#[derive(Debug, Clone)]
pub struct SosConstraint {
    pub name: String,
    pub expr: PolyExpr,
    pub basis: Vec<Exponents>,
}

/// Largest even multiplier degree keeping `λ h` within degree `target`.
pub fn default_multiplier_degree(target: u32, h_degree: u32) -> u32 {
    let d = target.saturating_sub(h_degree);
    d - d % 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub residual: f64,
    pub eigenvalue: f64,
    pub sample: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { residual: 1e-6, eigenvalue: -1e-7, sample: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct SosSolution {
    pub status: SolveStatus,
    pub scalars: Vec<f64>,
    pub sos_grams: Vec<DMatrix<f64>>,
    pub certificate_grams: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub max_residual: f64,
    pub min_eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Σ |dual| over each constraint's rows; on infeasibility this points at
    /// the constraints involved in the Farkas certificate.
    pub constraint_dual_mass: Vec<f64>,
}

impl SosSolution {
    pub fn scalar(&self, id: ScalarId) -> f64 {
        self.scalars[id.0]
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintAudit {
    pub name: String,
    pub min_sample_value: f64,
    pub min_gram_eigenvalue: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CertificateReport {
    pub constraints: Vec<ConstraintAudit>,
}

impl CertificateReport {
    pub fn flags(&self) -> usize {
        self.constraints.iter().filter(|c| c.flagged).count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SosProgram {
    scalars: Vec<ScalarVar>,
    sos_vars: Vec<SosVar>,
    constraints: Vec<SosConstraint>,
    objective: Vec<(ScalarId, f64)>,
    pub tolerances: Tolerances,
}

impl SosProgram {
    pub fn new() -> Self {
        SosProgram::default()
    }

    pub fn scalars(&self) -> &[ScalarVar] {
        &self.scalars
    }

    pub fn sos_vars(&self) -> &[SosVar] {
        &self.sos_vars
    }

    pub fn constraints(&self) -> &[SosConstraint] {
        &self.constraints
    }

    pub fn new_scalar(&mut self, name: &str, lower: Option<f64>, upper: Option<f64>) -> ScalarId {
        self.scalars.push(ScalarVar { name: name.to_string(), lower, upper });
        ScalarId(self.scalars.len() - 1)
    }

    pub fn new_sos_var(&mut self, arity: usize, degree: u32) -> Result<SosVarId, SosError> {
        if degree % 2 == 1 {
            return Err(SosError::OddDegree(degree));
        }
        let id = SosVarId(self.sos_vars.len());
        let basis = monomials_up_to(arity, degree / 2);
        self.sos_vars.push(SosVar { id, arity, degree, basis });
        Ok(id)
    }

    pub fn sos_var(&self, id: SosVarId) -> &SosVar {
        &self.sos_vars[id.0]
    }

    /// Free polynomial of the given degree (one scalar per monomial).
    pub fn new_poly_var(&mut self, name: &str, arity: usize, degree: u32) -> PolyVar {
        let monomials = monomials_up_to(arity, degree);
        let coeffs = (0..monomials.len())
            .map(|i| self.new_scalar(&format!("{name}[{i}]"), None, None))
            .collect();
        PolyVar { arity, monomials, coeffs }
    }

    pub fn set_objective(&mut self, terms: Vec<(ScalarId, f64)>) {
        self.objective = terms;
    }

    /// `γ − Σ λ_i h_i` with fresh SOS multipliers `λ_i`. `degree` fixes the
    /// multiplier degree; otherwise each uses [`default_multiplier_degree`]
    /// for target degree `target`.
    pub fn putinar_block(
        &mut self,
        gamma: &PolyExpr,
        set: &SemiAlgebraicSet,
        degree: Option<u32>,
        target: u32,
    ) -> Result<PolyExpr, SosError> {
        let mut out = gamma.clone();
        for h in set.constraints() {
            let d = match degree {
                Some(d) => d,
                None => default_multiplier_degree(target, h.degree()),
            };
            let lam = self.new_sos_var(gamma.arity(), d)?;
            out.add_sos(lam, h.scale(-1.0))?;
        }
        Ok(out)
    }

    /// Asserts `expr ∈ Λ` with a certificate degree of `deg(expr)` rounded
    /// up to even.
    pub fn assert_sos(&mut self, name: &str, expr: PolyExpr) -> Result<ConstraintId, SosError> {
        let d = expr.degree(self);
        self.assert_sos_with_degree(name, expr, d + d % 2)
    }

    pub fn assert_sos_with_degree(
        &mut self,
        name: &str,
        expr: PolyExpr,
        degree: u32,
    ) -> Result<ConstraintId, SosError> {
        if degree % 2 == 1 {
            return Err(SosError::OddDegree(degree));
        }
        let arity = expr.arity();
        let check = |p: &Polynomial| -> Result<(), SosError> {
            for (e, _) in p.terms() {
                if monomial_degree(e) > degree {
                    return Err(SosError::DegreeExceeded {
                        constraint: name.to_string(),
                        monomial: Polynomial::monomial(e.clone(), 1.0).to_string(),
                        degree,
                    });
                }
            }
            Ok(())
        };
        check(&expr.constant)?;
        for (_, p) in &expr.scalars {
            check(p)?;
        }
        for (v, h) in &expr.sos {
            let var = &self.sos_vars[v.0];
            if var.arity != arity {
                return Err(SosError::Arity { expected: arity, got: var.arity });
            }
            if var.degree + h.degree() > degree {
                let lead = h.terms().keys().max_by_key(|e| monomial_degree(e)).cloned();
                let top = var.basis.last().cloned().unwrap_or_else(|| vec![0; arity]);
                let e: Exponents = match lead {
                    Some(l) => l.iter().zip(&top).map(|(a, b)| a + 2 * b).collect(),
                    None => top.iter().map(|b| 2 * b).collect(),
                };
                return Err(SosError::DegreeExceeded {
                    constraint: name.to_string(),
                    monomial: Polynomial::monomial(e, 1.0).to_string(),
                    degree,
                });
            }
        }
        let basis = monomials_up_to(arity, degree / 2);
        self.constraints.push(SosConstraint { name: name.to_string(), expr, basis });
        Ok(ConstraintId(self.constraints.len() - 1))
    }

    fn bound_rows(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for (i, s) in self.scalars.iter().enumerate() {
            if let Some(lo) = s.lower {
                out.push((i, 1.0, lo));
            }
            if let Some(hi) = s.upper {
                out.push((i, -1.0, hi));
            }
        }
        out
    }

    /// Standard-form conic data. Block order: SOS variables, constraint
    /// certificates, scalar-bound slacks. Row order: constraints in
    /// insertion order (monomials in graded order within each), then bounds.
    pub fn compile(&self) -> ConicProblem {
        self.compile_with_owners().0
    }

    /// Compiled data plus the number of rows owned by each constraint.
    fn compile_with_owners(&self) -> (ConicProblem, Vec<usize>) {
        let mut owned = Vec::with_capacity(self.constraints.len());
        let nsos = self.sos_vars.len();
        let mut blocks: Vec<usize> = self.sos_vars.iter().map(SosVar::gram_dim).collect();
        blocks.extend(self.constraints.iter().map(|c| c.basis.len()));
        let mut rows = Vec::new();
        for (ci, con) in self.constraints.iter().enumerate() {
            let cert_block = nsos + ci;
            let mut acc: BTreeMap<(u32, Exponents), RowAcc> = BTreeMap::new();
            let key = |e: &Exponents| (monomial_degree(e), e.clone());
            for (r, zr) in con.basis.iter().enumerate() {
                for (c, zc) in con.basis.iter().enumerate().skip(r) {
                    let e: Exponents = zr.iter().zip(zc).map(|(a, b)| a + b).collect();
                    acc.entry(key(&e)).or_default().psd_add(cert_block, r, c, 1.0);
                }
            }
            for (e, v) in con.expr.constant.terms() {
                acc.entry(key(e)).or_default().rhs += v;
            }
            for (s, p) in &con.expr.scalars {
                for (e, v) in p.terms() {
                    *acc.entry(key(e)).or_default().free.entry(s.0).or_insert(0.0) -= v;
                }
            }
            for (vid, h) in &con.expr.sos {
                let var = &self.sos_vars[vid.0];
                for (r, zr) in var.basis.iter().enumerate() {
                    for (c, zc) in var.basis.iter().enumerate().skip(r) {
                        for (eh, v) in h.terms() {
                            let e: Exponents =
                                zr.iter().zip(zc).zip(eh).map(|((a, b), d)| a + b + d).collect();
                            acc.entry(key(&e)).or_default().psd_add(vid.0, r, c, -v);
                        }
                    }
                }
            }
            owned.push(acc.len());
            for (_, row) in acc {
                rows.push(row.finish());
            }
        }
        let first_slack = blocks.len();
        for (k, (i, sign, rhs)) in self.bound_rows().into_iter().enumerate() {
            // lower: s − t = lo; upper: s + t = hi
            blocks.push(1);
            rows.push(ConicRow {
                free: vec![(i, 1.0)],
                psd: vec![PsdEntry { block: first_slack + k, r: 0, c: 0, v: -sign }],
                rhs,
            });
        }
        let mut c_free = vec![0.0; self.scalars.len()];
        for (s, w) in &self.objective {
            c_free[s.0] += w;
        }
        (ConicProblem { num_free: self.scalars.len(), blocks, rows, c_free }, owned)
    }

    pub fn solve(&self, backend: &dyn ConicBackend) -> SosSolution {
        let (problem, owned) = self.compile_with_owners();
        let result = backend.solve(&problem);
        self.interpret(&problem, &owned, result)
    }

    fn interpret(&self, problem: &ConicProblem, owned: &[usize], result: BackendResult) -> SosSolution {
        let mut constraint_dual_mass = Vec::with_capacity(owned.len());
        let mut start = 0;
        for &count in owned {
            let mass: f64 = result.dual[start..start + count].iter().map(|v| v.abs()).sum();
            constraint_dual_mass.push(mass);
            start += count;
        }
        let nsos = self.sos_vars.len();
        let ncon = self.constraints.len();
        let residuals = problem.residuals(&result.free, &result.blocks);
        let max_residual = residuals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let min_eigenvalue = result
            .blocks
            .iter()
            .map(min_eig)
            .fold(f64::INFINITY, f64::min);
        let valid = max_residual.is_finite()
            && max_residual <= self.tolerances.residual
            && min_eigenvalue >= self.tolerances.eigenvalue;
        let converged = result.status == BackendStatus::Converged;
        let status = match result.status {
            BackendStatus::PrimalInfeasible => SolveStatus::Infeasible,
            _ if valid => SolveStatus::Optimal,
            _ => SolveStatus::NumericalFailure,
        };
        if status == SolveStatus::Optimal && !converged {
            log::debug!(
                "solver stopped early ({:?}); accepting feasible point with residual {max_residual:.2e}",
                result.status
            );
        }
        if status == SolveStatus::NumericalFailure {
            log::warn!(
                "numerical failure ({:?}): max residual {max_residual:.3e}, min eigenvalue {min_eigenvalue:.3e}",
                result.status
            );
        }
        SosSolution {
            status,
            objective: problem.objective(&result.free),
            scalars: result.free,
            sos_grams: result.blocks[..nsos].to_vec(),
            certificate_grams: result.blocks[nsos..nsos + ncon].to_vec(),
            max_residual,
            min_eigenvalue,
            iterations: result.iterations,
            converged,
            constraint_dual_mass,
        }
    }

    /// Samples every asserted expression at random points in `[-radius, radius]`
    /// and recomputes certificate Gram eigenvalues.
    pub fn check_certificate(
        &self,
        solution: &SosSolution,
        samples: usize,
        radius: f64,
        seed: u64,
    ) -> CertificateReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = CertificateReport::default();
        for (ci, con) in self.constraints.iter().enumerate() {
            let p = con.expr.value(self, solution);
            let mut min_val = f64::INFINITY;
            for _ in 0..samples {
                let x: Vec<f64> = (0..p.arity()).map(|_| rng.gen_range(-radius..=radius)).collect();
                min_val = min_val.min(p.eval(&x).unwrap_or(f64::NEG_INFINITY));
            }
            let mut min_eigen = min_eig(&solution.certificate_grams[ci]);
            for (v, _) in &con.expr.sos {
                min_eigen = min_eigen.min(min_eig(&solution.sos_grams[v.0]));
            }
            let flagged =
                min_val < -self.tolerances.sample || min_eigen < self.tolerances.eigenvalue;
            report.constraints.push(ConstraintAudit {
                name: con.name.clone(),
                min_sample_value: min_val,
                min_gram_eigenvalue: min_eigen,
                flagged,
            });
        }
        report
    }
}

#[derive(Default)]
struct RowAcc {
    free: BTreeMap<usize, f64>,
    psd: BTreeMap<(usize, usize, usize), f64>,
    rhs: f64,
}

impl RowAcc {
    fn psd_add(&mut self, block: usize, r: usize, c: usize, v: f64) {
        *self.psd.entry((block, r, c)).or_insert(0.0) += v;
    }

    fn finish(self) -> ConicRow {
        ConicRow {
            free: self.free.into_iter().filter(|(_, v)| *v != 0.0).collect(),
            psd: self
                .psd
                .into_iter()
                .filter(|(_, v)| *v != 0.0)
                .map(|((block, r, c), v)| PsdEntry { block, r, c, v })
                .collect(),
            rhs: self.rhs,
        }
    }
}

pub(crate) fn min_eig(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => f64::INFINITY,
        1 => m[(0, 0)],
        _ => SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min),
    }
}

/// Index of each exponent vector in a basis.
pub fn basis_index(basis: &[Exponents]) -> HashMap<Exponents, usize> {
    basis.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect()
}
