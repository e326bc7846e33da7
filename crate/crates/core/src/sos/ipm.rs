//! Primal-dual interior-point method for [`ConicProblem`].
//!
//! HKM search direction with a Mehrotra predictor-corrector. The Schur
//! complement is assembled per connected component of rows (rows that share
//! a PSD block), so programs made of many small independent certificates
//! never form a dense global system. Free columns are eliminated through the
//! Schur complement `A_fᵀ M⁻¹ A_f`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use super::conic::{BackendResult, BackendStatus, ConicBackend, ConicProblem, PsdEntry};

#[derive(Debug, Clone)]
pub struct IpmSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub infeasibility_tolerance: f64,
    pub parallel: bool,
}

impl Default for IpmSettings {
    fn default() -> Self {
        IpmSettings {
            max_iterations: 120,
            tolerance: 1e-9,
            infeasibility_tolerance: 1e-8,
            parallel: true,
        }
    }
}

/// Reference backend.
#[derive(Debug, Clone, Default)]
pub struct InteriorPoint {
    pub settings: IpmSettings,
}

impl InteriorPoint {
    pub fn new(settings: IpmSettings) -> Self {
        InteriorPoint { settings }
    }
}

impl ConicBackend for InteriorPoint {
    fn name(&self) -> &str {
        "ipm"
    }

    fn solve(&self, problem: &ConicProblem) -> BackendResult {
        Solver::new(problem, &self.settings).run()
    }

    fn is_internally_parallel(&self) -> bool {
        self.settings.parallel
    }
}

type Mat = DMatrix<f64>;

struct Component {
    rows: Vec<usize>,
    blocks: Vec<usize>,
}

struct Solver<'a> {
    settings: &'a IpmSettings,
    m: usize,
    k: usize,
    sizes: Vec<usize>,
    /// Row scaling factors.
    scale: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// Scaled free-column coefficients, column-wise: (row, value).
    free_cols: Vec<Vec<(usize, f64)>>,
    /// Scaled PSD entries grouped by block: (row, entries).
    block_rows: Vec<Vec<(usize, Vec<(usize, usize, f64)>)>>,
    components: Vec<Component>,
    /// Row -> (component, local index).
    row_loc: Vec<(usize, usize)>,
    active_free: Vec<bool>,
}

struct Factorization {
    /// Per-component Schur complements and their (regularized) factors.
    mats: Vec<Mat>,
    chol: Vec<Cholesky<f64, Dyn>>,
    /// `M⁻¹ A_f`, dense m × k.
    k_mat: Mat,
    sf_chol: Option<Cholesky<f64, Dyn>>,
}

struct Direction {
    dx: Vec<Mat>,
    dz: Vec<Mat>,
    dy: Vec<f64>,
    df: Vec<f64>,
}

fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Largest `α` with `X + α D ⪰ 0` (infinite when `D ⪰ 0`).
fn max_step(x: &Mat, d: &Mat) -> f64 {
    if x.nrows() == 1 {
        let dv = d[(0, 0)];
        return if dv >= 0.0 { f64::INFINITY } else { -x[(0, 0)] / dv };
    }
    let chol = match Cholesky::new(x.clone()) {
        Some(c) => c,
        None => return 0.0,
    };
    let l = chol.l();
    let li = match l.clone().try_inverse() {
        Some(v) => v,
        None => return 0.0,
    };
    let w = sym(&(&li * d * li.transpose()));
    let lam = min_eigenvalue(&w);
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

fn inverse_spd(x: &Mat) -> Mat {
    if x.nrows() == 1 {
        return Mat::from_element(1, 1, 1.0 / x[(0, 0)]);
    }
    match Cholesky::new(x.clone()) {
        Some(c) => sym(&c.inverse()),
        None => {
            let e = SymmetricEigen::new(x.clone());
            let vals = e.eigenvalues.map(|v| 1.0 / v.max(1e-300));
            sym(&(&e.eigenvectors * Mat::from_diagonal(&vals) * e.eigenvectors.transpose()))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cholesky_regularized(mut m: Mat) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let n = m.nrows();
    let maxdiag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0_f64, f64::max).max(1e-300);
    let mut delta = 0.0;
    while delta <= maxdiag {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Some(c);
        }
        let next = if delta == 0.0 { 1e-14 * maxdiag } else { delta * 10.0 };
        for i in 0..n {
            m[(i, i)] += next - delta;
        }
        delta = next;
    }
    Cholesky::new(m)
}

impl<'a> Solver<'a> {
    fn new(p: &ConicProblem, settings: &'a IpmSettings) -> Self {
        let m = p.rows.len();
        let k = p.num_free;
        let nb = p.blocks.len();
        let mut scale = vec![1.0; m];
        for (i, row) in p.rows.iter().enumerate() {
            let mut s2: f64 = row.free.iter().map(|(_, v)| v * v).sum();
            for e in &row.psd {
                s2 += if e.r == e.c { e.v * e.v } else { 2.0 * e.v * e.v };
            }
            let nrm = s2.sqrt();
            if nrm > 0.0 {
                scale[i] = 1.0 / nrm;
            }
        }
        let b: Vec<f64> = p.rows.iter().enumerate().map(|(i, r)| r.rhs * scale[i]).collect();
        let mut free_cols = vec![Vec::new(); k];
        let mut block_rows: Vec<Vec<(usize, Vec<(usize, usize, f64)>)>> = vec![Vec::new(); nb];
        for (i, row) in p.rows.iter().enumerate() {
            for &(j, v) in &row.free {
                if v != 0.0 {
                    free_cols[j].push((i, v * scale[i]));
                }
            }
            let mut by_block: Vec<(usize, Vec<(usize, usize, f64)>)> = Vec::new();
            for &PsdEntry { block, r, c, v } in &row.psd {
                if v == 0.0 {
                    continue;
                }
                match by_block.iter_mut().find(|(bl, _)| *bl == block) {
                    Some((_, list)) => list.push((r, c, v * scale[i])),
                    None => by_block.push((block, vec![(r, c, v * scale[i])])),
                }
            }
            for (bl, list) in by_block {
                block_rows[bl].push((i, list));
            }
        }
        // Union-find over rows sharing a block.
        let mut parent: Vec<usize> = (0..m).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for rows in &block_rows {
            if let Some(&(first, _)) = rows.first() {
                for &(r, _) in rows.iter().skip(1) {
                    let a = find(&mut parent, first);
                    let bb = find(&mut parent, r);
                    if a != bb {
                        parent[a] = bb;
                    }
                }
            }
        }
        let mut comp_of_root = vec![usize::MAX; m];
        let mut components: Vec<Component> = Vec::new();
        let mut row_loc = vec![(0, 0); m];
        for i in 0..m {
            let root = find(&mut parent, i);
            if comp_of_root[root] == usize::MAX {
                comp_of_root[root] = components.len();
                components.push(Component { rows: Vec::new(), blocks: Vec::new() });
            }
            let ci = comp_of_root[root];
            row_loc[i] = (ci, components[ci].rows.len());
            components[ci].rows.push(i);
        }
        for (bl, rows) in block_rows.iter().enumerate() {
            if let Some(&(first, _)) = rows.first() {
                components[row_loc[first].0].blocks.push(bl);
            }
        }
        let active_free = free_cols.iter().map(|c| !c.is_empty()).collect();

        Solver {
            settings,
            m,
            k,
            sizes: p.blocks.clone(),
            scale,
            b,
            c: p.c_free.clone(),
            free_cols,
            block_rows,
            components,
            row_loc,
            active_free,
        }
    }

    fn apply_a(&self, x: &[Mat], f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (j, col) in self.free_cols.iter().enumerate() {
            for &(i, v) in col {
                out[i] += v * f[j];
            }
        }
        for (bl, rows) in self.block_rows.iter().enumerate() {
            let xb = &x[bl];
            for (i, list) in rows {
                let mut s = 0.0;
                for &(r, c, v) in list {
                    s += if r == c { v * xb[(r, c)] } else { v * (xb[(r, c)] + xb[(c, r)]) };
                }
                out[*i] += s;
            }
        }
        out
    }

    fn apply_at_psd(&self, y: &[f64]) -> Vec<Mat> {
        self.block_rows
            .iter()
            .enumerate()
            .map(|(bl, rows)| {
                let n = self.sizes[bl];
                let mut s = Mat::zeros(n, n);
                for (i, list) in rows {
                    let yi = y[*i];
                    if yi == 0.0 {
                        continue;
                    }
                    for &(r, c, v) in list {
                        s[(r, c)] += yi * v;
                        if r != c {
                            s[(c, r)] += yi * v;
                        }
                    }
                }
                s
            })
            .collect()
    }

    fn apply_at_free(&self, y: &[f64]) -> Vec<f64> {
        self.free_cols
            .iter()
            .map(|col| col.iter().map(|&(i, v)| v * y[i]).sum())
            .collect()
    }

    fn schur_component(&self, comp: &Component, x: &[Mat], zinv: &[Mat]) -> Mat {
        let nr = comp.rows.len();
        let mut mm = Mat::zeros(nr, nr);
        for &bl in &comp.blocks {
            let rows = &self.block_rows[bl];
            let xb = &x[bl];
            let zb = &zinv[bl];
            if self.sizes[bl] == 1 {
                let w = xb[(0, 0)] * zb[(0, 0)];
                for (ii, (ri, li)) in rows.iter().enumerate() {
                    let vi: f64 = li.iter().map(|t| t.2).sum();
                    let a = self.row_loc[*ri].1;
                    for (rk, lk) in rows.iter().skip(ii) {
                        let vk: f64 = lk.iter().map(|t| t.2).sum();
                        let bb = self.row_loc[*rk].1;
                        let val = vi * vk * w;
                        mm[(a, bb)] += val;
                        if a != bb {
                            mm[(bb, a)] += val;
                        }
                    }
                }
                continue;
            }
            let n = self.sizes[bl];
            for (kk, (rk, lk)) in rows.iter().enumerate() {
                // T = X A_k Z⁻¹
                let mut t = Mat::zeros(n, n);
                for &(r, c, v) in lk {
                    t.ger(v, &xb.column(r), &zb.column(c), 1.0);
                    if r != c {
                        t.ger(v, &xb.column(c), &zb.column(r), 1.0);
                    }
                }
                let bb = self.row_loc[*rk].1;
                for (ri, li) in rows.iter().skip(kk) {
                    let mut s = 0.0;
                    for &(r, c, v) in li {
                        s += if r == c { v * t[(r, r)] } else { v * (t[(c, r)] + t[(r, c)]) };
                    }
                    let a = self.row_loc[*ri].1;
                    mm[(a, bb)] += s;
                    if a != bb {
                        mm[(bb, a)] += s;
                    }
                }
            }
        }
        sym(&mm)
    }

    fn factorize(&self, x: &[Mat], zinv: &[Mat]) -> Option<Factorization> {
        let build = |comp: &Component| {
            let m = self.schur_component(comp, x, zinv);
            cholesky_regularized(m.clone()).map(|c| (m, c))
        };
        let pairs: Vec<(Mat, Cholesky<f64, Dyn>)> = if self.settings.parallel {
            self.components.par_iter().map(build).collect::<Option<_>>()?
        } else {
            self.components.iter().map(build).collect::<Option<_>>()?
        };
        let (mats, chol): (Vec<Mat>, Vec<Cholesky<f64, Dyn>>) = pairs.into_iter().unzip();
        let mut k_mat = Mat::zeros(self.m, self.k);
        for (j, col) in self.free_cols.iter().enumerate() {
            if col.is_empty() {
                continue;
            }
            let mut v = vec![0.0; self.m];
            for &(i, a) in col {
                v[i] = a;
            }
            let sol = self.solve_m_with(&chol, &v);
            k_mat.set_column(j, &DVector::from_vec(sol));
        }
        let sf_chol = if self.k > 0 {
            let mut sf = Mat::zeros(self.k, self.k);
            for (j, col) in self.free_cols.iter().enumerate() {
                for (l, _) in self.free_cols.iter().enumerate() {
                    sf[(j, l)] = col.iter().map(|&(i, a)| a * k_mat[(i, l)]).sum();
                }
            }
            let mut sf = sym(&sf);
            for j in 0..self.k {
                if !self.active_free[j] {
                    sf[(j, j)] = 1.0;
                }
            }
            Some(cholesky_regularized(sf)?)
        } else {
            None
        };
        Some(Factorization { mats, chol, k_mat, sf_chol })
    }

    fn solve_m_with(&self, chol: &[Cholesky<f64, Dyn>], rhs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (ci, comp) in self.components.iter().enumerate() {
            let local = DVector::from_iterator(comp.rows.len(), comp.rows.iter().map(|&i| rhs[i]));
            let sol = chol[ci].solve(&local);
            for (li, &i) in comp.rows.iter().enumerate() {
                out[i] = sol[li];
            }
        }
        out
    }

    fn apply_m(&self, fac: &Factorization, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (ci, comp) in self.components.iter().enumerate() {
            let local = DVector::from_iterator(comp.rows.len(), comp.rows.iter().map(|&i| v[i]));
            let prod = &fac.mats[ci] * local;
            for (li, &i) in comp.rows.iter().enumerate() {
                out[i] = prod[li];
            }
        }
        out
    }

    /// Solves `[M A_f; A_fᵀ 0] [Δy; Δf] = [h; r_f]` with iterative refinement
    /// against the unregularized `M`.
    fn solve_kkt(&self, fac: &Factorization, h: &[f64], rf: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut dy, mut df) = self.solve_kkt_once(fac, h, rf);
        let scale = norm(h) + norm(rf);
        for _ in 0..3 {
            let mdy = self.apply_m(fac, &dy);
            let mut r1 = vec![0.0; self.m];
            for i in 0..self.m {
                r1[i] = h[i] - mdy[i];
            }
            for (j, col) in self.free_cols.iter().enumerate() {
                for &(i, a) in col {
                    r1[i] -= a * df[j];
                }
            }
            let atdy = self.apply_at_free(&dy);
            let r2: Vec<f64> = (0..self.k)
                .map(|j| if self.active_free[j] { rf[j] - atdy[j] } else { 0.0 })
                .collect();
            let rn = norm(&r1) + norm(&r2);
            if !(rn > 1e-15 * scale.max(1e-300)) {
                break;
            }
            let (cy, cf) = self.solve_kkt_once(fac, &r1, &r2);
            if cy.iter().chain(&cf).any(|v| !v.is_finite()) {
                break;
            }
            for i in 0..self.m {
                dy[i] += cy[i];
            }
            for j in 0..self.k {
                df[j] += cf[j];
            }
        }
        (dy, df)
    }

    fn solve_kkt_once(&self, fac: &Factorization, h: &[f64], rf: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u = self.solve_m_with(&fac.chol, h);
        if self.k == 0 {
            return (u, Vec::new());
        }
        let atu = self.apply_at_free(&u);
        let rhs = DVector::from_iterator(
            self.k,
            (0..self.k).map(|j| if self.active_free[j] { atu[j] - rf[j] } else { 0.0 }),
        );
        let df = fac.sf_chol.as_ref().expect("free factor").solve(&rhs);
        let kdf = &fac.k_mat * &df;
        let dy: Vec<f64> = (0..self.m).map(|i| u[i] - kdf[i]).collect();
        (dy, df.iter().cloned().collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        fac: &Factorization,
        x: &[Mat],
        zinv: &[Mat],
        rp: &[f64],
        rd: &[Mat],
        rf: &[f64],
        sigma_mu: f64,
        corr: Option<(&[Mat], &[Mat])>,
    ) -> Direction {
        let nb = self.sizes.len();
        let g: Vec<Mat> = (0..nb)
            .map(|j| {
                let n = self.sizes[j];
                let mut gj = &zinv[j] * sigma_mu - &x[j] - &x[j] * &rd[j] * &zinv[j];
                if let Some((dxa, dza)) = corr {
                    gj -= &dxa[j] * &dza[j] * &zinv[j];
                }
                debug_assert_eq!(gj.nrows(), n);
                gj
            })
            .collect();
        let gs: Vec<Mat> = g.iter().map(sym).collect();
        let zero_f = vec![0.0; self.k];
        let ag = self.apply_a(&gs, &zero_f);
        let h: Vec<f64> = (0..self.m).map(|i| rp[i] - ag[i]).collect();
        let (dy, df) = self.solve_kkt(fac, &h, rf);
        let aty = self.apply_at_psd(&dy);
        let dz: Vec<Mat> = (0..nb).map(|j| &rd[j] - &aty[j]).collect();
        let dx: Vec<Mat> = (0..nb).map(|j| sym(&(&g[j] + &x[j] * &aty[j] * &zinv[j]))).collect();
        Direction { dx, dz, dy, df }
    }

    fn step_lengths(&self, x: &[Mat], z: &[Mat], d: &Direction) -> (f64, f64) {
        let mut ap = f64::INFINITY;
        let mut ad = f64::INFINITY;
        for j in 0..self.sizes.len() {
            ap = ap.min(max_step(&x[j], &d.dx[j]));
            ad = ad.min(max_step(&z[j], &d.dz[j]));
        }
        (ap, ad)
    }

    fn farkas(&self, y: &[f64]) -> bool {
        let by = dot(&self.b, y);
        if !(by > 0.0) {
            return false;
        }
        let yb: Vec<f64> = y.iter().map(|v| v / by).collect();
        let tol = self.settings.infeasibility_tolerance;
        let atf = self.apply_at_free(&yb);
        if atf.iter().any(|v| v.abs() > tol) {
            return false;
        }
        let aty = self.apply_at_psd(&yb);
        aty.iter().all(|s| s.nrows() == 0 || min_eigenvalue(&(-s)) >= -tol)
    }

    fn run(&self) -> BackendResult {
        let nb = self.sizes.len();
        let nu: f64 = self.sizes.iter().sum::<usize>() as f64;
        let nmax = self.sizes.iter().cloned().max().unwrap_or(1) as f64;
        let bmax = self.b.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let cmax = self.c.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let xi = 10.0_f64.max(nmax.sqrt()).max((1.0 + bmax) / 2.0);
        let zeta = 10.0_f64.max(nmax.sqrt()).max(1.0 + cmax);
        let mut x: Vec<Mat> = self.sizes.iter().map(|&n| Mat::identity(n, n) * xi).collect();
        let mut z: Vec<Mat> = self.sizes.iter().map(|&n| Mat::identity(n, n) * zeta).collect();
        let mut y = vec![0.0; self.m];
        let mut f = vec![0.0; self.k];
        let bnorm = norm(&self.b);
        let cnorm = norm(&self.c);
        let mut status = BackendStatus::MaxIterations;
        let mut stall = 0;
        let mut iterations = 0;
        let mut best: Option<(f64, usize, Vec<Mat>, Vec<f64>, Vec<f64>)> = None;

        for it in 0..self.settings.max_iterations {
            iterations = it;
            let ax = self.apply_a(&x, &f);
            let rp: Vec<f64> = (0..self.m).map(|i| self.b[i] - ax[i]).collect();
            let aty = self.apply_at_psd(&y);
            let rd: Vec<Mat> = (0..nb).map(|j| -&aty[j] - &z[j]).collect();
            let atf = self.apply_at_free(&y);
            let rf: Vec<f64> = (0..self.k).map(|j| self.c[j] - atf[j]).collect();
            let xz: f64 = (0..nb).map(|j| x[j].dot(&z[j])).sum();
            let mu = xz / nu.max(1.0);
            let pobj = dot(&self.c, &f);
            let dobj = dot(&self.b, &y);
            let relp = norm(&rp) / (1.0 + bnorm);
            let rdn = (rd.iter().map(|m| m.norm_squared()).sum::<f64>() + dot(&rf, &rf)).sqrt();
            let reld = rdn / (1.0 + cnorm);
            let relgap = (pobj - dobj).abs().max(xz) / (1.0 + pobj.abs() + dobj.abs());
            log::trace!(
                "ipm it {it}: pobj {pobj:.6e} dobj {dobj:.6e} relp {relp:.2e} reld {reld:.2e} gap {relgap:.2e} |X| {:.2e} |f| {:.2e} |y| {:.2e}",
                x.iter().map(|m| m.amax()).fold(0.0, f64::max),
                f.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
                y.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
            );
            let tol = self.settings.tolerance;
            if relp <= tol && reld <= tol && relgap <= tol {
                status = BackendStatus::Converged;
                best = None;
                break;
            }
            if self.farkas(&y) {
                status = BackendStatus::PrimalInfeasible;
                break;
            }
            let merit = relp.max(reld).max(relgap);
            if !merit.is_finite() {
                status = BackendStatus::Stalled;
                break;
            }
            match &best {
                Some((bm, bit, ..)) if merit >= *bm => {
                    if it - bit > 10 {
                        status = BackendStatus::Stalled;
                        break;
                    }
                }
                _ => best = Some((merit, it, x.clone(), y.clone(), f.clone())),
            }

            let zinv: Vec<Mat> = z.iter().map(inverse_spd).collect();
            let Some(fac) = self.factorize(&x, &zinv) else {
                log::debug!("ipm it {it}: Schur complement not factorizable");
                status = BackendStatus::Stalled;
                break;
            };
            let pred = self.direction(&fac, &x, &zinv, &rp, &rd, &rf, 0.0, None);
            let (ap, ad) = self.step_lengths(&x, &z, &pred);
            let ap1 = ap.min(1.0);
            let ad1 = ad.min(1.0);
            let xz_aff: f64 = (0..nb)
                .map(|j| (&x[j] + &pred.dx[j] * ap1).dot(&(&z[j] + &pred.dz[j] * ad1)))
                .sum();
            let mu_aff = xz_aff / nu.max(1.0);
            let sigma = if mu > 0.0 { (mu_aff / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };
            let corr = self.direction(
                &fac,
                &x,
                &zinv,
                &rp,
                &rd,
                &rf,
                sigma * mu,
                Some((&pred.dx, &pred.dz)),
            );
            let (ap, ad) = self.step_lengths(&x, &z, &corr);
            let gamma = 0.9 + 0.09 * ap1.min(ad1);
            let ap = (gamma * ap).min(1.0);
            let ad = (gamma * ad).min(1.0);
            if ap < 1e-10 && ad < 1e-10 {
                stall += 1;
                if stall >= 3 {
                    status = BackendStatus::Stalled;
                    break;
                }
            } else {
                stall = 0;
            }
            for j in 0..nb {
                x[j] += &corr.dx[j] * ap;
                z[j] += &corr.dz[j] * ad;
                x[j] = sym(&x[j]);
                z[j] = sym(&z[j]);
            }
            for j in 0..self.k {
                f[j] += ap * corr.df[j];
            }
            for i in 0..self.m {
                y[i] += ad * corr.dy[i];
            }
            iterations = it + 1;
        }

        if status != BackendStatus::PrimalInfeasible {
            if let Some((merit, it, bx, by, bf)) = best {
                log::debug!("ipm: not converged, returning iterate {it} (merit {merit:.2e})");
                x = bx;
                y = by;
                f = bf;
            }
        }
        let dual: Vec<f64> = y.iter().zip(&self.scale).map(|(v, s)| v * s).collect();
        BackendResult {
            status,
            primal_objective: dot(&self.c, &f),
            dual_objective: dot(&self.b, &y),
            free: f,
            blocks: x,
            dual,
            iterations,
        }
    }
}
