//! Standard-form conic data produced by compiling an SOS program.
//!
//! ```text
//! minimize    c_free · f
//! subject to  A_free f + Σ_j <A_j, X_j> = b,   X_j ⪰ 0,   f free
//! ```
//!
//! Each row stores its PSD part as upper-triangular entries `(block, r, c, v)`
//! with `r <= c`, meaning the symmetric matrix with `v` at `(r, c)` and
//! `(c, r)`. Thus `<A, X> = Σ_{r=c} v X_rr + Σ_{r<c} 2 v X_rc`.

use std::fmt::Write as _;

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdEntry {
    pub block: usize,
    pub r: usize,
    pub c: usize,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicRow {
    pub free: Vec<(usize, f64)>,
    pub psd: Vec<PsdEntry>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicProblem {
    pub num_free: usize,
    pub blocks: Vec<usize>,
    pub rows: Vec<ConicRow>,
    pub c_free: Vec<f64>,
}

impl ConicProblem {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Row residuals `b − A_free f − 𝒜(X)`.
    pub fn residuals(&self, free: &[f64], blocks: &[DMatrix<f64>]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| {
                let mut s = row.rhs;
                for &(j, v) in &row.free {
                    s -= v * free[j];
                }
                for e in &row.psd {
                    let x = blocks[e.block][(e.r, e.c)];
                    s -= if e.r == e.c { e.v * x } else { 2.0 * e.v * x };
                }
                s
            })
            .collect()
    }

    pub fn objective(&self, free: &[f64]) -> f64 {
        self.c_free.iter().zip(free).map(|(c, f)| c * f).sum()
    }

    /// Scaled upper-triangular column index of `(r, c)` within a block of
    /// size `n` (column-major over the upper triangle).
    pub fn svec_index(n: usize, r: usize, c: usize) -> usize {
        debug_assert!(r <= c && c < n);
        c * (c + 1) / 2 + r
    }

    /// Text dump: a header with dimensions, then one triplet per nonzero.
    ///
    /// ```text
    /// conic 1
    /// free <k>
    /// blocks <n_1> <n_2> ...
    /// rows <m>
    /// c <col> <value>              (objective, free columns)
    /// a <row> f <col> <value>      (free-column coefficient)
    /// a <row> s <block> <svec> <value>   (svec coefficient, off-diagonals × √2)
    /// b <row> <value>
    /// ```
    pub fn to_sparse_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "conic 1");
        let _ = writeln!(out, "free {}", self.num_free);
        let sizes: Vec<String> = self.blocks.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "blocks {}", sizes.join(" "));
        let _ = writeln!(out, "rows {}", self.rows.len());
        for (j, c) in self.c_free.iter().enumerate() {
            if *c != 0.0 {
                let _ = writeln!(out, "c {j} {c:?}");
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in &row.free {
                let _ = writeln!(out, "a {i} f {j} {v:?}");
            }
            for e in &row.psd {
                let n = self.blocks[e.block];
                let v = if e.r == e.c { e.v } else { std::f64::consts::SQRT_2 * e.v };
                let _ = writeln!(out, "a {i} s {} {} {v:?}", e.block, Self::svec_index(n, e.r, e.c));
            }
            if row.rhs != 0.0 {
                let _ = writeln!(out, "b {i} {:?}", row.rhs);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendStatus {
    Converged,
    PrimalInfeasible,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct BackendResult {
    pub status: BackendStatus,
    pub free: Vec<f64>,
    pub blocks: Vec<DMatrix<f64>>,
    pub dual: Vec<f64>,
    pub iterations: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
}

/// A conic solver able to handle free columns and PSD blocks.
pub trait ConicBackend: Send + Sync {
    fn name(&self) -> &str;

    fn solve(&self, problem: &ConicProblem) -> BackendResult;

    /// Whether the backend spawns its own worker threads.
    fn is_internally_parallel(&self) -> bool {
        false
    }
}
