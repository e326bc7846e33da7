//! Boxes, semi-algebraic sets, uniform partitions and the unsafe-set slabs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::Polynomial;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box bounds have different lengths ({lower} vs {upper})")]
    Length { lower: usize, upper: usize },
    #[error("empty box: lower[{axis}] = {lower} > upper[{axis}] = {upper}")]
    Empty { axis: usize, lower: f64, upper: f64 },
    #[error("non-finite box bound on axis {0}")]
    NonFinite(usize),
    #[error("partition width on axis {axis} must be positive, got {width}")]
    Width { axis: usize, width: f64 },
    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },
}

/// Axis-aligned closed box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperbox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Hyperbox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, GeometryError> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.lower.len() != self.upper.len() {
            return Err(GeometryError::Length { lower: self.lower.len(), upper: self.upper.len() });
        }
        for (axis, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(GeometryError::NonFinite(axis));
            }
            if l > u {
                return Err(GeometryError::Empty { axis, lower: l, upper: u });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool, GeometryError> {
        if x.len() != self.dim() {
            return Err(GeometryError::Arity { expected: self.dim(), got: x.len() });
        }
        Ok(x.iter().zip(&self.lower).zip(&self.upper).all(|((&xi, &l), &u)| l <= xi && xi <= u))
    }

    pub fn contains_box(&self, other: &Hyperbox) -> bool {
        other.dim() == self.dim()
            && other.lower.iter().zip(&self.lower).all(|(o, s)| o >= s)
            && other.upper.iter().zip(&self.upper).all(|(o, s)| o <= s)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    /// All `2^n` corners, in binary-counter order (axis 0 fastest).
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| if mask >> i & 1 == 1 { self.upper[i] } else { self.lower[i] })
                    .collect()
            })
            .collect()
    }

    /// Splits along `axis` at the midpoint.
    pub fn bisect(&self, axis: usize) -> (Hyperbox, Hyperbox) {
        let mid = 0.5 * (self.lower[axis] + self.upper[axis]);
        let mut a = self.clone();
        let mut b = self.clone();
        a.upper[axis] = mid;
        b.lower[axis] = mid;
        (a, b)
    }
}

/// `{x : h_i(x) >= 0 for all i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiAlgebraicSet {
    arity: usize,
    constraints: Vec<Polynomial>,
}

impl SemiAlgebraicSet {
    pub fn new(arity: usize, constraints: Vec<Polynomial>) -> Result<Self, GeometryError> {
        if let Some(h) = constraints.iter().find(|h| h.arity() != arity) {
            return Err(GeometryError::Arity { expected: arity, got: h.arity() });
        }
        Ok(Self { arity, constraints })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn constraints(&self) -> &[Polynomial] {
        &self.constraints
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool, GeometryError> {
        if x.len() != self.arity {
            return Err(GeometryError::Arity { expected: self.arity, got: x.len() });
        }
        Ok(self.constraints.iter().all(|h| h.eval_unchecked(x) >= 0.0))
    }

    /// Moves every constraint into a polynomial space of arity `new_arity`,
    /// with this set's variables starting at `offset`.
    pub fn embed(&self, new_arity: usize, offset: usize) -> Self {
        Self {
            arity: new_arity,
            constraints: self.constraints.iter().map(|h| h.embed(new_arity, offset)).collect(),
        }
    }
}

/// One quadratic `(x_i − l_i)(u_i − x_i) >= 0` per axis.
pub fn box_to_polynomials(b: &Hyperbox) -> SemiAlgebraicSet {
    let n = b.dim();
    let constraints = (0..n)
        .map(|i| {
            let mut a = vec![0.0; n];
            a[i] = 1.0;
            let lo = Polynomial::affine(&a, -b.lower[i]);
            a[i] = -1.0;
            let hi = Polynomial::affine(&a, b.upper[i]);
            lo.mul(&hi).expect("same arity")
        })
        .collect();
    SemiAlgebraicSet { arity: n, constraints }
}

/// Half-space slabs `{x_i >= safe.upper_i}` and `{x_i <= safe.lower_i}`
/// whose union covers the complement of `safe`. Slabs on faces shared with
/// the state space are still emitted; the state space only documents where
/// the system is modelled.
pub fn unsafe_decomposition(state_space: &Hyperbox, safe: &Hyperbox) -> Vec<SemiAlgebraicSet> {
    debug_assert!(state_space.contains_box(safe));
    let n = safe.dim();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut a = vec![0.0; n];
        a[i] = 1.0;
        out.push(SemiAlgebraicSet {
            arity: n,
            constraints: vec![Polynomial::affine(&a, -safe.upper[i])],
        });
        a[i] = -1.0;
        out.push(SemiAlgebraicSet {
            arity: n,
            constraints: vec![Polynomial::affine(&a, safe.lower[i])],
        });
    }
    out
}

/// Uniform grid over a box; regions are stored in lexicographic order with
/// the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub regions: Vec<Hyperbox>,
    pub widths: Vec<f64>,
    pub source: Hyperbox,
    pub counts: Vec<usize>,
}

fn cells_along(lower: f64, upper: f64, width: f64) -> usize {
    let span = upper - lower;
    if span <= 0.0 {
        return 1;
    }
    let raw = span / width;
    // Guard against 1.0/0.25 landing at 4.000000000000001.
    let rounded = raw.round();
    if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
        (rounded as usize).max(1)
    } else {
        raw.ceil() as usize
    }
}

pub fn partition_uniform(source: &Hyperbox, widths: &[f64]) -> Result<Partition, GeometryError> {
    source.validate()?;
    if widths.len() != source.dim() {
        return Err(GeometryError::Arity { expected: source.dim(), got: widths.len() });
    }
    for (axis, &w) in widths.iter().enumerate() {
        if !(w > 0.0) || !w.is_finite() {
            return Err(GeometryError::Width { axis, width: w });
        }
    }
    let n = source.dim();
    let counts: Vec<usize> = (0..n).map(|i| cells_along(source.lower[i], source.upper[i], widths[i])).collect();
    let axis_cells: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| {
            (0..counts[i])
                .map(|k| {
                    let lo = source.lower[i] + k as f64 * widths[i];
                    let hi = if k + 1 == counts[i] {
                        source.upper[i]
                    } else {
                        (source.lower[i] + (k + 1) as f64 * widths[i]).min(source.upper[i])
                    };
                    (lo, hi)
                })
                .collect()
        })
        .collect();
    let total: usize = counts.iter().product();
    let mut regions = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let lower = (0..n).map(|i| axis_cells[i][idx[i]].0).collect();
        let upper = (0..n).map(|i| axis_cells[i][idx[i]].1).collect();
        regions.push(Hyperbox { lower, upper });
        for i in (0..n).rev() {
            idx[i] += 1;
            if idx[i] < counts[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Ok(Partition {
        regions,
        widths: widths.to_vec(),
        source: source.clone(),
        counts,
    })
}

impl Partition {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Index of the unique region whose half-open cell `[l, u)` holds `x`;
    /// the global upper face of the source box counts as closed.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.source.dim() || !self.source.contains(x).unwrap_or(false) {
            return None;
        }
        let mut flat = 0usize;
        for i in 0..x.len() {
            let mut k = ((x[i] - self.source.lower[i]) / self.widths[i]).floor() as isize;
            k = k.clamp(0, self.counts[i] as isize - 1);
            let mut k = k as usize;
            // Repair floating-point misplacement near cell faces.
            let cell_lo = |k: usize| self.source.lower[i] + k as f64 * self.widths[i];
            while k > 0 && x[i] < cell_lo(k) {
                k -= 1;
            }
            while k + 1 < self.counts[i] && x[i] >= cell_lo(k + 1) {
                k += 1;
            }
            flat = flat * self.counts[i] + k;
        }
        Some(flat)
    }

    /// CSV with columns `region_id, l_1..l_n, u_1..u_n`.
    pub fn to_csv(&self) -> String {
        let n = self.source.dim();
        let mut out = String::from("region_id");
        for i in 1..=n {
            out.push_str(&format!(",l_{i}"));
        }
        for i in 1..=n {
            out.push_str(&format!(",u_{i}"));
        }
        out.push('\n');
        for (id, r) in self.regions.iter().enumerate() {
            out.push_str(&id.to_string());
            for v in r.lower.iter().chain(&r.upper) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(l: &[f64], u: &[f64]) -> Hyperbox {
        Hyperbox::new(l.to_vec(), u.to_vec()).unwrap()
    }

    #[test]
    fn grid_counts() {
        let p = partition_uniform(&bx(&[0.0, 0.0], &[1.0, 1.0]), &[0.5, 0.5]).unwrap();
        assert_eq!(p.len(), 4);
        let p = partition_uniform(&bx(&[-1.0, -1.0], &[1.0, 1.0]), &[0.25, 0.5]).unwrap();
        assert_eq!(p.len(), 32);
        assert_eq!(p.counts, vec![8, 4]);
    }

    #[test]
    fn truncated_last_cell_tiles() {
        let p = partition_uniform(&bx(&[0.0], &[1.0]), &[0.3]).unwrap();
        assert_eq!(p.len(), 4);
        let last = p.regions.last().unwrap();
        assert!((last.lower[0] - 0.9).abs() < 1e-12);
        assert_eq!(last.upper[0], 1.0);
        let total: f64 = p.regions.iter().map(Hyperbox::volume).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for w in p.regions.windows(2) {
            assert_eq!(w[0].upper[0], w[1].lower[0]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Hyperbox::new(vec![1.0], vec![0.0]).is_err());
        assert!(partition_uniform(&bx(&[0.0], &[1.0]), &[0.0]).is_err());
        assert!(partition_uniform(&bx(&[0.0], &[1.0]), &[-0.1]).is_err());
    }

    #[test]
    fn locate_is_a_function() {
        let src = bx(&[-1.0, -1.0], &[1.0, 1.0]);
        let p = partition_uniform(&src, &[0.3, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5000 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let id = p.locate(&x).unwrap();
            let r = &p.regions[id];
            for i in 0..2 {
                assert!(r.lower[i] <= x[i]);
                assert!(x[i] < r.upper[i] || x[i] == src.upper[i]);
            }
            assert!(r.contains(&x).unwrap());
        }
        assert_eq!(p.locate(&[1.0, 1.0]), Some(p.len() - 1));
        assert_eq!(p.locate(&[-1.0, -1.0]), Some(0));
        assert_eq!(p.locate(&[1.01, 0.0]), None);
    }

    #[test]
    fn quadratic_encodings() {
        let s = box_to_polynomials(&bx(&[0.0], &[1.0]));
        assert_eq!(s.constraints()[0], Polynomial::parse("-1.0*x1^2 + 1.0*x1", 1).unwrap());
        let s = box_to_polynomials(&bx(&[-1.0, -1.0], &[1.0, 1.0]));
        assert_eq!(s.constraints().len(), 2);
        assert_eq!(s.constraints()[1], Polynomial::parse("-1.0*x2^2 + 1.0", 2).unwrap());
        let s = box_to_polynomials(&bx(&[0.4], &[0.6]));
        let h = &s.constraints()[0];
        assert!((h.eval(&[0.5]).unwrap() - 0.01).abs() < 1e-12);
        assert!((h.eval(&[0.3]).unwrap() + 0.03).abs() < 1e-12);
    }

    #[test]
    fn quadratic_encoding_agrees_with_interval_test() {
        let b = bx(&[-0.3, 0.1, -2.0], &[0.7, 0.4, 1.0]);
        let s = box_to_polynomials(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.5..1.5)).collect();
            assert_eq!(s.contains(&x).unwrap(), b.contains(&x).unwrap());
        }
    }

    #[test]
    fn membership_boundaries() {
        let b = bx(&[0.0], &[1.0]);
        assert!(b.contains(&[0.0]).unwrap());
        assert!(!b.contains(&[-1e-12]).unwrap());
        assert!(b.contains(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn unsafe_slabs() {
        let safe = bx(&[-1.0], &[1.0]);
        let slabs = unsafe_decomposition(&bx(&[-2.0], &[2.0]), &safe);
        assert_eq!(slabs.len(), 2);
        assert_eq!(slabs[0].constraints()[0], Polynomial::parse("1.0*x1 - 1.0", 1).unwrap());
        assert_eq!(slabs[1].constraints()[0], Polynomial::parse("-1.0*x1 - 1.0", 1).unwrap());

        let safe2 = bx(&[-1.0, -1.0], &[1.0, 1.0]);
        let slabs2 = unsafe_decomposition(&bx(&[-2.0, -2.0], &[2.0, 2.0]), &safe2);
        assert_eq!(slabs2.len(), 4);
        let hits: Vec<bool> = slabs2.iter().map(|s| s.contains(&[1.5, 0.0]).unwrap()).collect();
        assert_eq!(hits, vec![true, false, false, false]);
        assert!(!box_to_polynomials(&safe2).contains(&[1.5, 0.0]).unwrap());

        let state = bx(&[-2.0, -2.0], &[2.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5000 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..=2.0)).collect();
            assert!(safe2.contains(&x).unwrap() || slabs2.iter().any(|s| s.contains(&x).unwrap()));
            assert!(state.contains(&x).unwrap());
        }
    }

    #[test]
    fn csv_dump() {
        let p = partition_uniform(&bx(&[0.0], &[1.0]), &[0.5]).unwrap();
        assert_eq!(p.to_csv(), "region_id,l_1,u_1\n0,0.0,0.5\n1,0.5,1.0\n");
    }
}
