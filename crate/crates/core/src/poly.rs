//! Sparse multivariate polynomials with dense exponent vectors.
//!
//! Besides ring arithmetic this module carries the Gaussian expectation
//! operator: for `v ~ N(0, diag(σ²))` the map `B ↦ E[B(y + v)]` is linear in
//! `B` and its image is again a polynomial in `y`, which is what lets the
//! martingale condition of a barrier certificate be written as an SOS
//! constraint.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Coefficients with magnitude below this are dropped after every operation.
pub const ZERO_THRESHOLD: f64 = 1e-14;

/// Largest moment order accepted by [`gaussian_moment`].
pub const MAX_MOMENT_ORDER: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("moment order {0} exceeds the supported maximum of {MAX_MOMENT_ORDER}")]
    MomentOrder(u32),
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("cannot parse polynomial: {0}")]
    Parse(String),
}

/// Exponent vector of a monomial, one entry per variable.
pub type Exponents = Vec<u32>;

/// Total degree of an exponent vector.
pub fn monomial_degree(e: &[u32]) -> u32 {
    e.iter().sum()
}

/// All exponent vectors of `arity` variables with total degree `<= degree`,
/// in graded-lex order (by degree, then lexicographically descending in the
/// first variable, so `1, x1, x2, x1^2, x1 x2, x2^2, ...`).
pub fn monomials_up_to(arity: usize, degree: u32) -> Vec<Exponents> {
    let mut out = Vec::new();
    for d in 0..=degree {
        let mut cur = vec![0u32; arity];
        fill_degree(&mut out, &mut cur, 0, d);
    }
    out
}

fn fill_degree(out: &mut Vec<Exponents>, cur: &mut Vec<u32>, idx: usize, remaining: u32) {
    let arity = cur.len();
    if arity == 0 {
        if remaining == 0 {
            out.push(Vec::new());
        }
        return;
    }
    if idx == arity - 1 {
        cur[idx] = remaining;
        out.push(cur.clone());
        cur[idx] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        cur[idx] = k;
        fill_degree(out, cur, idx + 1, remaining - k);
    }
    cur[idx] = 0;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    arity: usize,
    terms: BTreeMap<Exponents, f64>,
}

impl Polynomial {
    pub fn zero(arity: usize) -> Self {
        Self {
            arity,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(arity: usize, c: f64) -> Self {
        let mut p = Self::zero(arity);
        p.add_term(vec![0; arity], c);
        p
    }

    /// The coordinate polynomial `x_i` (zero-based index).
    pub fn var(arity: usize, i: usize) -> Self {
        assert!(i < arity, "variable index {i} out of range for arity {arity}");
        let mut e = vec![0; arity];
        e[i] = 1;
        Self::monomial(e, 1.0)
    }

    pub fn monomial(exponents: Exponents, coeff: f64) -> Self {
        let mut p = Self::zero(exponents.len());
        p.add_term(exponents, coeff);
        p
    }

    /// Affine polynomial `Σ a_i x_i + c`.
    pub fn affine(coeffs: &[f64], c: f64) -> Self {
        let n = coeffs.len();
        let mut p = Self::constant(n, c);
        for (i, &a) in coeffs.iter().enumerate() {
            let mut e = vec![0; n];
            e[i] = 1;
            p.add_term(e, a);
        }
        p
    }

    pub fn from_terms(arity: usize, terms: impl IntoIterator<Item = (Exponents, f64)>) -> Result<Self, PolyError> {
        let mut p = Self::zero(arity);
        for (e, c) in terms {
            if e.len() != arity {
                return Err(PolyError::Arity { expected: arity, got: e.len() });
            }
            p.add_term(e, c);
        }
        Ok(p)
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn terms(&self) -> &BTreeMap<Exponents, f64> {
        &self.terms
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, e: &[u32]) -> f64 {
        self.terms.get(e).copied().unwrap_or(0.0)
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| monomial_degree(e)).max().unwrap_or(0)
    }

    /// Adds `c·x^e` in place, pruning the result if it cancels.
    pub fn add_term(&mut self, e: Exponents, c: f64) {
        debug_assert_eq!(e.len(), self.arity);
        match self.terms.entry(e) {
            Entry::Vacant(v) => {
                if c.abs() >= ZERO_THRESHOLD {
                    v.insert(c);
                }
            }
            Entry::Occupied(mut o) => {
                let s = *o.get() + c;
                if s.abs() < ZERO_THRESHOLD {
                    o.remove();
                } else {
                    *o.get_mut() = s;
                }
            }
        }
    }

    fn check_arity(&self, other: &Self) -> Result<(), PolyError> {
        if self.arity != other.arity {
            return Err(PolyError::Arity { expected: self.arity, got: other.arity });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, PolyError> {
        self.check_arity(other)?;
        let mut out = self.clone();
        for (e, &c) in &other.terms {
            out.add_term(e.clone(), c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, PolyError> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = Self::zero(self.arity);
        for (e, &v) in &self.terms {
            out.add_term(e.clone(), v * c);
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Result<Self, PolyError> {
        self.check_arity(other)?;
        let mut acc: BTreeMap<Exponents, f64> = BTreeMap::new();
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &other.terms {
                let e: Exponents = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                *acc.entry(e).or_insert(0.0) += ca * cb;
            }
        }
        Ok(Self::from_map(self.arity, acc))
    }

    pub fn pow(&self, k: u32) -> Self {
        let mut out = Self::constant(self.arity, 1.0);
        for _ in 0..k {
            out = out.mul(self).expect("same arity");
        }
        out
    }

    fn from_map(arity: usize, mut terms: BTreeMap<Exponents, f64>) -> Self {
        terms.retain(|_, v| v.abs() >= ZERO_THRESHOLD);
        Self { arity, terms }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, PolyError> {
        if x.len() != self.arity {
            return Err(PolyError::Arity { expected: self.arity, got: x.len() });
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, &c)| c * e.iter().zip(x).map(|(&k, &xi)| xi.powi(k as i32)).product::<f64>())
            .sum()
    }

    /// Returns `p(M z + c)` where `M` has `arity` rows; the result has one
    /// variable per column of `M`.
    pub fn substitute_affine(&self, m: &[Vec<f64>], c: &[f64]) -> Result<Self, PolyError> {
        if m.len() != self.arity || c.len() != self.arity {
            return Err(PolyError::Dimension(format!(
                "substitution needs {} rows, got {} rows and offset of length {}",
                self.arity,
                m.len(),
                c.len()
            )));
        }
        let new_arity = m.first().map_or(0, Vec::len);
        if m.iter().any(|row| row.len() != new_arity) {
            return Err(PolyError::Dimension("ragged substitution matrix".into()));
        }
        let images: Vec<Polynomial> = m
            .iter()
            .zip(c)
            .map(|(row, &ci)| Polynomial::affine(row, ci))
            .collect();
        let mut powers: Vec<Vec<Polynomial>> = images
            .iter()
            .map(|p| vec![Polynomial::constant(new_arity, 1.0), p.clone()])
            .collect();
        let mut out = Polynomial::zero(new_arity);
        for (e, &coef) in &self.terms {
            let mut term = Polynomial::constant(new_arity, coef);
            for (i, &k) in e.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                while powers[i].len() <= k as usize {
                    let next = powers[i].last().unwrap().mul(&images[i])?;
                    powers[i].push(next);
                }
                term = term.mul(&powers[i][k as usize])?;
            }
            out = out.add(&term)?;
        }
        Ok(out)
    }

    /// Re-embeds this polynomial into a larger variable space: variable `i`
    /// becomes variable `offset + i` of a polynomial of arity `new_arity`.
    pub fn embed(&self, new_arity: usize, offset: usize) -> Self {
        assert!(offset + self.arity <= new_arity);
        let mut out = Self::zero(new_arity);
        for (e, &c) in &self.terms {
            let mut ne = vec![0; new_arity];
            ne[offset..offset + self.arity].copy_from_slice(e);
            out.add_term(ne, c);
        }
        out
    }

    pub fn partial(&self, i: usize) -> Self {
        let mut out = Self::zero(self.arity);
        for (e, &c) in &self.terms {
            if e[i] == 0 {
                continue;
            }
            let mut ne = e.clone();
            ne[i] -= 1;
            out.add_term(ne, c * f64::from(e[i]));
        }
        out
    }

    pub fn gradient(&self) -> Vec<Self> {
        (0..self.arity).map(|i| self.partial(i)).collect()
    }

    /// `E[p(y + v)]` for independent `v_i ~ N(0, variances[i])`, as a
    /// polynomial in `y`.
    pub fn expect_shifted(&self, variances: &[f64]) -> Result<Self, PolyError> {
        if variances.len() != self.arity {
            return Err(PolyError::Arity { expected: self.arity, got: variances.len() });
        }
        let max_deg = self.terms.keys().flat_map(|e| e.iter().copied()).max().unwrap_or(0);
        let moments: Vec<Vec<f64>> = variances
            .iter()
            .map(|&s2| (0..=max_deg).map(|d| gaussian_moment(d, s2)).collect())
            .collect::<Result<_, _>>()?;
        let mut acc: BTreeMap<Exponents, f64> = BTreeMap::new();
        for (e, &c) in &self.terms {
            // Per-axis binomial expansion, combined as a product over axes.
            let mut partial: Vec<(Exponents, f64)> = vec![(Vec::with_capacity(self.arity), c)];
            for (i, &d) in e.iter().enumerate() {
                let mut next = Vec::new();
                for (pe, pc) in &partial {
                    for k in (0..=d).step_by(2) {
                        let m = moments[i][k as usize];
                        if m == 0.0 {
                            continue;
                        }
                        let mut ne = pe.clone();
                        ne.push(d - k);
                        next.push((ne, pc * binomial(d, k) * m));
                    }
                }
                partial = next;
            }
            for (ne, nc) in partial {
                *acc.entry(ne).or_insert(0.0) += nc;
            }
        }
        Ok(Self::from_map(self.arity, acc))
    }

    /// Parses the text form produced by `Display` (variables `x1..xn`).
    pub fn parse(s: &str, arity: usize) -> Result<Self, PolyError> {
        let mut p = Self::zero(arity);
        let s = s.trim();
        if s == "0" {
            return Ok(p);
        }
        // Split into signed terms on top-level '+'/'-' that are not part of
        // an exponent marker in a float literal.
        let bytes = s.as_bytes();
        let mut terms = Vec::new();
        let mut start = 0;
        for i in 1..bytes.len() {
            let ch = bytes[i];
            if (ch == b'+' || ch == b'-') && bytes[i - 1] == b' ' {
                terms.push(s[start..i].trim());
                start = i;
            }
        }
        terms.push(s[start..].trim());
        for t in terms {
            let (sign, body) = match t.as_bytes().first() {
                Some(b'+') => (1.0, t[1..].trim()),
                Some(b'-') if t.len() > 1 && t.as_bytes()[1] == b' ' => (-1.0, t[1..].trim()),
                _ => (1.0, t),
            };
            let mut coeff = sign;
            let mut e = vec![0u32; arity];
            for (k, factor) in body.split('*').enumerate() {
                let factor = factor.trim();
                if let Some(rest) = factor.strip_prefix('x') {
                    let (idx, pow) = match rest.split_once('^') {
                        Some((i, p)) => (i, p.parse::<u32>().map_err(|_| PolyError::Parse(t.to_string()))?),
                        None => (rest, 1),
                    };
                    let idx: usize = idx.parse().map_err(|_| PolyError::Parse(t.to_string()))?;
                    if idx == 0 || idx > arity {
                        return Err(PolyError::Parse(format!("variable x{idx} outside arity {arity}")));
                    }
                    e[idx - 1] += pow;
                } else if k == 0 {
                    coeff *= factor.parse::<f64>().map_err(|_| PolyError::Parse(t.to_string()))?;
                } else {
                    return Err(PolyError::Parse(t.to_string()));
                }
            }
            p.add_term(e, coeff);
        }
        Ok(p)
    }

    /// Terms ordered by descending degree, then descending exponents.
    pub fn sorted_terms(&self) -> Vec<(&Exponents, f64)> {
        let mut v: Vec<_> = self.terms.iter().map(|(e, &c)| (e, c)).collect();
        v.sort_by(|(a, _), (b, _)| monomial_degree(b).cmp(&monomial_degree(a)).then_with(|| b.cmp(a)));
        v
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (e, c)) in self.sorted_terms().into_iter().enumerate() {
            let mag = c.abs();
            if k == 0 {
                if c < 0.0 {
                    write!(f, "-")?;
                }
            } else if c < 0.0 {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            write!(f, "{mag:?}")?;
            for (i, &p) in e.iter().enumerate() {
                match p {
                    0 => {}
                    1 => write!(f, "*x{}", i + 1)?,
                    _ => write!(f, "*x{}^{}", i + 1, p)?,
                }
            }
        }
        Ok(())
    }
}

impl FromStr for Polynomial {
    type Err = PolyError;

    /// Infers the arity from the largest variable index present.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut arity = 0usize;
        let b = s.as_bytes();
        let mut i = 0;
        while i < b.len() {
            if b[i] == b'x' {
                let j = i + 1 + b[i + 1..].iter().take_while(|c| c.is_ascii_digit()).count();
                if let Ok(idx) = s[i + 1..j].parse::<usize>() {
                    arity = arity.max(idx);
                }
                i = j;
            } else {
                i += 1;
            }
        }
        Self::parse(s, arity)
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * f64::from(n - i) / f64::from(i + 1);
    }
    r.round()
}

/// Central moment `E[v^d]` of `v ~ N(0, σ²)`: zero for odd `d`,
/// `σ^d (d−1)!!` for even `d`.
pub fn gaussian_moment(d: u32, variance: f64) -> Result<f64, PolyError> {
    if d > MAX_MOMENT_ORDER {
        return Err(PolyError::MomentOrder(d));
    }
    if !(variance >= 0.0) {
        return Err(PolyError::NegativeVariance(variance));
    }
    if d % 2 == 1 {
        return Ok(0.0);
    }
    let mut dfact = 1.0f64;
    let mut k = d.saturating_sub(1);
    while k > 1 {
        dfact *= f64::from(k);
        k -= 2;
    }
    Ok(variance.powi((d / 2) as i32) * dfact)
}

/// Per-axis table of Gaussian central moments up to a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    moments: Vec<Vec<f64>>,
}

impl MomentTable {
    pub fn new(variances: &[f64], max_order: u32) -> Result<Self, PolyError> {
        let moments = variances
            .iter()
            .map(|&s2| (0..=max_order).map(|d| gaussian_moment(d, s2)).collect())
            .collect::<Result<_, _>>()?;
        Ok(Self { moments })
    }

    pub fn get(&self, axis: usize, order: u32) -> f64 {
        self.moments[axis][order as usize]
    }

    pub fn dims(&self) -> usize {
        self.moments.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(s: &str, n: usize) -> Polynomial {
        Polynomial::parse(s, n).unwrap()
    }

    #[test]
    fn difference_of_squares() {
        let a = p("1.0*x1 + 1.0", 1);
        let b = p("1.0*x1 - 1.0", 1);
        assert_eq!(a.mul(&b).unwrap(), p("1.0*x1^2 - 1.0", 1));
    }

    #[test]
    fn cancellation_leaves_empty_map() {
        let a = p("3.0*x1*x2 - 0.5", 2);
        let z = a.add(&a.scale(-1.0)).unwrap();
        assert!(z.is_zero());
        assert_eq!(z.num_terms(), 0);
    }

    #[test]
    fn square_of_sum() {
        let s = p("1.0*x1 + 1.0*x2", 2);
        assert_eq!(s.mul(&s).unwrap(), p("1.0*x1^2 + 2.0*x1*x2 + 1.0*x2^2", 2));
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let a = Polynomial::var(1, 0);
        let b = Polynomial::var(2, 0);
        assert!(matches!(a.add(&b), Err(PolyError::Arity { .. })));
        assert!(a.eval(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn eval_basic() {
        assert_eq!(p("1.0*x1^2 - 1.0", 1).eval(&[2.0]).unwrap(), 3.0);
        assert_eq!(Polynomial::zero(3).eval(&[1.0, -4.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn eval_matches_term_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis = monomials_up_to(3, 4);
        let poly = Polynomial::from_terms(3, basis.iter().map(|e| (e.clone(), rng.gen_range(-1.0..1.0)))).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut oracle = 0.0;
            let mut scale = 0.0;
            for (e, c) in poly.terms() {
                let mut m = 1.0;
                for (i, &k) in e.iter().enumerate() {
                    for _ in 0..k {
                        m *= x[i];
                    }
                }
                oracle += c * m;
                scale += (c * m).abs();
            }
            let got = poly.eval(&x).unwrap();
            assert!((got - oracle).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn substitution_examples() {
        let sq = p("1.0*x1^2", 1);
        assert_eq!(sq.substitute_affine(&[vec![1.0]], &[1.0]).unwrap(), p("1.0*x1^2 + 2.0*x1 + 1.0", 1));
        let prod = p("1.0*x1*x2", 2);
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(prod.substitute_affine(&id, &[0.0, 0.0]).unwrap(), prod);
        let cube = p("1.0*x1^3", 1);
        assert_eq!(cube.substitute_affine(&[vec![2.0]], &[0.0]).unwrap(), p("8.0*x1^3", 1));
        assert!(cube.substitute_affine(&[vec![1.0], vec![1.0]], &[0.0]).is_err());
    }

    #[test]
    fn moments() {
        assert_eq!(gaussian_moment(0, 0.3).unwrap(), 1.0);
        assert_eq!(gaussian_moment(1, 0.04).unwrap(), 0.0);
        assert!((gaussian_moment(2, 0.04).unwrap() - 0.04).abs() < 1e-18);
        assert!((gaussian_moment(4, 0.04).unwrap() - 0.0048).abs() < 1e-16);
        assert_eq!(gaussian_moment(6, 1.0).unwrap(), 15.0);
        assert!(gaussian_moment(34, 1.0).is_err());
        let t = MomentTable::new(&[0.5, 2.0], 4).unwrap();
        assert_eq!(t.get(1, 4), 12.0);
        assert_eq!(t.get(0, 3), 0.0);
    }

    #[test]
    fn expectation_examples() {
        let y2 = p("1.0*x1^2", 1);
        assert_eq!(y2.expect_shifted(&[0.04]).unwrap(), p("1.0*x1^2 + 0.04", 1));
        let y = p("1.0*x1", 1);
        assert_eq!(y.expect_shifted(&[0.7]).unwrap(), y);
        let y4 = p("1.0*x1^4", 1);
        assert_eq!(y4.expect_shifted(&[1.0]).unwrap(), p("1.0*x1^4 + 6.0*x1^2 + 3.0", 1));
    }

    #[test]
    fn gradient_examples() {
        let bowl = p("1.0*x1^2 + 1.0*x2^2", 2);
        let g = bowl.gradient();
        assert_eq!(g[0], p("2.0*x1", 2));
        assert_eq!(g[1], p("2.0*x2", 2));
        assert!(Polynomial::constant(2, 5.0).gradient().iter().all(Polynomial::is_zero));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let basis = monomials_up_to(3, 4);
        let poly = Polynomial::from_terms(3, basis.iter().map(|e| (e.clone(), rng.gen_range(-1.0..1.0)))).unwrap();
        let grad = poly.gradient();
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..3 {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (poly.eval(&xp).unwrap() - poly.eval(&xm).unwrap()) / (2.0 * h);
                let an = grad[i].eval(&x).unwrap();
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn display_and_parse() {
        let q = p("1.0*x1^2*x2 - 0.5", 2);
        assert_eq!(q.to_string(), "1.0*x1^2*x2 - 0.5");
        assert_eq!("-2.5*x3 + 1e-7".parse::<Polynomial>().unwrap().arity(), 3);
        assert!(Polynomial::parse("1.0*y1", 1).is_err());
    }

    #[test]
    fn graded_basis() {
        let b = monomials_up_to(2, 2);
        assert_eq!(b, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(monomials_up_to(4, 2).len(), 15);
        assert_eq!(monomials_up_to(0, 3), vec![Vec::<u32>::new()]);
    }

    fn arb_poly(arity: usize, degree: u32) -> impl Strategy<Value = Polynomial> {
        let basis = monomials_up_to(arity, degree);
        let n = basis.len();
        prop::collection::vec(prop_oneof![Just(0.0), -3.0..3.0f64], n).prop_map(move |cs| {
            Polynomial::from_terms(arity, basis.iter().cloned().zip(cs)).unwrap()
        })
    }

    fn close(a: &Polynomial, b: &Polynomial) -> bool {
        let d = a.sub(b).unwrap();
        let scale = a.terms().values().chain(b.terms().values()).fold(1.0f64, |m, v| m.max(v.abs()));
        d.terms().values().all(|v| v.abs() <= 1e-12 * scale)
    }

    proptest! {
        #[test]
        fn ring_laws(a in arb_poly(2, 3), b in arb_poly(2, 3), c in arb_poly(2, 2)) {
            prop_assert!(close(&a.add(&b).unwrap(), &b.add(&a).unwrap()));
            prop_assert!(close(&a.mul(&b).unwrap(), &b.mul(&a).unwrap()));
            prop_assert!(close(&a.mul(&b).unwrap().mul(&c).unwrap(), &a.mul(&b.mul(&c).unwrap()).unwrap()));
            prop_assert!(close(
                &a.mul(&b.add(&c).unwrap()).unwrap(),
                &a.mul(&b).unwrap().add(&a.mul(&c).unwrap()).unwrap()
            ));
        }

        #[test]
        fn substitution_commutes_with_eval(
            a in arb_poly(2, 4),
            m in prop::collection::vec(-1.5..1.5f64, 6),
            c in prop::collection::vec(-1.0..1.0f64, 2),
            z in prop::collection::vec(-1.0..1.0f64, 3),
        ) {
            let mat = vec![m[0..3].to_vec(), m[3..6].to_vec()];
            let s = a.substitute_affine(&mat, &c).unwrap();
            let x: Vec<f64> = (0..2).map(|i| mat[i].iter().zip(&z).map(|(p, q)| p * q).sum::<f64>() + c[i]).collect();
            let lhs = s.eval(&z).unwrap();
            let rhs = a.eval(&x).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }

        #[test]
        fn print_parse_round_trip(a in arb_poly(3, 3)) {
            let back = Polynomial::parse(&a.to_string(), 3).unwrap();
            prop_assert_eq!(back, a);
        }

        #[test]
        fn expectation_is_linear(a in arb_poly(2, 4), b in arb_poly(2, 4), s in 0.0..2.0f64) {
            let var = [0.3, 0.05];
            let lhs = a.scale(s).add(&b).unwrap().expect_shifted(&var).unwrap();
            let rhs = a.expect_shifted(&var).unwrap().scale(s).add(&b.expect_shifted(&var).unwrap()).unwrap();
            prop_assert!(close(&lhs, &rhs));
        }
    }
}
