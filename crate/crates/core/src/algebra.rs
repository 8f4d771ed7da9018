//! Finite-dimensional C*-algebra arithmetic.
//!
//! An [`Element`] is a square complex matrix. The algebra operations are the
//! usual matrix ones, the involution is the conjugate transpose and the norm
//! is the operator (spectral) norm, i.e. the largest singular value. With
//! these choices `M_n(C)` satisfies the C*-identity `‖x*x‖ = ‖x‖²`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative tolerance of the spectral-norm iteration.
pub const DEFAULT_NORM_TOL: f64 = 1e-12;

/// Power-iteration steps per start vector before the Jacobi hand-off.
pub const NORM_POWER_STEPS: usize = 512;

/// Consecutive sub-tolerance but uncertified steps before the Jacobi hand-off.
pub const NORM_STALL_STEPS: usize = 32;

/// Sweep cap of the Jacobi solve; exceeding it is an error.
pub const JACOBI_MAX_SWEEPS: usize = 64;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// A square complex matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawElement", into = "RawElement")]
pub struct Element {
    dim: usize,
    entries: Vec<Complex64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    dim: usize,
    /// `[re, im]` pairs, row-major.
    entries: Vec<[f64; 2]>,
}

impl TryFrom<RawElement> for Element {
    type Error = Error;

    fn try_from(raw: RawElement) -> Result<Self> {
        let entries = raw
            .entries
            .into_iter()
            .map(|[re, im]| Complex64::new(re, im))
            .collect();
        Element::new(raw.dim, entries)
    }
}

impl From<Element> for RawElement {
    fn from(e: Element) -> Self {
        RawElement {
            dim: e.dim,
            entries: e.entries.iter().map(|z| [z.re, z.im]).collect(),
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl Element {
    /// Builds an element from row-major entries, rejecting bad shapes and
    /// non-finite values.
    pub fn new(dim: usize, entries: Vec<Complex64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSpec("dimension must be at least 1".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::BadShape {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Element { dim, entries })
    }

    /// Real-entry convenience constructor from nested rows.
    pub fn from_real_rows(rows: &[&[f64]]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::BadShape {
                    expected: dim,
                    got: row.len(),
                });
            }
            entries.extend(row.iter().map(|&x| Complex64::new(x, 0.0)));
        }
        Element::new(dim, entries)
    }

    pub fn from_rows(rows: &[&[Complex64]]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::BadShape {
                    expected: dim,
                    got: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Element::new(dim, entries)
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        Element {
            dim,
            entries: vec![ZERO; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut e = Element::zeros(dim);
        for i in 0..dim {
            e.entries[i * dim + i] = ONE;
        }
        e
    }

    /// The matrix unit `E_ij` (one at row `i`, column `j`).
    pub fn unit(dim: usize, i: usize, j: usize) -> Self {
        assert!(i < dim && j < dim, "matrix unit index out of range");
        let mut e = Element::zeros(dim);
        e.entries[i * dim + j] = ONE;
        e
    }

    pub fn diag(values: &[Complex64]) -> Result<Self> {
        let dim = values.len();
        let mut entries = vec![ZERO; dim * dim];
        for (i, v) in values.iter().enumerate() {
            entries[i * dim + i] = *v;
        }
        Element::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[i * self.dim + j]
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|z| z.re == 0.0 && z.im == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    fn check_dims(&self, other: &Element) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Element, op: impl Fn(Complex64, Complex64) -> Complex64) -> Result<Element> {
        self.check_dims(other)?;
        Ok(Element {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(&x, &y)| op(x, y))
                .collect(),
        })
    }

    pub fn add(&self, other: &Element) -> Result<Element> {
        self.zip_with(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &Element) -> Result<Element> {
        self.zip_with(other, |x, y| x - y)
    }

    pub fn neg(&self) -> Element {
        Element {
            dim: self.dim,
            entries: self.entries.iter().map(|z| -z).collect(),
        }
    }

    /// Matrix product `self · other`.
    pub fn mul(&self, other: &Element) -> Result<Element> {
        self.check_dims(other)?;
        let n = self.dim;
        let mut out = vec![ZERO; n * n];
        for i in 0..n {
            for k in 0..n {
                let x = self.entries[i * n + k];
                if x == ZERO {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += x * other.entries[k * n + j];
                }
            }
        }
        Ok(Element { dim: n, entries: out })
    }

    pub fn square(&self) -> Element {
        self.mul(self).expect("square of a square matrix")
    }

    /// The involution `x ↦ x*` (conjugate transpose).
    pub fn involution(&self) -> Element {
        let n = self.dim;
        let mut out = vec![ZERO; n * n];
        for i in 0..n {
            for j in 0..n {
                out[j * n + i] = self.entries[i * n + j].conj();
            }
        }
        Element { dim: n, entries: out }
    }

    /// Plain transpose, no conjugation.
    pub fn transpose(&self) -> Element {
        let n = self.dim;
        let mut out = vec![ZERO; n * n];
        for i in 0..n {
            for j in 0..n {
                out[j * n + i] = self.entries[i * n + j];
            }
        }
        Element { dim: n, entries: out }
    }

    pub fn scale(&self, mu: Complex64) -> Element {
        Element {
            dim: self.dim,
            entries: self.entries.iter().map(|z| mu * z).collect(),
        }
    }

    pub fn scale_real(&self, t: f64) -> Element {
        Element {
            dim: self.dim,
            entries: self.entries.iter().map(|z| z * t).collect(),
        }
    }

    /// Entrywise division by a real scalar.
    pub fn div_real(&self, t: f64) -> Element {
        Element {
            dim: self.dim,
            entries: self.entries.iter().map(|z| z / t).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Spectral norm with the default tolerance.
    pub fn op_norm(&self) -> Result<f64> {
        op_norm_with_tol(self, DEFAULT_NORM_TOL)
    }

    /// Places `self` in the top-left corner of a `dim + extra` matrix.
    pub fn embed_corner(&self, extra: usize) -> Element {
        let n = self.dim;
        let m = n + extra;
        let mut out = Element::zeros(m);
        for i in 0..n {
            for j in 0..n {
                out.entries[i * m + j] = self.entries[i * n + j];
            }
        }
        out
    }

    /// Largest entrywise distance to `other`.
    pub fn max_abs_diff(&self, other: &Element) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }
}

/// Free-function form of [`Element::op_norm`].
pub fn op_norm(x: &Element) -> Result<f64> {
    x.op_norm()
}

/// Spectral norm by power iteration on `x*x` with a Rayleigh-quotient stopping
/// test.
///
/// The iteration is run from two fixed start vectors and the larger Rayleigh
/// value is kept. Convergence is declared once the successive change, inflated
/// by the observed contraction ratio `ρ/(1−ρ)`, is below `tol` relative; a
/// change at the rounding floor, or a drop of the quotient (impossible in
/// exact arithmetic), also counts.
///
/// A small gap at the top of the spectrum makes the iteration crawl. If a
/// start vector is not certified within [`NORM_POWER_STEPS`] steps, or its
/// change sits below `tol` for [`NORM_STALL_STEPS`] steps without a usable
/// ratio, the largest eigenvalue of `x*x` is taken from a cyclic Jacobi solve
/// instead. A Jacobi solve that does not settle within [`JACOBI_MAX_SWEEPS`]
/// sweeps is reported as [`Error::NormNotConverged`].
pub fn op_norm_with_tol(x: &Element, tol: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let peak = x.max_abs();
    if peak == 0.0 {
        return Ok(0.0);
    }
    let scaled = x.div_real(peak);
    let gram = scaled.involution().mul(&scaled)?;
    let n = x.dim;
    let golden = PI * (3.0 - 5f64.sqrt());
    let start_a: Vec<Complex64> = (0..n)
        .map(|j| Complex64::from_polar(1.0, golden * j as f64))
        .collect();
    let start_b: Vec<Complex64> = (0..n)
        .map(|j| Complex64::from_polar(1.0 + 0.5 * j as f64, 0.37 * (j * j) as f64 + 1.0))
        .collect();
    let lambda = match (rayleigh_power(&gram, start_a, tol)?, rayleigh_power(&gram, start_b, tol)?) {
        (Some(la), Some(lb)) => la.max(lb),
        _ => jacobi_max_eigenvalue(&gram)?,
    };
    Ok(lambda.max(0.0).sqrt() * peak)
}

fn hermitian_apply(m: &Element, v: &[Complex64]) -> Vec<Complex64> {
    let n = m.dim;
    (0..n)
        .map(|i| (0..n).map(|k| m.entries[i * n + k] * v[k]).sum())
        .collect()
}

fn vec_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `None` when the iteration stalls.
fn rayleigh_power(gram: &Element, mut v: Vec<Complex64>, tol: f64) -> Result<Option<f64>> {
    let floor = 4.0 * f64::EPSILON;
    let nv = vec_norm(&v);
    v.iter_mut().for_each(|z| *z /= nv);
    let mut prev_lambda: Option<f64> = None;
    let mut prev_change: Option<f64> = None;
    let mut stalled = 0;
    for _ in 0..NORM_POWER_STEPS {
        let w = hermitian_apply(gram, &v);
        // v is unit, so the Rayleigh quotient is <v, Mv>.
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| (a.conj() * b).re).sum();
        let wn = vec_norm(&w);
        if wn == 0.0 {
            // Start vector landed in the kernel; the other start covers it.
            return Ok(Some(0.0));
        }
        if let Some(pl) = prev_lambda {
            let change = (lambda - pl).abs() / lambda.abs().max(f64::MIN_POSITIVE);
            // In exact arithmetic the quotient never decreases, so a drop
            // means it is sitting on rounding noise.
            if change <= floor || (change <= tol && lambda <= pl) {
                return Ok(Some(lambda.max(pl)));
            }
            if let Some(pc) = prev_change {
                let ratio = if pc > 0.0 { change / pc } else { 0.0 };
                if change <= tol && ratio < 1.0 && change * ratio / (1.0 - ratio) <= tol {
                    return Ok(Some(lambda));
                }
            }
            if change <= tol {
                stalled += 1;
                if stalled >= NORM_STALL_STEPS {
                    return Ok(None);
                }
            } else {
                stalled = 0;
            }
            prev_change = Some(change);
        }
        prev_lambda = Some(lambda);
        v = w.into_iter().map(|z| z / wn).collect();
    }
    Ok(None)
}

/// Largest eigenvalue of a Hermitian matrix by cyclic Jacobi rotations on
/// its real symmetric form `[[Re, −Im], [Im, Re]]`, whose spectrum is that of
/// `m` with every eigenvalue doubled.
fn jacobi_max_eigenvalue(m: &Element) -> Result<f64> {
    let n = m.dim;
    let r = 2 * n;
    let mut a = vec![0.0; r * r];
    for i in 0..n {
        for j in 0..n {
            let z = m.entries[i * n + j];
            a[i * r + j] = z.re;
            a[(i + n) * r + j + n] = z.re;
            a[(i + n) * r + j] = z.im;
            a[i * r + j + n] = -z.im;
        }
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut off = f64::INFINITY;
    for _ in 0..JACOBI_MAX_SWEEPS {
        off = (0..r)
            .flat_map(|i| (0..r).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * r + j] * a[i * r + j])
            .sum::<f64>()
            .sqrt();
        if off <= 4.0 * f64::EPSILON * frob {
            let top = (0..r).map(|i| a[i * r + i]).fold(f64::NEG_INFINITY, f64::max);
            return Ok(top);
        }
        for p in 0..r {
            for q in p + 1..r {
                let apq = a[p * r + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * r + q] - a[p * r + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..r {
                    let akp = a[k * r + p];
                    let akq = a[k * r + q];
                    a[k * r + p] = c * akp - s * akq;
                    a[k * r + q] = s * akp + c * akq;
                }
                for k in 0..r {
                    let apk = a[p * r + k];
                    let aqk = a[q * r + k];
                    a[p * r + k] = c * apk - s * aqk;
                    a[q * r + k] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::NormNotConverged {
        iterations: JACOBI_MAX_SWEEPS,
        last_change: off / frob,
    })
}

/// Algebra parameters shared by an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgebraSpec {
    pub dim: usize,
    #[serde(default = "default_norm_tol")]
    pub norm_tol: f64,
}

fn default_norm_tol() -> f64 {
    DEFAULT_NORM_TOL
}

impl AlgebraSpec {
    pub fn new(dim: usize, norm_tol: f64) -> Result<Self> {
        let spec = AlgebraSpec { dim, norm_tol };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::InvalidSpec("algebra dim must be >= 1".into()));
        }
        if !(self.norm_tol > 0.0 && self.norm_tol <= 1e-3) {
            return Err(Error::InvalidSpec(format!(
                "norm_tol {} must lie in (0, 1e-3]",
                self.norm_tol
            )));
        }
        Ok(())
    }

    pub fn op_norm(&self, x: &Element) -> Result<f64> {
        op_norm_with_tol(x, self.norm_tol)
    }
}

/// A complex scalar of modulus one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitScalar(Complex64);

impl UnitScalar {
    pub const ONE: UnitScalar = UnitScalar(Complex64::new(1.0, 0.0));
    pub const I: UnitScalar = UnitScalar(Complex64::new(0.0, 1.0));
    pub const MINUS_ONE: UnitScalar = UnitScalar(Complex64::new(-1.0, 0.0));
    pub const MINUS_I: UnitScalar = UnitScalar(Complex64::new(0.0, -1.0));

    pub fn new(value: Complex64) -> Result<Self> {
        let modulus = value.norm();
        if (modulus - 1.0).abs() > 1e-12 {
            return Err(Error::NotUnitScalar { modulus });
        }
        Ok(UnitScalar(value))
    }

    pub fn from_phase(theta: f64) -> Self {
        UnitScalar(Complex64::from_polar(1.0, theta))
    }

    pub fn value(self) -> Complex64 {
        self.0
    }
}

/// Deterministic random element.
///
/// Entries are drawn i.i.d. with real and imaginary parts uniform on
/// `[-1, 1)` from a ChaCha8 stream seeded with `seed`. The matrix is then
/// rescaled to Frobenius norm `u · norm_cap` with `u` uniform on `(0, 1]`,
/// which bounds the spectral norm by `norm_cap` without any iteration.
pub fn random_element(seed: u64, dim: usize, norm_cap: f64) -> Element {
    assert!(dim >= 1, "dimension must be at least 1");
    assert!(norm_cap >= 0.0 && norm_cap.is_finite(), "norm_cap must be finite and >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<Complex64> = (0..dim * dim)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let radius = 1.0 - rng.random::<f64>();
    let e = Element { dim, entries };
    let fro = e.frobenius_norm();
    if fro == 0.0 || norm_cap == 0.0 {
        return Element::zeros(dim);
    }
    e.scale_real(radius * norm_cap / fro)
}

/// Unitary from modified Gram-Schmidt on the columns of a random element.
pub fn random_unitary(seed: u64, dim: usize) -> Element {
    let mut attempt = 0u64;
    loop {
        let g = random_element(seed.wrapping_add(attempt), dim, 1.0);
        if let Some(u) = orthonormalize_columns(&g) {
            return u;
        }
        attempt += 1;
    }
}

fn orthonormalize_columns(g: &Element) -> Option<Element> {
    let n = g.dim;
    let mut cols: Vec<Vec<Complex64>> = (0..n).map(|j| (0..n).map(|i| g.get(i, j)).collect()).collect();
    for j in 0..n {
        for k in 0..j {
            let proj: Complex64 = cols[k].iter().zip(&cols[j]).map(|(q, c)| q.conj() * c).sum();
            let qk = cols[k].clone();
            for (c, q) in cols[j].iter_mut().zip(&qk) {
                *c -= proj * q;
            }
        }
        let norm = vec_norm(&cols[j]);
        if norm < 1e-8 {
            return None;
        }
        cols[j].iter_mut().for_each(|z| *z /= norm);
    }
    let mut entries = vec![ZERO; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, z) in col.iter().enumerate() {
            entries[i * n + j] = *z;
        }
    }
    Some(Element { dim: n, entries })
}

/// Normalized discrete Fourier matrix, a fixed unitary.
pub fn fourier_unitary(dim: usize) -> Element {
    let scale = 1.0 / (dim as f64).sqrt();
    let entries = (0..dim * dim)
        .map(|idx| {
            let (i, j) = (idx / dim, idx % dim);
            Complex64::from_polar(scale, 2.0 * PI * ((i * j) % dim) as f64 / dim as f64)
        })
        .collect();
    Element { dim, entries }
}
