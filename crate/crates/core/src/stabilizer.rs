//! The direct method: rescaling iterations, their Cauchy traces, and the
//! error bounds that certify the distance from the limit to the start map.
//!
//! For a map `f` that nearly satisfies the joint three-term equation, the
//! exact map is recovered pointwise as the limit of
//!
//! * `h_n(a) = 3^n f(a / 3^n)` ([`Direction::Forward`]), which converges when
//!   the control function is small near zero, or
//! * `h_n(a) = 3^{-n} f(3^n a)` ([`Direction::Backward`]), which converges
//!   when it grows slower than linearly.
//!
//! The distance `‖h(a) − f(a)‖` is bounded by the series
//! `Σ_{i≥0} 3^i φ(a/3^i, 2a/3^i, 0)` (forward) or
//! `Σ_{i≥1} 3^{-i} φ(3^i a, 2·3^i a, 0)` (backward), which
//! [`BoundSpec::closed_form`] sums in closed form for the standard controls.

use serde::{Deserialize, Serialize};

use crate::algebra::{Element, UnitScalar};
use crate::checkers::{joint_equation_residual, CheckReport, Witness};
use crate::error::{Error, Result};
use crate::mappings::Mapping;
use crate::parallel::map_indexed;
use crate::sampling::{require_samples, SampleSpec};

/// Consecutive residual increases that flag divergence.
pub const DIVERGENCE_RUN: usize = 5;

/// Residuals below this multiple of `ε · scale` count as converged even
/// without a contraction estimate.
const ROUNDING_FLOOR: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionChoice {
    Forward,
    Backward,
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizerConfig {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub direction: DirectionChoice,
}

fn default_max_iter() -> usize {
    64
}

fn default_tol() -> f64 {
    1e-10
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        StabilizerConfig {
            max_iter: default_max_iter(),
            tol: default_tol(),
            direction: DirectionChoice::Auto,
        }
    }
}

impl StabilizerConfig {
    pub fn with_direction(mut self, direction: DirectionChoice) -> Self {
        self.direction = direction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 2 {
            return Err(Error::InvalidSpec("max_iter must be >= 2".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidSpec("stabilizer tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilizationResult {
    /// `h(a)`.
    pub limit: Element,
    pub iterations_used: usize,
    /// `‖h_{n+1}(a) − h_n(a)‖` for `n = 0, 1, …`.
    pub cauchy_residuals: Vec<f64>,
    /// A-posteriori bound on `‖h(a) − f(a)‖`: the summed trace plus the
    /// geometric tail estimate of the last two residuals.
    pub certified_bound: f64,
    pub direction: Direction,
}

/// `3^n` by repeated multiplication; exact while `3^n < 2^53`.
pub fn pow3(n: usize) -> f64 {
    (0..n).fold(1.0, |acc, _| acc * 3.0)
}

/// `h_n(a)` for the given direction.
pub fn rescaled_iterate<M: Mapping + ?Sized>(f: &M, a: &Element, direction: Direction, n: usize) -> Result<Element> {
    let s = pow3(n);
    let h = match direction {
        Direction::Forward => f.apply(&a.div_real(s))?.scale_real(s),
        Direction::Backward => f.apply(&a.scale_real(s))?.div_real(s),
    };
    Ok(h)
}

/// Geometric tail `r·ρ/(1−ρ)` from the last two entries of a decreasing
/// sequence; `None` when the ratio is not below one.
fn geometric_tail(prev: f64, last: f64) -> Option<f64> {
    if last == 0.0 {
        return Some(0.0);
    }
    if prev <= 0.0 {
        return None;
    }
    let rho = last / prev;
    (rho < 1.0).then(|| last * rho / (1.0 - rho))
}

/// Five consecutive increases ending above the first residual. Traces that
/// stay at rounding level never count.
fn is_diverging(residuals: &[f64], scale: f64) -> bool {
    let n = residuals.len();
    if n < DIVERGENCE_RUN + 1 || residuals[n - 1] <= ROUNDING_FLOOR * scale {
        return false;
    }
    let tail = &residuals[n - DIVERGENCE_RUN - 1..];
    tail.windows(2).all(|w| w[1] > w[0]) && residuals[n - 1] > residuals[0]
}

fn is_converged(residuals: &[f64], threshold: f64, scale: f64) -> bool {
    let Some(&last) = residuals.last() else {
        return false;
    };
    if last <= ROUNDING_FLOOR * scale {
        return true;
    }
    if last > threshold || residuals.len() < 2 {
        return false;
    }
    let prev = residuals[residuals.len() - 2];
    let tail = geometric_tail(prev, last).unwrap_or(last);
    tail <= threshold
}

fn certified_bound(residuals: &[f64]) -> f64 {
    let sum: f64 = residuals.iter().sum();
    let tail = match residuals {
        [.., prev, last] => geometric_tail(*prev, *last).unwrap_or(f64::INFINITY),
        [last] if *last == 0.0 => 0.0,
        [_] => f64::INFINITY,
        [] => 0.0,
    };
    sum + tail
}

fn run<M: Mapping + ?Sized>(
    f: &M,
    a: &Element,
    direction: Direction,
    steps: usize,
    stop_at: Option<f64>,
) -> Result<StabilizationResult> {
    let scale = 1.0 + a.op_norm()?;
    let mut prev = f.apply(a)?;
    let mut residuals = Vec::with_capacity(steps);
    for n in 1..=steps {
        let h = rescaled_iterate(f, a, direction, n)?;
        let r = if h.is_finite() { h.sub(&prev)?.op_norm()? } else { f64::INFINITY };
        residuals.push(r);
        if !r.is_finite() || is_diverging(&residuals, scale) {
            return Err(Error::Diverged { direction, residuals });
        }
        prev = h;
        if let Some(tol) = stop_at {
            if is_converged(&residuals, tol * scale, scale) {
                return Ok(StabilizationResult {
                    limit: prev,
                    iterations_used: n,
                    certified_bound: certified_bound(&residuals),
                    cauchy_residuals: residuals,
                    direction,
                });
            }
        }
    }
    if stop_at.is_some() {
        return Err(Error::NotConverged { direction, residuals });
    }
    Ok(StabilizationResult {
        limit: prev,
        iterations_used: steps,
        certified_bound: certified_bound(&residuals),
        cauchy_residuals: residuals,
        direction,
    })
}

/// Direction implied by a perturbation exponent, if it settles it.
pub fn direction_for_exponent(p: f64) -> Option<Direction> {
    if p > 1.0 {
        Some(Direction::Forward)
    } else if p < 1.0 {
        Some(Direction::Backward)
    } else {
        None
    }
}

/// Iterates until the Cauchy residual and its geometric tail estimate are
/// both at most `tol · (1 + ‖a‖)`.
///
/// `Auto` follows the perturbation exponent when the map reports one and
/// otherwise tries forward, then backward. Divergence (five consecutive
/// residual increases ending above the first residual, or a non-finite
/// iterate) and exhaustion of `max_iter` are errors carrying the trace.
pub fn stabilize_point<M: Mapping + ?Sized>(f: &M, a: &Element, cfg: &StabilizerConfig) -> Result<StabilizationResult> {
    cfg.validate()?;
    if a.dim() != f.domain_dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: f.domain_dim(),
        });
    }
    let fixed = match cfg.direction {
        DirectionChoice::Forward => Some(Direction::Forward),
        DirectionChoice::Backward => Some(Direction::Backward),
        DirectionChoice::Auto => f.perturbation_exponent().and_then(direction_for_exponent),
    };
    match fixed {
        Some(d) => run(f, a, d, cfg.max_iter, Some(cfg.tol)),
        None => match run(f, a, Direction::Forward, cfg.max_iter, Some(cfg.tol)) {
            Ok(r) => Ok(r),
            Err(Error::Diverged { .. } | Error::NotConverged { .. }) => {
                run(f, a, Direction::Backward, cfg.max_iter, Some(cfg.tol))
            }
            Err(e) => Err(e),
        },
    }
}

/// Exactly `depth` steps with no early stop; divergence is still detected.
pub fn stabilize_fixed_depth<M: Mapping + ?Sized>(
    f: &M,
    a: &Element,
    direction: Direction,
    depth: usize,
) -> Result<StabilizationResult> {
    run(f, a, direction, depth, None)
}

/// The pointwise limit map `a ↦ h(a)`.
pub struct StabilizedMap<'a, M: Mapping + ?Sized> {
    pub base: &'a M,
    pub cfg: StabilizerConfig,
}

impl<'a, M: Mapping + ?Sized> StabilizedMap<'a, M> {
    pub fn new(base: &'a M, cfg: StabilizerConfig) -> Self {
        StabilizedMap { base, cfg }
    }
}

impl<M: Mapping + ?Sized> Mapping for StabilizedMap<'_, M> {
    fn domain_dim(&self) -> usize {
        self.base.domain_dim()
    }

    fn codomain_dim(&self) -> usize {
        self.base.codomain_dim()
    }

    fn apply(&self, a: &Element) -> Result<Element> {
        Ok(stabilize_point(self.base, a, &self.cfg)?.limit)
    }
}

/// The scalar profile `ψ` of an Isac-Rassias type control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiProfile {
    /// `ψ(t) = t^q`.
    Power { q: f64 },
}

impl PsiProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            PsiProfile::Power { q } => pow_conv(t, q),
        }
    }
}

impl Default for PsiProfile {
    fn default() -> Self {
        PsiProfile::Power { q: 2.0 }
    }
}

/// `t^p` with `0^p := 0` for every `p`, including `p ≤ 0`.
pub fn pow_conv(t: f64, p: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t.powf(p)
    }
}

/// The control function `φ(a, b, c)` bounding the joint-equation residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundSpec {
    /// `θ(‖a‖^{p1} + ‖b‖^{p2} + ‖c‖^{p3})`.
    Power { theta: f64, p1: f64, p2: f64, p3: f64 },
    /// `θ(ψ(‖a‖) + ψ(‖b‖) + ψ(‖c‖))`.
    Psi {
        theta: f64,
        #[serde(default)]
        psi: PsiProfile,
    },
    /// `θ` per nonzero argument; the `p → 0` limit of the power control.
    Constant { theta: f64 },
}

/// Which convergence conditions a control satisfies in a direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeriesConditions {
    /// The error series converges.
    pub series_converges: bool,
    /// `3^{2n} φ(a/3^n, …) → 0` (forward) or `3^{-2n} φ(3^n a, …) → 0`
    /// (backward), which carries the square identity to the limit.
    pub jordan_limit_vanishes: bool,
}

impl BoundSpec {
    pub fn theta(&self) -> f64 {
        match *self {
            BoundSpec::Power { theta, .. } | BoundSpec::Psi { theta, .. } | BoundSpec::Constant { theta } => theta,
        }
    }

    pub fn with_theta(mut self, value: f64) -> Self {
        match &mut self {
            BoundSpec::Power { theta, .. } | BoundSpec::Psi { theta, .. } | BoundSpec::Constant { theta } => {
                *theta = value
            }
        }
        self
    }

    pub fn name(&self) -> &'static str {
        match self {
            BoundSpec::Power { .. } => "power",
            BoundSpec::Psi { .. } => "psi",
            BoundSpec::Constant { .. } => "constant",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let theta = self.theta();
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(Error::InvalidSpec(format!("bound theta {theta} must be finite and >= 0")));
        }
        if let BoundSpec::Power { p1, p2, p3, .. } = self {
            if ![p1, p2, p3].iter().all(|p| p.is_finite()) {
                return Err(Error::InvalidSpec("bound exponents must be finite".into()));
            }
        }
        if let BoundSpec::Psi {
            psi: PsiProfile::Power { q },
            ..
        } = self
        {
            if !(q.is_finite() && *q > 0.0) {
                return Err(Error::InvalidSpec("psi exponent must be positive".into()));
            }
        }
        Ok(())
    }

    /// `φ` evaluated on argument norms.
    pub fn phi_norms(&self, na: f64, nb: f64, nc: f64) -> f64 {
        match *self {
            BoundSpec::Power { theta, p1, p2, p3 } => theta * (pow_conv(na, p1) + pow_conv(nb, p2) + pow_conv(nc, p3)),
            BoundSpec::Psi { theta, psi } => theta * (psi.eval(na) + psi.eval(nb) + psi.eval(nc)),
            BoundSpec::Constant { theta } => {
                theta * [na, nb, nc].iter().filter(|&&n| n != 0.0).count() as f64
            }
        }
    }

    pub fn phi(&self, a: &Element, b: &Element, c: &Element) -> Result<f64> {
        Ok(self.phi_norms(a.op_norm()?, b.op_norm()?, c.op_norm()?))
    }

    fn incompatible(&self, direction: Direction, condition: &str) -> Error {
        Error::IncompatibleBound {
            bound: format!("{self:?}"),
            direction,
            condition: condition.into(),
        }
    }

    /// Rejects (control, direction) pairs whose error series diverges.
    pub fn check_direction(&self, direction: Direction) -> Result<()> {
        self.validate()?;
        match (*self, direction) {
            (BoundSpec::Power { p1, p2, .. }, Direction::Forward) if !(p1 > 1.0 && p2 > 1.0) => {
                Err(self.incompatible(direction, "forward iteration needs p1, p2 > 1"))
            }
            (BoundSpec::Power { p1, p2, .. }, Direction::Backward) if !(p1 < 1.0 && p2 < 1.0) => {
                Err(self.incompatible(direction, "backward iteration needs p1, p2 < 1"))
            }
            (BoundSpec::Psi { psi, .. }, Direction::Forward) if !(3.0 * psi.eval(1.0 / 3.0) < 1.0) => {
                Err(self.incompatible(direction, "forward iteration needs 3·ψ(1/3) < 1"))
            }
            (BoundSpec::Psi { psi, .. }, Direction::Backward) if !(psi.eval(3.0) / 3.0 < 1.0) => {
                Err(self.incompatible(direction, "backward iteration needs ψ(3)/3 < 1"))
            }
            (BoundSpec::Constant { .. }, Direction::Forward) => Err(self.incompatible(
                direction,
                "a constant control makes the forward series Σ 3^i θ diverge",
            )),
            _ => Ok(()),
        }
    }

    pub fn conditions(&self, direction: Direction) -> SeriesConditions {
        let series_converges = self.check_direction(direction).is_ok();
        let exps: Vec<f64> = match *self {
            BoundSpec::Power { p1, p2, p3, .. } => vec![p1, p2, p3],
            BoundSpec::Psi {
                psi: PsiProfile::Power { q },
                ..
            } => vec![q],
            BoundSpec::Constant { .. } => vec![0.0],
        };
        let jordan_limit_vanishes = match direction {
            Direction::Forward => exps.iter().all(|&p| p > 2.0),
            Direction::Backward => exps.iter().all(|&p| p < 2.0),
        };
        SeriesConditions {
            series_converges,
            jordan_limit_vanishes,
        }
    }

    /// Closed-form bound on `‖h(a) − f(a)‖` for `‖a‖ = norm_a`.
    ///
    /// | control | forward | backward |
    /// |---|---|---|
    /// | power | `θ‖a‖^{p1}/(1−3^{1−p1}) + θ2^{p2}‖a‖^{p2}/(1−3^{1−p2})` | `θ‖a‖^{p1}/(3^{1−p1}−1) + θ2^{p2}‖a‖^{p2}/(3^{1−p2}−1)` |
    /// | ψ | `θ(1+ψ(2))ψ(‖a‖)/(1−3ψ(1/3))` | `θ(1+ψ(2))ψ(‖a‖)/(1−ψ(3)/3)` |
    /// | constant | diverges | `θ` |
    ///
    /// The backward ψ entry is the published one; for `ψ(t) = t^q` the series
    /// itself sums to that value times `ψ(3)/3`, so it is valid but not tight.
    pub fn closed_form(&self, norm_a: f64, direction: Direction) -> Result<f64> {
        self.check_direction(direction)?;
        let value = match (*self, direction) {
            (BoundSpec::Power { theta, p1, p2, .. }, Direction::Forward) => {
                theta * pow_conv(norm_a, p1) / (1.0 - 3f64.powf(1.0 - p1))
                    + theta * 2f64.powf(p2) * pow_conv(norm_a, p2) / (1.0 - 3f64.powf(1.0 - p2))
            }
            (BoundSpec::Power { theta, p1, p2, .. }, Direction::Backward) => {
                theta * pow_conv(norm_a, p1) / (3f64.powf(1.0 - p1) - 1.0)
                    + theta * 2f64.powf(p2) * pow_conv(norm_a, p2) / (3f64.powf(1.0 - p2) - 1.0)
            }
            (BoundSpec::Psi { theta, psi }, Direction::Forward) => {
                theta * (1.0 + psi.eval(2.0)) * psi.eval(norm_a) / (1.0 - 3.0 * psi.eval(1.0 / 3.0))
            }
            (BoundSpec::Psi { theta, psi }, Direction::Backward) => {
                theta * (1.0 + psi.eval(2.0)) * psi.eval(norm_a) / (1.0 - psi.eval(3.0) / 3.0)
            }
            (BoundSpec::Constant { theta }, Direction::Backward) => theta,
            (BoundSpec::Constant { .. }, Direction::Forward) => unreachable!("rejected by check_direction"),
        };
        Ok(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesBound {
    /// Partial sum.
    pub value: f64,
    /// Geometric estimate of the remainder; infinite when the last two terms
    /// do not contract.
    pub tail_estimate: f64,
    pub terms: usize,
}

impl SeriesBound {
    pub fn total(&self) -> f64 {
        self.value + self.tail_estimate
    }
}

/// Truncated error series: `Σ_{i=0}^{terms−1} 3^i φ(a/3^i, 2a/3^i, 0)`
/// forward, `Σ_{i=1}^{terms} 3^{-i} φ(3^i a, 2·3^i a, 0)` backward.
pub fn bound_series_truncated<F>(phi: F, a: &Element, direction: Direction, terms: usize) -> Result<SeriesBound>
where
    F: Fn(&Element, &Element, &Element) -> Result<f64>,
{
    if terms < 1 {
        return Err(Error::InvalidSpec("series needs at least one term".into()));
    }
    let zero = Element::zeros(a.dim());
    let indices: Box<dyn Iterator<Item = usize>> = match direction {
        Direction::Forward => Box::new(0..terms),
        Direction::Backward => Box::new(1..=terms),
    };
    let mut value = 0.0;
    let mut last_two = (f64::NAN, f64::NAN);
    for i in indices {
        let s = pow3(i);
        let t = match direction {
            Direction::Forward => {
                let x = a.div_real(s);
                s * phi(&x, &x.scale_real(2.0), &zero)?
            }
            Direction::Backward => {
                let x = a.scale_real(s);
                phi(&x, &x.scale_real(2.0), &zero)? / s
            }
        };
        value += t;
        last_two = (last_two.1, t);
    }
    let (prev, last) = last_two;
    let tail_estimate = if last == 0.0 {
        0.0
    } else if prev.is_nan() {
        f64::INFINITY
    } else {
        geometric_tail(prev, last).unwrap_or(f64::INFINITY)
    };
    Ok(SeriesBound {
        value,
        tail_estimate,
        terms,
    })
}

/// Ratio growth over the norm sweep at which calibration gives up.
pub const CALIBRATION_GROWTH_LIMIT: f64 = 9.0;

/// Ratios this small are rounding noise and never count as growth.
const CALIBRATION_NOISE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub bound: BoundSpec,
    /// `(norm_cap, max ratio)` for each cap of the sweep.
    pub sweep: Vec<(f64, f64)>,
}

/// Fits `θ` so that `residual ≤ φ` on every sample, with the template's
/// exponents held fixed.
///
/// Samples are taken at caps `cap/9, cap/3, cap`. Each sample contributes a
/// random triple and the substitutions `(a, 2a, 0)` and `(0, 0, c)`, all at
/// `μ = 1`. Calibration fails if the ratio grows monotonically by
/// [`CALIBRATION_GROWTH_LIMIT`] or more across the sweep, i.e. at least
/// linearly in the cap, or if the residual is nonzero where `φ` vanishes.
pub fn calibrate_phi<M: Mapping + ?Sized>(f: &M, template: &BoundSpec, sampling: &SampleSpec) -> Result<Calibration> {
    require_samples(sampling.samples, 10)?;
    template.validate()?;
    let unit = template.with_theta(1.0);
    let dim = f.domain_dim();
    let zero = Element::zeros(dim);
    let mut sweep = Vec::with_capacity(3);
    for cap in [sampling.norm_cap / 9.0, sampling.norm_cap / 3.0, sampling.norm_cap] {
        let s = sampling.with_cap(cap);
        let ratios = map_indexed(s.samples, |idx| -> Result<f64> {
            let (a, b, c) = s.triple(idx, dim);
            let cases = [(a.clone(), b, c.clone()), (a.clone(), a.scale_real(2.0), zero.clone()), (zero.clone(), zero.clone(), c)];
            let mut worst: f64 = 0.0;
            for (x, y, z) in &cases {
                let residual = joint_equation_residual(f, x, y, z, UnitScalar::ONE)?;
                let denom = unit.phi(x, y, z)?;
                let ratio = if denom > 0.0 {
                    residual / denom
                } else if residual <= CALIBRATION_NOISE {
                    0.0
                } else {
                    return Err(Error::Calibration(format!(
                        "residual {residual:e} where the control vanishes (sample {idx})"
                    )));
                };
                worst = worst.max(ratio);
            }
            Ok(worst)
        });
        let mut max_ratio: f64 = 0.0;
        for r in ratios {
            max_ratio = max_ratio.max(r?);
        }
        sweep.push((cap, max_ratio));
    }
    let rs: Vec<f64> = sweep.iter().map(|&(_, r)| r).collect();
    if rs[2] > CALIBRATION_NOISE && rs[0] < rs[1] && rs[1] < rs[2] && rs[2] >= CALIBRATION_GROWTH_LIMIT * rs[0] {
        return Err(Error::Calibration(format!(
            "ratio grows with the norm cap: {:.3e} -> {:.3e} -> {:.3e}",
            rs[0], rs[1], rs[2]
        )));
    }
    let theta = rs.iter().cloned().fold(0.0, f64::max);
    Ok(Calibration {
        bound: template.with_theta(theta),
        sweep,
    })
}

/// Compares the early-stopped limit with a run of twice the depth and with
/// the limit at `3a` scaled back by `1/3`. Satisfied iff the larger
/// discrepancy is at most `tol · (1 + ‖a‖)` on every sample.
pub fn verify_uniqueness<M: Mapping + ?Sized>(
    f: &M,
    cfg: &StabilizerConfig,
    sampling: &SampleSpec,
    tol: f64,
) -> Result<CheckReport> {
    require_samples(sampling.samples, 1)?;
    let dim = f.domain_dim();
    let rows = map_indexed(sampling.samples, |idx| -> Result<Witness> {
        let a = sampling.element(idx, 0, dim);
        let base = stabilize_point(f, &a, cfg)?;
        let deep = stabilize_fixed_depth(f, &a, base.direction, 2 * cfg.max_iter)?;
        let fixed_cfg = StabilizerConfig {
            direction: match base.direction {
                Direction::Forward => DirectionChoice::Forward,
                Direction::Backward => DirectionChoice::Backward,
            },
            ..*cfg
        };
        let tripled = stabilize_point(f, &a.scale_real(3.0), &fixed_cfg)?.limit.div_real(3.0);
        let d_depth = base.limit.sub(&deep.limit)?.op_norm()?;
        let d_scale = base.limit.sub(&tripled)?.op_norm()?;
        let scale = 1.0 + a.op_norm()?;
        Ok(Witness {
            sample: idx,
            lhs: d_depth.max(d_scale),
            rhs: 0.0,
            scale,
            a: Some(a),
            b: None,
            c: None,
            mu: None,
        })
    });
    let ws: Vec<Witness> = rows.into_iter().collect::<Result<_>>()?;
    Ok(CheckReport::from_witnesses("uniqueness", tol, ws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::random_element;
    use crate::checkers::Verdict;
    use crate::mappings::{DirectionField, MapSpec, PerturbationSpec};

    fn unit_dir(dim: usize) -> Element {
        let i = Element::identity(dim);
        i.div_real(i.op_norm().unwrap())
    }

    fn constant_map(dim: usize, theta: f64) -> MapSpec {
        MapSpec::perturbed(MapSpec::identity(dim), PerturbationSpec::constant(theta, unit_dir(dim))).unwrap()
    }

    fn odd_power_map(dim: usize, theta: f64, p: f64) -> MapSpec {
        MapSpec::perturbed(
            MapSpec::identity(dim),
            PerturbationSpec::power_norm(theta, p, Element::unit(dim, 0, 1)).with_field(DirectionField::TracePhase),
        )
        .unwrap()
    }

    #[test]
    fn pow3_is_exact_in_range() {
        assert_eq!(pow3(0), 1.0);
        assert_eq!(pow3(5), 243.0);
        assert_eq!(pow3(33), 5559060566555523.0);
    }

    #[test]
    fn exact_map_is_a_fixed_point() {
        let a = random_element(4, 3, 5.0);
        for dir in [DirectionChoice::Forward, DirectionChoice::Backward, DirectionChoice::Auto] {
            let r = stabilize_point(&MapSpec::transpose(3), &a, &StabilizerConfig::default().with_direction(dir)).unwrap();
            assert_eq!(r.iterations_used, 1);
            assert!(r.limit.max_abs_diff(&a.transpose()).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn backward_removes_constant_perturbation() {
        let f = constant_map(2, 0.3);
        let a = random_element(8, 2, 3.0);
        let cfg = StabilizerConfig::default().with_direction(DirectionChoice::Backward);
        let r = stabilize_point(&f, &a, &cfg).unwrap();
        assert!(r.limit.sub(&a).unwrap().op_norm().unwrap() <= 1e-9);
        let dist = r.limit.sub(&f.evaluate(&a).unwrap()).unwrap().op_norm().unwrap();
        assert!((dist - 0.3).abs() <= 1e-9);
        // The trace-based certificate covers the true distance.
        assert!(r.certified_bound >= dist - 1e-12);
        assert!((r.certified_bound - 0.3).abs() <= 1e-9);
    }

    #[test]
    fn forward_removes_odd_quadratic_perturbation() {
        let f = odd_power_map(3, 1e-2, 2.0);
        let a0 = random_element(12, 3, 1.0);
        let a = a0.div_real(a0.op_norm().unwrap());
        let cfg = StabilizerConfig {
            tol: 1e-12,
            ..StabilizerConfig::default().with_direction(DirectionChoice::Forward)
        };
        let r = stabilize_point(&f, &a, &cfg).unwrap();
        assert!(r.iterations_used <= 30);
        assert!(r.limit.sub(&a).unwrap().op_norm().unwrap() <= 1e-12);
        // Geometric oracle: residual_n = (2/3)·3^{-n}·θ‖a‖² |phase|.
        for (n, res) in r.cauchy_residuals.iter().enumerate() {
            let oracle = 2.0 / 3.0 * 1e-2 / pow3(n);
            assert!((res - oracle).abs() <= 1e-14 + 1e-9 * oracle, "n={n}");
        }
    }

    #[test]
    fn auto_picks_direction_from_exponent() {
        let a = random_element(1, 2, 2.0);
        let r = stabilize_point(&constant_map(2, 0.1), &a, &StabilizerConfig::default()).unwrap();
        assert_eq!(r.direction, Direction::Backward);
        let r = stabilize_point(&odd_power_map(2, 0.1, 2.0), &a, &StabilizerConfig::default()).unwrap();
        assert_eq!(r.direction, Direction::Forward);
    }

    #[test]
    fn forward_constant_diverges_with_trace() {
        let f = constant_map(3, 0.5);
        let a = random_element(2, 3, 2.0);
        let cfg = StabilizerConfig::default().with_direction(DirectionChoice::Forward);
        match stabilize_point(&f, &a, &cfg).unwrap_err() {
            Error::Diverged { direction, residuals } => {
                assert_eq!(direction, Direction::Forward);
                assert_eq!(residuals.len(), DIVERGENCE_RUN + 1);
                for w in residuals.windows(2) {
                    assert!((w[1] / w[0] - 3.0).abs() < 1e-9);
                }
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn slow_contraction_reports_not_converged() {
        let f = MapSpec::perturbed(
            MapSpec::identity(2),
            PerturbationSpec::power_norm(1.0, 0.999, Element::unit(2, 0, 1)),
        )
        .unwrap();
        let a = random_element(3, 2, 2.0);
        let cfg = StabilizerConfig {
            max_iter: 8,
            ..StabilizerConfig::default().with_direction(DirectionChoice::Backward)
        };
        assert!(matches!(stabilize_point(&f, &a, &cfg), Err(Error::NotConverged { .. })));
    }

    #[test]
    fn divergence_detector_ignores_noise_after_decay() {
        let rs = [1.0, 1e-3, 1e-17, 2e-17, 3e-17, 4e-17, 5e-17, 6e-17];
        assert!(!is_diverging(&rs, 1.0));
        let rs = [1e-18, 2e-18, 3e-17, 4e-17, 5e-17, 6e-17];
        assert!(!is_diverging(&rs, 1.0));
        let rs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(is_diverging(&rs, 1.0));
        let rs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(!is_diverging(&rs, 1.0));
    }

    #[test]
    fn series_of_zero_control() {
        let a = random_element(1, 2, 1.0);
        let s = bound_series_truncated(|_, _, _| Ok(0.0), &a, Direction::Forward, 10).unwrap();
        assert_eq!((s.value, s.tail_estimate), (0.0, 0.0));
    }

    #[test]
    fn constant_series_sums_to_theta() {
        let bound = BoundSpec::Constant { theta: 1.0 };
        let a = random_element(6, 3, 2.0);
        let s = bound_series_truncated(|x, y, z| bound.phi(x, y, z), &a, Direction::Backward, 40).unwrap();
        assert!((s.value - 1.0).abs() <= 1e-12);
        assert!((bound.closed_form(a.op_norm().unwrap(), Direction::Backward).unwrap() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn power_series_forward_p2() {
        let bound = BoundSpec::Power { theta: 1.0, p1: 2.0, p2: 2.0, p3: 2.0 };
        let a = Element::identity(2);
        let s = bound_series_truncated(|x, y, z| bound.phi(x, y, z), &a, Direction::Forward, 60).unwrap();
        assert!((s.total() - 7.5).abs() <= 1e-9 * 7.5);
        assert!((bound.closed_form(1.0, Direction::Forward).unwrap() - 7.5).abs() <= 1e-12);
    }

    #[test]
    fn closed_form_examples() {
        let c = BoundSpec::Constant { theta: 0.7 };
        assert_eq!(c.closed_form(3.0, Direction::Backward).unwrap(), 0.7);
        let p0 = BoundSpec::Power { theta: 1.0, p1: 0.0, p2: 0.0, p3: 0.0 };
        assert!((p0.closed_form(1.0, Direction::Backward).unwrap() - 1.0).abs() <= 1e-15);
        let psi = BoundSpec::Psi {
            theta: 1.0,
            psi: PsiProfile::Power { q: 2.0 },
        };
        assert!((psi.closed_form(1.0, Direction::Forward).unwrap() - 7.5).abs() <= 1e-12);
    }

    #[test]
    fn incompatible_pairs_are_named() {
        let err = BoundSpec::Constant { theta: 1.0 }.closed_form(1.0, Direction::Forward).unwrap_err();
        assert!(matches!(err, Error::IncompatibleBound { .. }));
        let p = BoundSpec::Power { theta: 1.0, p1: 0.5, p2: 0.5, p3: 0.5 };
        assert!(p.closed_form(1.0, Direction::Forward).is_err());
        let p = BoundSpec::Power { theta: 1.0, p1: 2.0, p2: 2.0, p3: 2.0 };
        let msg = p.closed_form(1.0, Direction::Backward).unwrap_err().to_string();
        assert!(msg.contains("p1, p2 < 1"), "{msg}");
        let psi = BoundSpec::Psi {
            theta: 1.0,
            psi: PsiProfile::Power { q: 0.5 },
        };
        assert!(psi.closed_form(1.0, Direction::Forward).is_err());
        assert!(psi.closed_form(1.0, Direction::Backward).is_ok());
    }

    #[test]
    fn backward_psi_closed_form_dominates_series() {
        for q in [0.25, 0.5, 0.75] {
            let psi = BoundSpec::Psi {
                theta: 1.0,
                psi: PsiProfile::Power { q },
            };
            let a = Element::identity(2).scale_real(1.7);
            let s = bound_series_truncated(|x, y, z| psi.phi(x, y, z), &a, Direction::Backward, 80).unwrap();
            let closed = psi.closed_form(1.7, Direction::Backward).unwrap();
            let r = 3f64.powf(q) / 3.0;
            assert!(s.total() <= closed);
            assert!((s.total() - closed * r).abs() <= 1e-9 * closed);
        }
    }

    #[test]
    fn conditions_table() {
        let p2 = BoundSpec::Power { theta: 1.0, p1: 2.0, p2: 2.0, p3: 2.0 };
        let c = p2.conditions(Direction::Forward);
        assert!(c.series_converges);
        assert!(!c.jordan_limit_vanishes);
        let p3 = BoundSpec::Power { theta: 1.0, p1: 3.0, p2: 3.0, p3: 3.0 };
        assert!(p3.conditions(Direction::Forward).jordan_limit_vanishes);
        let k = BoundSpec::Constant { theta: 1.0 };
        assert!(k.conditions(Direction::Backward).series_converges);
        assert!(k.conditions(Direction::Backward).jordan_limit_vanishes);
        assert!(!k.conditions(Direction::Forward).series_converges);
    }

    #[test]
    fn calibrate_exact_and_zero_maps() {
        let template = BoundSpec::Power { theta: 0.0, p1: 2.0, p2: 2.0, p3: 2.0 };
        let s = SampleSpec::new(3, 50, 10.0);
        let c = calibrate_phi(&MapSpec::transpose(3), &template, &s).unwrap();
        assert!(c.bound.theta() <= 1e-9);
        let c = calibrate_phi(&MapSpec::zero(3), &template, &s).unwrap();
        assert_eq!(c.bound.theta(), 0.0);
        assert!(calibrate_phi(&MapSpec::zero(3), &template, &SampleSpec::new(3, 5, 1.0)).is_err());
    }

    #[test]
    fn calibrate_odd_quadratic_perturbation() {
        let theta = 1e-3;
        let f = odd_power_map(3, theta, 2.0);
        let template = BoundSpec::Power { theta: 0.0, p1: 2.0, p2: 2.0, p3: 2.0 };
        // Small arguments: the six perturbation terms dominate.
        for seed in [21, 22, 23] {
            let c = calibrate_phi(&f, &template, &SampleSpec::new(seed, 200, 0.1)).unwrap();
            let t = c.bound.theta();
            assert!((1e-3..=8e-3).contains(&t), "theta_eff = {t:e}, sweep {:?}", c.sweep);
        }
        // Unit arguments: the cross terms of f(c)² add up to 2θ‖c‖, so the
        // fit lies between θ/7.5 (from (a, 2a, 0)) and 3θ.
        for seed in [21, 22, 23] {
            let c = calibrate_phi(&f, &template, &SampleSpec::new(seed, 200, 1.0)).unwrap();
            let t = c.bound.theta();
            assert!((theta / 7.5..=3.0 * theta).contains(&t), "theta_eff = {t:e}");
        }
    }

    #[test]
    fn calibrate_detects_unbounded_ratio() {
        // Exponent-zero template against a quadratic perturbation: the ratio
        // grows like cap².
        let f = odd_power_map(2, 1e-2, 2.0);
        let template = BoundSpec::Constant { theta: 0.0 };
        let err = calibrate_phi(&f, &template, &SampleSpec::new(2, 50, 10.0)).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
    }

    #[test]
    fn uniqueness_examples() {
        let s = SampleSpec::new(8, 20, 10.0);
        let cfg = StabilizerConfig::default();
        let r = verify_uniqueness(&MapSpec::identity(2), &cfg, &s, 1e-10).unwrap();
        assert_eq!(r.verdict, Verdict::Satisfied);
        assert!(r.max_residual <= 1e-13);
        let r = verify_uniqueness(&constant_map(2, 0.4), &cfg, &s, 1e-10).unwrap();
        assert_eq!(r.verdict, Verdict::Satisfied, "{r:?}");
        let r = verify_uniqueness(&odd_power_map(2, 1e-2, 2.0), &cfg, &s, 1e-10).unwrap();
        assert_eq!(r.verdict, Verdict::Satisfied, "{r:?}");
        let bad = cfg.with_direction(DirectionChoice::Forward);
        assert!(matches!(
            verify_uniqueness(&constant_map(2, 0.4), &bad, &s, 1e-10),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn limit_is_three_homogeneous() {
        let f = constant_map(3, 0.2);
        let cfg = StabilizerConfig::default();
        for seed in 0..10 {
            let a = random_element(seed, 3, 5.0);
            let h = stabilize_point(&f, &a, &cfg).unwrap().limit;
            let h3 = stabilize_point(&f, &a.scale_real(3.0), &cfg).unwrap().limit;
            let scale = 1.0 + a.op_norm().unwrap();
            assert!(h3.sub(&h.scale_real(3.0)).unwrap().op_norm().unwrap() <= 1e-9 * scale);
        }
    }
}
