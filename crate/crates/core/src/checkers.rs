//! Residual functionals for the three-term functional inequality and
//! equation, the step-by-step additivity derivation, and the superstability
//! decay sequence.
//!
//! Every check samples its universal quantifier with a [`SampleSpec`] and
//! reduces to a [`CheckReport`] that keeps the worst sample, so any failure
//! can be replayed from the report alone. Tolerances are relative to
//! `scale = 1 + largest sampled input norm`.

use num_complex::Complex64;
use serde::Serialize;

use crate::algebra::{Element, UnitScalar};
use crate::error::{Error, Result};
use crate::mappings::Mapping;
use crate::parallel::map_indexed;
use crate::sampling::{require_samples, SampleSpec};

pub use crate::sampling::MuGrid;

/// Norm beyond which the decay sequence refuses to evaluate.
pub const DECAY_OVERFLOW_NORM: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    /// Nothing was asserted: no samples, or a report-only sweep.
    Vacuous,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub sample: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub scale: f64,
    pub a: Option<Element>,
    pub b: Option<Element>,
    pub c: Option<Element>,
    pub mu: Option<Complex64>,
}

impl Witness {
    fn new(sample: usize, lhs: f64, rhs: f64, scale: f64) -> Self {
        Witness {
            sample,
            lhs,
            rhs,
            scale,
            a: None,
            b: None,
            c: None,
            mu: None,
        }
    }

    fn with_a(mut self, a: &Element) -> Self {
        self.a = Some(a.clone());
        self
    }

    fn with_b(mut self, b: &Element) -> Self {
        self.b = Some(b.clone());
        self
    }

    fn with_c(mut self, c: &Element) -> Self {
        self.c = Some(c.clone());
        self
    }

    fn with_mu(mut self, mu: UnitScalar) -> Self {
        self.mu = Some(mu.value());
        self
    }

    /// `lhs − rhs` in units of `scale`.
    pub fn excess(&self) -> f64 {
        (self.lhs - self.rhs) / self.scale
    }

    /// Operator norms of the witness inputs, `a`, `b`, `c` in that order.
    pub fn norms(&self) -> Result<[Option<f64>; 3]> {
        let norm = |e: &Option<Element>| e.as_ref().map(|x| x.op_norm()).transpose();
        Ok([norm(&self.a)?, norm(&self.b)?, norm(&self.c)?])
    }
}

/// Outcome of one sampled inequality `lhs ≤ rhs`. Equalities are recorded
/// as `residual ≤ 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub num_samples: usize,
    pub tol: f64,
    /// Largest left-hand side seen.
    pub max_residual: f64,
    /// Largest `rhs − lhs`.
    pub max_slack: f64,
    /// Smallest `rhs − lhs`; the verdict is driven by this end.
    pub min_slack: f64,
    pub worst_witness: Option<Witness>,
    pub verdict: Verdict,
}

impl CheckReport {
    /// Reduces witnesses in the given order. Satisfied iff every sample has
    /// `lhs − rhs ≤ tol · scale`.
    pub fn from_witnesses(name: impl Into<String>, tol: f64, witnesses: Vec<Witness>) -> Self {
        let mut report = CheckReport {
            name: name.into(),
            num_samples: witnesses.len(),
            tol,
            max_residual: 0.0,
            max_slack: f64::NEG_INFINITY,
            min_slack: f64::INFINITY,
            worst_witness: None,
            verdict: Verdict::Vacuous,
        };
        if witnesses.is_empty() {
            report.max_slack = 0.0;
            report.min_slack = 0.0;
            return report;
        }
        let mut violated = false;
        for w in witnesses {
            report.max_residual = report.max_residual.max(w.lhs);
            let slack = w.rhs - w.lhs;
            report.max_slack = report.max_slack.max(slack);
            report.min_slack = report.min_slack.min(slack);
            if !(w.lhs - w.rhs <= tol * w.scale) {
                violated = true;
            }
            let replace = match &report.worst_witness {
                None => true,
                Some(cur) => w.excess() > cur.excess(),
            };
            if replace {
                report.worst_witness = Some(w);
            }
        }
        report.verdict = if violated { Verdict::Violated } else { Verdict::Satisfied };
        report
    }

    /// Same data, but nothing asserted.
    pub fn report_only(mut self) -> Self {
        self.verdict = Verdict::Vacuous;
        self
    }

    pub fn is_satisfied(&self) -> bool {
        self.verdict != Verdict::Violated
    }
}

fn third(x: &Element) -> Element {
    x.div_real(3.0)
}

/// `(3a + 3c − b)/3`, the third argument of the three-term expression. The
/// form `(3a − b)/3 + c` is the same element.
fn third_argument(a: &Element, b: &Element, c: &Element) -> Result<Element> {
    Ok(third(&a.scale_real(3.0).add(&c.scale_real(3.0))?.sub(b)?))
}

/// `(‖f((b−a)/3) + f((a−3c)/3) + f((3a+3c−b)/3)‖, ‖f(a)‖)`.
///
/// The three arguments sum to `a`, so additive maps give equality.
pub fn three_term_inequality<M: Mapping + ?Sized>(f: &M, a: &Element, b: &Element, c: &Element) -> Result<(f64, f64)> {
    let x1 = third(&b.sub(a)?);
    let x2 = third(&a.sub(&c.scale_real(3.0))?);
    let x3 = third_argument(a, b, c)?;
    let lhs = f.apply(&x1)?.add(&f.apply(&x2)?)?.add(&f.apply(&x3)?)?.op_norm()?;
    let rhs = f.apply(a)?.op_norm()?;
    Ok((lhs, rhs))
}

/// The circle-twisted form:
/// `(‖f((b−a)/3) + f((a−3μc)/3) + μ f((3a+3c−b)/3)‖, ‖f(a)‖)`.
///
/// At `μ = 1` this is bitwise equal to [`three_term_inequality`].
pub fn circle_three_term_inequality<M: Mapping + ?Sized>(
    f: &M,
    a: &Element,
    b: &Element,
    c: &Element,
    mu: UnitScalar,
) -> Result<(f64, f64)> {
    let m = mu.value();
    let x1 = third(&b.sub(a)?);
    let x2 = third(&a.sub(&c.scale(m).scale_real(3.0))?);
    let x3 = third_argument(a, b, c)?;
    let lhs = f
        .apply(&x1)?
        .add(&f.apply(&x2)?)?
        .add(&f.apply(&x3)?.scale(m))?
        .op_norm()?;
    let rhs = f.apply(a)?.op_norm()?;
    Ok((lhs, rhs))
}

/// Residual of the joint equation combining the three-term identity with the
/// square-preservation defect:
///
/// `‖f((μb−a)/3) + f((a−3c)/3) + μ f((3a−b)/3 + c) − f(a) + f(c²) − f(c)²‖`.
pub fn joint_equation_residual<M: Mapping + ?Sized>(
    f: &M,
    a: &Element,
    b: &Element,
    c: &Element,
    mu: UnitScalar,
) -> Result<f64> {
    let m = mu.value();
    let x1 = third(&b.scale(m).sub(a)?);
    let x2 = third(&a.sub(&c.scale_real(3.0))?);
    let x3 = third_argument(a, b, c)?;
    let fc = f.apply(c)?;
    f.apply(&x1)?
        .add(&f.apply(&x2)?)?
        .add(&f.apply(&x3)?.scale(m))?
        .sub(&f.apply(a)?)?
        .add(&f.apply(&c.square())?)?
        .sub(&fc.square())?
        .op_norm()
}

/// `‖f(a²) − f(a)²‖`.
pub fn jordan_defect<M: Mapping + ?Sized>(f: &M, a: &Element) -> Result<f64> {
    f.apply(&a.square())?.sub(&f.apply(a)?.square())?.op_norm()
}

/// `‖f(a*) − f(a)*‖`.
pub fn star_defect<M: Mapping + ?Sized>(f: &M, a: &Element) -> Result<f64> {
    f.apply(&a.involution())?.sub(&f.apply(a)?.involution())?.op_norm()
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Names of the additivity derivation steps, in order.
pub const DERIVATION_STEPS: [&str; 6] = ["f(0)=0", "oddness", "doubling", "tripling", "three_term", "additivity"];

/// Replays the derivation "three-term inequality ⇒ additive" on samples:
/// `f(0) = 0`, oddness, `f(2c) = 2f(c)`, `f(3c) = 3f(c)`, the reduced identity
/// `f(b/3) + f(−c) + f(c − b/3) = 0`, and finally `f(s+t) = f(s) + f(t)`.
/// One report per step, in that order.
pub fn additivity_derivation_steps<M: Mapping + ?Sized>(f: &M, sampling: &SampleSpec, tol: f64) -> Result<Vec<CheckReport>> {
    require_samples(sampling.samples, 1)?;
    let dim = f.domain_dim();
    let zero = Element::zeros(dim);
    let f0 = f.apply(&zero)?.op_norm()?;
    let mut reports = vec![CheckReport::from_witnesses(
        DERIVATION_STEPS[0],
        tol,
        vec![Witness::new(0, f0, 0.0, 1.0).with_a(&zero)],
    )];

    let rows = collect(map_indexed(sampling.samples, |idx| -> Result<[Witness; 5]> {
        let (_, b, c) = sampling.triple(idx, dim);
        let nb = b.op_norm()?;
        let nc = c.op_norm()?;
        let fc = f.apply(&c)?;
        let sc = 1.0 + nc;
        let odd = f.apply(&c.neg())?.add(&fc)?.op_norm()?;
        let dbl = f.apply(&c.scale_real(2.0))?.sub(&fc.scale_real(2.0))?.op_norm()?;
        let tpl = f.apply(&c.scale_real(3.0))?.sub(&fc.scale_real(3.0))?.op_norm()?;
        let b3 = third(&b);
        let three = f
            .apply(&b3)?
            .add(&f.apply(&c.neg())?)?
            .add(&f.apply(&c.sub(&b3)?)?)?
            .op_norm()?;
        let add = f.apply(&b.add(&c)?)?.sub(&f.apply(&b)?)?.sub(&fc)?.op_norm()?;
        let sbc = 1.0 + nb.max(nc);
        Ok([
            Witness::new(idx, odd, 0.0, sc).with_c(&c),
            Witness::new(idx, dbl, 0.0, sc).with_c(&c),
            Witness::new(idx, tpl, 0.0, sc).with_c(&c),
            Witness::new(idx, three, 0.0, sbc).with_b(&b).with_c(&c),
            Witness::new(idx, add, 0.0, sbc).with_b(&b).with_c(&c),
        ])
    }))?;
    let mut columns: [Vec<Witness>; 5] = Default::default();
    for row in rows {
        for (col, w) in columns.iter_mut().zip(row) {
            col.push(w);
        }
    }
    for (name, col) in DERIVATION_STEPS[1..].iter().zip(columns) {
        reports.push(CheckReport::from_witnesses(*name, tol, col));
    }
    Ok(reports)
}

/// `|lhs − rhs|` of the three-term inequality on random triples. Zero for
/// every additive map.
pub fn telescoping_check<M: Mapping + ?Sized>(f: &M, sampling: &SampleSpec, tol: f64) -> Result<CheckReport> {
    require_samples(sampling.samples, 1)?;
    let dim = f.domain_dim();
    let ws = collect(map_indexed(sampling.samples, |idx| -> Result<Witness> {
        let (a, b, c) = sampling.triple(idx, dim);
        let (lhs, rhs) = three_term_inequality(f, &a, &b, &c)?;
        let scale = 1.0 + a.op_norm()?.max(b.op_norm()?).max(c.op_norm()?);
        Ok(Witness::new(idx, (lhs - rhs).abs(), 0.0, scale)
            .with_a(&a)
            .with_b(&b)
            .with_c(&c))
    }))?;
    Ok(CheckReport::from_witnesses("telescoping", tol, ws))
}

/// The three-term inequality `lhs ≤ rhs` itself on random triples.
pub fn three_term_inequality_check<M: Mapping + ?Sized>(f: &M, sampling: &SampleSpec, tol: f64) -> Result<CheckReport> {
    require_samples(sampling.samples, 1)?;
    let dim = f.domain_dim();
    let ws = collect(map_indexed(sampling.samples, |idx| -> Result<Witness> {
        let (a, b, c) = sampling.triple(idx, dim);
        let (lhs, rhs) = three_term_inequality(f, &a, &b, &c)?;
        let scale = 1.0 + a.op_norm()?.max(b.op_norm()?).max(c.op_norm()?);
        Ok(Witness::new(idx, lhs, rhs, scale).with_a(&a).with_b(&b).with_c(&c))
    }))?;
    Ok(CheckReport::from_witnesses("three_term_inequality", tol, ws))
}

/// The circle-twisted inequality at the substitution `a = b = 0` over the
/// whole grid (where it reads `‖f(−μc) + μf(c)‖ ≤ ‖f(0)‖`), plus random
/// triples at `μ = 1`.
pub fn circle_inequality_check<M: Mapping + ?Sized>(
    f: &M,
    sampling: &SampleSpec,
    grid: &MuGrid,
    tol: f64,
) -> Result<CheckReport> {
    require_samples(sampling.samples, 1)?;
    let dim = f.domain_dim();
    let zero = Element::zeros(dim);
    let rows = collect(map_indexed(sampling.samples, |idx| -> Result<Vec<Witness>> {
        let (a, b, c) = sampling.triple(idx, dim);
        let nc = c.op_norm()?;
        let mut out = Vec::with_capacity(grid.len() + 1);
        for &mu in grid.values() {
            let (lhs, rhs) = circle_three_term_inequality(f, &zero, &zero, &c, mu)?;
            out.push(Witness::new(idx, lhs, rhs, 1.0 + nc).with_c(&c).with_mu(mu));
        }
        let (lhs, rhs) = circle_three_term_inequality(f, &a, &b, &c, UnitScalar::ONE)?;
        let scale = 1.0 + a.op_norm()?.max(b.op_norm()?).max(nc);
        out.push(
            Witness::new(idx, lhs, rhs, scale)
                .with_a(&a)
                .with_b(&b)
                .with_c(&c)
                .with_mu(UnitScalar::ONE),
        );
        Ok(out)
    }))?;
    Ok(CheckReport::from_witnesses(
        "circle_inequality",
        tol,
        rows.into_iter().flatten().collect(),
    ))
}

/// Full μ-grid sweep of the joint equation residual on random triples.
/// Reported, never asserted: for `μ ≠ 1` the expression does not vanish even
/// for exact maps.
pub fn joint_equation_mu_sweep<M: Mapping + ?Sized>(f: &M, sampling: &SampleSpec, grid: &MuGrid) -> Result<CheckReport> {
    require_samples(sampling.samples, 1)?;
    let dim = f.domain_dim();
    let rows = collect(map_indexed(sampling.samples, |idx| -> Result<Vec<Witness>> {
        let (a, b, c) = sampling.triple(idx, dim);
        let scale = 1.0 + a.op_norm()?.max(b.op_norm()?).max(c.op_norm()?);
        grid.values()
            .iter()
            .map(|&mu| {
                let r = joint_equation_residual(f, &a, &b, &c, mu)?;
                Ok(Witness::new(idx, r, 0.0, scale)
                    .with_a(&a)
                    .with_b(&b)
                    .with_c(&c)
                    .with_mu(mu))
            })
            .collect()
    }))?;
    Ok(CheckReport::from_witnesses("joint_equation_mu_sweep", 0.0, rows.into_iter().flatten().collect()).report_only())
}

/// Which way the decay sequence rescales its argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayScaling {
    /// `d_n = n⁻² ‖f(n²a²) − f(na)²‖`; decays for defect exponents `p < 1`.
    Grow,
    /// `d_n = n² ‖f(a²/n²) − f(a/n)²‖`; decays for `p > 1`.
    Shrink,
}

impl DecayScaling {
    /// Exponent of `n` in the bound on `d_n` for defect exponent `p`.
    pub fn expected_slope(self, p: f64) -> f64 {
        match self {
            DecayScaling::Grow => 2.0 * p - 2.0,
            DecayScaling::Shrink => 2.0 - 2.0 * p,
        }
    }

    pub fn for_exponent(p: f64) -> Self {
        if p > 1.0 {
            DecayScaling::Shrink
        } else {
            DecayScaling::Grow
        }
    }
}

/// The superstability sequence `d_1, …, d_{n_max}`, returned as computed.
pub fn superstability_decay<M: Mapping + ?Sized>(
    f: &M,
    a: &Element,
    n_max: usize,
    scaling: DecayScaling,
) -> Result<Vec<f64>> {
    if n_max < 2 {
        return Err(Error::InvalidSpec(format!("n_max must be >= 2, got {n_max}")));
    }
    let a2 = a.square();
    (1..=n_max)
        .map(|n| {
            let nf = n as f64;
            let (arg, sq_arg, weight) = match scaling {
                DecayScaling::Grow => (a.scale_real(nf), a2.scale_real(nf * nf), 1.0 / (nf * nf)),
                DecayScaling::Shrink => (a.div_real(nf), a2.div_real(nf * nf), nf * nf),
            };
            let big = sq_arg.op_norm()?.max(arg.op_norm()?);
            if !(big <= DECAY_OVERFLOW_NORM) {
                return Err(Error::Overflow(format!("‖n²a²‖ = {big:e} at n = {n}")));
            }
            let d = f.apply(&sq_arg)?.sub(&f.apply(&arg)?.square())?.op_norm()?;
            Ok(weight * d)
        })
        .collect()
}

/// Least-squares slope of `ln d_n` against `ln n` for `n ≥ from` (1-based).
/// `None` when fewer than two points remain or some `d_n` is not positive.
pub fn loglog_slope(seq: &[f64], from: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = seq
        .iter()
        .enumerate()
        .map(|(k, &d)| (k + 1, d))
        .filter(|&(n, _)| n >= from.max(1))
        .map(|(n, d)| ((n as f64).ln(), d))
        .collect();
    if pts.len() < 2 || pts.iter().any(|&(_, d)| !(d > 0.0)) {
        return None;
    }
    let pts: Vec<(f64, f64)> = pts.into_iter().map(|(x, d)| (x, d.ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}
