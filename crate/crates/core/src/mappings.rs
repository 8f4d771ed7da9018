//! Finitely described mappings `f: A → B` between matrix algebras.
//!
//! The exact kinds are linear and preserve squares and adjoints, with two
//! deliberate exceptions kept as counterexamples: [`MapKind::Negation`]
//! (linear and `*`-preserving but `(-a)² ≠ -(a²)`) and [`MapKind::Shift`]
//! (affine, so `f(0) ≠ 0`).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::algebra::Element;
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::sampling::{MuGrid, SampleSpec};

/// Anything that can be evaluated pointwise as a map between matrix algebras.
pub trait Mapping: Sync {
    fn domain_dim(&self) -> usize;
    fn codomain_dim(&self) -> usize;
    fn apply(&self, a: &Element) -> Result<Element>;

    /// Growth exponent of the known perturbation, when there is one.
    fn perturbation_exponent(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// `ε(a) = θ‖a‖^p · dir(a)`.
    PowerNorm,
    /// `ε(a) = θ · dir(a)` for `a ≠ 0`.
    Constant,
}

/// How the perturbation direction depends on the argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionField {
    /// The fixed direction matrix.
    #[default]
    Fixed,
    /// `tr(a)/|tr(a)| · direction`, and zero when `tr(a) = 0`. This field is
    /// odd, so the perturbed map is odd as well.
    TracePhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub theta: f64,
    pub p: f64,
    pub direction: Element,
    pub mode: PerturbationMode,
    #[serde(default)]
    pub field: DirectionField,
}

impl PerturbationSpec {
    pub fn power_norm(theta: f64, p: f64, direction: Element) -> Self {
        PerturbationSpec {
            theta,
            p,
            direction,
            mode: PerturbationMode::PowerNorm,
            field: DirectionField::Fixed,
        }
    }

    pub fn constant(theta: f64, direction: Element) -> Self {
        PerturbationSpec {
            theta,
            p: 0.0,
            direction,
            mode: PerturbationMode::Constant,
            field: DirectionField::Fixed,
        }
    }

    pub fn with_field(mut self, field: DirectionField) -> Self {
        self.field = field;
        self
    }

    /// Growth exponent of `‖ε(a)‖` in `‖a‖`; zero for the constant mode.
    pub fn exponent(&self) -> f64 {
        match self.mode {
            PerturbationMode::PowerNorm => self.p,
            PerturbationMode::Constant => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidSpec(format!("theta {} must be finite and >= 0", self.theta)));
        }
        if !self.p.is_finite() {
            return Err(Error::InvalidSpec("perturbation exponent must be finite".into()));
        }
        let n = self.direction.op_norm()?;
        if n > 1.0 + 1e-12 {
            return Err(Error::InvalidSpec(format!("direction has norm {n} > 1")));
        }
        Ok(())
    }

    /// The perturbation term `ε(a)`. `ε(0) = 0` in every mode.
    pub fn eval(&self, a: &Element) -> Result<Element> {
        let d = self.direction.dim();
        if a.is_zero() || self.theta == 0.0 {
            return Ok(Element::zeros(d));
        }
        let magnitude = match self.mode {
            PerturbationMode::PowerNorm => self.theta * a.op_norm()?.powf(self.p),
            PerturbationMode::Constant => self.theta,
        };
        let phase = match self.field {
            DirectionField::Fixed => Complex64::new(1.0, 0.0),
            DirectionField::TracePhase => {
                let t = a.trace();
                if t.norm() == 0.0 {
                    return Ok(Element::zeros(d));
                }
                t / t.norm()
            }
        };
        let out = self.direction.scale(phase * magnitude);
        if !out.is_finite() {
            return Err(Error::Overflow("perturbation term is not finite".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapKind {
    Identity,
    Transpose,
    /// `a ↦ u a u*` for a unitary `u`.
    UnitaryConjugation { u: Element },
    Negation,
    Zero,
    /// `a ↦ a ⊕ 0` into an algebra with `extra` more rows and columns.
    CornerEmbedding { extra: usize },
    /// `a ↦ a + offset`.
    Shift { offset: Element },
    Perturbed {
        base: Box<MapSpec>,
        perturbation: PerturbationSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub kind: MapKind,
    pub domain_dim: usize,
    pub codomain_dim: usize,
}

impl MapSpec {
    fn same_dim(kind: MapKind, dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        MapSpec {
            kind,
            domain_dim: dim,
            codomain_dim: dim,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::same_dim(MapKind::Identity, dim)
    }

    pub fn transpose(dim: usize) -> Self {
        Self::same_dim(MapKind::Transpose, dim)
    }

    pub fn negation(dim: usize) -> Self {
        Self::same_dim(MapKind::Negation, dim)
    }

    pub fn zero(dim: usize) -> Self {
        Self::same_dim(MapKind::Zero, dim)
    }

    pub fn unitary_conjugation(u: Element) -> Result<Self> {
        let dim = u.dim();
        let spec = Self::same_dim(MapKind::UnitaryConjugation { u }, dim);
        spec.validate()?;
        Ok(spec)
    }

    pub fn corner_embedding(dim: usize, extra: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        MapSpec {
            kind: MapKind::CornerEmbedding { extra },
            domain_dim: dim,
            codomain_dim: dim + extra,
        }
    }

    pub fn shift(offset: Element) -> Self {
        let d = offset.dim();
        Self::same_dim(MapKind::Shift { offset }, d)
    }

    pub fn perturbed(base: MapSpec, perturbation: PerturbationSpec) -> Result<Self> {
        let spec = MapSpec {
            domain_dim: base.domain_dim,
            codomain_dim: base.codomain_dim,
            kind: MapKind::Perturbed {
                base: Box::new(base),
                perturbation,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the structural invariants; deserialized specs should pass
    /// through here before use.
    pub fn validate(&self) -> Result<()> {
        if self.domain_dim < 1 || self.codomain_dim < 1 {
            return Err(Error::InvalidSpec("map dimensions must be >= 1".into()));
        }
        let expect_codomain = match &self.kind {
            MapKind::CornerEmbedding { extra } => self.domain_dim + extra,
            MapKind::Perturbed { base, .. } => base.codomain_dim,
            _ => self.domain_dim,
        };
        if self.codomain_dim != expect_codomain {
            return Err(Error::InvalidSpec(format!(
                "codomain_dim {} does not match map kind (expected {expect_codomain})",
                self.codomain_dim
            )));
        }
        match &self.kind {
            MapKind::UnitaryConjugation { u } => {
                if u.dim() != self.domain_dim {
                    return Err(Error::DimensionMismatch {
                        left: u.dim(),
                        right: self.domain_dim,
                    });
                }
                let defect = u.involution().mul(u)?.sub(&Element::identity(u.dim()))?.op_norm()?;
                if defect > 1e-10 {
                    return Err(Error::InvalidSpec(format!("u is not unitary: ‖u*u − I‖ = {defect:e}")));
                }
            }
            MapKind::Shift { offset } => {
                if offset.dim() != self.domain_dim {
                    return Err(Error::DimensionMismatch {
                        left: offset.dim(),
                        right: self.domain_dim,
                    });
                }
            }
            MapKind::Perturbed { base, perturbation } => {
                if matches!(base.kind, MapKind::Perturbed { .. }) {
                    return Err(Error::InvalidSpec("perturbations cannot be nested".into()));
                }
                if base.domain_dim != self.domain_dim {
                    return Err(Error::DimensionMismatch {
                        left: base.domain_dim,
                        right: self.domain_dim,
                    });
                }
                base.validate()?;
                if perturbation.direction.dim() != self.codomain_dim {
                    return Err(Error::DimensionMismatch {
                        left: perturbation.direction.dim(),
                        right: self.codomain_dim,
                    });
                }
                perturbation.validate()?;
            }
            _ => {}
        }
        Ok(())
    }

    /// The perturbation, if this map is a perturbed one.
    pub fn perturbation(&self) -> Option<&PerturbationSpec> {
        match &self.kind {
            MapKind::Perturbed { perturbation, .. } => Some(perturbation),
            _ => None,
        }
    }

    /// The unperturbed map underneath, or `self`.
    pub fn base(&self) -> &MapSpec {
        match &self.kind {
            MapKind::Perturbed { base, .. } => base,
            _ => self,
        }
    }

    /// Whether this kind is a Jordan `*`-homomorphism by construction.
    pub fn is_exact_kind(&self) -> bool {
        matches!(
            self.kind,
            MapKind::Identity
                | MapKind::Transpose
                | MapKind::UnitaryConjugation { .. }
                | MapKind::Zero
                | MapKind::CornerEmbedding { .. }
        )
    }

    pub fn evaluate(&self, a: &Element) -> Result<Element> {
        if a.dim() != self.domain_dim {
            return Err(Error::DimensionMismatch {
                left: a.dim(),
                right: self.domain_dim,
            });
        }
        match &self.kind {
            MapKind::Identity => Ok(a.clone()),
            MapKind::Transpose => Ok(a.transpose()),
            MapKind::UnitaryConjugation { u } => u.mul(a)?.mul(&u.involution()),
            MapKind::Negation => Ok(a.neg()),
            MapKind::Zero => Ok(Element::zeros(self.codomain_dim)),
            MapKind::CornerEmbedding { extra } => Ok(a.embed_corner(*extra)),
            MapKind::Shift { offset } => a.add(offset),
            MapKind::Perturbed { base, perturbation } => base.evaluate(a)?.add(&perturbation.eval(a)?),
        }
    }
}

impl Mapping for MapSpec {
    fn domain_dim(&self) -> usize {
        self.domain_dim
    }

    fn codomain_dim(&self) -> usize {
        self.codomain_dim
    }

    fn apply(&self, a: &Element) -> Result<Element> {
        self.evaluate(a)
    }

    fn perturbation_exponent(&self) -> Option<f64> {
        self.perturbation().map(PerturbationSpec::exponent)
    }
}

impl<M: Mapping + ?Sized> Mapping for &M {
    fn domain_dim(&self) -> usize {
        (**self).domain_dim()
    }

    fn codomain_dim(&self) -> usize {
        (**self).codomain_dim()
    }

    fn apply(&self, a: &Element) -> Result<Element> {
        (**self).apply(a)
    }

    fn perturbation_exponent(&self) -> Option<f64> {
        (**self).perturbation_exponent()
    }
}

/// The four defining identities of a Jordan `*`-homomorphism (with additivity
/// and circle homogeneity standing in for ℂ-linearity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JordanProperty {
    Squares,
    Adjoint,
    Additive,
    Homogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactnessWitness {
    pub property: JordanProperty,
    pub sample: usize,
    pub residual: f64,
    pub scale: f64,
    pub a: Element,
    pub b: Option<Element>,
    pub mu: Option<Complex64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactnessReport {
    pub exact: bool,
    pub samples: usize,
    pub tol: f64,
    pub max_squares: f64,
    pub max_adjoint: f64,
    pub max_additive: f64,
    pub max_homogeneous: f64,
    /// Largest `residual / scale`, with its inputs.
    pub worst: Option<ExactnessWitness>,
}

fn consider(worst: &mut Option<ExactnessWitness>, w: ExactnessWitness) {
    let better = match worst {
        None => true,
        Some(cur) => w.residual / w.scale > cur.residual / cur.scale,
    };
    if better {
        *worst = Some(w);
    }
}

/// Samples `‖f(a²)−f(a)²‖`, `‖f(a*)−f(a)*‖`, `‖f(a+b)−f(a)−f(b)‖` and
/// `‖f(μa)−μf(a)‖` over the μ grid. A residual passes when it is at most
/// `tol · (1 + largest norm fed to f)`.
pub fn is_exact_jordan_star<M: Mapping + ?Sized>(
    f: &M,
    sampling: &SampleSpec,
    grid: &MuGrid,
    tol: f64,
) -> Result<ExactnessReport> {
    crate::sampling::require_samples(sampling.samples, 1)?;
    let dim = f.domain_dim();
    let per_sample = map_indexed(sampling.samples, |idx| -> Result<Vec<ExactnessWitness>> {
        let a = sampling.element(idx, 0, dim);
        let b = sampling.element(idx, 1, dim);
        let na = a.op_norm()?;
        let nb = b.op_norm()?;
        let fa = f.apply(&a)?;
        let mut out = Vec::new();

        let a2 = a.square();
        let sq = f.apply(&a2)?.sub(&fa.square())?.op_norm()?;
        out.push(ExactnessWitness {
            property: JordanProperty::Squares,
            sample: idx,
            residual: sq,
            scale: 1.0 + na.max(a2.op_norm()?),
            a: a.clone(),
            b: None,
            mu: None,
        });

        let adj = f.apply(&a.involution())?.sub(&fa.involution())?.op_norm()?;
        out.push(ExactnessWitness {
            property: JordanProperty::Adjoint,
            sample: idx,
            residual: adj,
            scale: 1.0 + na,
            a: a.clone(),
            b: None,
            mu: None,
        });

        let sum = a.add(&b)?;
        let add = f.apply(&sum)?.sub(&fa)?.sub(&f.apply(&b)?)?.op_norm()?;
        out.push(ExactnessWitness {
            property: JordanProperty::Additive,
            sample: idx,
            residual: add,
            scale: 1.0 + na.max(nb).max(sum.op_norm()?),
            a: a.clone(),
            b: Some(b.clone()),
            mu: None,
        });

        for mu in grid.values() {
            let m = mu.value();
            let r = f.apply(&a.scale(m))?.sub(&fa.scale(m))?.op_norm()?;
            out.push(ExactnessWitness {
                property: JordanProperty::Homogeneous,
                sample: idx,
                residual: r,
                scale: 1.0 + na,
                a: a.clone(),
                b: None,
                mu: Some(m),
            });
        }
        Ok(out)
    });

    let mut report = ExactnessReport {
        exact: true,
        samples: sampling.samples,
        tol,
        max_squares: 0.0,
        max_adjoint: 0.0,
        max_additive: 0.0,
        max_homogeneous: 0.0,
        worst: None,
    };
    for ws in per_sample {
        for w in ws? {
            let slot = match w.property {
                JordanProperty::Squares => &mut report.max_squares,
                JordanProperty::Adjoint => &mut report.max_adjoint,
                JordanProperty::Additive => &mut report.max_additive,
                JordanProperty::Homogeneous => &mut report.max_homogeneous,
            };
            *slot = slot.max(w.residual);
            if w.residual > tol * w.scale {
                report.exact = false;
            }
            consider(&mut report.worst, w);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{fourier_unitary, random_element, random_unitary};

    fn sampling() -> SampleSpec {
        SampleSpec::new(42, 50, 10.0)
    }

    #[test]
    fn identity_and_transpose_evaluate() {
        let x = random_element(1, 3, 2.0);
        assert_eq!(MapSpec::identity(3).evaluate(&x).unwrap(), x);
        let n = Element::unit(2, 0, 1);
        assert_eq!(MapSpec::transpose(2).evaluate(&n).unwrap(), Element::unit(2, 1, 0));
    }

    #[test]
    fn constant_perturbation_evaluates() {
        let i = Element::identity(2);
        let dir = i.div_real(i.op_norm().unwrap());
        let f = MapSpec::perturbed(MapSpec::identity(2), PerturbationSpec::constant(0.5, dir.clone())).unwrap();
        let x = random_element(3, 2, 1.0);
        let expected = x.add(&dir.scale_real(0.5)).unwrap();
        assert!(f.evaluate(&x).unwrap().max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(f.evaluate(&Element::zeros(2)).unwrap().is_zero());
    }

    #[test]
    fn evaluate_rejects_wrong_dim() {
        let err = MapSpec::identity(2).evaluate(&Element::identity(3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn spec_validation() {
        let not_unitary = Element::identity(2).scale_real(2.0);
        assert!(MapSpec::unitary_conjugation(not_unitary).is_err());
        let big = Element::identity(2).scale_real(3.0);
        assert!(MapSpec::perturbed(MapSpec::identity(2), PerturbationSpec::constant(1.0, big)).is_err());
        let dir = Element::unit(2, 0, 1);
        let once = MapSpec::perturbed(MapSpec::identity(2), PerturbationSpec::constant(1.0, dir.clone())).unwrap();
        assert!(MapSpec::perturbed(once, PerturbationSpec::constant(1.0, dir.clone())).is_err());
        assert!(MapSpec::perturbed(MapSpec::identity(2), PerturbationSpec::constant(-1.0, dir)).is_err());
    }

    #[test]
    fn transpose_is_exact_jordan_star() {
        let r = is_exact_jordan_star(&MapSpec::transpose(3), &sampling(), &MuGrid::default(), 1e-10).unwrap();
        assert!(r.exact, "{r:?}");
    }

    #[test]
    fn transpose_entrywise_witnesses() {
        // (a*)ᵀ = conj(a) = (aᵀ)* and (a²)ᵀ = (aᵀ)², checked entry by entry.
        let a = random_element(8, 3, 3.0);
        let at = a.transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.involution().transpose().get(i, j), a.get(i, j).conj());
                assert_eq!(at.involution().get(i, j), a.get(i, j).conj());
                let sq_t: Complex64 = (0..3).map(|k| a.get(j, k) * a.get(k, i)).sum();
                assert!((at.square().get(i, j) - sq_t).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn unitary_conjugation_is_exact() {
        for u in [fourier_unitary(3), random_unitary(5, 3)] {
            let f = MapSpec::unitary_conjugation(u.clone()).unwrap();
            let r = is_exact_jordan_star(&f, &sampling(), &MuGrid::default(), 1e-10).unwrap();
            assert!(r.exact, "{r:?}");
            // Oracle: (u a u*)(u a u*) = u a² u*.
            let a = random_element(9, 3, 2.0);
            let lhs = f.evaluate(&a).unwrap().square();
            let rhs = u.mul(&a.square()).unwrap().mul(&u.involution()).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }
    }

    #[test]
    fn constant_perturbation_is_not_exact() {
        let dir = Element::identity(2).div_real(Element::identity(2).op_norm().unwrap());
        let f = MapSpec::perturbed(MapSpec::identity(2), PerturbationSpec::constant(0.1, dir)).unwrap();
        let r = is_exact_jordan_star(&f, &sampling(), &MuGrid::default(), 1e-10).unwrap();
        assert!(!r.exact);
        let w = r.worst.unwrap();
        assert!(w.residual > 0.05 && w.residual < 0.1 * 20.0 * 3.0, "{w:?}");
    }

    #[test]
    fn negation_fails_squares_and_zero_map_passes() {
        let r = is_exact_jordan_star(&MapSpec::negation(2), &sampling(), &MuGrid::new(4), 1e-10).unwrap();
        assert!(!r.exact);
        assert_eq!(r.worst.unwrap().property, JordanProperty::Squares);
        let z = is_exact_jordan_star(&MapSpec::zero(2), &sampling(), &MuGrid::new(4), 1e-12).unwrap();
        assert!(z.exact);
    }

    #[test]
    fn corner_embedding_is_exact() {
        let f = MapSpec::corner_embedding(2, 2);
        assert_eq!(f.codomain_dim, 4);
        let r = is_exact_jordan_star(&f, &sampling(), &MuGrid::default(), 1e-12).unwrap();
        assert!(r.exact);
    }

    #[test]
    fn transpose_is_not_multiplicative() {
        let f = MapSpec::transpose(2);
        let found = (0..100).any(|s| {
            let a = random_element(2 * s, 2, 5.0);
            let b = random_element(2 * s + 1, 2, 5.0);
            let lhs = f.evaluate(&a.mul(&b).unwrap()).unwrap();
            let rhs = f.evaluate(&a).unwrap().mul(&f.evaluate(&b).unwrap()).unwrap();
            lhs.sub(&rhs).unwrap().op_norm().unwrap() > 0.1
        });
        assert!(found);
    }

    #[test]
    fn perturbed_distance_matches_power_law() {
        let dir = Element::unit(3, 0, 2);
        let pert = PerturbationSpec::power_norm(0.3, 1.7, dir);
        let f = MapSpec::perturbed(MapSpec::transpose(3), pert).unwrap();
        for s in 0..30 {
            let a = random_element(s, 3, 4.0);
            let d = f.evaluate(&a).unwrap().sub(&a.transpose()).unwrap().op_norm().unwrap();
            let expected = 0.3 * a.op_norm().unwrap().powf(1.7);
            assert!((d - expected).abs() <= 1e-10 * expected.max(1e-300));
        }
    }

    #[test]
    fn trace_phase_field_is_odd() {
        let dir = Element::unit(3, 0, 1);
        let pert = PerturbationSpec::power_norm(0.01, 2.0, dir).with_field(DirectionField::TracePhase);
        for s in 0..20 {
            let a = random_element(s, 3, 2.0);
            let plus = pert.eval(&a).unwrap();
            let minus = pert.eval(&a.neg()).unwrap();
            assert!(plus.add(&minus).unwrap().max_abs() < 1e-16);
        }
        let traceless = Element::unit(3, 1, 2);
        assert!(pert.eval(&traceless).unwrap().is_zero());
    }

    #[test]
    fn map_spec_json_roundtrip() {
        let dir = Element::unit(2, 0, 1);
        let f = MapSpec::perturbed(MapSpec::identity(2), PerturbationSpec::power_norm(0.5, 2.0, dir)).unwrap();
        let json = serde_json::to_string(&f).unwrap();
        let back: MapSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f);
    }
}
