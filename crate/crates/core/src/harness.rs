//! JSON-configured experiment runner.
//!
//! A config names an algebra, a map family, an optional control function and
//! the sampling plan. Each `cmd_*` function runs one experiment and returns a
//! [`RunSummary`]; [`write_report`] renders it as JSON (everything) or CSV
//! (the per-sample table). Reports carry no timestamp, so the same config and
//! seed always give the same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algebra::{fourier_unitary, random_unitary, AlgebraSpec, Element};
use crate::checkers::{
    additivity_derivation_steps, circle_inequality_check, joint_equation_mu_sweep, loglog_slope,
    superstability_decay, telescoping_check, three_term_inequality_check, CheckReport, DecayScaling, Verdict, Witness,
};
use crate::error::{Error, Result};
use crate::mappings::{is_exact_jordan_star, DirectionField, MapSpec, Mapping, PerturbationMode, PerturbationSpec};
use crate::parallel::map_indexed;
use crate::sampling::{MuGrid, SampleSpec};
use crate::stabilizer::{
    bound_series_truncated, calibrate_phi, stabilize_point, verify_uniqueness, BoundSpec, Direction, PsiProfile,
    SeriesConditions, StabilizedMap, StabilizerConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATED: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Tolerance, in units of `1 + ‖a‖`, on the stability certificate
/// `‖h(a) − f(a)‖ ≤ closed-form bound`.
pub const CERTIFICATE_TOL: f64 = 1e-9;

/// A matrix described independently of the dimension it is used in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "matrix", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixRef {
    Identity,
    /// `I`, already of norm one.
    IdentityNormalized,
    /// `E_{01}`.
    Nilpotent,
    /// `E_{m−2, m−1}`, the nilpotent in the bottom-right 2×2 corner.
    CornerNilpotent,
    Fourier,
    RandomUnitary { seed: u64 },
    Explicit { value: Element },
}

impl MatrixRef {
    pub fn resolve(&self, dim: usize) -> Result<Element> {
        let need_two = || {
            if dim < 2 {
                Err(Error::InvalidSpec(format!("{self:?} needs dimension >= 2, got {dim}")))
            } else {
                Ok(())
            }
        };
        Ok(match self {
            MatrixRef::Identity | MatrixRef::IdentityNormalized => Element::identity(dim),
            MatrixRef::Nilpotent => {
                need_two()?;
                Element::unit(dim, 0, 1)
            }
            MatrixRef::CornerNilpotent => {
                need_two()?;
                Element::unit(dim, dim - 2, dim - 1)
            }
            MatrixRef::Fourier => fourier_unitary(dim),
            MatrixRef::RandomUnitary { seed } => random_unitary(*seed, dim),
            MatrixRef::Explicit { value } => {
                if value.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        left: value.dim(),
                        right: dim,
                    });
                }
                value.clone()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseMapConfig {
    Identity,
    Transpose,
    Negation,
    Zero,
    UnitaryConjugation { u: MatrixRef },
    CornerEmbedding { extra: usize },
    Shift { offset: MatrixRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub mode: PerturbationMode,
    pub theta: f64,
    #[serde(default)]
    pub p: f64,
    pub direction: MatrixRef,
    #[serde(default)]
    pub field: DirectionField,
}

/// Dimension-agnostic map family; [`MapConfig::build`] instantiates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub base: BaseMapConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationConfig>,
}

impl MapConfig {
    pub fn exact(base: BaseMapConfig) -> Self {
        MapConfig {
            base,
            perturbation: None,
        }
    }

    pub fn build(&self, dim: usize) -> Result<MapSpec> {
        let base = match &self.base {
            BaseMapConfig::Identity => MapSpec::identity(dim),
            BaseMapConfig::Transpose => MapSpec::transpose(dim),
            BaseMapConfig::Negation => MapSpec::negation(dim),
            BaseMapConfig::Zero => MapSpec::zero(dim),
            BaseMapConfig::UnitaryConjugation { u } => MapSpec::unitary_conjugation(u.resolve(dim)?)?,
            BaseMapConfig::CornerEmbedding { extra } => MapSpec::corner_embedding(dim, *extra),
            BaseMapConfig::Shift { offset } => MapSpec::shift(offset.resolve(dim)?),
        };
        base.validate()?;
        match &self.perturbation {
            None => Ok(base),
            Some(p) => {
                let direction = p.direction.resolve(base.codomain_dim)?;
                let spec = match p.mode {
                    PerturbationMode::PowerNorm => PerturbationSpec::power_norm(p.theta, p.p, direction),
                    PerturbationMode::Constant => PerturbationSpec::constant(p.theta, direction),
                }
                .with_field(p.field);
                MapSpec::perturbed(base, spec)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub seed: u64,
    pub samples: usize,
    pub norm_cap: f64,
    /// Dimensions to run; defaults to the algebra dimension.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperstabilityConfig {
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    /// First `n` used in the log-log fit.
    #[serde(default = "default_fit_from")]
    pub fit_from: usize,
    /// Allowed excess of the fitted slope over `2p − 2`.
    #[serde(default = "default_slope_margin")]
    pub slope_margin: f64,
    /// Allowed factor on `d_1 · n_max^{2p−2}` for the last term.
    #[serde(default = "default_terminal_factor")]
    pub terminal_factor: f64,
    /// Sequences below this (relative to `1 + ‖a²‖`) count as identically zero.
    #[serde(default = "default_zero_tol")]
    pub zero_tol: f64,
}

fn default_n_max() -> usize {
    64
}
fn default_fit_from() -> usize {
    4
}
fn default_slope_margin() -> f64 {
    0.1
}
fn default_terminal_factor() -> f64 {
    1.1
}
fn default_zero_tol() -> f64 {
    1e-12
}

impl Default for SuperstabilityConfig {
    fn default() -> Self {
        SuperstabilityConfig {
            n_max: default_n_max(),
            fit_from: default_fit_from(),
            slope_margin: default_slope_margin(),
            terminal_factor: default_terminal_factor(),
            zero_tol: default_zero_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsGridConfig {
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
    #[serde(default = "default_forward_exponents")]
    pub forward_exponents: Vec<f64>,
    #[serde(default = "default_backward_exponents")]
    pub backward_exponents: Vec<f64>,
    #[serde(default = "default_norms")]
    pub norms: Vec<f64>,
    #[serde(default = "default_terms")]
    pub terms: usize,
    /// Relative agreement required between closed form and series.
    #[serde(default = "default_agreement_tol")]
    pub agreement_tol: f64,
}

fn default_thetas() -> Vec<f64> {
    vec![1e-3, 1.0, 10.0]
}
fn default_forward_exponents() -> Vec<f64> {
    vec![1.5, 2.0, 3.0]
}
fn default_backward_exponents() -> Vec<f64> {
    vec![0.0, 0.25, 0.5]
}
fn default_norms() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_terms() -> usize {
    60
}
fn default_agreement_tol() -> f64 {
    1e-9
}

impl Default for BoundsGridConfig {
    fn default() -> Self {
        BoundsGridConfig {
            thetas: default_thetas(),
            forward_exponents: default_forward_exponents(),
            backward_exponents: default_backward_exponents(),
            norms: default_norms(),
            terms: default_terms(),
            agreement_tol: default_agreement_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub format: OutputFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub algebra: AlgebraSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSpec>,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub stabilizer: StabilizerConfig,
    #[serde(default = "default_mu_grid_size")]
    pub mu_grid_size: usize,
    /// Tolerance of the sampled checks, relative to the check's scale.
    #[serde(default = "default_check_tol")]
    pub check_tol: f64,
    #[serde(default = "default_exactness_tol")]
    pub exactness_tol: f64,
    #[serde(default)]
    pub superstability: SuperstabilityConfig,
    #[serde(default)]
    pub bounds_grid: BoundsGridConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn default_mu_grid_size() -> usize {
    16
}
fn default_check_tol() -> f64 {
    1e-9
}
fn default_exactness_tol() -> f64 {
    1e-8
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(".", format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(config_err(
                "schema",
                format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema),
            ));
        }
        self.algebra.validate().map_err(|e| config_err("algebra", e.to_string()))?;
        if self.dims().iter().any(|&d| d < 1) {
            return Err(config_err("sampling.dims", "every dimension must be >= 1"));
        }
        if self.sampling.samples < 1 {
            return Err(config_err("sampling.samples", "must be >= 1"));
        }
        if !(self.sampling.norm_cap >= 0.0 && self.sampling.norm_cap.is_finite()) {
            return Err(config_err("sampling.norm_cap", "must be finite and >= 0"));
        }
        self.stabilizer.validate().map_err(|e| config_err("stabilizer", e.to_string()))?;
        for (name, v) in [("check_tol", self.check_tol), ("exactness_tol", self.exactness_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(name, "must be positive"));
            }
        }
        if let Some(b) = &self.bound {
            b.validate().map_err(|e| config_err("bound", e.to_string()))?;
        }
        if self.superstability.n_max < 2 {
            return Err(config_err("superstability.n_max", "must be >= 2"));
        }
        if self.bounds_grid.terms < 1 {
            return Err(config_err("bounds_grid.terms", "must be >= 1"));
        }
        if let Some(m) = &self.map {
            for &d in &self.dims() {
                m.build(d).map_err(|e| config_err("map", format!("dim {d}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        if self.sampling.dims.is_empty() {
            vec![self.algebra.dim]
        } else {
            self.sampling.dims.clone()
        }
    }

    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec::new(self.sampling.seed, self.sampling.samples, self.sampling.norm_cap)
    }

    pub fn mu_grid(&self) -> MuGrid {
        MuGrid::new(self.mu_grid_size)
    }

    /// SHA-256 of the canonical JSON form of the config, output settings
    /// excluded.
    pub fn digest(&self) -> String {
        let canonical = ExperimentConfig {
            outputs: OutputConfig::default(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn require_map(&self) -> Result<&MapConfig> {
        self.map.as_ref().ok_or_else(|| config_err("map", "this command needs a map"))
    }

    fn require_bound(&self) -> Result<&BoundSpec> {
        self.bound.as_ref().ok_or_else(|| config_err("bound", "this command needs a bound"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunVerdict {
    Satisfied,
    Violated,
    Diverged,
}

impl RunVerdict {
    pub fn exit_code(self) -> i32 {
        match self {
            RunVerdict::Satisfied => EXIT_OK,
            RunVerdict::Violated => EXIT_VIOLATED,
            RunVerdict::Diverged => EXIT_DIVERGED,
        }
    }
}

/// Trace of a stabilization run that failed to converge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceRecord {
    pub dim: usize,
    pub sample: usize,
    pub direction: Direction,
    /// `false` when the iteration simply ran out of steps.
    pub growing: bool,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub dim: usize,
    pub sample: usize,
    pub norm_a: f64,
    pub iterations: usize,
    pub direction: Direction,
    /// `‖h(a) − f(a)‖`.
    pub distance: f64,
    /// Closed-form bound with the calibrated control.
    pub bound: f64,
    pub slack: f64,
    pub certified_bound: f64,
    pub cauchy_residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub dim: usize,
    pub sample: usize,
    pub norm_a: f64,
    pub d_first: f64,
    pub d_last: f64,
    pub slope: Option<f64>,
    pub expected_slope: Option<f64>,
    pub sequence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub kind: &'static str,
    pub direction: Direction,
    pub theta: f64,
    pub p: f64,
    pub norm_a: f64,
    pub closed_form: f64,
    pub series: f64,
    pub relative_gap: f64,
    pub agree: bool,
    /// Whether the row takes part in the agreement check.
    pub asserted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Rows {
    None,
    Stability(Vec<StabilityRow>),
    Decay(Vec<DecayRow>),
    Bounds(Vec<BoundRow>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRecord {
    pub dim: usize,
    pub bound: BoundSpec,
    pub sweep: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub command: &'static str,
    pub schema: u32,
    pub config_digest: String,
    pub seed: u64,
    pub checks: Vec<CheckReport>,
    /// First violated check, in execution order.
    pub first_failure: Option<String>,
    pub rows: Rows,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub calibration: Vec<CalibrationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<SeriesConditions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub verdict: RunVerdict,
}

impl RunSummary {
    fn new(command: &'static str, cfg: &ExperimentConfig) -> Self {
        RunSummary {
            command,
            schema: SCHEMA_VERSION,
            config_digest: cfg.digest(),
            seed: cfg.sampling.seed,
            checks: Vec::new(),
            first_failure: None,
            rows: Rows::None,
            calibration: Vec::new(),
            conditions: None,
            divergence: None,
            failure: None,
            verdict: RunVerdict::Satisfied,
        }
    }

    /// Verdict is the conjunction of the non-vacuous checks, unless a
    /// divergence or failure was already recorded.
    fn finish(mut self) -> Self {
        self.first_failure = self
            .checks
            .iter()
            .find(|c| c.verdict == Verdict::Violated)
            .map(|c| c.name.clone());
        if self.divergence.is_some() {
            self.verdict = RunVerdict::Diverged;
        } else if self.failure.is_some() || self.first_failure.is_some() {
            self.verdict = RunVerdict::Violated;
        }
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.verdict.exit_code()
    }

    pub fn check(&self, name: &str) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn tagged(mut report: CheckReport, dim: usize, multi: bool) -> CheckReport {
    if multi {
        report.name = format!("{}[dim={dim}]", report.name);
    }
    report
}

/// Additivity derivation, telescoping equality and the three-term
/// inequalities on every configured dimension; the joint-equation μ sweep is
/// attached as report-only.
pub fn cmd_lemma_check(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let map_cfg = cfg.require_map()?;
    let s = cfg.sample_spec();
    let grid = cfg.mu_grid();
    let dims = cfg.dims();
    let multi = dims.len() > 1;
    let mut out = RunSummary::new("lemma-check", cfg);
    for &dim in &dims {
        let f = map_cfg.build(dim)?;
        for r in additivity_derivation_steps(&f, &s, cfg.check_tol)? {
            out.checks.push(tagged(r, dim, multi));
        }
        out.checks.push(tagged(telescoping_check(&f, &s, cfg.check_tol)?, dim, multi));
        out.checks
            .push(tagged(three_term_inequality_check(&f, &s, cfg.check_tol)?, dim, multi));
        out.checks
            .push(tagged(circle_inequality_check(&f, &s, &grid, cfg.check_tol)?, dim, multi));
        out.checks.push(tagged(joint_equation_mu_sweep(&f, &s, &grid)?, dim, multi));
    }
    Ok(out.finish())
}

fn exactness_check(name: &str, report: &crate::mappings::ExactnessReport) -> CheckReport {
    let worst = report.worst.as_ref().map(|w| Witness {
        sample: w.sample,
        lhs: w.residual,
        rhs: 0.0,
        scale: w.scale,
        a: Some(w.a.clone()),
        b: w.b.clone(),
        c: None,
        mu: w.mu,
    });
    let max_residual = report
        .max_squares
        .max(report.max_adjoint)
        .max(report.max_additive)
        .max(report.max_homogeneous);
    CheckReport {
        name: name.into(),
        num_samples: report.samples,
        tol: report.tol,
        max_residual,
        max_slack: 0.0,
        min_slack: -max_residual,
        worst_witness: worst,
        verdict: if report.exact { Verdict::Satisfied } else { Verdict::Violated },
    }
}

fn divergence_record(dim: usize, sample: usize, e: &Error) -> Option<DivergenceRecord> {
    match e {
        Error::Diverged { direction, residuals } => Some(DivergenceRecord {
            dim,
            sample,
            direction: *direction,
            growing: true,
            residuals: residuals.clone(),
        }),
        Error::NotConverged { direction, residuals } => Some(DivergenceRecord {
            dim,
            sample,
            direction: *direction,
            growing: false,
            residuals: residuals.clone(),
        }),
        _ => None,
    }
}

/// Calibrates the control, stabilizes every sample, certifies the distance
/// `‖h(a) − f(a)‖` against the closed-form bound, checks that the limit map
/// is an exact Jordan `*`-homomorphism and that the limit is unique.
pub fn cmd_stability(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let map_cfg = cfg.require_map()?;
    let template = cfg.require_bound()?;
    let s = cfg.sample_spec();
    let dims = cfg.dims();
    let multi = dims.len() > 1;
    let mut out = RunSummary::new("stability", cfg);
    let mut rows = Vec::new();

    for &dim in &dims {
        let f = map_cfg.build(dim)?;
        let calibrated = match calibrate_phi(&f, template, &s) {
            Ok(c) => c,
            Err(Error::Calibration(msg)) => {
                out.failure = Some(format!("dim {dim}: calibration failed: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let bound = calibrated.bound;
        out.calibration.push(CalibrationRecord {
            dim,
            bound,
            sweep: calibrated.sweep,
        });

        let runs = map_indexed(s.samples, |idx| {
            let a = s.element(idx, 0, dim);
            (idx, stabilize_point(&f, &a, &cfg.stabilizer).map(|r| (a, r)))
        });
        let mut converged = Vec::with_capacity(runs.len());
        for (idx, run) in runs {
            match run {
                Ok(v) => converged.push((idx, v)),
                Err(e) => match divergence_record(dim, idx, &e) {
                    Some(rec) => {
                        out.divergence = Some(rec);
                        break;
                    }
                    None => return Err(e),
                },
            }
        }
        if out.divergence.is_some() {
            break;
        }

        let direction = converged.first().map(|(_, (_, r))| r.direction).unwrap_or(Direction::Backward);
        out.conditions = Some(bound.conditions(direction));
        let mut witnesses = Vec::with_capacity(converged.len());
        for (idx, (a, r)) in converged {
            let norm_a = cfg.algebra.op_norm(&a)?;
            let distance = cfg.algebra.op_norm(&r.limit.sub(&f.apply(&a)?)?)?;
            let closed = bound
                .closed_form(norm_a, r.direction)
                .map_err(|e| config_err("bound", e.to_string()))?;
            let scale = 1.0 + norm_a;
            witnesses.push(Witness {
                sample: idx,
                lhs: distance,
                rhs: closed,
                scale,
                a: Some(a.clone()),
                b: None,
                c: None,
                mu: None,
            });
            rows.push(StabilityRow {
                dim,
                sample: idx,
                norm_a,
                iterations: r.iterations_used,
                direction: r.direction,
                distance,
                bound: closed,
                slack: closed - distance,
                certified_bound: r.certified_bound,
                cauchy_residuals: r.cauchy_residuals,
            });
        }
        out.checks.push(tagged(
            CheckReport::from_witnesses("stability_certificate", CERTIFICATE_TOL, witnesses),
            dim,
            multi,
        ));

        let limit_map = StabilizedMap::new(&f, cfg.stabilizer);
        let exact = is_exact_jordan_star(&limit_map, &s, &cfg.mu_grid(), cfg.exactness_tol)?;
        out.checks
            .push(tagged(exactness_check("recovered_exactness", &exact), dim, multi));
        out.checks
            .push(tagged(verify_uniqueness(&f, &cfg.stabilizer, &s, cfg.check_tol)?, dim, multi));
    }
    out.rows = Rows::Stability(rows);
    Ok(out.finish())
}

/// Superstability decay on every sample: the log-log slope of `d_n` must not
/// exceed `2p − 2` (or `2 − 2p` for shrinking scaling) by more than the
/// margin, and `d_{n_max}` must stay below `d_1 · n_max^{slope} · factor`.
/// Maps without a perturbation must give identically zero sequences.
pub fn cmd_superstability(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let map_cfg = cfg.require_map()?;
    let s = cfg.sample_spec();
    let ss = cfg.superstability;
    let dims = cfg.dims();
    let multi = dims.len() > 1;
    let mut out = RunSummary::new("superstability", cfg);
    let mut rows = Vec::new();
    for &dim in &dims {
        let f = map_cfg.build(dim)?;
        let p = f.perturbation_exponent();
        let scaling = p.map(DecayScaling::for_exponent).unwrap_or(DecayScaling::Grow);
        let expected = p.map(|p| scaling.expected_slope(p));
        let seqs = map_indexed(s.samples, |idx| -> Result<(Element, Vec<f64>)> {
            let a = s.element(idx, 0, dim);
            let seq = superstability_decay(&f, &a, ss.n_max, scaling)?;
            Ok((a, seq))
        });
        let mut slope_w = Vec::new();
        let mut terminal_w = Vec::new();
        for (idx, item) in seqs.into_iter().enumerate() {
            let (a, seq) = item?;
            let norm_a = a.op_norm()?;
            let zero_scale = 1.0 + a.square().op_norm()?;
            let d_first = seq[0];
            let d_last = *seq.last().expect("n_max >= 2");
            let vanishes = seq.iter().all(|&d| d <= ss.zero_tol * zero_scale);
            let slope = loglog_slope(&seq, ss.fit_from);
            let (slope_lhs, slope_rhs, term_lhs, term_rhs) = match (vanishes, expected, slope) {
                (true, _, _) => (0.0, 0.0, 0.0, 0.0),
                (false, Some(e), Some(sl)) => {
                    let n = ss.n_max as f64;
                    (sl, e + ss.slope_margin, d_last, d_first * n.powf(e) * ss.terminal_factor)
                }
                // Nonzero defect with nothing to compare against, or a
                // sequence with zero entries that cannot be fitted.
                _ => (f64::INFINITY, 0.0, d_last, 0.0),
            };
            slope_w.push(Witness {
                sample: idx,
                lhs: slope_lhs,
                rhs: slope_rhs,
                scale: 1.0,
                a: Some(a.clone()),
                b: None,
                c: None,
                mu: None,
            });
            terminal_w.push(Witness {
                sample: idx,
                lhs: term_lhs,
                rhs: term_rhs,
                scale: 1.0,
                a: Some(a),
                b: None,
                c: None,
                mu: None,
            });
            rows.push(DecayRow {
                dim,
                sample: idx,
                norm_a,
                d_first,
                d_last,
                slope,
                expected_slope: expected,
                sequence: seq,
            });
        }
        out.checks
            .push(tagged(CheckReport::from_witnesses("decay_slope", 0.0, slope_w), dim, multi));
        out.checks
            .push(tagged(CheckReport::from_witnesses("terminal_decay", 0.0, terminal_w), dim, multi));
    }
    out.rows = Rows::Decay(rows);
    Ok(out.finish())
}

fn relative_gap(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d == 0.0 {
        0.0
    } else {
        d / x.abs().max(y.abs())
    }
}

/// Closed-form versus truncated-series bounds over the configured grid.
///
/// Power rows and constant rows are asserted. ψ rows use `ψ(t) = t^q` with
/// `q` from the forward exponents (plus the backward exponents above zero);
/// forward ψ rows are asserted against both their series and the power row
/// with `p = q`, backward ψ rows are reported only, since that closed form
/// exceeds its series by the factor `3/ψ(3)`.
pub fn cmd_bounds_table(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let g = &cfg.bounds_grid;
    let dim = cfg.algebra.dim;
    let tol = g.agreement_tol;
    let mut out = RunSummary::new("bounds-table", cfg);
    let mut rows = Vec::new();
    let mut psi_power = Vec::new();

    let row = |bound: BoundSpec, kind: &'static str, p: f64, dir: Direction, norm: f64, asserted: bool| -> Result<BoundRow> {
        let a = Element::identity(dim).scale_real(norm);
        let closed = bound.closed_form(norm, dir)?;
        let series = bound_series_truncated(|x, y, z| bound.phi(x, y, z), &a, dir, g.terms)?.total();
        let gap = relative_gap(closed, series);
        Ok(BoundRow {
            kind,
            direction: dir,
            theta: bound.theta(),
            p,
            norm_a: norm,
            closed_form: closed,
            series,
            relative_gap: gap,
            agree: gap <= tol,
            asserted,
        })
    };

    for &theta in &g.thetas {
        for (dir, exps) in [
            (Direction::Backward, &g.backward_exponents),
            (Direction::Forward, &g.forward_exponents),
        ] {
            for &p in exps {
                for &norm in &g.norms {
                    let power = BoundSpec::Power {
                        theta,
                        p1: p,
                        p2: p,
                        p3: p,
                    };
                    let pr = row(power, "power", p, dir, norm, true)?;
                    if p > 0.0 {
                        let psi = BoundSpec::Psi {
                            theta,
                            psi: PsiProfile::Power { q: p },
                        };
                        let asserted = dir == Direction::Forward;
                        let sr = row(psi, "psi", p, dir, norm, asserted)?;
                        if asserted {
                            psi_power.push((rows.len() + 1, relative_gap(sr.closed_form, pr.closed_form)));
                        }
                        rows.push(pr);
                        rows.push(sr);
                    } else {
                        rows.push(pr);
                    }
                }
            }
        }
        for &norm in &g.norms {
            rows.push(row(BoundSpec::Constant { theta }, "constant", 0.0, Direction::Backward, norm, true)?);
        }
    }

    let agreement: Vec<Witness> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.asserted)
        .map(|(i, r)| Witness {
            sample: i,
            lhs: r.relative_gap,
            rhs: 0.0,
            scale: 1.0,
            a: None,
            b: None,
            c: None,
            mu: None,
        })
        .collect();
    out.checks.push(CheckReport::from_witnesses("series_agreement", tol, agreement));
    let consistency: Vec<Witness> = psi_power
        .into_iter()
        .map(|(i, gap)| Witness {
            sample: i,
            lhs: gap,
            rhs: 0.0,
            scale: 1.0,
            a: None,
            b: None,
            c: None,
            mu: None,
        })
        .collect();
    out.checks
        .push(CheckReport::from_witnesses("psi_power_consistency", tol, consistency));
    out.rows = Rows::Bounds(rows);
    Ok(out.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    LemmaCheck,
    Stability,
    Superstability,
    BoundsTable,
}

impl Command {
    pub fn run(self, cfg: &ExperimentConfig) -> Result<RunSummary> {
        match self {
            Command::LemmaCheck => cmd_lemma_check(cfg),
            Command::Stability => cmd_stability(cfg),
            Command::Superstability => cmd_superstability(cfg),
            Command::BoundsTable => cmd_bounds_table(cfg),
        }
    }
}

/// Exit code for an error that prevented a summary from being produced.
pub fn exit_code_for_error(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidSpec(_) | Error::IncompatibleBound { .. } | Error::Io(_) => EXIT_CONFIG,
        Error::Diverged { .. }
        | Error::NotConverged { .. }
        | Error::Overflow(_)
        | Error::NonFinite
        | Error::NormNotConverged { .. } => EXIT_DIVERGED,
        Error::DimensionMismatch { .. } | Error::BadShape { .. } | Error::NotUnitScalar { .. } => EXIT_CONFIG,
        Error::Calibration(_) => EXIT_VIOLATED,
    }
}

/// Floats in CSV: 17 significant digits, `.` decimal point.
pub fn csv_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn direction_str(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "forward",
        Direction::Backward => "backward",
    }
}

fn opt_float(x: Option<f64>) -> String {
    x.map(csv_float).unwrap_or_default()
}

/// Header and records of the per-sample table.
pub fn csv_table(summary: &RunSummary) -> (Vec<&'static str>, Vec<Vec<String>>) {
    match &summary.rows {
        Rows::None => {
            let header = vec!["check", "num_samples", "max_residual", "min_slack", "verdict"];
            let recs = summary
                .checks
                .iter()
                .map(|c| {
                    vec![
                        c.name.clone(),
                        c.num_samples.to_string(),
                        csv_float(c.max_residual),
                        csv_float(c.min_slack),
                        format!("{:?}", c.verdict).to_lowercase(),
                    ]
                })
                .collect();
            (header, recs)
        }
        Rows::Stability(rows) => {
            let header = vec![
                "dim",
                "sample",
                "norm_a",
                "iterations",
                "direction",
                "distance",
                "bound",
                "slack",
                "certified_bound",
            ];
            let recs = rows
                .iter()
                .map(|r| {
                    vec![
                        r.dim.to_string(),
                        r.sample.to_string(),
                        csv_float(r.norm_a),
                        r.iterations.to_string(),
                        direction_str(r.direction).into(),
                        csv_float(r.distance),
                        csv_float(r.bound),
                        csv_float(r.slack),
                        csv_float(r.certified_bound),
                    ]
                })
                .collect();
            (header, recs)
        }
        Rows::Decay(rows) => {
            let header = vec!["dim", "sample", "norm_a", "d_first", "d_last", "slope", "expected_slope"];
            let recs = rows
                .iter()
                .map(|r| {
                    vec![
                        r.dim.to_string(),
                        r.sample.to_string(),
                        csv_float(r.norm_a),
                        csv_float(r.d_first),
                        csv_float(r.d_last),
                        opt_float(r.slope),
                        opt_float(r.expected_slope),
                    ]
                })
                .collect();
            (header, recs)
        }
        Rows::Bounds(rows) => {
            let header = vec![
                "kind",
                "direction",
                "theta",
                "p",
                "norm_a",
                "closed_form",
                "series",
                "relative_gap",
                "agree",
                "asserted",
            ];
            let recs = rows
                .iter()
                .map(|r| {
                    vec![
                        r.kind.into(),
                        direction_str(r.direction).into(),
                        csv_float(r.theta),
                        csv_float(r.p),
                        csv_float(r.norm_a),
                        csv_float(r.closed_form),
                        csv_float(r.series),
                        csv_float(r.relative_gap),
                        r.agree.to_string(),
                        r.asserted.to_string(),
                    ]
                })
                .collect();
            (header, recs)
        }
    }
}

/// Renders the report. JSON carries the full summary; CSV only the table
/// (stabilization traces of diverged runs go to the JSON report).
pub fn render_report(summary: &RunSummary, format: OutputFormat) -> Result<Vec<u8>> {
    match format {
        OutputFormat::Json => {
            let mut v = serde_json::to_vec_pretty(summary).map_err(|e| Error::Io(e.to_string()))?;
            v.push(b'\n');
            Ok(v)
        }
        OutputFormat::Csv => {
            let (header, recs) = csv_table(summary);
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| Error::Io(e.to_string());
            w.write_record(&header).map_err(io)?;
            for r in recs {
                w.write_record(&r).map_err(io)?;
            }
            w.into_inner().map_err(|e| Error::Io(e.to_string()))
        }
    }
}

/// Writes the report to `path`, or returns it for the caller to print.
pub fn write_report(summary: &RunSummary, format: OutputFormat, path: Option<&Path>) -> Result<Option<Vec<u8>>> {
    let bytes = render_report(summary, format)?;
    match path {
        Some(p) => {
            std::fs::write(p, &bytes)?;
            Ok(None)
        }
        None => Ok(Some(bytes)),
    }
}

/// One-line human summary for stderr.
pub fn summary_line(summary: &RunSummary) -> String {
    let mut s = format!("{}: {:?}", summary.command, summary.verdict).to_lowercase();
    if let Some(f) = &summary.first_failure {
        let _ = write!(s, " (first failure: {f})");
    }
    if let Some(d) = &summary.divergence {
        let _ = write!(
            s,
            " ({} run on sample {} stopped after {} steps)",
            direction_str(d.direction),
            d.sample,
            d.residuals.len()
        );
    }
    if let Some(f) = &summary.failure {
        let _ = write!(s, " ({f})");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json(extra: &str) -> String {
        format!(
            r#"{{"schema": 1, "algebra": {{"dim": 2}},
               "sampling": {{"seed": 3, "samples": 20, "norm_cap": 5.0}}{extra}}}"#
        )
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json_str(&base_json("")).unwrap();
        assert_eq!(cfg.mu_grid_size, 16);
        assert_eq!(cfg.stabilizer.max_iter, 64);
        assert_eq!(cfg.stabilizer.tol, 1e-10);
        assert_eq!(cfg.dims(), vec![2]);
        assert_eq!(cfg.outputs.format, OutputFormat::Json);
    }

    #[test]
    fn unknown_field_reports_path() {
        let text = r#"{"schema": 1, "algebra": {"dim": 2, "colour": 1},
                       "sampling": {"seed": 3, "samples": 20, "norm_cap": 5.0}}"#;
        match ExperimentConfig::from_json_str(text).unwrap_err() {
            Error::Config { path, message } => {
                assert_eq!(path, "algebra.colour");
                assert!(message.contains("colour"), "{message}");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn missing_seed_is_an_error() {
        let text = r#"{"schema": 1, "algebra": {"dim": 2}, "sampling": {"samples": 20, "norm_cap": 5.0}}"#;
        let err = ExperimentConfig::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn wrong_schema_and_bad_dims() {
        let text = base_json("").replace("\"schema\": 1", "\"schema\": 2");
        assert!(matches!(
            ExperimentConfig::from_json_str(&text),
            Err(Error::Config { path, .. }) if path == "schema"
        ));
        let text = base_json("").replace("\"norm_cap\": 5.0", "\"norm_cap\": 5.0, \"dims\": [2, 0]");
        assert!(matches!(
            ExperimentConfig::from_json_str(&text),
            Err(Error::Config { path, .. }) if path == "sampling.dims"
        ));
    }

    #[test]
    fn nested_map_error_path() {
        let text = base_json(r#", "map": {"base": {"kind": "rotation"}}"#);
        match ExperimentConfig::from_json_str(&text).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "map.base.kind"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn matrix_refs_resolve() {
        assert_eq!(MatrixRef::CornerNilpotent.resolve(5).unwrap(), Element::unit(5, 3, 4));
        assert!(MatrixRef::Nilpotent.resolve(1).is_err());
        let e = Element::identity(2);
        assert!(MatrixRef::Explicit { value: e }.resolve(3).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::from_json_str(&base_json("")).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.sampling.seed = 4;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn csv_float_has_17_significant_digits() {
        assert_eq!(csv_float(0.1), "1.0000000000000001e-1");
        assert_eq!(csv_float(7.5), "7.5000000000000000e0");
        for x in [0.1, 1.0 / 3.0, 7.5e-300, 123456.789] {
            assert_eq!(csv_float(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(csv_float(f64::INFINITY), "inf");
    }

    #[test]
    fn bounds_table_examples() {
        let cfg = ExperimentConfig::from_json_str(&base_json("")).unwrap();
        let s = cmd_bounds_table(&cfg).unwrap();
        assert_eq!(s.verdict, RunVerdict::Satisfied, "{:?}", s.first_failure);
        let Rows::Bounds(rows) = &s.rows else { panic!() };
        let find = |kind: &str, dir: Direction, p: f64, norm: f64| {
            rows.iter()
                .find(|r| r.kind == kind && r.direction == dir && r.p == p && r.norm_a == norm && r.theta == 1.0)
                .unwrap()
        };
        let r = find("power", Direction::Backward, 0.0, 1.0);
        assert!((r.closed_form - 1.0).abs() <= 1e-12 && (r.series - 1.0).abs() <= 1e-9);
        let r = find("power", Direction::Forward, 2.0, 1.0);
        assert!((r.closed_form - 7.5).abs() <= 1e-12 && r.agree);
        let r = find("power", Direction::Forward, 2.0, 2.0);
        assert!((r.closed_form - 30.0).abs() <= 1e-12 && (r.series - 30.0).abs() <= 30.0 * 1e-9);
        let r = find("psi", Direction::Backward, 0.5, 1.0);
        assert!(!r.asserted);
    }
}
