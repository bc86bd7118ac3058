//! Experiment configuration files.
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//! out = "runs/demo"
//! jobs = 2
//! spec_files = ["specs/p075.toml"]
//!
//! [[specs]]
//! id = "two-point"
//! seed = 11
//! [[specs.support]]
//! weight = 0.5
//! P = [[0.8]]
//! Q = [[0.2]]
//! R = [[0.0]]
//! [[specs.support]]
//! weight = 0.5
//! P = [[0.45]]
//! Q = [[0.55]]
//! R = [[0.0]]
//!
//! [[checks]]
//! kind = "quenched_clt"
//! spec = "two-point"
//! [checks.params]
//! n = 2000
//! replicas = 10000
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::environment::{EllipticityParams, EnvironmentSpec, SpecFile, Window};
use crate::error::{Error, Result};
use crate::harness::{
    self, BacktrackParams, CheckContext, CheckReport, EvfpMode, EvfpParams, FluctuationParams, HittingLltParams,
    PositionLltParams, QuenchedCltParams, SinaiParams, StableParams,
};
use crate::spectral::{CriticalExponent, Regime, SpectralConfig, SpectralSummary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub spec_files: Vec<PathBuf>,
    #[serde(default)]
    pub specs: Vec<SpecFile>,
    #[serde(default)]
    pub context: ContextSection,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub checks: Vec<CheckEntry>,
}

fn default_seed() -> u64 {
    1
}

/// Numerical settings shared by every check; the seed comes from the top level.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextSection {
    pub zeta: crate::spectral::ZetaConfig,
    pub series: crate::walker::SeriesConfig,
    pub moments: crate::spectral::MomentConfig,
    pub cap: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Validate,
    QuenchedClt,
    HittingLlt,
    PositionLlt,
    AnnealedStable,
    Evfp,
    SinaiRecurrent,
    Fluctuation,
    Backtrack,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckEntry {
    pub kind: CheckKind,
    pub spec: String,
    /// The check is expected to fail; errors and failures are recorded as such.
    #[serde(default)]
    pub negative_control: bool,
    #[serde(default)]
    pub params: toml::Table,
}

/// Parameters of the `validate` check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateParams {
    /// Layers `0..layers` are drawn and checked.
    pub layers: i64,
    /// Used when the environment law carries no ellipticity bounds.
    pub eps: f64,
    pub kappa: f64,
}

impl Default for ValidateParams {
    fn default() -> Self {
        Self {
            layers: 1000,
            eps: 1e-6,
            kappa: 0.0,
        }
    }
}

/// A check with decoded parameters.
#[derive(Debug, Clone)]
pub enum CheckJob {
    Validate(ValidateParams),
    QuenchedClt(QuenchedCltParams),
    HittingLlt(HittingLltParams),
    PositionLlt(PositionLltParams),
    AnnealedStable(StableParams),
    Evfp(EvfpParams),
    SinaiRecurrent(SinaiParams),
    Fluctuation(FluctuationParams),
    Backtrack(BacktrackParams),
}

fn decode<T: DeserializeOwned>(kind: CheckKind, t: &toml::Table) -> Result<T> {
    t.clone()
        .try_into()
        .map_err(|e| Error::Config(format!("{kind:?} params: {e}")))
}

impl CheckEntry {
    pub fn job(&self) -> Result<CheckJob> {
        let t = &self.params;
        let k = self.kind;
        Ok(match k {
            CheckKind::Validate => CheckJob::Validate(decode(k, t)?),
            CheckKind::QuenchedClt => {
                let mut p: QuenchedCltParams = decode(k, t)?;
                p.negative_control |= self.negative_control;
                CheckJob::QuenchedClt(p)
            }
            CheckKind::HittingLlt => CheckJob::HittingLlt(decode(k, t)?),
            CheckKind::PositionLlt => CheckJob::PositionLlt(decode(k, t)?),
            CheckKind::AnnealedStable => CheckJob::AnnealedStable(decode(k, t)?),
            CheckKind::Evfp => CheckJob::Evfp(decode(k, t)?),
            CheckKind::SinaiRecurrent => CheckJob::SinaiRecurrent(decode(k, t)?),
            CheckKind::Fluctuation => CheckJob::Fluctuation(decode(k, t)?),
            CheckKind::Backtrack => CheckJob::Backtrack(decode(k, t)?),
        })
    }
}

/// What a check needs from the spectral summary, if anything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prerequisite {
    None,
    SAbove(f64),
    /// `s` in `(0, 1)` or `(1, 2)`.
    StableRange,
    Regime(Regime),
}

impl CheckJob {
    pub fn prerequisite(&self) -> Prerequisite {
        match self {
            CheckJob::Validate(_) => Prerequisite::None,
            CheckJob::QuenchedClt(p) if p.negative_control => Prerequisite::None,
            // r(2) < 1 is equivalent to s > 2 by convexity of ln r
            CheckJob::QuenchedClt(_)
            | CheckJob::HittingLlt(_)
            | CheckJob::PositionLlt(_)
            | CheckJob::Fluctuation(_) => Prerequisite::SAbove(2.0),
            CheckJob::Evfp(p) => match p.mode {
                EvfpMode::Quenched => Prerequisite::SAbove(2.0),
                EvfpMode::Annealed => Prerequisite::SAbove(1.0),
            },
            CheckJob::AnnealedStable(_) => Prerequisite::StableRange,
            CheckJob::SinaiRecurrent(_) => Prerequisite::Regime(Regime::Recurrent),
            CheckJob::Backtrack(_) => Prerequisite::Regime(Regime::TransientRight),
        }
    }

    pub fn run(&self, spec: &EnvironmentSpec, ctx: &CheckContext) -> Result<CheckReport> {
        match self {
            CheckJob::Validate(p) => run_validate(spec, p, ctx),
            CheckJob::QuenchedClt(p) => harness::check_quenched_clt(spec, p, ctx),
            CheckJob::HittingLlt(p) => harness::check_hitting_llt(spec, p, ctx),
            CheckJob::PositionLlt(p) => harness::check_position_llt(spec, p, ctx),
            CheckJob::AnnealedStable(p) => harness::check_annealed_stable(spec, p, ctx),
            CheckJob::Evfp(p) => harness::check_evfp(spec, p, ctx),
            CheckJob::SinaiRecurrent(p) => harness::check_sinai_recurrent(spec, p, ctx),
            CheckJob::Fluctuation(p) => harness::check_fluctuation_lemma(spec, p, ctx),
            CheckJob::Backtrack(p) => harness::check_backtrack(spec, p, ctx),
        }
    }
}

impl Prerequisite {
    /// `Err` with a regime error when `summary` rules the check out.
    pub fn verify(&self, check: &str, summary: &SpectralSummary) -> Result<()> {
        let s = summary.s.value();
        let fail = |required: String, found: String| {
            Err(Error::Regime {
                check: check.into(),
                required,
                found,
            })
        };
        let transient = summary.regime == Regime::TransientRight;
        match *self {
            Prerequisite::None => Ok(()),
            Prerequisite::SAbove(bound) if !(transient && s > bound) => fail(
                format!("transient with s > {bound}"),
                format!("{}, s = {s}", summary.regime),
            ),
            Prerequisite::StableRange => match summary.s {
                CriticalExponent::Finite { s, .. } if transient && s < 2.0 && (s - 1.0).abs() > 1e-9 => Ok(()),
                _ => fail("s in (0, 1) or (1, 2)".into(), format!("{}, s = {s}", summary.regime)),
            },
            Prerequisite::Regime(r) if summary.regime != r => fail(r.to_string(), summary.regime.to_string()),
            _ => Ok(()),
        }
    }
}

/// Draws layers `0..layers` and checks stochasticity and the ellipticity
/// conditions. The statistic counts failing layers.
pub fn run_validate(spec: &EnvironmentSpec, p: &ValidateParams, ctx: &CheckContext) -> Result<CheckReport> {
    let t0 = std::time::Instant::now();
    let e = match spec.ellipticity() {
        Some(e) => e,
        None => EllipticityParams::new(p.eps, p.kappa)?,
    };
    let env =
        crate::environment::Environment::new(std::sync::Arc::new(spec.clone()), Window::new(0, p.layers.max(1) - 1)?)?;
    let reports = env.validate(&e);
    let failing: Vec<i64> = reports
        .iter()
        .filter(|(_, r)| !r.passes_all())
        .map(|(n, _)| *n)
        .collect();
    let mut details = BTreeMap::new();
    details.insert("eps".into(), serde_json::json!(e.eps));
    details.insert("kappa".into(), serde_json::json!(e.kappa));
    details.insert(
        "failing_layers".into(),
        serde_json::json!(failing.iter().take(20).collect::<Vec<_>>()),
    );
    if let Some((_, first)) = reports.first() {
        details.insert("layer_0".into(), serde_json::json!(first));
    }
    Ok(CheckReport {
        check_id: "validate".into(),
        claim: "stochasticity and ellipticity of the environment".into(),
        spec_id: spec.id().into(),
        seed: ctx.seed,
        n: reports.len() as u64,
        replicas: 0,
        statistic: failing.len() as f64,
        threshold: 0.0,
        pass: failing.is_empty(),
        negative_control: false,
        degraded: false,
        details,
        wall_time_s: Some(t0.elapsed().as_secs_f64()),
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        if cfg.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // paths inside the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for f in cfg.spec_files.iter_mut().chain(cfg.out.as_mut()) {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    /// All specs by id, inline ones and files alike.
    pub fn resolve_specs(&self) -> Result<BTreeMap<String, EnvironmentSpec>> {
        let mut out = BTreeMap::new();
        let mut insert = |spec: EnvironmentSpec| {
            let id = spec.id().to_string();
            if out.insert(id.clone(), spec).is_some() {
                return Err(Error::Config(format!("spec id `{id}` defined twice")));
            }
            Ok(())
        };
        for f in &self.spec_files {
            insert(load_spec(f)?)?;
        }
        for s in &self.specs {
            insert(s.clone().into_spec().map_err(as_config)?)?;
        }
        Ok(out)
    }

    pub fn context(&self, seed: u64) -> CheckContext {
        let d = CheckContext::default();
        CheckContext {
            seed,
            zeta: self.context.zeta,
            series: self.context.series,
            moments: self.context.moments,
            cap: self.context.cap.unwrap_or(d.cap),
        }
    }

    /// Decoded jobs paired with their spec ids, in file order.
    pub fn jobs(&self, specs: &BTreeMap<String, EnvironmentSpec>) -> Result<Vec<(CheckJob, &CheckEntry)>> {
        self.checks
            .iter()
            .map(|c| {
                if !specs.contains_key(&c.spec) {
                    return Err(Error::Config(format!(
                        "check {:?} refers to unknown spec `{}`",
                        c.kind, c.spec
                    )));
                }
                Ok((c.job()?, c))
            })
            .collect()
    }

    /// Spectral settings with the shared numerical context applied.
    pub fn spectral_config(&self) -> SpectralConfig {
        SpectralConfig {
            zeta: self.context.zeta,
            moments: self.context.moments,
            ..self.spectral.clone()
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Reads a spec file (TOML).
pub fn load_spec(path: &Path) -> Result<EnvironmentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    EnvironmentSpec::from_toml_str(&text).map_err(as_config)
}
