//! Flat JSON run configuration.
//!
//! Every key is optional except `command` and `output_dir`; unknown keys are
//! rejected. Errors name the offending key and the line it appears on.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::map::{EmOptions, LadderSchedule};
use crate::model::{FactorMode, PriorSpec, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Diagnose,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Diagnose => "diagnose",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simulate" => Some(Command::Simulate),
            "fit" => Some(Command::Fit),
            "diagnose" => Some(Command::Diagnose),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SpslNormal,
    SpslNormalGroupmoves,
    SpslOrthonormal,
    GdNormal,
    GdOrthonormal,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::SpslNormal,
        ModelKind::SpslNormalGroupmoves,
        ModelKind::SpslOrthonormal,
        ModelKind::GdNormal,
        ModelKind::GdOrthonormal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SpslNormal => "spsl_normal",
            ModelKind::SpslNormalGroupmoves => "spsl_normal_groupmoves",
            ModelKind::SpslOrthonormal => "spsl_orthonormal",
            ModelKind::GdNormal => "gd_normal",
            ModelKind::GdOrthonormal => "gd_orthonormal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn factor_mode(self) -> FactorMode {
        match self {
            ModelKind::SpslOrthonormal | ModelKind::GdOrthonormal => FactorMode::Orthonormal,
            _ => FactorMode::Normal,
        }
    }

    pub fn is_gd(self) -> bool {
        matches!(self, ModelKind::GdNormal | ModelKind::GdOrthonormal)
    }

    pub fn group_moves(self) -> bool {
        self == ModelKind::SpslNormalGroupmoves
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorCount {
    Fixed(usize),
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    /// Start at the posterior mode found by EM (or the ladder when configured).
    Map,
    /// Start at the generating parameters stored in `truth_dir`.
    Truth,
}

/// Optional prior overrides; missing values take [`PriorSpec::defaults_for`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PriorOverrides {
    pub lambda0: Option<f64>,
    pub lambda1: Option<f64>,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    pub gd_lambda: Option<f64>,
    pub gd_lambda0: Option<f64>,
    pub gd_lambda1: Option<f64>,
}

impl PriorOverrides {
    pub fn resolve(&self, g: usize) -> Result<PriorSpec> {
        let d = PriorSpec::defaults_for(g);
        let p = PriorSpec {
            lambda0: self.lambda0.unwrap_or(d.lambda0),
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            alpha: self.alpha.unwrap_or(d.alpha),
            eta: self.eta.unwrap_or(d.eta),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            gd_lambda: self.gd_lambda.unwrap_or(d.gd_lambda),
            gd_lambda0: self.gd_lambda0.unwrap_or(d.gd_lambda0),
            gd_lambda1: self.gd_lambda1.unwrap_or(d.gd_lambda1),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn fixed(p: &PriorSpec) -> Self {
        Self {
            lambda0: Some(p.lambda0),
            lambda1: Some(p.lambda1),
            alpha: Some(p.alpha),
            eta: Some(p.eta),
            epsilon: Some(p.epsilon),
            gd_lambda: Some(p.gd_lambda),
            gd_lambda0: Some(p.gd_lambda0),
            gd_lambda1: Some(p.gd_lambda1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Synthetic layout for `simulate`.
    pub simulation: SyntheticSpec,
    pub data_path: Option<PathBuf>,
    pub covariates_path: Option<PathBuf>,
    /// Directory written by `simulate`; enables truth-based outputs.
    pub truth_dir: Option<PathBuf>,
    /// Directory written by `fit`, read by `diagnose`.
    pub input_dir: Option<PathBuf>,
    pub model: ModelKind,
    pub k: FactorCount,
    pub sweeps: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub chains: usize,
    pub init: InitMethod,
    pub prior: PriorOverrides,
    pub ladder: Option<LadderSchedule>,
    pub em: EmOptions,
    /// 1-based (j, k) loading indices.
    pub traced_entries: Option<Vec<(usize, usize)>>,
    pub density_points: usize,
    pub random_scan: bool,
}

impl RunConfig {
    /// Defaults for a command with everything else unset.
    pub fn new(command: Command, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            command,
            seed: 1,
            output_dir: output_dir.into(),
            simulation: SyntheticSpec::default(),
            data_path: None,
            covariates_path: None,
            truth_dir: None,
            input_dir: None,
            model: ModelKind::SpslOrthonormal,
            k: FactorCount::Fixed(8),
            sweeps: 3000,
            burn_in: 500,
            thin: 1,
            chains: 1,
            init: InitMethod::Map,
            prior: PriorOverrides::default(),
            ladder: None,
            em: EmOptions {
                parameter_expansion: true,
                ..EmOptions::default()
            },
            traced_entries: None,
            density_points: 512,
            random_scan: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: key.into(),
            line: 0,
            message,
        };
        if self.thin == 0 {
            return Err(bad("thin", "must be >= 1".into()));
        }
        if self.chains == 0 {
            return Err(bad("chains", "must be >= 1".into()));
        }
        if self.burn_in >= self.sweeps {
            return Err(bad("burn_in", format!("burn_in ({}) must be < sweeps ({})", self.burn_in, self.sweeps)));
        }
        if self.density_points < 2 {
            return Err(bad("density_points", "must be >= 2".into()));
        }
        match self.k {
            FactorCount::Fixed(0) => return Err(bad("K", "must be >= 1".into())),
            FactorCount::Adaptive if self.model.is_gd() => {
                return Err(bad("K", "adaptive K is only available for spsl_* models".into()))
            }
            _ => {}
        }
        if let Some(l) = &self.ladder {
            l.validate().map_err(|e| bad("ladder_lambda0", e.to_string()))?;
        }
        if let Some(t) = &self.traced_entries {
            if t.iter().any(|&(j, k)| j == 0 || k == 0) {
                return Err(bad("traced_entries", "indices are 1-based".into()));
            }
        }
        let s = &self.simulation;
        if s.k0 == 0 || s.g == 0 || s.n == 0 || s.stride * (s.k0 - 1) + s.block_len > s.g {
            return Err(bad(
                "block_len",
                format!("block layout needs stride*(K0-1) + block_len <= G, got {}*{} + {} > {}", s.stride, s.k0.saturating_sub(1), s.block_len, s.g),
            ));
        }
        if !(s.noise_scale >= 0.0 && s.noise_scale.is_finite()) {
            return Err(bad("noise_scale", "must be finite and >= 0".into()));
        }
        match self.command {
            Command::Fit if self.data_path.is_none() => return Err(bad("data_path", "required for fit".into())),
            Command::Diagnose if self.input_dir.is_none() => return Err(bad("input_dir", "required for diagnose".into())),
            _ => {}
        }
        if self.init == InitMethod::Truth && self.truth_dir.is_none() {
            return Err(bad("init", "init = \"truth\" needs truth_dir".into()));
        }
        Ok(())
    }

    /// Flat JSON echo. With `prior` and `traced` given, the echo pins every
    /// value that would otherwise be derived from the data.
    pub fn to_json(&self, prior: Option<&PriorSpec>, traced: Option<&[(usize, usize)]>) -> Value {
        let mut m = Map::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        m.insert("command".into(), json!(self.command.as_str()));
        m.insert("seed".into(), json!(self.seed));
        m.insert("output_dir".into(), json!(self.output_dir.display().to_string()));
        let s = &self.simulation;
        m.insert("G".into(), json!(s.g));
        m.insert("n".into(), json!(s.n));
        m.insert("K0".into(), json!(s.k0));
        m.insert("block_len".into(), json!(s.block_len));
        m.insert("stride".into(), json!(s.stride));
        m.insert("noise_scale".into(), json!(s.noise_scale));
        m.insert(
            "factor_mode".into(),
            json!(match s.factor_mode {
                FactorMode::Normal => "normal",
                FactorMode::Orthonormal => "orthonormal",
            }),
        );
        for (key, v) in [
            ("data_path", path(&self.data_path)),
            ("covariates_path", path(&self.covariates_path)),
            ("truth_dir", path(&self.truth_dir)),
            ("input_dir", path(&self.input_dir)),
        ] {
            if let Some(v) = v {
                m.insert(key.into(), v);
            }
        }
        m.insert("model".into(), json!(self.model.as_str()));
        m.insert(
            "K".into(),
            match self.k {
                FactorCount::Fixed(k) => json!(k),
                FactorCount::Adaptive => json!("adaptive"),
            },
        );
        m.insert("sweeps".into(), json!(self.sweeps));
        m.insert("burn_in".into(), json!(self.burn_in));
        m.insert("thin".into(), json!(self.thin));
        m.insert("chains".into(), json!(self.chains));
        m.insert(
            "init".into(),
            json!(match self.init {
                InitMethod::Map => "map",
                InitMethod::Truth => "truth",
            }),
        );
        let p = prior.map(PriorOverrides::fixed).unwrap_or(self.prior);
        for (key, v) in [
            ("lambda0", p.lambda0),
            ("lambda1", p.lambda1),
            ("alpha", p.alpha),
            ("eta", p.eta),
            ("epsilon", p.epsilon),
            ("gd_lambda", p.gd_lambda),
            ("gd_lambda0", p.gd_lambda0),
            ("gd_lambda1", p.gd_lambda1),
        ] {
            if let Some(v) = v {
                m.insert(key.into(), json!(v));
            }
        }
        if let Some(l) = &self.ladder {
            m.insert("ladder_lambda0".into(), json!(l.lambda0_sequence));
            m.insert("ladder_lambda1".into(), json!(l.lambda1));
            m.insert("ladder_tol".into(), json!(l.stabilization_tol));
        }
        m.insert("em_max_iter".into(), json!(self.em.max_iter));
        m.insert("em_tol".into(), json!(self.em.tol));
        m.insert("parameter_expansion".into(), json!(self.em.parameter_expansion));
        let traced = traced.map(|t| t.to_vec()).or_else(|| self.traced_entries.clone());
        if let Some(t) = traced {
            m.insert("traced_entries".into(), json!(t.iter().map(|&(j, k)| [j, k]).collect::<Vec<_>>()));
        }
        m.insert("density_points".into(), json!(self.density_points));
        m.insert("random_scan".into(), json!(self.random_scan));
        Value::Object(m)
    }
}

/// 1-based line of the first `"key":` occurrence in the raw text.
fn key_line(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    let mut from = 0;
    while let Some(pos) = text[from..].find(&needle) {
        let at = from + pos;
        let rest = text[at + needle.len()..].trim_start();
        if rest.starts_with(':') {
            return text[..at].matches('\n').count() + 1;
        }
        from = at + needle.len();
    }
    0
}

struct Reader<'a> {
    text: &'a str,
}

impl Reader<'_> {
    fn err(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            key: key.into(),
            line: key_line(self.text, key),
            message: message.into(),
        }
    }

    fn str<'v>(&self, key: &str, v: &'v Value) -> Result<&'v str> {
        v.as_str().ok_or_else(|| self.err(key, format!("expected a string, got {v}")))
    }

    fn count(&self, key: &str, v: &Value) -> Result<usize> {
        v.as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| self.err(key, format!("expected a non-negative integer, got {v}")))
    }

    fn u64(&self, key: &str, v: &Value) -> Result<u64> {
        v.as_u64().ok_or_else(|| self.err(key, format!("expected a non-negative integer, got {v}")))
    }

    fn real(&self, key: &str, v: &Value) -> Result<f64> {
        v.as_f64().ok_or_else(|| self.err(key, format!("expected a number, got {v}")))
    }

    fn positive(&self, key: &str, v: &Value) -> Result<f64> {
        let x = self.real(key, v)?;
        if !(x > 0.0 && x.is_finite()) {
            return Err(self.err(key, format!("must be finite and > 0, got {x}")));
        }
        Ok(x)
    }

    fn boolean(&self, key: &str, v: &Value) -> Result<bool> {
        v.as_bool().ok_or_else(|| self.err(key, format!("expected true or false, got {v}")))
    }

    fn path(&self, key: &str, v: &Value) -> Result<PathBuf> {
        Ok(PathBuf::from(self.str(key, v)?))
    }
}

/// Parse and validate a configuration from JSON text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Config {
        key: String::new(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let Value::Object(map) = root else {
        return Err(Error::Config {
            key: String::new(),
            line: 1,
            message: "top level must be a JSON object".into(),
        });
    };
    let r = Reader { text };
    let command = match map.get("command") {
        Some(v) => Command::parse(r.str("command", v)?)
            .ok_or_else(|| r.err("command", format!("expected simulate, fit or diagnose, got {v}")))?,
        None => return Err(r.err("command", "missing required key")),
    };
    let mut cfg = RunConfig::new(command, PathBuf::new());
    let mut saw_output = false;
    let mut ladder: Option<LadderSchedule> = None;

    for (key, v) in &map {
        let k = key.as_str();
        match k {
            "command" => {}
            "seed" => cfg.seed = r.u64(k, v)?,
            "output_dir" => {
                cfg.output_dir = r.path(k, v)?;
                saw_output = true;
            }
            "G" => cfg.simulation.g = r.count(k, v)?,
            "n" => cfg.simulation.n = r.count(k, v)?,
            "K0" => cfg.simulation.k0 = r.count(k, v)?,
            "block_len" => cfg.simulation.block_len = r.count(k, v)?,
            "stride" => cfg.simulation.stride = r.count(k, v)?,
            "noise_scale" => cfg.simulation.noise_scale = r.real(k, v)?,
            "factor_mode" => {
                cfg.simulation.factor_mode = match r.str(k, v)? {
                    "normal" => FactorMode::Normal,
                    "orthonormal" => FactorMode::Orthonormal,
                    other => return Err(r.err(k, format!("expected normal or orthonormal, got \"{other}\""))),
                }
            }
            "data_path" => cfg.data_path = Some(r.path(k, v)?),
            "covariates_path" => cfg.covariates_path = Some(r.path(k, v)?),
            "truth_dir" => cfg.truth_dir = Some(r.path(k, v)?),
            "input_dir" => cfg.input_dir = Some(r.path(k, v)?),
            "model" => {
                let s = r.str(k, v)?;
                cfg.model = ModelKind::parse(s).ok_or_else(|| r.err(k, format!("unknown model \"{s}\"")))?;
            }
            "K" => {
                cfg.k = match v {
                    Value::String(s) if s == "adaptive" => FactorCount::Adaptive,
                    _ => FactorCount::Fixed(
                        v.as_u64()
                            .ok_or_else(|| r.err(k, format!("expected a positive integer or \"adaptive\", got {v}")))?
                            as usize,
                    ),
                }
            }
            "sweeps" => cfg.sweeps = r.u64(k, v)?,
            "burn_in" => cfg.burn_in = r.u64(k, v)?,
            "thin" => cfg.thin = r.u64(k, v)?,
            "chains" => cfg.chains = r.count(k, v)?,
            "init" => {
                cfg.init = match r.str(k, v)? {
                    "map" => InitMethod::Map,
                    "truth" => InitMethod::Truth,
                    other => return Err(r.err(k, format!("expected map or truth, got \"{other}\""))),
                }
            }
            "lambda0" => cfg.prior.lambda0 = Some(r.positive(k, v)?),
            "lambda1" => cfg.prior.lambda1 = Some(r.positive(k, v)?),
            "alpha" => cfg.prior.alpha = Some(r.positive(k, v)?),
            "eta" => cfg.prior.eta = Some(r.positive(k, v)?),
            "epsilon" => cfg.prior.epsilon = Some(r.positive(k, v)?),
            "gd_lambda" => cfg.prior.gd_lambda = Some(r.positive(k, v)?),
            "gd_lambda0" => cfg.prior.gd_lambda0 = Some(r.positive(k, v)?),
            "gd_lambda1" => cfg.prior.gd_lambda1 = Some(r.positive(k, v)?),
            "ladder_lambda0" => {
                let arr = v.as_array().ok_or_else(|| r.err(k, "expected an array of numbers"))?;
                let seq = arr.iter().map(|x| r.positive(k, x)).collect::<Result<Vec<_>>>()?;
                let mut l = ladder.take().unwrap_or_default();
                l.lambda0_sequence = seq;
                ladder = Some(l);
            }
            "ladder_lambda1" => {
                let mut l = ladder.take().unwrap_or_default();
                l.lambda1 = r.positive(k, v)?;
                ladder = Some(l);
            }
            "ladder_tol" => {
                let mut l = ladder.take().unwrap_or_default();
                l.stabilization_tol = r.positive(k, v)?;
                ladder = Some(l);
            }
            "em_max_iter" => cfg.em.max_iter = r.count(k, v)?,
            "em_tol" => cfg.em.tol = r.positive(k, v)?,
            "parameter_expansion" => cfg.em.parameter_expansion = r.boolean(k, v)?,
            "traced_entries" => {
                let arr = v.as_array().ok_or_else(|| r.err(k, "expected an array of [j, k] pairs"))?;
                let mut out = Vec::with_capacity(arr.len());
                for e in arr {
                    match e.as_array().map(|p| p.as_slice()) {
                        Some([a, b]) => out.push((r.count(k, a)?, r.count(k, b)?)),
                        _ => return Err(r.err(k, format!("expected a [j, k] pair, got {e}"))),
                    }
                }
                cfg.traced_entries = Some(out);
            }
            "density_points" => cfg.density_points = r.count(k, v)?,
            "random_scan" => cfg.random_scan = r.boolean(k, v)?,
            _ => return Err(r.err(k, "unknown key")),
        }
    }
    cfg.ladder = ladder;
    cfg.simulation.seed = cfg.seed;
    if !saw_output {
        return Err(r.err("output_dir", "missing required key"));
    }
    cfg.validate().map_err(|e| match e {
        Error::Config { key, message, .. } => Error::Config {
            line: key_line(text, &key),
            key,
            message,
        },
        other => other,
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
