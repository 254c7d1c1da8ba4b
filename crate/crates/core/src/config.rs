//! Experiment configuration: strict JSON files, dotted-key overrides and
//! sweep grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{LearnedConfig, PromptSpec, SceneConfig, TrainConfig};
use crate::criterion::CriterionConfig;
use crate::prior::OptimConfig;
use crate::sampler::PipelineConfig;
use crate::schedule::{GridSpec, Schedule, ScheduleError, ScheduleKind};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: key `{key}`: {msg}")]
    Invalid {
        path: PathBuf,
        key: String,
        msg: String,
    },
}

impl ConfigError {
    pub fn invalid(path: &Path, key: impl Into<String>, msg: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.to_path_buf(),
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// `ddpm50`, `flow28` or `uniform:<n>`; the kind's usual grid when absent.
    #[serde(default)]
    pub grid: Option<String>,
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default = "beta_start")]
    pub beta_start: f64,
    #[serde(default = "beta_end")]
    pub beta_end: f64,
}

fn beta_start() -> f64 {
    1e-4
}

fn beta_end() -> f64 {
    0.02
}

impl ScheduleConfig {
    pub fn of_kind(kind: ScheduleKind) -> Self {
        Self {
            kind,
            grid: None,
            t_max: None,
            beta_start: beta_start(),
            beta_end: beta_end(),
        }
    }

    pub fn build(&self) -> std::result::Result<Schedule, ScheduleError> {
        let grid = |d: GridSpec| match &self.grid {
            Some(g) => g.parse::<GridSpec>(),
            None => Ok(d),
        };
        match self.kind {
            ScheduleKind::VpDiffusion => {
                let t_max = self.t_max.unwrap_or(1000.0);
                if t_max.fract() != 0.0 || t_max < 1.0 {
                    return Err(ScheduleError::ZeroHorizon);
                }
                Schedule::vp(
                    t_max as usize,
                    self.beta_start,
                    self.beta_end,
                    grid(GridSpec::Ddpm50)?,
                )
            }
            ScheduleKind::LinearFlow => {
                Schedule::flow(self.t_max.unwrap_or(1000.0), grid(GridSpec::Flow28)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Analytic,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub scene: SceneConfig,
    /// Seed for templates, prototypes and training scenes.
    pub dataset_seed: u64,
    /// Place prototype blobs inside the prompt boxes.
    pub use_boxes: bool,
    /// Trained weights; required by the learned backend at run time and
    /// written by `train-backend`.
    pub weights: Option<PathBuf>,
    pub learned: LearnedConfig,
    pub train: TrainConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Analytic,
            scene: SceneConfig::default(),
            dataset_seed: 0,
            use_boxes: false,
            weights: None,
            learned: LearnedConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Synthetic prompt set: `count` prompts cycling over all entity tuples of
/// size `entities`, optionally boxed around a sampled prototype layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptGenerator {
    pub count: usize,
    #[serde(default = "two")]
    pub entities: usize,
    /// Side of the square box drawn around each entity center.
    #[serde(default)]
    pub box_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum PromptSource {
    Inline(Vec<PromptSpec>),
    /// JSON file holding a list of prompts, relative to the config file.
    File(PathBuf),
    Generate(PromptGenerator),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Seeds {
    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub method: PipelineConfig,
    /// Schedule-dependent defaults when absent.
    #[serde(default)]
    pub optim: Option<OptimConfig>,
    #[serde(default)]
    pub criterion: CriterionConfig,
    pub prompts: PromptSource,
    pub seeds: Seeds,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut value = read_json(path)?;
        for o in overrides {
            apply_override(&mut value, o).map_err(|(k, m)| ConfigError::invalid(path, k, m))?;
        }
        Self::load_value(path, value)
    }

    /// Like `load`, for a document already read from `path`.
    pub fn load_value(path: &Path, value: Value) -> Result<Self> {
        let mut cfg = Self::parse(path, value)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn from_value(path: &Path, value: Value) -> Result<Self> {
        let cfg = Self::parse(path, value)?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    /// A partial `optim` block takes its missing fields from the schedule
    /// kind's defaults rather than the VP ones.
    fn parse(path: &Path, mut value: Value) -> Result<Self> {
        let kind = value
            .pointer("/schedule/kind")
            .cloned()
            .map(|k| from_value::<ScheduleKind>(path, k))
            .transpose()
            .map_err(|_| ConfigError::invalid(path, "schedule.kind", "unknown schedule kind"))?;
        if let (Some(kind), Some(Value::Object(given))) = (kind, value.get("optim")) {
            let mut full = serde_json::to_value(OptimConfig::for_schedule(kind)).expect("serializes");
            for (k, v) in given {
                full[k] = v.clone();
            }
            value["optim"] = full;
        }
        from_value(path, value)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let PromptSource::File(p) = &mut self.prompts {
            fix(p);
        }
        if let Some(w) = &mut self.backend.weights {
            fix(w);
        }
        fix(&mut self.output);
    }

    pub fn optim(&self) -> OptimConfig {
        self.optim
            .clone()
            .unwrap_or_else(|| OptimConfig::for_schedule(self.schedule.kind))
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |k: &str, m: String| Err(ConfigError::invalid(path, k, m));
        if self.schema != SCHEMA {
            return bad("schema", format!("expected {SCHEMA}, got {}", self.schema));
        }
        let schedule = match self.schedule.build() {
            Ok(s) => s,
            Err(e) => return bad("schedule", e.to_string()),
        };
        if let Err(e) = self.method.validate(&schedule) {
            return bad("method", e.to_string());
        }
        if let Err(e) = self.optim().validate() {
            return bad("optim", e.to_string());
        }
        if let Err(e) = self.backend.scene.validate() {
            return bad("backend.scene", e.to_string());
        }
        if self.seeds.to_vec().is_empty() {
            return bad("seeds", "no seeds".into());
        }
        match &self.prompts {
            PromptSource::Inline(p) if p.is_empty() => return bad("prompts", "empty".into()),
            PromptSource::File(p) if !p.exists() => {
                return bad("prompts.file", format!("{} does not exist", p.display()))
            }
            PromptSource::Generate(g) if g.count == 0 || g.entities == 0 => {
                return bad("prompts.generate", "count and entities must be positive".into())
            }
            _ => {}
        }
        let (l, s) = (&self.backend.learned, &self.backend.scene);
        if self.backend.kind == BackendKind::Learned
            && (l.channels, l.height, l.width, l.vocab) != (s.channels, s.height, s.width, s.vocab)
        {
            return bad(
                "backend.learned",
                "channels, height, width and vocab must match backend.scene".into(),
            );
        }
        if let Some(w) = &self.backend.weights {
            if self.backend.kind == BackendKind::Learned && !w.exists() {
                return bad(
                    "backend.weights",
                    format!("{} does not exist", w.display()),
                );
            }
        }
        Ok(())
    }

    /// Stable identity of the configuration, used to name sweep cells.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.canonical()).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Config with the output location removed, so identical experiments
    /// hash the same wherever they write.
    fn canonical(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output");
        }
        v
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::invalid(path, "<root>", e.to_string()))
}

/// Deserialize with the failing key path in the error.
pub fn from_value<T: serde::de::DeserializeOwned>(path: &Path, value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        ConfigError::invalid(path, key, e.into_inner().to_string())
    })
}

/// Aliases accepted on the command line for common nested keys.
fn expand_key(key: &str) -> String {
    match key {
        "momentum" | "lr" | "steps" | "batch" | "rescale" | "cov_lr" => format!("optim.{key}"),
        "step-index" | "step_index" => "method.step_index".into(),
        "method" => "method.method".into(),
        "cutoff" => "method.cutoff".into(),
        "guidance-lr" | "guidance_lr" => "method.guidance_lr".into(),
        "cfg-scale" | "cfg_scale" => "method.cfg_scale".into(),
        _ => key.to_string(),
    }
}

/// Apply `key=value`. Keys are dotted paths; values parse as JSON and fall
/// back to plain strings. Errors carry the key.
pub fn apply_override(root: &mut Value, assignment: &str) -> std::result::Result<(), (String, String)> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| (assignment.to_string(), "expected key=value".to_string()))?;
    let key = expand_key(key.trim());
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
    set_path(root, &key, value).map_err(|m| (key.clone(), m))
}

pub fn set_path(root: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err("empty key segment".into());
    }
    // `optim` may be absent from the file; materialize nested objects
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or("parent is not an object")?;
        let next = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if next.is_null() {
            *next = Value::Object(Default::default());
        }
        cur = next;
    }
    cur.as_object_mut()
        .ok_or("parent is not an object")?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// One `--grid key=spec` axis. `spec` is `lo:hi:step` (inclusive), `lo:hi`
/// for integers, or a comma list.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<Value>,
}

impl std::str::FromStr for GridAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (key, spec) = s.split_once('=').ok_or(format!("grid `{s}`: expected key=spec"))?;
        let parts: Vec<&str> = spec.split(':').collect();
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("grid `{s}`: {e}"));
        let values = match parts.len() {
            1 => spec
                .split(',')
                .map(|v| serde_json::from_str(v.trim()).unwrap_or(Value::String(v.trim().into())))
                .collect(),
            2 => {
                let (lo, hi) = (num(parts[0])?, num(parts[1])?);
                if lo.fract() != 0.0 || hi.fract() != 0.0 || lo > hi {
                    return Err(format!("grid `{s}`: lo:hi needs integers with lo <= hi"));
                }
                (lo as i64..=hi as i64).map(Value::from).collect()
            }
            3 => {
                let (lo, hi, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
                if !(step > 0.0) || lo > hi {
                    return Err(format!("grid `{s}`: need lo <= hi and step > 0"));
                }
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                let int = [lo, step].iter().all(|v| v.fract() == 0.0);
                (0..=n)
                    .map(|i| {
                        // rounding keeps 0.1 steps free of drift in cell keys
                        let v = lo + step * i as f64;
                        if int {
                            Value::from(v as i64)
                        } else {
                            Value::from((v * 1e9).round() / 1e9)
                        }
                    })
                    .collect()
            }
            _ => return Err(format!("grid `{s}`: too many `:`")),
        };
        Ok(GridAxis {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<BTreeMap<String, Value>> {
    let mut cells = vec![BTreeMap::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for c in &cells {
            for v in &axis.values {
                let mut c = c.clone();
                c.insert(axis.key.clone(), v.clone());
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}
