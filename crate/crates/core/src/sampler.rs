//! End-to-end generation pipelines.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, Conditioning, PromptSpec};
use crate::criterion::{Criterion, CriterionConfig, CriterionError, CriterionKind};
use crate::prior::{
    init_prior, learn_mu, learn_mu_sigma, AttentionObjective, CovKind, CovParam, GaussianPrior,
    Objective, OptimConfig, PriorError,
};
use crate::rng::{RngStream, CHAIN, DRAW, PRIOR, SOLVER};
use crate::schedule::{standard_normal, Schedule, ScheduleError, ScheduleKind};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("pipeline config: {0}")]
    Config(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("non-finite guidance update at grid position {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    Gsn,
    Saga,
    SagaUni,
    SagaSigma,
    SagaUniSigma,
    SagaPlus,
    SagaSigmaPlus,
    SagaBbox,
    SagaPlusBbox,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Vanilla,
        Method::Gsn,
        Method::Saga,
        Method::SagaUni,
        Method::SagaSigma,
        Method::SagaUniSigma,
        Method::SagaPlus,
        Method::SagaSigmaPlus,
        Method::SagaBbox,
        Method::SagaPlusBbox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Gsn => "gsn",
            Method::Saga => "saga",
            Method::SagaUni => "saga-uni",
            Method::SagaSigma => "saga-sigma",
            Method::SagaUniSigma => "saga-uni-sigma",
            Method::SagaPlus => "saga-plus",
            Method::SagaSigmaPlus => "saga-sigma-plus",
            Method::SagaBbox => "saga-bbox",
            Method::SagaPlusBbox => "saga-plus-bbox",
        }
    }

    pub fn learns_prior(self) -> bool {
        !matches!(self, Method::Vanilla | Method::Gsn)
    }

    pub fn learns_sigma(self) -> bool {
        matches!(
            self,
            Method::SagaSigma | Method::SagaUniSigma | Method::SagaSigmaPlus
        )
    }

    /// One prior per prompt shared by all its samples.
    pub fn is_unique(self) -> bool {
        matches!(self, Method::SagaUni | Method::SagaUniSigma)
    }

    pub fn guided(self) -> bool {
        matches!(
            self,
            Method::Gsn | Method::SagaPlus | Method::SagaSigmaPlus | Method::SagaPlusBbox
        )
    }

    pub fn uses_boxes(self) -> bool {
        matches!(self, Method::SagaBbox | Method::SagaPlusBbox)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SamplerError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SamplerError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub method: Method,
    /// Grid position of `t*`; 10 on VP grids and 5 on flow grids when absent.
    pub step_index: Option<usize>,
    /// Guidance stops at this grid position; half the grid when absent.
    pub cutoff: Option<usize>,
    /// Guidance step size at position 0, decaying linearly to 0 at the cutoff.
    pub guidance_lr: f64,
    /// `s` in `s * cond + (1 - s) * uncond`; 1 disables the blend.
    pub cfg_scale: f64,
    /// Covariance structure for the sigma-learning methods.
    pub cov: CovParam,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::Vanilla,
            step_index: None,
            cutoff: None,
            guidance_lr: 20.0,
            cfg_scale: 1.0,
            cov: CovParam::new(CovKind::Block(4), false),
        }
    }
}

impl PipelineConfig {
    pub fn step_index(&self, schedule: &Schedule) -> usize {
        self.step_index.unwrap_or(match schedule.kind() {
            ScheduleKind::VpDiffusion => 10,
            ScheduleKind::LinearFlow => 5,
        })
    }

    pub fn cutoff(&self, schedule: &Schedule) -> usize {
        self.cutoff.unwrap_or(schedule.grid().len() / 2)
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        let n = schedule.grid().len();
        if self.method.learns_prior() && self.step_index(schedule) >= n {
            return Err(SamplerError::Config(format!(
                "step index {} outside grid of {n}",
                self.step_index(schedule)
            )));
        }
        if self.cutoff(schedule) > n {
            return Err(SamplerError::Config(format!(
                "cutoff {} beyond grid of {n}",
                self.cutoff(schedule)
            )));
        }
        if !(self.guidance_lr >= 0.0 && self.guidance_lr.is_finite()) {
            return Err(SamplerError::Config(format!(
                "guidance lr must be nonnegative, got {}",
                self.guidance_lr
            )));
        }
        if !self.cfg_scale.is_finite() {
            return Err(SamplerError::Config("cfg scale must be finite".into()));
        }
        if self.method.learns_sigma() && self.cov.kind == CovKind::Fixed {
            return Err(SamplerError::Config(format!(
                "method {} needs a learnable covariance",
                self.method
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub mu_std: f64,
    pub sigma_ref: f64,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

impl PriorSummary {
    fn new(prior: &GaussianPrior, losses: &[f64]) -> Self {
        Self {
            mu_std: prior.mu.std(),
            sigma_ref: prior.sigma_ref,
            steps: losses.len(),
            initial_loss: losses.first().copied(),
            final_loss: losses.last().copied(),
        }
    }
}

/// One generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub seed: u64,
    pub method: Method,
    pub z0: Tensor,
    pub t_star: Option<f64>,
    pub prior: Option<PriorSummary>,
    /// Criterion value before each guidance update.
    pub criterion_trace: Vec<f64>,
    pub solver_calls: usize,
}

/// Generation pipelines over one backend and schedule.
pub struct Pipeline<'a> {
    pub backend: &'a dyn Backend,
    pub schedule: &'a Schedule,
    pub config: PipelineConfig,
    pub optim: OptimConfig,
    pub criterion: CriterionConfig,
    solver_calls: AtomicUsize,
    optimizer_runs: AtomicUsize,
}

struct Chain {
    z: Tensor,
    trace: Vec<f64>,
    calls: usize,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        backend: &'a dyn Backend,
        schedule: &'a Schedule,
        config: PipelineConfig,
        optim: OptimConfig,
        criterion: CriterionConfig,
    ) -> Result<Self> {
        config.validate(schedule)?;
        Ok(Self {
            backend,
            schedule,
            config,
            optim,
            criterion,
            solver_calls: AtomicUsize::new(0),
            optimizer_runs: AtomicUsize::new(0),
        })
    }

    /// Solver steps taken by this pipeline so far.
    pub fn solver_calls(&self) -> usize {
        self.solver_calls.load(Ordering::Relaxed)
    }

    /// Prior optimizations run by this pipeline so far.
    pub fn optimizer_runs(&self) -> usize {
        self.optimizer_runs.load(Ordering::Relaxed)
    }

    fn criterion_for(&self, prompt: &PromptSpec) -> Result<Criterion> {
        let mut cfg = self.criterion.clone();
        if self.config.method.uses_boxes() {
            cfg.kind = CriterionKind::BboxCombined;
        }
        Ok(Criterion::for_prompt(&cfg, prompt)?)
    }

    /// Stream of one sample of one prompt.
    pub fn stream(root: &RngStream, prompt: &PromptSpec, seed: u64) -> RngStream {
        root.child(prompt.id.clone()).child(seed.to_string())
    }

    /// All samples of `prompt` for `seeds`: one record per seed.
    pub fn run(
        &self,
        prompt: &PromptSpec,
        seeds: &[u64],
        root: &RngStream,
    ) -> Result<Vec<GenerationRecord>> {
        if self.config.method.is_unique() {
            self.generate_unique(prompt, seeds, root)
        } else {
            seeds
                .iter()
                .map(|&s| self.generate(prompt, s, root))
                .collect()
        }
    }

    fn prediction(&self, z: &Tensor, prompt: &PromptSpec, t: f64) -> Result<Tensor> {
        let g = Graph::new();
        let zv = g.leaf(z.clone());
        let cond = self
            .backend
            .predict(&g, zv, Conditioning::Prompt(prompt), self.schedule, t)?
            .prediction
            .value();
        let s = self.config.cfg_scale;
        if s == 1.0 {
            return Ok((*cond).clone());
        }
        let unc = self
            .backend
            .predict(&g, zv, Conditioning::Unconditional, self.schedule, t)?
            .prediction
            .value();
        Ok(cond.zip_map(&unc, |c, u| s * c + (1.0 - s) * u)?)
    }

    /// Denoise grid positions `from..to`, guiding while the decayed step size
    /// is positive when `guide` is set.
    fn denoise(
        &self,
        mut chain: Chain,
        from: usize,
        to: usize,
        prompt: &PromptSpec,
        stream: &RngStream,
        guide: Option<&Criterion>,
    ) -> Result<Chain> {
        let grid = self.schedule.grid();
        let cutoff = self.config.cutoff(self.schedule);
        for j in from..to {
            let t = grid[j];
            let t_next = self.schedule.next_time(j);
            if let Some(criterion) = guide {
                let alpha = if j < cutoff {
                    self.config.guidance_lr * (1.0 - j as f64 / cutoff as f64)
                } else {
                    0.0
                };
                if alpha > 0.0 {
                    let obj = AttentionObjective {
                        backend: self.backend,
                        prompt,
                        criterion,
                        schedule: self.schedule,
                        t,
                    };
                    let g = Graph::new();
                    let zv = g.leaf(chain.z.clone());
                    let loss = obj.loss(&g, zv)?;
                    chain.trace.push(loss.item());
                    let grad = g.backward(loss)?.wrt(zv);
                    let next = chain.z.axpy(-alpha, &grad)?;
                    if !next.all_finite() {
                        return Err(SamplerError::NonFinite(j));
                    }
                    chain.z = next;
                }
            }
            let pred = self.prediction(&chain.z, prompt, t)?;
            let noise = match self.schedule.kind() {
                ScheduleKind::VpDiffusion if t_next > 0.0 => {
                    let mut rng = stream.rng(&format!("{SOLVER}/{j}"));
                    Some(standard_normal(chain.z.shape(), &mut rng))
                }
                _ => None,
            };
            chain.z = self
                .schedule
                .solver_step_with_noise(&chain.z, &pred, t, t_next, noise.as_ref())?;
            chain.calls += 1;
            self.solver_calls.fetch_add(1, Ordering::Relaxed);
        }
        Ok(chain)
    }

    fn start(&self, stream: &RngStream) -> Chain {
        let shape = self.backend.latent_shape();
        let mut rng = stream.rng(CHAIN);
        Chain {
            z: standard_normal(&shape, &mut rng),
            trace: Vec::new(),
            calls: 0,
        }
    }

    fn learn(
        &self,
        z_star: &Tensor,
        prompt: &PromptSpec,
        criterion: &Criterion,
        stream: &RngStream,
    ) -> Result<(GaussianPrior, PriorSummary)> {
        let idx = self.config.step_index(self.schedule);
        let method = self.config.method;
        let cov = if method.learns_sigma() {
            self.config.cov
        } else {
            CovParam::FIXED
        };
        let prior = init_prior(z_star, self.backend, prompt, self.schedule, idx, cov)?;
        if self.optim.steps == 0 {
            let summary = PriorSummary::new(&prior, &[]);
            return Ok((prior, summary));
        }
        let obj = AttentionObjective {
            backend: self.backend,
            prompt,
            criterion,
            schedule: self.schedule,
            t: prior.t_star,
        };
        let mut rng = stream.rng(PRIOR);
        self.optimizer_runs.fetch_add(1, Ordering::Relaxed);
        let (prior, trace) = if method.learns_sigma() {
            learn_mu_sigma(prior, &obj, &self.optim, &mut rng)?
        } else {
            learn_mu(prior, &obj, &self.optim, &mut rng)?
        };
        let summary = PriorSummary::new(&prior, &trace.losses);
        Ok((prior, summary))
    }

    fn draw(&self, prior: &GaussianPrior, stream: &RngStream) -> Result<Tensor> {
        let mut rng = stream.rng(DRAW);
        Ok(prior.sample(&mut rng, 1)?.remove(0))
    }

    /// One sample with a per-sample chain (every method except the unique
    /// distribution ones).
    pub fn generate(
        &self,
        prompt: &PromptSpec,
        seed: u64,
        root: &RngStream,
    ) -> Result<GenerationRecord> {
        let method = self.config.method;
        if method.is_unique() {
            return Ok(self.generate_unique(prompt, &[seed], root)?.remove(0));
        }
        let stream = Self::stream(root, prompt, seed);
        let n = self.schedule.grid().len();
        let criterion = self.criterion_for(prompt)?;
        let guide = method.guided().then_some(&criterion);
        let chain = self.start(&stream);
        let (chain, t_star, prior) = if method.learns_prior() {
            let idx = self.config.step_index(self.schedule);
            let chain = self.denoise(chain, 0, idx, prompt, &stream, None)?;
            let (prior, summary) = self.learn(&chain.z, prompt, &criterion, &stream)?;
            let chain = Chain {
                z: self.draw(&prior, &stream)?,
                ..chain
            };
            let chain = self.denoise(chain, idx, n, prompt, &stream, guide)?;
            (chain, Some(prior.t_star), Some(summary))
        } else {
            (self.denoise(chain, 0, n, prompt, &stream, guide)?, None, None)
        };
        Ok(GenerationRecord {
            prompt_id: prompt.id.clone(),
            seed,
            method,
            z0: chain.z,
            t_star,
            prior,
            criterion_trace: chain.trace,
            solver_calls: chain.calls,
        })
    }

    /// Unique-distribution sampling: the chain of the first seed reaches
    /// `t*`, one prior is learned, and every seed draws from it.
    pub fn generate_unique(
        &self,
        prompt: &PromptSpec,
        seeds: &[u64],
        root: &RngStream,
    ) -> Result<Vec<GenerationRecord>> {
        let Some(&first) = seeds.first() else {
            return Err(SamplerError::Config("no seeds".into()));
        };
        let method = self.config.method;
        let n = self.schedule.grid().len();
        let idx = self.config.step_index(self.schedule);
        let criterion = self.criterion_for(prompt)?;
        let stream = Self::stream(root, prompt, first);
        let chain = self.denoise(self.start(&stream), 0, idx, prompt, &stream, None)?;
        let (prior, summary) = self.learn(&chain.z, prompt, &criterion, &stream)?;
        seeds
            .iter()
            .map(|&seed| {
                let s = Self::stream(root, prompt, seed);
                let c = Chain {
                    z: self.draw(&prior, &s)?,
                    trace: Vec::new(),
                    calls: chain.calls,
                };
                let c = self.denoise(c, idx, n, prompt, &s, None)?;
                Ok(GenerationRecord {
                    prompt_id: prompt.id.clone(),
                    seed,
                    method,
                    z0: c.z,
                    t_star: Some(prior.t_star),
                    prior: Some(summary.clone()),
                    criterion_trace: Vec::new(),
                    solver_calls: c.calls,
                })
            })
            .collect()
    }
}
