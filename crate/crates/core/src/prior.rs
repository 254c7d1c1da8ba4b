//! Prompt-conditioned Gaussian prior over partially denoised latents and
//! the stochastic optimizer that fits it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    preprocess_attention, Backend, BackendError, Conditioning, PromptSpec,
};
use crate::criterion::{Criterion, CriterionError};
use crate::schedule::{standard_normal, Schedule, ScheduleError, ScheduleKind};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Floor on Cholesky diagonal entries.
pub const CHOL_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error("optimizer config: {0}")]
    Config(String),
    #[error("unknown covariance kind `{0}`")]
    UnknownCov(String),
    #[error("block size {block} does not divide the {positions} spatial positions")]
    BlockSize { block: usize, positions: usize },
    #[error("covariance kind `{0}` has no learnable parameters")]
    NotLearnable(CovKind),
    #[error("non-finite {what} at optimizer step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("attention maps are required but the backend returned none")]
    NoAttention,
}

pub type Result<T> = std::result::Result<T, PriorError>;

/// Structure of the Cholesky factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CovKind {
    /// `b_t I`, nothing learned.
    Fixed,
    /// One value for the whole matrix (or one per channel when not shared).
    Scalar,
    /// One value per channel.
    ChanScalar,
    /// Diagonal over spatial positions.
    Diag,
    /// Lower-triangular blocks of `b` consecutive row-major positions.
    Block(usize),
}

impl fmt::Display for CovKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovKind::Fixed => write!(f, "fixed"),
            CovKind::Scalar => write!(f, "scalar"),
            CovKind::ChanScalar => write!(f, "chan-scalar"),
            CovKind::Diag => write!(f, "diag"),
            CovKind::Block(b) => write!(f, "block:{b}"),
        }
    }
}

impl FromStr for CovKind {
    type Err = PriorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fixed" => CovKind::Fixed,
            "scalar" => CovKind::Scalar,
            "chan-scalar" => CovKind::ChanScalar,
            "diag" => CovKind::Diag,
            _ => match s.strip_prefix("block:").map(str::parse::<usize>) {
                Some(Ok(b)) if b > 0 => CovKind::Block(b),
                _ => return Err(PriorError::UnknownCov(s.to_string())),
            },
        })
    }
}

impl TryFrom<String> for CovKind {
    type Error = PriorError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CovKind> for String {
    fn from(k: CovKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovParam {
    pub kind: CovKind,
    /// One parameter set for all channels instead of one per channel.
    pub shared: bool,
}

impl CovParam {
    pub const FIXED: CovParam = CovParam {
        kind: CovKind::Fixed,
        shared: true,
    };

    pub fn new(kind: CovKind, shared: bool) -> Self {
        Self { kind, shared }
    }

    /// Storage shape of the factor for a `[C, H, W]` latent; `None` for fixed.
    pub fn storage_shape(&self, shape: [usize; 3]) -> Result<Option<Vec<usize>>> {
        let [c, h, w] = shape;
        let g = if self.shared { 1 } else { c };
        Ok(match self.kind {
            CovKind::Fixed => None,
            CovKind::Scalar => Some(vec![g, 1, 1]),
            CovKind::ChanScalar => Some(vec![c, 1, 1]),
            CovKind::Diag => Some(vec![g, h, w]),
            CovKind::Block(b) => {
                if (h * w) % b != 0 {
                    return Err(PriorError::BlockSize {
                        block: b,
                        positions: h * w,
                    });
                }
                Some(vec![g, h * w / b, b, b])
            }
        })
    }

    /// Number of free parameters (strict upper triangles of blocks excluded).
    pub fn num_parameters(&self, shape: [usize; 3]) -> Result<usize> {
        Ok(match (self.kind, self.storage_shape(shape)?) {
            (_, None) => 0,
            (CovKind::Block(b), Some(s)) => s[0] * s[1] * b * (b + 1) / 2,
            (_, Some(s)) => s.iter().product(),
        })
    }

    /// Factor equal to `b I` in this structure.
    fn init_factor(&self, shape: [usize; 3], b: f64) -> Result<Option<Tensor>> {
        let Some(st) = self.storage_shape(shape)? else {
            return Ok(None);
        };
        Ok(Some(match self.kind {
            CovKind::Block(bs) => Tensor::from_fn(&st, |i| {
                let (r, c) = ((i / bs) % bs, i % bs);
                if r == c {
                    b
                } else {
                    0.0
                }
            }),
            _ => Tensor::full(&st, b),
        }))
    }

    fn lower_mask(&self, st: &[usize]) -> Option<Tensor> {
        match self.kind {
            CovKind::Block(bs) => Some(Tensor::from_fn(st, |i| {
                if (i % bs) <= (i / bs) % bs {
                    1.0
                } else {
                    0.0
                }
            })),
            _ => None,
        }
    }

    /// Clamp diagonal entries of a factor to [`CHOL_FLOOR`] and zero the
    /// strict upper triangle of blocks.
    fn project(&self, factor: &Tensor) -> Tensor {
        match self.kind {
            CovKind::Block(bs) => factor.map_indexed(|i, v| {
                let (r, c) = ((i / bs) % bs, i % bs);
                match r.cmp(&c) {
                    std::cmp::Ordering::Equal => v.max(CHOL_FLOOR),
                    std::cmp::Ordering::Less => 0.0,
                    std::cmp::Ordering::Greater => v,
                }
            }),
            _ => factor.map(|v| v.max(CHOL_FLOOR)),
        }
    }
}

/// Learnable `q(z_t | y) = N(a mu, L L^T)` at one grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub schedule: ScheduleKind,
    pub step_index: usize,
    pub t_star: f64,
    pub a: f64,
    pub b: f64,
    pub mu: Tensor,
    pub cov: CovParam,
    pub chol: Option<Tensor>,
    pub sigma_ref: f64,
}

impl GaussianPrior {
    /// Prior with a given mean and reference deviation, factor at `b I`.
    pub fn new(
        schedule: &Schedule,
        step_index: usize,
        mu: Tensor,
        sigma_ref: f64,
        cov: CovParam,
    ) -> Result<Self> {
        let t_star = *schedule.grid().get(step_index).ok_or_else(|| {
            PriorError::Config(format!(
                "step index {step_index} outside grid of {}",
                schedule.grid().len()
            ))
        })?;
        let (a, b) = schedule.coefficients(t_star)?;
        let shape = latent_shape(&mu)?;
        Ok(Self {
            schedule: schedule.kind(),
            step_index,
            t_star,
            a,
            b,
            chol: cov.init_factor(shape, b)?,
            mu,
            cov,
            sigma_ref,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        latent_shape(&self.mu).expect("prior mean is 3-D")
    }

    pub fn num_cov_parameters(&self) -> usize {
        self.cov.num_parameters(self.shape()).expect("validated at construction")
    }

    /// `a mu + L eps` on the tape.
    fn sample_var<'g>(
        &self,
        graph: &'g Graph,
        mu: Var<'g>,
        chol: Option<Var<'g>>,
        eps: &Tensor,
    ) -> Result<Var<'g>> {
        let mean = mu.scale(self.a);
        let noise = match chol {
            None => graph.leaf(eps.scale(self.b)),
            Some(l) => self.apply_factor(graph, l, graph.leaf(eps.clone()))?,
        };
        Ok(mean.add(noise)?)
    }

    fn apply_factor<'g>(&self, graph: &'g Graph, l: Var<'g>, eps: Var<'g>) -> Result<Var<'g>> {
        let [c, h, w] = self.shape();
        match self.cov.kind {
            CovKind::Block(bs) => {
                let st = l.shape();
                let mask = self.cov.lower_mask(&st).expect("block mask");
                let lower = l.mul(graph.leaf(mask))?;
                let e = eps.reshape(&[c, h * w / bs, 1, bs])?;
                let prod = lower.mul(e)?.sum_axes(&[3], false)?;
                Ok(prod.reshape(&[c, h, w])?)
            }
            _ => Ok(l.mul(eps)?),
        }
    }

    /// Draw `n` latents at `t_star`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Tensor>> {
        (0..n)
            .map(|_| {
                let eps = standard_normal(self.mu.shape(), rng);
                self.sample_with(&eps)
            })
            .collect()
    }

    /// Deterministic sample for given standard-normal noise.
    pub fn sample_with(&self, eps: &Tensor) -> Result<Tensor> {
        let graph = Graph::new();
        let mu = graph.leaf(self.mu.clone());
        let chol = self.chol.clone().map(|l| graph.leaf(l));
        Ok((*self.sample_var(&graph, mu, chol, eps)?.value()).clone())
    }
}

fn latent_shape(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(PriorError::Config(format!("latent must be [C, H, W], got {s:?}"))),
    }
}

/// `mu` scaled down to `sigma_ref` when its deviation exceeds it.
pub fn rescale_mu(mu: &Tensor, sigma_ref: f64) -> Tensor {
    let s = mu.std();
    if s > sigma_ref {
        mu.scale(sigma_ref / s)
    } else {
        mu.clone()
    }
}

/// Per-channel spatial mean, broadcast back over `H x W`.
pub fn dc_component(z: &Tensor) -> Result<Tensor> {
    let [c, h, w] = latent_shape(z)?;
    let n = h * w;
    let means: Vec<f64> = (0..c)
        .map(|k| {
            // shifted by the first element so constant channels come back exactly
            let ch = &z.data()[k * n..(k + 1) * n];
            ch[0] + ch.iter().map(|v| v - ch[0]).sum::<f64>() / n as f64
        })
        .collect();
    Ok(Tensor::from_fn(&[c, h, w], |i| means[i / n]))
}

/// Clean-latent estimate at `z_t`, mean initialized to its DC component and
/// `sigma_ref` to its standard deviation.
pub fn init_prior(
    z_t: &Tensor,
    backend: &dyn Backend,
    prompt: &PromptSpec,
    schedule: &Schedule,
    step_index: usize,
    cov: CovParam,
) -> Result<GaussianPrior> {
    let t = *schedule
        .grid()
        .get(step_index)
        .ok_or_else(|| PriorError::Config(format!("step index {step_index} outside grid")))?;
    let graph = Graph::new();
    let z = graph.leaf(z_t.clone());
    let out = backend.predict(&graph, z, Conditioning::Prompt(prompt), schedule, t)?;
    let z0 = schedule.estimate_z0(z_t, &out.prediction.value(), t)?;
    GaussianPrior::new(schedule, step_index, dc_component(&z0)?, z0.std(), cov)
}

/// A scalar objective of the sampled latent.
pub trait Objective: Sync {
    fn loss<'g>(&self, graph: &'g Graph, z_t: Var<'g>) -> Result<Var<'g>>;
}

/// Criterion on the backend's preprocessed attention at a fixed time.
pub struct AttentionObjective<'a> {
    pub backend: &'a dyn Backend,
    pub prompt: &'a PromptSpec,
    pub criterion: &'a Criterion,
    pub schedule: &'a Schedule,
    pub t: f64,
}

impl Objective for AttentionObjective<'_> {
    fn loss<'g>(&self, graph: &'g Graph, z_t: Var<'g>) -> Result<Var<'g>> {
        let out = self.backend.predict(
            graph,
            z_t,
            Conditioning::Prompt(self.prompt),
            self.schedule,
            self.t,
        )?;
        let raw = out.attention.ok_or(PriorError::NoAttention)?;
        Ok(self.criterion.evaluate(&preprocess_attention(raw)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Noise draws averaged per step.
    pub batch: usize,
    pub rescale: bool,
    /// Learning rate of the covariance factor; `lr` when absent.
    pub cov_lr: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::for_schedule(ScheduleKind::VpDiffusion)
    }
}

impl OptimConfig {
    pub fn for_schedule(kind: ScheduleKind) -> Self {
        let (momentum, batch) = match kind {
            ScheduleKind::VpDiffusion => (0.4, 10),
            ScheduleKind::LinearFlow => (0.7, 4),
        };
        Self {
            steps: 50,
            lr: 20.0,
            momentum,
            batch,
            rescale: true,
            cov_lr: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PriorError::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if let Some(c) = self.cov_lr {
            if !(c >= 0.0 && c.is_finite()) {
                return bad(format!("cov_lr must be nonnegative, got {c}"));
            }
        }
        Ok(())
    }
}

/// Per-step history of an optimization run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimTrace {
    /// Batch-mean loss at the parameters before each step.
    pub losses: Vec<f64>,
    /// `std(mu)` after each step (after rescaling).
    pub mu_std: Vec<f64>,
}

/// Momentum SGD on the mean only.
pub fn learn_mu<R: Rng + ?Sized>(
    prior: GaussianPrior,
    objective: &dyn Objective,
    config: &OptimConfig,
    rng: &mut R,
) -> Result<(GaussianPrior, OptimTrace)> {
    optimize(prior, objective, config, false, rng)
}

/// Momentum SGD on the mean and the Cholesky factor jointly.
pub fn learn_mu_sigma<R: Rng + ?Sized>(
    prior: GaussianPrior,
    objective: &dyn Objective,
    config: &OptimConfig,
    rng: &mut R,
) -> Result<(GaussianPrior, OptimTrace)> {
    if prior.chol.is_none() {
        return Err(PriorError::NotLearnable(prior.cov.kind));
    }
    optimize(prior, objective, config, true, rng)
}

fn optimize<R: Rng + ?Sized>(
    mut prior: GaussianPrior,
    objective: &dyn Objective,
    config: &OptimConfig,
    learn_cov: bool,
    rng: &mut R,
) -> Result<(GaussianPrior, OptimTrace)> {
    config.validate()?;
    let cov_lr = config.cov_lr.unwrap_or(config.lr);
    let mut vel_mu = Tensor::zeros(prior.mu.shape());
    let mut vel_l = prior.chol.as_ref().map(|l| Tensor::zeros(l.shape()));
    let mut trace = OptimTrace::default();

    for step in 0..config.steps {
        let mut g_mu = Tensor::zeros(prior.mu.shape());
        let mut g_l = vel_l.as_ref().map(|v| Tensor::zeros(v.shape()));
        let mut total = 0.0;
        for _ in 0..config.batch {
            let eps = standard_normal(prior.mu.shape(), rng);
            let graph = Graph::new();
            let mu = graph.leaf(prior.mu.clone());
            let chol = prior.chol.clone().map(|l| graph.leaf(l));
            let z = prior.sample_var(&graph, mu, chol, &eps)?;
            let loss = objective.loss(&graph, z)?;
            total += loss.item();
            let grads = graph.backward(loss)?;
            g_mu = g_mu.add(&grads.wrt(mu))?;
            if let (true, Some(acc), Some(l)) = (learn_cov, g_l.as_mut(), chol) {
                *acc = acc.add(&grads.wrt(l))?;
            }
        }
        let inv = 1.0 / config.batch as f64;
        let mean_loss = total * inv;
        if !mean_loss.is_finite() {
            return Err(PriorError::NonFinite { step, what: "loss" });
        }
        let g_mu = g_mu.scale(inv);
        if !g_mu.all_finite() {
            return Err(PriorError::NonFinite {
                step,
                what: "mean gradient",
            });
        }
        trace.losses.push(mean_loss);

        vel_mu = vel_mu.scale(config.momentum).axpy(-config.lr, &g_mu)?;
        prior.mu = prior.mu.add(&vel_mu)?;

        if learn_cov {
            let g = g_l.expect("factor gradient").scale(inv);
            if !g.all_finite() {
                return Err(PriorError::NonFinite {
                    step,
                    what: "covariance gradient",
                });
            }
            let v = vel_l.as_mut().expect("factor velocity");
            *v = v.scale(config.momentum).axpy(-cov_lr, &g)?;
            let l = prior.chol.as_ref().expect("factor");
            prior.chol = Some(prior.cov.project(&l.add(v)?));
        }
        if config.rescale {
            prior.mu = rescale_mu(&prior.mu, prior.sigma_ref);
        }
        trace.mu_std.push(prior.mu.std());
    }
    Ok((prior, trace))
}
