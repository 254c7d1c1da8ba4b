use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendError, BackendOutput, Conditioning, RawAttention, Result, Scene,
};
use crate::schedule::{standard_normal, Schedule, ScheduleKind};
use crate::tensor::{Graph, Tensor, Var};

const WEIGHTS_SCHEMA: u32 = 1;

/// Architecture of the toy cross-attention denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnedConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for LearnedConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 16,
            width: 16,
            vocab: 8,
            model_dim: 16,
            heads: 2,
            hidden: 32,
        }
    }
}

impl LearnedConfig {
    fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Token rows in the embedding table: entities, then a background token
    /// present in every prompt, then the null token for unconditional calls.
    fn background_token(&self) -> usize {
        self.vocab
    }

    fn null_token(&self) -> usize {
        self.vocab + 1
    }
}

/// Trained or freshly initialized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedBackend {
    pub config: LearnedConfig,
    pub kind: ScheduleKind,
    pub params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    schema: u32,
    kind: String,
    model: LearnedBackend,
}

/// Leaves for every parameter on one graph.
struct Bound<'g> {
    vars: BTreeMap<&'static str, Var<'g>>,
    heads: Vec<[Var<'g>; 4]>,
}

const NAMES: [&str; 8] = ["w_in", "pos", "tokens", "w1", "b1", "w2", "w_skip", "b2"];

impl LearnedBackend {
    /// Random init; the output head (`w2`, `w_skip`, `b2`) starts at zero so
    /// the untrained model predicts zero.
    pub fn init(config: LearnedConfig, kind: ScheduleKind, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.model_dim % config.heads != 0 {
            return Err(BackendError::Config(format!(
                "model_dim {} not divisible by heads {}",
                config.model_dim, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d, hw) = (config.channels, config.model_dim, config.height * config.width);
        let dh = config.head_dim();
        let mut normal = |shape: &[usize], fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| s * rng.sample::<f64, _>(StandardNormal))
        };
        let mut params = BTreeMap::new();
        params.insert("w_in".to_string(), normal(&[c, d], c));
        params.insert("pos".to_string(), normal(&[hw, d], d).scale(0.1));
        params.insert("tokens".to_string(), normal(&[config.vocab + 2, d], 1));
        for h in 0..config.heads {
            params.insert(format!("wq{h}"), normal(&[d, dh], d));
            params.insert(format!("wk{h}"), normal(&[d, dh], d));
            params.insert(format!("wv{h}"), normal(&[d, dh], d));
            params.insert(format!("wo{h}"), normal(&[dh, d], dh));
        }
        params.insert("w1".to_string(), normal(&[d, config.hidden], d));
        params.insert("b1".to_string(), Tensor::zeros(&[1, config.hidden]));
        params.insert("w2".to_string(), Tensor::zeros(&[config.hidden, c]));
        params.insert("w_skip".to_string(), Tensor::zeros(&[d, c]));
        params.insert("b2".to_string(), Tensor::zeros(&[1, c]));
        Ok(Self {
            config,
            kind,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        let vars = NAMES
            .iter()
            .map(|&n| (n, graph.leaf(self.params[n].clone())))
            .collect();
        let heads = (0..self.config.heads)
            .map(|h| {
                ["wq", "wk", "wv", "wo"]
                    .map(|p| graph.leaf(self.params[&format!("{p}{h}")].clone()))
            })
            .collect();
        Bound { vars, heads }
    }

    fn time_embedding(&self, t: f64, t_max: f64) -> Tensor {
        let d = self.config.model_dim;
        let half = d / 2;
        let s = 1000.0 * t / t_max;
        Tensor::from_fn(&[1, d], |i| {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10000f64).ln() * k / half.max(1) as f64).exp();
            if i < half {
                (s * freq).sin()
            } else {
                (s * freq).cos()
            }
        })
    }

    fn token_ids(&self, cond: Conditioning<'_>) -> Result<Vec<usize>> {
        match cond {
            Conditioning::Prompt(p) => {
                let mut ids = Vec::with_capacity(p.entities.len() + 1);
                for &e in &p.entities {
                    if e >= self.config.vocab {
                        return Err(BackendError::Vocabulary {
                            entity: e,
                            vocab: self.config.vocab,
                        });
                    }
                    ids.push(e);
                }
                ids.push(self.config.background_token());
                Ok(ids)
            }
            Conditioning::Unconditional => Ok(vec![self.config.null_token()]),
        }
    }

    /// Prediction and head-averaged attention `[HW, tokens]` (the last token
    /// column is the background or null token).
    fn forward<'g>(
        &self,
        graph: &'g Graph,
        bound: &Bound<'g>,
        z_t: Var<'g>,
        tokens: &[usize],
        t: f64,
        t_max: f64,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let cfg = &self.config;
        let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
        let hw = h * w;
        let v = &bound.vars;
        let shape = z_t.shape();
        if shape != [c, h, w] {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "learned_predict",
                lhs: shape,
                rhs: vec![c, h, w],
            }
            .into());
        }
        let x0 = z_t.reshape(&[c, hw])?.t()?;
        let temb = graph.leaf(self.time_embedding(t, t_max));
        let x = x0.matmul(v["w_in"])?.add(v["pos"])?.add(temb)?;

        let n_tok = tokens.len();
        let mut select = Tensor::zeros(&[n_tok, cfg.vocab + 2]);
        {
            let mut data = select.clone().into_data();
            for (i, &id) in tokens.iter().enumerate() {
                data[i * (cfg.vocab + 2) + id] = 1.0;
            }
            select = Tensor::new(&[n_tok, cfg.vocab + 2], data)?;
        }
        let emb = graph.leaf(select).matmul(v["tokens"])?;

        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let mut attn_sum: Option<Var<'g>> = None;
        let mut out: Option<Var<'g>> = None;
        for [wq, wk, wv, wo] in &bound.heads {
            let q = x.matmul(*wq)?;
            let k = emb.matmul(*wk)?;
            let val = emb.matmul(*wv)?;
            let a = q.matmul(k.t()?)?.scale(scale).softmax(1)?;
            let o = a.matmul(val)?.matmul(*wo)?;
            attn_sum = Some(match attn_sum {
                Some(s) => s.add(a)?,
                None => a,
            });
            out = Some(match out {
                Some(s) => s.add(o)?,
                None => o,
            });
        }
        let x = x.add(out.expect("at least one head"))?;
        let attn = attn_sum.expect("at least one head").scale(1.0 / cfg.heads as f64);

        let hidden = x.matmul(v["w1"])?.add(v["b1"])?.tanh();
        let y = hidden
            .matmul(v["w2"])?
            .add(x.matmul(v["w_skip"])?)?
            .add(v["b2"])?;
        let pred = y.t()?.reshape(&[c, h, w])?;
        Ok((pred, attn))
    }

    /// Head-averaged attention over the prompt's tokens (entities then the
    /// background token), shape `[HW, S + 1]`.
    pub fn attention_weights<'g>(
        &self,
        graph: &'g Graph,
        z_t: Var<'g>,
        cond: Conditioning<'_>,
        schedule: &Schedule,
        t: f64,
    ) -> Result<Var<'g>> {
        let tokens = self.token_ids(cond)?;
        let bound = self.bind(graph);
        let (_, attn) = self.forward(graph, &bound, z_t, &tokens, t, schedule.t_max())?;
        Ok(attn)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightsFile {
            schema: WEIGHTS_SCHEMA,
            kind: "learned-backend".into(),
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: WeightsFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema != WEIGHTS_SCHEMA || file.kind != "learned-backend" {
            return Err(BackendError::Format(format!(
                "expected learned-backend schema {WEIGHTS_SCHEMA}, got {} schema {}",
                file.kind, file.schema
            )));
        }
        Ok(file.model)
    }
}

impl Backend for LearnedBackend {
    fn name(&self) -> &'static str {
        "learned"
    }

    fn latent_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.height, self.config.width]
    }

    fn predict<'g>(
        &self,
        graph: &'g Graph,
        z_t: Var<'g>,
        cond: Conditioning<'_>,
        schedule: &Schedule,
        t: f64,
    ) -> Result<BackendOutput<'g>> {
        if schedule.kind() != self.kind {
            return Err(BackendError::Config(format!(
                "weights trained for {:?}, schedule is {:?}",
                self.kind,
                schedule.kind()
            )));
        }
        let tokens = self.token_ids(cond)?;
        let bound = self.bind(graph);
        let (prediction, attn) =
            self.forward(graph, &bound, z_t, &tokens, t, schedule.t_max())?;
        let attention = match cond {
            Conditioning::Prompt(p) => {
                let (h, w) = (self.config.height, self.config.width);
                let s = p.entities.len();
                let cols: Vec<Var<'g>> = (0..s)
                    .map(|i| attn.select(1, i))
                    .collect::<std::result::Result<_, _>>()?;
                let maps = graph.stack(&cols)?.reshape(&[s, h, w])?;
                Some(RawAttention { maps })
            }
            Conditioning::Unconditional => None,
        };
        Ok(BackendOutput {
            prediction,
            attention,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Scenes held out for the validation loss.
    pub validation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 3e-3,
            batch: 8,
            seed: 0,
            validation: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample squared error for each epoch; entry 0 is measured
    /// before any update.
    pub loss_curve: Vec<f64>,
    pub validation_loss: f64,
    /// Validation loss of the all-zero predictor.
    pub baseline_loss: f64,
}

fn sample_time<R: Rng + ?Sized>(schedule: &Schedule, rng: &mut R) -> f64 {
    match schedule.kind() {
        ScheduleKind::VpDiffusion => rng.random_range(1..=schedule.t_max() as usize) as f64,
        ScheduleKind::LinearFlow => {
            let u: f64 = rng.random();
            schedule.t_max() * (1.0 - u).max(1e-3)
        }
    }
}

/// Per-sample squared error of `model` on one noised scene, with gradients.
fn sample_loss(
    model: &LearnedBackend,
    scene: &Scene,
    prompt: &super::PromptSpec,
    schedule: &Schedule,
    t: f64,
    eps: &Tensor,
    grads: Option<&mut BTreeMap<String, Tensor>>,
) -> Result<f64> {
    let graph = Graph::new();
    let zt = schedule.diffuse(&scene.latent, t, eps)?;
    let target = schedule.target_prediction(&scene.latent, eps)?;
    let bound = model.bind(&graph);
    let tokens = model.token_ids(Conditioning::Prompt(prompt))?;
    let (pred, _) = model.forward(
        &graph,
        &bound,
        graph.leaf(zt),
        &tokens,
        t,
        schedule.t_max(),
    )?;
    let loss = pred.sub(graph.leaf(target))?.square().sum();
    let value = loss.item();
    if let Some(acc) = grads {
        let g = graph.backward(loss)?;
        let mut add = |name: String, v: Var<'_>| {
            let gv = g.wrt(v);
            let slot = acc.get_mut(&name).expect("param");
            *slot = slot.add(&gv).expect("grad shape");
        };
        for (&n, &v) in &bound.vars {
            add(n.to_string(), v);
        }
        for (h, vars) in bound.heads.iter().enumerate() {
            for (p, v) in ["wq", "wk", "wv", "wo"].iter().zip(vars) {
                add(format!("{p}{h}"), *v);
            }
        }
    }
    Ok(value)
}

/// Train the denoiser with Adam on the epsilon (VP) or velocity (flow)
/// regression target, uniform training times. Deterministic given the seed.
pub fn train_toy_backend(
    model: LearnedBackend,
    scenes: &[Scene],
    prompts: &BTreeMap<String, super::PromptSpec>,
    schedule: &Schedule,
    cfg: &TrainConfig,
) -> Result<(LearnedBackend, TrainReport)> {
    if scenes.is_empty() {
        return Err(BackendError::Config("training set is empty".into()));
    }
    let mut model = model;
    model.kind = schedule.kind();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_val = cfg.validation.min(scenes.len() / 2);
    let (val, train) = scenes.split_at(n_val);
    let train = if train.is_empty() { scenes } else { train };
    let prompt_of = |s: &Scene| {
        prompts
            .get(&s.prompt_id)
            .ok_or_else(|| BackendError::UnknownPrompt(s.prompt_id.clone()))
    };

    // fixed validation noise
    let val_draws: Vec<(f64, Tensor)> = val
        .iter()
        .map(|s| {
            let t = sample_time(schedule, &mut rng);
            (t, standard_normal(s.latent.shape(), &mut rng))
        })
        .collect();
    let eval = |m: &LearnedBackend| -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut base = 0.0;
        for (s, (t, eps)) in val.iter().zip(&val_draws) {
            loss += sample_loss(m, s, prompt_of(s)?, schedule, *t, eps, None)?;
            base += schedule.target_prediction(&s.latent, eps)?.norm().powi(2);
        }
        let n = val.len().max(1) as f64;
        Ok((loss / n, base / n))
    };

    let (beta1, beta2, adam_eps) = (0.9, 0.999, 1e-8);
    let mut m1: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();
    let mut m2 = m1.clone();
    let mut step = 0usize;
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let mut order: Vec<usize> = (0..train.len()).collect();

    // epoch 0 loss at the initial weights, on the training draws of the first pass
    let mut first_pass = 0.0;
    for s in train {
        let t = sample_time(schedule, &mut rng);
        let eps = standard_normal(s.latent.shape(), &mut rng);
        first_pass += sample_loss(&model, s, prompt_of(s)?, schedule, t, &eps, None)?;
    }
    curve.push(first_pass / train.len() as f64);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut grads: BTreeMap<String, Tensor> = m1
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = &train[i];
                let t = sample_time(schedule, &mut rng);
                let eps = standard_normal(s.latent.shape(), &mut rng);
                batch_loss +=
                    sample_loss(&model, s, prompt_of(s)?, schedule, t, &eps, Some(&mut grads))?;
            }
            step += 1;
            if !batch_loss.is_finite() {
                return Err(BackendError::Diverged {
                    step,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            let inv = 1.0 / chunk.len() as f64;
            let bc1 = 1.0 - f64::powi(beta1, step as i32);
            let bc2 = 1.0 - f64::powi(beta2, step as i32);
            for (name, p) in model.params.iter_mut() {
                let g = grads[name].scale(inv);
                let a = m1.get_mut(name).expect("moment");
                *a = a.scale(beta1).axpy(1.0 - beta1, &g)?;
                let b = m2.get_mut(name).expect("moment");
                *b = b.scale(beta2).zip_map(&g, |v, g| v + (1.0 - beta2) * g * g)?;
                let upd = a.zip_map(b, |m, v| {
                    cfg.lr * (m / bc1) / ((v / bc2).sqrt() + adam_eps)
                })?;
                *p = p.sub(&upd)?;
            }
        }
        curve.push(epoch_loss / train.len() as f64);
    }
    let (validation_loss, baseline_loss) = eval(&model)?;
    Ok((
        model,
        TrainReport {
            loss_curve: curve,
            validation_loss,
            baseline_loss,
        },
    ))
}
