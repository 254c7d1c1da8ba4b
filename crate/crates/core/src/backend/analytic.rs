use std::collections::BTreeMap;
use std::sync::Arc;

use super::{
    Backend, BackendError, BackendOutput, Conditioning, Prototype, PrototypeLibrary, RawAttention,
    Result,
};
use crate::schedule::Schedule;
use crate::tensor::{Graph, Tensor, Var};

/// Prototype set in matrix form.
#[derive(Debug)]
struct Component {
    /// `[K, D]`
    means: Tensor,
    /// `[D, K]`
    means_t: Tensor,
    log_weights: Vec<f64>,
    sq_norms: Vec<f64>,
    /// `[S, C]` signatures of the prompt entities.
    signatures: Option<Tensor>,
}

impl Component {
    fn new(protos: &[Prototype], signatures: Option<Tensor>) -> Self {
        let k = protos.len();
        let d = protos[0].latent.len();
        let mut means = Vec::with_capacity(k * d);
        for p in protos {
            means.extend_from_slice(p.latent.data());
        }
        let mut means_t = vec![0.0; k * d];
        for i in 0..k {
            for j in 0..d {
                means_t[j * k + i] = means[i * d + j];
            }
        }
        Self {
            sq_norms: protos.iter().map(|p| p.latent.norm().powi(2)).collect(),
            log_weights: protos.iter().map(|p| p.weight.ln()).collect(),
            means: Tensor::new(&[k, d], means).expect("means"),
            means_t: Tensor::new(&[d, k], means_t).expect("means_t"),
            signatures,
        }
    }
}

/// Exact posterior-mean denoiser for the prototype mixture.
///
/// With `z_t = a m_k + b eps` under prior weights `pi_k`, the posterior over
/// components is `softmax_k(log pi_k - |z_t - a m_k|^2 / (2 b^2))` and the
/// clean estimate is the weighted mean of prototypes. Raw attention for entity
/// `s` is `max(<z0_hat[:, i, j], g_s>, 0)`.
#[derive(Debug, Clone)]
pub struct AnalyticBackend {
    library: Arc<PrototypeLibrary>,
    conditional: Arc<BTreeMap<String, Component>>,
    unconditional: Arc<Component>,
}

impl AnalyticBackend {
    pub fn new(library: PrototypeLibrary) -> Self {
        let library = Arc::new(library);
        let conditional = library
            .prompts
            .iter()
            .map(|(id, p)| {
                let sig = library.templates.rows(&p.prompt.entities);
                (id.clone(), Component::new(&p.prototypes, Some(sig)))
            })
            .collect();
        let unconditional = Component::new(&library.unconditional(), None);
        Self {
            library,
            conditional: Arc::new(conditional),
            unconditional: Arc::new(unconditional),
        }
    }

    pub fn library(&self) -> &PrototypeLibrary {
        &self.library
    }

    /// Posterior weights over the prompt's prototypes and the clean estimate.
    pub fn posterior<'g>(
        &self,
        graph: &'g Graph,
        z_t: Var<'g>,
        cond: Conditioning<'_>,
        schedule: &Schedule,
        t: f64,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let comp = self.component(cond)?;
        let (a, b) = schedule.coefficients(t)?;
        if b == 0.0 {
            return Err(BackendError::Degenerate(t));
        }
        let shape = z_t.shape();
        let d: usize = shape.iter().product();
        if d != comp.means.shape()[1] {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "analytic_predict",
                lhs: shape,
                rhs: self.latent_shape().to_vec(),
            }
            .into());
        }
        // -|z - a m|^2 / 2b^2 = (a<z, m> - a^2 |m|^2 / 2) / b^2 - |z|^2 / 2b^2;
        // the last term is shared by all components and cancels in the softmax.
        let k = comp.log_weights.len();
        let inv_b2 = 1.0 / (b * b);
        let bias: Vec<f64> = comp
            .log_weights
            .iter()
            .zip(&comp.sq_norms)
            .map(|(lw, n2)| lw - 0.5 * a * a * n2 * inv_b2)
            .collect();
        let bias = graph.leaf(Tensor::new(&[1, k], bias)?);
        let proj = z_t
            .reshape(&[1, d])?
            .matmul(graph.leaf(comp.means_t.clone()))?;
        let logits = proj.scale(a * inv_b2).add(bias)?;
        let weights = logits.softmax(1)?;
        let z0 = weights
            .matmul(graph.leaf(comp.means.clone()))?
            .reshape(&shape)?;
        Ok((weights.reshape(&[k])?, z0))
    }

    fn component(&self, cond: Conditioning<'_>) -> Result<&Component> {
        match cond {
            Conditioning::Prompt(p) => self
                .conditional
                .get(&p.id)
                .ok_or_else(|| BackendError::UnknownPrompt(p.id.clone())),
            Conditioning::Unconditional => Ok(&self.unconditional),
        }
    }

    /// Raw attention maps from a clean-latent estimate.
    pub fn attention_from_z0<'g>(
        &self,
        graph: &'g Graph,
        z0: Var<'g>,
        signatures: &Tensor,
    ) -> Result<RawAttention<'g>> {
        let shape = z0.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let s = signatures.shape()[0];
        let corr = graph
            .leaf(signatures.clone())
            .matmul(z0.reshape(&[c, h * w])?)?;
        let maps = corr
            .clamp_min(0.0)
            .scale(self.library.config.attention_gain)
            .reshape(&[s, h, w])?;
        Ok(RawAttention { maps })
    }
}

impl Backend for AnalyticBackend {
    fn name(&self) -> &'static str {
        "analytic"
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.library.config.latent_shape()
    }

    fn predict<'g>(
        &self,
        graph: &'g Graph,
        z_t: Var<'g>,
        cond: Conditioning<'_>,
        schedule: &Schedule,
        t: f64,
    ) -> Result<BackendOutput<'g>> {
        let (_, z0) = self.posterior(graph, z_t, cond, schedule, t)?;
        let prediction = schedule.prediction_from_z0(z_t, z0, t)?;
        let attention = match self.component(cond)?.signatures.as_ref() {
            Some(sig) => Some(self.attention_from_z0(graph, z0, sig)?),
            None => None,
        };
        Ok(BackendOutput {
            prediction,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{build_scene_dataset, PromptSpec, SceneConfig};
    use crate::schedule::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn library(k: usize, seed: u64) -> PrototypeLibrary {
        let cfg = SceneConfig {
            prototypes_per_prompt: k,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_scene_dataset(&cfg, &[PromptSpec::new("p", vec![0, 1])], false, &mut rng)
            .unwrap()
            .0
    }

    #[test]
    fn single_prototype_is_returned_exactly() {
        let lib = library(1, 0);
        let m = lib.prompt("p").unwrap().prototypes[0].latent.clone();
        let prompt = lib.prompt("p").unwrap().prompt.clone();
        let be = AnalyticBackend::new(lib);
        let s = Schedule::vp_default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let z = g.leaf(standard_normal(&[4, 16, 16], &mut rng));
        let (_, z0) = be
            .posterior(&g, z, Conditioning::Prompt(&prompt), &s, 501.0)
            .unwrap();
        assert_eq!(z0.value().as_ref(), &m);
    }

    #[test]
    fn equidistant_latent_gives_midpoint() {
        let mut lib = library(2, 3);
        for p in &mut lib.prompts.get_mut("p").unwrap().prototypes {
            p.weight = 0.5;
        }
        let protos = lib.prompt("p").unwrap().prototypes.clone();
        let prompt = lib.prompt("p").unwrap().prompt.clone();
        let be = AnalyticBackend::new(lib);
        let s = Schedule::flow_default();
        let t = 600.0;
        let a = s.a(t).unwrap();
        let mid = protos[0].latent.add(&protos[1].latent).unwrap().scale(0.5 * a);
        let g = Graph::new();
        let (w, z0) = be
            .posterior(&g, g.leaf(mid), Conditioning::Prompt(&prompt), &s, t)
            .unwrap();
        let w = w.value();
        assert!((w.data()[0] - 0.5).abs() < 1e-12);
        let expect = protos[0].latent.add(&protos[1].latent).unwrap().scale(0.5);
        assert!(z0.value().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn small_noise_concentrates_on_nearest_prototype() {
        let lib = library(5, 7);
        let protos = lib.prompt("p").unwrap().prototypes.clone();
        let prompt = lib.prompt("p").unwrap().prompt.clone();
        let be = AnalyticBackend::new(lib);
        // flow time with b_t = 1e-3
        let s = Schedule::flow_default();
        let t = 1.0;
        let a = s.a(t).unwrap();
        let g = Graph::new();
        let z = g.leaf(protos[3].latent.scale(a));
        let (w, z0) = be
            .posterior(&g, z, Conditioning::Prompt(&prompt), &s, t)
            .unwrap();
        assert!(w.value().data()[3] > 1.0 - 1e-9);
        assert!(z0.value().max_abs_diff(&protos[3].latent) < 1e-6);
    }

    #[test]
    fn estimator_round_trip_and_valid_weights() {
        let lib = library(6, 11);
        let prompt = lib.prompt("p").unwrap().prompt.clone();
        let be = AnalyticBackend::new(lib);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in [Schedule::vp_default(), Schedule::flow_default()] {
            for &t in s.grid().iter().step_by(7) {
                let g = Graph::new();
                let z = g.leaf(standard_normal(&[4, 16, 16], &mut rng));
                let (w, z0) = be
                    .posterior(&g, z, Conditioning::Prompt(&prompt), &s, t)
                    .unwrap();
                let w = w.value();
                assert!(w.data().iter().all(|&x| x >= 0.0));
                assert!((w.sum() - 1.0).abs() < 1e-12);
                let out = be
                    .predict(&g, z, Conditioning::Prompt(&prompt), &s, t)
                    .unwrap();
                let est = s
                    .estimate_z0(&z.value(), &out.prediction.value(), t)
                    .unwrap();
                assert!(est.max_abs_diff(&z0.value()) < 1e-10);
                let att = out.attention.unwrap().maps.value();
                assert_eq!(att.shape(), &[2, 16, 16]);
                assert!(att.data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn degenerate_and_unknown_prompt() {
        let lib = library(2, 0);
        let be = AnalyticBackend::new(lib);
        let s = Schedule::flow_default();
        let g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[4, 16, 16]));
        let prompt = be.library().prompt("p").unwrap().prompt.clone();
        assert!(matches!(
            be.predict(&g, z, Conditioning::Prompt(&prompt), &s, 0.0),
            Err(BackendError::Degenerate(_))
        ));
        let other = PromptSpec::new("zzz", vec![0]);
        assert!(matches!(
            be.predict(&g, z, Conditioning::Prompt(&other), &s, 500.0),
            Err(BackendError::UnknownPrompt(_))
        ));
        let unc = be.predict(&g, z, Conditioning::Unconditional, &s, 500.0).unwrap();
        assert!(unc.attention.is_none());
    }
}
