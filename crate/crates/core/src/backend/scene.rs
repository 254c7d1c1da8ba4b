use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BBox, BackendError, PromptSpec, Result};
use crate::tensor::Tensor;

const LIBRARY_SCHEMA: u32 = 1;

/// Parameters of the synthetic scene world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    /// Blob standard deviation in grid cells.
    pub blob_sigma: f64,
    /// Peak intensity of a fully salient blob.
    pub amplitude: f64,
    /// Salience of a present entity is uniform in `[salience_min, 1]`.
    pub salience_min: f64,
    /// Chance that an entity is neglected in a prototype.
    pub neglect_prob: f64,
    /// Salience of a neglected entity.
    pub neglect_salience: f64,
    pub prototypes_per_prompt: usize,
    /// Training scenes drawn per prompt.
    pub scenes_per_prompt: usize,
    /// Scale from latent/signature correlation to raw attention. Keeps the
    /// downstream softmax sensitive to blob height instead of saturating.
    pub attention_gain: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 16,
            width: 16,
            vocab: 8,
            blob_sigma: 1.5,
            amplitude: 2.0,
            salience_min: 0.8,
            neglect_prob: 0.35,
            neglect_salience: 0.2,
            prototypes_per_prompt: 12,
            scenes_per_prompt: 16,
            attention_gain: 0.04,
        }
    }
}

impl SceneConfig {
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn margin(&self) -> usize {
        self.blob_sigma.floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BackendError::Config(m.to_string()));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("latent dimensions must be positive");
        }
        if self.vocab < 8 {
            return bad("vocabulary needs at least 8 entities");
        }
        if !(self.blob_sigma > 0.0) || !(self.amplitude > 0.0) {
            return bad("blob sigma and amplitude must be positive");
        }
        if !(self.attention_gain > 0.0 && self.attention_gain.is_finite()) {
            return bad("attention gain must be positive");
        }
        if !(0.0..=1.0).contains(&self.salience_min)
            || !(0.0..=1.0).contains(&self.neglect_prob)
            || !(0.0..=1.0).contains(&self.neglect_salience)
        {
            return bad("salience parameters must lie in [0, 1]");
        }
        if self.prototypes_per_prompt == 0 {
            return bad("need at least one prototype per prompt");
        }
        let m = self.margin();
        if 2 * m >= self.width || 2 * m >= self.height {
            return bad("blobs do not fit in the grid");
        }
        Ok(())
    }

    /// Render one scene: a Gaussian blob per entity with its template as
    /// channel signature. `centers` are `(x, y)` in cells.
    pub fn render(
        &self,
        templates: &Templates,
        entities: &[usize],
        centers: &[(f64, f64)],
        saliences: &[f64],
    ) -> Tensor {
        let [c, h, w] = self.latent_shape();
        let mut z = vec![0.0; c * h * w];
        let inv = 1.0 / (2.0 * self.blob_sigma * self.blob_sigma);
        for ((&e, &(cx, cy)), &s) in entities.iter().zip(centers).zip(saliences) {
            let g = templates.signature(e);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let v = self.amplitude * s * (-d2 * inv).exp();
                    for ch in 0..c {
                        z[ch * h * w + y * w + x] += v * g[ch];
                    }
                }
            }
        }
        Tensor::new(&[c, h, w], z).expect("render shape")
    }
}

/// Per-entity channel signatures `g_s`, unit norm, shape `[V, C]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub values: Tensor,
}

impl Templates {
    /// Signed basis vectors first (`+e_0..+e_{C-1}`, then `-e_0..`), then
    /// random unit vectors for any remaining entities.
    pub fn generate<R: Rng + ?Sized>(vocab: usize, channels: usize, rng: &mut R) -> Self {
        let mut data = Vec::with_capacity(vocab * channels);
        for s in 0..vocab {
            let mut g = vec![0.0; channels];
            if s < 2 * channels {
                g[s % channels] = if s < channels { 1.0 } else { -1.0 };
            } else {
                let mut n = 0.0;
                for v in g.iter_mut() {
                    *v = rng.sample(StandardNormal);
                    n += *v * *v;
                }
                let n = f64::sqrt(n);
                g.iter_mut().for_each(|v| *v /= n);
            }
            data.extend(g);
        }
        Self {
            values: Tensor::new(&[vocab, channels], data).expect("template shape"),
        }
    }

    pub fn vocab(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn signature(&self, entity: usize) -> &[f64] {
        let c = self.channels();
        &self.values.data()[entity * c..(entity + 1) * c]
    }

    /// `[S, C]` matrix of the given entities' signatures.
    pub fn rows(&self, entities: &[usize]) -> Tensor {
        let c = self.channels();
        let mut data = Vec::with_capacity(entities.len() * c);
        for &e in entities {
            data.extend_from_slice(self.signature(e));
        }
        Tensor::new(&[entities.len(), c], data).expect("template rows")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub latent: Tensor,
    pub weight: f64,
    /// `(x, y)` blob centers, one per prompt entity, in prompt order.
    pub centers: Vec<(f64, f64)>,
    pub saliences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPrototypes {
    pub prompt: PromptSpec,
    pub prototypes: Vec<Prototype>,
}

/// Exact realization of `p(z_0 | y)` as a weighted set of clean scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeLibrary {
    pub config: SceneConfig,
    pub templates: Templates,
    pub prompts: BTreeMap<String, PromptPrototypes>,
}

/// A training scene drawn from the library.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub prompt_id: String,
    pub latent: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    schema: u32,
    kind: String,
    library: PrototypeLibrary,
}

impl PrototypeLibrary {
    pub fn prompt(&self, id: &str) -> Result<&PromptPrototypes> {
        self.prompts
            .get(id)
            .ok_or_else(|| BackendError::UnknownPrompt(id.to_string()))
    }

    /// Union of all prompts' prototypes, each prompt weighted equally.
    pub fn unconditional(&self) -> Vec<Prototype> {
        let n = self.prompts.len() as f64;
        self.prompts
            .values()
            .flat_map(|p| p.prototypes.iter())
            .map(|p| Prototype {
                weight: p.weight / n,
                ..p.clone()
            })
            .collect()
    }

    /// Response of a clean, fully salient, isolated blob to its own
    /// matched filter.
    pub fn self_response(&self) -> f64 {
        self.config.amplitude
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = LibraryFile {
            schema: LIBRARY_SCHEMA,
            kind: "prototype-library".into(),
            library: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: LibraryFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema != LIBRARY_SCHEMA || file.kind != "prototype-library" {
            return Err(BackendError::Format(format!(
                "expected prototype-library schema {LIBRARY_SCHEMA}, got {} schema {}",
                file.kind, file.schema
            )));
        }
        Ok(file.library)
    }
}

fn sample_center<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    entity: usize,
    bbox: Option<&BBox>,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let m = cfg.margin();
    let (x1, y1, x2, y2) = match bbox {
        Some(b) => (b.x1, b.y1, b.x2, b.y2),
        None => (0, 0, cfg.width, cfg.height),
    };
    if x2 < x1 + 2 * m + 1 || y2 < y1 + 2 * m + 1 {
        return Err(BackendError::BoxTooSmall {
            entity,
            bbox: bbox.copied().unwrap_or(BBox::new(x1, y1, x2, y2)),
            sigma: cfg.blob_sigma,
        });
    }
    let x = rng.random_range(x1 + m..x2 - m);
    let y = rng.random_range(y1 + m..y2 - m);
    Ok((x, y))
}

/// Build the prototype library for `prompts` plus training scenes drawn from it.
///
/// Each prototype places every prompt entity's blob uniformly on the grid (or
/// inside its box when `use_boxes` and the prompt has boxes), rejecting
/// coincident centers. Deterministic given the RNG state.
pub fn build_scene_dataset<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    prompts: &[PromptSpec],
    use_boxes: bool,
    rng: &mut R,
) -> Result<(PrototypeLibrary, Vec<Scene>)> {
    cfg.validate()?;
    let templates = Templates::generate(cfg.vocab, cfg.channels, rng);
    let mut map = BTreeMap::new();
    let mut scenes = Vec::new();
    for prompt in prompts {
        prompt.validate(cfg.vocab, cfg.height, cfg.width)?;
        if map.contains_key(&prompt.id) {
            return Err(BackendError::InvalidPrompt {
                id: prompt.id.clone(),
                msg: "duplicate prompt id".into(),
            });
        }
        let boxes = if use_boxes { prompt.boxes.as_ref() } else { None };
        let mut prototypes = Vec::with_capacity(cfg.prototypes_per_prompt);
        for _ in 0..cfg.prototypes_per_prompt {
            let mut centers: Vec<(usize, usize)> = Vec::with_capacity(prompt.entities.len());
            for (i, &e) in prompt.entities.iter().enumerate() {
                let bbox = boxes.map(|b| &b[i]);
                let mut attempts = 0;
                let c = loop {
                    let c = sample_center(cfg, e, bbox, rng)?;
                    if !centers.contains(&c) {
                        break c;
                    }
                    attempts += 1;
                    if attempts > 1000 {
                        return Err(BackendError::Config(
                            "could not place non-colliding blob centers".into(),
                        ));
                    }
                };
                centers.push(c);
            }
            let saliences: Vec<f64> = prompt
                .entities
                .iter()
                .map(|_| {
                    if rng.random_bool(cfg.neglect_prob) {
                        cfg.neglect_salience
                    } else {
                        rng.random_range(cfg.salience_min..=1.0)
                    }
                })
                .collect();
            let centers: Vec<(f64, f64)> =
                centers.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
            let latent = cfg.render(&templates, &prompt.entities, &centers, &saliences);
            let raw_weight = rng.random_range(0.5..1.5);
            prototypes.push(Prototype {
                latent,
                weight: raw_weight,
                centers,
                saliences,
            });
        }
        let total: f64 = prototypes.iter().map(|p| p.weight).sum();
        prototypes.iter_mut().for_each(|p| p.weight /= total);
        for _ in 0..cfg.scenes_per_prompt {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = prototypes.len() - 1;
            for (k, p) in prototypes.iter().enumerate() {
                acc += p.weight;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            scenes.push(Scene {
                prompt_id: prompt.id.clone(),
                latent: prototypes[pick].latent.clone(),
            });
        }
        map.insert(
            prompt.id.clone(),
            PromptPrototypes {
                prompt: prompt.clone(),
                prototypes,
            },
        );
    }
    Ok((
        PrototypeLibrary {
            config: cfg.clone(),
            templates,
            prompts: map,
        },
        scenes,
    ))
}

/// Square boxes of side `size` around the entity centers of one prototype
/// of `prompt_id`, drawn among prototypes that show every entity. Clipped to
/// the grid; redrawn until the boxes are disjoint.
pub fn layout_boxes<R: Rng + ?Sized>(
    library: &PrototypeLibrary,
    prompt_id: &str,
    size: usize,
    rng: &mut R,
) -> Result<Vec<BBox>> {
    let cfg = &library.config;
    if size == 0 || size > cfg.width || size > cfg.height {
        return Err(BackendError::Config(format!(
            "box size {size} does not fit a {}x{} grid",
            cfg.height, cfg.width
        )));
    }
    let protos = &library.prompt(prompt_id)?.prototypes;
    let shown: Vec<&Prototype> = protos
        .iter()
        .filter(|p| p.saliences.iter().all(|&s| s > cfg.neglect_salience))
        .collect();
    let pool = if shown.is_empty() {
        protos.iter().collect()
    } else {
        shown
    };
    let half = (size - 1) / 2;
    for _ in 0..100 {
        let p = pool[rng.random_range(0..pool.len())];
        let boxes: Vec<BBox> = p
            .centers
            .iter()
            .map(|&(x, y)| {
                let x0 = (x as usize).saturating_sub(half).min(cfg.width - size);
                let y0 = (y as usize).saturating_sub(half).min(cfg.height - size);
                BBox::new(x0, y0, x0 + size, y0 + size)
            })
            .collect();
        let disjoint = boxes
            .iter()
            .enumerate()
            .all(|(i, b)| boxes[..i].iter().all(|o| !o.intersects(b)));
        if disjoint {
            return Ok(boxes);
        }
    }
    Err(BackendError::Config(format!(
        "no disjoint {size}x{size} layout boxes for prompt {prompt_id}"
    )))
}
