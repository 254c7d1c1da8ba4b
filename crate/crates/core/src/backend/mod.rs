//! Generative backends that predict epsilon or velocity and expose
//! per-entity attention maps.

mod analytic;
mod attention;
mod learned;
mod scene;

pub use analytic::AnalyticBackend;
pub use attention::{preprocess_attention, smoothing_kernel, Attention, RawAttention};
pub use learned::{train_toy_backend, LearnedBackend, LearnedConfig, TrainConfig, TrainReport};
pub use scene::{
    build_scene_dataset, layout_boxes, PromptPrototypes, Prototype, PrototypeLibrary, Scene, SceneConfig,
    Templates,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{Schedule, ScheduleError};
use crate::tensor::{Graph, TensorError, Var};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid prompt `{id}`: {msg}")]
    InvalidPrompt { id: String, msg: String },
    #[error("prompt `{0}` is not in the prototype library")]
    UnknownPrompt(String),
    #[error("entity {entity}: box {bbox:?} too small for a blob of sigma {sigma}")]
    BoxTooSmall { entity: usize, bbox: BBox, sigma: f64 },
    #[error("scene configuration: {0}")]
    Config(String),
    #[error("vocabulary mismatch: entity {entity} outside vocabulary of {vocab}")]
    Vocabulary { entity: usize, vocab: usize },
    #[error("posterior is degenerate at t = {0} (b_t = 0)")]
    Degenerate(f64),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// Axis-aligned box in attention-grid cells, half-open: covers columns
/// `x1..x2` and rows `y1..y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }

    /// Whether a continuous point (cell centers at integer coordinates) falls
    /// inside the covered cells.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 as f64 - 0.5
            && x < self.x2 as f64 - 0.5
            && y >= self.y1 as f64 - 0.5
            && y < self.y2 as f64 - 0.5
    }

    /// 0/1 mask over an `h x w` grid, row-major.
    pub fn mask(&self, h: usize, w: usize) -> Vec<f64> {
        let mut m = vec![0.0; h * w];
        for y in self.y1..self.y2.min(h) {
            for x in self.x1..self.x2.min(w) {
                m[y * w + x] = 1.0;
            }
        }
        m
    }
}

/// A toy prompt: ordered entity tokens and optional per-entity boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub id: String,
    pub entities: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BBox>>,
}

impl PromptSpec {
    pub fn new(id: impl Into<String>, entities: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            entities,
            boxes: None,
        }
    }

    pub fn with_boxes(mut self, boxes: Vec<BBox>) -> Self {
        self.boxes = Some(boxes);
        self
    }

    pub fn validate(&self, vocab: usize, h: usize, w: usize) -> Result<()> {
        let err = |msg: String| BackendError::InvalidPrompt {
            id: self.id.clone(),
            msg,
        };
        if self.entities.is_empty() || self.entities.len() > 4 {
            return Err(err(format!(
                "needs 1 to 4 entities, got {}",
                self.entities.len()
            )));
        }
        for (i, &e) in self.entities.iter().enumerate() {
            if e >= vocab {
                return Err(BackendError::Vocabulary { entity: e, vocab });
            }
            if self.entities[..i].contains(&e) {
                return Err(err(format!("entity {e} repeated")));
            }
        }
        if let Some(boxes) = &self.boxes {
            if boxes.len() != self.entities.len() {
                return Err(err(format!(
                    "{} boxes for {} entities",
                    boxes.len(),
                    self.entities.len()
                )));
            }
            for (i, b) in boxes.iter().enumerate() {
                if !(b.x1 < b.x2 && b.y1 < b.y2 && b.x2 <= w && b.y2 <= h) {
                    return Err(err(format!("box {b:?} is empty or outside {h}x{w}")));
                }
                if boxes[..i].iter().any(|o| o.intersects(b)) {
                    return Err(err(format!("box {b:?} overlaps another box")));
                }
            }
        }
        Ok(())
    }
}

/// What the model is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    Prompt(&'a PromptSpec),
    Unconditional,
}

/// Model output at `(z_t, t)`: the epsilon or velocity prediction and the raw
/// per-entity attention maps for the prompt's entities.
pub struct BackendOutput<'g> {
    pub prediction: Var<'g>,
    pub attention: Option<RawAttention<'g>>,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    /// `[C, H, W]` of the latent the backend operates on.
    fn latent_shape(&self) -> [usize; 3];

    /// Prediction for the schedule's kind. Attention is present when
    /// conditioned on a prompt.
    fn predict<'g>(
        &self,
        graph: &'g Graph,
        z_t: Var<'g>,
        cond: Conditioning<'_>,
        schedule: &Schedule,
        t: f64,
    ) -> Result<BackendOutput<'g>>;
}
