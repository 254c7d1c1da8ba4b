//! Misalignment criteria over preprocessed attention maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Attention, BBox, PromptSpec};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum CriterionError {
    #[error("criterion needs at least one subject")]
    NoSubjects,
    #[error("overlap loss needs at least two subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("bbox criterion needs one box per subject: {subjects} subjects, {boxes} boxes")]
    MissingBoxes { subjects: usize, boxes: usize },
    #[error("subject {0} is not an entity of the prompt")]
    UnknownSubject(usize),
    #[error("box {bbox:?} does not fit the {h}x{w} attention grid")]
    BoxOutOfBounds { bbox: BBox, h: usize, w: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CriterionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionKind {
    #[default]
    Combined,
    L1Only,
    L2Only,
    BboxCombined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CriterionConfig {
    pub kind: CriterionKind,
    /// Entity ids to align; all prompt entities when absent.
    pub subjects: Option<Vec<usize>>,
    /// Boxes in subject order; the prompt's boxes when absent.
    pub boxes: Option<Vec<BBox>>,
}

/// A criterion resolved against one prompt: which map rows are subjects and
/// which boxes they get.
#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub kind: CriterionKind,
    rows: Vec<usize>,
    boxes: Option<Vec<BBox>>,
}

impl Criterion {
    pub fn for_prompt(config: &CriterionConfig, prompt: &PromptSpec) -> Result<Self> {
        let rows = match &config.subjects {
            None => (0..prompt.entities.len()).collect::<Vec<_>>(),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    prompt
                        .entities
                        .iter()
                        .position(|e| e == id)
                        .ok_or(CriterionError::UnknownSubject(*id))
                })
                .collect::<Result<_>>()?,
        };
        if rows.is_empty() {
            return Err(CriterionError::NoSubjects);
        }
        let boxes = match config.kind {
            CriterionKind::BboxCombined => {
                let boxes = match (&config.boxes, &prompt.boxes) {
                    (Some(b), _) => b.clone(),
                    (None, Some(all)) => rows.iter().map(|&r| all[r]).collect(),
                    (None, None) => Vec::new(),
                };
                if boxes.len() != rows.len() {
                    return Err(CriterionError::MissingBoxes {
                        subjects: rows.len(),
                        boxes: boxes.len(),
                    });
                }
                Some(boxes)
            }
            _ => None,
        };
        Ok(Self {
            kind: config.kind,
            rows,
            boxes,
        })
    }

    pub fn num_subjects(&self) -> usize {
        self.rows.len()
    }

    pub fn evaluate<'g>(&self, attention: &Attention<'g>) -> Result<Var<'g>> {
        let maps = attention.maps();
        let subset = if self.rows.iter().copied().eq(0..maps.shape()[0]) {
            maps
        } else {
            let parts = self
                .rows
                .iter()
                .map(|&r| maps.select(0, r))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            maps.graph().stack(&parts)?
        };
        let att = Attention::assume_preprocessed(subset);
        match self.kind {
            CriterionKind::L1Only => loss_l1(&att),
            CriterionKind::L2Only => loss_l2(&att),
            CriterionKind::Combined => loss_combined(&att, None),
            CriterionKind::BboxCombined => {
                loss_combined(&att, Some(self.boxes.as_deref().unwrap_or(&[])))
            }
        }
    }
}

fn subject_maps<'g>(attention: &Attention<'g>) -> Result<Vec<Var<'g>>> {
    let maps = attention.maps();
    let s = maps.shape()[0];
    if s == 0 {
        return Err(CriterionError::NoSubjects);
    }
    Ok((0..s)
        .map(|i| maps.select(0, i))
        .collect::<std::result::Result<_, _>>()?)
}

/// `max_s (1 - max_ij M^s_ij)`.
pub fn loss_l1<'g>(attention: &Attention<'g>) -> Result<Var<'g>> {
    let maps = attention.maps();
    let shape = maps.shape();
    if shape[0] == 0 {
        return Err(CriterionError::NoSubjects);
    }
    let peaks = maps
        .reshape(&[shape[0], shape[1] * shape[2]])?
        .max_axis(1, false)?;
    Ok(peaks.neg().add_scalar(1.0).max())
}

/// Mean over unordered pairs of `sum min(M^m, M^n) / sum (M^m + M^n)`.
pub fn loss_l2<'g>(attention: &Attention<'g>) -> Result<Var<'g>> {
    let maps = subject_maps(attention)?;
    if maps.len() < 2 {
        return Err(CriterionError::TooFewSubjects(maps.len()));
    }
    let mut terms = Vec::new();
    for m in 0..maps.len() {
        for n in m + 1..maps.len() {
            let overlap = maps[m].minimum(maps[n])?.sum();
            let total = maps[m].add(maps[n])?.sum();
            terms.push(overlap.div(total)?);
        }
    }
    mean_of(&terms)
}

/// Mean over subjects of `1 - sum min(B^m, M^m) / sum (B^m + M^m)`.
pub fn loss_bbox<'g>(attention: &Attention<'g>, boxes: &[BBox]) -> Result<Var<'g>> {
    let maps = subject_maps(attention)?;
    if boxes.len() != maps.len() {
        return Err(CriterionError::MissingBoxes {
            subjects: maps.len(),
            boxes: boxes.len(),
        });
    }
    let graph = attention.maps().graph();
    let shape = attention.maps().shape();
    let (h, w) = (shape[1], shape[2]);
    let mut terms = Vec::with_capacity(maps.len());
    for (map, bbox) in maps.iter().zip(boxes) {
        if bbox.x2 > w || bbox.y2 > h || bbox.x1 >= bbox.x2 || bbox.y1 >= bbox.y2 {
            return Err(CriterionError::BoxOutOfBounds { bbox: *bbox, h, w });
        }
        let mask = graph.leaf(Tensor::new(&[h, w], bbox.mask(h, w))?);
        let overlap = mask.minimum(*map)?.sum();
        let total = mask.add(*map)?.sum();
        terms.push(overlap.div(total)?.neg().add_scalar(1.0));
    }
    mean_of(&terms)
}

/// `(L1 + L2) / 2`, with the bbox loss in place of L2 when boxes are given.
/// A single subject without boxes has no pairs, so the loss is L1 alone.
pub fn loss_combined<'g>(attention: &Attention<'g>, boxes: Option<&[BBox]>) -> Result<Var<'g>> {
    let l1 = loss_l1(attention)?;
    let second = match boxes {
        Some(b) => loss_bbox(attention, b)?,
        None if attention.num_subjects() == 1 => return Ok(l1),
        None => loss_l2(attention)?,
    };
    Ok(l1.add(second)?.scale(0.5))
}

fn mean_of<'g>(terms: &[Var<'g>]) -> Result<Var<'g>> {
    let graph: &'g Graph = terms[0].graph();
    let stacked = graph.stack(terms)?;
    Ok(stacked.mean())
}
