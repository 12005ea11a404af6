//! Prediction heads and the two multi-task loss compositions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamStore, SplitRng, Tensor, Var};

/// Affine layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(String, String)>,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: (0..dims.len() - 1)
                .map(|l| (format!("{prefix}.fc{l}.w"), format!("{prefix}.fc{l}.b")))
                .collect(),
            dims: dims.to_vec(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitRng) {
        for (l, (w, b)) in self.layers.iter().enumerate() {
            store.insert(w, init::linear_weight(self.dims[l], self.dims[l + 1], rng));
            store.insert(b, Tensor::zeros([self.dims[l + 1]]));
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(store, w)?, g.param(store, b)?);
            h = g.pointwise_channel_map(h, w, b)?;
            if l + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// `Σ_i (F̂_i + q_i)` over the word axis: `[l_w×d_q] → [d_q]`.
pub fn word_sum(g: &mut Graph, f_hat: Var, q: Var) -> Result<Var> {
    if g.shape(f_hat) != g.shape(q) || g.shape(q).len() != 2 {
        return Err(Error::shape("word_sum", g.shape(f_hat), g.shape(q)));
    }
    let joint = g.add(f_hat, q)?;
    g.sum_axes(joint, &[0])
}

/// Answer logits `[K]`.
#[derive(Clone, Copy, Debug)]
pub struct AnswerScores {
    pub logits: Var,
}

/// Word-summed joint representation into a 2-layer MLP over answers.
#[derive(Clone, Debug)]
pub struct AnswerHead {
    pub mlp: Mlp,
}

impl AnswerHead {
    /// Hidden width equals `d_q`.
    pub fn new(prefix: &str, d_q: usize, num_answers: usize) -> Self {
        Self {
            mlp: Mlp::new(prefix, &[d_q, d_q, num_answers]),
        }
    }

    pub fn predict_answer(&self, g: &mut Graph, store: &ParamStore, f_hat: Var, q: Var) -> Result<AnswerScores> {
        let pooled = word_sum(g, f_hat, q)?;
        Ok(AnswerScores {
            logits: self.mlp.forward(g, store, pooled)?,
        })
    }
}

/// Question-image compatibility: same aggregation, two logits.
#[derive(Clone, Debug)]
pub struct CompatibilityHead {
    pub mlp: Mlp,
}

impl CompatibilityHead {
    /// Hidden width `d_q / 2`.
    pub fn new(prefix: &str, d_q: usize) -> Self {
        Self {
            mlp: Mlp::new(prefix, &[d_q, (d_q / 2).max(1), 2]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_hat: Var, q: Var) -> Result<Var> {
        let pooled = word_sum(g, f_hat, q)?;
        self.mlp.forward(g, store, pooled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "segmentation" => Ok(TaskKind::Segmentation),
            other => Err(Error::Invalid(format!("unknown image task kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Image-understanding decoder used during encoder pre-training.
#[derive(Clone, Debug)]
pub enum ImageTaskHead {
    /// 3-layer MLP over the flattened `[G×G×C_v]` features.
    Classification { mlp: Mlp },
    /// Per-position channel map to class logits, then nearest-neighbour
    /// upsampling by `factor` to the input resolution.
    Segmentation { map: (String, String), c_v: usize, classes: usize, factor: usize },
}

impl ImageTaskHead {
    pub fn new(prefix: &str, kind: TaskKind, grid: usize, c_v: usize, classes: usize, hidden: usize, image_size: usize) -> Self {
        match kind {
            TaskKind::Classification => ImageTaskHead::Classification {
                mlp: Mlp::new(prefix, &[grid * grid * c_v, hidden, hidden, classes]),
            },
            TaskKind::Segmentation => ImageTaskHead::Segmentation {
                map: (format!("{prefix}.map.w"), format!("{prefix}.map.b")),
                c_v,
                classes,
                factor: image_size / grid,
            },
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            ImageTaskHead::Classification { .. } => TaskKind::Classification,
            ImageTaskHead::Segmentation { .. } => TaskKind::Segmentation,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitRng) {
        match self {
            ImageTaskHead::Classification { mlp } => mlp.init(store, rng),
            ImageTaskHead::Segmentation { map, c_v, classes, .. } => {
                store.insert(&map.0, init::linear_weight(*c_v, *classes, rng));
                store.insert(&map.1, Tensor::zeros([*classes]));
            }
        }
    }

    /// Classification: `[K]` logits. Segmentation: `[H×W×K]` per-pixel logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        match self {
            ImageTaskHead::Classification { mlp } => {
                let n = g.value(features).numel();
                let flat = g.reshape(features, &[n])?;
                mlp.forward(g, store, flat)
            }
            ImageTaskHead::Segmentation { map, factor, .. } => {
                let (w, b) = (g.param(store, &map.0)?, g.param(store, &map.1)?);
                let coarse = g.pointwise_channel_map(features, w, b)?;
                g.upsample_nearest(coarse, *factor)
            }
        }
    }
}

/// Target of the image-understanding task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskTarget {
    Class(usize),
    /// Row-major per-pixel class ids.
    Mask(Vec<usize>),
}

/// Loss components of one step and their composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_vqa: Option<f64>,
    pub l_type: Option<f64>,
    pub l_spe: Option<f64>,
    pub l_com: Option<f64>,
    pub alpha: f64,
    pub total: f64,
}

pub const DEFAULT_ALPHA: f64 = 0.5;

impl LossReport {
    /// `total = l_vqa + alpha · l_type`.
    pub fn vqa(l_vqa: f64, l_type: f64, alpha: f64) -> Self {
        Self {
            l_vqa: Some(l_vqa),
            l_type: Some(l_type),
            l_spe: None,
            l_com: None,
            alpha,
            total: l_vqa + alpha * l_type,
        }
    }

    /// `total = l_spe + l_com`, or `l_spe` alone for single-task training.
    pub fn pretrain(l_spe: f64, l_com: Option<f64>) -> Self {
        Self {
            l_vqa: None,
            l_type: None,
            l_spe: Some(l_spe),
            l_com,
            alpha: DEFAULT_ALPHA,
            total: match l_com {
                Some(c) => l_spe + c,
                None => l_spe,
            },
        }
    }

    /// The applicable composition recomputed from the stored components.
    pub fn recomputed_total(&self) -> f64 {
        match (self.l_vqa, self.l_type, self.l_spe, self.l_com) {
            (Some(v), Some(t), _, _) => v + self.alpha * t,
            (_, _, Some(s), Some(c)) => s + c,
            (_, _, Some(s), None) => s,
            _ => f64::NAN,
        }
    }
}

/// `L = L_vqa + α·L_type` on one sample; returns the graph total and report.
pub fn vqa_loss(
    g: &mut Graph,
    answer_logits: Var,
    answer_target: usize,
    type_logits: Var,
    type_target: usize,
    alpha: f64,
) -> Result<(Var, LossReport)> {
    let l_vqa = g.cross_entropy_rows(answer_logits, &[answer_target])?;
    let l_type = g.cross_entropy_rows(type_logits, &[type_target])?;
    let weighted = g.scale(l_type, alpha)?;
    let total = g.add(l_vqa, weighted)?;
    let report = LossReport::vqa(g.value(l_vqa).item(), g.value(l_type).item(), alpha);
    debug_assert_eq!(report.total.to_bits(), g.value(total).item().to_bits());
    Ok((total, report))
}

/// Cross-entropy of the image task: one class, or the per-pixel mean.
pub fn task_loss(g: &mut Graph, logits: Var, target: &TaskTarget) -> Result<Var> {
    match target {
        TaskTarget::Class(t) => g.cross_entropy_rows(logits, &[*t]),
        TaskTarget::Mask(mask) => {
            let shape = g.shape(logits).to_vec();
            let [h, w, k] = *shape.as_slice() else {
                return Err(Error::Invalid(format!("segmentation logits must be [h, w, k], got {shape:?}")));
            };
            if mask.len() != h * w {
                return Err(Error::shape("segmentation mask", &[h * w], &[mask.len()]));
            }
            let rows = g.reshape(logits, &[h * w, k])?;
            g.cross_entropy_rows(rows, mask)
        }
    }
}

/// `L = L_spe + L_com`; with `com = None` only the image task is trained.
pub fn pretrain_loss(
    g: &mut Graph,
    spe_logits: Var,
    spe_target: &TaskTarget,
    com: Option<(Var, usize)>,
) -> Result<(Var, LossReport)> {
    let l_spe = task_loss(g, spe_logits, spe_target)?;
    let Some((com_logits, com_target)) = com else {
        return Ok((l_spe, LossReport::pretrain(g.value(l_spe).item(), None)));
    };
    if com_target > 1 {
        return Err(Error::Invalid(format!("compatibility target must be 0 or 1, got {com_target}")));
    }
    if g.shape(com_logits) != [2] {
        return Err(Error::shape("compatibility logits", g.shape(com_logits), &[2]));
    }
    let l_com = g.cross_entropy_rows(com_logits, &[com_target])?;
    let total = g.add(l_spe, l_com)?;
    let report = LossReport::pretrain(g.value(l_spe).item(), Some(g.value(l_com).item()));
    debug_assert_eq!(report.total.to_bits(), g.value(total).item().to_bits());
    Ok((total, report))
}
