//! The end-to-end VQA model and the per-encoder pre-training model.

use serde::{Deserialize, Serialize};

use crate::cmsa::{Cmsa, CmsaState};
use crate::data::synth::{task_classes, ANSWERS};
use crate::data::{PretrainSample, VqaSample};
use crate::error::Result;
use crate::harness::config::ModelConfig;
use crate::heads::{
    pretrain_loss, vqa_loss, AnswerHead, CompatibilityHead, ImageTaskHead, LossReport, TaskKind, TaskTarget,
};
use crate::image::{encoder_prefix, spatial_map, Backbone, ImageEncoder, ImageType, TypeGate};
use crate::numerics::{Graph, ParamStore, SplitRng, Tensor, Var};
use crate::question::QuestionEncoder;

/// Invariant readings from one forward pass, or the worst over many.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `|Σw − 1|` of the type gate.
    pub gate_deviation: f64,
    /// Largest `|Σ_j A_ij − 1|` over every glimpse.
    pub attention_deviation: f64,
}

impl Diagnostics {
    pub fn merge(self, other: Diagnostics) -> Diagnostics {
        Diagnostics {
            gate_deviation: self.gate_deviation.max(other.gate_deviation),
            attention_deviation: self.attention_deviation.max(other.attention_deviation),
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One VQA forward pass.
#[derive(Debug)]
pub struct VqaForward {
    pub gate: TypeGate,
    pub state: CmsaState,
    pub answer_logits: Var,
    pub diagnostics: Diagnostics,
}

/// One VQA forward pass plus its loss.
#[derive(Debug)]
pub struct VqaStep {
    pub loss: Var,
    pub report: LossReport,
    pub predicted_answer: usize,
    pub predicted_type: usize,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    pub cfg: ModelConfig,
    pub question: QuestionEncoder,
    pub image: ImageEncoder,
    pub cmsa: Cmsa,
    pub answer: AnswerHead,
    pub alpha: f64,
}

impl VqaModel {
    pub fn new(cfg: &ModelConfig, vocab_size: usize, alpha: f64) -> Self {
        Self {
            cfg: cfg.clone(),
            question: QuestionEncoder::new("q", cfg.question(vocab_size)),
            image: ImageEncoder::new(cfg.backbone(), cfg.stem_channels),
            cmsa: Cmsa::new("cmsa", cfg.cmsa(cfg.glimpses)),
            answer: AnswerHead::new("answer", cfg.d_q, ANSWERS.len()),
            alpha,
        }
    }

    pub fn init(&self, rng: &SplitRng) -> ParamStore {
        let mut store = ParamStore::new();
        self.question.init(&mut store, &mut rng.fork("question"));
        self.image.init(&mut store, &mut rng.fork("image"));
        self.cmsa.init(&mut store, &mut rng.fork("cmsa"));
        self.answer.mlp.init(&mut store, &mut rng.fork("answer"));
        store
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor, token_ids: &[usize]) -> Result<VqaForward> {
        let x = g.input(image.clone());
        let (visual, gate) = self.image.forward(g, store, x)?;
        let q = self.question.forward(g, store, token_ids)?;
        let s = g.input(spatial_map(self.cfg.grid())?);
        let state = self.cmsa.cmsa_fuse(g, store, visual.v, s, q.q)?;
        let scores = self.answer.predict_answer(g, store, state.f_hat, q.q)?;
        let gate_sum: f64 = g.value(gate.weights).data().iter().sum();
        let diagnostics = Diagnostics {
            gate_deviation: (gate_sum - 1.0).abs(),
            attention_deviation: state.max_row_sum_deviation(g),
        };
        Ok(VqaForward {
            gate,
            state,
            answer_logits: scores.logits,
            diagnostics,
        })
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, sample: &VqaSample) -> Result<VqaStep> {
        let fwd = self.forward(g, store, &sample.image, &sample.token_ids)?;
        let (loss, report) = vqa_loss(
            g,
            fwd.answer_logits,
            sample.answer_id,
            fwd.gate.logits,
            sample.type_id.id(),
            self.alpha,
        )?;
        Ok(VqaStep {
            loss,
            report,
            predicted_answer: argmax(g.value(fwd.answer_logits).data()),
            predicted_type: argmax(g.value(fwd.gate.logits).data()),
            diagnostics: fwd.diagnostics,
        })
    }

    /// `(answer, type)` predictions without building gradients.
    pub fn predict(&self, store: &ParamStore, sample: &VqaSample) -> Result<(usize, usize)> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, &sample.image, &sample.token_ids)?;
        Ok((
            argmax(g.value(fwd.answer_logits).data()),
            argmax(g.value(fwd.gate.logits).data()),
        ))
    }
}

/// Outputs of one pre-training step.
#[derive(Debug)]
pub struct PretrainStep {
    pub loss: Var,
    pub report: LossReport,
    /// Correct image-task predictions and how many were made (pixels for
    /// segmentation).
    pub task_correct: usize,
    pub task_total: usize,
    /// Per-class `(intersection, union)` counts for segmentation.
    pub iou_counts: Vec<(usize, usize)>,
    pub compat_correct: Option<bool>,
    pub diagnostics: Diagnostics,
}

/// One encoder trained on its image task, optionally jointly with
/// question-image compatibility through a CMSA module.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub image_type: ImageType,
    pub backbone: Backbone,
    pub task: ImageTaskHead,
    pub multitask: Option<(QuestionEncoder, Cmsa, CompatibilityHead)>,
    pub grid: usize,
}

impl PretrainModel {
    pub fn new(cfg: &ModelConfig, t: ImageType, kind: TaskKind, vocab_size: usize, glimpses: usize, multitask: bool) -> Self {
        let prefix = format!("pre.{}", t.name());
        let multitask = multitask.then(|| {
            (
                QuestionEncoder::new(&format!("{prefix}.q"), cfg.question(vocab_size)),
                Cmsa::new(&format!("{prefix}.cmsa"), cfg.cmsa(glimpses)),
                CompatibilityHead::new(&format!("{prefix}.com"), cfg.d_q),
            )
        });
        Self {
            image_type: t,
            backbone: Backbone::new(encoder_prefix(t), cfg.backbone()),
            task: ImageTaskHead::new(
                &format!("{prefix}.task"),
                kind,
                cfg.grid(),
                cfg.channels[2],
                task_classes(t),
                cfg.task_hidden,
                cfg.image_size,
            ),
            multitask,
            grid: cfg.grid(),
        }
    }

    pub fn init(&self, rng: &SplitRng) -> ParamStore {
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, &mut rng.fork("backbone"));
        self.task.init(&mut store, &mut rng.fork("task"));
        if let Some((q, cmsa, com)) = &self.multitask {
            q.init(&mut store, &mut rng.fork("question"));
            cmsa.init(&mut store, &mut rng.fork("cmsa"));
            com.mlp.init(&mut store, &mut rng.fork("com"));
        }
        store
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, sample: &PretrainSample) -> Result<PretrainStep> {
        let x = g.input(sample.image.clone());
        let features = self.backbone.forward(g, store, x)?;
        let task_logits = self.task.forward(g, store, features)?;
        let mut diagnostics = Diagnostics::default();
        let com = match &self.multitask {
            Some((qenc, cmsa, head)) => {
                let q = qenc.forward(g, store, &sample.paired_token_ids)?;
                let s = g.input(spatial_map(self.grid)?);
                let state = cmsa.cmsa_fuse(g, store, features, s, q.q)?;
                diagnostics.attention_deviation = state.max_row_sum_deviation(g);
                Some((head.forward(g, store, state.f_hat, q.q)?, sample.compat_label))
            }
            None => None,
        };
        let (loss, report) = pretrain_loss(g, task_logits, &sample.target, com)?;

        let logits = g.value(task_logits);
        let (task_correct, task_total, iou_counts) = match &sample.target {
            TaskTarget::Class(k) => (usize::from(argmax(logits.data()) == *k), 1, Vec::new()),
            TaskTarget::Mask(mask) => {
                let k = *logits.shape().last().expect("segmentation logits");
                let mut iou = vec![(0usize, 0usize); k];
                let mut correct = 0;
                for (p, &truth) in mask.iter().enumerate() {
                    let pred = argmax(&logits.data()[p * k..(p + 1) * k]);
                    correct += usize::from(pred == truth);
                    for (c, (inter, union)) in iou.iter_mut().enumerate() {
                        *inter += usize::from(pred == c && truth == c);
                        *union += usize::from(pred == c || truth == c);
                    }
                }
                (correct, mask.len(), iou)
            }
        };
        let compat_correct = com.map(|(v, label)| argmax(g.value(v).data()) == label);
        Ok(PretrainStep {
            loss,
            report,
            task_correct,
            task_total,
            iou_counts,
            compat_correct,
            diagnostics,
        })
    }
}
