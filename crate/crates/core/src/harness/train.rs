//! Training loops, evaluation and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Entry, PretrainSample, QuestionKind, Split, SyntheticCorpus, TensorBundle, VqaSample};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::metrics::MetricsRow;
use crate::harness::model::{Diagnostics, PretrainModel, VqaModel};
use crate::image::ImageType;
use crate::numerics::{adam_step, Gradients, Graph, OptimState, ParamStore, SplitRng, Tensor};

/// Prefix shared by the three visual backbones in every model.
pub const ENCODER_PREFIX: &str = "enc.";

/// Fixed-seed epoch permutations cut into consecutive batches. Indices within
/// a batch are sorted so batch statistics do not depend on the permutation.
#[derive(Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    rng: SplitRng,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: SplitRng) -> Self {
        let mut s = Self {
            n,
            batch: batch.min(n).max(1),
            rng,
            epoch: 0,
            order: Vec::new(),
            pos: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.rng.fork_index("epoch", self.epoch).shuffle(&mut self.order);
        self.epoch += 1;
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.reshuffle();
        }
        let mut b = self.order[self.pos..self.pos + self.batch].to_vec();
        b.sort_unstable();
        self.pos += self.batch;
        b
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Result of a VQA training run.
#[derive(Debug)]
pub struct VqaRun {
    pub model: VqaModel,
    pub store: ParamStore,
    pub rows: Vec<MetricsRow>,
    pub diagnostics: Diagnostics,
    /// Step whose parameters `store` holds.
    pub selected_step: usize,
    /// Validation accuracy at `selected_step`, when validation ran.
    pub selected_val_acc: Option<f64>,
}

/// Builds the VQA model and copies backbone weights from each `init` store.
pub fn build_vqa(cfg: &RunConfig, vocab_size: usize, init: &[ParamStore]) -> Result<(VqaModel, ParamStore)> {
    let model = VqaModel::new(&cfg.model, vocab_size, cfg.alpha);
    let mut store = model.init(&SplitRng::new(cfg.seed).fork("vqa.init"));
    for source in init {
        let copied = store.copy_prefix_from(source, ENCODER_PREFIX)?;
        if copied == 0 {
            return Err(Error::Invalid("initialisation checkpoint holds no encoder weights".into()));
        }
    }
    Ok((model, store))
}

/// Minimises `L_vqa + α·L_type` over the training split. With
/// `cfg.eval_every > 0` the validation split is scored at that interval and
/// at the last step, and the best-scoring parameters are returned (earliest
/// on ties).
pub fn train_vqa(cfg: &RunConfig, corpus: &SyntheticCorpus, init: &[ParamStore]) -> Result<VqaRun> {
    let (model, store) = build_vqa(cfg, corpus.vocab.len(), init)?;
    train_vqa_from(cfg, corpus, model, store)
}

pub fn train_vqa_from(cfg: &RunConfig, corpus: &SyntheticCorpus, model: VqaModel, mut store: ParamStore) -> Result<VqaRun> {
    let train = corpus.vqa_split(Split::Train);
    let val = corpus.vqa_split(Split::Val);
    let validate = cfg.eval_every > 0 && !val.is_empty();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut optim = OptimState::new(cfg.adam, &store);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, SplitRng::new(cfg.seed).fork("vqa.batches"));
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut diagnostics = Diagnostics::default();
    for step in 1..=cfg.steps {
        let batch = sampler.next_batch();
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Gradients::default();
        let (mut l_vqa, mut l_type) = (Vec::new(), Vec::new());
        let mut correct = [0usize; 2];
        let mut count = [0usize; 2];
        for &i in &batch {
            let sample = train[i];
            let mut g = Graph::new();
            let out = model.step(&mut g, &store, sample)?;
            grads.accumulate(&g.backward(out.loss)?, scale);
            l_vqa.push(out.report.l_vqa.expect("vqa loss"));
            l_type.push(out.report.l_type.expect("type loss"));
            let k = usize::from(sample.kind == QuestionKind::Closed);
            count[k] += 1;
            correct[k] += usize::from(out.predicted_answer == sample.answer_id);
            diagnostics = diagnostics.merge(out.diagnostics);
        }
        adam_step(&mut store, &grads, &mut optim)?;
        let (mv, mt) = (mean(&l_vqa), mean(&l_type));
        rows.push(MetricsRow {
            step,
            l_vqa: Some(mv),
            l_type: Some(mt),
            total: mv + cfg.alpha * mt,
            open_acc: ratio(correct[0], count[0]),
            closed_acc: ratio(correct[1], count[1]),
            all_acc: ratio(correct[0] + correct[1], count[0] + count[1]),
            ..Default::default()
        });
        if validate && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let acc = evaluate_vqa(&model, &store, &val, cfg.eval_threads)?.all_acc;
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, step, store.clone()));
            }
        }
    }
    let (store, selected_step, selected_val_acc) = match best {
        Some((acc, step, s)) => (s, step, Some(acc)),
        None => (store, cfg.steps, None),
    };
    Ok(VqaRun {
        model,
        store,
        rows,
        diagnostics,
        selected_step,
        selected_val_acc,
    })
}

/// Open, closed and overall answer accuracy plus type accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub open_acc: f64,
    pub closed_acc: f64,
    pub all_acc: f64,
    pub type_acc: f64,
    pub n_open: usize,
    pub n_closed: usize,
}

/// Deterministic for any thread count: workers return integer counts.
pub fn evaluate_vqa(model: &VqaModel, store: &ParamStore, samples: &[&VqaSample], threads: usize) -> Result<EvalMetrics> {
    evaluate_predictor(samples, threads, |s| model.predict(store, s))
}

/// Scores any `(answer, image type)` predictor on `samples`.
pub fn evaluate_predictor<F>(samples: &[&VqaSample], threads: usize, predict: F) -> Result<EvalMetrics>
where
    F: Fn(&VqaSample) -> Result<(usize, usize)> + Sync,
{
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    let chunk = samples.len().div_ceil(threads.max(1));
    let predict = &predict;
    let counts = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || -> Result<[usize; 5]> {
                    let mut c = [0usize; 5];
                    for s in part {
                        let (answer, image_type) = predict(s)?;
                        let k = usize::from(s.kind == QuestionKind::Closed);
                        c[k] += usize::from(answer == s.answer_id);
                        c[2 + k] += 1;
                        c[4] += usize::from(image_type == s.type_id.id());
                    }
                    Ok(c)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut c = [0usize; 5];
    for part in counts {
        c.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    let n = samples.len();
    Ok(EvalMetrics {
        open_acc: ratio(c[0], c[2]).unwrap_or(0.0),
        closed_acc: ratio(c[1], c[3]).unwrap_or(0.0),
        all_acc: (c[0] + c[1]) as f64 / n as f64,
        type_acc: c[4] as f64 / n as f64,
        n_open: c[2],
        n_closed: c[3],
    })
}

/// Result of pre-training one encoder.
#[derive(Debug)]
pub struct PretrainRun {
    pub model: PretrainModel,
    pub store: ParamStore,
    pub rows: Vec<MetricsRow>,
    pub diagnostics: Diagnostics,
}

pub fn build_pretrain(cfg: &RunConfig, vocab_size: usize, t: ImageType) -> (PretrainModel, ParamStore) {
    let model = PretrainModel::new(
        &cfg.model,
        t,
        cfg.tasks[t.id()],
        vocab_size,
        cfg.pretrain_glimpses,
        cfg.pretrain_multitask,
    );
    let store = model.init(&SplitRng::new(cfg.seed).fork(&format!("pretrain.{}.init", t.name())));
    (model, store)
}

/// Minimises `L_spe (+ L_com)` for the encoder of type `t`.
pub fn pretrain_encoder(cfg: &RunConfig, corpus: &SyntheticCorpus, t: ImageType) -> Result<PretrainRun> {
    let (model, mut store) = build_pretrain(cfg, corpus.vocab.len(), t);
    let train = corpus.pretrain_split(t, Split::Train);
    if train.is_empty() {
        return Err(Error::Missing {
            what: "pre-training data for",
            name: t.name().into(),
        });
    }
    let mut optim = OptimState::new(cfg.adam, &store);
    let mut sampler = BatchSampler::new(
        train.len(),
        cfg.pretrain_batch_size,
        SplitRng::new(cfg.seed).fork(&format!("pretrain.{}.batches", t.name())),
    );
    let mut rows = Vec::with_capacity(cfg.pretrain_steps);
    let mut diagnostics = Diagnostics::default();
    for step in 1..=cfg.pretrain_steps {
        let batch = sampler.next_batch();
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Gradients::default();
        let (mut l_spe, mut l_com) = (Vec::new(), Vec::new());
        for &i in &batch {
            let mut g = Graph::new();
            let out = model.step(&mut g, &store, train[i])?;
            grads.accumulate(&g.backward(out.loss)?, scale);
            l_spe.push(out.report.l_spe.expect("task loss"));
            l_com.extend(out.report.l_com);
            diagnostics = diagnostics.merge(out.diagnostics);
        }
        adam_step(&mut store, &grads, &mut optim)?;
        let ms = mean(&l_spe);
        let mc = (!l_com.is_empty()).then(|| mean(&l_com));
        rows.push(MetricsRow {
            step,
            l_spe: Some(ms),
            l_com: mc,
            total: match mc {
                Some(c) => ms + c,
                None => ms,
            },
            ..Default::default()
        });
    }
    Ok(PretrainRun {
        model,
        store,
        rows,
        diagnostics,
    })
}

/// Held-out image-task and compatibility accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEval {
    /// Class accuracy, or pixel accuracy for segmentation.
    pub task_acc: f64,
    /// Mean IoU over classes present in prediction or truth (segmentation).
    pub miou: Option<f64>,
    pub compat_acc: Option<f64>,
    pub n: usize,
}

pub fn evaluate_pretrain(model: &PretrainModel, store: &ParamStore, samples: &[&PretrainSample]) -> Result<PretrainEval> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    let (mut correct, mut total, mut compat, mut compat_n) = (0, 0, 0, 0);
    let mut iou: Vec<(usize, usize)> = Vec::new();
    for s in samples {
        let mut g = Graph::new();
        let out = model.step(&mut g, store, s)?;
        correct += out.task_correct;
        total += out.task_total;
        if iou.len() < out.iou_counts.len() {
            iou.resize(out.iou_counts.len(), (0, 0));
        }
        for (acc, (i, u)) in iou.iter_mut().zip(out.iou_counts) {
            acc.0 += i;
            acc.1 += u;
        }
        if let Some(c) = out.compat_correct {
            compat += usize::from(c);
            compat_n += 1;
        }
    }
    let present: Vec<f64> = iou.iter().filter(|(_, u)| *u > 0).map(|&(i, u)| i as f64 / u as f64).collect();
    Ok(PretrainEval {
        task_acc: correct as f64 / total as f64,
        miou: (!present.is_empty()).then(|| mean(&present)),
        compat_acc: ratio(compat, compat_n),
        n: samples.len(),
    })
}

const CONFIG_ENTRY: &str = "__config__";
const STEP_ENTRY: &str = "__step__";

/// Parameters, the producing configuration and the step count.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub config: RunConfig,
    pub step: usize,
}

pub fn checkpoint_bundle(store: &ParamStore, cfg: &RunConfig, step: usize) -> Result<TensorBundle> {
    let mut b = TensorBundle::new();
    for (name, t) in store.iter() {
        if name.starts_with("__") {
            return Err(Error::Bundle(format!("parameter name {name:?} is reserved")));
        }
        b.insert_tensor(name.clone(), t.clone())?;
    }
    b.insert_bytes(CONFIG_ENTRY, cfg.to_text().into_bytes())?;
    b.insert_tensor(STEP_ENTRY, Tensor::scalar(step as f64))?;
    Ok(b)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &RunConfig, step: usize) -> Result<()> {
    checkpoint_bundle(store, cfg, step)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bundle = TensorBundle::read(path)?;
    let text = std::str::from_utf8(bundle.bytes(CONFIG_ENTRY)?)
        .map_err(|_| Error::Bundle("config echo is not UTF-8".into()))?;
    let config = RunConfig::parse(text)?;
    let step = bundle.tensor(STEP_ENTRY)?.item() as usize;
    let mut store = ParamStore::new();
    for (name, entry) in bundle.entries() {
        if let (false, Entry::F64(t)) = (name.starts_with("__"), entry) {
            store.insert(name.clone(), t.clone());
        }
    }
    Ok(Checkpoint { store, config, step })
}

/// Rebuilds the VQA model of a checkpoint, checking that every parameter is
/// present with the expected shape.
pub fn vqa_from_checkpoint(ckpt: &Checkpoint, vocab_size: usize) -> Result<VqaModel> {
    let model = VqaModel::new(&ckpt.config.model, vocab_size, ckpt.config.alpha);
    let reference = model.init(&SplitRng::new(0));
    if reference.len() != ckpt.store.len() {
        return Err(Error::Invalid(format!(
            "checkpoint holds {} tensors, model expects {}",
            ckpt.store.len(),
            reference.len()
        )));
    }
    for (name, t) in reference.iter() {
        let got = ckpt.store.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::shape("checkpoint tensor", got.shape(), t.shape()));
        }
    }
    Ok(model)
}
