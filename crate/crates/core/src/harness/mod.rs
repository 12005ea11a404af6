//! Run configuration, models, training loops and the file-level runs behind
//! the command line.

pub mod config;
pub mod metrics;
pub mod model;
pub mod train;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{ModelConfig, RunConfig};
pub use metrics::{parse_csv, to_csv, MetricsRow, METRICS_HEADER};
pub use model::{Diagnostics, PretrainModel, VqaModel};
pub use train::{
    build_pretrain, build_vqa, evaluate_predictor, evaluate_pretrain, evaluate_vqa, load_checkpoint, pretrain_encoder, save_checkpoint,
    train_vqa, train_vqa_from, vqa_from_checkpoint, BatchSampler, Checkpoint, EvalMetrics, PretrainEval, PretrainRun,
    VqaRun, ENCODER_PREFIX,
};

use crate::data::synth::{vocabulary, ANSWERS, IMAGE_SIZE};
use crate::data::{generate_synthetic, load_dataset, save_dataset, QuestionKind, Split, VqaSample};
use crate::error::{Error, Result};
use crate::image::ImageType;
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, SplitRng, Tensor};
use crate::question::PAD_ID;

fn write_file(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Generates the synthetic corpus into `cfg.data_dir`.
pub fn run_gen_data(cfg: &RunConfig) -> Result<()> {
    let corpus = generate_synthetic(cfg.seed, &cfg.synth)?;
    save_dataset(&corpus, &cfg.data_dir)
}

pub fn pretrain_checkpoint_path(out: &Path, t: ImageType) -> PathBuf {
    out.join(format!("pretrain_{}.cmtb", t.name()))
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub image_type: String,
    pub multitask: bool,
    pub steps: usize,
    pub test: PretrainEval,
    /// Worst invariant readings over every training forward pass.
    pub diagnostics: Diagnostics,
}

/// Pre-trains every encoder. Writes `pretrain_{type}.cmtb`, `.csv` and
/// `.json` (held-out evaluation) under `cfg.out_dir`.
pub fn run_pretrain(cfg: &RunConfig) -> Result<Vec<PretrainSummary>> {
    let corpus = load_dataset(&cfg.data_dir)?;
    ensure_dir(&cfg.out_dir)?;
    let mut out = Vec::new();
    for t in ImageType::ALL {
        let run = pretrain_encoder(cfg, &corpus, t)?;
        let test = evaluate_pretrain(&run.model, &run.store, &corpus.pretrain_split(t, Split::Test))?;
        save_checkpoint(&pretrain_checkpoint_path(&cfg.out_dir, t), &run.store, cfg, cfg.pretrain_steps)?;
        let stem = format!("pretrain_{}", t.name());
        write_file(&cfg.out_dir.join(format!("{stem}.csv")), to_csv(&run.rows))?;
        let summary = PretrainSummary {
            image_type: t.name().into(),
            multitask: cfg.pretrain_multitask,
            steps: cfg.pretrain_steps,
            test,
            diagnostics: run.diagnostics,
        };
        write_file(&cfg.out_dir.join(format!("{stem}.json")), to_json(&summary)?)?;
        out.push(summary);
    }
    Ok(out)
}

/// A checkpoint file, or a directory whose `pretrain_*.cmtb` files are all used.
pub fn resolve_init(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let found: Vec<PathBuf> = ImageType::ALL
            .iter()
            .map(|&t| pretrain_checkpoint_path(path, t))
            .filter(|p| p.is_file())
            .collect();
        if found.is_empty() {
            return Err(Error::Missing {
                what: "pre-training checkpoints in",
                name: path.display().to_string(),
            });
        }
        Ok(found)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::Missing {
            what: "checkpoint",
            name: path.display().to_string(),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub selected_step: usize,
    pub selected_val_acc: Option<f64>,
    pub init: Vec<String>,
    pub test: EvalMetrics,
    /// Worst invariant readings over every training forward pass.
    pub diagnostics: Diagnostics,
}

/// End-to-end VQA training. Writes `vqa.cmtb`, `vqa.csv` and `vqa.json`.
pub fn run_vqa_train(cfg: &RunConfig, init: Option<&Path>) -> Result<TrainSummary> {
    let corpus = load_dataset(&cfg.data_dir)?;
    let paths = match init {
        Some(p) => resolve_init(p)?,
        None => Vec::new(),
    };
    let stores = paths
        .iter()
        .map(|p| load_checkpoint(p).map(|c| c.store))
        .collect::<Result<Vec<_>>>()?;
    let run = train_vqa(cfg, &corpus, &stores)?;
    ensure_dir(&cfg.out_dir)?;
    save_checkpoint(&cfg.out_dir.join("vqa.cmtb"), &run.store, cfg, run.selected_step)?;
    write_file(&cfg.out_dir.join("vqa.csv"), to_csv(&run.rows))?;
    let test = evaluate_vqa(&run.model, &run.store, &corpus.vqa_split(Split::Test), cfg.eval_threads)?;
    let summary = TrainSummary {
        steps: cfg.steps,
        selected_step: run.selected_step,
        selected_val_acc: run.selected_val_acc,
        init: paths.iter().map(|p| p.display().to_string()).collect(),
        test,
        diagnostics: run.diagnostics,
    };
    write_file(&cfg.out_dir.join("vqa.json"), to_json(&summary)?)?;
    Ok(summary)
}

/// Evaluates a VQA checkpoint on one split of the dataset in `data_dir`.
pub fn run_eval(checkpoint: &Path, data_dir: &Path, split: &str, threads: usize) -> Result<EvalMetrics> {
    let split = Split::parse(split)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_dataset(data_dir)?;
    let model = vqa_from_checkpoint(&ckpt, corpus.vocab.len())?;
    evaluate_vqa(&model, &ckpt.store, &corpus.vqa_split(split), threads)
}

/// A random single-sample batch for gradient checking.
pub fn random_vqa_sample(cfg: &ModelConfig, vocab_size: usize, rng: &mut SplitRng) -> VqaSample {
    let image = Tensor::from_fn([cfg.image_size, cfg.image_size, cfg.in_channels], |_| rng.uniform(-1.0, 1.0));
    let real = (cfg.l_w - 1).max(1);
    let token_ids = (0..cfg.l_w)
        .map(|i| if i < real { 1 + rng.below(vocab_size - 1) } else { PAD_ID })
        .collect();
    VqaSample {
        image,
        token_ids,
        answer_id: rng.below(ANSWERS.len()),
        type_id: ImageType::ALL[rng.below(3)],
        kind: if rng.coin(0.5) { QuestionKind::Open } else { QuestionKind::Closed },
        split: Split::Train,
    }
}

/// Finite-difference check of the full VQA loss on one random sample.
/// `corrupt` names a parameter whose analytic gradient is perturbed.
pub fn run_gradcheck(cfg: &RunConfig, corrupt: Option<String>) -> Result<GradCheckReport> {
    cfg.validate()?;
    let vocab_size = vocabulary().len();
    let model = VqaModel::new(&cfg.model, vocab_size, cfg.alpha);
    let rng = SplitRng::new(cfg.seed).fork("gradcheck");
    let mut store = model.init(&rng.fork("init"));
    // Non-zero biases so every ReLU sees a generic operating point.
    let biases: Vec<String> = store.names().filter(|n| n.ends_with(".b")).cloned().collect();
    let mut brng = rng.fork("bias");
    for n in biases {
        store.get_mut(&n)?.data_mut().iter_mut().for_each(|b| *b = brng.uniform(-0.1, 0.1));
    }
    let sample = random_vqa_sample(&cfg.model, vocab_size, &mut rng.fork("sample"));
    let opts = GradCheckOptions {
        max_coords_per_param: (cfg.gradcheck_coords > 0).then_some(cfg.gradcheck_coords),
        seed: cfg.seed,
        corrupt_param: corrupt,
        ..GradCheckOptions::default()
    };
    grad_check(&mut store, |g, s| Ok(model.step(g, s, &sample)?.loss), &opts)
}

/// The image size the synthetic corpus is drawn at.
pub const SYNTH_IMAGE_SIZE: usize = IMAGE_SIZE;
