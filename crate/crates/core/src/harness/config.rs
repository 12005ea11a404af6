//! Plain-text run configuration: `key = value` lines, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cmsa::{CmsaConfig, SPATIAL_CHANNELS};
use crate::data::{SplitCounts, SynthConfig};
use crate::error::{Error, Result};
use crate::heads::{TaskKind, DEFAULT_ALPHA};
use crate::image::{BackboneConfig, ImageType, TOTAL_STRIDE};
use crate::numerics::AdamConfig;
use crate::question::QuestionConfig;

/// Model dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub stem_channels: usize,
    pub l_w: usize,
    pub emb_half: usize,
    pub d_q: usize,
    /// `0` picks half the multimodal width.
    pub qkv_channels: usize,
    pub glimpses: usize,
    pub scaled_attention: bool,
    /// Hidden width of the classification decoder.
    pub task_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            channels: [8, 16, 32],
            stem_channels: 8,
            l_w: 6,
            emb_half: 16,
            d_q: 64,
            qkv_channels: 0,
            glimpses: 2,
            scaled_attention: false,
            task_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / TOTAL_STRIDE
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            channels: self.channels,
        }
    }

    pub fn question(&self, vocab_size: usize) -> QuestionConfig {
        QuestionConfig {
            vocab_size,
            emb_half: self.emb_half,
            d_q: self.d_q,
            l_w: self.l_w,
        }
    }

    pub fn cmsa(&self, glimpses: usize) -> CmsaConfig {
        let mut c = CmsaConfig::new(self.l_w, self.grid(), self.channels[2], self.d_q, glimpses);
        if self.qkv_channels > 0 {
            c.qkv_channels = self.qkv_channels;
        }
        c.scaled_attention = self.scaled_attention;
        c
    }

    pub fn d_f(&self) -> usize {
        self.channels[2] + SPATIAL_CHANNELS + self.d_q
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_glimpses: usize,
    /// `false` trains the image task alone.
    pub pretrain_multitask: bool,
    /// Image-task kind per encoder, by image type id.
    pub tasks: [TaskKind; 3],
    pub synth: SynthConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Coordinates checked per parameter tensor; `0` checks all of them.
    pub gradcheck_coords: usize,
    /// Worker threads for evaluation.
    pub eval_threads: usize,
    /// Validation interval of VQA training; the best-validation parameters
    /// are kept. `0` keeps the final parameters.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            steps: 1000,
            batch_size: 8,
            alpha: DEFAULT_ALPHA,
            pretrain_steps: 500,
            pretrain_batch_size: 8,
            pretrain_glimpses: 1,
            pretrain_multitask: true,
            tasks: [TaskKind::Segmentation, TaskKind::Classification, TaskKind::Classification],
            synth: SynthConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            gradcheck_coords: 0,
            eval_threads: 1,
            eval_every: 100,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(key, v)?,
            "image_size" => m.image_size = num(key, v)?,
            "in_channels" => m.in_channels = num(key, v)?,
            "channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
                m.channels = parts
                    .try_into()
                    .map_err(|_| Error::Config("channels: expected three comma-separated widths".into()))?;
            }
            "stem_channels" => m.stem_channels = num(key, v)?,
            "l_w" => m.l_w = num(key, v)?,
            "emb_half" => m.emb_half = num(key, v)?,
            "d_q" => m.d_q = num(key, v)?,
            "qkv_channels" => m.qkv_channels = num(key, v)?,
            "glimpses" => m.glimpses = num(key, v)?,
            "scaled_attention" => m.scaled_attention = flag(key, v)?,
            "task_hidden" => m.task_hidden = num(key, v)?,
            "lr" => self.adam.lr = num(key, v)?,
            "beta1" => self.adam.beta1 = num(key, v)?,
            "beta2" => self.adam.beta2 = num(key, v)?,
            "eps" => self.adam.eps = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "pretrain_steps" => self.pretrain_steps = num(key, v)?,
            "pretrain_batch_size" => self.pretrain_batch_size = num(key, v)?,
            "pretrain_glimpses" => self.pretrain_glimpses = num(key, v)?,
            "pretrain_multitask" => self.pretrain_multitask = flag(key, v)?,
            "task_abdomen" => self.tasks[ImageType::Abdomen.id()] = TaskKind::parse(v).map_err(cfg_err)?,
            "task_head" => self.tasks[ImageType::Head.id()] = TaskKind::parse(v).map_err(cfg_err)?,
            "task_chest" => self.tasks[ImageType::Chest.id()] = TaskKind::parse(v).map_err(cfg_err)?,
            "vqa_train" => self.synth.vqa.train = num(key, v)?,
            "vqa_val" => self.synth.vqa.val = num(key, v)?,
            "vqa_test" => self.synth.vqa.test = num(key, v)?,
            "pretrain_train" => self.synth.pretrain.train = num(key, v)?,
            "pretrain_val" => self.synth.pretrain.val = num(key, v)?,
            "pretrain_test" => self.synth.pretrain.test = num(key, v)?,
            "occupancy" => self.synth.occupancy = num(key, v)?,
            "texture_amplitude" => self.synth.texture_amplitude = num(key, v)?,
            "noise" => self.synth.noise = num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "gradcheck_coords" => self.gradcheck_coords = num(key, v)?,
            "eval_threads" => self.eval_threads = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("image_size", m.image_size),
            ("in_channels", m.in_channels),
            ("stem_channels", m.stem_channels),
            ("l_w", m.l_w),
            ("emb_half", m.emb_half),
            ("d_q", m.d_q),
            ("glimpses", m.glimpses),
            ("task_hidden", m.task_hidden),
            ("batch_size", self.batch_size),
            ("pretrain_batch_size", self.pretrain_batch_size),
            ("pretrain_glimpses", self.pretrain_glimpses),
            ("eval_threads", self.eval_threads),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if m.channels.contains(&0) {
            return Err(Error::Config("channels must be positive".into()));
        }
        if !m.image_size.is_multiple_of(TOTAL_STRIDE) {
            return Err(Error::Config(format!("image_size must be divisible by {TOTAL_STRIDE}")));
        }
        if !(self.alpha.is_finite() && self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return Err(Error::Config("alpha and lr must be finite, lr non-negative".into()));
        }
        for c in [self.synth.vqa, self.synth.pretrain] {
            if c.train == 0 || c.val == 0 || c.test == 0 {
                return Err(Error::Config("sample counts must be positive".into()));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("image_size", m.image_size.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("channels", m.channels.map(|c| c.to_string()).join(","));
        kv("stem_channels", m.stem_channels.to_string());
        kv("l_w", m.l_w.to_string());
        kv("emb_half", m.emb_half.to_string());
        kv("d_q", m.d_q.to_string());
        kv("qkv_channels", m.qkv_channels.to_string());
        kv("glimpses", m.glimpses.to_string());
        kv("scaled_attention", m.scaled_attention.to_string());
        kv("task_hidden", m.task_hidden.to_string());
        kv("lr", self.adam.lr.to_string());
        kv("beta1", self.adam.beta1.to_string());
        kv("beta2", self.adam.beta2.to_string());
        kv("eps", self.adam.eps.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("alpha", self.alpha.to_string());
        kv("pretrain_steps", self.pretrain_steps.to_string());
        kv("pretrain_batch_size", self.pretrain_batch_size.to_string());
        kv("pretrain_glimpses", self.pretrain_glimpses.to_string());
        kv("pretrain_multitask", self.pretrain_multitask.to_string());
        for t in ImageType::ALL {
            kv(&format!("task_{}", t.name()), self.tasks[t.id()].to_string());
        }
        let SynthConfig {
            vqa,
            pretrain,
            occupancy,
            texture_amplitude,
            noise,
        } = self.synth;
        for (prefix, c) in [("vqa", vqa), ("pretrain", pretrain)] {
            let SplitCounts { train, val, test } = c;
            kv(&format!("{prefix}_train"), train.to_string());
            kv(&format!("{prefix}_val"), val.to_string());
            kv(&format!("{prefix}_test"), test.to_string());
        }
        kv("occupancy", occupancy.to_string());
        kv("texture_amplitude", texture_amplitude.to_string());
        kv("noise", noise.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("gradcheck_coords", self.gradcheck_coords.to_string());
        kv("eval_threads", self.eval_threads.to_string());
        kv("eval_every", self.eval_every.to_string());
        s
    }
}

fn cfg_err(e: Error) -> Error {
    Error::Config(e.to_string())
}
