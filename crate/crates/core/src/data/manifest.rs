//! On-disk dataset: `data.cmtb` (images and masks), `vqa.jsonl`,
//! `pretrain.jsonl` and `vocab.txt` in one directory.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::TensorBundle;
use super::synth::{PretrainSample, QuestionKind, Split, SyntheticCorpus, VqaSample};
use crate::error::{Error, Result};
use crate::heads::TaskTarget;
use crate::image::ImageType;
use crate::numerics::Tensor;
use crate::question::Vocabulary;

pub const BUNDLE_FILE: &str = "data.cmtb";
pub const VQA_MANIFEST: &str = "vqa.jsonl";
pub const PRETRAIN_MANIFEST: &str = "pretrain.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaRecord {
    pub image: String,
    pub tokens: Vec<usize>,
    pub answer: usize,
    #[serde(rename = "type")]
    pub type_id: usize,
    pub kind: QuestionKind,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRecord {
    pub image: String,
    #[serde(rename = "type")]
    pub type_id: usize,
    /// Class target, absent for segmentation.
    pub class: Option<usize>,
    /// Bundle entry of the segmentation mask.
    pub mask: Option<String>,
    pub tokens: Vec<usize>,
    pub compat: usize,
    pub split: Split,
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "{}", serde_json::to_string(r)?);
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn save_dataset(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bundle = TensorBundle::new();
    let mut vqa = Vec::new();
    for (i, s) in corpus.vqa.iter().enumerate() {
        let name = format!("vqa/{i:05}");
        bundle.insert_tensor(&name, s.image.clone())?;
        vqa.push(VqaRecord {
            image: name,
            tokens: s.token_ids.clone(),
            answer: s.answer_id,
            type_id: s.type_id.id(),
            kind: s.kind,
            split: s.split,
        });
    }
    let mut pre = Vec::new();
    for t in ImageType::ALL {
        for (i, s) in corpus.pretrain[t.id()].iter().enumerate() {
            let name = format!("pretrain/{}/{i:05}", t.name());
            bundle.insert_tensor(&name, s.image.clone())?;
            let (class, mask) = match &s.target {
                TaskTarget::Class(k) => (Some(*k), None),
                TaskTarget::Mask(m) => {
                    let mask_name = format!("{name}/mask");
                    let t = Tensor::new([m.len()], m.iter().map(|&v| v as f64).collect())?;
                    bundle.insert_tensor(&mask_name, t)?;
                    (None, Some(mask_name))
                }
            };
            pre.push(PretrainRecord {
                image: name,
                type_id: t.id(),
                class,
                mask,
                tokens: s.paired_token_ids.clone(),
                compat: s.compat_label,
                split: s.split,
            });
        }
    }
    bundle.write(&dir.join(BUNDLE_FILE))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write(VQA_MANIFEST, jsonl(&vqa)?)?;
    write(PRETRAIN_MANIFEST, jsonl(&pre)?)?;
    corpus.vocab.save(&dir.join(VOCAB_FILE))
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticCorpus> {
    if !dir.is_dir() {
        return Err(Error::Missing {
            what: "data directory",
            name: dir.display().to_string(),
        });
    }
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let bundle = TensorBundle::read(&dir.join(BUNDLE_FILE))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let check_tokens = |tokens: &[usize]| -> Result<()> {
        match tokens.iter().find(|&&t| t >= vocab.len()) {
            Some(&t) => Err(Error::Index {
                op: "manifest tokens",
                index: t,
                bound: vocab.len(),
            }),
            None => Ok(()),
        }
    };

    let mut vqa = Vec::new();
    for r in parse_jsonl::<VqaRecord>(&read(VQA_MANIFEST)?)? {
        check_tokens(&r.tokens)?;
        vqa.push(VqaSample {
            image: bundle.tensor(&r.image)?.clone(),
            token_ids: r.tokens,
            answer_id: r.answer,
            type_id: ImageType::from_id(r.type_id)?,
            kind: r.kind,
            split: r.split,
        });
    }
    let mut pretrain: [Vec<PretrainSample>; 3] = Default::default();
    for r in parse_jsonl::<PretrainRecord>(&read(PRETRAIN_MANIFEST)?)? {
        check_tokens(&r.tokens)?;
        let target = match (r.class, &r.mask) {
            (Some(k), None) => TaskTarget::Class(k),
            (None, Some(m)) => TaskTarget::Mask(bundle.tensor(m)?.data().iter().map(|&v| v as usize).collect()),
            _ => return Err(Error::Invalid(format!("{}: exactly one of class and mask is required", r.image))),
        };
        let t = ImageType::from_id(r.type_id)?;
        pretrain[t.id()].push(PretrainSample {
            image: bundle.tensor(&r.image)?.clone(),
            type_id: t,
            target,
            paired_token_ids: r.tokens,
            compat_label: r.compat,
            split: r.split,
        });
    }
    Ok(SyntheticCorpus { vocab, vqa, pretrain })
}
