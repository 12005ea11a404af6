//! Procedural corpora: textured 32×32 images with shapes in quadrants,
//! templated questions about them, and per-type pre-training tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::TaskTarget;
use crate::image::ImageType;
use crate::numerics::{SplitRng, Tensor};
use crate::question::Vocabulary;

pub const IMAGE_SIZE: usize = 32;
pub const QUESTION_LEN: usize = 6;

pub const SHAPES: [&str; 3] = ["square", "circle", "cross"];
pub const ANSWERS: [&str; 5] = ["square", "circle", "cross", "yes", "no"];
pub const YES: usize = 3;
pub const NO: usize = 4;

const MODALITIES: [&str; 4] = ["ct", "mri", "xray", "scan"];
const VERTICAL: [&str; 2] = ["top", "bottom"];
const HORIZONTAL: [&str; 2] = ["left", "right"];

/// Word list of the question templates, in id order after the reserved ids.
pub fn vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = MODALITIES.to_vec();
    words.extend(["what", "any", "at"]);
    words.extend(VERTICAL);
    words.extend(HORIZONTAL);
    words.extend(SHAPES);
    Vocabulary::new(words)
}

/// Image types a modality word may be asked about.
fn modality_types(word: &str) -> [bool; 3] {
    match word {
        "ct" => [true, false, false],
        "mri" => [false, true, false],
        "xray" => [false, false, true],
        "scan" => [true, true, false],
        _ => [false; 3],
    }
}

fn modalities_for(t: ImageType) -> Vec<&'static str> {
    MODALITIES.into_iter().filter(|m| modality_types(m)[t.id()]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Open,
    Closed,
}

impl QuestionKind {
    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::Open => "open",
            QuestionKind::Closed => "closed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Missing {
                what: "split",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample {
    pub image: Tensor,
    pub token_ids: Vec<usize>,
    pub answer_id: usize,
    pub type_id: ImageType,
    pub kind: QuestionKind,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    pub image: Tensor,
    pub type_id: ImageType,
    pub target: TaskTarget,
    pub paired_token_ids: Vec<usize>,
    pub compat_label: usize,
    pub split: Split,
}

/// A question of the compatibility pool with the image types it fits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PooledQuestion {
    pub token_ids: Vec<usize>,
    pub compatible: [bool; 3],
}

/// Per-split sample counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vqa: SplitCounts,
    /// Pre-training samples per image type.
    pub pretrain: SplitCounts,
    /// Probability that a quadrant holds a shape.
    pub occupancy: f64,
    pub texture_amplitude: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vqa: SplitCounts {
                train: 1500,
                val: 100,
                test: 600,
            },
            pretrain: SplitCounts {
                train: 300,
                val: 100,
                test: 200,
            },
            occupancy: 0.5,
            texture_amplitude: 0.6,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub vqa: Vec<VqaSample>,
    /// Indexed by image type id.
    pub pretrain: [Vec<PretrainSample>; 3],
}

impl SyntheticCorpus {
    pub fn vqa_split(&self, split: Split) -> Vec<&VqaSample> {
        self.vqa.iter().filter(|s| s.split == split).collect()
    }

    pub fn pretrain_split(&self, t: ImageType, split: Split) -> Vec<&PretrainSample> {
        self.pretrain[t.id()].iter().filter(|s| s.split == split).collect()
    }
}

/// Type-specific background texture at pixel `(y, x)`.
fn texture(t: ImageType, y: usize, x: usize) -> f64 {
    let tau = std::f64::consts::TAU;
    match t {
        ImageType::Abdomen => (tau * y as f64 / 8.0).sin(),
        ImageType::Head => (tau * x as f64 / 8.0).sin(),
        ImageType::Chest => (tau * (x + y) as f64 / 8.0).cos(),
    }
}

/// Shapes fill most of their quadrant so each covers the majority of the
/// four 8×8 cells under it.
fn shape_covers(shape: usize, dy: i64, dx: i64) -> bool {
    match shape {
        0 => dy.abs() <= 6 && dx.abs() <= 6,
        1 => dy * dy + dx * dx <= 49,
        _ => (dx.abs() <= 3 && dy.abs() <= 7) || (dy.abs() <= 3 && dx.abs() <= 7),
    }
}

/// Quadrant contents, row-major (top-left, top-right, bottom-left, bottom-right).
type Layout = [Option<usize>; 4];

/// Renders an image and its per-pixel class mask (0 background, 1 + shape).
fn render(t: ImageType, layout: &Layout, cfg: &SynthConfig, rng: &mut SplitRng) -> (Tensor, Vec<usize>) {
    let n = IMAGE_SIZE;
    let half = n / 2;
    let mut mask = vec![0usize; n * n];
    for (q, content) in layout.iter().enumerate() {
        let Some(shape) = *content else { continue };
        let cy = (q / 2 * half + half / 2) as i64 + rng.below(3) as i64 - 1;
        let cx = (q % 2 * half + half / 2) as i64 + rng.below(3) as i64 - 1;
        for y in 0..n {
            for x in 0..n {
                if shape_covers(shape, y as i64 - cy, x as i64 - cx) {
                    mask[y * n + x] = shape + 1;
                }
            }
        }
    }
    let offset = rng.uniform(-0.1, 0.1);
    let image = Tensor::from_fn([n, n, 1], |i| {
        let (y, x) = (i / n, i % n);
        let fg = if mask[i] > 0 { 1.0 } else { 0.0 };
        cfg.texture_amplitude * texture(t, y, x) + fg + offset + rng.uniform(-cfg.noise, cfg.noise)
    });
    (image, mask)
}

fn random_layout(cfg: &SynthConfig, rng: &mut SplitRng) -> Layout {
    let mut layout = [None; 4];
    for q in &mut layout {
        if rng.coin(cfg.occupancy) {
            *q = Some(rng.below(3));
        }
    }
    if layout.iter().all(Option::is_none) {
        layout[rng.below(4)] = Some(rng.below(3));
    }
    layout
}

fn position_words(q: usize) -> [&'static str; 2] {
    [VERTICAL[q / 2], HORIZONTAL[q % 2]]
}

fn question_words(modality: &'static str, kind: QuestionKind, quadrant: usize, shape: usize) -> Vec<&'static str> {
    let [v, h] = position_words(quadrant);
    match kind {
        QuestionKind::Open => vec![modality, "what", "at", v, h],
        QuestionKind::Closed => vec![modality, "any", SHAPES[shape], "at", v, h],
    }
}

fn ids(vocab: &Vocabulary, words: &[&str]) -> Vec<usize> {
    vocab.tokenize_pad(words, QUESTION_LEN).0
}

/// Every question template with its compatible image types.
pub fn question_pool(vocab: &Vocabulary) -> Vec<PooledQuestion> {
    let mut pool = Vec::new();
    for m in MODALITIES {
        for q in 0..4 {
            pool.push(PooledQuestion {
                token_ids: ids(vocab, &question_words(m, QuestionKind::Open, q, 0)),
                compatible: modality_types(m),
            });
            for s in 0..3 {
                pool.push(PooledQuestion {
                    token_ids: ids(vocab, &question_words(m, QuestionKind::Closed, q, s)),
                    compatible: modality_types(m),
                });
            }
        }
    }
    pool
}

/// Draws a question for an image of type `t`. The label is drawn first with
/// probability ½ and the question uniformly among those carrying it; if that
/// class is empty the other class is used.
pub fn pair_for_compatibility(t: ImageType, pool: &[PooledQuestion], rng: &mut SplitRng) -> Result<(Vec<usize>, usize)> {
    if pool.is_empty() {
        return Err(Error::Invalid("compatibility question pool is empty".into()));
    }
    let want = usize::from(rng.coin(0.5));
    let of = |label: usize| -> Vec<&PooledQuestion> {
        pool.iter().filter(|q| usize::from(q.compatible[t.id()]) == label).collect()
    };
    let mut class = of(want);
    if class.is_empty() {
        class = of(1 - want);
    }
    let q = class[rng.below(class.len())];
    Ok((q.token_ids.clone(), usize::from(q.compatible[t.id()])))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Split of sample `index` in stream `stream`, drawn by hash with weights
/// proportional to `counts`.
fn split_of(seed: u64, stream: u64, index: u64, counts: &SplitCounts) -> Split {
    let h = splitmix(splitmix(seed ^ stream.wrapping_mul(0x1000_0000_01b3)) ^ index);
    let r = h % counts.total() as u64;
    if r < counts.train as u64 {
        Split::Train
    } else if r < (counts.train + counts.val) as u64 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Walks sample indices, assigning each to its hashed split, until every
/// split holds its count. Indices whose split is already full are skipped.
fn fill_splits<T>(seed: u64, stream: u64, counts: &SplitCounts, mut make: impl FnMut(u64, Split) -> T) -> Vec<T> {
    let mut have = [0usize; 3];
    let mut out = Vec::with_capacity(counts.total());
    let mut index = 0u64;
    while Split::ALL.iter().any(|&s| have[s as usize] < counts.get(s)) {
        let s = split_of(seed, stream, index, counts);
        if have[s as usize] < counts.get(s) {
            have[s as usize] += 1;
            out.push(make(index, s));
        }
        index += 1;
    }
    out
}

fn vqa_sample(vocab: &Vocabulary, cfg: &SynthConfig, rng: &mut SplitRng, split: Split) -> VqaSample {
    let t = ImageType::ALL[rng.below(3)];
    let mods = modalities_for(t);
    let modality = mods[rng.below(mods.len())];
    let mut layout = random_layout(cfg, rng);
    let kind = if rng.coin(0.5) { QuestionKind::Open } else { QuestionKind::Closed };
    let (quadrant, shape, answer) = match kind {
        QuestionKind::Open => {
            let occupied: Vec<usize> = (0..4).filter(|&q| layout[q].is_some()).collect();
            let q = occupied[rng.below(occupied.len())];
            let s = layout[q].expect("occupied quadrant");
            (q, s, s)
        }
        QuestionKind::Closed => {
            let (q, s) = (rng.below(4), rng.below(3));
            let yes = rng.coin(0.5);
            if yes {
                layout[q] = Some(s);
            } else if layout[q] == Some(s) {
                let alternatives: Vec<Option<usize>> =
                    [None, Some(0), Some(1), Some(2)].into_iter().filter(|&a| a != Some(s)).collect();
                layout[q] = alternatives[rng.below(alternatives.len())];
            }
            (q, s, if yes { YES } else { NO })
        }
    };
    let (image, _) = render(t, &layout, cfg, rng);
    VqaSample {
        image,
        token_ids: ids(vocab, &question_words(modality, kind, quadrant, shape)),
        answer_id: answer,
        type_id: t,
        kind,
        split,
    }
}

/// Abdomen images carry a segmentation mask over {background, 3 shapes};
/// head and chest images hold one shape whose class is the target.
fn pretrain_sample(t: ImageType, pool: &[PooledQuestion], cfg: &SynthConfig, rng: &mut SplitRng, split: Split) -> PretrainSample {
    let (image, target) = match t {
        ImageType::Abdomen => {
            let layout = random_layout(cfg, rng);
            let (image, mask) = render(t, &layout, cfg, rng);
            (image, TaskTarget::Mask(mask))
        }
        ImageType::Head | ImageType::Chest => {
            let mut layout = [None; 4];
            let s = rng.below(3);
            layout[rng.below(4)] = Some(s);
            (render(t, &layout, cfg, rng).0, TaskTarget::Class(s))
        }
    };
    let (paired_token_ids, compat_label) = pair_for_compatibility(t, pool, rng).expect("non-empty pool");
    PretrainSample {
        image,
        type_id: t,
        target,
        paired_token_ids,
        compat_label,
        split,
    }
}

/// Builds the whole corpus; a pure function of `(seed, cfg)`.
pub fn generate_synthetic(seed: u64, cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    for (what, c) in [("vqa", cfg.vqa), ("pretrain", cfg.pretrain)] {
        if Split::ALL.iter().any(|&s| c.get(s) == 0) {
            return Err(Error::Config(format!("{what} split counts must all be at least 1")));
        }
    }
    let vocab = vocabulary();
    let pool = question_pool(&vocab);
    let root = SplitRng::new(seed);
    let vqa = fill_splits(seed, 0, &cfg.vqa, |i, s| {
        vqa_sample(&vocab, cfg, &mut root.fork_index("vqa", i), s)
    });
    let pretrain = ImageType::ALL.map(|t| {
        let label = format!("pretrain.{}", t.name());
        fill_splits(seed, 1 + t.id() as u64, &cfg.pretrain, |i, s| {
            pretrain_sample(t, &pool, cfg, &mut root.fork_index(&label, i), s)
        })
    });
    Ok(SyntheticCorpus { vocab, vqa, pretrain })
}

/// Task classes of each encoder's pre-training task.
pub fn task_classes(t: ImageType) -> usize {
    match t {
        ImageType::Abdomen => 4,
        ImageType::Head | ImageType::Chest => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> SynthConfig {
        SynthConfig {
            vqa: SplitCounts { train: 300, val: 20, test: 300 },
            pretrain: SplitCounts { train: 20, val: 5, test: 5 },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = generate_synthetic(5, &small()).unwrap();
        let b = generate_synthetic(5, &small()).unwrap();
        assert_eq!(a.vqa.len(), b.vqa.len());
        for (x, y) in a.vqa.iter().zip(&b.vqa) {
            assert!(x.image.bit_eq(&y.image));
            assert_eq!((x.answer_id, &x.token_ids, x.split), (y.answer_id, &y.token_ids, y.split));
        }
        let c = generate_synthetic(6, &small()).unwrap();
        assert!(!a.vqa[0].image.bit_eq(&c.vqa[0].image));
    }

    #[test]
    fn counts_and_invariants() {
        let cfg = small();
        let c = generate_synthetic(1, &cfg).unwrap();
        for s in Split::ALL {
            assert_eq!(c.vqa_split(s).len(), cfg.vqa.get(s));
            for t in ImageType::ALL {
                assert_eq!(c.pretrain_split(t, s).len(), cfg.pretrain.get(s));
            }
        }
        let pool = question_pool(&c.vocab);
        for s in &c.vqa {
            assert!(s.answer_id < ANSWERS.len());
            assert_eq!(s.token_ids.len(), QUESTION_LEN);
            assert_eq!(s.image.shape(), &[32, 32, 1]);
            let closed = s.answer_id >= YES;
            assert_eq!(closed, s.kind == QuestionKind::Closed);
            // VQA questions use a modality word compatible with the image.
            let pooled = pool.iter().find(|p| p.token_ids == s.token_ids).expect("templated question");
            assert!(pooled.compatible[s.type_id.id()]);
        }
        for t in ImageType::ALL {
            for s in &c.pretrain[t.id()] {
                let pooled = pool.iter().find(|p| p.token_ids == s.paired_token_ids).unwrap();
                assert_eq!(s.compat_label == 1, pooled.compatible[t.id()]);
            }
        }
        assert!(generate_synthetic(1, &SynthConfig { vqa: SplitCounts { train: 0, val: 1, test: 1 }, ..cfg }).is_err());
    }

    #[test]
    fn compatibility_examples() {
        let vocab = vocabulary();
        let q = question_pool(&vocab).into_iter().find(|p| p.compatible == [false, true, false]).unwrap();
        let pool = vec![q];
        let mut rng = SplitRng::new(0);
        assert_eq!(pair_for_compatibility(ImageType::Head, &pool, &mut rng).unwrap().1, 1);
        assert_eq!(pair_for_compatibility(ImageType::Chest, &pool, &mut rng).unwrap().1, 0);
        assert!(pair_for_compatibility(ImageType::Head, &[], &mut rng).is_err());
    }

    #[test]
    fn compatibility_is_balanced() {
        let pool = question_pool(&vocabulary());
        for t in ImageType::ALL {
            let mut rng = SplitRng::new(11 + t.id() as u64);
            let positives: usize = (0..10_000).map(|_| pair_for_compatibility(t, &pool, &mut rng).unwrap().1).sum();
            let frac = positives as f64 / 10_000.0;
            assert!((0.45..=0.55).contains(&frac), "{t}: {frac}");
        }
    }

    #[test]
    fn splits_are_disjoint_by_index() {
        let cfg = small();
        let mut seen = HashMap::new();
        let _ = fill_splits(3, 0, &cfg.vqa, |i, s| assert!(seen.insert(i, s).is_none()));
        for (&i, &s) in &seen {
            assert_eq!(split_of(3, 0, i, &cfg.vqa), s);
        }
    }

    /// Softmax regression on raw pixels, trained by full-batch gradient descent.
    fn linear_probe_accuracy(train: &[(&Tensor, usize)], test: &[(&Tensor, usize)], classes: usize) -> f64 {
        let d = train[0].0.numel();
        let mut w = vec![0.0; (d + 1) * classes];
        let scores = |w: &[f64], x: &Tensor| -> Vec<f64> {
            (0..classes)
                .map(|k| w[d * classes + k] + x.data().iter().enumerate().map(|(i, v)| v * w[i * classes + k]).sum::<f64>())
                .collect()
        };
        for _ in 0..200 {
            let mut grad = vec![0.0; w.len()];
            for (x, y) in train {
                let s = scores(&w, x);
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for k in 0..classes {
                    let p = (s[k] - m).exp() / z - if k == *y { 1.0 } else { 0.0 };
                    for (i, v) in x.data().iter().enumerate() {
                        grad[i * classes + k] += p * v;
                    }
                    grad[d * classes + k] += p;
                }
            }
            let lr = 0.5 / train.len() as f64;
            w.iter_mut().zip(&grad).for_each(|(a, g)| *a -= lr * g / d as f64 * 10.0);
        }
        let correct = test
            .iter()
            .filter(|(x, y)| {
                let s = scores(&w, x);
                (0..classes).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap() == *y
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn types_are_linearly_separable_from_pixels() {
        let c = generate_synthetic(2, &small()).unwrap();
        let pick = |s: Split| -> Vec<(&Tensor, usize)> {
            c.vqa_split(s).into_iter().map(|v| (&v.image, v.type_id.id())).collect()
        };
        let acc = linear_probe_accuracy(&pick(Split::Train), &pick(Split::Test), 3);
        assert!(acc >= 0.95, "linear type probe accuracy {acc}");
    }

    #[test]
    fn question_only_majority_is_weak() {
        let c = generate_synthetic(4, &small()).unwrap();
        let mut table: HashMap<&[usize], [usize; 5]> = HashMap::new();
        for s in c.vqa_split(Split::Train) {
            table.entry(&s.token_ids).or_default()[s.answer_id] += 1;
        }
        let mut global = [0usize; 5];
        c.vqa_split(Split::Train).iter().for_each(|s| global[s.answer_id] += 1);
        let argmax = |h: &[usize; 5]| (0..5).max_by_key(|&k| (h[k], usize::MAX - k)).unwrap();
        let test = c.vqa_split(Split::Test);
        let correct = test
            .iter()
            .filter(|s| argmax(table.get(s.token_ids.as_slice()).unwrap_or(&global)) == s.answer_id)
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc <= 0.60, "question-only accuracy {acc}");
    }

    #[test]
    fn masks_match_targets() {
        let c = generate_synthetic(7, &small()).unwrap();
        for s in &c.pretrain[0] {
            let TaskTarget::Mask(m) = &s.target else { panic!("abdomen must segment") };
            assert_eq!(m.len(), 32 * 32);
            assert!(m.iter().any(|&v| v > 0) && m.iter().all(|&v| v < 4));
        }
        for s in &c.pretrain[1] {
            assert!(matches!(s.target, TaskTarget::Class(k) if k < 3));
        }
    }
}
