//! Image side: three type-specific convolutional backbones, the image-type
//! classifier that gates them, and the 8-channel spatial map.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamStore, SplitRng, Tensor, Var};

/// Image family; also the index of the matching backbone and gate weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImageType {
    Abdomen = 0,
    Head = 1,
    Chest = 2,
}

impl ImageType {
    pub const ALL: [ImageType; 3] = [ImageType::Abdomen, ImageType::Head, ImageType::Chest];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::Index {
            op: "image type",
            index: id,
            bound: 3,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ImageType::Abdomen => "abdomen",
            ImageType::Head => "head",
            ImageType::Chest => "chest",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown image type {s:?}")))
    }
}

impl fmt::Display for ImageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const KERNEL: usize = 3;
pub const TOTAL_STRIDE: usize = 8;

/// 3×3 convolution with zero padding 1 on an `[h×w×c_in]` map. `weight` is
/// `[9·c_in × c_out]` in (ky, kx, c_in) row order.
pub fn conv2d(g: &mut Graph, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
    let [h, w, c_in] = *g.shape(x) else {
        return Err(Error::Invalid(format!("conv2d needs [h, w, c], got {:?}", g.shape(x))));
    };
    let ws = g.shape(weight).to_vec();
    if ws.len() != 2 || ws[0] != KERNEL * KERNEL * c_in {
        return Err(Error::shape("conv2d", g.shape(x), &ws));
    }
    let ho = (h + 2 - KERNEL) / stride + 1;
    let wo = (w + 2 - KERNEL) / stride + 1;
    let cols = g.im2col(x, KERNEL, stride, 1)?;
    let out = g.matmul(cols, weight)?;
    let b_row = g.reshape(bias, &[1, ws[1]])?;
    let b = g.broadcast_to(b_row, &[ho * wo, ws[1]])?;
    let out = g.add(out, b)?;
    g.reshape(out, &[ho, wo, ws[1]])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of the three stride-2 layers; the last is `C_v`.
    pub channels: [usize; 3],
}

impl BackboneConfig {
    pub fn visual_channels(&self) -> usize {
        self.channels[2]
    }

    /// Output grid side for an `h×w` input.
    pub fn grid(&self, h: usize, w: usize) -> Result<usize> {
        if h != w || !h.is_multiple_of(TOTAL_STRIDE) {
            return Err(Error::Invalid(format!(
                "image {h}×{w} must be square with side divisible by {TOTAL_STRIDE}"
            )));
        }
        Ok(h / TOTAL_STRIDE)
    }
}

/// Three conv + ReLU layers, stride 2 each.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub prefix: String,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(prefix: impl Into<String>, cfg: BackboneConfig) -> Self {
        Self {
            prefix: prefix.into(),
            cfg,
        }
    }

    fn names(&self, layer: usize) -> (String, String) {
        (format!("{}.conv{layer}.w", self.prefix), format!("{}.conv{layer}.b", self.prefix))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitRng) {
        let mut c_in = self.cfg.in_channels;
        for (layer, &c_out) in self.cfg.channels.iter().enumerate() {
            let (w, b) = self.names(layer);
            store.insert(w, init::conv_weight(KERNEL, c_in, c_out, rng));
            store.insert(b, Tensor::zeros([c_out]));
            c_in = c_out;
        }
    }

    /// `[h×w×c_in] → [G×G×C_v]` with `G = h / 8`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[2] != self.cfg.in_channels {
            return Err(Error::shape("backbone input", &s, &[0, 0, self.cfg.in_channels]));
        }
        self.cfg.grid(s[0], s[1])?;
        let mut x = image;
        for layer in 0..3 {
            let (w, b) = self.names(layer);
            let (w, b) = (g.param(store, &w)?, g.param(store, &b)?);
            let y = conv2d(g, x, w, b, 2)?;
            x = g.relu(y)?;
        }
        Ok(x)
    }
}

/// Soft selection weights over the three backbones.
#[derive(Clone, Copy, Debug)]
pub struct TypeGate {
    pub logits: Var,
    /// `softmax(logits)`.
    pub weights: Var,
}

/// Stride-2 conv stem, ReLU, global mean pool, linear to three logits.
/// Reads the raw image, not the backbone outputs it gates.
#[derive(Clone, Debug)]
pub struct TypeClassifier {
    pub prefix: String,
    pub in_channels: usize,
    pub stem_channels: usize,
}

impl TypeClassifier {
    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitRng) {
        let p = &self.prefix;
        store.insert(format!("{p}.stem.w"), init::conv_weight(KERNEL, self.in_channels, self.stem_channels, rng));
        store.insert(format!("{p}.stem.b"), Tensor::zeros([self.stem_channels]));
        store.insert(format!("{p}.fc.w"), init::linear_weight(self.stem_channels, 3, rng));
        store.insert(format!("{p}.fc.b"), Tensor::zeros([3]));
    }

    pub fn classify_type(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<TypeGate> {
        let p = &self.prefix;
        let (w, b) = (g.param(store, &format!("{p}.stem.w"))?, g.param(store, &format!("{p}.stem.b"))?);
        let stem = conv2d(g, image, w, b, 2)?;
        let stem = g.relu(stem)?;
        let pooled = g.mean_over_axes(stem, &[0, 1])?;
        let (w, b) = (g.param(store, &format!("{p}.fc.w"))?, g.param(store, &format!("{p}.fc.b"))?);
        let logits = g.pointwise_channel_map(pooled, w, b)?;
        gate_from_logits(g, logits)
    }
}

pub fn gate_from_logits(g: &mut Graph, logits: Var) -> Result<TypeGate> {
    if g.shape(logits) != [3] {
        return Err(Error::shape("type gate", g.shape(logits), &[3]));
    }
    let weights = g.softmax_rows(logits)?;
    Ok(TypeGate { logits, weights })
}

/// `w₁·v_a + w₂·v_h + w₃·v_c`.
pub fn blend(g: &mut Graph, features: [Var; 3], weights: Var) -> Result<Var> {
    let shape = g.shape(features[0]).to_vec();
    for &f in &features[1..] {
        if g.shape(f) != shape.as_slice() {
            return Err(Error::shape("blend", &shape, g.shape(f)));
        }
    }
    if g.shape(weights) != [3] {
        return Err(Error::shape("blend weights", g.shape(weights), &[3]));
    }
    let mut acc: Option<Var> = None;
    for (l, &f) in features.iter().enumerate() {
        let w_l = g.index(weights, l)?;
        let term = g.mul_scalar(f, w_l)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three features"))
}

/// Per-cell `[x_tl, y_tl, x_ctr, y_ctr, x_br, y_br, w, h]` with coordinates
/// normalised to `[-1, 1]`; `x` follows columns, `y` rows.
pub fn spatial_map(grid: usize) -> Result<Tensor> {
    if grid == 0 {
        return Err(Error::Invalid("spatial map grid must be at least 1".into()));
    }
    let gf = grid as f64;
    let edge = |i: usize| -1.0 + 2.0 * i as f64 / gf;
    let mut data = Vec::with_capacity(grid * grid * 8);
    for r in 0..grid {
        for c in 0..grid {
            let (x0, x1) = (edge(c), edge(c + 1));
            let (y0, y1) = (edge(r), edge(r + 1));
            data.extend_from_slice(&[x0, y0, (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1, y1, 2.0 / gf, 2.0 / gf]);
        }
    }
    Tensor::new([grid, grid, 8], data)
}

/// The three backbone outputs and their blend.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures {
    pub per_type: [Var; 3],
    pub v: Var,
}

/// Three backbones plus the gating classifier.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub backbones: [Backbone; 3],
    pub classifier: TypeClassifier,
}

impl ImageEncoder {
    pub fn new(cfg: BackboneConfig, stem_channels: usize) -> Self {
        Self {
            backbones: ImageType::ALL.map(|t| Backbone::new(encoder_prefix(t), cfg)),
            classifier: TypeClassifier {
                prefix: "type_cls".into(),
                in_channels: cfg.in_channels,
                stem_channels,
            },
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitRng) {
        for b in &self.backbones {
            b.init(store, &mut rng.fork(&b.prefix));
        }
        self.classifier.init(store, &mut rng.fork("type_cls"));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<(VisualFeatures, TypeGate)> {
        let gate = self.classifier.classify_type(g, store, image)?;
        let mut per_type = [image; 3];
        for (slot, b) in per_type.iter_mut().zip(&self.backbones) {
            *slot = b.forward(g, store, image)?;
        }
        let v = blend(g, per_type, gate.weights)?;
        Ok((VisualFeatures { per_type, v }, gate))
    }
}

/// Parameter-name prefix of the backbone for `t`.
pub fn encoder_prefix(t: ImageType) -> String {
    format!("enc.{}", t.name())
}
