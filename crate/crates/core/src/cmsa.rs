//! Cross-modal self-attention fusion.
//!
//! Every (word, row, column) position of the multimodal map carries the
//! concatenation `[v(r,c), s(r,c), q(i)]`. A glimpse projects that map to
//! queries, keys and values with per-position affine maps, attends over all
//! `N = l_w·G·G` positions with `softmax(Q Kᵀ)`, and maps the attended values
//! back to the map width. Glimpses are chained; the original map is added to
//! the last glimpse's output, mean-pooled over the grid, and projected to the
//! question width.

use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamStore, SplitRng, Tensor, Var};

/// Channels of the spatial map.
pub const SPATIAL_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CmsaConfig {
    pub l_w: usize,
    pub grid: usize,
    pub c_v: usize,
    pub d_q: usize,
    pub qkv_channels: usize,
    pub glimpses: usize,
    /// Divide attention logits by `sqrt(qkv_channels)`.
    pub scaled_attention: bool,
}

impl CmsaConfig {
    /// Config with `qkv_channels = d_f / 2` and unscaled attention.
    pub fn new(l_w: usize, grid: usize, c_v: usize, d_q: usize, glimpses: usize) -> Self {
        let d_f = c_v + SPATIAL_CHANNELS + d_q;
        Self {
            l_w,
            grid,
            c_v,
            d_q,
            qkv_channels: (d_f / 2).max(1),
            glimpses,
            scaled_attention: false,
        }
    }

    /// Width of the multimodal map.
    pub fn d_f(&self) -> usize {
        self.c_v + SPATIAL_CHANNELS + self.d_q
    }

    /// Number of attended positions.
    pub fn positions(&self) -> usize {
        self.l_w * self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.qkv_channels == 0 || self.glimpses == 0 || self.l_w == 0 || self.grid == 0 {
            return Err(Error::Invalid(format!("invalid CMSA config {self:?}")));
        }
        Ok(())
    }
}

/// One glimpse's attention intermediates, `Q/K/V: [N×qkv]`, `A: [N×N]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPass {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub a: Var,
    pub out: Var,
}

/// Intermediate values of one fusion forward pass.
#[derive(Clone, Debug)]
pub struct CmsaState {
    /// `[l_w×G×G×d_f]`
    pub f: Var,
    pub passes: Vec<AttentionPass>,
    /// Output of the last glimpse, `[l_w×G×G×d_f]`.
    pub f_prime: Var,
    /// Grid mean of `F′ + F`, `[l_w×d_f]`.
    pub pooled: Var,
    /// Pooled map projected to `[l_w×d_q]`.
    pub f_hat: Var,
}

impl CmsaState {
    /// Named copies of every intermediate for dumping to a tensor bundle.
    pub fn named_tensors(&self, g: &Graph) -> Vec<(String, Tensor)> {
        let mut out = vec![("F".to_string(), g.value(self.f).clone())];
        for (k, p) in self.passes.iter().enumerate() {
            for (name, v) in [("Q", p.q), ("K", p.k), ("V", p.v), ("A", p.a)] {
                out.push((format!("glimpse{k}.{name}"), g.value(v).clone()));
            }
        }
        out.push(("F_prime".into(), g.value(self.f_prime).clone()));
        out.push(("F_pooled".into(), g.value(self.pooled).clone()));
        out.push(("F_hat".into(), g.value(self.f_hat).clone()));
        out
    }

    /// Largest `|Σ_j A_ij − 1|` over every glimpse.
    pub fn max_row_sum_deviation(&self, g: &Graph) -> f64 {
        self.passes
            .iter()
            .map(|p| row_sum_deviation(g.value(p.a)))
            .fold(0.0, f64::max)
    }
}

pub fn row_sum_deviation(a: &Tensor) -> f64 {
    let n = *a.shape().last().unwrap_or(&1);
    a.data()
        .chunks(n)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// `F[i, r, c, :] = concat(v[r, c, :], s[r, c, :], q[i, :])`.
pub fn build_multimodal_map(g: &mut Graph, v: Var, s: Var, q: Var) -> Result<Var> {
    let (vs, ss, qs) = (g.shape(v).to_vec(), g.shape(s).to_vec(), g.shape(q).to_vec());
    if vs.len() != 3 || vs[0] != vs[1] {
        return Err(Error::shape("multimodal map visual", &vs, &ss));
    }
    let grid = vs[0];
    if ss != [grid, grid, SPATIAL_CHANNELS] {
        return Err(Error::shape("multimodal map spatial", &vs, &ss));
    }
    let [l_w, d_q] = *qs.as_slice() else {
        return Err(Error::shape("multimodal map question", &vs, &qs));
    };
    let grid_part = g.concat(&[v, s], 2)?;
    let width = vs[2] + SPATIAL_CHANNELS;
    let grid_part = g.reshape(grid_part, &[1, grid, grid, width])?;
    let grid_part = g.broadcast_to(grid_part, &[l_w, grid, grid, width])?;
    let words = g.reshape(q, &[l_w, 1, 1, d_q])?;
    let words = g.broadcast_to(words, &[l_w, grid, grid, d_q])?;
    g.concat(&[grid_part, words], 3)
}

/// Parameter names for one glimpse.
#[derive(Clone, Debug)]
pub struct GlimpseNames {
    pub query: (String, String),
    pub key: (String, String),
    pub value: (String, String),
    pub out: (String, String),
}

impl GlimpseNames {
    fn new(prefix: &str, k: usize) -> Self {
        let pair = |m: &str| (format!("{prefix}.g{k}.{m}.w"), format!("{prefix}.g{k}.{m}.b"));
        Self {
            query: pair("q"),
            key: pair("k"),
            value: pair("v"),
            out: pair("out"),
        }
    }
}

/// Bound parameters of one glimpse.
#[derive(Clone, Copy, Debug)]
pub struct GlimpseParams {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub out: (Var, Var),
}

/// One self-attention glimpse over an `[l_w×G×G×d_f]` map; output has the
/// same shape.
pub fn self_attention_pass(g: &mut Graph, f_in: Var, p: &GlimpseParams, scaled: bool) -> Result<AttentionPass> {
    let shape = g.shape(f_in).to_vec();
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("attention input must be rank 4, got {shape:?}")));
    }
    let d_f = shape[3];
    let n = shape[..3].iter().product::<usize>();
    let flat = g.reshape(f_in, &[n, d_f])?;
    let q = g.pointwise_channel_map(flat, p.query.0, p.query.1)?;
    let k = g.pointwise_channel_map(flat, p.key.0, p.key.1)?;
    let v = g.pointwise_channel_map(flat, p.value.0, p.value.1)?;
    let qkv = g.shape(q)[1];

    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt).map_err(attention_hint)?;
    let logits = if scaled {
        g.scale(logits, 1.0 / (qkv as f64).sqrt()).map_err(attention_hint)?
    } else {
        logits
    };
    let a = g.softmax_rows(logits).map_err(attention_hint)?;
    debug_assert!(row_sum_deviation(g.value(a)) <= 1e-9, "attention rows must sum to one");

    let mid = g.matmul(a, v)?;
    let out = g.pointwise_channel_map(mid, p.out.0, p.out.1)?;
    if g.shape(out)[1] != d_f {
        return Err(Error::shape("attention output map", g.shape(out), &[n, d_f]));
    }
    let out = g.reshape(out, &shape)?;
    Ok(AttentionPass { q, k, v, a, out })
}

fn attention_hint(e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFinite {
            op: "attention logits",
            hint: Some("enable scaled_attention"),
        },
        other => other,
    }
}

/// CMSA fusion module: glimpses plus the final projection.
#[derive(Clone, Debug)]
pub struct Cmsa {
    pub cfg: CmsaConfig,
    pub glimpses: Vec<GlimpseNames>,
    pub proj: (String, String),
}

impl Cmsa {
    pub fn new(prefix: &str, cfg: CmsaConfig) -> Self {
        Self {
            cfg,
            glimpses: (0..cfg.glimpses).map(|k| GlimpseNames::new(prefix, k)).collect(),
            proj: (format!("{prefix}.proj.w"), format!("{prefix}.proj.b")),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitRng) {
        let (d_f, qkv, d_q) = (self.cfg.d_f(), self.cfg.qkv_channels, self.cfg.d_q);
        let mut linear = |store: &mut ParamStore, (w, b): &(String, String), fan_in: usize, fan_out: usize| {
            store.insert(w, init::linear_weight(fan_in, fan_out, rng));
            store.insert(b, Tensor::zeros([fan_out]));
        };
        for gl in &self.glimpses {
            linear(store, &gl.query, d_f, qkv);
            linear(store, &gl.key, d_f, qkv);
            linear(store, &gl.value, d_f, qkv);
            linear(store, &gl.out, qkv, d_f);
        }
        linear(store, &self.proj, d_f, d_q);
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore, names: &GlimpseNames) -> Result<GlimpseParams> {
        let mut pair = |(w, b): &(String, String)| -> Result<(Var, Var)> { Ok((g.param(store, w)?, g.param(store, b)?)) };
        Ok(GlimpseParams {
            query: pair(&names.query)?,
            key: pair(&names.key)?,
            value: pair(&names.value)?,
            out: pair(&names.out)?,
        })
    }

    /// Fuses `v [G×G×C_v]`, `s [G×G×8]`, `q [l_w×d_q]` into `[l_w×d_q]`.
    pub fn cmsa_fuse(&self, g: &mut Graph, store: &ParamStore, v: Var, s: Var, q: Var) -> Result<CmsaState> {
        self.cfg.validate()?;
        let c = &self.cfg;
        let expect_v = [c.grid, c.grid, c.c_v];
        if g.shape(v) != expect_v {
            return Err(Error::shape("cmsa_fuse visual", g.shape(v), &expect_v));
        }
        if g.shape(q) != [c.l_w, c.d_q] {
            return Err(Error::shape("cmsa_fuse question", g.shape(q), &[c.l_w, c.d_q]));
        }
        let f = build_multimodal_map(g, v, s, q)?;
        let mut x = f;
        let mut passes = Vec::with_capacity(self.glimpses.len());
        for names in &self.glimpses {
            let p = self.bind(g, store, names)?;
            let pass = self_attention_pass(g, x, &p, c.scaled_attention)?;
            x = pass.out;
            passes.push(pass);
        }
        let f_prime = x;
        let residual = g.add(f_prime, f)?;
        let pooled = g.mean_over_axes(residual, &[1, 2])?;
        let (w, b) = (g.param(store, &self.proj.0)?, g.param(store, &self.proj.1)?);
        let f_hat = g.pointwise_channel_map(pooled, w, b)?;
        Ok(CmsaState {
            f,
            passes,
            f_prime,
            pooled,
            f_hat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::spatial_map;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn rand(shape: &[usize], rng: &mut SplitRng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
    }

    struct Inputs {
        v: Tensor,
        s: Tensor,
        q: Tensor,
    }

    fn inputs(cfg: &CmsaConfig, rng: &mut SplitRng) -> Inputs {
        Inputs {
            v: rand(&[cfg.grid, cfg.grid, cfg.c_v], rng),
            s: spatial_map(cfg.grid).unwrap(),
            q: rand(&[cfg.l_w, cfg.d_q], rng),
        }
    }

    fn module(cfg: CmsaConfig, seed: u64) -> (Cmsa, ParamStore) {
        let m = Cmsa::new("cmsa", cfg);
        let mut store = ParamStore::new();
        let mut rng = SplitRng::new(seed);
        m.init(&mut store, &mut rng);
        // Random biases so the oracle exercises every term.
        let names: Vec<String> = store.names().filter(|n| n.ends_with(".b")).cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|b| *b = rng.uniform(-0.3, 0.3));
        }
        (m, store)
    }

    fn run(m: &Cmsa, store: &ParamStore, x: &Inputs) -> (Graph, CmsaState) {
        let mut g = Graph::new();
        let (v, s, q) = (g.input(x.v.clone()), g.input(x.s.clone()), g.input(x.q.clone()));
        let st = m.cmsa_fuse(&mut g, store, v, s, q).unwrap();
        (g, st)
    }

    // Naive oracle: explicit loops over positions and pairs.
    fn affine_rows(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..c_out)
                    .map(|o| b.data()[o] + (0..c_in).map(|c| row[c] * w.at(&[c, o])).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn oracle_pass(rows: &[Vec<f64>], store: &ParamStore, names: &GlimpseNames, scaled: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let get = |p: &(String, String)| (store.get(&p.0).unwrap(), store.get(&p.1).unwrap());
        let (qw, qb) = get(&names.query);
        let (kw, kb) = get(&names.key);
        let (vw, vb) = get(&names.value);
        let (ow, ob) = get(&names.out);
        let q = affine_rows(rows, qw, qb);
        let k = affine_rows(rows, kw, kb);
        let v = affine_rows(rows, vw, vb);
        let n = rows.len();
        let d = q[0].len();
        let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
        let mut attn = vec![vec![0.0; n]; n];
        let mut mid = vec![vec![0.0; d]; n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| scale * (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for j in 0..n {
                attn[i][j] = (logits[j] - max).exp() / z;
                for c in 0..d {
                    mid[i][c] += attn[i][j] * v[j][c];
                }
            }
        }
        (affine_rows(&mid, ow, ob), attn)
    }

    fn map_rows(x: &Inputs, cfg: &CmsaConfig) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for i in 0..cfg.l_w {
            for r in 0..cfg.grid {
                for c in 0..cfg.grid {
                    let mut row = Vec::new();
                    row.extend((0..cfg.c_v).map(|k| x.v.at(&[r, c, k])));
                    row.extend((0..SPATIAL_CHANNELS).map(|k| x.s.at(&[r, c, k])));
                    row.extend((0..cfg.d_q).map(|k| x.q.at(&[i, k])));
                    rows.push(row);
                }
            }
        }
        rows
    }

    #[test]
    fn multimodal_map_paper_shape() {
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros([7, 7, 512]));
        let s = g.input(spatial_map(7).unwrap());
        let q = g.input(Tensor::zeros([12, 1024]));
        let f = build_multimodal_map(&mut g, v, s, q).unwrap();
        assert_eq!(g.shape(f), &[12, 7, 7, 1544]);
    }

    #[test]
    fn multimodal_map_slices_are_constant() {
        let cfg = CmsaConfig::new(3, 2, 4, 5, 1);
        let x = inputs(&cfg, &mut SplitRng::new(1));
        let mut g = Graph::new();
        let (v, s, q) = (g.input(x.v.clone()), g.input(x.s.clone()), g.input(x.q.clone()));
        let f = build_multimodal_map(&mut g, v, s, q).unwrap();
        let f = g.value(f);
        let q_off = cfg.c_v + SPATIAL_CHANNELS;
        for i in 0..3 {
            for r in 0..2 {
                for c in 0..2 {
                    for k in 0..cfg.d_q {
                        assert_eq!(f.at(&[i, r, c, q_off + k]), x.q.at(&[i, k]));
                    }
                    for k in 0..cfg.c_v {
                        assert_eq!(f.at(&[i, r, c, k]), x.v.at(&[r, c, k]));
                    }
                    for k in 0..SPATIAL_CHANNELS {
                        assert_eq!(f.at(&[i, r, c, cfg.c_v + k]), x.s.at(&[r, c, k]));
                    }
                }
            }
        }
    }

    #[test]
    fn multimodal_map_rejects_mismatch() {
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros([3, 3, 4]));
        let s = g.input(spatial_map(2).unwrap());
        let q = g.input(Tensor::zeros([2, 5]));
        assert!(build_multimodal_map(&mut g, v, s, q).is_err());
    }

    #[test]
    fn zero_query_key_maps_give_uniform_attention() {
        let cfg = CmsaConfig::new(2, 2, 3, 4, 1);
        let (m, mut store) = module(cfg, 2);
        for name in [&m.glimpses[0].query.0, &m.glimpses[0].key.0] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = inputs(&cfg, &mut SplitRng::new(3));
        let (g, st) = run(&m, &store, &x);
        let n = cfg.positions();
        let a = g.value(st.passes[0].a);
        assert!(a.data().iter().all(|&p| (p - 1.0 / n as f64).abs() < 1e-15));

        let v = g.value(st.passes[0].v);
        let qkv = cfg.qkv_channels;
        let mean_v: Vec<f64> = (0..qkv).map(|c| (0..n).map(|i| v.at(&[i, c])).sum::<f64>() / n as f64).collect();
        let (ow, ob) = (store.get(&m.glimpses[0].out.0).unwrap(), store.get(&m.glimpses[0].out.1).unwrap());
        let expect = &affine_rows(&[mean_v], ow, ob)[0];
        let out = g.value(st.passes[0].out);
        for row in out.data().chunks(cfg.d_f()) {
            for (o, e) in row.iter().zip(expect) {
                assert!((o - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_value_rows_give_identical_outputs() {
        let cfg = CmsaConfig::new(2, 2, 3, 4, 1);
        let (m, mut store) = module(cfg, 4);
        store.get_mut(&m.glimpses[0].value.0).unwrap().data_mut().fill(0.0);
        let x = inputs(&cfg, &mut SplitRng::new(5));
        let (g, st) = run(&m, &store, &x);
        let out = g.value(st.passes[0].out);
        let first = &out.data()[..cfg.d_f()];
        for row in out.data().chunks(cfg.d_f()) {
            for (a, b) in row.iter().zip(first) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_pass_matches_loop_oracle() {
        let mut rng = SplitRng::new(6);
        for case in 0..20 {
            // N = l_w · G² ≤ 16
            let (l_w, grid) = [(3, 2), (1, 4), (4, 2), (12, 1), (2, 2)][case % 5];
            let mut cfg = CmsaConfig::new(l_w, grid, 1 + rng.below(4), 1 + rng.below(5), 1);
            cfg.scaled_attention = case % 4 == 3;
            let (m, store) = module(cfg, 100 + case as u64);
            let x = inputs(&cfg, &mut rng);
            let (g, st) = run(&m, &store, &x);
            let (expect_out, expect_attn) = oracle_pass(&map_rows(&x, &cfg), &store, &m.glimpses[0], cfg.scaled_attention);
            let out = g.value(st.passes[0].out);
            let a = g.value(st.passes[0].a);
            let n = cfg.positions();
            for i in 0..n {
                for j in 0..n {
                    assert!((a.at(&[i, j]) - expect_attn[i][j]).abs() < 1e-9);
                }
                for c in 0..cfg.d_f() {
                    assert!((out.data()[i * cfg.d_f() + c] - expect_out[i][c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn two_glimpses_match_scripted_composition() {
        let cfg = CmsaConfig::new(3, 2, 3, 4, 2);
        let (m, store) = module(cfg, 7);
        let x = inputs(&cfg, &mut SplitRng::new(8));
        let (g, st) = run(&m, &store, &x);

        let f_rows = map_rows(&x, &cfg);
        let (first, _) = oracle_pass(&f_rows, &store, &m.glimpses[0], false);
        let (second, _) = oracle_pass(&first, &store, &m.glimpses[1], false);
        let cells = cfg.grid * cfg.grid;
        let pooled: Vec<Vec<f64>> = (0..cfg.l_w)
            .map(|i| {
                (0..cfg.d_f())
                    .map(|c| (0..cells).map(|p| second[i * cells + p][c] + f_rows[i * cells + p][c]).sum::<f64>() / cells as f64)
                    .collect()
            })
            .collect();
        let (pw, pb) = (store.get(&m.proj.0).unwrap(), store.get(&m.proj.1).unwrap());
        let expect = affine_rows(&pooled, pw, pb);
        let f_hat = g.value(st.f_hat);
        assert_eq!(f_hat.shape(), &[3, 4]);
        for i in 0..cfg.l_w {
            for c in 0..cfg.d_q {
                assert!((f_hat.at(&[i, c]) - expect[i][c]).abs() < 1e-9);
            }
        }
        assert!(st.max_row_sum_deviation(&g) <= 1e-9);
    }

    #[test]
    fn zero_attention_output_leaves_pooled_input_map() {
        let cfg = CmsaConfig::new(2, 3, 3, 4, 2);
        let (m, mut store) = module(cfg, 9);
        let last = m.glimpses.last().unwrap();
        store.get_mut(&last.out.0).unwrap().data_mut().fill(0.0);
        store.get_mut(&last.out.1).unwrap().data_mut().fill(0.0);
        let x = inputs(&cfg, &mut SplitRng::new(10));
        let (g, st) = run(&m, &store, &x);
        let pooled = g.value(st.pooled);
        let cells = (cfg.grid * cfg.grid) as f64;
        let grid_mean = |t: &Tensor, k: usize| {
            (0..cfg.grid)
                .flat_map(|r| (0..cfg.grid).map(move |c| (r, c)))
                .map(|(r, c)| t.at(&[r, c, k]))
                .sum::<f64>()
                / cells
        };
        for i in 0..cfg.l_w {
            for k in 0..cfg.c_v {
                assert!((pooled.at(&[i, k]) - grid_mean(&x.v, k)).abs() < 1e-12);
            }
            for k in 0..SPATIAL_CHANNELS {
                assert!((pooled.at(&[i, cfg.c_v + k]) - grid_mean(&x.s, k)).abs() < 1e-12);
            }
            // Centres average to the origin.
            assert!(pooled.at(&[i, cfg.c_v + 2]).abs() < 1e-12);
            assert!(pooled.at(&[i, cfg.c_v + 3]).abs() < 1e-12);
            for k in 0..cfg.d_q {
                assert!((pooled.at(&[i, cfg.c_v + SPATIAL_CHANNELS + k]) - x.q.at(&[i, k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_permutation_permutes_attention_and_keeps_output() {
        let cfg = CmsaConfig::new(2, 2, 3, 4, 2);
        let (m, store) = module(cfg, 11);
        let x = inputs(&cfg, &mut SplitRng::new(12));
        // Cell permutation on the 2×2 grid: (0,0)->(1,1), (0,1)->(1,0), ...
        let perm = [3usize, 2, 0, 1];
        let permute = |t: &Tensor| {
            let ch = t.shape()[2];
            let mut out = t.clone();
            for (src, &dst) in perm.iter().enumerate() {
                out.data_mut()[dst * ch..(dst + 1) * ch].copy_from_slice(&t.data()[src * ch..(src + 1) * ch]);
            }
            out
        };
        let y = Inputs {
            v: permute(&x.v),
            s: permute(&x.s),
            q: x.q.clone(),
        };
        let (g1, s1) = run(&m, &store, &x);
        let (g2, s2) = run(&m, &store, &y);
        assert!(g1.value(s1.f_hat).max_abs_diff(g2.value(s2.f_hat)) < 1e-12);

        let cells = 4;
        let pos = |i: usize| (i / cells) * cells + perm[i % cells];
        let (a1, a2) = (g1.value(s1.passes[0].a), g2.value(s2.passes[0].a));
        let n = cfg.positions();
        for i in 0..n {
            for j in 0..n {
                assert!((a1.at(&[i, j]) - a2.at(&[pos(i), pos(j)])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_passes_grad_check() {
        for glimpses in [1, 2] {
            let cfg = CmsaConfig::new(3, 2, 3, 4, glimpses);
            let (m, mut store) = module(cfg, 13);
            let x = inputs(&cfg, &mut SplitRng::new(14));
            store.insert("v", x.v.clone());
            store.insert("q", x.q.clone());
            let report = grad_check(
                &mut store,
                |g, s| {
                    let (v, q) = (g.param(s, "v")?, g.param(s, "q")?);
                    let sp = g.input(x.s.clone());
                    let st = m.cmsa_fuse(g, s, v, sp, q)?;
                    let y = g.tanh(st.f_hat)?;
                    g.sum_all(y)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "glimpses {glimpses}: {:?}", report.worst());
        }
    }

    #[test]
    fn named_tensors_cover_every_intermediate() {
        let cfg = CmsaConfig::new(2, 2, 3, 4, 2);
        let (m, store) = module(cfg, 15);
        let x = inputs(&cfg, &mut SplitRng::new(16));
        let (g, st) = run(&m, &store, &x);
        let names: Vec<String> = st.named_tensors(&g).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 1 + 4 * 2 + 3);
        assert!(names.contains(&"glimpse1.A".to_string()));
    }
}
