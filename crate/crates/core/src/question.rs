//! Question side: vocabulary, fixed-length padding, the two-half word
//! embedding and the LSTM that produces one hidden state per word.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{init, lstm_step, Graph, LstmNames, ParamStore, SplitRng, Tensor, Var};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Dense token ids; `0` is padding and `1` unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `words` in order, after the two reserved
    /// tokens. Duplicates keep their first id.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD_TOKEN, UNK_TOKEN] {
            v.push(w);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Truncates to `l_w` ids and right-pads with [`PAD_ID`]. Returns the ids
    /// and the number of real tokens kept.
    pub fn tokenize_pad<S: AsRef<str>>(&self, words: &[S], l_w: usize) -> (Vec<usize>, usize) {
        let true_length = words.len().min(l_w);
        let mut ids: Vec<usize> = words[..true_length].iter().map(|w| self.id(w.as_ref())).collect();
        ids.resize(l_w, PAD_ID);
        (ids, true_length)
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Invalid(format!(
                "vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        let v = Self::new(&tokens[2..]);
        if v.len() != tokens.len() {
            return Err(Error::Invalid("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuestionConfig {
    pub vocab_size: usize,
    /// Width of each embedding half; words are `2·emb_half` wide.
    pub emb_half: usize,
    pub d_q: usize,
    pub l_w: usize,
}

impl QuestionConfig {
    pub fn d_emb(&self) -> usize {
        2 * self.emb_half
    }
}

/// Per-word question representation `q` (`[l_w × d_q]`).
#[derive(Clone, Copy, Debug)]
pub struct QuestionEmbedding {
    pub q: Var,
    pub true_length: usize,
}

/// Parameter names of the question encoder under a prefix.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub cfg: QuestionConfig,
    /// First half; may be replaced by an external frozen table.
    pub table_fixed: String,
    /// Second half; always learned.
    pub table_learned: String,
    pub lstm: LstmNames,
}

impl QuestionEncoder {
    pub fn new(prefix: &str, cfg: QuestionConfig) -> Self {
        Self {
            cfg,
            table_fixed: format!("{prefix}.emb_a"),
            table_learned: format!("{prefix}.emb_b"),
            lstm: LstmNames::new(&format!("{prefix}.lstm")),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitRng) {
        let QuestionConfig {
            vocab_size, emb_half, d_q, ..
        } = self.cfg;
        for name in [&self.table_fixed, &self.table_learned] {
            let mut t = init::glorot_uniform(&[vocab_size, emb_half], vocab_size, emb_half, rng);
            t.data_mut()[..emb_half].fill(0.0);
            store.insert(name, t);
        }
        self.lstm.init(store, self.cfg.d_emb(), d_q, rng);
    }

    /// Installs an external `[vocab × emb_half]` table as the first half and
    /// freezes it. The pad row is forced to zero.
    pub fn install_fixed_table(&self, store: &mut ParamStore, mut table: Tensor) -> Result<()> {
        let want = [self.cfg.vocab_size, self.cfg.emb_half];
        if table.shape() != want {
            return Err(Error::shape("install_fixed_table", table.shape(), &want));
        }
        table.data_mut()[..self.cfg.emb_half].fill(0.0);
        store.insert(&self.table_fixed, table);
        store.freeze(&self.table_fixed)
    }

    /// `[l_w × 2·emb_half]`: both halves concatenated per word; pad rows zero.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.len() != self.cfg.l_w {
            return Err(Error::shape("embed ids", &[ids.len()], &[self.cfg.l_w]));
        }
        let a = g.param(store, &self.table_fixed)?;
        let b = g.param(store, &self.table_learned)?;
        let ea = g.embed(a, ids, PAD_ID)?;
        let eb = g.embed(b, ids, PAD_ID)?;
        g.concat(&[ea, eb], 1)
    }

    /// Runs the LSTM over every row of `embeddings` from a zero state and
    /// stacks the hidden states.
    pub fn encode_question(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embeddings: Var,
        true_length: usize,
    ) -> Result<QuestionEmbedding> {
        let (l_w, d_emb, d_q) = (self.cfg.l_w, self.cfg.d_emb(), self.cfg.d_q);
        if g.shape(embeddings) != [l_w, d_emb] {
            return Err(Error::shape("encode_question", g.shape(embeddings), &[l_w, d_emb]));
        }
        let params = self.lstm.bind(g, store)?;
        let mut h = g.input(Tensor::zeros([d_q]));
        let mut c = g.input(Tensor::zeros([d_q]));
        let mut states = Vec::with_capacity(l_w);
        for t in 0..l_w {
            let x = g.slice(embeddings, 0, t, 1)?;
            let x = g.reshape(x, &[d_emb])?;
            (h, c) = lstm_step(g, x, h, c, &params)?;
            states.push(g.reshape(h, &[1, d_q])?);
        }
        let q = g.concat(&states, 0)?;
        Ok(QuestionEmbedding { q, true_length })
    }

    /// `embed` followed by `encode_question`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<QuestionEmbedding> {
        let true_length = ids.iter().position(|&i| i == PAD_ID).unwrap_or(ids.len());
        let e = self.embed(g, store, ids)?;
        self.encode_question(g, store, e, true_length)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn cfg() -> QuestionConfig {
        QuestionConfig {
            vocab_size: 10,
            emb_half: 3,
            d_q: 5,
            l_w: 6,
        }
    }

    fn encoder(cfg: QuestionConfig, seed: u64) -> (QuestionEncoder, ParamStore) {
        let enc = QuestionEncoder::new("q", cfg);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut SplitRng::new(seed));
        (enc, store)
    }

    #[test]
    fn tokenize_pad_examples() {
        let vocab = Vocabulary::new(["are", "lungs", "normal"]);
        let (ids, len) = vocab.tokenize_pad(&["are", "lungs", "normal"], 12);
        assert_eq!(len, 3);
        assert_eq!(ids.len(), 12);
        assert_eq!(&ids[..3], &[2, 3, 4]);
        assert!(ids[3..].iter().all(|&i| i == PAD_ID));

        let words: Vec<String> = (0..14).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::new(&words);
        let (ids, len) = vocab.tokenize_pad(&words, 12);
        assert_eq!(len, 12);
        assert_eq!(ids, (2..14).collect::<Vec<_>>());

        let (ids, len) = vocab.tokenize_pad::<&str>(&[], 12);
        assert_eq!(len, 0);
        assert_eq!(ids, vec![PAD_ID; 12]);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let vocab = Vocabulary::new(["a"]);
        assert_eq!(vocab.id("zzz"), UNK_ID);
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let vocab = Vocabulary::new(["liver", "brain", "lung"]);
        let text = vocab.to_text();
        assert_eq!(text.lines().nth(3), Some("brain"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), vocab);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    #[test]
    fn embed_pad_is_zero_and_repeats_match() {
        let (enc, store) = encoder(cfg(), 1);
        let mut g = Graph::new();
        let e = enc.embed(&mut g, &store, &[4, 7, 4, 0, 0, 0]).unwrap();
        let t = g.value(e);
        assert_eq!(t.shape(), &[6, 6]);
        assert_eq!(&t.data()[0..6], &t.data()[12..18]);
        assert!(t.data()[18..].iter().all(|&v| v == 0.0));
        assert!(t.data()[0..6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let (enc, store) = encoder(cfg(), 1);
        let mut g = Graph::new();
        assert!(matches!(
            enc.embed(&mut g, &store, &[10, 0, 0, 0, 0, 0]),
            Err(Error::Index { index: 10, .. })
        ));
    }

    #[test]
    fn embedding_tables_pass_grad_check() {
        let cfg = QuestionConfig { l_w: 2, ..cfg() };
        let (enc, mut store) = encoder(cfg, 2);
        let report = grad_check(
            &mut store,
            |g, s| {
                let e = enc.embed(g, s, &[3, 5])?;
                let y = g.tanh(e)?;
                let y = g.mul(y, y)?;
                g.sum_all(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        let table = report.params.iter().find(|p| p.name == "q.emb_a").unwrap();
        assert_eq!(table.checked, 30);
    }

    #[test]
    fn pad_rows_get_no_gradient() {
        let (enc, store) = encoder(cfg(), 3);
        let mut g = Graph::new();
        let e = enc.embed(&mut g, &store, &[2, 0, 0, 0, 0, 0]).unwrap();
        let l = g.sum_all(e).unwrap();
        let grads = g.backward(l).unwrap();
        let ga = grads.get("q.emb_a").unwrap();
        assert!(ga.data()[..3].iter().all(|&v| v == 0.0));
        assert!(ga.data()[6..9].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_pad_with_zero_recurrent_weights_gives_zero() {
        let (enc, mut store) = encoder(cfg(), 4);
        store.get_mut(&enc.lstm.w_hidden).unwrap().data_mut().fill(0.0);
        store.get_mut(&enc.lstm.bias).unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let qe = enc.forward(&mut g, &store, &[PAD_ID; 6]).unwrap();
        assert_eq!(qe.true_length, 0);
        assert!(g.value(qe.q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes() {
        for (l_w, d_q) in [(6, 64), (12, 1024)] {
            let cfg = QuestionConfig {
                vocab_size: 20,
                emb_half: if d_q == 1024 { 200 } else { 16 },
                d_q,
                l_w,
            };
            let (enc, store) = encoder(cfg, 5);
            let mut ids = vec![PAD_ID; l_w];
            ids[0] = 3;
            ids[1] = 4;
            let mut g = Graph::new();
            let qe = enc.forward(&mut g, &store, &ids).unwrap();
            assert_eq!(g.shape(qe.q), &[l_w, d_q]);
            assert_eq!(qe.true_length, 2);
        }
    }

    #[test]
    fn consistent_vocabulary_permutation_leaves_q_unchanged() {
        let cfg = cfg();
        let (enc, store) = encoder(cfg, 6);
        // Swap ids 3 and 8 in both tables and in the question.
        let mut permuted = store.clone();
        for name in [&enc.table_fixed, &enc.table_learned] {
            let t = permuted.get_mut(name).unwrap().data_mut();
            for c in 0..cfg.emb_half {
                t.swap(3 * cfg.emb_half + c, 8 * cfg.emb_half + c);
            }
        }
        let run = |s: &ParamStore, ids: &[usize]| {
            let mut g = Graph::new();
            let qe = enc.forward(&mut g, s, ids).unwrap();
            g.value(qe.q).clone()
        };
        let a = run(&store, &[3, 5, 8, 0, 0, 0]);
        let b = run(&permuted, &[8, 5, 3, 0, 0, 0]);
        assert!(a.bit_eq(&b));
        assert!(a.bit_eq(&run(&store, &[3, 5, 8, 0, 0, 0])));
    }

    #[test]
    fn fixed_table_is_frozen_with_zero_pad() {
        let (enc, mut store) = encoder(cfg(), 7);
        let table = Tensor::full([10, 3], 0.5);
        enc.install_fixed_table(&mut store, table).unwrap();
        assert!(store.is_frozen("q.emb_a"));
        assert_eq!(&store.get("q.emb_a").unwrap().data()[..4], &[0.0, 0.0, 0.0, 0.5]);
        assert!(enc.install_fixed_table(&mut store, Tensor::zeros([9, 3])).is_err());
    }
}
