use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamStore, SplitRng, Tensor, Var};

/// Parameter names of one LSTM cell. Gate blocks in the `4·hidden` axis are
/// ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmNames {
    pub w_input: String,
    pub w_hidden: String,
    pub bias: String,
}

impl LstmNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            w_input: format!("{prefix}.w_x"),
            w_hidden: format!("{prefix}.w_h"),
            bias: format!("{prefix}.b"),
        }
    }

    /// Glorot weights, zero biases except the forget block at 1.0.
    pub fn init(&self, store: &mut ParamStore, d_in: usize, hidden: usize, rng: &mut SplitRng) {
        store.insert(&self.w_input, init::linear_weight(d_in, 4 * hidden, rng));
        store.insert(&self.w_hidden, init::linear_weight(hidden, 4 * hidden, rng));
        let bias = Tensor::from_fn([4 * hidden], |i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 });
        store.insert(&self.bias, bias);
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<LstmParams> {
        Ok(LstmParams {
            w_input: g.param(store, &self.w_input)?,
            w_hidden: g.param(store, &self.w_hidden)?,
            bias: g.param(store, &self.bias)?,
        })
    }
}

/// LSTM weights bound into a graph: `w_input [d_in × 4h]`,
/// `w_hidden [h × 4h]`, `bias [4h]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

/// One recurrent update. `x_t` is `[d_in]`, states are `[h]`; returns
/// `(h_t, c_t)`.
pub fn lstm_step(g: &mut Graph, x_t: Var, h_prev: Var, c_prev: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let hidden = g.shape(p.w_hidden)[0];
    let d_in = g.shape(p.w_input)[0];
    if g.shape(x_t) != [d_in] {
        return Err(Error::shape("lstm_step input", g.shape(x_t), &[d_in]));
    }
    for state in [h_prev, c_prev] {
        if g.shape(state) != [hidden] {
            return Err(Error::shape("lstm_step state", g.shape(state), &[hidden]));
        }
    }
    if g.shape(p.w_hidden) != [hidden, 4 * hidden] || g.shape(p.w_input)[1] != 4 * hidden {
        return Err(Error::shape("lstm_step weights", g.shape(p.w_input), g.shape(p.w_hidden)));
    }

    let x_row = g.reshape(x_t, &[1, d_in])?;
    let h_row = g.reshape(h_prev, &[1, hidden])?;
    let from_x = g.matmul(x_row, p.w_input)?;
    let from_h = g.matmul(h_row, p.w_hidden)?;
    let pre = g.add(from_x, from_h)?;
    let pre = g.reshape(pre, &[4 * hidden])?;
    let pre = g.add(pre, p.bias)?;

    let i_gate = g.slice(pre, 0, 0, hidden)?;
    let f_gate = g.slice(pre, 0, hidden, hidden)?;
    let cand = g.slice(pre, 0, 2 * hidden, hidden)?;
    let o_gate = g.slice(pre, 0, 3 * hidden, hidden)?;
    let i_gate = g.sigmoid(i_gate)?;
    let f_gate = g.sigmoid(f_gate)?;
    let cand = g.tanh(cand)?;
    let o_gate = g.sigmoid(o_gate)?;

    let keep = g.mul(f_gate, c_prev)?;
    let write = g.mul(i_gate, cand)?;
    let c_t = g.add(keep, write)?;
    let c_act = g.tanh(c_t)?;
    let h_t = g.mul(o_gate, c_act)?;
    Ok((h_t, c_t))
}
