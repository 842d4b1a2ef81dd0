//! Multi-layer bidirectional LSTM.
//!
//! Row-vector convention. With pre-activation `z = x·W_ih + h_prev·W_hh + b`
//! split into four `h`-wide blocks in the order input, forget, candidate,
//! output:
//!
//! ```text
//! i = σ(z_i)   f = σ(z_f)   g = tanh(z_g)   o = σ(z_o)
//! c_t = f ⊙ c_prev + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::{sigmoid, tanh, Tensor};
use crate::error::{Error, Result};

/// Borrowed weights of one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct CellWeights<'a> {
    /// `input × 4h`
    pub w_ih: &'a Tensor,
    /// `h × 4h`
    pub w_hh: &'a Tensor,
    /// `1 × 4h`
    pub bias: &'a Tensor,
}

/// One LSTM step on plain tensors.
pub fn lstm_cell(w: CellWeights<'_>, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
    let h = w.w_hh.rows();
    if w.w_hh.cols() != 4 * h || w.w_ih.cols() != 4 * h || w.bias.shape() != [1, 4 * h] {
        return Err(Error::Shape("LSTM weights are not 4h wide".into()));
    }
    if h_prev.shape() != [1, h] || c_prev.shape() != [1, h] {
        return Err(Error::Shape(format!("LSTM state must be 1x{h}")));
    }
    let mut z = x.matmul(w.w_ih)?;
    z.add_assign(&h_prev.matmul(w.w_hh)?);
    z.add_assign(w.bias);
    let block = |k: usize| Tensor::row_vector(z.data()[k * h..(k + 1) * h].to_vec());
    let (i, f, g, o) = (sigmoid(&block(0)), sigmoid(&block(1)), tanh(&block(2)), sigmoid(&block(3)));
    let c = f.zip_map(c_prev, |a, b| a * b)?.zip_map(&i.zip_map(&g, |a, b| a * b)?, |a, b| a + b)?;
    let h_t = o.zip_map(&tanh(&c), |a, b| a * b)?;
    Ok((h_t, c))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiLstmLayer {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

/// Stacked bidirectional LSTM; every layer outputs `2h` columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmStack {
    pub layers: Vec<BiLstmLayer>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmStack {
    /// Registers parameters named `{prefix}.l{layer}.{fw|bw}.{w_ih|w_hh|b}`.
    /// Weights are uniform in `±1/√h`; forget-gate biases start at 1.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || num_layers == 0 {
            return Err(Error::Config("LSTM needs hidden > 0 and at least one layer".into()));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_dim = if l == 0 { input_dim } else { 2 * hidden };
            let mut direction = |dir: &str| {
                let name = |p: &str| format!("{prefix}.l{l}.{dir}.{p}");
                let w_ih = store.add_uniform(name("w_ih"), in_dim, 4 * hidden, bound, rng);
                let w_hh = store.add_uniform(name("w_hh"), hidden, 4 * hidden, bound, rng);
                let bias = store.add_uniform(name("b"), 1, 4 * hidden, bound, rng);
                let b = store.get_mut(bias);
                for k in hidden..2 * hidden {
                    b.set(0, k, 1.0);
                }
                LstmDirection { w_ih, w_hh, bias }
            };
            let forward = direction("fw");
            let backward = direction("bw");
            layers.push(BiLstmLayer { forward, backward });
        }
        Ok(LstmStack {
            layers,
            input_dim,
            hidden,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Runs the stack over an `m × input_dim` node, returning `m × 2h`.
    pub fn forward(&self, g: &mut Graph<'_>, input: NodeId) -> Result<NodeId> {
        let [m, d] = g.value(input).shape();
        if m == 0 {
            return Err(Error::Shape("BiLSTM input has no positions".into()));
        }
        if d != self.input_dim {
            return Err(Error::Shape(format!("BiLSTM expects width {}, got {d}", self.input_dim)));
        }
        let mut x = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let fw = self.direction(g, &layer.forward, x, false)?;
            let bw = self.direction(g, &layer.backward, x, true)?;
            x = g.concat_cols(&[fw, bw])?;
            g.value(x).check_finite(&format!("BiLSTM layer {l} output"))?;
        }
        Ok(x)
    }

    fn direction(&self, g: &mut Graph<'_>, dir: &LstmDirection, x: NodeId, reverse: bool) -> Result<NodeId> {
        let h = self.hidden;
        let m = g.value(x).rows();
        let w_ih = g.param(dir.w_ih);
        let w_hh = g.param(dir.w_hh);
        let bias = g.param(dir.bias);
        let xw = g.matmul(x, w_ih)?;
        let xw = g.add_row(xw, bias)?;

        let mut outputs = vec![None; m];
        let mut state: Option<(NodeId, NodeId)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..m).rev()) } else { Box::new(0..m) };
        for t in order {
            let mut z = g.rows(xw, t, 1)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul(h_prev, w_hh)?;
                z = g.add(z, rec)?;
            }
            let zi = g.cols(z, 0, h)?;
            let zf = g.cols(z, h, h)?;
            let zg = g.cols(z, 2 * h, h)?;
            let zo = g.cols(z, 3 * h, h)?;
            let i = g.sigmoid(zi);
            let gg = g.tanh(zg);
            let o = g.sigmoid(zo);
            let ig = g.mul(i, gg)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let f = g.sigmoid(zf);
                    let fc = g.mul(f, c_prev)?;
                    g.add(fc, ig)?
                }
                None => ig,
            };
            let tc = g.tanh(c);
            let h_t = g.mul(o, tc)?;
            outputs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        let outputs: Vec<NodeId> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        g.concat_rows(&outputs)
    }

    /// The weights of one direction of one layer, for use with [`lstm_cell`].
    pub fn cell<'s>(&self, store: &'s ParamStore, layer: usize, reverse: bool) -> CellWeights<'s> {
        let dir = if reverse { &self.layers[layer].backward } else { &self.layers[layer].forward };
        CellWeights {
            w_ih: store.get(dir.w_ih),
            w_hh: store.get(dir.w_hh),
            bias: store.get(dir.bias),
        }
    }
}

/// Evaluates the stack on a plain `m × d` matrix.
pub fn bilstm_forward(store: &ParamStore, stack: &LstmStack, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let x = g.input(input.clone());
    let out = stack.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}
