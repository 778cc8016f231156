//! Stacked LSTM built from tape primitives.

use rand::Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter layout of a stacked LSTM stored under `prefix`.
///
/// Layer `k` owns `{prefix}.l{k}.w_ih [4h×in]`, `{prefix}.l{k}.w_hh [4h×h]`
/// and `{prefix}.l{k}.bias [1×4h]`, with gate blocks ordered i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmSpec {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

/// Per-layer hidden and cell states, each `[rows × hidden]`.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    pub fn top(&self) -> Var {
        *self.h.last().expect("at least one layer")
    }
}

impl LstmSpec {
    fn names(&self, k: usize) -> [String; 3] {
        let p = &self.prefix;
        [
            format!("{p}.l{k}.w_ih"),
            format!("{p}.l{k}.w_hh"),
            format!("{p}.l{k}.bias"),
        ]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let h = self.hidden;
        for k in 0..self.layers {
            let input = if k == 0 { self.input } else { h };
            let [w_ih, w_hh, bias] = self.names(k);
            store.init_uniform(&w_ih, &[4 * h, input], input, rng);
            store.init_uniform(&w_hh, &[4 * h, h], h, rng);
            store.init_uniform(&bias, &[1, 4 * h], h, rng);
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<Lstm> {
        let layers = (0..self.layers)
            .map(|k| {
                let [w_ih, w_hh, bias] = self.names(k);
                Ok(LstmLayer {
                    w_ih: tape.param(store, &w_ih)?,
                    w_hh: tape.param(store, &w_hh)?,
                    bias: tape.param(store, &bias)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Lstm {
            layers,
            hidden: self.hidden,
        })
    }
}

/// One LSTM cell update over a batch of rows.
pub fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, p: &LstmLayer) -> Result<(Var, Var)> {
    let hidden = tape.value(h).cols();
    let zx = tape.linear(x, p.w_ih)?;
    let zh = tape.linear(h, p.w_hh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, p.bias)?;
    let i = tape.slice_cols(z, 0, hidden)?;
    let f = tape.slice_cols(z, hidden, hidden)?;
    let g = tape.slice_cols(z, 2 * hidden, hidden)?;
    let o = tape.slice_cols(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

impl Lstm {
    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> LstmState {
        let z = tape.constant(Tensor::zeros(&[rows, self.hidden]));
        LstmState {
            h: vec![z; self.layers.len()],
            c: vec![z; self.layers.len()],
        }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, state: &LstmState) -> Result<LstmState> {
        let mut input = x;
        let mut h = Vec::with_capacity(self.layers.len());
        let mut c = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let (hk, ck) = lstm_cell(tape, input, state.h[k], state.c[k], layer)?;
            h.push(hk);
            c.push(ck);
            input = hk;
        }
        Ok(LstmState { h, c })
    }

    /// Keeps the rows `idx` of every state tensor (beam reordering).
    pub fn select_rows(tape: &mut Tape, state: &LstmState, idx: &[usize]) -> Result<LstmState> {
        let pick = |tape: &mut Tape, vs: &[Var]| -> Result<Vec<Var>> {
            vs.iter().map(|&v| tape.gather_rows(v, idx.to_vec())).collect()
        };
        Ok(LstmState {
            h: pick(tape, &state.h)?,
            c: pick(tape, &state.c)?,
        })
    }
}
