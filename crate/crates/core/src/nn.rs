//! Parameterized layers shared by the acoustic model, the LM and the fusion head.
//!
//! Weights follow the `[out, in]` convention; a layer named `foo` owns
//! `foo.weight` and (optionally) `foo.bias`.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let weight = store.insert_uniform(&format!("{name}.weight"), vec![out_dim, in_dim], in_dim, rng)?;
        let bias = if bias {
            Some(store.insert_uniform(&format!("{name}.bias"), vec![out_dim], in_dim, rng)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let (out_dim, in_dim) = store.get(weight).matrix_dims();
        let bias_name = format!("{name}.bias");
        let bias = store.contains(&bias_name).then(|| store.id(&bias_name)).transpose()?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.affine(x, w, b)
    }
}

/// LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let w_ih = store.insert_uniform(&format!("{name}.w_ih"), vec![4 * hidden, input], hidden, rng)?;
        let w_hh = store.insert_uniform(&format!("{name}.w_hh"), vec![4 * hidden, hidden], hidden, rng)?;
        let bias = store.insert_uniform(&format!("{name}.bias"), vec![4 * hidden], hidden, rng)?;
        Ok(LstmCell {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let w_ih = store.id(&format!("{name}.w_ih"))?;
        let w_hh = store.id(&format!("{name}.w_hh"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        let (four_h, input) = store.get(w_ih).matrix_dims();
        Ok(LstmCell {
            w_ih,
            w_hh,
            bias,
            input,
            hidden: four_h / 4,
        })
    }

    /// Input projection `x·W_ihᵀ + b` for all rows of `x` at once.
    pub fn project(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w_ih);
        let b = g.param(self.bias);
        g.affine(x, w, Some(b))
    }

    /// One step given an already projected input row.
    pub fn step_projected(&self, g: &mut Graph, x_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let w_hh = g.param(self.w_hh);
        let rec = g.affine(h, w_hh, None)?;
        let gates = g.add(x_proj, rec)?;
        let i = g.slice_cols(gates, 0, hd)?;
        let f = g.slice_cols(gates, hd, hd)?;
        let cand = g.slice_cols(gates, 2 * hd, hd)?;
        let o = g.slice_cols(gates, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let ct = g.tanh(c_new);
        let h_new = g.mul(o, ct)?;
        Ok((h_new, c_new))
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xp = self.project(g, x)?;
        self.step_projected(g, xp, h, c)
    }
}

/// Hidden and cell rows for each layer of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    pub fn top(&self) -> Var {
        *self.h.last().expect("non-empty stack")
    }
}

/// Graph-independent copy of an [`LstmState`], carried between per-step graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmValues {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmValues {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        LstmValues {
            h: vec![vec![0.0; hidden]; layers],
            c: vec![vec![0.0; hidden]; layers],
        }
    }

    pub fn capture(g: &Graph, state: &LstmState) -> Self {
        LstmValues {
            h: state.h.iter().map(|&v| g.value(v).to_vec()).collect(),
            c: state.c.iter().map(|&v| g.value(v).to_vec()).collect(),
        }
    }

    pub fn load(&self, g: &mut Graph) -> Result<LstmState> {
        let mut put = |rows: &[Vec<f64>]| -> Result<Vec<Var>> { rows.iter().map(|r| g.input(1, r.len(), r.clone())).collect() };
        let h = put(&self.h)?;
        let c = put(&self.c)?;
        Ok(LstmState { h, c })
    }

    pub fn top(&self) -> &[f64] {
        self.h.last().map_or(&[], Vec::as_slice)
    }
}

/// Unidirectional stack of LSTM cells named `{prefix}{i}`.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub cells: Vec<LstmCell>,
}

impl LstmStack {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, layers: usize, rng: &mut R) -> Result<Self> {
        let cells = (0..layers)
            .map(|i| LstmCell::init(store, &format!("{prefix}{i}"), if i == 0 { input } else { hidden }, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(LstmStack { cells })
    }

    pub fn bind(store: &ParamStore, prefix: &str, layers: usize) -> Result<Self> {
        let cells = (0..layers)
            .map(|i| LstmCell::bind(store, &format!("{prefix}{i}")))
            .collect::<Result<_>>()?;
        Ok(LstmStack { cells })
    }

    pub fn hidden(&self) -> usize {
        self.cells.last().map_or(0, |c| c.hidden)
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        let h = self.cells.iter().map(|c| g.zeros(1, c.hidden)).collect();
        let c = self.cells.iter().map(|c| g.zeros(1, c.hidden)).collect();
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: &LstmState) -> Result<LstmState> {
        let mut input = x;
        let mut h = Vec::with_capacity(self.cells.len());
        let mut c = Vec::with_capacity(self.cells.len());
        for (l, cell) in self.cells.iter().enumerate() {
            let (hn, cn) = cell.step(g, input, state.h[l], state.c[l])?;
            h.push(hn);
            c.push(cn);
            input = hn;
        }
        Ok(LstmState { h, c })
    }
}
