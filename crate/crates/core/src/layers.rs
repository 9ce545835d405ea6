//! Small building blocks shared by the encoders and the transducer decoder.

use rand::Rng;

use crate::error::Result;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// `y = x·W (+ b)` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), &[input, output], input, rng)?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[output]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.p(self.w))?;
        match self.b {
            Some(b) => y.add(p.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(&format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.p(self.gain), p.p(self.bias))
    }
}

/// Unidirectional LSTM with a linear output projection.
///
/// Gate layout along the `4·hidden` axis is input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub w_proj: ParamId,
    pub hidden: usize,
    pub proj: usize,
}

/// Recurrent state carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[1, hidden]),
            c: Tensor::zeros(&[1, hidden]),
        }
    }
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        proj: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_x = store.add_uniform(&format!("{name}.w_x"), &[input, 4 * hidden], input, rng)?;
        let w_h = store.add_uniform(&format!("{name}.w_h"), &[hidden, 4 * hidden], hidden, rng)?;
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(&format!("{name}.b"), bias)?;
        let w_proj = store.add_uniform(&format!("{name}.w_proj"), &[hidden, proj], hidden, rng)?;
        Ok(Lstm {
            w_x,
            w_h,
            b,
            w_proj,
            hidden,
            proj,
        })
    }

    /// One recurrence step given the input contribution `x·W_x + b` (`1 × 4h`).
    fn cell<'t>(
        &self,
        p: &Binder<'t, '_>,
        gates_x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.hidden;
        let gates = gates_x.add(h.matmul(p.p(self.w_h))?)?;
        let i = gates.slice_cols(0, n)?.sigmoid();
        let f = gates.slice_cols(n, n)?.sigmoid();
        let g = gates.slice_cols(2 * n, n)?.tanh();
        let o = gates.slice_cols(3 * n, n)?.sigmoid();
        let c = f.mul(c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        Ok((h, c))
    }

    /// Runs the layer over `x: T × input` from zero state; `reverse` processes
    /// time backwards and returns outputs in the original order.
    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let tape = p.tape();
        let x = if reverse { x.reverse_rows() } else { x };
        let steps = x.value().rows();
        let xw = x.matmul(p.p(self.w_x))?.add(p.p(self.b))?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            (h, c) = self.cell(p, xw.slice_rows(t, 1)?, h, c)?;
            hs.push(h);
        }
        let out = tape.concat_rows(&hs)?.matmul(p.p(self.w_proj))?;
        Ok(if reverse { out.reverse_rows() } else { out })
    }

    /// Advances a carried state by one input row; returns the projected output.
    pub fn step<'t>(
        &self,
        p: &Binder<'t, '_>,
        x: Var<'t>,
        state: &LstmState,
    ) -> Result<(Var<'t>, LstmState)> {
        let tape = p.tape();
        let gx = x.matmul(p.p(self.w_x))?.add(p.p(self.b))?;
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let (h, c) = self.cell(p, gx, h, c)?;
        let out = h.matmul(p.p(self.w_proj))?;
        Ok((
            out,
            LstmState {
                h: (*h.value()).clone(),
                c: (*c.value()).clone(),
            },
        ))
    }
}
