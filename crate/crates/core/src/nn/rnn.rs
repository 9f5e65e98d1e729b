//! Recurrent layers over `(N, T, D)` sequences.

use candle_core::{Tensor, Var};

use super::ops::sigmoid;
use super::store::{Init, Path};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Gru,
    Lstm,
}

impl Cell {
    fn gates(self) -> usize {
        match self {
            Cell::Gru => 3,
            Cell::Lstm => 4,
        }
    }
}

/// One direction of a single-layer recurrent net.
///
/// Gate layout follows the usual `[r, z, n]` (GRU) and `[i, f, g, o]`
/// (LSTM) stacking of the input and hidden projections.
struct Direction {
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    hidden: usize,
    cell: Cell,
    reverse: bool,
}

impl Direction {
    fn new(p: &mut Path<'_>, cell: Cell, input: usize, hidden: usize, reverse: bool) -> Result<Self> {
        let g = cell.gates() * hidden;
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: p.param("w_ih", &[g, input], Init::Uniform { bound })?,
            w_hh: p.param("w_hh", &[g, hidden], Init::Uniform { bound })?,
            b_ih: p.param("b_ih", &[g], Init::Uniform { bound })?,
            b_hh: p.param("b_hh", &[g], Init::Uniform { bound })?,
            hidden,
            cell,
            reverse,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, d) = x.dims3()?;
        let hsz = self.hidden;
        // Input projections for every step at once.
        let xi = x
            .reshape((n * t, d))?
            .matmul(&self.w_ih.as_tensor().t()?)?
            .broadcast_add(self.b_ih.as_tensor())?
            .reshape((n, t, self.cell.gates() * hsz))?;
        let w_hh_t = self.w_hh.as_tensor().t()?;
        let mut h = Tensor::zeros((n, hsz), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outs: Vec<Tensor> = Vec::with_capacity(t);
        let steps: Vec<usize> = if self.reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for step in steps {
            let gi = xi.narrow(1, step, 1)?.squeeze(1)?;
            let gh = h.matmul(&w_hh_t)?.broadcast_add(self.b_hh.as_tensor())?;
            match self.cell {
                Cell::Gru => {
                    let r = sigmoid(&(gi.narrow(1, 0, hsz)? + gh.narrow(1, 0, hsz)?)?)?;
                    let z = sigmoid(&(gi.narrow(1, hsz, hsz)? + gh.narrow(1, hsz, hsz)?)?)?;
                    let cand = (gi.narrow(1, 2 * hsz, hsz)? + (r * gh.narrow(1, 2 * hsz, hsz)?)?)?.tanh()?;
                    // h' = (1 - z) * n + z * h = n + z * (h - n)
                    h = (&cand + (z * (&h - &cand)?)?)?;
                }
                Cell::Lstm => {
                    let g = (gi + gh)?;
                    let i = sigmoid(&g.narrow(1, 0, hsz)?)?;
                    let f = sigmoid(&g.narrow(1, hsz, hsz)?)?;
                    let gg = g.narrow(1, 2 * hsz, hsz)?.tanh()?;
                    let o = sigmoid(&g.narrow(1, 3 * hsz, hsz)?)?;
                    c = ((f * &c)? + (i * gg)?)?;
                    h = (o * c.tanh()?)?;
                }
            }
            outs.push(h.clone());
        }
        if self.reverse {
            outs.reverse();
        }
        Ok(Tensor::stack(&outs, 1)?)
    }
}

/// Single-layer recurrent net, optionally bidirectional; direction outputs
/// are concatenated on the feature axis.
pub struct Recurrent {
    forward: Direction,
    backward: Option<Direction>,
}

impl Recurrent {
    pub fn new(p: &mut Path<'_>, cell: Cell, input: usize, hidden: usize, bidirectional: bool) -> Result<Self> {
        let forward = Direction::new(&mut p.pp("fwd"), cell, input, hidden, false)?;
        let backward = if bidirectional {
            Some(Direction::new(&mut p.pp("bwd"), cell, input, hidden, true)?)
        } else {
            None
        };
        Ok(Self { forward, backward })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden * if self.backward.is_some() { 2 } else { 1 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.forward.forward(x)?;
        match &self.backward {
            Some(b) => Ok(Tensor::cat(&[f, b.forward(x)?], 2)?),
            None => Ok(f),
        }
    }
}
