//! Dense building blocks shared by the encoder, interaction stack and heads.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::optim::{init_uniform, ParamId, ParamStore};
use crate::tape::{Graph, Var};

/// Affine map over the last axis of any-rank input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, &[fan_in, fan_out], fan_in))?;
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, &[fan_out], fan_in))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape: Vec<usize> = g.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, *shape.last().unwrap()])?
        };
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(flat, w)?;
        let y = g.add_bias(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.fan_out;
            g.reshape(y, &out)
        }
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.0"), fan_in, hidden)?,
            output: Linear::new(store, rng, &format!("{name}.1"), hidden, fan_out)?,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.hidden.num_scalars() + self.output.num_scalars()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.output.forward(g, store, h)
    }
}
