//! Small trainable building blocks shared by the model layers.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x·W + b` on row vectors; `W` is `d_in×d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        Self::init_with_std(store, name, d_in, d_out, bias, std, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[d_in, d_out], std, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = store.require(&format!("{name}.weight"))?;
        let shape = store.get(weight).shape().to_vec();
        Ok(Self {
            weight,
            bias: store.find(&format!("{name}.bias")),
            d_in: shape[0],
            d_out: shape[1],
        })
    }

    /// Accepts `n×d_in` or a `d_in` vector (returned as a `d_out` vector).
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let vector = x.shape().len() == 1;
        let rows = if vector { x.reshape(&[1, self.d_in])? } else { x };
        let mut y = rows.matmul(p[self.weight])?;
        if let Some(b) = self.bias {
            y = y.add(p[b])?;
        }
        if vector {
            y = y.reshape(&[self.d_out])?;
        }
        Ok(y)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::init(store, &format!("{name}.0"), d_in, hidden, true, rng),
            second: Linear::init(store, &format!("{name}.1"), hidden, d_out, true, rng),
        }
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            first: Linear::load(store, &format!("{name}.0"))?,
            second: Linear::load(store, &format!("{name}.1"))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.first.forward(p, x)?.relu();
        self.second.forward(p, h)
    }
}
