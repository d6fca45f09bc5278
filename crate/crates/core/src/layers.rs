//! Parameterized building blocks: dense projections, 3x3 convolutions and
//! layer normalization, each registered in a [`ParamStore`] under a prefix.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Layer-norm epsilon used throughout the network.
pub const NORM_EPS: f64 = 1e-5;

/// Dense projection over the trailing axis; on `[H, W, C]` this is a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), kaiming_uniform(&[cin, cout], cin, rng)?)?;
        let b = if bias { Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout])?)?) } else { None };
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = self.b.map(|b| g.param(b)).transpose()?;
        g.linear(x, w, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        zero_param(store, self.w);
        if let Some(b) = self.b {
            zero_param(store, b);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.cin * self.cout + if self.b.is_some() { self.cout } else { 0 }
    }
}

/// 3x3 convolution with zero padding and bias.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), kaiming_uniform(&[3, 3, cin, cout], 9 * cin, rng)?)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout])?)?;
        Ok(Self { w, b, stride })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        g.conv3x3(x, w, Some(b), self.stride)
    }
}

/// Per-position normalization of the channel vector with learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])?)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

pub(crate) fn zero_param<T: Scalar>(store: &mut ParamStore<T>, id: ParamId) {
    store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
}
