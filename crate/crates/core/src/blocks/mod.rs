//! The ASBA reconstruction network: two branches of MP groups over the
//! sparse magnitude and phase inputs, upscaled along the B-line.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Forward, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod ars;
mod asba;
mod bpa;
mod ffn;
mod fusion;
mod rcab;

pub use ars::ArsBlock;
pub use asba::{Asba, AsbaOutput};
pub use bpa::{bline_attention, BpaBlock};
pub use ffn::FfnBlock;
pub use fusion::FusionBlock;
pub use rcab::{MagnitudeModule, Rcab};

/// Layer norm epsilon used by every block.
pub const LN_EPS: f64 = 1e-5;

/// Network hyperparameters. The paper preset is `4/6/60`; the desk preset is
/// sized for CPU training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// MP group count.
    pub groups: usize,
    /// Layers per magnitude/phase module.
    pub layers: usize,
    /// Channels per branch.
    pub channels: usize,
    /// Sparsity stride.
    pub delta: usize,
    /// SSM state dimension.
    pub ssm_state: usize,
    /// Attention head count.
    pub heads: usize,
    /// FFN expansion factor.
    pub ffn_expand: usize,
    /// Channel-attention reduction inside RCAB.
    pub ca_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(8)
    }
}

impl ModelConfig {
    /// Configuration the paper reports: 4 MP groups, 6 layers, 60 channels.
    pub fn paper(delta: usize) -> Self {
        Self {
            groups: 4,
            layers: 6,
            channels: 60,
            delta,
            ssm_state: 16,
            heads: 6,
            ffn_expand: 2,
            ca_reduction: 4,
        }
    }

    /// Small preset that trains in minutes on a CPU.
    pub fn desk(delta: usize) -> Self {
        Self {
            groups: 2,
            layers: 2,
            channels: 16,
            delta,
            ssm_state: 8,
            heads: 4,
            ffn_expand: 2,
            ca_reduction: 4,
        }
    }

    /// Minimal configuration for gradient checks and overfit tests.
    pub fn tiny(delta: usize) -> Self {
        Self {
            groups: 1,
            layers: 1,
            channels: 4,
            delta,
            ssm_state: 2,
            heads: 2,
            ffn_expand: 2,
            ca_reduction: 2,
        }
    }

    /// Inner width of the selective-scan path.
    pub fn inner_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 || self.layers < 1 {
            return Err(Error::Config("groups and layers must be >= 1".into()));
        }
        if self.channels < 1 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} must be divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.channels % self.ca_reduction != 0 {
            return Err(Error::Config(format!(
                "channels {} must be divisible by ca_reduction {}",
                self.channels, self.ca_reduction
            )));
        }
        if !matches!(self.delta, 1 | 2 | 4 | 8 | 16) {
            return Err(Error::Config(format!(
                "delta must be one of 1, 2, 4, 8, 16, got {}",
                self.delta
            )));
        }
        if self.ssm_state < 1 || self.ffn_expand < 1 {
            return Err(Error::Config(
                "ssm_state and ffn_expand must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Convolution parameter pair used by every block.
pub(crate) struct Conv2dP {
    w: ParamId,
    b: ParamId,
}

impl Conv2dP {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        cout: usize,
        cin: usize,
        kd: usize,
        kw: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let weight = if zero_init {
            Tensor::zeros(vec![cout, cin, kd, kw])
        } else {
            init.trunc_normal(vec![cout, cin, kd, kw], 0.02)
        };
        Ok(Self {
            w: store.register(format!("{prefix}.weight"), weight)?,
            b: store.register(format!("{prefix}.bias"), Tensor::zeros(vec![cout]))?,
        })
    }

    pub(crate) fn apply<T: Scalar>(&self, fx: &Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        x.conv2d(&fx.param(self.w), Some(&fx.param(self.b)))
    }
}

/// Layer norm scale/shift pair.
pub(crate) struct NormP {
    gamma: ParamId,
    beta: ParamId,
}

impl NormP {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.register(
                format!("{prefix}.gamma"),
                Tensor::full(vec![channels], T::one()),
            )?,
            beta: store.register(format!("{prefix}.beta"), Tensor::zeros(vec![channels]))?,
        })
    }

    pub(crate) fn apply<T: Scalar>(&self, fx: &Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(&fx.param(self.gamma), &fx.param(self.beta), LN_EPS)
    }
}
