//! Information exchange between the magnitude and phase branches.

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Forward, Init, ParamStore};
use crate::scalar::Scalar;

use super::Conv2dP;

/// Concatenate both branches, squeeze to `C` channels, expand back to `2C`,
/// split and add each half onto its branch. The expand conv starts at zero,
/// making the block a passthrough at init.
pub struct FusionBlock {
    squeeze: Conv2dP,
    expand: Conv2dP,
    channels: usize,
}

impl FusionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            squeeze: Conv2dP::new(
                store,
                init,
                &format!("{prefix}.squeeze"),
                channels,
                2 * channels,
                1,
                1,
                false,
            )?,
            expand: Conv2dP::new(
                store,
                init,
                &format!("{prefix}.expand"),
                2 * channels,
                channels,
                1,
                1,
                true,
            )?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        fx: &Forward<T>,
        m: &Var<T>,
        p: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let fused = self
            .expand
            .apply(fx, &self.squeeze.apply(fx, &Var::concat(&[m, p], 1)?)?.silu()?)?;
        let f_m = fused.narrow(1, 0, self.channels)?;
        let f_p = fused.narrow(1, self.channels, self.channels)?;
        Ok((m.add(&f_m)?, p.add(&f_p)?))
    }
}
