//! Feed-forward block built from 1-D convolutions along the A-line and
//! B-line axes.

use crate::autodiff::{ConvAxis, Var};
use crate::error::Result;
use crate::params::{Forward, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::NormP;

/// `x + conv1d_bline(silu(conv1d_depth(ln(x))))`, expanding channels by
/// `expand` in the middle. The contracting conv starts at zero.
pub struct FfnBlock {
    ln: NormP,
    depth_w: ParamId,
    depth_b: ParamId,
    bline_w: ParamId,
    bline_b: ParamId,
}

impl FfnBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        expand: usize,
    ) -> Result<Self> {
        let mid = channels * expand;
        Ok(Self {
            ln: NormP::new(store, &format!("{prefix}.ln"), channels)?,
            depth_w: store.register(
                format!("{prefix}.conv_depth.weight"),
                init.trunc_normal(vec![mid, channels, 3], 0.02),
            )?,
            depth_b: store.register(
                format!("{prefix}.conv_depth.bias"),
                Tensor::zeros(vec![mid]),
            )?,
            bline_w: store.register(
                format!("{prefix}.conv_bline.weight"),
                Tensor::zeros(vec![channels, mid, 3]),
            )?,
            bline_b: store.register(
                format!("{prefix}.conv_bline.bias"),
                Tensor::zeros(vec![channels]),
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, fx: &Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.ln.apply(fx, x)?;
        let h = h
            .conv1d(
                &fx.param(self.depth_w),
                Some(&fx.param(self.depth_b)),
                ConvAxis::Depth,
                false,
            )?
            .silu()?;
        let h = h.conv1d(
            &fx.param(self.bline_w),
            Some(&fx.param(self.bline_b)),
            ConvAxis::Width,
            false,
        )?;
        x.add(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn build(seed: u64) -> (ParamStore<f64>, FfnBlock) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let block = FfnBlock::new(&mut store, &mut init, "ffn", 4, 2).unwrap();
        (store, block)
    }

    #[test]
    fn zero_contract_conv_is_identity() {
        let (store, block) = build(1);
        let fx = Forward::new(&store, false);
        let x = fx.input(Tensor::from_fn(vec![2, 4, 3, 5], |i| (0.4 * i as f64).sin()));
        let y = block.forward(&fx, &x).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn shape_is_preserved() {
        let (mut store, block) = build(2);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains("conv_bline.weight") {
                let mut init = Init::new(4);
                let t = init.trunc_normal(store.get(id).shape().to_vec(), 0.05);
                store.set(id, t);
            }
        }
        let fx = Forward::new(&store, false);
        let x = fx.input(Tensor::from_fn(vec![1, 4, 6, 7], |i| i as f64 * 0.01));
        let y = block.forward(&fx, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_ne!(y.value().data(), x.value().data());
    }

    #[test]
    fn ffn_gradcheck() {
        let (mut store, block) = build(3);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains("conv_bline.weight") {
                let mut init = Init::new(8);
                let t = init.trunc_normal(store.get(id).shape().to_vec(), 0.05);
                store.set(id, t);
            }
        }
        let x = Tensor::from_fn(vec![1, 4, 4, 3], |i| (0.13 * i as f64).cos());
        gradcheck::check_with_params(
            &mut store,
            &[x],
            |fx, xs| {
                let y = block.forward(fx, &xs[0]).unwrap();
                y.mul(&y).unwrap().sum_all().unwrap()
            },
            1e-5,
            16,
            5,
        )
        .unwrap();
    }
}
