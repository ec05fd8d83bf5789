//! Residual channel attention blocks forming the magnitude branch.

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Forward, Init, ParamStore};
use crate::scalar::Scalar;

use super::Conv2dP;

/// `x + CA(conv3x3(relu(conv3x3(x))))` with squeeze-excite channel gating.
/// The second body conv starts at zero, so the block is an identity at init.
pub struct Rcab {
    conv1: Conv2dP,
    conv2: Conv2dP,
    ca_down: Conv2dP,
    ca_up: Conv2dP,
}

impl Rcab {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2dP::new(
                store,
                init,
                &format!("{prefix}.conv1"),
                channels,
                channels,
                3,
                3,
                false,
            )?,
            conv2: Conv2dP::new(
                store,
                init,
                &format!("{prefix}.conv2"),
                channels,
                channels,
                3,
                3,
                true,
            )?,
            ca_down: Conv2dP::new(
                store,
                init,
                &format!("{prefix}.ca_down"),
                channels / reduction,
                channels,
                1,
                1,
                false,
            )?,
            ca_up: Conv2dP::new(
                store,
                init,
                &format!("{prefix}.ca_up"),
                channels,
                channels / reduction,
                1,
                1,
                false,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, fx: &Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let body = self
            .conv2
            .apply(fx, &self.conv1.apply(fx, x)?.relu()?)?;
        let scale = self
            .ca_up
            .apply(fx, &self.ca_down.apply(fx, &body.global_avg_pool()?)?.relu()?)?
            .sigmoid()?;
        x.add(&body.mul(&scale)?)
    }
}

/// `layers` magnitude layers of two RCABs each.
pub struct MagnitudeModule {
    blocks: Vec<Rcab>,
}

impl MagnitudeModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        layers: usize,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(layers * 2);
        for l in 0..layers {
            for r in 0..2 {
                blocks.push(Rcab::new(
                    store,
                    init,
                    &format!("{prefix}.layer{l}.rcab{r}"),
                    channels,
                    reduction,
                )?);
            }
        }
        Ok(Self { blocks })
    }

    pub fn forward<T: Scalar>(&self, fx: &Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(fx, &h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::tensor::Tensor;

    fn build(channels: usize, reduction: usize, seed: u64) -> (ParamStore<f64>, Rcab) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let rcab = Rcab::new(&mut store, &mut init, "t", channels, reduction).unwrap();
        (store, rcab)
    }

    #[test]
    fn zero_body_is_identity() {
        // conv2 is zero-initialised, so a fresh block passes input through
        let (store, rcab) = build(4, 2, 1);
        let fx = Forward::new(&store, false);
        let x = fx.input(Tensor::from_fn(vec![1, 4, 5, 5], |i| (i as f64 * 0.13).sin()));
        let y = rcab.forward(&fx, &x).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn constant_input_stays_constant_per_channel_in_interior() {
        let (mut store, rcab) = build(4, 2, 7);
        // make the body non-trivial
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains("conv2.weight") {
                let mut init = Init::new(99);
                let t = init.trunc_normal(store.get(id).shape().to_vec(), 0.05);
                store.set(id, t);
            }
        }
        let fx = Forward::new(&store, false);
        let x = fx.input(Tensor::from_fn(vec![1, 4, 7, 7], |i| {
            // constant per channel
            (i / 49) as f64 * 0.3 - 0.4
        }));
        let y = rcab.forward(&fx, &x).unwrap();
        // the two chained 3x3 convs see a 5x5 window, so pixels at least two
        // away from the zero-padded border share one value per channel
        for c in 0..4 {
            let reference = y.value().at(&[0, c, 3, 3]);
            for z in 2..5 {
                for w in 2..5 {
                    assert!((y.value().at(&[0, c, z, w]) - reference).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rcab_gradcheck() {
        let (mut store, rcab) = build(4, 2, 3);
        // non-zero body so every parameter participates
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains("conv2.weight") {
                let mut init = Init::new(5);
                let t = init.trunc_normal(store.get(id).shape().to_vec(), 0.05);
                store.set(id, t);
            }
        }
        let x0 = Tensor::from_fn(vec![1, 4, 6, 6], |i| (0.21 * i as f64).cos());
        gradcheck::check_with_params(
            &mut store,
            &[x0],
            |fx, xs| {
                let y = rcab.forward(fx, &xs[0]).unwrap();
                y.mul(&y).unwrap().sum_all().unwrap()
            },
            1e-5,
            24,
            11,
        )
        .unwrap();
    }
}
