//! A-line ROI state space block: a gated selective-scan unit whose input
//! matrix is modulated by the ROI mask along depth.

use crate::autodiff::{a_rss_scan, ConvAxis, ScanMode, Var};
use crate::error::Result;
use crate::params::{Forward, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Conv2dP, NormP};

pub struct ArsBlock {
    ln: NormP,
    in_proj: Conv2dP,
    dw_conv_w: ParamId,
    dw_conv_b: ParamId,
    x_proj_w: ParamId,
    x_proj_b: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
    out_proj: Conv2dP,
    inner: usize,
    state: usize,
}

impl ArsBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        state: usize,
    ) -> Result<Self> {
        let inner = 2 * channels;
        let ln = NormP::new(store, &format!("{prefix}.ln"), channels)?;
        let in_proj = Conv2dP::new(
            store,
            init,
            &format!("{prefix}.in_proj"),
            2 * inner,
            channels,
            1,
            1,
            false,
        )?;
        let dw_conv_w = store.register(
            format!("{prefix}.dw_conv.weight"),
            init.trunc_normal(vec![inner, 1, 3], 0.02),
        )?;
        let dw_conv_b =
            store.register(format!("{prefix}.dw_conv.bias"), Tensor::zeros(vec![inner]))?;

        // selective projections: per-position B(t), C(t) and the timescale
        let proj_out = 2 * state + inner;
        let x_proj_w = store.register(
            format!("{prefix}.x_proj.weight"),
            init.trunc_normal(vec![proj_out, inner, 1, 1], 0.02),
        )?;
        // bias of the timescale slice targets dt in roughly [1e-3, 1e-1]
        let dt_targets: Tensor<T> = init.uniform(vec![inner], -3.0, -1.0);
        let mut x_proj_b_t = Tensor::zeros(vec![proj_out]);
        for (i, &log_dt) in dt_targets.data().iter().enumerate() {
            let dt = 10f64.powf(log_dt.as_f64());
            x_proj_b_t.data_mut()[2 * state + i] = T::cast(dt.exp_m1().ln());
        }
        let x_proj_b = store.register(format!("{prefix}.x_proj.bias"), x_proj_b_t)?;

        // S4D-real style state matrix: A = -exp(a_log), a_log = ln(s + 1)
        let a_log = store.register(
            format!("{prefix}.a_log"),
            Tensor::from_fn(vec![inner, state], |i| {
                T::cast(((i % state) as f64 + 1.0).ln())
            }),
        )?;
        let d_skip = store.register(
            format!("{prefix}.d_skip"),
            Tensor::full(vec![inner], T::one()),
        )?;
        let out_proj = Conv2dP::new(
            store,
            init,
            &format!("{prefix}.out_proj"),
            channels,
            inner,
            1,
            1,
            true,
        )?;
        Ok(Self {
            ln,
            in_proj,
            dw_conv_w,
            dw_conv_b,
            x_proj_w,
            x_proj_b,
            a_log,
            d_skip,
            out_proj,
            inner,
            state,
        })
    }

    /// `x`: `[B, C, D, W']`; `roi`: `[B, 2C, D, W']` mask from the ROI head.
    pub fn forward<T: Scalar>(
        &self,
        fx: &Forward<T>,
        x: &Var<T>,
        roi: &Var<T>,
        mode: ScanMode,
    ) -> Result<Var<T>> {
        let h = self.ln.apply(fx, x)?;
        let mg = self.in_proj.apply(fx, &h)?;
        let main = mg.narrow(1, 0, self.inner)?;
        let gate = mg.narrow(1, self.inner, self.inner)?;
        let main = main
            .conv1d(
                &fx.param(self.dw_conv_w),
                Some(&fx.param(self.dw_conv_b)),
                ConvAxis::Depth,
                true,
            )?
            .silu()?;
        let proj = main.conv2d(&fx.param(self.x_proj_w), Some(&fx.param(self.x_proj_b)))?;
        let b_t = proj.narrow(1, 0, self.state)?;
        let c_t = proj.narrow(1, self.state, self.state)?;
        // softplus keeps dt positive; the tiny floor guards f32 underflow
        let dt = proj
            .narrow(1, 2 * self.state, self.inner)?
            .softplus()?
            .add_scalar(T::cast(1e-8))?;
        let a = fx.param(self.a_log).exp()?.neg()?;
        let y = a_rss_scan(&main, &dt, &b_t, &c_t, &a, &fx.param(self.d_skip), roi, mode)?;
        let y = y.mul(&gate.silu()?)?;
        x.add(&self.out_proj.apply(fx, &y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn build(
        channels: usize,
        state: usize,
        seed: u64,
    ) -> (ParamStore<f64>, ArsBlock) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let block = ArsBlock::new(&mut store, &mut init, "ars", channels, state).unwrap();
        (store, block)
    }

    fn roi_of(shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| 0.5 + 0.4 * ((i as f64) * 0.37).sin())
    }

    #[test]
    fn zero_out_proj_is_identity() {
        let (store, block) = build(4, 2, 1);
        let fx = Forward::new(&store, false);
        let x = fx.input(Tensor::from_fn(vec![1, 4, 6, 3], |i| (0.19 * i as f64).sin()));
        let roi = fx.input(roi_of(vec![1, 8, 6, 3]));
        let y = block.forward(&fx, &x, &roi, ScanMode::Sequential).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn shape_contract_at_paper_width() {
        let (store, block) = build(60, 16, 2);
        let fx = Forward::new(&store, false);
        let x = fx.input(Tensor::from_fn(vec![1, 60, 32, 8], |i| {
            ((i % 97) as f64) * 0.01
        }));
        let roi = fx.input(roi_of(vec![1, 120, 32, 8]));
        let y = block.forward(&fx, &x, &roi, ScanMode::Sequential).unwrap();
        assert_eq!(y.shape(), &[1, 60, 32, 8]);
    }

    #[test]
    fn ars_gradcheck() {
        let (mut store, block) = build(4, 2, 3);
        // non-zero output projection so all parameters participate
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains("out_proj.weight") {
                let mut init = Init::new(9);
                let t = init.trunc_normal(store.get(id).shape().to_vec(), 0.05);
                store.set(id, t);
            }
        }
        let x = Tensor::from_fn(vec![1, 4, 8, 3], |i| (0.23 * i as f64).sin());
        let roi = roi_of(vec![1, 8, 8, 3]);
        gradcheck::check_with_params(
            &mut store,
            &[x, roi],
            |fx, xs| {
                let y = block
                    .forward(fx, &xs[0], &xs[1], ScanMode::Sequential)
                    .unwrap();
                y.mul(&y).unwrap().sum_all().unwrap()
            },
            1e-4,
            16,
            21,
        )
        .unwrap();
    }
}
