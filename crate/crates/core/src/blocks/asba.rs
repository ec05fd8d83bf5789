//! The full two-branch ASBA network.
//!
//! Sparse magnitude and phase maps are encoded separately, refined by MP
//! groups (magnitude RCAB stack in parallel with ROI-scan/phase-attention
//! layers, fused at group end), upscaled along the B-line by the shuffle
//! layer, and merged into the dense flow prediction.

use crate::autodiff::{ScanMode, Var};
use crate::error::{Error, Result};
use crate::params::{Forward, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{
    ArsBlock, BpaBlock, Conv2dP, FfnBlock, FusionBlock, MagnitudeModule, ModelConfig,
};

struct PhaseLayer {
    roi_conv: Conv2dP,
    ars: ArsBlock,
    bpa: BpaBlock,
    ffn: FfnBlock,
}

impl PhaseLayer {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        Ok(Self {
            roi_conv: Conv2dP::new(
                store,
                init,
                &format!("{prefix}.roi"),
                cfg.inner_channels(),
                cfg.channels,
                3,
                3,
                false,
            )?,
            ars: ArsBlock::new(
                store,
                init,
                &format!("{prefix}.ars"),
                cfg.channels,
                cfg.ssm_state,
            )?,
            bpa: BpaBlock::new(
                store,
                init,
                &format!("{prefix}.bpa"),
                cfg.channels,
                cfg.heads,
            )?,
            ffn: FfnBlock::new(
                store,
                init,
                &format!("{prefix}.ffn"),
                cfg.channels,
                cfg.ffn_expand,
            )?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        fx: &Forward<T>,
        x: &Var<T>,
        f_shared: &Var<T>,
        mode: ScanMode,
    ) -> Result<Var<T>> {
        // layer-specific ROI mask from the shared feature
        let roi = self.roi_conv.apply(fx, f_shared)?.silu()?;
        let x = self.ars.forward(fx, x, &roi, mode)?;
        let x = self.bpa.forward(fx, &x)?;
        self.ffn.forward(fx, &x)
    }
}

struct MpGroup {
    mag: MagnitudeModule,
    phase: Vec<PhaseLayer>,
    fusion: FusionBlock,
}

impl MpGroup {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        index: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let mag = MagnitudeModule::new(
            store,
            init,
            &format!("mag.group{index}"),
            cfg.layers,
            cfg.channels,
            cfg.ca_reduction,
        )?;
        let mut phase = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            phase.push(PhaseLayer::new(
                store,
                init,
                &format!("phase.group{index}.layer{l}"),
                cfg,
            )?);
        }
        let fusion = FusionBlock::new(
            store,
            init,
            &format!("fusion.group{index}"),
            cfg.channels,
        )?;
        Ok(Self { mag, phase, fusion })
    }

    fn forward<T: Scalar>(
        &self,
        fx: &Forward<T>,
        m: &Var<T>,
        p: &Var<T>,
        f_shared: &Var<T>,
        mode: ScanMode,
    ) -> Result<(Var<T>, Var<T>)> {
        let m1 = self.mag.forward(fx, m)?;
        let mut p1 = p.clone();
        for layer in &self.phase {
            p1 = layer.forward(fx, &p1, f_shared, mode)?;
        }
        // the fusion residual integration is the group-end residual
        self.fusion.forward(fx, &m1, &p1)
    }
}

pub struct AsbaOutput<T: Scalar> {
    /// Dense flow prediction `[B, 1, D, W]`, unclamped.
    pub flow: Var<T>,
    /// Dense magnitude prediction `[B, 1, D, W]`.
    pub magnitude: Var<T>,
    /// Dense phase prediction `[B, 1, D, W]`, unconstrained angle estimate.
    pub phase: Var<T>,
}

pub struct Asba {
    cfg: ModelConfig,
    mag_enc: Conv2dP,
    phase_enc: Conv2dP,
    f_conv: Conv2dP,
    groups: Vec<MpGroup>,
    mag_up: Conv2dP,
    phase_up: Conv2dP,
    mag_head: Conv2dP,
    phase_head: Conv2dP,
    y1: Conv2dP,
    y2: Conv2dP,
}

impl Asba {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mag_enc = Conv2dP::new(store, init, "mag.encoder", c, 1, 3, 3, false)?;
        let phase_enc = Conv2dP::new(store, init, "phase.encoder", c, 1, 3, 3, false)?;
        let f_conv = Conv2dP::new(store, init, "roi.shared", c, 2, 3, 3, false)?;
        let mut groups = Vec::with_capacity(cfg.groups);
        for g in 0..cfg.groups {
            groups.push(MpGroup::new(store, init, g, &cfg)?);
        }
        let mag_up = Conv2dP::new(store, init, "mag.upsample", c * cfg.delta, c, 3, 3, false)?;
        let phase_up =
            Conv2dP::new(store, init, "phase.upsample", c * cfg.delta, c, 3, 3, false)?;
        let mag_head = Conv2dP::new(store, init, "mag.head", 1, c, 3, 3, false)?;
        let phase_head = Conv2dP::new(store, init, "phase.head", 1, c, 3, 3, false)?;
        let y1 = Conv2dP::new(store, init, "head.y1", c, 2 * c, 3, 3, false)?;
        let y2 = Conv2dP::new(store, init, "head.y2", 1, c, 3, 3, false)?;
        Ok(Self {
            cfg,
            mag_enc,
            phase_enc,
            f_conv,
            groups,
            mag_up,
            phase_up,
            mag_head,
            phase_head,
            y1,
            y2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `m_s`, `p_s`: sparse inputs `[B, 1, D, W']` with `W' * delta = W`.
    pub fn forward<T: Scalar>(
        &self,
        fx: &Forward<T>,
        m_s: &Var<T>,
        p_s: &Var<T>,
        mode: ScanMode,
    ) -> Result<AsbaOutput<T>> {
        if m_s.shape().len() != 4 || m_s.shape()[1] != 1 {
            return Err(Error::shape("sparse inputs must be [B, 1, D, W']"));
        }
        if m_s.shape() != p_s.shape() {
            return Err(Error::shape("magnitude and phase inputs must agree"));
        }
        let delta = self.cfg.delta;
        // layer-shared ROI feature from the raw sparse inputs
        let f_shared = self.f_conv.apply(fx, &Var::concat(&[m_s, p_s], 1)?)?;
        let mut m = self.mag_enc.apply(fx, m_s)?;
        let mut p = self.phase_enc.apply(fx, p_s)?;
        for g in &self.groups {
            let (m2, p2) = g.forward(fx, &m, &p, &f_shared, mode)?;
            m = m2;
            p = p2;
        }
        let m_dense = self.mag_up.apply(fx, &m)?.b_shuffle(delta)?;
        let p_dense = self.phase_up.apply(fx, &p)?.b_shuffle(delta)?;
        let magnitude = self.mag_head.apply(fx, &m_dense)?;
        let phase = self.phase_head.apply(fx, &p_dense)?;
        let merged = Var::concat(&[&m_dense, &p_dense], 1)?;
        let flow = self.y2.apply(fx, &self.y1.apply(fx, &merged)?.silu()?)?;
        Ok(AsbaOutput { flow, magnitude, phase })
    }

    /// Inference on plain tensors; the flow output is clamped into `[0, 1]`.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        m_s: &Tensor<T>,
        p_s: &Tensor<T>,
        mode: ScanMode,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let fx = Forward::new(store, false);
        let out = self.forward(
            &fx,
            &fx.input(m_s.clone()),
            &fx.input(p_s.clone()),
            mode,
        )?;
        let flow = out
            .flow
            .value()
            .map(|v| v.max(T::zero()).min(T::one()));
        Ok((flow, out.magnitude.value().clone(), out.phase.value().clone()))
    }
}
