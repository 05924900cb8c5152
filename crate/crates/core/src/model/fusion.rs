//! Stage-wise RGB / thermal fusion strategies.
//!
//! `cm_ssa` is the full cross-modal block: per-modality input projection,
//! depthwise conv and SiLU, a joint cross-modal 2-D scan, gated residuals,
//! a convolutional local branch and a 1x1 fusion conv. `no_scan` removes
//! only the scan (its output is its input). `addition` is `R + T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{Act, ChannelLayerNorm, Conv2d, ConvBnRelu, Layer};
use crate::numerics::ops::{Activation, NormMode};
use crate::numerics::{Buffer, Module, Parameter, Rng, Scalar, Tensor};
use crate::registry::Registry;
use crate::scan::{CmSs2d, CmSs2dCache, SsmConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `R + OutProj(LN(F')) * SiLU(Gate(R))`
    #[default]
    Mul,
    /// `R + OutProj(LN(F')) + SiLU(Gate(R))`
    Add,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseInputs {
    /// Fuse `Cat(G_R, G_T, L)`.
    #[default]
    Gated,
    /// Fuse `Cat(R, T, L)`; the gated residuals are then unused.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: String,
    pub gate_mode: GateMode,
    pub fuse_inputs: FuseInputs,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: "cm_ssa".into(),
            gate_mode: GateMode::Mul,
            fuse_inputs: FuseInputs::Gated,
        }
    }
}

/// Fuses one stage's `[B, C, H, W]` RGB and thermal features into `[B, C, H, W]`.
pub trait FusionStrategy<T: Scalar>: Module<T> + Send {
    fn name(&self) -> &'static str;
    fn forward(&mut self, r: &Tensor<T>, t: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>>;
    /// Gradients with respect to the RGB and thermal inputs.
    fn backward(&mut self, d_fused: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>;
}

pub struct FusionContext<'a> {
    pub prefix: &'a str,
    pub channels: usize,
    pub ssm: &'a SsmConfig,
    pub fusion: &'a FusionConfig,
}

pub type FusionFactory<T> = fn(&FusionContext<'_>, &mut Rng) -> Result<Box<dyn FusionStrategy<T>>>;

pub fn fusion_registry<T: Scalar>() -> Registry<FusionFactory<T>> {
    fn cm_ssa<T: Scalar>(
        ctx: &FusionContext<'_>,
        rng: &mut Rng,
    ) -> Result<Box<dyn FusionStrategy<T>>> {
        Ok(Box::new(CmSsaBlock::new(ctx, true, rng)?))
    }
    fn no_scan<T: Scalar>(
        ctx: &FusionContext<'_>,
        rng: &mut Rng,
    ) -> Result<Box<dyn FusionStrategy<T>>> {
        Ok(Box::new(CmSsaBlock::new(ctx, false, rng)?))
    }
    fn addition<T: Scalar>(
        _ctx: &FusionContext<'_>,
        _rng: &mut Rng,
    ) -> Result<Box<dyn FusionStrategy<T>>> {
        Ok(Box::new(AdditionFusion { shape: None }))
    }
    Registry::new("fusion strategy")
        .with("cm_ssa", cm_ssa::<T> as FusionFactory<T>)
        .with("no_scan", no_scan::<T>)
        .with("addition", addition::<T>)
}

pub fn build_fusion<T: Scalar>(
    ctx: &FusionContext<'_>,
    rng: &mut Rng,
) -> Result<Box<dyn FusionStrategy<T>>> {
    let factory = *fusion_registry::<T>().get(&ctx.fusion.strategy)?;
    factory(ctx, rng)
}

pub struct AdditionFusion {
    shape: Option<Vec<usize>>,
}

impl<T: Scalar> Module<T> for AdditionFusion {
    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

impl<T: Scalar> FusionStrategy<T> for AdditionFusion {
    fn name(&self) -> &'static str {
        "addition"
    }

    fn forward(&mut self, r: &Tensor<T>, t: &Tensor<T>, _mode: NormMode) -> Result<Tensor<T>> {
        let y = r.add(t)?;
        self.shape = Some(r.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, d: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let shape = self
            .shape
            .take()
            .ok_or(Error::MissingState("addition fusion"))?;
        d.expect_shape("addition_backward", &shape)?;
        Ok((d.clone(), d.clone()))
    }
}

/// Per-modality pieces of the block; `R` and `T` each own one.
#[derive(Clone, Debug)]
pub struct ModalityBranch<T: Scalar> {
    pub in_proj: Conv2d<T>,
    pub dw: Conv2d<T>,
    pub act: Act<T>,
    pub ln: ChannelLayerNorm<T>,
    pub out_proj: Conv2d<T>,
    pub gate: Conv2d<T>,
    pub gate_act: Act<T>,
}

impl<T: Scalar> ModalityBranch<T> {
    fn new(name: &str, c: usize, ce: usize, rng: &mut Rng) -> Self {
        Self {
            in_proj: Conv2d::pixel_linear(&format!("{name}.in_proj"), c, ce, rng),
            dw: Conv2d::depthwise3x3(&format!("{name}.dw"), ce, rng),
            act: Act::new(Activation::Silu),
            ln: ChannelLayerNorm::new(&format!("{name}.ln"), ce),
            out_proj: Conv2d::pixel_linear(&format!("{name}.out_proj"), ce, c, rng),
            gate: Conv2d::pixel_linear(&format!("{name}.gate"), c, c, rng),
            gate_act: Act::new(Activation::Silu),
        }
    }

    /// `SiLU(DWConv(Linear(x)))`
    fn enter(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let y = self.in_proj.forward(x, mode)?;
        let y = self.dw.forward(&y, mode)?;
        self.act.forward(&y, mode)
    }

    fn enter_backward(&mut self, d: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.act.backward(d)?;
        let d = self.dw.backward(&d)?;
        self.in_proj.backward(&d)
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.in_proj.visit_params(f);
        self.dw.visit_params(f);
        self.ln.visit_params(f);
        self.out_proj.visit_params(f);
        self.gate.visit_params(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.in_proj.visit_params_mut(f);
        self.dw.visit_params_mut(f);
        self.ln.visit_params_mut(f);
        self.out_proj.visit_params_mut(f);
        self.gate.visit_params_mut(f);
    }
}

struct GateCache<T> {
    branch: Tensor<T>,
    gate: Tensor<T>,
}

struct BlockCache<T> {
    scans: Vec<CmSs2dCache<T>>,
    gates: [GateCache<T>; 2],
    c: usize,
}

/// Intermediate maps of one forward pass, for inspection and tests.
#[derive(Clone, Debug)]
pub struct CmSsaTrace<T> {
    pub f_r: Tensor<T>,
    pub f_t: Tensor<T>,
    pub scanned_r: Tensor<T>,
    pub scanned_t: Tensor<T>,
    pub g_r: Tensor<T>,
    pub g_t: Tensor<T>,
    pub local: Tensor<T>,
    pub fused: Tensor<T>,
}

pub struct CmSsaBlock<T: Scalar> {
    pub rgb: ModalityBranch<T>,
    pub thermal: ModalityBranch<T>,
    /// `None` for the scan-free ablation.
    pub scan: Option<CmSs2d<T>>,
    pub local: ConvBnRelu<T>,
    pub fuse: ConvBnRelu<T>,
    pub gate_mode: GateMode,
    pub fuse_inputs: FuseInputs,
    cache: Option<BlockCache<T>>,
}

impl<T: Scalar> CmSsaBlock<T> {
    pub fn new(ctx: &FusionContext<'_>, with_scan: bool, rng: &mut Rng) -> Result<Self> {
        let c = ctx.channels;
        ctx.ssm.validate()?;
        let ce = c * ctx.ssm.expand_factor;
        let p = ctx.prefix;
        let rgb = ModalityBranch::new(&format!("{p}.rgb"), c, ce, rng);
        let thermal = ModalityBranch::new(&format!("{p}.thermal"), c, ce, rng);
        let scan = if with_scan {
            Some(CmSs2d::new(&format!("{p}.scan"), ce, ctx.ssm, rng)?)
        } else {
            None
        };
        Ok(Self {
            rgb,
            thermal,
            scan,
            local: ConvBnRelu::new(&format!("{p}.local"), 2 * c, c, 3, 1, rng),
            fuse: ConvBnRelu::new(&format!("{p}.fuse"), 3 * c, c, 1, 1, rng),
            gate_mode: ctx.fusion.gate_mode,
            fuse_inputs: ctx.fusion.fuse_inputs,
            cache: None,
        })
    }

    /// Forward pass that also returns every intermediate map.
    pub fn forward_traced(
        &mut self,
        r: &Tensor<T>,
        t: &Tensor<T>,
        mode: NormMode,
    ) -> Result<CmSsaTrace<T>> {
        if r.shape() != t.shape() || r.rank() != 4 {
            return Err(Error::dim("cm_ssa", r.shape(), t.shape()));
        }
        let c = r.dim(1);
        let f_r = self.rgb.enter(r, mode)?;
        let f_t = self.thermal.enter(t, mode)?;

        let (scanned_r, scanned_t, scans) = match &self.scan {
            Some(scan) => {
                let mut outs_r = Vec::with_capacity(r.dim(0));
                let mut outs_t = Vec::with_capacity(r.dim(0));
                let mut caches = Vec::with_capacity(r.dim(0));
                for b in 0..r.dim(0) {
                    let (sr, st, cache) = scan.forward(&f_r.index0(b), &f_t.index0(b))?;
                    outs_r.push(sr);
                    outs_t.push(st);
                    caches.push(cache);
                }
                (Tensor::stack(&outs_r)?, Tensor::stack(&outs_t)?, caches)
            }
            None => (f_r.clone(), f_t.clone(), Vec::new()),
        };

        let gate_mode = self.gate_mode;
        let gated = |branch: &mut ModalityBranch<T>, x: &Tensor<T>, s: &Tensor<T>| -> Result<_> {
            let y = branch.ln.forward(s, mode)?;
            let y = branch.out_proj.forward(&y, mode)?;
            let g = branch.gate.forward(x, mode)?;
            let g = branch.gate_act.forward(&g, mode)?;
            let mix = match gate_mode {
                GateMode::Mul => y.mul(&g)?,
                GateMode::Add => y.add(&g)?,
            };
            Ok((x.add(&mix)?, GateCache { branch: y, gate: g }))
        };
        let (g_r, cache_r) = gated(&mut self.rgb, r, &scanned_r)?;
        let (g_t, cache_t) = gated(&mut self.thermal, t, &scanned_t)?;

        let local = self.local.forward(&Tensor::concat1(&[r, t])?, mode)?;
        let fuse_in = match self.fuse_inputs {
            FuseInputs::Gated => Tensor::concat1(&[&g_r, &g_t, &local])?,
            FuseInputs::Raw => Tensor::concat1(&[r, t, &local])?,
        };
        let fused = self.fuse.forward(&fuse_in, mode)?;
        self.cache = Some(BlockCache {
            scans,
            gates: [cache_r, cache_t],
            c,
        });
        Ok(CmSsaTrace {
            f_r,
            f_t,
            scanned_r,
            scanned_t,
            g_r,
            g_t,
            local,
            fused,
        })
    }
}

impl<T: Scalar> Module<T> for CmSsaBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.rgb.visit(f);
        self.thermal.visit(f);
        if let Some(s) = &self.scan {
            s.visit_params(f);
        }
        self.local.visit_params(f);
        self.fuse.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.rgb.visit_mut(f);
        self.thermal.visit_mut(f);
        if let Some(s) = &mut self.scan {
            s.visit_params_mut(f);
        }
        self.local.visit_params_mut(f);
        self.fuse.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.local.visit_buffers(f);
        self.fuse.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.local.visit_buffers_mut(f);
        self.fuse.visit_buffers_mut(f);
    }
}

impl<T: Scalar> FusionStrategy<T> for CmSsaBlock<T> {
    fn name(&self) -> &'static str {
        if self.scan.is_some() {
            "cm_ssa"
        } else {
            "no_scan"
        }
    }

    fn forward(&mut self, r: &Tensor<T>, t: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        Ok(self.forward_traced(r, t, mode)?.fused)
    }

    fn backward(&mut self, d_fused: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let cache = self.cache.take().ok_or(Error::MissingState("cm_ssa"))?;
        let c = cache.c;
        let d_in = self.fuse.backward(d_fused)?;
        let parts = d_in.split1(&[c, c, c])?;
        let (mut dr, mut dt, mut dg_r, mut dg_t) = match self.fuse_inputs {
            FuseInputs::Gated => (
                Tensor::zeros(parts[0].shape()),
                Tensor::zeros(parts[0].shape()),
                parts[0].clone(),
                parts[1].clone(),
            ),
            FuseInputs::Raw => (
                parts[0].clone(),
                parts[1].clone(),
                Tensor::zeros(parts[0].shape()),
                Tensor::zeros(parts[0].shape()),
            ),
        };
        let d_local = self.local.backward(&parts[2])?.split1(&[c, c])?;
        dr.add_assign(&d_local[0])?;
        dt.add_assign(&d_local[1])?;

        let gate_mode = self.gate_mode;
        let gated_back = |branch: &mut ModalityBranch<T>,
                          gc: &GateCache<T>,
                          dg: &mut Tensor<T>,
                          dx: &mut Tensor<T>| {
            dx.add_assign(dg)?;
            let (d_branch, d_gate) = match gate_mode {
                GateMode::Mul => (dg.mul(&gc.gate)?, dg.mul(&gc.branch)?),
                GateMode::Add => (dg.clone(), dg.clone()),
            };
            let d = branch.gate_act.backward(&d_gate)?;
            dx.add_assign(&branch.gate.backward(&d)?)?;
            let d = branch.out_proj.backward(&d_branch)?;
            branch.ln.backward(&d)
        };
        let [gc_r, gc_t] = &cache.gates;
        let ds_r = gated_back(&mut self.rgb, gc_r, &mut dg_r, &mut dr)?;
        let ds_t = gated_back(&mut self.thermal, gc_t, &mut dg_t, &mut dt)?;

        let (df_r, df_t) = match &mut self.scan {
            Some(scan) => {
                let mut outs_r = Vec::with_capacity(cache.scans.len());
                let mut outs_t = Vec::with_capacity(cache.scans.len());
                for (b, sc) in cache.scans.iter().enumerate() {
                    let g = scan.backward(sc, &ds_r.index0(b), &ds_t.index0(b))?;
                    scan.accumulate(&g)?;
                    outs_r.push(g.d_rgb);
                    outs_t.push(g.d_thermal);
                }
                (Tensor::stack(&outs_r)?, Tensor::stack(&outs_t)?)
            }
            None => (ds_r, ds_t),
        };
        dr.add_assign(&self.rgb.enter_backward(&df_r)?)?;
        dt.add_assign(&self.thermal.enter_backward(&df_t)?)?;
        Ok((dr, dt))
    }
}
