//! The four-direction cross-modal selective scan and its adjoint.

use std::sync::Arc;

use super::kernel::{
    recurrence_kernel, BlellochScan, RecurrenceInputs, RecurrenceKernel, SequentialScan,
};
use super::layout::DirectionalLayout;
use super::params::{RecurrenceMode, SsmConfig, SsmDirectionParams};
use super::project::{project_backward, project_tokens, Projection};
use super::sequence::{build_directional_sequences, deinterleave_accumulate, InterleavedSequence};
use crate::error::{Error, Result};
use crate::numerics::{Module, Parameter, Rng, Scalar, Tensor};

fn inputs<'a, T: Scalar>(
    seq: &'a InterleavedSequence<T>,
    p: &'a SsmDirectionParams<T>,
    proj: &'a Projection<T>,
    a: &'a Tensor<T>,
    mode: RecurrenceMode,
) -> RecurrenceInputs<'a, T> {
    RecurrenceInputs {
        pixels: seq.len() / 2,
        channels: seq.channels(),
        state_dim: p.state_dim(),
        a: a.data(),
        x: seq.tokens.data(),
        delta: proj.delta.data(),
        b: proj.b.data(),
        c: proj.c.data(),
        d: p.d.value.data(),
        mode,
    }
}

fn split_outputs<T: Scalar>(y: Vec<T>, pixels: usize, c: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut r = Vec::with_capacity(pixels * c);
    let mut t = Vec::with_capacity(pixels * c);
    for (j, row) in y.chunks(c).enumerate() {
        if j % 2 == 0 { &mut r } else { &mut t }.extend_from_slice(row);
    }
    Ok((
        Tensor::from_vec(&[pixels, c], r)?,
        Tensor::from_vec(&[pixels, c], t)?,
    ))
}

/// Project, discretize and run the recurrence with `kernel`; returns
/// `(r', t')`, each `[H*W, C]` in the sequence's pixel order.
pub fn cross_modal_recurrence<T: Scalar>(
    seq: &InterleavedSequence<T>,
    p: &SsmDirectionParams<T>,
    mode: RecurrenceMode,
    kernel: &dyn RecurrenceKernel<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let proj = project_tokens(&seq.tokens, p)?;
    let a = p.a();
    let inp = inputs(seq, p, &proj, &a, mode);
    inp.validate()?;
    split_outputs(kernel.run(&inp), inp.pixels, inp.channels)
}

pub fn cross_modal_recurrence_seq<T: Scalar>(
    seq: &InterleavedSequence<T>,
    p: &SsmDirectionParams<T>,
    mode: RecurrenceMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cross_modal_recurrence(seq, p, mode, &SequentialScan)
}

pub fn cross_modal_recurrence_par<T: Scalar>(
    seq: &InterleavedSequence<T>,
    p: &SsmDirectionParams<T>,
    mode: RecurrenceMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cross_modal_recurrence(seq, p, mode, &BlellochScan)
}

/// Gradients of the recurrence with respect to everything it reads.
#[derive(Clone, Debug)]
pub struct RecurrenceGrads<T> {
    pub dx: Vec<T>,
    pub ddelta: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub da: Vec<T>,
    pub dd: Vec<T>,
}

/// Reverse-time adjoint of the recurrence given `dy` (`[J, C]`).
///
/// Hidden states are not stored by the forward pass: joint states are
/// checkpointed every `ceil(sqrt(H*W))` pixels and each segment is
/// recomputed before it is walked backwards.
pub fn recurrence_backward<T: Scalar>(
    inp: &RecurrenceInputs<'_, T>,
    dy: &[T],
) -> RecurrenceGrads<T> {
    let (c, n, pixels) = (inp.channels, inp.state_dim, inp.pixels);
    let cn = c * n;
    let j_len = inp.tokens();
    assert_eq!(dy.len(), j_len * c, "dy must be [J, C]");
    let mut g = RecurrenceGrads {
        dx: vec![T::zero(); j_len * c],
        ddelta: vec![T::zero(); j_len * c],
        db: vec![T::zero(); j_len * n],
        dc: vec![T::zero(); j_len * n],
        da: vec![T::zero(); cn],
        dd: vec![T::zero(); c],
    };
    if pixels == 0 {
        return g;
    }
    let seg = (pixels as f64).sqrt().ceil().max(1.0) as usize;

    let mut checkpoints = Vec::with_capacity(pixels.div_ceil(seg));
    let mut h_r = vec![T::zero(); cn];
    let mut h_t = vec![T::zero(); cn];
    for k in 0..pixels {
        if k % seg == 0 {
            checkpoints.push((h_r.clone(), h_t.clone()));
        }
        inp.step(k, &mut h_r, &mut h_t);
    }

    let mut carry_r = vec![T::zero(); cn];
    let mut carry_t = vec![T::zero(); cn];
    let mut dh_r = vec![T::zero(); cn];
    let mut dh_t = vec![T::zero(); cn];
    let mut seg_r = Vec::new();
    let mut seg_t = Vec::new();
    // transitions of the segment's tokens, reused by the adjoint
    let mut ab_r = vec![T::zero(); seg * cn];
    let mut ab_t = vec![T::zero(); seg * cn];
    for (si, (ck_r, ck_t)) in checkpoints.iter().enumerate().rev() {
        let k0 = si * seg;
        let k1 = (k0 + seg).min(pixels);
        // slot 0 holds the state before k0, slot i the state after pixel k0+i-1
        seg_r.clear();
        seg_t.clear();
        seg_r.extend_from_slice(ck_r);
        seg_t.extend_from_slice(ck_t);
        h_r.copy_from_slice(ck_r);
        h_t.copy_from_slice(ck_t);
        for k in k0..k1 {
            let slot = k - k0;
            for ch in 0..c {
                for s in 0..n {
                    ab_r[slot * cn + ch * n + s] = inp.a_bar(2 * k, ch, s);
                    ab_t[slot * cn + ch * n + s] = inp.a_bar(2 * k + 1, ch, s);
                }
            }
            inp.step_with(
                k,
                &ab_r[slot * cn..][..cn],
                &ab_t[slot * cn..][..cn],
                &mut h_r,
                &mut h_t,
            );
            seg_r.extend_from_slice(&h_r);
            seg_t.extend_from_slice(&h_t);
        }
        for k in (k0..k1).rev() {
            let slot = k - k0;
            let prev_r = &seg_r[slot * cn..][..cn];
            let prev_t = &seg_t[slot * cn..][..cn];
            let cur_r = &seg_r[(slot + 1) * cn..][..cn];
            let cur_t = &seg_t[(slot + 1) * cn..][..cn];
            let abr = &ab_r[slot * cn..][..cn];
            let abt = &ab_t[slot * cn..][..cn];
            let (jr, jt) = (2 * k, 2 * k + 1);

            readout_backward(inp, jr, cur_r, dy, &mut g);
            readout_backward(inp, jt, cur_t, dy, &mut g);

            for ch in 0..c {
                let (gr, gt) = (dy[jr * c + ch], dy[jt * c + ch]);
                for s in 0..n {
                    let i = ch * n + s;
                    dh_t[i] = gt * inp.c[jt * n + s] + carry_t[i];
                    let from_next = match inp.mode {
                        RecurrenceMode::Swapped => carry_r[i],
                        RecurrenceMode::StrictInterleave => abt[i] * dh_t[i],
                    };
                    dh_r[i] = gr * inp.c[jr * n + s] + from_next;
                }
            }
            let src_t = match inp.mode {
                RecurrenceMode::Swapped => prev_r,
                RecurrenceMode::StrictInterleave => cur_r,
            };
            transition_backward(inp, jt, abt, src_t, &dh_t, &mut g);
            transition_backward(inp, jr, abr, prev_t, &dh_r, &mut g);

            for i in 0..cn {
                carry_t[i] = abr[i] * dh_r[i];
                carry_r[i] = match inp.mode {
                    RecurrenceMode::Swapped => abt[i] * dh_t[i],
                    RecurrenceMode::StrictInterleave => T::zero(),
                };
            }
        }
    }
    g
}

/// Adjoint of `y_j = <C_j, h> + D x_j`.
fn readout_backward<T: Scalar>(
    inp: &RecurrenceInputs<'_, T>,
    j: usize,
    h: &[T],
    dy: &[T],
    g: &mut RecurrenceGrads<T>,
) {
    let (c, n) = (inp.channels, inp.state_dim);
    for ch in 0..c {
        let gy = dy[j * c + ch];
        g.dd[ch] += gy * inp.x[j * c + ch];
        g.dx[j * c + ch] += inp.d[ch] * gy;
        for s in 0..n {
            g.dc[j * n + s] += gy * h[ch * n + s];
        }
    }
}

/// Adjoint of `h_j = exp(delta_j A) * src + delta_j B_j x_j` given `dh`.
fn transition_backward<T: Scalar>(
    inp: &RecurrenceInputs<'_, T>,
    j: usize,
    a_bar: &[T],
    src: &[T],
    dh: &[T],
    g: &mut RecurrenceGrads<T>,
) {
    let (c, n) = (inp.channels, inp.state_dim);
    for ch in 0..c {
        let dt = inp.delta[j * c + ch];
        let xv = inp.x[j * c + ch];
        let mut ddt = T::zero();
        let mut dxv = T::zero();
        for s in 0..n {
            let i = ch * n + s;
            let a = inp.a[i];
            let ab = a_bar[i];
            let bv = inp.b[j * n + s];
            let gab = dh[i] * src[i] * ab;
            ddt += gab * a + dh[i] * bv * xv;
            g.da[i] += gab * dt;
            g.db[j * n + s] += dh[i] * dt * xv;
            dxv += dh[i] * dt * bv;
        }
        g.ddelta[j * c + ch] += ddt;
        g.dx[j * c + ch] += dxv;
    }
}

/// Un-permute each direction's `(r', t')` back to row-major pixels and sum.
pub fn merge_scans<T: Scalar>(
    outputs: &[(Tensor<T>, Tensor<T>)],
    layouts: &[DirectionalLayout],
    channels: usize,
    h: usize,
    w: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if outputs.len() != layouts.len() {
        return Err(Error::dim(
            "merge_scans",
            &[outputs.len()],
            &[layouts.len()],
        ));
    }
    let hw = h * w;
    let mut fr = vec![T::zero(); channels * hw];
    let mut ft = vec![T::zero(); channels * hw];
    for ((r, t), layout) in outputs.iter().zip(layouts) {
        r.expect_shape("merge_scans", &[hw, channels])?;
        t.expect_shape("merge_scans", &[hw, channels])?;
        for (k, &p) in layout.pixel_order.iter().enumerate() {
            for ch in 0..channels {
                fr[ch * hw + p] += r.data()[k * channels + ch];
                ft[ch * hw + p] += t.data()[k * channels + ch];
            }
        }
    }
    Ok((
        Tensor::from_vec(&[channels, h, w], fr)?,
        Tensor::from_vec(&[channels, h, w], ft)?,
    ))
}

/// Per-direction saved state for the backward pass.
#[derive(Clone, Debug)]
pub struct DirectionCache<T> {
    pub seq: InterleavedSequence<T>,
    pub proj: Projection<T>,
}

#[derive(Clone, Debug)]
pub struct CmSs2dCache<T> {
    pub shape: Vec<usize>,
    pub directions: Vec<DirectionCache<T>>,
}

/// Gradients of one direction's parameters, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct DirectionGrads<T> {
    pub a_log: Tensor<T>,
    pub d: Tensor<T>,
    pub w_b: Tensor<T>,
    pub w_c: Tensor<T>,
    pub w_dt_down: Tensor<T>,
    pub w_dt_up: Tensor<T>,
    pub dt_bias: Tensor<T>,
}

impl<T: Scalar> DirectionGrads<T> {
    fn tensors(&self) -> [&Tensor<T>; 7] {
        [
            &self.a_log,
            &self.d,
            &self.w_b,
            &self.w_c,
            &self.w_dt_down,
            &self.w_dt_up,
            &self.dt_bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct CmSs2dGrads<T> {
    pub d_rgb: Tensor<T>,
    pub d_thermal: Tensor<T>,
    pub directions: Vec<DirectionGrads<T>>,
}

/// Cross-modal 2-D selective scan over `[C, H, W]` RGB / thermal maps.
#[derive(Clone)]
pub struct CmSs2d<T: Scalar> {
    pub directions: Vec<SsmDirectionParams<T>>,
    pub mode: RecurrenceMode,
    kernel: Arc<dyn RecurrenceKernel<T>>,
}

impl<T: Scalar> std::fmt::Debug for CmSs2d<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CmSs2d")
            .field("mode", &self.mode)
            .field("kernel", &self.kernel.name())
            .field("channels", &self.channels())
            .finish()
    }
}

impl<T: Scalar> CmSs2d<T> {
    pub fn new(prefix: &str, channels: usize, cfg: &SsmConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let directions = (0..4)
            .map(|k| SsmDirectionParams::init(&format!("{prefix}.dir{k}"), channels, cfg, rng))
            .collect();
        Ok(Self {
            directions,
            mode: cfg.mode(),
            kernel: recurrence_kernel(&cfg.kernel)?,
        })
    }

    pub fn from_params(
        directions: Vec<SsmDirectionParams<T>>,
        mode: RecurrenceMode,
        kernel: Arc<dyn RecurrenceKernel<T>>,
    ) -> Result<Self> {
        if directions.len() != 4 {
            return Err(Error::config(
                "cm_ss2d needs exactly four direction parameter sets",
            ));
        }
        Ok(Self {
            directions,
            mode,
            kernel,
        })
    }

    pub fn channels(&self) -> usize {
        self.directions[0].channels()
    }

    pub fn kernel_name(&self) -> &'static str {
        self.kernel.name()
    }

    pub fn set_kernel(&mut self, kernel: Arc<dyn RecurrenceKernel<T>>) {
        self.kernel = kernel;
    }

    /// Build sequences, project, discretize, scan and merge.
    pub fn forward(
        &self,
        f_rgb: &Tensor<T>,
        f_thermal: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, CmSs2dCache<T>)> {
        let seqs = build_directional_sequences(f_rgb, f_thermal)?;
        let (c, h, w) = (f_rgb.dim(0), f_rgb.dim(1), f_rgb.dim(2));
        if c != self.channels() {
            return Err(Error::dim(
                "cm_ss2d",
                f_rgb.shape(),
                self.directions[0].d.value.shape(),
            ));
        }
        let mut outputs = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        for (seq, p) in seqs.into_iter().zip(&self.directions) {
            let proj = project_tokens(&seq.tokens, p)?;
            let a = p.a();
            let inp = inputs(&seq, p, &proj, &a, self.mode);
            outputs.push(split_outputs(self.kernel.run(&inp), inp.pixels, c)?);
            caches.push(DirectionCache { seq, proj });
        }
        let layouts: Vec<_> = caches.iter().map(|d| d.seq.layout.clone()).collect();
        let (fr, ft) = merge_scans(&outputs, &layouts, c, h, w)?;
        let cache = CmSs2dCache {
            shape: f_rgb.shape().to_vec(),
            directions: caches,
        };
        Ok((fr, ft, cache))
    }

    pub fn backward(
        &self,
        cache: &CmSs2dCache<T>,
        d_out_rgb: &Tensor<T>,
        d_out_thermal: &Tensor<T>,
    ) -> Result<CmSs2dGrads<T>> {
        d_out_rgb.expect_shape("cm_ss2d_backward", &cache.shape)?;
        d_out_thermal.expect_shape("cm_ss2d_backward", &cache.shape)?;
        if cache.directions.len() != self.directions.len() {
            return Err(Error::MissingState("cm_ss2d direction caches"));
        }
        let (c, hw) = (cache.shape[0], cache.shape[1] * cache.shape[2]);
        let mut d_rgb = vec![T::zero(); c * hw];
        let mut d_thermal = vec![T::zero(); c * hw];
        let mut grads = Vec::with_capacity(4);
        for (dc, p) in cache.directions.iter().zip(&self.directions) {
            let layout = &dc.seq.layout;
            // merge is a permuted sum, so each token's upstream gradient is a gather
            let mut dy = vec![T::zero(); 2 * hw * c];
            for (k, &px) in layout.pixel_order.iter().enumerate() {
                for ch in 0..c {
                    dy[2 * k * c + ch] = d_out_rgb.data()[ch * hw + px];
                    dy[(2 * k + 1) * c + ch] = d_out_thermal.data()[ch * hw + px];
                }
            }
            let a = p.a();
            let inp = inputs(&dc.seq, p, &dc.proj, &a, self.mode);
            let rg = recurrence_backward(&inp, &dy);
            let j = 2 * hw;
            let n = p.state_dim();
            let pg = project_backward(
                &dc.seq.tokens,
                p,
                &dc.proj,
                &Tensor::from_vec(&[j, n], rg.db)?,
                &Tensor::from_vec(&[j, n], rg.dc)?,
                &Tensor::from_vec(&[j, c], rg.ddelta)?,
            )?;
            let mut dtokens = pg.dtokens;
            for (acc, &v) in dtokens.data_mut().iter_mut().zip(&rg.dx) {
                *acc += v;
            }
            deinterleave_accumulate(dtokens.data(), layout, c, &mut d_rgb, &mut d_thermal);
            // dA/da_log = -exp(a_log) = A
            let da_log: Vec<T> = rg.da.iter().zip(a.data()).map(|(&g, &av)| g * av).collect();
            grads.push(DirectionGrads {
                a_log: Tensor::from_vec(&[c, n], da_log)?,
                d: Tensor::from_vec(&[c], rg.dd)?,
                w_b: pg.w_b,
                w_c: pg.w_c,
                w_dt_down: pg.w_dt_down,
                w_dt_up: pg.w_dt_up,
                dt_bias: pg.dt_bias,
            });
        }
        Ok(CmSs2dGrads {
            d_rgb: Tensor::from_vec(&cache.shape, d_rgb)?,
            d_thermal: Tensor::from_vec(&cache.shape, d_thermal)?,
            directions: grads,
        })
    }

    /// Add `grads` into the parameters' gradient buffers.
    pub fn accumulate(&mut self, grads: &CmSs2dGrads<T>) -> Result<()> {
        for (p, g) in self.directions.iter_mut().zip(&grads.directions) {
            let mut i = 0;
            let tensors = g.tensors();
            let mut res = Ok(());
            p.visit_params_mut(&mut |param: &mut Parameter<T>| {
                if res.is_ok() {
                    res = param.grad.add_assign(tensors[i]);
                }
                i += 1;
            });
            res?;
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for CmSs2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for d in &self.directions {
            d.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for d in &mut self.directions {
            d.visit_params_mut(f);
        }
    }
}
