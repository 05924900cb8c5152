//! Recurrence kernels: sequential reference and parallel associative scan.

use std::sync::Arc;

use rayon::prelude::*;

use super::element::{inclusive_scan, AffinePairElement, Parity};
use super::params::RecurrenceMode;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::registry::Registry;

/// Flat views of everything the recurrence reads for one direction.
///
/// Token `j` is the RGB token of pixel `j / 2` when `j` is even and the
/// thermal token otherwise.
#[derive(Clone, Copy, Debug)]
pub struct RecurrenceInputs<'a, T> {
    pub pixels: usize,
    pub channels: usize,
    pub state_dim: usize,
    /// `[C, N]`, strictly negative.
    pub a: &'a [T],
    /// `[J, C]`
    pub x: &'a [T],
    /// `[J, C]`
    pub delta: &'a [T],
    /// `[J, N]`
    pub b: &'a [T],
    /// `[J, N]`
    pub c: &'a [T],
    /// `[C]`
    pub d: &'a [T],
    pub mode: RecurrenceMode,
}

impl<'a, T: Scalar> RecurrenceInputs<'a, T> {
    pub fn tokens(&self) -> usize {
        2 * self.pixels
    }

    pub fn validate(&self) -> Result<()> {
        let (j, c, n) = (self.tokens(), self.channels, self.state_dim);
        let checks = [
            (self.a.len(), c * n),
            (self.x.len(), j * c),
            (self.delta.len(), j * c),
            (self.b.len(), j * n),
            (self.c.len(), j * n),
            (self.d.len(), c),
        ];
        for (got, want) in checks {
            if got != want {
                return Err(Error::dim("recurrence inputs", &[got], &[want]));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn a_bar(&self, j: usize, ch: usize, s: usize) -> T {
        (self.delta[j * self.channels + ch] * self.a[ch * self.state_dim + s]).exp()
    }

    /// `B_bar * x` for token `j`, lane `(ch, s)`.
    #[inline]
    pub fn bx(&self, j: usize, ch: usize, s: usize) -> T {
        self.delta[j * self.channels + ch]
            * self.b[j * self.state_dim + s]
            * self.x[j * self.channels + ch]
    }

    /// Advance the joint state `(h_r, h_t)` (each `[C, N]`) across pixel `k`.
    pub fn step(&self, k: usize, h_r: &mut [T], h_t: &mut [T]) {
        let (jr, jt) = (2 * k, 2 * k + 1);
        let n = self.state_dim;
        for ch in 0..self.channels {
            for s in 0..n {
                let i = ch * n + s;
                let prev_r = h_r[i];
                let new_r = self.a_bar(jr, ch, s) * h_t[i] + self.bx(jr, ch, s);
                let src_t = match self.mode {
                    RecurrenceMode::Swapped => prev_r,
                    RecurrenceMode::StrictInterleave => new_r,
                };
                h_t[i] = self.a_bar(jt, ch, s) * src_t + self.bx(jt, ch, s);
                h_r[i] = new_r;
            }
        }
    }

    /// [`RecurrenceInputs::step`] with precomputed transitions `[C, N]` for both tokens.
    pub fn step_with(&self, k: usize, ab_r: &[T], ab_t: &[T], h_r: &mut [T], h_t: &mut [T]) {
        let (jr, jt) = (2 * k, 2 * k + 1);
        let n = self.state_dim;
        for ch in 0..self.channels {
            for s in 0..n {
                let i = ch * n + s;
                let prev_r = h_r[i];
                let new_r = ab_r[i] * h_t[i] + self.bx(jr, ch, s);
                let src_t = match self.mode {
                    RecurrenceMode::Swapped => prev_r,
                    RecurrenceMode::StrictInterleave => new_r,
                };
                h_t[i] = ab_t[i] * src_t + self.bx(jt, ch, s);
                h_r[i] = new_r;
            }
        }
    }

    /// `y_j[c] = <C_j, h[c, :]> + D[c] x_j[c]`.
    pub fn readout(&self, j: usize, h: &[T], y: &mut [T]) {
        let (c, n) = (self.channels, self.state_dim);
        let cj = &self.c[j * n..][..n];
        for ch in 0..c {
            let hs = &h[ch * n..][..n];
            let mut acc = self.d[ch] * self.x[j * c + ch];
            for s in 0..n {
                acc += cj[s] * hs[s];
            }
            y[ch] = acc;
        }
    }
}

/// A strategy for evaluating the cross-modal recurrence.
///
/// Returns the outputs `y` as `[J, C]` in interleaved token order.
pub trait RecurrenceKernel<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, inputs: &RecurrenceInputs<'_, T>) -> Vec<T>;
}

/// Straight-line loop over pixels, `O(C * N)` live state.
#[derive(Clone, Copy, Debug, Default)]
pub struct SequentialScan;

impl<T: Scalar> RecurrenceKernel<T> for SequentialScan {
    fn name(&self) -> &'static str {
        "sequential"
    }

    fn run(&self, inp: &RecurrenceInputs<'_, T>) -> Vec<T> {
        let (c, n) = (inp.channels, inp.state_dim);
        let mut h_r = vec![T::zero(); c * n];
        let mut h_t = vec![T::zero(); c * n];
        let mut y = vec![T::zero(); inp.tokens() * c];
        for k in 0..inp.pixels {
            inp.step(k, &mut h_r, &mut h_t);
            inp.readout(2 * k, &h_r, &mut y[2 * k * c..][..c]);
            inp.readout(2 * k + 1, &h_t, &mut y[(2 * k + 1) * c..][..c]);
        }
        y
    }
}

/// Blelloch scan of [`AffinePairElement`]s per `(channel, state)` lane,
/// channels processed in parallel.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlellochScan;

impl BlellochScan {
    /// Hidden states of one lane: `(h_r[k], h_t[k])` for every pixel.
    fn lane_states<T: Scalar>(
        inp: &RecurrenceInputs<'_, T>,
        ch: usize,
        s: usize,
        elems: &mut Vec<AffinePairElement<T>>,
    ) {
        elems.clear();
        match inp.mode {
            RecurrenceMode::Swapped => {
                elems.extend((0..inp.pixels).map(|k| AffinePairElement {
                    parity: Parity::Swapped,
                    scale_r: inp.a_bar(2 * k, ch, s),
                    scale_t: inp.a_bar(2 * k + 1, ch, s),
                    offset_r: inp.bx(2 * k, ch, s),
                    offset_t: inp.bx(2 * k + 1, ch, s),
                }));
            }
            RecurrenceMode::StrictInterleave => {
                // single chain over tokens, carried in the r slot
                elems.extend((0..inp.tokens()).map(|j| AffinePairElement {
                    parity: Parity::Straight,
                    scale_r: inp.a_bar(j, ch, s),
                    scale_t: T::one(),
                    offset_r: inp.bx(j, ch, s),
                    offset_t: T::zero(),
                }));
            }
        }
        inclusive_scan(elems);
    }
}

impl<T: Scalar> RecurrenceKernel<T> for BlellochScan {
    fn name(&self) -> &'static str {
        "blelloch"
    }

    fn run(&self, inp: &RecurrenceInputs<'_, T>) -> Vec<T> {
        let (c, n, j_len) = (inp.channels, inp.state_dim, inp.tokens());
        // per channel: y[:, ch] over all tokens
        let columns: Vec<Vec<T>> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let mut col: Vec<T> = (0..j_len).map(|j| inp.d[ch] * inp.x[j * c + ch]).collect();
                let mut elems = Vec::new();
                for s in 0..n {
                    Self::lane_states(inp, ch, s, &mut elems);
                    for (j, out) in col.iter_mut().enumerate() {
                        // states start at zero, so each prefix's offset is the state
                        let h = match inp.mode {
                            RecurrenceMode::Swapped => {
                                let e = &elems[j / 2];
                                if j % 2 == 0 {
                                    e.offset_r
                                } else {
                                    e.offset_t
                                }
                            }
                            RecurrenceMode::StrictInterleave => elems[j].offset_r,
                        };
                        *out += inp.c[j * n + s] * h;
                    }
                }
                col
            })
            .collect();
        let mut y = vec![T::zero(); j_len * c];
        for (ch, col) in columns.iter().enumerate() {
            for (j, &v) in col.iter().enumerate() {
                y[j * c + ch] = v;
            }
        }
        y
    }
}

pub type KernelFactory<T> = fn() -> Arc<dyn RecurrenceKernel<T>>;

/// Built-in recurrence kernels by name.
pub fn kernel_registry<T: Scalar>() -> Registry<KernelFactory<T>> {
    fn sequential<T: Scalar>() -> Arc<dyn RecurrenceKernel<T>> {
        Arc::new(SequentialScan)
    }
    fn blelloch<T: Scalar>() -> Arc<dyn RecurrenceKernel<T>> {
        Arc::new(BlellochScan)
    }
    Registry::new("recurrence kernel")
        .with("sequential", sequential::<T> as KernelFactory<T>)
        .with("blelloch", blelloch::<T>)
}

pub fn recurrence_kernel<T: Scalar>(name: &str) -> Result<Arc<dyn RecurrenceKernel<T>>> {
    Ok((kernel_registry::<T>().get(name)?)())
}
