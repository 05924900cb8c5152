use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::softplus;
use crate::numerics::{Module, Parameter, Rng, Scalar, Tensor};

/// How the two modality chains are coupled across a pixel step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrenceMode {
    /// Each chain reads the *other* chain's state from the previous pixel:
    /// `r[k] = A_r t[k-1] + B_r x_r`, `t[k] = A_t r[k-1] + B_t x_t`.
    #[default]
    Swapped,
    /// One chain over the interleaved tokens: `t[k]` reads `r[k]`,
    /// `r[k]` reads `t[k-1]`.
    StrictInterleave,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    /// State size `N` per channel.
    pub state_dim: usize,
    /// Low-rank width of the step-size projection; `None` means `max(1, C / 16)`.
    pub dt_rank: Option<usize>,
    pub expand_factor: usize,
    pub delta_softplus: bool,
    pub strict_interleave: bool,
    /// Recurrence kernel name (see [`crate::scan::kernel_registry`]).
    pub kernel: String,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            state_dim: 16,
            dt_rank: None,
            expand_factor: 1,
            delta_softplus: true,
            strict_interleave: false,
            kernel: "sequential".into(),
            dt_min: 1e-3,
            dt_max: 0.1,
        }
    }
}

impl SsmConfig {
    pub fn dt_rank_for(&self, channels: usize) -> usize {
        self.dt_rank.unwrap_or((channels / 16).max(1))
    }

    pub fn mode(&self) -> RecurrenceMode {
        if self.strict_interleave {
            RecurrenceMode::StrictInterleave
        } else {
            RecurrenceMode::Swapped
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.expand_factor == 0 || self.dt_rank == Some(0) {
            return Err(Error::config(
                "ssm: state_dim, dt_rank and expand_factor must be >= 1",
            ));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::config("ssm: need 0 < dt_min <= dt_max"));
        }
        super::kernel::kernel_registry::<f32>().get(&self.kernel)?;
        Ok(())
    }
}

/// Learnable state-space parameters of one scan direction over `C` channels.
#[derive(Clone, Debug)]
pub struct SsmDirectionParams<T> {
    /// `[C, N]`; the state matrix is `A = -exp(a_log)`.
    pub a_log: Parameter<T>,
    /// `[C]` skip gain.
    pub d: Parameter<T>,
    /// `[N, C]`
    pub w_b: Parameter<T>,
    /// `[N, C]`
    pub w_c: Parameter<T>,
    /// `[R, C]`
    pub w_dt_down: Parameter<T>,
    /// `[C, R]`
    pub w_dt_up: Parameter<T>,
    /// `[C]`
    pub dt_bias: Parameter<T>,
    pub delta_softplus: bool,
}

impl<T: Scalar> SsmDirectionParams<T> {
    pub fn init(prefix: &str, channels: usize, cfg: &SsmConfig, rng: &mut Rng) -> Self {
        let (c, n, r) = (channels, cfg.state_dim, cfg.dt_rank_for(channels));
        let a_log = Tensor::from_fn(&[c, n], |i| T::from_f64_lossy(((i % n) + 1) as f64).ln());
        // nn.Linear-style bound 1/sqrt(fan_in)
        let lin = |name: String, shape: &[usize], fan_in: usize, rng: &mut Rng| {
            Parameter::kaiming_uniform(name, shape, fan_in, 1.0 / 3f64.sqrt(), rng)
        };
        let w_b = lin(format!("{prefix}.w_b"), &[n, c], c, rng);
        let w_c = lin(format!("{prefix}.w_c"), &[n, c], c, rng);
        let w_dt_down = lin(format!("{prefix}.w_dt_down"), &[r, c], c, rng);
        let w_dt_up = lin(format!("{prefix}.w_dt_up"), &[c, r], r, rng);
        let dt_bias = Tensor::from_fn(&[c], |_| {
            let dt = rng.uniform_range(cfg.dt_min.ln(), cfg.dt_max.ln()).exp();
            let b = if cfg.delta_softplus {
                // inverse of softplus
                dt + (-(-dt).exp_m1()).ln()
            } else {
                dt
            };
            T::from_f64_lossy(b)
        });
        Self {
            a_log: Parameter::new(format!("{prefix}.a_log"), a_log),
            d: Parameter::ones(format!("{prefix}.d"), &[c]),
            w_b,
            w_c,
            w_dt_down,
            w_dt_up,
            dt_bias: Parameter::new(format!("{prefix}.dt_bias"), dt_bias),
            delta_softplus: cfg.delta_softplus,
        }
    }

    pub fn channels(&self) -> usize {
        self.d.value.dim(0)
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.value.dim(1)
    }

    pub fn dt_rank(&self) -> usize {
        self.w_dt_down.value.dim(0)
    }

    /// `A = -exp(a_log)`, strictly negative.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.value.map(|v| -v.exp())
    }

    pub fn delta_activation(&self, z: T) -> T {
        if self.delta_softplus {
            softplus(z)
        } else {
            z
        }
    }

    fn all(&self) -> [&Parameter<T>; 7] {
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

    fn all_mut(&mut self) -> [&mut Parameter<T>; 7] {
        [
            &mut self.a_log,
            &mut self.d,
            &mut self.w_b,
            &mut self.w_c,
            &mut self.w_dt_down,
            &mut self.w_dt_up,
            &mut self.dt_bias,
        ]
    }
}

impl<T: Scalar> Module<T> for SsmDirectionParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.all().into_iter().for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.all_mut().into_iter().for_each(f);
    }
}
