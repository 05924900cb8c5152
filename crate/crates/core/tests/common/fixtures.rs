//! Hand-derived oracles shared by the module tests and the acceptance suite.

use cmscan::model::ModelConfig;
use cmscan::numerics::{Module, Rng};
use cmscan::scan::{CmSs2d, SsmConfig};

/// Hand-written straight-line transcript of the 2x2, C = N = 1 fixture:
/// A = -1, delta = ln 2 (no softplus), B_j = x_j / ln 2, C_j = x_j, D = 0.5.
pub fn transcript_2x2(fr: &[f64; 4], ft: &[f64; 4]) -> ([f64; 4], [f64; 4]) {
    let ln2 = std::f64::consts::LN_2;
    let orders = [[0, 1, 2, 3], [0, 2, 1, 3], [3, 2, 1, 0], [3, 1, 2, 0]];
    let mut out_r = [0.0; 4];
    let mut out_t = [0.0; 4];
    for order in orders {
        let (mut hr, mut ht) = (0.0f64, 0.0f64);
        for &p in &order {
            let (r, t) = (fr[p], ft[p]);
            let abar_r = (-ln2).exp();
            let abar_t = (-ln2).exp();
            let new_r = abar_r * ht + ln2 * (r / ln2) * r;
            let new_t = abar_t * hr + ln2 * (t / ln2) * t;
            hr = new_r;
            ht = new_t;
            out_r[p] += 0.5 * r + r * hr;
            out_t[p] += 0.5 * t + t * ht;
        }
    }
    (out_r, out_t)
}

pub fn fixture_block() -> CmSs2d<f64> {
    let ln2 = std::f64::consts::LN_2;
    let cfg = SsmConfig {
        state_dim: 1,
        dt_rank: Some(1),
        delta_softplus: false,
        ..SsmConfig::default()
    };
    let mut block = CmSs2d::<f64>::new("f", 1, &cfg, &mut Rng::new(0)).unwrap();
    block.visit_params_mut(&mut |p| {
        let v = match p.name.rsplit('.').next().unwrap() {
            "a_log" => 0.0,
            "d" => 0.5,
            "w_b" => 1.0 / ln2,
            "w_c" => 1.0,
            "w_dt_down" => 0.0,
            "w_dt_up" => 0.0,
            "dt_bias" => ln2,
            other => panic!("{other}"),
        };
        p.value.fill(v);
    });
    block
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 8, 16, 32],
        num_classes: 6,
        decoder_hidden: 16,
        ssm: SsmConfig {
            state_dim: 4,
            ..SsmConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Hand spreadsheet of `(prefix, FLOPs, params)` for [`tiny_config`] at 32x32.
///
/// Per-stage pixels are 64, 16, 4, 1 and the stem runs on 256. The dt rank is 1
/// at every stage.
pub const TINY_HAND_COUNT: [(&str, u64, u64); 11] = [
    ("enc_rgb.", 181_056, 18_788),
    ("enc_thermal.", 181_056, 18_788),
    ("fusion1.scan.", 140_800, 256),
    ("fusion2.scan.", 70_400, 512),
    ("fusion3.scan.", 35_200, 1_024),
    ("fusion4.scan.", 18_624, 2_304),
    ("fusion1.", 33_280 + 140_800 + 44_544, 216 + 256 + 352),
    ("fusion2.", 22_784 + 70_400 + 43_776, 624 + 512 + 1_376),
    ("fusion3.", 17_536 + 35_200 + 43_392, 2_016 + 1_024 + 5_440),
    ("fusion4.", 14_912 + 18_624 + 43_200, 7_104 + 2_304 + 21_632),
    ("decoder.", 242_688, 2_166),
];

/// `(FLOPs, params)` of the whole tiny model.
pub const TINY_HAND_TOTAL: (u64, u64) = (1_133_248, 82_598);
