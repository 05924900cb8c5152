mod common;

use cmscan::data::{generate_scenes, LabelMap, SamplePair, SceneSpec};
use cmscan::model::fusion::{
    build_fusion, CmSsaBlock, FuseInputs, FusionConfig, FusionContext, GateMode,
};
use cmscan::model::layers::{BN_EPS, LN_EPS};
use cmscan::model::{
    build_optimizer, evaluate_model, predict, total_loss, Batch, Decoder, FusionStrategy, Layer,
    ModelConfig, OptimizerConfig, Segmenter, TrainState, Trainer,
};
use cmscan::numerics::gradcheck::{grad_check, random_like, weighted_sum, DEFAULT_DELTA};
use cmscan::numerics::ops::{activation, conv2d_batch, Activation, NormMode};
use cmscan::numerics::{Module, Rng, Scalar, Tensor};
use cmscan::scan::SsmConfig;
use common::{check_module, param_grads, param_values, sampled_grad_check, set_params, zero_grads};

fn ssm(n: usize) -> SsmConfig {
    SsmConfig {
        state_dim: n,
        ..SsmConfig::default()
    }
}

fn block<T: Scalar>(
    c: usize,
    fusion: &FusionConfig,
    with_scan: bool,
    rng: &mut Rng,
) -> CmSsaBlock<T> {
    let ssm = ssm(2);
    let ctx = FusionContext {
        prefix: "f",
        channels: c,
        ssm: &ssm,
        fusion,
    };
    let mut b = CmSsaBlock::new(&ctx, with_scan, rng).unwrap();
    // non-trivial norm affine terms and step sizes
    b.visit_params_mut(&mut |p| {
        let n = &p.name;
        if n.ends_with("gamma")
            || n.ends_with("beta")
            || n.ends_with("dt_bias")
            || n.ends_with(".bias")
        {
            p.value = Tensor::from_fn(p.value.shape(), |_| {
                T::from_f64_lossy(rng.uniform_range(-0.5, 1.0))
            });
        }
    });
    b
}

fn zero_param(m: &mut dyn Module<f64>, suffix: &str) {
    m.visit_params_mut(&mut |p| {
        if p.name.contains(suffix) {
            p.value.fill(0.0);
        }
    });
}

#[test]
fn zero_out_proj_gives_residual_identity() {
    let mut rng = Rng::new(1);
    let mut b = block::<f64>(4, &FusionConfig::default(), true, &mut rng);
    zero_param(&mut b, "out_proj");
    let r = random_like(&[2, 4, 4, 4], &mut rng);
    let t = random_like(&[2, 4, 4, 4], &mut rng);
    let tr = b.forward_traced(&r, &t, NormMode::Train).unwrap();
    assert_eq!(tr.g_r.data(), r.data());
    assert_eq!(tr.g_t.data(), t.data());
}

#[test]
fn zero_final_convs_collapse_the_block() {
    let mut rng = Rng::new(2);
    let mut b = block::<f64>(4, &FusionConfig::default(), true, &mut rng);
    for s in ["out_proj", "local.conv", "fuse.conv", "fuse.bn.beta"] {
        zero_param(&mut b, s);
    }
    let r = random_like(&[1, 4, 4, 4], &mut rng);
    let t = random_like(&[1, 4, 4, 4], &mut rng);
    let y = b.forward(&r, &t, NormMode::Eval).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn tied_branches_are_symmetric_under_modality_swap() {
    let mut rng = Rng::new(3);
    let mut b = block::<f64>(4, &FusionConfig::default(), true, &mut rng);
    let rgb = param_values(&b.rgb.in_proj);
    set_params(&mut b.thermal.in_proj, &rgb);
    set_params(&mut b.thermal.dw, &param_values(&b.rgb.dw));
    set_params(&mut b.thermal.ln, &param_values(&b.rgb.ln));
    set_params(&mut b.thermal.out_proj, &param_values(&b.rgb.out_proj));
    set_params(&mut b.thermal.gate, &param_values(&b.rgb.gate));
    let r = random_like(&[1, 4, 3, 5], &mut rng);
    let t = random_like(&[1, 4, 3, 5], &mut rng);
    let a = b.forward_traced(&r, &t, NormMode::Eval).unwrap();
    let s = b.forward_traced(&t, &r, NormMode::Eval).unwrap();
    assert!(a.g_r.max_rel_diff(&s.g_t, 1e-12) < 1e-12);
    assert!(a.g_t.max_rel_diff(&s.g_r, 1e-12) < 1e-12);
}

fn silu(x: &Tensor<f64>) -> Tensor<f64> {
    activation(x, Activation::Silu)
}

fn conv(layer: &cmscan::model::Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    conv2d_batch(
        x,
        &layer.weight.value,
        layer.bias.as_ref().map(|b| &b.value),
        layer.spec,
    )
    .unwrap()
}

/// Channel layer norm written out per pixel.
fn layer_norm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let mut y = x.clone();
    for n in 0..b {
        for p in 0..hw {
            let v: Vec<f64> = (0..c).map(|ch| x.data()[(n * c + ch) * hw + p]).collect();
            let mean = v.iter().sum::<f64>() / c as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                y.data_mut()[(n * c + ch) * hw + p] =
                    (v[ch] - mean) / (var + LN_EPS).sqrt() * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    y
}

/// Eval-mode conv, batch norm with running statistics, ReLU.
fn cbr(layer: &cmscan::model::ConvBnRelu<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let y = conv(&layer.conv, x);
    let c = y.dim(1);
    let hw = y.dim(2) * y.dim(3);
    let bn = &layer.bn;
    Tensor::from_fn(y.shape(), |i| {
        let ch = (i / hw) % c;
        let v = (y.data()[i] - bn.running_mean.value.data()[ch])
            / (bn.running_var.value.data()[ch] + BN_EPS).sqrt();
        (v * bn.gamma.value.data()[ch] + bn.beta.value.data()[ch]).max(0.0)
    })
}

#[test]
fn block_equals_composition_of_primitives() {
    let mut rng = Rng::new(4);
    let mut b = block::<f64>(4, &FusionConfig::default(), true, &mut rng);
    b.visit_buffers_mut(&mut |buf| {
        buf.value = Tensor::from_fn(buf.value.shape(), |_| rng.uniform_range(0.2, 1.5));
    });
    let r = random_like(&[1, 4, 4, 4], &mut rng);
    let t = random_like(&[1, 4, 4, 4], &mut rng);
    let got = b.forward(&r, &t, NormMode::Eval).unwrap();

    let f_r = silu(&conv(&b.rgb.dw, &conv(&b.rgb.in_proj, &r)));
    let f_t = silu(&conv(&b.thermal.dw, &conv(&b.thermal.in_proj, &t)));
    let scan = b.scan.as_ref().unwrap();
    let (s_r, s_t, _) = scan.forward(&f_r.index0(0), &f_t.index0(0)).unwrap();
    let (s_r, s_t) = (
        Tensor::stack(&[s_r]).unwrap(),
        Tensor::stack(&[s_t]).unwrap(),
    );
    let gated =
        |br: &cmscan::model::fusion::ModalityBranch<f64>, x: &Tensor<f64>, s: &Tensor<f64>| {
            let y = conv(
                &br.out_proj,
                &layer_norm(s, &br.ln.gamma.value, &br.ln.beta.value),
            );
            x.add(&y.mul(&silu(&conv(&br.gate, x))).unwrap()).unwrap()
        };
    let g_r = gated(&b.rgb, &r, &s_r);
    let g_t = gated(&b.thermal, &t, &s_t);
    let local = cbr(&b.local, &Tensor::concat1(&[&r, &t]).unwrap());
    let want = cbr(&b.fuse, &Tensor::concat1(&[&g_r, &g_t, &local]).unwrap());
    assert!(
        got.max_rel_diff(&want, 1e-12) < 1e-10,
        "{}",
        got.max_rel_diff(&want, 1e-12)
    );
}

fn check_fusion(f: &mut dyn FusionStrategy<f64>, c: usize, tol: f64, seed: u64) {
    let mut rng = Rng::new(seed);
    let shape = [2, c, 4, 4];
    let inputs = [random_like(&shape, &mut rng), random_like(&shape, &mut rng)];
    let proj = random_like(&shape, &mut rng);
    let rep = check_module(
        f,
        &inputs,
        |m, x| weighted_sum(&m.forward(&x[0], &x[1], NormMode::Train).unwrap(), &proj),
        |m, x| {
            m.forward(&x[0], &x[1], NormMode::Train).unwrap();
            let (a, b) = m.backward(&proj).unwrap();
            vec![a, b]
        },
    );
    assert!(rep.coordinates > 100);
    rep.ensure(tol).unwrap();
}

#[test]
fn cm_ssa_block_adjoint_matches_finite_differences() {
    let mut rng = Rng::new(5);
    check_fusion(
        &mut block::<f64>(4, &FusionConfig::default(), true, &mut rng),
        4,
        1e-5,
        50,
    );
}

#[test]
fn literal_variants_adjoint_matches_finite_differences() {
    let mut rng = Rng::new(6);
    let cfg = FusionConfig {
        gate_mode: GateMode::Add,
        fuse_inputs: FuseInputs::Raw,
        ..FusionConfig::default()
    };
    check_fusion(&mut block::<f64>(3, &cfg, true, &mut rng), 3, 1e-5, 60);
}

#[test]
fn ablation_strategies_adjoint_matches_finite_differences() {
    for s in ["no_scan", "addition"] {
        let ssm = ssm(2);
        let fusion = FusionConfig {
            strategy: s.into(),
            ..FusionConfig::default()
        };
        let ctx = FusionContext {
            prefix: "f",
            channels: 4,
            ssm: &ssm,
            fusion: &fusion,
        };
        let mut f = build_fusion::<f64>(&ctx, &mut Rng::new(7)).unwrap();
        assert_eq!(f.name(), s);
        check_fusion(f.as_mut(), 4, 1e-5, 70);
    }
}

#[test]
fn decoder_adjoint_matches_finite_differences() {
    let mut rng = Rng::new(8);
    let widths = [3, 4, 5, 6];
    let mut dec = Decoder::<f64>::new("d", &widths, 5, 3, &mut rng);
    let feats: Vec<Tensor<f64>> = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| random_like(&[2, c, 8 >> i, 8 >> i], &mut rng))
        .collect();
    let proj = random_like(&[2, 3, 32, 32], &mut rng);
    let rep = check_module(
        &mut dec,
        &feats,
        |m, x| weighted_sum(&m.forward(x, NormMode::Train).unwrap(), &proj),
        |m, x| {
            m.forward(x, NormMode::Train).unwrap();
            m.backward(&proj).unwrap()
        },
    );
    rep.ensure(1e-5).unwrap();
}

fn labels_with_ignore(n: usize, k: usize, rng: &mut Rng) -> Vec<u8> {
    (0..n)
        .map(|_| {
            if rng.bernoulli(0.1) {
                255
            } else {
                rng.int_inclusive(0, k - 1) as u8
            }
        })
        .collect()
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = Rng::new(9);
    let logits = random_like(&[2, 4, 3, 3], &mut rng).scale(2.0);
    let labels = labels_with_ignore(18, 4, &mut rng);
    let weights = [0.5, 1.0, 2.0, 1.5];
    let rep = total_loss(&logits, &labels, &weights).unwrap();
    let check = grad_check(
        |x| total_loss(&x[0], &labels, &weights).unwrap().total,
        &[logits],
        &[rep.d_logits],
        DEFAULT_DELTA,
    )
    .unwrap();
    check.ensure(1e-6).unwrap();
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 8, 16, 32],
        num_classes: 6,
        decoder_hidden: 16,
        ssm: ssm(2),
        ..ModelConfig::default()
    }
}

#[test]
fn end_to_end_gradient_on_sampled_coordinates() {
    let mut rng = Rng::new(10);
    let mut model = Segmenter::<f64>::new(&tiny_model_config(), &Rng::new(11)).unwrap();
    let rgb = random_like(&[2, 3, 32, 32], &mut rng);
    let thermal = random_like(&[2, 3, 32, 32], &mut rng);
    let labels = labels_with_ignore(2 * 32 * 32, 6, &mut rng);
    let weights = [1.0, 1.2, 0.8, 1.1, 0.9, 1.3];

    zero_grads(&mut model);
    let logits = model.forward(&rgb, &thermal, NormMode::Train).unwrap();
    let rep = total_loss(&logits, &labels, &weights).unwrap();
    let (d_rgb, d_thermal) = model.backward(&rep.d_logits).unwrap();
    let mut analytic = vec![d_rgb, d_thermal];
    analytic.extend(param_grads(&model));
    let mut values = vec![rgb, thermal];
    values.extend(param_values(&model));

    let check = sampled_grad_check(
        |x| {
            set_params(&mut model, &x[2..]);
            let logits = model.forward(&x[0], &x[1], NormMode::Train).unwrap();
            total_loss(&logits, &labels, &weights).unwrap().total
        },
        &values,
        &analytic,
        3,
        &mut rng,
    );
    assert!(check.coordinates > 300);
    check.ensure(1e-5).unwrap();
}

fn tiny_scenes(n: usize, seed: u64) -> Vec<SamplePair> {
    let spec = SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    };
    generate_scenes(&spec, &Rng::new(seed), n).unwrap()
}

fn tiny_trainer(lr: f64, seed: u64) -> Trainer<f32> {
    let model = Segmenter::<f32>::new(&tiny_model_config(), &Rng::new(seed)).unwrap();
    let optimizer = build_optimizer(&model, &OptimizerConfig::default()).unwrap();
    Trainer {
        model,
        optimizer,
        state: TrainState {
            step: 0,
            max_iter: 20,
            base_lr: lr,
            power: 0.9,
            rng: Rng::new(seed),
        },
        class_weights: vec![1.0; 6],
    }
}

fn batch(samples: &[SamplePair]) -> Batch<f32> {
    Batch::from_samples(&samples.iter().collect::<Vec<_>>(), false).unwrap()
}

fn f32_params(m: &Segmenter<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p.value.data().to_vec()));
    out
}

#[test]
fn training_is_deterministic() {
    let data = tiny_scenes(4, 0);
    let mut a = tiny_trainer(1e-3, 5);
    let mut b = tiny_trainer(1e-3, 5);
    for _ in 0..3 {
        let ra = a.train_step(&batch(&data)).unwrap();
        let rb = b.train_step(&batch(&data)).unwrap();
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
    }
    assert_eq!(f32_params(&a.model), f32_params(&b.model));
}

#[test]
fn zero_learning_rate_leaves_parameters_and_loss_unchanged() {
    let data = tiny_scenes(2, 1);
    let mut tr = tiny_trainer(0.0, 6);
    let before = f32_params(&tr.model);
    let l1 = tr.train_step(&batch(&data)).unwrap().loss;
    let l2 = tr.train_step(&batch(&data)).unwrap().loss;
    assert_eq!(f32_params(&tr.model), before);
    assert_eq!(l1.to_bits(), l2.to_bits());
}

#[test]
fn smoothed_loss_decreases_over_twenty_steps() {
    let data = generate_scenes(&SceneSpec::default(), &Rng::new(2), 4).unwrap();
    let cfg = ModelConfig::default();
    let model = Segmenter::<f32>::new(&cfg, &Rng::new(7)).unwrap();
    let optimizer = build_optimizer(&model, &OptimizerConfig::default()).unwrap();
    let mut tr = Trainer {
        model,
        optimizer,
        state: TrainState {
            step: 0,
            max_iter: 20,
            base_lr: 2e-3,
            power: 0.9,
            rng: Rng::new(7),
        },
        class_weights: vec![1.0; 6],
    };
    let b = batch(&data);
    let losses: Vec<f64> = (0..20).map(|_| tr.train_step(&b).unwrap().loss).collect();
    let smooth: Vec<f64> = losses
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    assert!(smooth.windows(2).all(|p| p[1] < p[0]), "{losses:?}");
}

#[test]
fn prediction_and_evaluation_shapes() {
    let data = tiny_scenes(3, 3);
    let mut tr = tiny_trainer(1e-3, 8);
    let map: LabelMap = predict(&mut tr.model, &data[0].rgb, &data[0].thermal).unwrap();
    assert_eq!((map.height, map.width), (32, 32));
    assert!(map.data.iter().all(|&k| k < 6));
    let (rep, cm) = evaluate_model(&mut tr.model, &data, 2, false).unwrap();
    assert_eq!(rep.per_class.len(), 6);
    assert_eq!(cm.total(), 3 * 32 * 32);
    assert!((0.0..=1.0).contains(&rep.miou));
}

#[test]
fn indivisible_input_is_a_config_error() {
    let mut m = Segmenter::<f32>::new(&tiny_model_config(), &Rng::new(0)).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 48, 32]);
    assert!(matches!(
        m.forward(&x, &x, NormMode::Eval),
        Err(cmscan::Error::Config(_))
    ));
}

#[test]
fn calibrate_mode_overwrites_running_statistics() {
    let mut rng = Rng::new(12);
    let mut layer = cmscan::model::BatchNorm2d::<f64>::new("bn", 2);
    let x = random_like(&[3, 2, 4, 4], &mut rng).scale(3.0);
    let y_train = layer.forward(&x, NormMode::Calibrate).unwrap();
    let want = layer.forward(&x, NormMode::Train).unwrap();
    assert!(y_train.max_rel_diff(&want, 1e-12) < 1e-12);
    layer.forward(&x, NormMode::Calibrate).unwrap();
    let m = layer.running_mean.value.data().to_vec();
    let firsts: Vec<f64> = (0..2)
        .map(|c| {
            (0..3)
                .flat_map(|n| x.slab(n)[c * 16..(c + 1) * 16].to_vec())
                .sum::<f64>()
                / 48.0
        })
        .collect();
    for c in 0..2 {
        assert!((m[c] - firsts[c]).abs() < 1e-12);
    }
}
