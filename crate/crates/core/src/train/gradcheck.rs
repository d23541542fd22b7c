//! Central-difference verification of analytic gradients in f64.
//!
//! Every check evaluates a scalar loss `L(theta)` and compares, per sampled
//! coordinate, the analytic derivative `a` with `n = (L(theta+h) - L(theta-h)) / 2h`
//! using `|a - n| / max(|a|, |n|, REL_FLOOR)`.
//!
//! A coordinate whose central differences at `h` and `h/2` disagree has a
//! non-differentiable point (ReLU-style kink, max-pool switch) within `h`
//! and is reported as skipped. The test never looks at the analytic value,
//! so a wrong gradient cannot hide behind it; a report with more than
//! [`MAX_SKIP_FRACTION`] of its coordinates skipped fails.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cross_entropy_loss;
use crate::metrics::LabelMask;
use crate::models::{
    build_network, decoder_network, init_params, mbconv_network, se_network, MBConvSpec, ModelConfig, ModelKind, Mode,
    Network, ParamRole, ParamStore, SESpec,
};
use crate::tensor::{vjp, ActivationKind, ConvParams, Op, Shape, Tensor};

/// Denominator floor of the relative error. Below it the comparison is
/// effectively absolute (`tolerance * REL_FLOOR`), which stays well above the
/// f64 round-off of a central difference at `h = 1e-5` through a deep network.
pub const REL_FLOOR: f64 = 1e-5;

pub const MAX_SKIP_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter group (all when the group is smaller).
    pub coords_per_group: usize,
    /// Check this many coordinates drawn at random from the per-group samples
    /// instead of all of them; skipped coordinates are replaced while
    /// candidates remain.
    pub max_total_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            coords_per_group: 12,
            max_total_coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    /// Analytic and central-difference derivative at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub target: String,
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{:<40} {} max_rel_err={:.3e} coords={} skipped={}",
            self.target,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.checked(),
            self.groups.iter().map(|g| g.skipped).sum::<usize>()
        )
    }
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[g]` against central differences of `loss` with respect
/// to `tensors[g]` for every group `g < analytic.len()`.
pub fn check_gradients(
    target: &str,
    names: &[String],
    mut tensors: Vec<Tensor<f64>>,
    analytic: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    seed: u64,
    loss: impl Fn(&[Tensor<f64>]) -> f64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (g, a) in analytic.iter().enumerate() {
        let n = a.numel();
        if n <= cfg.coords_per_group {
            coords.extend((0..n).map(|i| (g, i)));
        } else {
            let mut idx = sample(&mut rng, n, cfg.coords_per_group).into_vec();
            idx.sort_unstable();
            coords.extend(idx.into_iter().map(|i| (g, i)));
        }
    }
    let budget = cfg.max_total_coords.unwrap_or(coords.len());
    if budget < coords.len() {
        coords.shuffle(&mut rng);
    }

    let h = cfg.h;
    let mut groups: Vec<GroupReport> = analytic
        .iter()
        .enumerate()
        .map(|(g, _)| GroupReport {
            name: names.get(g).cloned().unwrap_or_else(|| format!("input{g}")),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            passed: true,
        })
        .collect();
    let mut checked_total = 0;
    for (g, i) in coords {
        if checked_total == budget {
            break;
        }
        let orig = tensors[g].data()[i];
        tensors[g].data_mut()[i] = orig + h;
        let fp = loss(&tensors);
        tensors[g].data_mut()[i] = orig - h;
        let fm = loss(&tensors);
        tensors[g].data_mut()[i] = orig;
        tensors[g].data_mut()[i] = orig + h / 2.0;
        let fp2 = loss(&tensors);
        tensors[g].data_mut()[i] = orig - h / 2.0;
        let fm2 = loss(&tensors);
        tensors[g].data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let half = (fp2 - fm2) / h;
        let rep = &mut groups[g];
        if relative_error(numeric, half) > cfg.tolerance / 2.0 {
            rep.skipped += 1;
            continue;
        }
        let err = relative_error(analytic[g].data()[i], numeric);
        rep.checked += 1;
        checked_total += 1;
        if err > rep.max_rel_err || rep.worst_index.is_none() {
            rep.max_rel_err = rep.max_rel_err.max(err);
            rep.worst_index = Some(i);
            rep.worst_analytic = analytic[g].data()[i];
            rep.worst_numeric = numeric;
        }
    }
    for rep in &mut groups {
        rep.passed = rep.max_rel_err < cfg.tolerance;
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let checked: usize = groups.iter().map(|g| g.checked).sum();
    let skipped: usize = groups.iter().map(|g| g.skipped).sum();
    let few_skips = skipped as f64 <= MAX_SKIP_FRACTION * (checked + skipped) as f64;
    GradCheckReport {
        target: target.to_string(),
        seed,
        tolerance: cfg.tolerance,
        passed: checked > 0 && few_skips && groups.iter().all(|g| g.passed),
        groups,
        max_rel_err,
    }
}

fn randn(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks `vjp(op)` with the linear loss `<op(inputs), r>` for a fixed random `r`.
pub fn check_op(target: &str, op: &Op, inputs: Vec<Tensor<f64>>, cfg: &GradCheckConfig, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = op.forward(&refs).unwrap_or_else(|e| panic!("{target}: {e}"));
    let r = randn(out.shape(), 1.0, &mut rng);
    let grads = vjp(op, &refs, &r).unwrap_or_else(|e| panic!("{target}: {e}"));
    let names: Vec<String> = (0..grads.len()).map(|i| format!("input{i}")).collect();
    check_gradients(target, &names, inputs, &grads, cfg, seed, |ts| {
        let refs: Vec<&Tensor<f64>> = ts.iter().collect();
        dot(&op.forward(&refs).expect("forward succeeded once"), &r)
    })
}

/// Output-space loss used by network checks.
#[derive(Clone, Debug)]
pub enum NetLoss {
    /// `<output, r>` for a fixed random `r`.
    Projection,
    /// Pixel-wise cross-entropy against a fixed random target.
    CrossEntropy,
}

/// Checks `Network::backward` for the input and every learnable parameter.
pub fn check_network(
    target: &str,
    net: &Network,
    params: &ParamStore<f64>,
    input: Tensor<f64>,
    mode: Mode,
    loss_kind: NetLoss,
    cfg: &GradCheckConfig,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x1055));
    let trace = net
        .forward(params, &input, mode)
        .unwrap_or_else(|e| panic!("{target}: {e}"));
    let out_shape = trace.output().shape();
    let r = randn(out_shape, 1.0, &mut rng);
    let labels = LabelMask::new(
        out_shape.n,
        out_shape.h,
        out_shape.w,
        (0..out_shape.n * out_shape.plane())
            .map(|_| rng.random_range(0..out_shape.c) as u8)
            .collect(),
    );
    let eval_loss = |out: &Tensor<f64>| -> (f64, Tensor<f64>) {
        match loss_kind {
            NetLoss::Projection => (dot(out, &r), r.clone()),
            NetLoss::CrossEntropy => {
                let l = cross_entropy_loss(out, &labels, 255).expect("valid labels");
                (l.loss, l.grad)
            }
        }
    };
    let (_, cot) = eval_loss(trace.output());
    let grads = net
        .backward(params, &trace, &cot)
        .unwrap_or_else(|e| panic!("{target}: {e}"));

    let learnable: Vec<String> = {
        let mut v: Vec<String> = net
            .param_specs()
            .into_iter()
            .filter(|s| s.role.learnable())
            .map(|s| s.name)
            .collect();
        v.sort();
        v
    };
    let mut names = vec!["input".to_string()];
    names.extend(learnable.iter().cloned());
    let mut tensors = vec![input];
    let mut analytic = vec![grads.input];
    for n in &learnable {
        tensors.push(params.get(n).expect("learnable param present").clone());
        analytic.push(grads.params[n].clone());
    }
    check_gradients(target, &names, tensors, &analytic, cfg, seed, |ts| {
        let mut p = params.clone();
        for (n, t) in learnable.iter().zip(&ts[1..]) {
            p.insert(n.clone(), t.clone());
        }
        let out = net.forward(&p, &ts[0], mode).expect("forward succeeded once").into_output();
        eval_loss(&out).0
    })
}

/// He-initialized parameters in f64 with non-trivial biases and batch-norm
/// statistics, so that every parameter influences the loss.
pub fn random_params(net: &Network, seed: u64) -> ParamStore<f64> {
    let mut p = init_params(net, seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let specs = {
        let mut s = net.param_specs();
        s.sort_by(|a, b| a.name.cmp(&b.name));
        s
    };
    for spec in specs {
        let t = match spec.role {
            ParamRole::Weight => continue,
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => randn(spec.shape, 0.1, &mut rng),
            ParamRole::Gamma | ParamRole::RunningVar => Tensor::rand_uniform(spec.shape, 0.5, 1.5, &mut rng),
        };
        p.insert(spec.name, t);
    }
    p
}

fn bn_inputs(x: Tensor<f64>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let c = x.shape().c;
    vec![
        x,
        Tensor::rand_uniform(Shape::vector(c), 0.5, 1.5, rng),
        randn(Shape::vector(c), 0.3, rng),
        randn(Shape::vector(c), 0.3, rng),
        Tensor::rand_uniform(Shape::vector(c), 0.5, 1.5, rng),
    ]
}

/// Every differentiable primitive, plus the cross-entropy loss.
pub fn suite_ops(seed: u64, cfg: &GradCheckConfig) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases: Vec<(String, Op, Vec<Tensor<f64>>)> = vec![
        (
            "conv2d 3x3 s1 p1 +bias".into(),
            Op::Conv2d(ConvParams::new(3, 1, 1, 1)),
            vec![
                randn(Shape::new(2, 3, 6, 6), 1.0, rng),
                randn(Shape::new(4, 3, 3, 3), 0.3, rng),
                randn(Shape::vector(4), 0.3, rng),
            ],
        ),
        (
            "conv2d 3x3 s2 p1".into(),
            Op::Conv2d(ConvParams::new(3, 2, 1, 1)),
            vec![randn(Shape::new(1, 4, 7, 7), 1.0, rng), randn(Shape::new(6, 4, 3, 3), 0.3, rng)],
        ),
        (
            "conv2d depthwise 5x5 s2 p2".into(),
            Op::Conv2d(ConvParams::new(5, 2, 2, 4)),
            vec![randn(Shape::new(2, 4, 6, 6), 1.0, rng), randn(Shape::new(4, 1, 5, 5), 0.3, rng)],
        ),
        (
            "conv2d 1x1 groups=2 +bias".into(),
            Op::Conv2d(ConvParams::new(1, 1, 0, 2)),
            vec![
                randn(Shape::new(2, 4, 3, 3), 1.0, rng),
                randn(Shape::new(6, 2, 1, 1), 0.5, rng),
                randn(Shape::vector(6), 0.3, rng),
            ],
        ),
        (
            "transpose_conv2x2 +bias".into(),
            Op::TransposeConv2x2,
            vec![
                randn(Shape::new(2, 3, 3, 3), 1.0, rng),
                randn(Shape::new(3, 4, 2, 2), 0.5, rng),
                randn(Shape::vector(4), 0.3, rng),
            ],
        ),
        (
            "batchnorm2d training".into(),
            Op::BatchNorm {
                eps: 1e-5,
                training: true,
            },
            bn_inputs(randn(Shape::new(3, 4, 3, 3), 1.0, rng), rng),
        ),
        (
            "batchnorm2d inference".into(),
            Op::BatchNorm {
                eps: 1e-5,
                training: false,
            },
            bn_inputs(randn(Shape::new(2, 4, 3, 3), 1.0, rng), rng),
        ),
    ];
    for kind in ActivationKind::ALL {
        cases.push((
            format!("activation {}", kind.name()),
            Op::Activation(kind),
            vec![randn(Shape::new(2, 3, 4, 4), 3.0, rng)],
        ));
    }
    cases.extend([
        ("maxpool2x2".into(), Op::MaxPool2x2, vec![randn(Shape::new(2, 3, 6, 6), 1.0, rng)]),
        ("global_avg_pool".into(), Op::GlobalAvgPool, vec![randn(Shape::new(2, 3, 5, 5), 1.0, rng)]),
        (
            "concat_channels".into(),
            Op::ConcatChannels,
            vec![randn(Shape::new(2, 3, 4, 4), 1.0, rng), randn(Shape::new(2, 2, 4, 4), 1.0, rng)],
        ),
        ("softmax_channels".into(), Op::SoftmaxChannels, vec![randn(Shape::new(2, 4, 3, 3), 2.0, rng)]),
        (
            "elementwise_add".into(),
            Op::Add,
            vec![randn(Shape::new(2, 3, 4, 4), 1.0, rng), randn(Shape::new(2, 3, 4, 4), 1.0, rng)],
        ),
        (
            "scale_channels".into(),
            Op::ScaleChannels,
            vec![randn(Shape::new(2, 3, 4, 4), 1.0, rng), randn(Shape::new(2, 3, 1, 1), 1.0, rng)],
        ),
    ]);
    let mut reports: Vec<GradCheckReport> = cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, op, inputs))| check_op(&format!("op/{name}"), &op, inputs, cfg, seed.wrapping_add(i as u64)))
        .collect();
    reports.push(check_cross_entropy(seed, cfg));
    reports
}

/// Cross-entropy cotangent against differences of the loss itself (1x3x4x4).
pub fn check_cross_entropy(seed: u64, cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xce));
    let logits = randn(Shape::new(1, 3, 4, 4), 2.0, &mut rng);
    let mut labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..3u8)).collect();
    labels[5] = 255;
    let target = LabelMask::new(1, 4, 4, labels);
    let grad = cross_entropy_loss(&logits, &target, 255).expect("valid").grad;
    check_gradients(
        "loss/cross_entropy",
        &["logits".to_string()],
        vec![logits],
        &[grad],
        &GradCheckConfig {
            coords_per_group: 48,
            ..*cfg
        },
        seed,
        |ts| cross_entropy_loss(&ts[0], &target, 255).expect("valid").loss,
    )
}

/// MBConv (several geometries), squeeze-excitation and decoder blocks, with
/// batch norm in both modes.
pub fn suite_blocks(seed: u64, cfg: &GradCheckConfig) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xb10c));
    let mut reports = Vec::new();
    let mbconvs = [
        (
            "mbconv t=6 k3 s1 se hard_swish (residual)",
            MBConvSpec::new(8, 6, 8, 3, 1, true, ActivationKind::HardSwish),
            Shape::new(2, 8, 6, 6),
        ),
        (
            "mbconv t=1 k5 s2 relu6",
            MBConvSpec::new(8, 1, 12, 5, 2, false, ActivationKind::Relu6),
            Shape::new(2, 8, 8, 8),
        ),
        (
            "mbconv t=4 k3 s2 se relu",
            MBConvSpec::new(6, 4, 10, 3, 2, true, ActivationKind::Relu),
            Shape::new(2, 6, 8, 8),
        ),
    ];
    for (i, (name, spec, shape)) in mbconvs.into_iter().enumerate() {
        let net = mbconv_network(&spec).expect("valid block");
        for mode in [Mode::Train, Mode::Eval] {
            let s = seed.wrapping_add(100 + i as u64);
            reports.push(check_network(
                &format!("block/{name} {mode:?}"),
                &net,
                &random_params(&net, s),
                randn(shape, 1.0, &mut rng),
                mode,
                NetLoss::Projection,
                cfg,
                s,
            ));
        }
    }
    let se = se_network(&SESpec::new(8, 4)).expect("valid SE");
    reports.push(check_network(
        "block/squeeze_excite c=8 r=4",
        &se,
        &random_params(&se, seed),
        randn(Shape::new(2, 8, 5, 5), 1.0, &mut rng),
        Mode::Eval,
        NetLoss::Projection,
        cfg,
        seed,
    ));
    let dec = decoder_network(8, 4, 6);
    for mode in [Mode::Train, Mode::Eval] {
        reports.push(check_network(
            &format!("block/decoder in=8 skip=4 width=6 {mode:?}"),
            &dec,
            &random_params(&dec, seed.wrapping_add(7)),
            randn(Shape::new(2, 8, 3, 3), 1.0, &mut rng),
            mode,
            NetLoss::Projection,
            cfg,
            seed.wrapping_add(7),
        ));
    }
    reports
}

/// Small configurations used for whole-model checks.
pub fn toy_umbv2() -> ModelConfig {
    ModelConfig {
        decoder_widths: vec![16, 8, 8, 8, 8],
        max_blocks_per_stage: Some(1),
        ..ModelConfig::for_kind(ModelKind::Umbv2, 3)
    }
}

pub fn toy_unet() -> ModelConfig {
    ModelConfig::unet(4, 2, 3)
}

/// Whole networks with a cross-entropy loss: a single conv, a toy UNet and
/// a toy UMBV2 (one block per encoder stage), the latter over 50 sampled
/// coordinates.
pub fn suite_model(seed: u64, cfg: &GradCheckConfig) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x30de1));
    let mut reports = Vec::new();

    let mut b = crate::models::NetBuilder::new(2);
    let x = b.input();
    b.conv("conv", x, 3, ConvParams::same(3, 1, 1), true);
    let conv = b.finish();
    reports.push(check_network(
        "model/conv3x3 + cross_entropy 1x2x6x6",
        &conv,
        &random_params(&conv, seed),
        randn(Shape::new(1, 2, 6, 6), 1.0, &mut rng),
        Mode::Train,
        NetLoss::CrossEntropy,
        cfg,
        seed,
    ));

    let unet = build_network(&toy_unet()).expect("valid toy unet");
    reports.push(check_network(
        "model/unet base=4 depth=2 Eval",
        &unet,
        &random_params(&unet, seed),
        Tensor::rand_uniform(Shape::new(2, 3, 8, 8), 0.0, 1.0, &mut rng),
        Mode::Eval,
        NetLoss::CrossEntropy,
        &GradCheckConfig {
            coords_per_group: 2,
            max_total_coords: Some(50),
            ..*cfg
        },
        seed,
    ));

    let umbv2 = build_network(&toy_umbv2()).expect("valid toy umbv2");
    reports.push(check_network(
        "model/umbv2 one block per stage Eval",
        &umbv2,
        &random_params(&umbv2, seed),
        Tensor::rand_uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng),
        Mode::Eval,
        NetLoss::CrossEntropy,
        &GradCheckConfig {
            coords_per_group: 1,
            max_total_coords: Some(50),
            ..*cfg
        },
        seed,
    ));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let d = central_difference(|t| t * t, 1.0, 1e-5);
        assert!((d - 2.0).abs() < 1e-7);
        assert!(relative_error(2.0, d) < 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::<f64>::from_vec(Shape::vector(3), vec![0.5, -1.0, 2.0]).unwrap();
        let wrong = Tensor::<f64>::from_vec(Shape::vector(3), vec![1.0, -2.0, 4.1]).unwrap();
        let rep = check_gradients("sq", &["x".into()], vec![x], &[wrong], &GradCheckConfig::default(), 0, |t| {
            t[0].data().iter().map(|v| v * v).sum()
        });
        assert!(!rep.passed);
        assert_eq!(rep.groups[0].worst_index, Some(2));
    }

    #[test]
    fn skips_kinks() {
        // One coordinate sits 3e-6 from the ReLU kink, inside +-h but outside +-h/2.
        let mut xs: Vec<f64> = (1..=10).map(|i| i as f64 * 0.1).collect();
        xs[0] = -3e-6;
        let g: Vec<f64> = xs.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let x = Tensor::<f64>::from_vec(Shape::vector(10), xs).unwrap();
        let g = Tensor::<f64>::from_vec(Shape::vector(10), g).unwrap();
        let relu = |t: &[Tensor<f64>]| t[0].data().iter().map(|v| v.max(0.0)).sum();
        let rep = check_gradients("relu", &["x".into()], vec![x.clone()], std::slice::from_ref(&g), &GradCheckConfig::default(), 0, relu);
        assert_eq!(rep.groups[0].skipped, 1);
        assert!(rep.passed);
        // Too many skipped coordinates fail the report.
        let kinked = Tensor::<f64>::from_vec(Shape::vector(2), vec![-3e-6, 3e-6]).unwrap();
        let kg = Tensor::<f64>::from_vec(Shape::vector(2), vec![0.0, 1.0]).unwrap();
        let rep = check_gradients("relu", &["x".into()], vec![kinked], &[kg], &GradCheckConfig::default(), 0, relu);
        assert!(!rep.passed);
    }
}
