//! Independent reference implementations shared by the integration tests.
//! Everything here works on plain `Vec<f64>` in NCHW order and uses none
//! of the library's kernels.

#![allow(dead_code)]

use std::path::Path;

use lightseg::dataio::{load_manifest, synthesize_dataset, Dataset, SynthConfig};
use lightseg::models::{Model, ModelConfig};
use lightseg::train::{EpochLog, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct convolution. Every kernel tap is visited, out-of-bounds taps read
/// zero, and each visited tap counts as one multiply-accumulate.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    bias: Option<&[f64]>,
) -> (Vec<f64>, (usize, usize, usize, usize), u64) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    let mut macs = 0u64;
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for icl in 0..cin_g {
                        let ic = g * cin_g + icl;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x[((b * cin + ic) * h + iy as usize) * w + ix as usize]
                                };
                                acc += v * wt[((oc * cin_g + icl) * k + ky) * k + kx];
                                macs += 1;
                            }
                        }
                    }
                    out[((b * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, (n, cout, oh, ow), macs)
}

/// Stride-2 2x2 transposed convolution written as a gather: every output
/// pixel reads the single input pixel and kernel tap that reach it.
pub fn tconv_oracle(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
) -> (Vec<f64>, u64) {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * cout * oh * ow];
    let mut macs = 0u64;
    for b in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..cin {
                        let v = x[((b * cin + ic) * h + oy / 2) * w + ox / 2];
                        acc += v * wt[((ic * cout + oc) * 2 + oy % 2) * 2 + ox % 2];
                        macs += 1;
                    }
                    out[((b * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, macs)
}

pub fn maxpool_oracle(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[(p * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn gap_oracle(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    (0..n * c)
        .map(|p| x[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

/// IoU of class `k` by counting pixel sets directly:
/// |pred ∩ gt| / |pred ∪ gt|, pixels carrying `ignore` in gt excluded.
pub fn set_iou(pred: &[u8], gt: &[u8], k: u8, ignore: u8) -> Option<f64> {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore {
            continue;
        }
        let (a, b) = (p == k, g == k);
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

pub const TOY_STEPS: usize = 200;
pub const TOY_SEED: u64 = 7;

pub fn toy_dataset(dir: &Path) -> Dataset {
    let cfg = SynthConfig {
        n: 50,
        size: 32,
        classes: 3,
        seed: TOY_SEED,
    };
    let manifest = synthesize_dataset(&cfg, dir).expect("synthesize");
    load_manifest(manifest).expect("manifest").load_dataset().expect("dataset")
}

pub fn toy_trainer(steps: usize) -> Trainer {
    let model = Model::build(ModelConfig::unet(8, 2, 3)).unwrap().init_weights(TOY_SEED);
    let cfg = TrainConfig {
        steps: Some(steps),
        seed: TOY_SEED,
        ..Default::default()
    };
    Trainer::new(model, cfg).unwrap()
}

/// Epoch-mean loss is non-increasing over every 5-epoch window after
/// epoch 2, allowing a single uptick of at most 5% per window.
pub fn loss_trend_ok(logs: &[EpochLog]) -> bool {
    let tail: Vec<f64> = logs.iter().filter(|l| l.epoch > 2).map(|l| l.loss).collect();
    if tail.len() < 2 {
        return true;
    }
    let ups = |w: &[f64]| -> Option<usize> {
        let mut count = 0;
        for p in w.windows(2) {
            if p[1] > p[0] {
                if p[1] > p[0] * 1.05 {
                    return None;
                }
                count += 1;
            }
        }
        Some(count)
    };
    let span = tail.len().min(5);
    tail.windows(span).all(|w| ups(w).is_some_and(|c| c <= 1))
}
