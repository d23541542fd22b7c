//! Inference latency and throughput measurement plus the derived
//! efficiency figures (FPS, FPS/W, GOP/J).
//!
//! Power is an external input; nothing here polls a power sensor.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{Model, ModelError};
use crate::profiler::profile_network;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error("power must be positive and finite, got {0} W")]
    NonPositivePower(f64),
    #[error("latency must be positive and finite, got {0} s")]
    NonPositiveLatency(f64),
    #[error("MAC count must be positive, got {0}")]
    NonPositiveMacs(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("could not create a {threads}-thread pool: {reason}")]
    ThreadPool { threads: usize, reason: String },
}

impl BenchError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, BenchError::ThreadPool { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub frames_per_round: usize,
    pub rounds: usize,
    /// Untimed forwards run before the first round.
    pub warmup_frames: usize,
    /// One frame; `n` must be 1.
    pub input_shape: Shape,
    /// Externally measured average power draw during inference.
    pub power_watts: Option<f64>,
    /// Worker threads available to the kernels; 1 is a single stream.
    pub threads: usize,
    /// Seed of the static input frame.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames_per_round: 1000,
            rounds: 20,
            warmup_frames: 20,
            input_shape: Shape::new(1, 3, 256, 256),
            power_watts: None,
            threads: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.into()));
        if self.frames_per_round == 0 {
            return bad("frames per round must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.input_shape.n != 1 {
            return bad("the input shape describes a single frame (batch 1)");
        }
        if let Some(p) = self.power_watts {
            check_power(p)?;
        }
        Ok(())
    }
}

fn check_power(p: f64) -> Result<(), BenchError> {
    if p.is_finite() && p > 0.0 {
        Ok(())
    } else {
        Err(BenchError::NonPositivePower(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub fps: f64,
    pub fps_per_watt: f64,
    /// Giga-operations per joule, one MAC counted as two operations.
    pub gop_per_joule: f64,
}

/// `fps = 1 / latency`, `fps_per_watt = fps / power`,
/// `gop_per_joule = 2 * macs * fps_per_watt / 1e9`.
pub fn derived_metrics(latency_mean: f64, power_watts: f64, macs_per_frame: f64) -> Result<DerivedMetrics, BenchError> {
    if !(latency_mean.is_finite() && latency_mean > 0.0) {
        return Err(BenchError::NonPositiveLatency(latency_mean));
    }
    check_power(power_watts)?;
    if !(macs_per_frame.is_finite() && macs_per_frame > 0.0) {
        return Err(BenchError::NonPositiveMacs(macs_per_frame));
    }
    let fps = 1.0 / latency_mean;
    let fps_per_watt = fps / power_watts;
    Ok(DerivedMetrics {
        fps,
        fps_per_watt,
        gop_per_joule: gop_per_joule(macs_per_frame, fps_per_watt),
    })
}

fn gop_per_joule(macs: f64, fps_per_watt: f64) -> f64 {
    2.0 * macs * fps_per_watt / 1e9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub frames: usize,
    pub seconds: f64,
    /// Mean seconds per frame in this round.
    pub latency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Total timed seconds over total timed frames.
    pub mean: f64,
    /// Median and 95th percentile of the per-round latencies.
    pub median: f64,
    pub p95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub config: BenchConfig,
    pub rounds: Vec<RoundStats>,
    pub latency: LatencyStats,
    /// Mean seconds per warmup frame; `None` without warmup.
    pub warmup_latency: Option<f64>,
    pub fps: f64,
    pub macs_per_frame: u64,
    pub gops_per_frame: f64,
    pub fps_per_watt: Option<f64>,
    pub gop_per_joule: Option<f64>,
    pub timer_resolution_ns: u64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Summary row in the column layout of a CPU/GPU efficiency comparison.
    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"));
        let _ = writeln!(
            s,
            "{} @{}x{}  {} rounds x {} frames (warmup {}), {} thread(s)",
            self.model, c.input_shape.h, c.input_shape.w, c.rounds, c.frames_per_round, c.warmup_frames, c.threads
        );
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>12} {:>12} {:>10} {:>10} {:>10}",
            "Device", "Latency (s)", "Thp (FPS)", "Avg Pwr (W)", "FPS/W", "GOP/J", "GOPs"
        );
        let _ = writeln!(
            s,
            "{:<10} {:>14.6} {:>12.2} {:>12} {:>10} {:>10} {:>10.2}",
            "CPU",
            self.latency.mean,
            self.fps,
            opt(c.power_watts, 2),
            opt(self.fps_per_watt, 4),
            opt(self.gop_per_joule, 4),
            self.gops_per_frame
        );
        let _ = writeln!(
            s,
            "latency median {:.6} s, p95 {:.6} s; {:.3} GMACs/frame; timer resolution {} ns",
            self.latency.median,
            self.latency.p95,
            self.macs_per_frame as f64 / 1e9,
            self.timer_resolution_ns
        );
        s
    }

    /// Checks the definitional identities of a report, `fps * mean = 1`
    /// (to one rounding) and `GOP/J = 2 * MACs * FPS/W / 1e9`.
    pub fn identities_hold(&self) -> bool {
        let fps_ok = (self.fps * self.latency.mean - 1.0).abs() <= 2.0 * f64::EPSILON;
        let gop_ok = match (self.fps_per_watt, self.gop_per_joule) {
            (Some(fw), Some(g)) => g == gop_per_joule(self.macs_per_frame as f64, fw),
            (None, None) => true,
            _ => false,
        };
        fps_ok && gop_ok
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // nearest rank
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times `cfg.rounds` rounds of `cfg.frames_per_round` eval-mode forwards of
/// one static frame. The input is validated and generated before any timing;
/// only the forward loop sits inside the timed region.
pub fn run_bench(model: &Model, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    model.check_input(cfg.input_shape)?;
    let macs = profile_network(model.config.kind.name(), &model.network, cfg.input_shape)?.total_macs();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frame = Tensor::<f32>::rand_uniform(cfg.input_shape, 0.0, 1.0, &mut rng);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| BenchError::ThreadPool {
            threads: cfg.threads,
            reason: e.to_string(),
        })?;

    let (warmup, rounds) = pool.install(|| -> Result<_, ModelError> {
        let mut warmup = None;
        if cfg.warmup_frames > 0 {
            let start = Instant::now();
            for _ in 0..cfg.warmup_frames {
                black_box(model.network.infer(&model.params, black_box(&frame))?);
            }
            warmup = Some(start.elapsed().as_secs_f64() / cfg.warmup_frames as f64);
        }
        let mut rounds = Vec::with_capacity(cfg.rounds);
        for _ in 0..cfg.rounds {
            let start = Instant::now();
            for _ in 0..cfg.frames_per_round {
                black_box(model.network.infer(&model.params, black_box(&frame))?);
            }
            let seconds = start.elapsed().as_secs_f64();
            rounds.push(RoundStats {
                frames: cfg.frames_per_round,
                seconds,
                latency: seconds / cfg.frames_per_round as f64,
            });
        }
        Ok((warmup, rounds))
    })?;

    let resolution = timer_resolution();
    let floor = resolution.as_secs_f64();
    let total_seconds: f64 = rounds.iter().map(|r| r.seconds).sum::<f64>().max(floor);
    let total_frames = (cfg.rounds * cfg.frames_per_round) as f64;
    let mean = total_seconds / total_frames;
    let mut per_round: Vec<f64> = rounds.iter().map(|r| r.latency).collect();
    per_round.sort_by(f64::total_cmp);
    let fps = 1.0 / mean;
    let derived = cfg
        .power_watts
        .map(|p| derived_metrics(mean, p, macs as f64))
        .transpose()?;

    Ok(BenchReport {
        model: model.config.kind.name().to_string(),
        config: cfg.clone(),
        rounds,
        latency: LatencyStats {
            mean,
            median: median(&per_round),
            p95: percentile(&per_round, 0.95),
        },
        warmup_latency: warmup,
        fps,
        macs_per_frame: macs,
        gops_per_frame: 2.0 * macs as f64 / 1e9,
        fps_per_watt: derived.map(|d| d.fps_per_watt),
        gop_per_joule: derived.map(|d| d.gop_per_joule),
        timer_resolution_ns: resolution.as_nanos() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    #[test]
    fn unit_power_gives_fps() {
        let d = derived_metrics(0.25, 1.0, 1e9).unwrap();
        assert_eq!(d.fps, 4.0);
        assert_eq!(d.fps_per_watt, 4.0);
        assert_eq!(d.gop_per_joule, 8.0);
    }

    #[test]
    fn halving_latency_doubles_throughput() {
        let a = derived_metrics(0.5, 3.0, 2e9).unwrap();
        let b = derived_metrics(0.25, 3.0, 2e9).unwrap();
        assert!((b.fps / a.fps - 2.0).abs() < 1e-12);
        assert!((b.gop_per_joule / a.gop_per_joule - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(derived_metrics(1.0, 0.0, 1.0), Err(BenchError::NonPositivePower(0.0)));
        assert!(derived_metrics(1.0, -2.0, 1.0).is_err());
        assert!(derived_metrics(0.0, 1.0, 1.0).is_err());
        assert!(derived_metrics(1.0, 1.0, 0.0).is_err());
        let cfg = BenchConfig {
            rounds: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 0.95), 4.0);
        assert_eq!(percentile(&[5.0], 0.95), 5.0);
    }

    #[test]
    fn tiny_run() {
        let model = Model::build(ModelConfig::unet(4, 1, 2)).unwrap().init_weights(0);
        let cfg = BenchConfig {
            frames_per_round: 2,
            rounds: 3,
            warmup_frames: 1,
            input_shape: Shape::new(1, 3, 8, 8),
            power_watts: Some(2.0),
            ..Default::default()
        };
        let r = run_bench(&model, &cfg).unwrap();
        assert_eq!(r.rounds.len(), 3);
        assert!(r.latency.mean > 0.0);
        assert!(r.identities_hold());
        let bad = BenchConfig {
            input_shape: Shape::new(1, 3, 9, 8),
            ..cfg
        };
        assert!(matches!(run_bench(&model, &bad), Err(BenchError::Model(_))));
    }
}
