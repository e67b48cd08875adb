//! Wall-clock timing of mask computation.

use std::fmt;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{forward, forward_recording};
use crate::lrp::{propagate, LrpConfig};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::visualbackprop::mask_from_trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Vbp,
    Lrp,
    Forward,
}

impl BenchMethod {
    pub fn timed_region(self) -> &'static str {
        match self {
            Self::Vbp => "mask from a completed forward trace (forward excluded)",
            Self::Lrp => "relevance propagation from a completed forward recording (forward excluded)",
            Self::Forward => "one full forward pass",
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vbp => "vbp",
            Self::Lrp => "lrp",
            Self::Forward => "forward",
        })
    }
}

impl FromStr for BenchMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "vbp" => Ok(Self::Vbp),
            "lrp" => Ok(Self::Lrp),
            "forward" => Ok(Self::Forward),
            _ => Err(format!("unknown method {s:?}; expected vbp, lrp or forward")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub method: BenchMethod,
    pub runs: usize,
    pub warmup: usize,
    pub lrp: LrpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub method: BenchMethod,
    pub model_name: String,
    pub input_shape: [usize; 3],
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub per_run_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub min_ms: f64,
    pub thread_count: usize,
    /// Seconds since the Unix epoch when the report was produced.
    pub timestamp: u64,
    pub timed_region: &'static str,
    /// Every run produced bit-identical output.
    pub outputs_identical: bool,
}

/// Deterministic pseudo-random input in `[0, 1)`.
pub fn synthetic_input(shape: [usize; 3], seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen::<f32>())
}

/// Nearest-rank median.
pub fn p50(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[sorted.len().div_ceil(2) - 1]
}

fn time_runs<O: PartialEq>(
    warmup: usize,
    runs: usize,
    mut f: impl FnMut() -> Result<O>,
) -> Result<(Vec<f64>, bool)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut per_run = Vec::with_capacity(runs);
    let mut first: Option<O> = None;
    let mut identical = true;
    for _ in 0..runs {
        let start = Instant::now();
        let out = f()?;
        per_run.push(start.elapsed().as_secs_f64() * 1e3);
        match &first {
            None => first = Some(out),
            Some(prev) => identical &= *prev == out,
        }
    }
    Ok((per_run, identical))
}

/// Time `cfg.method` on `model` using the current rayon pool.
pub fn bench(
    model: &Model<f32>,
    model_name: &str,
    input: &Tensor<f32>,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.runs == 0 {
        return Err(Error::Shape("runs must be at least 1".into()));
    }
    let (per_run_ms, outputs_identical) = match cfg.method {
        BenchMethod::Vbp => {
            let trace = forward(model, input)?.trace;
            time_runs(cfg.warmup, cfg.runs, || mask_from_trace(&trace, false))?
        }
        BenchMethod::Lrp => {
            let rec = forward_recording(model, input)?;
            time_runs(cfg.warmup, cfg.runs, || {
                propagate(model, &rec, &cfg.lrp).map(|r| r.input_relevance)
            })?
        }
        BenchMethod::Forward => {
            time_runs(cfg.warmup, cfg.runs, || forward(model, input).map(|o| o.output))?
        }
    };
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(BenchReport {
        method: cfg.method,
        model_name: model_name.to_string(),
        input_shape: model.input_shape(),
        warmup_runs: cfg.warmup,
        timed_runs: cfg.runs,
        mean_ms: per_run_ms.iter().sum::<f64>() / per_run_ms.len() as f64,
        p50_ms: p50(&per_run_ms),
        min_ms: per_run_ms.iter().copied().fold(f64::INFINITY, f64::min),
        per_run_ms,
        thread_count: rayon::current_num_threads(),
        timestamp,
        timed_region: cfg.method.timed_region(),
        outputs_identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preset::{preset, PresetName};

    fn cfg(method: BenchMethod, runs: usize) -> BenchConfig {
        BenchConfig {
            method,
            runs,
            warmup: 1,
            lrp: LrpConfig::default(),
        }
    }

    #[test]
    fn nearest_rank_median() {
        assert_eq!(p50(&[3.0]), 3.0);
        assert_eq!(p50(&[4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(p50(&[5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn single_run_report() {
        let m = preset(PresetName::Tiny, 0).unwrap();
        let x = synthetic_input(m.input_shape(), 0).unwrap();
        let r = bench(&m, "tiny", &x, &cfg(BenchMethod::Vbp, 1)).unwrap();
        assert_eq!(r.timed_runs, 1);
        assert_eq!(r.per_run_ms.len(), 1);
        assert_eq!(r.p50_ms, r.per_run_ms[0]);
        assert_eq!(r.mean_ms, r.per_run_ms[0]);
        assert_eq!(r.min_ms, r.per_run_ms[0]);
    }

    #[test]
    fn every_method_is_deterministic() {
        let m = preset(PresetName::Tiny, 3).unwrap();
        let x = synthetic_input(m.input_shape(), 9).unwrap();
        for method in [BenchMethod::Vbp, BenchMethod::Lrp, BenchMethod::Forward] {
            let r = bench(&m, "tiny", &x, &cfg(method, 4)).unwrap();
            assert!(r.outputs_identical);
            assert_eq!(r.per_run_ms.len(), 4);
            let json = serde_json::to_value(&r).unwrap();
            assert_eq!(json["method"], method.to_string());
        }
        assert!(bench(&m, "tiny", &x, &cfg(BenchMethod::Vbp, 0)).is_err());
    }

    #[test]
    fn synthetic_input_is_reproducible() {
        let a = synthetic_input([1, 4, 4], 7).unwrap();
        assert_eq!(a, synthetic_input([1, 4, 4], 7).unwrap());
        assert_ne!(a, synthetic_input([1, 4, 4], 8).unwrap());
        assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn method_names() {
        assert_eq!("LRP".parse::<BenchMethod>().unwrap(), BenchMethod::Lrp);
        assert!("gradcam".parse::<BenchMethod>().is_err());
    }
}
