use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub resolution: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Mean images per second over the timed repeats.
    pub img_per_s: f64,
    pub img_per_s_sd: f64,
    pub seconds_per_batch: Vec<f64>,
    pub param_count: usize,
    pub model_size_bytes: u64,
    /// Peak resident set size, when the platform reports it.
    pub peak_rss_bytes: Option<u64>,
}

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Times eval-mode forward passes on uniform random `[batch, 1, res, res]` input.
/// One untimed warmup pass precedes the repeats.
pub fn bench_throughput(model: &Model<f32>, resolution: usize, batch_size: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats == 0 || batch_size == 0 || resolution == 0 {
        return Err(Error::Invalid("benchmark needs positive repeats, batch size and resolution".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch_size * resolution * resolution;
    let input = Tensor::new(&[batch_size, 1, resolution, resolution], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let warmup = 1;
    for _ in 0..warmup {
        model.predict(&input)?;
    }
    let mut seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        model.predict(&input)?;
        seconds.push(t.elapsed().as_secs_f64());
    }
    let rates: Vec<f64> = seconds.iter().map(|s| batch_size as f64 / s).collect();
    let mean = rates.iter().sum::<f64>() / repeats as f64;
    let sd = if repeats > 1 {
        (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
    } else {
        0.0
    };
    let size = crate::checkpoint::encode(&model.to_entries()?).len() as u64;
    Ok(BenchReport {
        resolution,
        batch_size,
        repeats,
        warmup,
        threads: rayon::current_num_threads(),
        img_per_s: mean,
        img_per_s_sd: sd,
        seconds_per_batch: seconds,
        param_count: model.param_count(),
        model_size_bytes: size,
        peak_rss_bytes: peak_rss_bytes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn schema_and_degenerate_input() {
        let m = Model::<f32>::build(&ModelConfig { base_filters: 2, ..Default::default() }, 0).unwrap();
        assert!(bench_throughput(&m, 128, 1, 0, 0).is_err());
        let r = bench_throughput(&m, 128, 2, 2, 0).unwrap();
        assert_eq!(r.seconds_per_batch.len(), 2);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["resolution", "batch_size", "img_per_s"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
