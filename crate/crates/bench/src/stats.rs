//! Sample summaries with nearest-rank percentiles.

use std::time::Duration;

use serde::Serialize;

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)` of the
/// sorted samples (rank 1 for p = 0). `None` for an empty slice.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                n: 0,
                mean: 0.0,
                p50: 0.0,
                p99: 0.0,
            };
        }
        Self {
            n: samples.len(),
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            p50: percentile(samples, 50.0).expect("non-empty"),
            p99: percentile(samples, 99.0).expect("non-empty"),
        }
    }

    pub fn of_durations_ms(samples: &[Duration]) -> Self {
        Self::of(&samples.iter().map(|d| d.as_secs_f64() * 1000.0).collect::<Vec<_>>())
    }
}
