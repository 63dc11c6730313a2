//! Epps–Pulley type normality check used to flag non-identified mixing.
//!
//! The statistic compares the empirical characteristic function of the
//! studentized sample with the standard normal one under a Gaussian weight.
//! It is affine invariant, so its null law depends on the sample size only
//! and is simulated once per size and cached.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand_distr::{Distribution, StandardNormal};

use crate::rng::{stream, TAG_NORMALITY};

/// Larger samples are truncated to their first observations.
pub const MAX_SAMPLE: usize = 400;
pub const NULL_DRAWS: usize = 400;

/// n·∫|φ̂(s) − e^{−s²/2}|² φ(s) ds on the studentized sample.
pub fn epps_pulley(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return f64::INFINITY;
    }
    let y: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let mut pair = 0.0;
    for (j, a) in y.iter().enumerate() {
        for b in &y[j + 1..] {
            pair += (-(a - b).powi(2) / 2.0).exp();
        }
    }
    let pair = (2.0 * pair + n) / n;
    let single: f64 = y.iter().map(|v| (-v * v / 4.0).exp()).sum();
    pair - std::f64::consts::SQRT_2 * single + n / 3f64.sqrt()
}

fn null_law(m: usize) -> Vec<f64> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Vec<f64>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("cache lock").get(&m) {
        return v.clone();
    }
    let mut rng = stream(m as u64, &[TAG_NORMALITY]);
    let mut draws: Vec<f64> = (0..NULL_DRAWS)
        .map(|_| {
            let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
            epps_pulley(&z)
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    cache.lock().expect("cache lock").insert(m, draws.clone());
    draws
}

/// Monte Carlo p-value of the normality hypothesis.
pub fn normality_p_value(x: &[f64]) -> f64 {
    let m = x.len().min(MAX_SAMPLE);
    if m < 8 {
        return 1.0;
    }
    let stat = epps_pulley(&x[..m]);
    let null = null_law(m);
    let exceed = null.len() - null.partition_point(|&v| v < stat);
    (1 + exceed) as f64 / (null.len() + 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_gaussian_from_uniform() {
        let mut rng = stream(5, &[0]);
        let z: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut rng)).collect();
        let u: Vec<f64> = (0..300).map(|i| (i as f64 + 0.5) / 300.0).collect();
        assert!(normality_p_value(&z) > 0.05);
        assert!(normality_p_value(&u) < 0.01);
        // Location and scale do not matter.
        let shifted: Vec<f64> = z.iter().map(|v| 3.0 * v - 2.0).collect();
        assert!((epps_pulley(&z) - epps_pulley(&shifted)).abs() < 1e-9);
    }
}
