// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::trace::{AccessMode, StepEvent};

use super::handlers::{EXEC_PF, READ_PF, REG_OP_LATENCY, WRITE_PF};
use super::layout::MemoryLayout;

/// Measurement noise of the single-stepping channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Standard deviation of per-step latency jitter, in cycles.
    pub latency_jitter_sigma: f64,
    /// Timer resolution; latencies are rounded to multiples of it. 0 disables.
    pub apic_quantum: u64,
    /// Probability per native step that the guest is descheduled.
    pub ctx_switch_rate: f64,
    /// Mean length of a context-switch burst, in filler steps.
    pub ctx_switch_extra_steps_mean: f64,
    /// Probability per step that two instructions retire in one step.
    pub multistep_prob: f64,
    /// Set from the run seed, not from configuration files.
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            latency_jitter_sigma: 100.0,
            apic_quantum: 35,
            ctx_switch_rate: 1953.0 / 1e7,
            ctx_switch_extra_steps_mean: 4_409_447.0 / 1953.0,
            multistep_prob: 10.0 / 2.81e9,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NoiseConfigError {
    #[error("{0} must lie in [0, 1]")]
    Probability(&'static str),
    #[error("{0} must be finite and non-negative")]
    Negative(&'static str),
}

impl NoiseModel {
    /// No jitter, no quantization, no foreign events.
    pub fn zero() -> Self {
        NoiseModel {
            latency_jitter_sigma: 0.0,
            apic_quantum: 0,
            ctx_switch_rate: 0.0,
            ctx_switch_extra_steps_mean: 0.0,
            multistep_prob: 0.0,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), NoiseConfigError> {
        for (v, name) in [
            (self.ctx_switch_rate, "ctx_switch_rate"),
            (self.multistep_prob, "multistep_prob"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(NoiseConfigError::Probability(name));
            }
        }
        for (v, name) in [
            (self.latency_jitter_sigma, "latency_jitter_sigma"),
            (self.ctx_switch_extra_steps_mean, "ctx_switch_extra_steps_mean"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(NoiseConfigError::Negative(name));
            }
        }
        Ok(())
    }

    /// Observed latency for a step with the given base cost.
    pub fn measure(&self, base: u32, rng: &mut ChaCha8Rng, jitter: Option<&Normal<f64>>) -> u64 {
        let mut lat = base as f64;
        if let Some(n) = jitter {
            lat += n.sample(rng);
        }
        self.quantize(lat)
    }

    pub fn quantize(&self, lat: f64) -> u64 {
        let lat = lat.round().max(1.0) as u64;
        match self.apic_quantum {
            0 => lat,
            q => (((lat + q / 2) / q) * q).max(q),
        }
    }

    pub(crate) fn jitter_dist(&self) -> Option<Normal<f64>> {
        (self.latency_jitter_sigma > 0.0).then(|| Normal::new(0.0, self.latency_jitter_sigma).expect("validated sigma"))
    }

    /// Length of one context-switch burst, geometric with the configured mean.
    pub(crate) fn burst_len(&self, rng: &mut ChaCha8Rng) -> usize {
        let mean = self.ctx_switch_extra_steps_mean.max(1.0);
        let p = 1.0 / mean;
        let mut n = 1usize;
        if p < 1.0 {
            // Inverse-CDF draw of a geometric variable on {1, 2, ...}.
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            n = (u.ln() / (1.0 - p).ln()).ceil().max(1.0) as usize;
        }
        n
    }
}

/// Guest-kernel activity while the interpreter is descheduled. Code stays on
/// one page for long stretches; reads and writes hit kernel data pages.
pub(crate) fn filler_burst(
    layout: &MemoryLayout,
    noise: &NoiseModel,
    len: usize,
    rng: &mut ChaCha8Rng,
    jitter: Option<&Normal<f64>>,
) -> Vec<StepEvent> {
    let pool = &layout.other_pages;
    if pool.is_empty() {
        return Vec::new();
    }
    let mut code = pool[rng.random_range(0..pool.len())];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        if rng.random_bool(0.02) {
            code = pool[rng.random_range(0..pool.len())];
        }
        let roll: f64 = rng.random();
        let (page, mode, pf) = if roll < 0.6 {
            (code, AccessMode::E, EXEC_PF)
        } else if roll < 0.85 {
            (pool[rng.random_range(0..pool.len())], AccessMode::R, READ_PF)
        } else {
            (pool[rng.random_range(0..pool.len())], AccessMode::W, WRITE_PF)
        };
        let base = REG_OP_LATENCY + rng.random_range(0..400);
        out.push(StepEvent {
            page,
            mode,
            pf_count: pf,
            latency: noise.measure(base, rng, jitter),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn defaults_come_from_reported_counts() {
        let n = NoiseModel::default();
        assert!((n.ctx_switch_rate - 1.953e-4).abs() < 1e-12);
        assert!((n.ctx_switch_extra_steps_mean - 2257.78).abs() < 0.01);
        n.validate().unwrap();
        NoiseModel::zero().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut n = NoiseModel::zero();
        n.ctx_switch_rate = 1.5;
        assert!(n.validate().is_err());
        let mut n = NoiseModel::zero();
        n.latency_jitter_sigma = -1.0;
        assert!(n.validate().is_err());
    }

    #[test]
    fn quantization() {
        let n = NoiseModel {
            apic_quantum: 35,
            ..NoiseModel::zero()
        };
        assert_eq!(n.quantize(5280.0), 5285);
        assert_eq!(n.quantize(5268.0), 5285);
        assert_eq!(n.quantize(5267.0), 5250);
        assert_eq!(n.quantize(3.0), 35);
        assert_eq!(NoiseModel::zero().quantize(0.2), 1);
    }

    #[test]
    fn burst_length_mean() {
        let n = NoiseModel {
            ctx_switch_extra_steps_mean: 50.0,
            ..NoiseModel::zero()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let total: usize = (0..20_000).map(|_| n.burst_len(&mut rng)).sum();
        let mean = total as f64 / 20_000.0;
        assert!((mean - 50.0).abs() < 2.0, "{mean}");
    }
}
