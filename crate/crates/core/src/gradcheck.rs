//! Finite-difference verification of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::dsp::{Spectrogram, StftConfig};
use crate::error::Result;
use crate::model::{forward, init_params, EstimateGrad, ModelConfig, Session, SourceEstimates};
use crate::tensor::Parameters;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub frames: usize,
    pub seed: u64,
    /// Coordinates probed per tensor; smaller tensors are probed in full.
    pub probes_per_tensor: usize,
    pub step: f64,
    /// Deliberately scales one analytic gradient by 1.01 to prove the
    /// check can fail.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            frames: 16,
            seed: 0,
            probes_per_tensor: 50,
            step: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub probed: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

struct Probe {
    mixture: Spectrogram,
    weights: EstimateGrad,
}

impl Probe {
    /// Random linear functional of the estimates.
    fn loss(&self, est: &SourceEstimates) -> f64 {
        let per = self.weights.bins * self.weights.frames;
        est.specs
            .iter()
            .enumerate()
            .map(|(m, s)| {
                s.data()
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c.re * self.weights.re[m * per + i] + c.im * self.weights.im[m * per + i])
                    .sum::<f64>()
            })
            .sum()
    }
}

fn probe_indices(len: usize, want: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= want {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, want).into_vec()
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(&cfg.model, rng.gen());

    let like = Spectrogram::zeros(StftConfig::default(), (cfg.frames.max(1) - 1) * 128);
    let data = (0..like.data().len())
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let mixture = Spectrogram::with_layout_of(&like, data)?;
    let mut weights = EstimateGrad::zeros(cfg.model.num_outputs, mixture.bins(), mixture.frames());
    for v in weights.re.iter_mut().chain(weights.im.iter_mut()) {
        *v = rng.gen_range(-1.0..1.0);
    }
    let probe = Probe { mixture, weights };

    let mut session = Session::new(&params, &cfg.model);
    session.forward(&probe.mixture)?;
    let mut analytic = session.backward(&probe.weights)?;
    if cfg.corrupt {
        if let Some((_, t)) = analytic.iter_mut().next() {
            t.data.iter_mut().for_each(|g| *g *= 1.01);
        }
    }

    let eval = |p: &Parameters| -> Result<f64> { Ok(probe.loss(&forward(p, &probe.mixture, &cfg.model)?)) };

    let mut work = params.clone();
    let mut tensors = Vec::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).expect("name from params").len();
        let mut worst = 0.0f64;
        let idx = probe_indices(len, cfg.probes_per_tensor, &mut rng);
        for &i in &idx {
            let orig = params.get(&name).expect("name from params").data[i];
            work.get_mut(&name).expect("same layout").data[i] = orig + cfg.step;
            let up = eval(&work)?;
            work.get_mut(&name).expect("same layout").data[i] = orig - cfg.step;
            let down = eval(&work)?;
            work.get_mut(&name).expect("same layout").data[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.get(&name).expect("same layout").data[i];
            worst = worst.max(relative_error(a, numeric));
        }
        tensors.push(TensorCheck {
            name,
            probed: idx.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = tensors.iter().fold(0.0f64, |m, t| m.max(t.max_rel_error));
    Ok(GradCheckReport { tensors, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 1.01) - 0.01 / 1.01).abs() < 1e-15);
        // tiny gradients are compared absolutely
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn probe_indices_cover_small_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(probe_indices(4, 50, &mut rng), vec![0, 1, 2, 3]);
        let mut idx = probe_indices(500, 50, &mut rng);
        assert_eq!(idx.len(), 50);
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 50);
    }
}
