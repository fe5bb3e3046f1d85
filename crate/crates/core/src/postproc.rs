//! Speaker-reinforcement remixing and SNR metrics.

use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};
use crate::mixer::power_of;

/// SNR values are clamped to `[-SNR_CAP_DB, SNR_CAP_DB]`.
pub const SNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemixConfig {
    /// SNR of the enhanced signal over the added-back noisy input.
    pub beta_db: f64,
}

impl Default for RemixConfig {
    fn default() -> Self {
        Self { beta_db: 0.0 }
    }
}

impl RemixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_db.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("beta_db {} is not finite", self.beta_db)))
        }
    }
}

/// Gain applied to the noisy input so that enhanced : gain·noisy is
/// `beta_db`.
pub fn remix_gain(enhanced: &AudioClip, noisy: &AudioClip, beta_db: f64) -> Result<f64> {
    if enhanced.len() != noisy.len() {
        return Err(Error::ShapeMismatch(format!(
            "enhanced has {} samples, noisy {}",
            enhanced.len(),
            noisy.len()
        )));
    }
    if enhanced.is_empty() {
        return Err(Error::EmptySignal);
    }
    let pe = power_of(enhanced.samples());
    let pn = power_of(noisy.samples());
    if pe == 0.0 {
        return Err(Error::SilentEnhanced);
    }
    if pn == 0.0 {
        return Err(Error::SilentNoisy);
    }
    Ok((pe / pn).sqrt() * 10f64.powf(-beta_db / 20.0))
}

/// `enhanced + g·noisy` with `g` from [`remix_gain`].
pub fn remix(enhanced: &AudioClip, noisy: &AudioClip, beta_db: f64) -> Result<AudioClip> {
    let g = remix_gain(enhanced, noisy, beta_db)?;
    enhanced.add_scaled(noisy, g)
}

fn cap(db: f64) -> f64 {
    if db.is_nan() {
        -SNR_CAP_DB
    } else {
        db.clamp(-SNR_CAP_DB, SNR_CAP_DB)
    }
}

/// `10 log10(P(ref) / P(est - ref))`, clamped to ±100 dB.
pub fn snr_db(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::EmptySignal);
    }
    let pr = power_of(reference.samples());
    if pr == 0.0 {
        return Err(Error::SilentReference);
    }
    let err: f64 = reference
        .samples()
        .iter()
        .zip(estimate.samples())
        .map(|(r, e)| (e - r) * (e - r))
        .sum::<f64>()
        / reference.len() as f64;
    if err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok(cap(10.0 * (pr / err).log10()))
}

/// SNR improvement of `enhanced` over `input` against the same clean reference.
pub fn snr_improvement(clean: &AudioClip, input: &AudioClip, enhanced: &AudioClip) -> Result<f64> {
    Ok(snr_db(clean, enhanced)? - snr_db(clean, input)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::from_samples(v).unwrap()
    }

    #[test]
    fn remix_examples() {
        let e = clip(vec![0.5, -0.5, 0.5, -0.5]);
        let n = clip(vec![0.5, 0.5, -0.5, -0.5]);
        assert!((remix_gain(&e, &n, 0.0).unwrap() - 1.0).abs() < 1e-15);
        let z = remix(&e, &n, 0.0).unwrap();
        assert_eq!(z.samples(), &[1.0, 0.0, 0.0, -1.0]);
        assert!((remix_gain(&e, &n, 10.0).unwrap() - 0.31623).abs() < 1e-5);
        assert_eq!(remix(&e, &e, 0.0).unwrap(), e.scaled(2.0));
    }

    #[test]
    fn remix_errors() {
        let e = clip(vec![0.5, -0.5]);
        let z = clip(vec![0.0, 0.0]);
        assert!(matches!(remix(&z, &e, 0.0), Err(Error::SilentEnhanced)));
        assert!(matches!(remix(&e, &z, 0.0), Err(Error::SilentNoisy)));
        assert!(matches!(remix(&e, &clip(vec![1.0]), 0.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn snr_examples() {
        let r = clip(vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(snr_db(&r, &r).unwrap(), 100.0);
        let e = clip(vec![1.1, -0.9, 0.9, -1.1]);
        assert!((snr_db(&r, &e).unwrap() - 20.0).abs() < 1e-9);
        assert!(snr_db(&r, &r.scaled(2.0)).unwrap().abs() < 1e-12);
        assert!(matches!(snr_db(&clip(vec![0.0; 4]), &r), Err(Error::SilentReference)));
        assert!(snr_improvement(&r, &e, &e).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hand_built_improvement_is_twenty_db() {
        let c = clip(vec![1.0, 1.0, -1.0, -1.0]);
        let n = clip(vec![1.0, -1.0, 1.0, -1.0]);
        let input = c.add_scaled(&n, 1.0).unwrap();
        let enhanced = c.add_scaled(&n, 0.1).unwrap();
        assert!((snr_improvement(&c, &input, &enhanced).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_contribution_vanishes_at_high_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = clip((0..400).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let n = clip((0..400).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let g = remix_gain(&e, &n, 60.0).unwrap();
        let z = remix(&e, &n, 60.0).unwrap();
        let max_noisy = n.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = z
            .samples()
            .iter()
            .zip(e.samples())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= g * max_noisy + 1e-15);
        let ratio = (power_of(e.samples()) / power_of(n.samples())).sqrt();
        assert!((g - 1e-3 * ratio).abs() <= 1e-15);
    }

    proptest! {
        #[test]
        fn remix_hits_beta_and_gain_decreases(seed in any::<u64>(), beta in -20.0f64..40.0, step in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = clip((0..256).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let n = clip((0..256).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let g = remix_gain(&e, &n, beta).unwrap();
            let internal = 10.0 * (power_of(e.samples()) / power_of(n.scaled(g).samples())).log10();
            prop_assert!((internal - beta).abs() <= 1e-6);
            prop_assert!(remix_gain(&e, &n, beta + step).unwrap() < g);
        }
    }
}
