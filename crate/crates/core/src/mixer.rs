//! Dynamic training-example generation.
//!
//! Every example is a mixture of two references, `input = x1 + x2`, where
//! `x1` is either a clean utterance ([`ExampleKind::CleanTarget`]) or a real
//! noisy recording ([`ExampleKind::RealNoisy`]) and `x2` is a noise chunk
//! stored already scaled so that `10 log10(P(x1) / P(x2)) == alpha_db`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio_io::{read_wav, write_wav, AudioClip, Manifest, ManifestEntry, SourceKind};
use crate::error::{Error, Result};

/// Draws made for one example before giving up on silent material.
const MAX_SILENT_RETRIES: usize = 10;
/// Length of the synthetic impulse responses used when RIR convolution is on.
pub const RIR_LEN: usize = 2048;

pub fn signal_power(clip: &AudioClip) -> Result<f64> {
    if clip.is_empty() {
        return Err(Error::EmptySignal);
    }
    Ok(power_of(clip.samples()))
}

pub(crate) fn power_of(x: &[f64]) -> f64 {
    x.iter().map(|s| s * s).sum::<f64>() / x.len() as f64
}

/// Gain to apply to `secondary` so that `primary` over `gain * secondary` has
/// an SNR of `alpha_db`.
pub fn scale_to_snr(primary: &AudioClip, secondary: &AudioClip, alpha_db: f64) -> Result<f64> {
    if primary.len() != secondary.len() {
        return Err(Error::ShapeMismatch(format!(
            "primary has {} samples, secondary {}",
            primary.len(),
            secondary.len()
        )));
    }
    let p = signal_power(primary)?;
    let s = signal_power(secondary)?;
    if p == 0.0 {
        return Err(Error::SilentSignal("primary".into()));
    }
    if s == 0.0 {
        return Err(Error::SilentSignal("secondary".into()));
    }
    Ok((p / s).sqrt() * 10f64.powf(-alpha_db / 20.0))
}

/// Linear FIR convolution truncated to the length of `clip`.
pub fn convolve_rir(clip: &AudioClip, h: &AudioClip) -> Result<AudioClip> {
    if h.is_empty() {
        return Err(Error::ShapeMismatch("empty impulse response".into()));
    }
    let x = clip.samples();
    let taps = h.samples();
    let mut out = vec![0.0; x.len()];
    for (j, &hj) in taps.iter().enumerate().take(x.len()) {
        if hj == 0.0 {
            continue;
        }
        for (o, &xi) in out[j..].iter_mut().zip(x) {
            *o += hj * xi;
        }
    }
    AudioClip::new(out, clip.sample_rate())
}

/// Exponentially decaying noise burst used as a stand-in room response.
pub fn synthetic_rir(rng: &mut impl Rng) -> AudioClip {
    let rt60_samples = rng.gen_range(0.15..0.5) * 16000.0;
    let decay = (1e-3f64).ln() / rt60_samples;
    let mut h: Vec<f64> = (0..RIR_LEN)
        .map(|t| {
            let n: f64 = StandardNormal.sample(rng);
            n * (decay * t as f64).exp()
        })
        .collect();
    h[0] = 1.0;
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= norm);
    AudioClip::from_samples(h).expect("finite impulse response")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    CleanTarget,
    RealNoisy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixExample {
    pub input: AudioClip,
    /// `[x1, x2]`: speech-side reference and pre-scaled noise reference.
    pub refs: [AudioClip; 2],
    pub kind: ExampleKind,
    pub alpha_db: f64,
}

impl MixExample {
    /// Builds an example from an unscaled pair, scaling `noise` to `alpha_db`.
    pub fn from_pair(
        x1: AudioClip,
        noise: &AudioClip,
        alpha_db: f64,
        kind: ExampleKind,
    ) -> Result<Self> {
        let gain = scale_to_snr(&x1, noise, alpha_db)?;
        let x2 = noise.scaled(gain);
        let input = x1.add_scaled(&x2, 1.0)?;
        Ok(Self {
            input,
            refs: [x1, x2],
            kind,
            alpha_db,
        })
    }

    /// SNR between the two stored references.
    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (power_of(self.refs[0].samples()) / power_of(self.refs[1].samples())).log10()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    /// Probability that a drawn example is clean-target.
    pub clean_ratio: f64,
    pub chunk_len: usize,
    pub seed: u64,
    pub rir_enabled: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            snr_low_db: -5.0,
            snr_high_db: 5.0,
            clean_ratio: 0.5,
            chunk_len: 32_000,
            seed: 0,
            rir_enabled: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, frame_len: usize) -> Result<()> {
        if !(self.snr_low_db.is_finite() && self.snr_high_db.is_finite())
            || self.snr_low_db > self.snr_high_db
        {
            return Err(Error::InvalidConfig(format!(
                "snr range [{}, {}] is invalid",
                self.snr_low_db, self.snr_high_db
            )));
        }
        if !(0.0..=1.0).contains(&self.clean_ratio) {
            return Err(Error::InvalidConfig(format!(
                "clean_ratio {} outside [0, 1]",
                self.clean_ratio
            )));
        }
        if self.chunk_len < frame_len {
            return Err(Error::InvalidConfig(format!(
                "chunk_len {} shorter than frame_len {frame_len}",
                self.chunk_len
            )));
        }
        if self.rir_enabled && self.chunk_len < RIR_LEN {
            return Err(Error::InvalidConfig(format!(
                "chunk_len {} shorter than the {RIR_LEN}-sample impulse response",
                self.chunk_len
            )));
        }
        Ok(())
    }
}

/// In-memory source material grouped by role.
#[derive(Debug, Clone, Default)]
pub struct SourcePools {
    pub clean: Vec<AudioClip>,
    pub noise: Vec<AudioClip>,
    pub noisy: Vec<AudioClip>,
}

impl SourcePools {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let mut pools = SourcePools::default();
        for entry in &manifest.entries {
            let clip = read_wav(&entry.path)?;
            pools.pool_mut(entry.kind).push(clip);
        }
        Ok(pools)
    }

    pub fn pool(&self, kind: SourceKind) -> &[AudioClip] {
        match kind {
            SourceKind::Clean => &self.clean,
            SourceKind::Noise => &self.noise,
            SourceKind::Noisy => &self.noisy,
        }
    }

    fn pool_mut(&mut self, kind: SourceKind) -> &mut Vec<AudioClip> {
        match kind {
            SourceKind::Clean => &mut self.clean,
            SourceKind::Noise => &mut self.noise,
            SourceKind::Noisy => &mut self.noisy,
        }
    }

    /// Moves the last `fraction` of the clean and noise pools (at least one
    /// clip each, when a pool has two or more) into a held-out set.
    pub fn split_validation(&mut self, fraction: f64) -> SourcePools {
        let mut held = SourcePools::default();
        for kind in [SourceKind::Clean, SourceKind::Noise] {
            let pool = self.pool_mut(kind);
            if pool.len() >= 2 {
                let n = ((pool.len() as f64 * fraction).round() as usize).clamp(1, pool.len() - 1);
                let tail = pool.split_off(pool.len() - n);
                *held.pool_mut(kind) = tail;
            }
        }
        held
    }
}

/// A random contiguous crop of `len` samples; short clips are zero-padded.
fn random_chunk(clip: &AudioClip, len: usize, rng: &mut impl Rng) -> AudioClip {
    let x = clip.samples();
    let mut out = vec![0.0; len];
    if x.len() >= len {
        let start = rng.gen_range(0..=x.len() - len);
        out.copy_from_slice(&x[start..start + len]);
    } else {
        out[..x.len()].copy_from_slice(x);
    }
    AudioClip::new(out, clip.sample_rate()).expect("crop of a valid clip")
}

fn pick<'a>(pool: &'a [AudioClip], rng: &mut impl Rng) -> &'a AudioClip {
    &pool[rng.gen_range(0..pool.len())]
}

/// Draws one example. `kind_override` forces the example kind (used for
/// validation sets); otherwise it is clean-target with probability
/// `cfg.clean_ratio`.
pub fn sample_example_of(
    pools: &SourcePools,
    cfg: &SamplerConfig,
    kind_override: Option<ExampleKind>,
    rng: &mut impl Rng,
) -> Result<MixExample> {
    let kind = kind_override.unwrap_or_else(|| {
        if rng.gen::<f64>() < cfg.clean_ratio {
            ExampleKind::CleanTarget
        } else {
            ExampleKind::RealNoisy
        }
    });
    let speech_pool = match kind {
        ExampleKind::CleanTarget => &pools.clean,
        ExampleKind::RealNoisy => &pools.noisy,
    };
    if speech_pool.is_empty() {
        return Err(Error::EmptyManifest(match kind {
            ExampleKind::CleanTarget => "clean",
            ExampleKind::RealNoisy => "noisy",
        }));
    }
    if pools.noise.is_empty() {
        return Err(Error::EmptyManifest("noise"));
    }

    for _ in 0..MAX_SILENT_RETRIES {
        let mut x1 = random_chunk(pick(speech_pool, rng), cfg.chunk_len, rng);
        if cfg.rir_enabled && kind == ExampleKind::CleanTarget {
            x1 = convolve_rir(&x1, &synthetic_rir(rng))?;
        }
        let noise = random_chunk(pick(&pools.noise, rng), cfg.chunk_len, rng);
        let alpha_db = rng.gen_range(cfg.snr_low_db..=cfg.snr_high_db);
        match MixExample::from_pair(x1, &noise, alpha_db, kind) {
            Ok(example) => return Ok(example),
            Err(Error::SilentSignal(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::SilentSignal(format!(
        "no non-silent material after {MAX_SILENT_RETRIES} draws"
    )))
}

pub fn sample_example(
    pools: &SourcePools,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<MixExample> {
    sample_example_of(pools, cfg, None, rng)
}

/// Seeded example stream over a fixed set of pools.
pub struct Sampler<'a> {
    pools: &'a SourcePools,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(pools: &'a SourcePools, cfg: SamplerConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self { pools, cfg, rng }
    }

    pub fn next_example(&mut self) -> Result<MixExample> {
        sample_example(self.pools, &self.cfg, &mut self.rng)
    }

    pub fn batch(&mut self, n: usize) -> Result<Vec<MixExample>> {
        (0..n).map(|_| self.next_example()).collect()
    }
}

/// Counts for [`gen_synth_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusCounts {
    pub clean: usize,
    pub noise: usize,
    pub noisy: usize,
}

pub const SYNTH_CLIP_LEN: usize = 4 * 16_000;

/// Harmonic "speech": 3 to 6 harmonics of a fundamental in [90, 300] Hz with
/// slow amplitude modulation and a gentle pitch drift.
pub fn synth_clean(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let f0 = rng.gen_range(90.0..300.0);
    let n_harm = rng.gen_range(3..=6);
    let amps: Vec<f64> = (1..=n_harm)
        .map(|h| rng.gen_range(0.5..1.0) / h as f64)
        .collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mod_rate = rng.gen_range(0.5..4.0);
    let mod_phase = rng.gen_range(0.0..2.0 * PI);
    let drift = rng.gen_range(-0.05..0.05);
    let drift_rate = rng.gen_range(0.1..0.5);
    let level = rng.gen_range(0.05..0.3);

    let sr = 16_000.0;
    let mut phase = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|t| {
            let time = t as f64 / sr;
            let f = f0 * (1.0 + drift * (2.0 * PI * drift_rate * time).sin());
            phase += 2.0 * PI * f / sr;
            let env = 0.55 + 0.45 * (2.0 * PI * mod_rate * time + mod_phase).sin();
            let tone: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| a * ((h + 1) as f64 * phase + p).sin())
                .sum();
            env * tone
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.iter_mut().for_each(|v| *v *= level / peak);
    out
}

/// White noise through a random second-order low-pass (RBJ biquad).
pub fn synth_noise(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let cutoff = rng.gen_range(600.0..5000.0);
    let w0 = 2.0 * PI * cutoff / 16_000.0;
    let q = std::f64::consts::FRAC_1_SQRT_2;
    let alpha = w0.sin() / (2.0 * q);
    let cos = w0.cos();
    let a0 = 1.0 + alpha;
    let b0 = (1.0 - cos) / 2.0 / a0;
    let b1 = (1.0 - cos) / a0;
    let b2 = b0;
    let a1 = -2.0 * cos / a0;
    let a2 = (1.0 - alpha) / a0;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            let y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            y
        })
        .collect();
    let rms = power_of(&out).sqrt();
    let level = rng.gen_range(0.03..0.12);
    out.iter_mut().for_each(|v| *v *= level / rms);
    out
}

/// Clean-style plus noise-style at a random SNR in [-5, 5] dB, through a
/// soft tanh saturation that stands in for recording-channel mismatch.
pub fn synth_noisy(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let speech = synth_clean(rng, len);
    let noise = synth_noise(rng, len);
    let snr = rng.gen_range(-5.0..5.0);
    let gain = (power_of(&speech) / power_of(&noise)).sqrt() * 10f64.powf(-snr / 20.0);
    let drive = 2.0;
    speech
        .iter()
        .zip(&noise)
        .map(|(s, n)| (drive * (s + gain * n)).tanh() / drive)
        .collect()
}

/// Manifest file name for a source kind within a corpus directory.
pub fn manifest_name(kind: SourceKind) -> String {
    format!("{kind}.jsonl")
}

/// Writes a deterministic synthetic corpus: `<out>/<kind>/<kind>_NNNN.wav`
/// clips of 4 s and one `<kind>.jsonl` manifest per kind. Returns the
/// manifest paths in clean, noise, noisy order.
pub fn gen_synth_corpus(out_dir: &Path, counts: CorpusCounts, seed: u64) -> Result<Vec<PathBuf>> {
    let mut manifests = Vec::new();
    for (stream, kind, n) in [
        (1u64, SourceKind::Clean, counts.clean),
        (2, SourceKind::Noise, counts.noise),
        (3, SourceKind::Noisy, counts.noisy),
    ] {
        let dir = out_dir.join(kind.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut manifest = Manifest::default();
        for i in 0..n {
            let samples = match kind {
                SourceKind::Clean => synth_clean(&mut rng, SYNTH_CLIP_LEN),
                SourceKind::Noise => synth_noise(&mut rng, SYNTH_CLIP_LEN),
                SourceKind::Noisy => synth_noisy(&mut rng, SYNTH_CLIP_LEN),
            };
            let clip = AudioClip::from_samples(samples)?;
            let name = format!("{kind}_{i:04}.wav");
            write_wav(&clip, dir.join(&name))?;
            manifest.entries.push(ManifestEntry {
                path: format!("{kind}/{name}"),
                kind,
                duration_s: clip.duration_s(),
            });
        }
        let path = out_dir.join(manifest_name(kind));
        manifest.write_jsonl(&path)?;
        manifests.push(path);
    }
    Ok(manifests)
}
