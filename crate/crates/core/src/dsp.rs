//! Short-time Fourier analysis and synthesis.
//!
//! Frames are centred: the signal is reflect-padded by `frame_len / 2` on both
//! sides and `K = 1 + floor(len / hop)` frames are taken. Analysis and
//! synthesis both use a periodic square-root Hann window, and synthesis
//! divides by the overlap-added squared window so the round trip is exact
//! even at the edges.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 128,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "frame_len must be even and >= 2, got {}",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.frame_len % self.hop != 0 || self.frame_len / self.hop < 2 {
            return Err(Error::InvalidConfig(format!(
                "hop {} must divide frame_len {} with at least 2x overlap",
                self.hop, self.frame_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Periodic square-root Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt())
            .collect()
    }
}

/// A one-sided complex spectrogram stored bin-major (`data[f * frames + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<Complex64>,
    bins: usize,
    frames: usize,
    config: StftConfig,
    signal_len: usize,
}

impl Spectrogram {
    pub fn zeros(config: StftConfig, signal_len: usize) -> Self {
        let bins = config.bins();
        let frames = config.frames_for(signal_len);
        Self {
            data: vec![Complex64::new(0.0, 0.0); bins * frames],
            bins,
            frames,
            config,
            signal_len,
        }
    }

    /// Builds a spectrogram with the same layout as `like` from raw data.
    pub fn with_layout_of(like: &Spectrogram, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != like.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries, got {}",
                like.data.len(),
                data.len()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFiniteSample);
        }
        Ok(Self {
            data,
            ..like.clone_layout()
        })
    }

    fn clone_layout(&self) -> Self {
        Self {
            data: Vec::new(),
            bins: self.bins,
            frames: self.frames,
            config: self.config,
            signal_len: self.signal_len,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    /// Length of the time-domain signal this spectrogram was computed from.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, f: usize, k: usize) -> Complex64 {
        self.data[f * self.frames + k]
    }

    pub fn same_shape(&self, other: &Spectrogram) -> bool {
        self.bins == other.bins && self.frames == other.frames
    }

    pub fn add(&self, other: &Spectrogram) -> Result<Spectrogram> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.bins, self.frames, other.bins, other.frames
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Spectrogram {
            data,
            ..self.clone_layout()
        })
    }
}

/// Real part, imaginary part and magnitude, each `bins * frames` long.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub mag: Vec<f64>,
}

pub fn components(spec: &Spectrogram) -> Components {
    let n = spec.data.len();
    let mut out = Components {
        re: Vec::with_capacity(n),
        im: Vec::with_capacity(n),
        mag: Vec::with_capacity(n),
    };
    for c in &spec.data {
        out.re.push(c.re);
        out.im.push(c.im);
        out.mag.push(c.re.hypot(c.im));
    }
    out
}

/// Index into a reflect-padded signal (`numpy.pad(mode="reflect")`,
/// repeated when the pad exceeds the signal).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let x = clip.samples();
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let n = cfg.frame_len;
    let half = (n / 2) as isize;
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut spec = Spectrogram::zeros(*cfg, x.len());
    let (bins, frames) = (spec.bins, spec.frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..frames {
        let start = (k * cfg.hop) as isize - half;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = x[reflect_index(start + i as isize, x.len())];
            *b = Complex64::new(window[i] * s, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            spec.data[f * frames + k] = buf[f];
        }
    }
    Ok(spec)
}

pub fn istft(spec: &Spectrogram) -> Result<AudioClip> {
    let cfg = spec.config;
    cfg.validate()?;
    let n = cfg.frame_len;
    if spec.bins != cfg.bins() || spec.frames != cfg.frames_for(spec.signal_len) {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram {}x{} inconsistent with frame_len {} and signal length {}",
            spec.bins, spec.frames, n, spec.signal_len
        )));
    }
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let padded_len = spec.signal_len + n;
    let mut acc = vec![0.0; padded_len];
    let mut env = vec![0.0; padded_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let frames = spec.frames;
    for k in 0..frames {
        buf[0] = Complex64::new(spec.data[k].re, 0.0);
        for f in 1..n / 2 {
            let c = spec.data[f * frames + k];
            buf[f] = c;
            buf[n - f] = c.conj();
        }
        buf[n / 2] = Complex64::new(spec.data[(n / 2) * frames + k].re, 0.0);
        ifft.process(&mut buf);
        let start = k * cfg.hop;
        for i in 0..n {
            let pos = start + i;
            if pos >= padded_len {
                break;
            }
            acc[pos] += window[i] * buf[i].re / n as f64;
            env[pos] += window[i] * window[i];
        }
    }
    let half = n / 2;
    let samples = (0..spec.signal_len)
        .map(|t| {
            let e = env[t + half];
            if e > 1e-10 {
                acc[t + half] / e
            } else {
                0.0
            }
        })
        .collect();
    AudioClip::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(rng: &mut ChaCha8Rng, len: usize) -> AudioClip {
        AudioClip::from_samples((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_clip_shape() {
        let spec = stft(&AudioClip::zeros(32000), &StftConfig::default()).unwrap();
        assert_eq!((spec.bins(), spec.frames()), (257, 251));
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
        let back = istft(&spec).unwrap();
        assert_eq!(back.len(), 32000);
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn empty_clip_is_rejected() {
        assert!(matches!(
            stft(&AudioClip::zeros(0), &StftConfig::default()),
            Err(Error::EmptySignal)
        ));
    }

    #[test]
    fn round_trip_preserves_length_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [1, 2, 100, 128, 257, 1000, 32000] {
            let x = random_clip(&mut rng, len);
            let y = istft(&stft(&x, &StftConfig::default()).unwrap()).unwrap();
            assert_eq!(y.len(), len);
            let err = x
                .samples()
                .iter()
                .zip(y.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-6, "len {len}: {err}");
        }
    }

    #[test]
    fn bin_centred_cosine_has_one_dominant_bin() {
        let cfg = StftConfig::default();
        for m in [5usize, 40, 100] {
            let freq = 16000.0 * m as f64 / 512.0;
            let x: Vec<f64> = (0..8000)
                .map(|t| (2.0 * PI * freq * t as f64 / 16000.0).cos())
                .collect();
            let spec = stft(&AudioClip::from_samples(x).unwrap(), &cfg).unwrap();
            // interior frames only; edges see the reflection
            for k in 4..spec.frames() - 4 {
                let peak = spec.get(m, k).norm();
                let other = (0..spec.bins())
                    .filter(|&f| f.abs_diff(m) > 1)
                    .map(|f| spec.get(f, k).norm())
                    .fold(0.0, f64::max);
                let margin = 20.0 * (peak / other.max(1e-300)).log10();
                assert!(margin >= 20.0, "m={m} k={k} margin={margin}");
                // sqrt-Hann leaks into the immediate neighbours only
                let neighbour = spec.get(m + 1, k).norm().max(spec.get(m - 1, k).norm());
                assert!(peak > neighbour);
            }
        }
    }

    #[test]
    fn parseval_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = StftConfig::default();
        let n = cfg.frame_len;
        let window = cfg.window();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        for _ in 0..20 {
            let frame: Vec<f64> = (0..n).map(|i| window[i] * rng.gen_range(-1.0..1.0)).collect();
            let mut buf: Vec<Complex64> = frame.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            let one_sided = &buf[..n / 2 + 1];
            let energy_time: f64 = frame.iter().map(|v| v * v).sum();
            let mut energy_freq = one_sided[0].norm_sqr() + one_sided[n / 2].norm_sqr();
            energy_freq += 2.0 * one_sided[1..n / 2].iter().map(|c| c.norm_sqr()).sum::<f64>();
            energy_freq /= n as f64;
            assert!(((energy_time - energy_freq) / energy_time).abs() <= 1e-9);
        }
    }

    #[test]
    fn components_examples() {
        let mut spec = Spectrogram::zeros(StftConfig::default(), 10);
        let c = components(&spec);
        assert!(c.re.iter().chain(&c.im).chain(&c.mag).all(|&v| v == 0.0));
        spec.data_mut()[0] = Complex64::new(3.0, 4.0);
        let c = components(&spec);
        assert_eq!((c.re[0], c.im[0], c.mag[0]), (3.0, 4.0, 5.0));
        spec.data_mut()[0] = Complex64::new(3.0, -4.0);
        assert_eq!(components(&spec).mag[0], 5.0);
    }

    #[test]
    fn reflect_padding_matches_numpy() {
        // numpy.pad([0,1,2,3], 6, mode="reflect")
        let expect = [0, 1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2, 3];
        let got: Vec<usize> = (-6..10).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, expect);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn stft_is_linear(seed in any::<u64>(), len in 200usize..3000, gain in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_clip(&mut rng, len);
            let b = random_clip(&mut rng, len);
            let cfg = StftConfig::default();
            let sum = stft(&a.add_scaled(&b, gain).unwrap(), &cfg).unwrap();
            let sa = stft(&a, &cfg).unwrap();
            let sb = stft(&b, &cfg).unwrap();
            for ((s, x), y) in sum.data().iter().zip(sa.data()).zip(sb.data()) {
                prop_assert!((s - (x + y * gain)).norm() < 1e-9);
            }
        }
    }
}
