//! Browser bindings for three small demonstrations built on `mixit-core`:
//! SNR-controlled mixing with its spectrogram, speaker-reinforcement
//! remixing, and the per-matrix MixIT loss table.
//!
//! The plain functions do the work and are tested natively; the
//! `wasm_bindgen` exports only convert errors.

use mixit_core::dsp::{components, stft, Components};
use mixit_core::loss::{enumerate_allowed, l1_term};
use mixit_core::mixer::{synth_clean, synth_noise, ExampleKind, MixExample};
use mixit_core::postproc::{remix, remix_gain, snr_db};
use mixit_core::{AudioClip, Spectrogram, StftConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Length of the demo clips: 1 s at 16 kHz.
pub const DEMO_LEN: usize = 16_000;
const DB_FLOOR: f64 = -100.0;

/// Log-magnitude spectrogram plus a scalar readout.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct View {
    bins: usize,
    frames: usize,
    db: Vec<f32>,
    snr_db: f64,
    gain: f64,
}

#[wasm_bindgen]
impl View {
    #[wasm_bindgen(getter)]
    pub fn bins(&self) -> usize {
        self.bins
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Row-major `[bin][frame]` magnitudes in dB.
    #[wasm_bindgen(getter)]
    pub fn db(&self) -> Vec<f32> {
        self.db.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    /// Remix gain applied to the noisy input; 0 for plain mixtures.
    #[wasm_bindgen(getter)]
    pub fn gain(&self) -> f64 {
        self.gain
    }
}

fn to_db(spec: &Spectrogram) -> Vec<f32> {
    spec.data()
        .iter()
        .map(|c| (20.0 * c.norm().log10()).max(DB_FLOOR) as f32)
        .collect()
}

fn view(clip: &AudioClip, snr_db: f64, gain: f64) -> mixit_core::Result<View> {
    let spec = stft(clip, &StftConfig::default())?;
    Ok(View {
        bins: spec.bins(),
        frames: spec.frames(),
        db: to_db(&spec),
        snr_db,
        gain,
    })
}

/// Synthetic speech-like clip and noise clip mixed at `alpha_db`.
pub fn demo_example(seed: u32, alpha_db: f64) -> mixit_core::Result<MixExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let speech = AudioClip::from_samples(synth_clean(&mut rng, DEMO_LEN))?;
    let noise = AudioClip::from_samples(synth_noise(&mut rng, DEMO_LEN))?;
    MixExample::from_pair(speech, &noise, alpha_db, ExampleKind::CleanTarget)
}

pub fn mixture_view(seed: u32, alpha_db: f64) -> mixit_core::Result<View> {
    let ex = demo_example(seed, alpha_db)?;
    view(&ex.input, ex.measured_snr_db(), 0.0)
}

/// Remixes a stand-in enhanced signal (speech plus residual noise 20 dB
/// down) with the mixture at `beta_db`. The readout is the SNR of the result
/// against the clean speech.
pub fn remix_view(seed: u32, alpha_db: f64, beta_db: f64) -> mixit_core::Result<View> {
    let ex = demo_example(seed, alpha_db)?;
    let residual = mixit_core::mixer::scale_to_snr(&ex.refs[0], &ex.refs[1], 20.0)?;
    let enhanced = ex.refs[0].add_scaled(&ex.refs[1], residual)?;
    let g = remix_gain(&enhanced, &ex.input, beta_db)?;
    let out = remix(&enhanced, &ex.input, beta_db)?;
    view(&out, snr_db(&ex.refs[0], &out)?, g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixLoss {
    pub matrix: String,
    pub re: f64,
    pub im: f64,
    pub mag: f64,
    pub total: f64,
}

fn stack(parts: &[&Components], pick: fn(&Components) -> &Vec<f64>) -> Vec<f64> {
    parts.iter().flat_map(|c| pick(c).iter().copied()).collect()
}

/// Loss of every allowed three-output assignment for estimates
/// `[speech, (1-leak)·noise, leak·noise]`, where a fraction `leak` of the
/// noise also bleeds into the speech channel.
pub fn mixit_table(seed: u32, alpha_db: f64, leak: f64) -> mixit_core::Result<Vec<MatrixLoss>> {
    let leak = leak.clamp(0.0, 1.0);
    let ex = demo_example(seed, alpha_db)?;
    let cfg = StftConfig::default();
    let s = ex.refs[0].add_scaled(&ex.refs[1], leak)?;
    let n1 = ex.refs[1].scaled(1.0 - leak);
    let n2 = ex.refs[1].scaled(leak);
    let refs: Vec<Components> = ex.refs.iter().map(|r| stft(r, &cfg).map(|x| components(&x))).collect::<Result<_, _>>()?;
    let ests: Vec<Components> = [s, n1, n2]
        .iter()
        .map(|e| stft(e, &cfg).map(|x| components(&x)))
        .collect::<Result<_, _>>()?;
    let r: Vec<&Components> = refs.iter().collect();
    let e: Vec<&Components> = ests.iter().collect();
    let (rr, ri, rm) = (stack(&r, |c| &c.re), stack(&r, |c| &c.im), stack(&r, |c| &c.mag));
    let (er, ei, em) = (stack(&e, |c| &c.re), stack(&e, |c| &c.im), stack(&e, |c| &c.mag));
    enumerate_allowed(3)?
        .iter()
        .map(|a| {
            let re = l1_term(&rr, &er, a)?;
            let im = l1_term(&ri, &ei, a)?;
            let mag = l1_term(&rm, &em, a)?;
            Ok(MatrixLoss {
                matrix: a.to_string(),
                re,
                im,
                mag,
                total: re + im + mag,
            })
        })
        .collect()
}

fn js_err(e: mixit_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = mixtureView)]
pub fn mixture_view_js(seed: u32, alpha_db: f64) -> Result<View, JsError> {
    mixture_view(seed, alpha_db).map_err(js_err)
}

#[wasm_bindgen(js_name = remixView)]
pub fn remix_view_js(seed: u32, alpha_db: f64, beta_db: f64) -> Result<View, JsError> {
    remix_view(seed, alpha_db, beta_db).map_err(js_err)
}

/// JSON array of `{matrix, re, im, mag, total}` rows.
#[wasm_bindgen(js_name = mixitTable)]
pub fn mixit_table_js(seed: u32, alpha_db: f64, leak: f64) -> Result<String, JsError> {
    let rows = mixit_table(seed, alpha_db, leak).map_err(js_err)?;
    Ok(serde_json::to_string(&rows).expect("rows serialize"))
}
