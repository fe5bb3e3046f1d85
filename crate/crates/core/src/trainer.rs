//! Training loop: dynamic mixtures, Adam, plateau halving, validation by SNR
//! improvement and best-checkpoint selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioClip, Manifest};
use crate::checkpoint;
use crate::dsp::{istft, stft, StftConfig};
use crate::error::{Error, Result};
use crate::loss::{csm_loss_with_grad, supervised_loss_with_grad, LossMode};
use crate::mixer::{sample_example_of, ExampleKind, MixExample, Sampler, SamplerConfig, SourcePools};
use crate::model::{self, forward, init_params, ModelConfig, Session};
use crate::postproc::snr_improvement;
use crate::tensor::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Regress estimate 1 on the clean reference instead of using MixIT.
    pub supervised: bool,
    /// Global L2 norm above which gradients are rescaled.
    pub grad_clip: f64,
    pub val_examples: usize,
    /// Share of clean and noise clips held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            epochs: 100,
            steps_per_epoch: 100,
            plateau_patience: 3,
            lr_factor: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_mode: LossMode::PerTerm,
            supervised: false,
            grad_clip: 5.0,
            val_examples: 16,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor must be in (0, 1), got {}", self.lr_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip > 0.0) {
            return bad("adam_eps and grad_clip must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate once the monitored loss has failed
/// to improve for `patience` consecutive observations. The counter restarts
/// after every reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    since_improvement: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            since_improvement: 0,
            reductions: 0,
        }
    }

    /// Records one epoch's validation loss; returns true if the rate was cut.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_improvement = 0;
            return false;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            self.lr *= self.factor;
            self.since_improvement = 0;
            self.reductions += 1;
            return true;
        }
        false
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since_improvement
    }
}

/// Parameters plus Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
    pub lr: f64,
}

impl TrainState {
    pub fn new(params: Parameters, lr: f64) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        Self {
            params,
            m,
            v,
            step: 0,
            lr,
        }
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &Parameters, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if !grads.same_layout(&self.params) {
            return Err(Error::ShapeMismatch("gradient layout differs from parameters".into()));
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient(name.to_owned()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = self.lr;
        let iter = self
            .params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads.iter());
        for ((((_, p), (_, m)), (_, v)), (_, g)) in iter {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_snri_db: f64,
    pub lr: f64,
}

/// Sidecar JSON written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub stft: StftConfig,
    pub epoch: usize,
    pub step: u64,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn read_meta(checkpoint: &Path) -> Result<CheckpointMeta> {
    let p = sidecar_path(checkpoint);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
}

/// Loads a checkpoint together with its model configuration.
pub fn load_model(checkpoint: &Path) -> Result<(Parameters, CheckpointMeta)> {
    let meta = read_meta(checkpoint)?;
    let params = checkpoint::load(checkpoint)?;
    model::check_layout(&meta.model, &params)?;
    Ok((params, meta))
}

/// STFT, forward, and resynthesis of estimate 1.
pub fn enhance(params: &Parameters, cfg: &ModelConfig, stft_cfg: &StftConfig, clip: &AudioClip) -> Result<AudioClip> {
    let spec = stft(clip, stft_cfg)?;
    let est = forward(params, &spec, cfg)?;
    istft(est.speech())
}

/// Loss of one example and its parameter gradient.
fn example_loss(
    params: &Parameters,
    cfg: &ModelConfig,
    stft_cfg: &StftConfig,
    example: &MixExample,
    mode: LossMode,
    supervised: bool,
    want_grad: bool,
) -> Result<(f64, Option<Parameters>)> {
    let input = stft(&example.input, stft_cfg)?;
    let x1 = stft(&example.refs[0], stft_cfg)?;
    let mut session = Session::new(params, cfg);
    let est = session.forward(&input)?;
    let (breakdown, grad) = if supervised {
        supervised_loss_with_grad(&x1, &est)?
    } else {
        let x2 = stft(&example.refs[1], stft_cfg)?;
        csm_loss_with_grad([&x1, &x2], &est, mode)?
    };
    let grads = if want_grad {
        Some(session.backward(&grad)?)
    } else {
        None
    };
    Ok((breakdown.total, grads))
}

/// Mean SNR improvement of estimate 1 over the input, against `refs[0]`.
pub fn validate_snri(
    params: &Parameters,
    val_set: &[MixExample],
    cfg: &ModelConfig,
    stft_cfg: &StftConfig,
) -> Result<f64> {
    if let Some(i) = val_set.iter().position(|e| e.kind != ExampleKind::CleanTarget) {
        return Err(Error::WrongKind(i));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidConfig("empty validation set".into()));
    }
    let mut total = 0.0;
    for ex in val_set {
        let enhanced = enhance(params, cfg, stft_cfg, &ex.input)?;
        total += snr_improvement(&ex.refs[0], &ex.input, &enhanced)?;
    }
    Ok(total / val_set.len() as f64)
}

/// Clean-target examples drawn from held-out material with their own seed.
pub fn build_validation_set(pools: &SourcePools, sampler: &SamplerConfig, n: usize, seed: u64) -> Result<Vec<MixExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7a1);
    let cfg = SamplerConfig {
        rir_enabled: false,
        ..sampler.clone()
    };
    (0..n)
        .map(|_| sample_example_of(pools, &cfg, Some(ExampleKind::CleanTarget), &mut rng))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    pub clip_events: usize,
    pub final_state: TrainState,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.mxc";

fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:04}.mxc"))
}

fn write_checkpoint(path: &Path, params: &Parameters, meta: &CheckpointMeta) -> Result<()> {
    checkpoint::save(params, path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Everything [`train_on_pools`] needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub stft: StftConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stft.validate()?;
        self.sampler.validate(self.stft.frame_len)?;
        self.train.validate()?;
        let frames = self.stft.frames_for(self.sampler.chunk_len);
        if frames < self.model.min_frames() {
            return Err(Error::InvalidConfig(format!(
                "chunk_len {} gives {frames} frames, model needs at least {}",
                self.sampler.chunk_len,
                self.model.min_frames()
            )));
        }
        Ok(())
    }
}

/// Loads the manifest's audio, holds out validation material and trains.
pub fn train(manifest: &Manifest, setup: &TrainSetup, out_dir: &Path) -> Result<TrainReport> {
    setup.validate()?;
    let mut pools = SourcePools::from_manifest(manifest)?;
    let held = pools.split_validation(setup.train.val_fraction);
    train_on_pools(&pools, &held, setup, out_dir)
}

/// Trains on `pools`, validating on clean-target mixtures built from `val_pools`.
pub fn train_on_pools(
    pools: &SourcePools,
    val_pools: &SourcePools,
    setup: &TrainSetup,
    out_dir: &Path,
) -> Result<TrainReport> {
    setup.validate()?;
    let TrainSetup {
        model: mcfg,
        sampler: scfg,
        train: tcfg,
        stft: stft_cfg,
    } = setup;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let val_set = build_validation_set(val_pools, scfg, tcfg.val_examples.max(1), scfg.seed)?;
    let mut state = TrainState::new(init_params(mcfg, tcfg.seed), tcfg.lr);
    let mut scheduler = PlateauScheduler::new(tcfg.lr, tcfg.lr_factor, tcfg.plateau_patience);
    let mut sampler = Sampler::new(pools, scfg.clone());

    let meta = |epoch: usize, step: u64| CheckpointMeta {
        model: mcfg.clone(),
        train: tcfg.clone(),
        sampler: scfg.clone(),
        stft: *stft_cfg,
        epoch,
        step,
    };
    let initial = checkpoint_path(out_dir, 0);
    write_checkpoint(&initial, &state.params, &meta(0, 0))?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics_file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let mut report = TrainReport {
        best_checkpoint: initial.clone(),
        best_epoch: 0,
        metrics: Vec::new(),
        step_losses: Vec::new(),
        clip_events: 0,
        final_state: state.clone(),
    };
    let mut best_snri = f64::NEG_INFINITY;

    for epoch in 1..=tcfg.epochs {
        let lr = scheduler.lr;
        state.lr = lr;
        let mut epoch_loss = 0.0;
        for _ in 0..tcfg.steps_per_epoch {
            let batch = sampler.batch(tcfg.batch_size)?;
            let mut grads = state.params.zeros_like();
            let mut loss = 0.0;
            for ex in &batch {
                let (l, g) = example_loss(
                    &state.params,
                    mcfg,
                    stft_cfg,
                    ex,
                    tcfg.loss_mode,
                    tcfg.supervised,
                    true,
                )?;
                loss += l;
                grads.add_scaled(&g.expect("gradient requested"), 1.0)?;
            }
            let n = batch.len() as f64;
            loss /= n;
            grads.scale(1.0 / n);
            if !loss.is_finite() || grads.first_non_finite().is_some() {
                let dump = out_dir.join("diverged.mxc");
                write_checkpoint(&dump, &state.params, &meta(epoch, state.step))?;
                return Err(Error::DivergedLoss {
                    step: state.step,
                    loss,
                });
            }
            let norm = grads.l2_norm();
            if norm > tcfg.grad_clip {
                grads.scale(tcfg.grad_clip / norm);
                report.clip_events += 1;
                info!("step {}: clipped gradient norm {norm:.3}", state.step + 1);
            }
            state.adam_step(&grads, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)?;
            report.step_losses.push(loss);
            epoch_loss += loss;
        }
        let train_loss = if tcfg.steps_per_epoch > 0 {
            epoch_loss / tcfg.steps_per_epoch as f64
        } else {
            0.0
        };

        let mut val_loss = 0.0;
        for ex in &val_set {
            let (l, _) = example_loss(&state.params, mcfg, stft_cfg, ex, tcfg.loss_mode, tcfg.supervised, false)?;
            val_loss += l;
        }
        val_loss /= val_set.len() as f64;
        let val_snri_db = validate_snri(&state.params, &val_set, mcfg, stft_cfg)?;

        let row = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_snri_db,
            lr,
        };
        let line = serde_json::to_string(&row).expect("metrics serialize");
        writeln!(metrics_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
        info!("{line}");
        report.metrics.push(row);

        if scheduler.observe(val_loss) {
            info!("epoch {epoch}: learning rate reduced to {}", scheduler.lr);
        }

        let path = checkpoint_path(out_dir, epoch);
        write_checkpoint(&path, &state.params, &meta(epoch, state.step))?;
        if val_snri_db > best_snri {
            best_snri = val_snri_db;
            report.best_checkpoint = path;
            report.best_epoch = epoch;
        }
    }

    let best_dst = out_dir.join(BEST_CHECKPOINT);
    fs::copy(&report.best_checkpoint, &best_dst).map_err(|e| Error::io(&best_dst, e))?;
    let side_src = sidecar_path(&report.best_checkpoint);
    let side_dst = sidecar_path(&best_dst);
    fs::copy(&side_src, &side_dst).map_err(|e| Error::io(&side_dst, e))?;
    state.lr = scheduler.lr;
    report.final_state = state;
    Ok(report)
}
