//! Small U-shaped complex spectral mapping network.
//!
//! ```text
//! mixture STFT (Re, Im) / rms ──► enc[0] ─► pool ─► … ─► enc[D-1] ─► pool
//!                                   │skip                  │skip
//!                                   ▼                      ▼     TCN: R × X dilated
//! 2M-channel head ◄─ [dec[0], x0] ◄─ … ◄─────────── dec[D-1] ◄── depthwise blocks
//! ```
//!
//! Encoder and decoder levels are `3x3 conv -> ELU -> channel norm`. Each
//! encoder level halves the frequency axis by average pooling; the decoder
//! upsamples by repetition and concatenates the matching skip. The
//! bottleneck stacks `R` repeats of `X` residual blocks
//! `x + pw(norm(elu(dwconv_d(x))))` with dilation `d = 2^x` along time.
//! The head is a 1x1 convolution over the last decoder features concatenated
//! with the network input, emitting `(Re, Im)` for each of the `M` sources.
//!
//! The mixture is divided by its RMS spectral magnitude before the first
//! layer and the outputs are multiplied back, so the network is
//! scale-equivariant. Frequency bins are zero-padded up to a multiple of
//! `2^D` internally and cropped on output.
//!
//! Gradients are computed by an explicit reverse pass over a recorded
//! [`Trace`]; everything is `f64`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

/// Bins expected at the model input (512-point one-sided spectrum).
pub const INPUT_BINS: usize = 257;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of estimated sources `M`; channel 0 is the speech estimate.
    pub num_outputs: usize,
    pub base_channels: usize,
    pub enc_depth: usize,
    pub tcn_repeats: usize,
    pub tcn_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_outputs: 3,
            base_channels: 16,
            enc_depth: 3,
            tcn_repeats: 2,
            tcn_blocks: 7,
        }
    }
}

impl ModelConfig {
    /// The configuration used for gradient checks and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            num_outputs: 3,
            base_channels: 4,
            enc_depth: 2,
            tcn_repeats: 1,
            tcn_blocks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_outputs < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_outputs must be >= 2, got {}",
                self.num_outputs
            )));
        }
        if self.base_channels == 0 || self.enc_depth == 0 || self.tcn_blocks == 0 {
            return Err(Error::InvalidConfig(
                "base_channels, enc_depth and tcn_blocks must be positive".into(),
            ));
        }
        if self.enc_depth > 6 || self.tcn_blocks > 16 {
            return Err(Error::InvalidConfig("enc_depth <= 6 and tcn_blocks <= 16".into()));
        }
        Ok(())
    }

    /// Output channels of encoder/decoder level `l`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.level_channels(self.enc_depth - 1)
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.tcn_blocks).map(|x| 1 << x).collect()
    }

    /// Smallest frame count accepted by [`forward`].
    pub fn min_frames(&self) -> usize {
        (1 << (self.tcn_blocks - 1)) + 1
    }

    /// Internal frequency size: 257 rounded up to a multiple of `2^D`.
    pub fn padded_bins(&self) -> usize {
        let m = 1 << self.enc_depth;
        INPUT_BINS.div_ceil(m) * m
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize| co * ci * 9 + co + 2 * co;
        let mut n = 0;
        let mut c_in = 2;
        for l in 0..self.enc_depth {
            n += conv(c_in, self.level_channels(l));
            c_in = self.level_channels(l);
        }
        let c = self.bottleneck_channels();
        n += self.tcn_repeats * self.tcn_blocks * (3 * c + c + 2 * c + c * c + c);
        let mut cur = c;
        for l in (0..self.enc_depth).rev() {
            let co = self.level_channels(l);
            n += conv(cur + co, co);
            cur = co;
        }
        n + 2 * self.num_outputs * (cur + 2) + 2 * self.num_outputs
    }
}

/// `M` complex source estimates; `specs[0]` is the denoised speech.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEstimates {
    pub specs: Vec<Spectrogram>,
}

impl SourceEstimates {
    pub fn speech(&self) -> &Spectrogram {
        &self.specs[0]
    }
}

/// Gradient of a scalar loss with respect to [`SourceEstimates`], laid out
/// `[source][bin][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateGrad {
    pub sources: usize,
    pub bins: usize,
    pub frames: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl EstimateGrad {
    pub fn zeros(sources: usize, bins: usize, frames: usize) -> Self {
        let n = sources * bins * frames;
        Self {
            sources,
            bins,
            frames,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.re.iter_mut().chain(self.im.iter_mut()).for_each(|v| *v *= s);
    }
}

// ---------------------------------------------------------------------------
// parameter layout

fn conv_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.conv.w"),
        format!("{prefix}.conv.b"),
        format!("{prefix}.norm.gamma"),
        format!("{prefix}.norm.beta"),
    ]
}

fn tcn_prefix(r: usize, x: usize) -> String {
    format!("tcn.{r}.{x}")
}

/// Name, shape and fan-in of every parameter tensor, in construction order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Option<usize>)> {
    let mut out = Vec::new();
    let push_conv = |out: &mut Vec<_>, prefix: &str, ci: usize, co: usize| {
        let [w, b, g, be] = conv_names(prefix);
        out.push((w, vec![co, ci, 3, 3], Some(ci * 9)));
        out.push((b, vec![co], None));
        out.push((g, vec![co], None));
        out.push((be, vec![co], None));
    };
    let mut c_in = 2;
    for l in 0..cfg.enc_depth {
        push_conv(&mut out, &format!("enc{l}"), c_in, cfg.level_channels(l));
        c_in = cfg.level_channels(l);
    }
    let c = cfg.bottleneck_channels();
    for r in 0..cfg.tcn_repeats {
        for x in 0..cfg.tcn_blocks {
            let p = tcn_prefix(r, x);
            out.push((format!("{p}.dw.w"), vec![c, 3], Some(3)));
            out.push((format!("{p}.dw.b"), vec![c], None));
            out.push((format!("{p}.norm.gamma"), vec![c], None));
            out.push((format!("{p}.norm.beta"), vec![c], None));
            out.push((format!("{p}.pw.w"), vec![c, c], Some(c)));
            out.push((format!("{p}.pw.b"), vec![c], None));
        }
    }
    let mut cur = c;
    for l in (0..cfg.enc_depth).rev() {
        let co = cfg.level_channels(l);
        push_conv(&mut out, &format!("dec{l}"), cur + co, co);
        cur = co;
    }
    out.push(("head.w".into(), vec![2 * cfg.num_outputs, cur + 2], Some(cur + 2)));
    out.push(("head.b".into(), vec![2 * cfg.num_outputs], None));
    out
}

/// Weights `~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases and norm shifts
/// zero, norm scales one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    for (name, shape, fan_in) in layout(cfg) {
        let t = match fan_in {
            Some(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_vec(&shape, data).expect("layout shape")
            }
            None if name.ends_with(".gamma") => Tensor::filled(&shape, 1.0),
            None => Tensor::zeros(&shape),
        };
        params.insert(name, t);
    }
    params
}

/// Fan-in of a named parameter, if it is a weight.
pub fn fan_in_of(cfg: &ModelConfig, name: &str) -> Option<usize> {
    layout(cfg)
        .into_iter()
        .find(|(n, _, _)| n == name)
        .and_then(|(_, _, f)| f)
}

/// Checks that `params` has exactly the layout `cfg` expects.
pub fn check_layout(cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    let expected = layout(cfg);
    if expected.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for (name, shape, _) in expected {
        let t = params.expect(&name)?;
        if t.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "{name}: expected shape {shape:?}, found {:?}",
                t.shape
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// feature maps and layers

/// Channel-major feature map `[c][f][k]`.
#[derive(Debug, Clone, PartialEq)]
struct Fmap {
    c: usize,
    f: usize,
    k: usize,
    data: Vec<f64>,
}

impl Fmap {
    fn zeros(c: usize, f: usize, k: usize) -> Self {
        Self {
            c,
            f,
            k,
            data: vec![0.0; c * f * k],
        }
    }

    fn plane(&self) -> usize {
        self.f * self.k
    }

    fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteActivation(what.to_owned()))
        }
    }

    fn concat(a: &Fmap, b: &Fmap) -> Fmap {
        debug_assert_eq!((a.f, a.k), (b.f, b.k));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Fmap {
            c: a.c + b.c,
            f: a.f,
            k: a.k,
            data,
        }
    }

    fn split(self, first: usize) -> (Fmap, Fmap) {
        let p = self.plane();
        let mut data = self.data;
        let rest = data.split_off(first * p);
        (
            Fmap {
                c: first,
                f: self.f,
                k: self.k,
                data,
            },
            Fmap {
                c: self.c - first,
                f: self.f,
                k: self.k,
                data: rest,
            },
        )
    }

    fn add_assign(&mut self, other: &Fmap) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `(row offset range)` for a tap shifted by `d` in `-1..=1` along a row of
/// length `n`: output indices `lo..hi` read input `i + d`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    match d {
        -1 => (1, n),
        0 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// 3x3 "same" convolution, zero padded.
fn conv3x3(x: &Fmap, w: &[f64], b: &[f64], co: usize) -> Fmap {
    let (ci_n, fdim, kdim) = (x.c, x.f, x.k);
    let mut y = Fmap::zeros(co, fdim, kdim);
    let plane = fdim * kdim;
    for o in 0..co {
        let out = &mut y.data[o * plane..(o + 1) * plane];
        out.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..ci_n {
            let inp = &x.data[i * plane..(i + 1) * plane];
            let wk = &w[(o * ci_n + i) * 9..(o * ci_n + i + 1) * 9];
            for f in 0..fdim {
                let row_out = &mut out[f * kdim..(f + 1) * kdim];
                for df in 0..3 {
                    let fi = f as isize + df as isize - 1;
                    if fi < 0 || fi >= fdim as isize {
                        continue;
                    }
                    let row_in = &inp[fi as usize * kdim..(fi as usize + 1) * kdim];
                    for dk in 0..3 {
                        let wv = wk[df * 3 + dk];
                        let d = dk as isize - 1;
                        let (lo, hi) = tap_range(kdim, d);
                        let src = &row_in[(lo as isize + d) as usize..(hi as isize + d) as usize];
                        for (o_, s) in row_out[lo..hi].iter_mut().zip(src) {
                            *o_ += wv * s;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
fn conv3x3_backward(x: &Fmap, w: &[f64], dy: &Fmap) -> (Fmap, Vec<f64>, Vec<f64>) {
    let (ci_n, fdim, kdim) = (x.c, x.f, x.k);
    let co = dy.c;
    let plane = fdim * kdim;
    let mut dx = Fmap::zeros(ci_n, fdim, kdim);
    let mut dw = vec![0.0; co * ci_n * 9];
    let db: Vec<f64> = (0..co).map(|o| dy.channel(o).iter().sum()).collect();
    for o in 0..co {
        let g = &dy.data[o * plane..(o + 1) * plane];
        for i in 0..ci_n {
            let inp = &x.data[i * plane..(i + 1) * plane];
            let base = (o * ci_n + i) * 9;
            let dxi = &mut dx.data[i * plane..(i + 1) * plane];
            for f in 0..fdim {
                let row_g = &g[f * kdim..(f + 1) * kdim];
                for df in 0..3 {
                    let fi = f as isize + df as isize - 1;
                    if fi < 0 || fi >= fdim as isize {
                        continue;
                    }
                    let fi = fi as usize;
                    for dk in 0..3 {
                        let d = dk as isize - 1;
                        let (lo, hi) = tap_range(kdim, d);
                        let s_lo = (lo as isize + d) as usize;
                        let s_hi = (hi as isize + d) as usize;
                        let row_in = &inp[fi * kdim + s_lo..fi * kdim + s_hi];
                        let gslice = &row_g[lo..hi];
                        let mut acc = 0.0;
                        for (a, b) in gslice.iter().zip(row_in) {
                            acc += a * b;
                        }
                        dw[base + df * 3 + dk] += acc;
                        let wv = w[base + df * 3 + dk];
                        let row_dx = &mut dxi[fi * kdim + s_lo..fi * kdim + s_hi];
                        for (dxv, gv) in row_dx.iter_mut().zip(gslice) {
                            *dxv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn elu(x: &mut Fmap) {
    for v in x.data.iter_mut() {
        if *v <= 0.0 {
            *v = v.exp_m1();
        }
    }
}

/// `dy * elu'(x)` where `y = elu(x)`.
fn elu_backward(y: &Fmap, dy: &mut Fmap) {
    for (g, &yv) in dy.data.iter_mut().zip(&y.data) {
        if yv <= 0.0 {
            *g *= yv + 1.0;
        }
    }
}

struct NormCache {
    xhat: Fmap,
    inv_std: Vec<f64>,
}

/// Per-channel normalization over the whole `(f, k)` plane with learned
/// scale and shift.
fn channel_norm(x: &Fmap, gamma: &[f64], beta: &[f64]) -> (Fmap, NormCache) {
    let plane = x.plane();
    let mut xhat = Fmap::zeros(x.c, x.f, x.k);
    let mut y = Fmap::zeros(x.c, x.f, x.k);
    let mut inv_std = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let xs = x.channel(c);
        let mean = xs.iter().sum::<f64>() / plane as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        let xh = &mut xhat.data[c * plane..(c + 1) * plane];
        let yy = &mut y.data[c * plane..(c + 1) * plane];
        for ((h, o), v) in xh.iter_mut().zip(yy.iter_mut()).zip(xs) {
            *h = (v - mean) * is;
            *o = gamma[c] * *h + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
fn channel_norm_backward(cache: &NormCache, gamma: &[f64], dy: &Fmap) -> (Fmap, Vec<f64>, Vec<f64>) {
    let xhat = &cache.xhat;
    let plane = xhat.plane();
    let n = plane as f64;
    let mut dx = Fmap::zeros(xhat.c, xhat.f, xhat.k);
    let mut dgamma = Vec::with_capacity(xhat.c);
    let mut dbeta = Vec::with_capacity(xhat.c);
    for c in 0..xhat.c {
        let g = dy.channel(c);
        let h = xhat.channel(c);
        let sum_g: f64 = g.iter().sum();
        let sum_gh: f64 = g.iter().zip(h).map(|(a, b)| a * b).sum();
        dbeta.push(sum_g);
        dgamma.push(sum_gh);
        // dxhat = gamma * dy
        let scale = gamma[c] * cache.inv_std[c] / n;
        let out = &mut dx.data[c * plane..(c + 1) * plane];
        for ((o, gv), hv) in out.iter_mut().zip(g).zip(h) {
            *o = scale * (n * gv - sum_g - hv * sum_gh);
        }
    }
    (dx, dgamma, dbeta)
}

fn pool_freq(x: &Fmap) -> Fmap {
    let f2 = x.f / 2;
    let mut y = Fmap::zeros(x.c, f2, x.k);
    for c in 0..x.c {
        for f in 0..f2 {
            let a = (c * x.f + 2 * f) * x.k;
            let b = a + x.k;
            let o = (c * f2 + f) * x.k;
            for k in 0..x.k {
                y.data[o + k] = 0.5 * (x.data[a + k] + x.data[b + k]);
            }
        }
    }
    y
}

fn pool_freq_backward(dy: &Fmap) -> Fmap {
    let mut dx = Fmap::zeros(dy.c, dy.f * 2, dy.k);
    for c in 0..dy.c {
        for f in 0..dy.f {
            let o = (c * dy.f + f) * dy.k;
            let a = (c * dx.f + 2 * f) * dy.k;
            for k in 0..dy.k {
                let g = 0.5 * dy.data[o + k];
                dx.data[a + k] = g;
                dx.data[a + dy.k + k] = g;
            }
        }
    }
    dx
}

fn upsample_freq(x: &Fmap) -> Fmap {
    let mut y = Fmap::zeros(x.c, x.f * 2, x.k);
    for c in 0..x.c {
        for f in 0..x.f {
            let src = (c * x.f + f) * x.k;
            let dst = (c * y.f + 2 * f) * x.k;
            y.data[dst..dst + x.k].copy_from_slice(&x.data[src..src + x.k]);
            y.data[dst + x.k..dst + 2 * x.k].copy_from_slice(&x.data[src..src + x.k]);
        }
    }
    y
}

fn upsample_freq_backward(dy: &Fmap) -> Fmap {
    let f2 = dy.f / 2;
    let mut dx = Fmap::zeros(dy.c, f2, dy.k);
    for c in 0..dy.c {
        for f in 0..f2 {
            let a = (c * dy.f + 2 * f) * dy.k;
            let o = (c * f2 + f) * dy.k;
            for k in 0..dy.k {
                dx.data[o + k] = dy.data[a + k] + dy.data[a + dy.k + k];
            }
        }
    }
    dx
}

/// Depthwise kernel-3 convolution along time with dilation `d`, zero padded.
fn dwconv_time(x: &Fmap, w: &[f64], b: &[f64], d: usize) -> Fmap {
    let mut y = Fmap::zeros(x.c, x.f, x.k);
    let kdim = x.k;
    for c in 0..x.c {
        let taps = &w[c * 3..c * 3 + 3];
        for f in 0..x.f {
            let base = (c * x.f + f) * kdim;
            let row = &x.data[base..base + kdim];
            let out = &mut y.data[base..base + kdim];
            for (k, o) in out.iter_mut().enumerate() {
                let mut acc = b[c] + taps[1] * row[k];
                if k >= d {
                    acc += taps[0] * row[k - d];
                }
                if k + d < kdim {
                    acc += taps[2] * row[k + d];
                }
                *o = acc;
            }
        }
    }
    y
}

fn dwconv_time_backward(x: &Fmap, w: &[f64], d: usize, dy: &Fmap) -> (Fmap, Vec<f64>, Vec<f64>) {
    let mut dx = Fmap::zeros(x.c, x.f, x.k);
    let mut dw = vec![0.0; x.c * 3];
    let mut db = vec![0.0; x.c];
    let kdim = x.k;
    for c in 0..x.c {
        let taps = &w[c * 3..c * 3 + 3];
        for f in 0..x.f {
            let base = (c * x.f + f) * kdim;
            let row = &x.data[base..base + kdim];
            let g = &dy.data[base..base + kdim];
            let drow = &mut dx.data[base..base + kdim];
            for k in 0..kdim {
                let gv = g[k];
                db[c] += gv;
                dw[c * 3 + 1] += gv * row[k];
                drow[k] += taps[1] * gv;
                if k >= d {
                    dw[c * 3] += gv * row[k - d];
                    drow[k - d] += taps[0] * gv;
                }
                if k + d < kdim {
                    dw[c * 3 + 2] += gv * row[k + d];
                    drow[k + d] += taps[2] * gv;
                }
            }
        }
    }
    (dx, dw, db)
}

/// 1x1 convolution, `w` is `[co][ci]`.
fn pointwise(x: &Fmap, w: &[f64], b: &[f64], co: usize) -> Fmap {
    let plane = x.plane();
    let mut y = Fmap::zeros(co, x.f, x.k);
    for o in 0..co {
        let out = &mut y.data[o * plane..(o + 1) * plane];
        out.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..x.c {
            let wv = w[o * x.c + i];
            if wv == 0.0 {
                continue;
            }
            for (a, s) in out.iter_mut().zip(x.channel(i)) {
                *a += wv * s;
            }
        }
    }
    y
}

fn pointwise_backward(x: &Fmap, w: &[f64], dy: &Fmap) -> (Fmap, Vec<f64>, Vec<f64>) {
    let plane = x.plane();
    let mut dx = Fmap::zeros(x.c, x.f, x.k);
    let mut dw = vec![0.0; dy.c * x.c];
    let mut db = vec![0.0; dy.c];
    for o in 0..dy.c {
        let g = dy.channel(o);
        db[o] = g.iter().sum();
        for i in 0..x.c {
            let xi = x.channel(i);
            dw[o * x.c + i] = g.iter().zip(xi).map(|(a, b)| a * b).sum();
            let wv = w[o * x.c + i];
            for (d, gv) in dx.data[i * plane..(i + 1) * plane].iter_mut().zip(g) {
                *d += wv * gv;
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// network

struct ConvLevel {
    input: Fmap,
    act: Fmap,
    norm: NormCache,
}

struct TcnBlock {
    input: Fmap,
    act: Fmap,
    norm: NormCache,
    normed: Fmap,
}

/// Everything the reverse pass needs from one forward evaluation.
pub struct Trace {
    scale: f64,
    bins: usize,
    frames: usize,
    enc: Vec<ConvLevel>,
    tcn: Vec<TcnBlock>,
    /// Decoder levels in forward order (deepest first).
    dec: Vec<ConvLevel>,
    head_input: Fmap,
}

fn p<'a>(params: &'a Parameters, name: &str) -> Result<&'a [f64]> {
    Ok(&params.expect(name)?.data)
}

fn check_input(cfg: &ModelConfig, mixture: &Spectrogram) -> Result<()> {
    if mixture.bins() != INPUT_BINS {
        return Err(Error::ShapeMismatch(format!(
            "model expects {INPUT_BINS} frequency bins, got {}",
            mixture.bins()
        )));
    }
    if mixture.frames() < cfg.min_frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames is below the receptive-field minimum {}",
            mixture.frames(),
            cfg.min_frames()
        )));
    }
    Ok(())
}

fn conv_level(
    params: &Parameters,
    prefix: &str,
    input: Fmap,
    co: usize,
) -> Result<(Fmap, ConvLevel)> {
    let [w, b, g, be] = conv_names(prefix);
    let mut act = conv3x3(&input, p(params, &w)?, p(params, &b)?, co);
    elu(&mut act);
    let (out, norm) = channel_norm(&act, p(params, &g)?, p(params, &be)?);
    out.check_finite(prefix)?;
    Ok((out, ConvLevel { input, act, norm }))
}

fn conv_level_backward(
    params: &Parameters,
    grads: &mut Parameters,
    prefix: &str,
    level: &ConvLevel,
    dout: &Fmap,
) -> Result<Fmap> {
    let [w, b, g, be] = conv_names(prefix);
    let (mut dact, dg, dbe) = channel_norm_backward(&level.norm, p(params, &g)?, dout);
    elu_backward(&level.act, &mut dact);
    let (dx, dw, db) = conv3x3_backward(&level.input, p(params, &w)?, &dact);
    accumulate(grads, &w, &dw)?;
    accumulate(grads, &b, &db)?;
    accumulate(grads, &g, &dg)?;
    accumulate(grads, &be, &dbe)?;
    Ok(dx)
}

fn accumulate(grads: &mut Parameters, name: &str, g: &[f64]) -> Result<()> {
    let t = grads
        .get_mut(name)
        .ok_or_else(|| Error::ShapeMismatch(format!("missing gradient slot {name}")))?;
    t.data.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    Ok(())
}

/// Evaluates the network and records a [`Trace`] for [`backward_traced`].
pub fn forward_traced(
    params: &Parameters,
    mixture: &Spectrogram,
    cfg: &ModelConfig,
) -> Result<(SourceEstimates, Trace)> {
    cfg.validate()?;
    check_input(cfg, mixture)?;
    let (bins, frames) = (mixture.bins(), mixture.frames());
    let fp = cfg.padded_bins();

    let ms = mixture.data().iter().map(|c| c.norm_sqr()).sum::<f64>() / mixture.data().len() as f64;
    let scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };
    let mut x0 = Fmap::zeros(2, fp, frames);
    for f in 0..bins {
        for k in 0..frames {
            let c = mixture.get(f, k);
            x0.data[f * frames + k] = c.re / scale;
            x0.data[(fp + f) * frames + k] = c.im / scale;
        }
    }

    let mut enc = Vec::with_capacity(cfg.enc_depth);
    let mut h = x0.clone();
    for l in 0..cfg.enc_depth {
        let (out, level) = conv_level(params, &format!("enc{l}"), h, cfg.level_channels(l))?;
        h = pool_freq(&out);
        enc.push(level);
    }

    let c = cfg.bottleneck_channels();
    let dilations = cfg.dilations();
    let mut tcn = Vec::with_capacity(cfg.tcn_repeats * cfg.tcn_blocks);
    for r in 0..cfg.tcn_repeats {
        for (x, &d) in dilations.iter().enumerate() {
            let pre = tcn_prefix(r, x);
            let mut act = dwconv_time(
                &h,
                p(params, &format!("{pre}.dw.w"))?,
                p(params, &format!("{pre}.dw.b"))?,
                d,
            );
            elu(&mut act);
            let (normed, norm) = channel_norm(
                &act,
                p(params, &format!("{pre}.norm.gamma"))?,
                p(params, &format!("{pre}.norm.beta"))?,
            );
            let mut out = pointwise(
                &normed,
                p(params, &format!("{pre}.pw.w"))?,
                p(params, &format!("{pre}.pw.b"))?,
                c,
            );
            out.add_assign(&h);
            out.check_finite(&pre)?;
            tcn.push(TcnBlock {
                input: h,
                act,
                norm,
                normed,
            });
            h = out;
        }
    }

    let mut dec = Vec::with_capacity(cfg.enc_depth);
    for l in (0..cfg.enc_depth).rev() {
        let up = upsample_freq(&h);
        let skip = enc[l].norm_output(params, &format!("enc{l}"))?;
        let cat = Fmap::concat(&up, &skip);
        let (out, level) = conv_level(params, &format!("dec{l}"), cat, cfg.level_channels(l))?;
        h = out;
        dec.push(level);
    }

    let head_input = Fmap::concat(&h, &x0);
    let m2 = 2 * cfg.num_outputs;
    let out = pointwise(&head_input, p(params, "head.w")?, p(params, "head.b")?, m2);
    out.check_finite("head")?;

    let mut specs = Vec::with_capacity(cfg.num_outputs);
    for m in 0..cfg.num_outputs {
        let re = &out.data[(2 * m) * fp * frames..];
        let im = &out.data[(2 * m + 1) * fp * frames..];
        let data: Vec<Complex64> = (0..bins * frames)
            .map(|i| Complex64::new(re[i] * scale, im[i] * scale))
            .collect();
        specs.push(Spectrogram::with_layout_of(mixture, data)?);
    }

    let trace = Trace {
        scale,
        bins,
        frames,
        enc,
        tcn,
        dec,
        head_input,
    };
    Ok((SourceEstimates { specs }, trace))
}

impl ConvLevel {
    /// Recomputes the normalized output (the skip tensor) from the cache.
    fn norm_output(&self, params: &Parameters, prefix: &str) -> Result<Fmap> {
        let [_, _, g, be] = conv_names(prefix);
        let (gamma, beta) = (p(params, &g)?, p(params, &be)?);
        let mut out = self.norm.xhat.clone();
        let plane = out.plane();
        for c in 0..out.c {
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = gamma[c] * *v + beta[c];
            }
        }
        Ok(out)
    }
}

pub fn forward(params: &Parameters, mixture: &Spectrogram, cfg: &ModelConfig) -> Result<SourceEstimates> {
    forward_traced(params, mixture, cfg).map(|(est, _)| est)
}

/// Reverse pass: gradient of the scalar loss whose gradient with respect
/// to the estimates is `upstream`.
pub fn backward_traced(
    params: &Parameters,
    cfg: &ModelConfig,
    trace: &Trace,
    upstream: &EstimateGrad,
) -> Result<Parameters> {
    if upstream.sources != cfg.num_outputs
        || upstream.bins != trace.bins
        || upstream.frames != trace.frames
    {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {}x{}x{} does not match estimates {}x{}x{}",
            upstream.sources, upstream.bins, upstream.frames, cfg.num_outputs, trace.bins, trace.frames
        )));
    }
    let mut grads = params.zeros_like();
    let fp = cfg.padded_bins();
    let (bins, frames) = (trace.bins, trace.frames);
    let m2 = 2 * cfg.num_outputs;

    let mut dout = Fmap::zeros(m2, fp, frames);
    for m in 0..cfg.num_outputs {
        for i in 0..bins * frames {
            dout.data[(2 * m) * fp * frames + i] = upstream.re[m * bins * frames + i] * trace.scale;
            dout.data[(2 * m + 1) * fp * frames + i] = upstream.im[m * bins * frames + i] * trace.scale;
        }
    }

    let (dhead_in, dw, db) = pointwise_backward(&trace.head_input, p(params, "head.w")?, &dout);
    accumulate(&mut grads, "head.w", &dw)?;
    accumulate(&mut grads, "head.b", &db)?;
    let (mut dh, _dx0) = dhead_in.split(cfg.base_channels);

    let mut dskips: Vec<Option<Fmap>> = (0..cfg.enc_depth).map(|_| None).collect();
    // dec[i] holds level enc_depth-1-i
    for (i, level) in trace.dec.iter().enumerate().rev() {
        let l = cfg.enc_depth - 1 - i;
        let dcat = conv_level_backward(params, &mut grads, &format!("dec{l}"), level, &dh)?;
        let up_channels = dcat.c - cfg.level_channels(l);
        let (dup, dskip) = dcat.split(up_channels);
        dskips[l] = Some(dskip);
        dh = upsample_freq_backward(&dup);
    }

    let c = cfg.bottleneck_channels();
    for (idx, block) in trace.tcn.iter().enumerate().rev() {
        let pre = tcn_prefix(idx / cfg.tcn_blocks, idx % cfg.tcn_blocks);
        let d = 1 << (idx % cfg.tcn_blocks);
        let pw_w = format!("{pre}.pw.w");
        let (dnormed, dw, db) = pointwise_backward(&block.normed, p(params, &pw_w)?, &dh);
        accumulate(&mut grads, &pw_w, &dw)?;
        accumulate(&mut grads, &format!("{pre}.pw.b"), &db)?;
        let g_name = format!("{pre}.norm.gamma");
        let (mut dact, dg, dbe) = channel_norm_backward(&block.norm, p(params, &g_name)?, &dnormed);
        accumulate(&mut grads, &g_name, &dg)?;
        accumulate(&mut grads, &format!("{pre}.norm.beta"), &dbe)?;
        elu_backward(&block.act, &mut dact);
        let dw_name = format!("{pre}.dw.w");
        let (dx, dw, db) = dwconv_time_backward(&block.input, p(params, &dw_name)?, d, &dact);
        accumulate(&mut grads, &dw_name, &dw)?;
        accumulate(&mut grads, &format!("{pre}.dw.b"), &db)?;
        debug_assert_eq!(dx.c, c);
        dh.add_assign(&dx);
    }

    for l in (0..cfg.enc_depth).rev() {
        let mut dnorm_out = pool_freq_backward(&dh);
        if let Some(dskip) = &dskips[l] {
            dnorm_out.add_assign(dskip);
        }
        dh = conv_level_backward(params, &mut grads, &format!("enc{l}"), &trace.enc[l], &dnorm_out)?;
    }

    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name.to_owned()));
    }
    Ok(grads)
}

/// Forward/backward pairing for one input: `backward` is only valid after
/// a `forward` on the same session.
pub struct Session<'a> {
    params: &'a Parameters,
    cfg: &'a ModelConfig,
    trace: Option<Trace>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a Parameters, cfg: &'a ModelConfig) -> Self {
        Self {
            params,
            cfg,
            trace: None,
        }
    }

    pub fn forward(&mut self, mixture: &Spectrogram) -> Result<SourceEstimates> {
        let (est, trace) = forward_traced(self.params, mixture, self.cfg)?;
        self.trace = Some(trace);
        Ok(est)
    }

    pub fn backward(&self, upstream: &EstimateGrad) -> Result<Parameters> {
        let trace = self.trace.as_ref().ok_or(Error::MissingForwardContext)?;
        backward_traced(self.params, self.cfg, trace, upstream)
    }
}
