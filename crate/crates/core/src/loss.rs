//! Constrained mixture invariant complex spectral mapping loss.
//!
//! The two references `X = [x1; x2]` (speech-side and noise) are compared
//! with remixes `A Ŝ` of the `M` estimates for every admissible binary
//! mixing matrix `A`. Admissible matrices always put estimate 1 in the speech
//! row, optionally together with exactly one other estimate, and leave at
//! least one estimate for the noise row.
//!
//! Each of the real, imaginary and magnitude terms is the mean absolute
//! deviation over the `2·F·K` reference entries. In [`LossMode::PerTerm`]
//! every term picks its own minimizing matrix; in [`LossMode::Joint`] one
//! matrix minimizes the sum. Ties go to the earliest matrix in
//! [`enumerate_allowed`] order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dsp::{components, Spectrogram};
use crate::error::{Error, Result};
use crate::model::{EstimateGrad, SourceEstimates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    PerTerm,
    Joint,
}

/// Binary `2 x M` matrix with exactly one 1 per column. Row 0 rebuilds the
/// speech-side reference, row 1 the noise reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MixingMatrix {
    rows: [Vec<u8>; 2],
}

impl MixingMatrix {
    pub fn from_rows(speech: Vec<u8>, noise: Vec<u8>) -> Result<Self> {
        if speech.len() != noise.len() {
            return Err(Error::ShapeMismatch(format!(
                "rows of length {} and {}",
                speech.len(),
                noise.len()
            )));
        }
        for (m, (&a, &b)) in speech.iter().zip(&noise).enumerate() {
            if a > 1 || b > 1 || a + b != 1 {
                return Err(Error::InvalidConfig(format!(
                    "column {m} of a mixing matrix must be one-hot, got [{a}, {b}]"
                )));
            }
        }
        Ok(Self {
            rows: [speech, noise],
        })
    }

    pub fn outputs(&self) -> usize {
        self.rows[0].len()
    }

    pub fn entry(&self, row: usize, col: usize) -> u8 {
        self.rows[row][col]
    }

    pub fn rows(&self) -> &[Vec<u8>; 2] {
        &self.rows
    }

    pub fn column_sums(&self) -> Vec<u8> {
        self.rows[0].iter().zip(&self.rows[1]).map(|(a, b)| a + b).collect()
    }
}

impl fmt::Display for MixingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |r: &Vec<u8>| {
            r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        write!(f, "[[{}],[{}]]", row(&self.rows[0]), row(&self.rows[1]))
    }
}

/// Admissible mixing matrices for `m` estimates, in tie-break order.
pub fn enumerate_allowed(m: usize) -> Result<Vec<MixingMatrix>> {
    if !(2..=3).contains(&m) {
        return Err(Error::UnsupportedOutputs(m));
    }
    // speech row: estimate 0 alone, then estimate 0 plus one other
    let partners = std::iter::once(None).chain((1..m).map(Some));
    let mut out = Vec::new();
    for partner in partners {
        let speech: Vec<u8> = (0..m)
            .map(|j| u8::from(j == 0 || Some(j) == partner))
            .collect();
        if speech.iter().all(|&v| v == 1) {
            continue;
        }
        let noise = speech.iter().map(|v| 1 - v).collect();
        out.push(MixingMatrix::from_rows(speech, noise)?);
    }
    Ok(out)
}

fn check_shapes(refs: &[f64], ests: &[f64], a: &MixingMatrix) -> Result<usize> {
    if refs.len() % 2 != 0 {
        return Err(Error::ShapeMismatch("reference array must have 2 rows".into()));
    }
    let n = refs.len() / 2;
    if ests.len() != a.outputs() * n {
        return Err(Error::ShapeMismatch(format!(
            "estimates hold {} entries, expected {} x {n}",
            ests.len(),
            a.outputs()
        )));
    }
    Ok(n)
}

/// Mean over `2·n` entries of `|refs - A·ests|`; `refs` is `[2][n]`,
/// `ests` is `[M][n]`.
pub fn l1_term(refs: &[f64], ests: &[f64], a: &MixingMatrix) -> Result<f64> {
    let n = check_shapes(refs, ests, a)?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for row in 0..2 {
        let r = &refs[row * n..(row + 1) * n];
        for (i, &target) in r.iter().enumerate() {
            let mut mix = 0.0;
            for m in 0..a.outputs() {
                if a.entry(row, m) == 1 {
                    mix += ests[m * n + i];
                }
            }
            sum += (target - mix).abs();
        }
    }
    Ok(sum / (2 * n) as f64)
}

/// `d l1_term / d ests`, scaled by `weight` and added into `grad`.
fn l1_term_grad(refs: &[f64], ests: &[f64], a: &MixingMatrix, weight: f64, grad: &mut [f64]) {
    let n = refs.len() / 2;
    let coef = weight / (2 * n) as f64;
    for row in 0..2 {
        for i in 0..n {
            let mut mix = 0.0;
            for m in 0..a.outputs() {
                if a.entry(row, m) == 1 {
                    mix += ests[m * n + i];
                }
            }
            let s = (refs[row * n + i] - mix).signum_or_zero();
            if s == 0.0 {
                continue;
            }
            for m in 0..a.outputs() {
                if a.entry(row, m) == 1 {
                    grad[m * n + i] -= coef * s;
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Which mixing matrices produced a [`LossBreakdown`].
#[derive(Debug, Clone, PartialEq)]
pub enum Assignment {
    /// Re, Im and magnitude terms, each with its own minimizer.
    PerTerm([MixingMatrix; 3]),
    Joint(MixingMatrix),
    /// Direct regression of estimate 1 on the speech reference.
    Supervised,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub re_term: f64,
    pub im_term: f64,
    pub mag_term: f64,
    pub chosen: Assignment,
}

/// Stacked `[row][f·k]` arrays for the three components.
struct Stacked {
    re: Vec<f64>,
    im: Vec<f64>,
    mag: Vec<f64>,
}

fn stack<'a>(specs: impl IntoIterator<Item = &'a Spectrogram>) -> Stacked {
    let mut out = Stacked {
        re: Vec::new(),
        im: Vec::new(),
        mag: Vec::new(),
    };
    for s in specs {
        let c = components(s);
        out.re.extend(c.re);
        out.im.extend(c.im);
        out.mag.extend(c.mag);
    }
    out
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn check_specs(refs: [&Spectrogram; 2], est: &SourceEstimates) -> Result<Vec<MixingMatrix>> {
    let allowed = enumerate_allowed(est.specs.len())?;
    let shape_ok = refs[0].same_shape(refs[1]) && est.specs.iter().all(|s| s.same_shape(refs[0]));
    if !shape_ok {
        return Err(Error::ShapeMismatch(
            "references and estimates must share one F x K shape".into(),
        ));
    }
    Ok(allowed)
}

/// Loss value plus its gradient with respect to the estimates.
pub fn csm_loss_with_grad(
    refs: [&Spectrogram; 2],
    est: &SourceEstimates,
    mode: LossMode,
) -> Result<(LossBreakdown, EstimateGrad)> {
    let allowed = check_specs(refs, est)?;
    let x = stack(refs);
    let s = stack(&est.specs);

    let per_a = |refs: &[f64], ests: &[f64]| -> Result<Vec<f64>> {
        allowed.iter().map(|a| l1_term(refs, ests, a)).collect()
    };
    let re_vals = per_a(&x.re, &s.re)?;
    let im_vals = per_a(&x.im, &s.im)?;
    let mag_vals = per_a(&x.mag, &s.mag)?;

    let picks = match mode {
        LossMode::PerTerm => [argmin(&re_vals), argmin(&im_vals), argmin(&mag_vals)],
        LossMode::Joint => {
            let sums: Vec<f64> = (0..allowed.len())
                .map(|i| re_vals[i] + im_vals[i] + mag_vals[i])
                .collect();
            let j = argmin(&sums);
            [j, j, j]
        }
    };
    let (re_term, im_term, mag_term) = (re_vals[picks[0]], im_vals[picks[1]], mag_vals[picks[2]]);

    let (bins, frames) = (refs[0].bins(), refs[0].frames());
    let m = est.specs.len();
    let mut grad = EstimateGrad::zeros(m, bins, frames);
    l1_term_grad(&x.re, &s.re, &allowed[picks[0]], 1.0, &mut grad.re);
    l1_term_grad(&x.im, &s.im, &allowed[picks[1]], 1.0, &mut grad.im);
    let mut dmag = vec![0.0; s.mag.len()];
    l1_term_grad(&x.mag, &s.mag, &allowed[picks[2]], 1.0, &mut dmag);
    chain_magnitude(&s, &dmag, &mut grad);

    let chosen = match mode {
        LossMode::PerTerm => Assignment::PerTerm(picks.map(|i| allowed[i].clone())),
        LossMode::Joint => Assignment::Joint(allowed[picks[0]].clone()),
    };
    let breakdown = LossBreakdown {
        total: re_term + im_term + mag_term,
        re_term,
        im_term,
        mag_term,
        chosen,
    };
    Ok((breakdown, grad))
}

fn chain_magnitude(s: &Stacked, dmag: &[f64], grad: &mut EstimateGrad) {
    for i in 0..dmag.len() {
        if dmag[i] != 0.0 && s.mag[i] > 0.0 {
            grad.re[i] += dmag[i] * s.re[i] / s.mag[i];
            grad.im[i] += dmag[i] * s.im[i] / s.mag[i];
        }
    }
}

pub fn csm_loss(refs: [&Spectrogram; 2], est: &SourceEstimates, mode: LossMode) -> Result<LossBreakdown> {
    csm_loss_with_grad(refs, est, mode).map(|(b, _)| b)
}

/// Supervised baseline: the three L1 terms between estimate 1 and the
/// speech reference alone, each averaged over `F·K`.
pub fn supervised_loss_with_grad(
    target: &Spectrogram,
    est: &SourceEstimates,
) -> Result<(LossBreakdown, EstimateGrad)> {
    if est.specs.is_empty() || !est.specs.iter().all(|s| s.same_shape(target)) {
        return Err(Error::ShapeMismatch("target and estimates differ in shape".into()));
    }
    let x = stack([target]);
    let s = stack([&est.specs[0]]);
    let n = x.re.len();
    let term = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / n as f64
    };
    let (re_term, im_term, mag_term) = (term(&x.re, &s.re), term(&x.im, &s.im), term(&x.mag, &s.mag));

    let mut grad = EstimateGrad::zeros(est.specs.len(), target.bins(), target.frames());
    let coef = 1.0 / n as f64;
    let mut dmag = vec![0.0; n];
    for i in 0..n {
        grad.re[i] -= coef * (x.re[i] - s.re[i]).signum_or_zero();
        grad.im[i] -= coef * (x.im[i] - s.im[i]).signum_or_zero();
        dmag[i] = -coef * (x.mag[i] - s.mag[i]).signum_or_zero();
    }
    chain_magnitude(&s, &dmag, &mut grad);
    Ok((
        LossBreakdown {
            total: re_term + im_term + mag_term,
            re_term,
            im_term,
            mag_term,
            chosen: Assignment::Supervised,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rustfft::num_complex::Complex64;

    fn mm(speech: [u8; 3], noise: [u8; 3]) -> MixingMatrix {
        MixingMatrix::from_rows(speech.to_vec(), noise.to_vec()).unwrap()
    }

    #[test]
    fn enumeration_examples() {
        let got = enumerate_allowed(3).unwrap();
        assert_eq!(
            got,
            vec![
                mm([1, 0, 0], [0, 1, 1]),
                mm([1, 1, 0], [0, 0, 1]),
                mm([1, 0, 1], [0, 1, 0]),
            ]
        );
        let two = enumerate_allowed(2).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].rows(), &[vec![1, 0], vec![0, 1]]);
        for m in [0, 1, 4, 5] {
            assert!(matches!(enumerate_allowed(m), Err(Error::UnsupportedOutputs(_))));
        }
        assert!(got.iter().all(|a| a.column_sums().iter().all(|&c| c == 1)));
    }

    #[test]
    fn non_one_hot_columns_are_rejected() {
        assert!(MixingMatrix::from_rows(vec![1, 1], vec![0, 1]).is_err());
        assert!(MixingMatrix::from_rows(vec![0, 0], vec![0, 1]).is_err());
        assert!(MixingMatrix::from_rows(vec![2, 0], vec![0, 1]).is_err());
    }

    #[test]
    fn l1_examples() {
        let a2 = mm([1, 1, 0], [0, 0, 1]);
        assert_eq!(l1_term(&[2.0, 1.0], &[1.0, 1.0, 1.0], &a2).unwrap(), 0.0);
        let a1 = mm([1, 0, 0], [0, 1, 1]);
        assert_eq!(l1_term(&[2.0, 1.0], &[1.0, 1.0, 1.0], &a1).unwrap(), 1.0);
        for a in enumerate_allowed(3).unwrap() {
            assert_eq!(l1_term(&[1.0, 0.0], &[0.0, 0.0, 0.0], &a).unwrap(), 0.5);
        }
        assert!(matches!(
            l1_term(&[1.0, 0.0], &[0.0, 0.0], &a2),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn single_bin(entries: &[Complex64]) -> Vec<Spectrogram> {
        // one bin and one frame is not an STFT shape, so embed the values
        // in bin 0 / frame 0 of a tiny spectrogram and zero the rest
        let cfg = StftConfig { frame_len: 4, hop: 2 };
        entries
            .iter()
            .map(|&c| {
                let mut s = Spectrogram::zeros(cfg, 1);
                s.data_mut()[0] = c;
                s
            })
            .collect()
    }

    #[test]
    fn per_matrix_re_values_on_single_bin() {
        let re = |v: f64| Complex64::new(v, 0.0);
        let refs = single_bin(&[re(2.0), re(1.0)]);
        let est = SourceEstimates {
            specs: single_bin(&[re(1.0), re(1.0), re(1.0)]),
        };
        let x = stack(&refs);
        let s = stack(&est.specs);
        let n = x.re.len() as f64 / 2.0;
        let vals: Vec<f64> = enumerate_allowed(3)
            .unwrap()
            .iter()
            .map(|a| l1_term(&x.re, &s.re, a).unwrap() * n)
            .collect();
        // per-entry values, rescaled back to the single active bin
        assert_eq!(vals, vec![1.0, 0.0, 0.0]);
        let b = csm_loss(
            [&refs[0], &refs[1]],
            &est,
            LossMode::PerTerm,
        )
        .unwrap();
        assert_eq!(b.re_term, 0.0);
        match b.chosen {
            Assignment::PerTerm(ref a) => assert_eq!(a[0], mm([1, 1, 0], [0, 0, 1])),
            _ => panic!("expected per-term assignment"),
        }
    }

    fn random_spec(rng: &mut ChaCha8Rng, len: usize) -> Spectrogram {
        let mut s = Spectrogram::zeros(StftConfig { frame_len: 4, hop: 2 }, len);
        s.data_mut()
            .iter_mut()
            .for_each(|c| *c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        s
    }

    #[test]
    fn exact_reconstruction_with_slack_channel_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = random_spec(&mut rng, 6);
        let x2 = random_spec(&mut rng, 6);
        let zero = Spectrogram::zeros(x1.config(), 6);
        let est = SourceEstimates {
            specs: vec![x1.clone(), x2.clone(), zero],
        };
        for mode in [LossMode::PerTerm, LossMode::Joint] {
            let b = csm_loss([&x1, &x2], &est, mode).unwrap();
            assert_eq!(b.total, 0.0);
        }
    }

    #[test]
    fn total_is_sum_of_terms_and_per_term_is_relaxation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let refs = [random_spec(&mut rng, 5), random_spec(&mut rng, 5)];
            let est = SourceEstimates {
                specs: (0..3).map(|_| random_spec(&mut rng, 5)).collect(),
            };
            let p = csm_loss([&refs[0], &refs[1]], &est, LossMode::PerTerm).unwrap();
            let j = csm_loss([&refs[0], &refs[1]], &est, LossMode::Joint).unwrap();
            assert!((p.total - (p.re_term + p.im_term + p.mag_term)).abs() <= 1e-12);
            assert!(p.total <= j.total + 1e-15);
            assert!(p.total >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let refs = [random_spec(&mut rng, 6), random_spec(&mut rng, 6)];
        let est = SourceEstimates {
            specs: (0..3).map(|_| random_spec(&mut rng, 6)).collect(),
        };
        for mode in [LossMode::PerTerm, LossMode::Joint] {
            let (_, grad) = csm_loss_with_grad([&refs[0], &refs[1]], &est, mode).unwrap();
            let h = 1e-7;
            let n = refs[0].data().len();
            for m in 0..3 {
                for i in 0..n {
                    for imag in [false, true] {
                        let bump = |d: f64| {
                            let mut e = est.clone();
                            let c = &mut e.specs[m].data_mut()[i];
                            if imag {
                                c.im += d
                            } else {
                                c.re += d
                            }
                            csm_loss([&refs[0], &refs[1]], &e, mode).unwrap().total
                        };
                        let fd = (bump(h) - bump(-h)) / (2.0 * h);
                        let an = if imag { grad.im[m * n + i] } else { grad.re[m * n + i] };
                        assert!((fd - an).abs() < 1e-6, "{mode:?} m={m} i={i}: {fd} vs {an}");
                    }
                }
            }
        }
    }

    #[test]
    fn supervised_loss_is_zero_on_target_and_has_correct_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = random_spec(&mut rng, 6);
        let est = SourceEstimates {
            specs: vec![target.clone(), random_spec(&mut rng, 6)],
        };
        let (b, _) = supervised_loss_with_grad(&target, &est).unwrap();
        assert_eq!(b.total, 0.0);

        let est = SourceEstimates {
            specs: vec![random_spec(&mut rng, 6), random_spec(&mut rng, 6)],
        };
        let (_, grad) = supervised_loss_with_grad(&target, &est).unwrap();
        let n = target.data().len();
        assert!(grad.re[n..].iter().all(|&v| v == 0.0));
        let h = 1e-7;
        for i in 0..n {
            let bump = |d: f64| {
                let mut e = est.clone();
                e.specs[0].data_mut()[i].re += d;
                supervised_loss_with_grad(&target, &e).unwrap().0.total
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - grad.re[i]).abs() < 1e-6);
        }
    }
}
