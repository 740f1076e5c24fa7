//! Training objectives.
//!
//! The generator minimizes a weighted sum of three terms: the pixel-wise MSE
//! between its output and the HR target (mean over the `r^2 W H` SR pixels,
//! averaged over batch and channels), the squared feature distance under the
//! fixed extractor (summed over channels, divided by the feature-map area,
//! averaged over batch), and `-log D(SR)`, the stable form of the adversarial
//! term. The discriminator minimizes `-log D(HR) - log(1 - D(SR))`.
//!
//! Probabilities are clamped to `[1e-7, 1 - 1e-7]` before any logarithm, so
//! every loss is finite even when a sigmoid saturates in `f32`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Scalar, Tensor4};

/// Clamp bound for probabilities entering a logarithm.
pub const PROB_EPSILON: f64 = 1e-7;

/// Coefficients of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_feat: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mse: 1.0,
            w_feat: 1e-6,
            w_adv: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_mse < 0.0 || self.w_feat < 0.0 || self.w_adv < 0.0 {
            return Err(Error::LossDomain("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-step loss values, as logged to the training CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub feat: f64,
    pub adv: f64,
    pub total: f64,
    pub d_loss: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.mse.is_finite()
            && self.feat.is_finite()
            && self.adv.is_finite()
            && self.total.is_finite()
            && self.d_loss.is_finite()
    }
}

fn check_same_shape<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pixel-wise MSE: squared differences divided by the SR pixel count,
/// averaged over batch and channels (i.e. the mean over all elements).
pub fn mse_loss<T: Scalar>(sr: &Tensor4<T>, hr: &Tensor4<T>) -> Result<f64> {
    check_same_shape(sr, hr, "mse_loss")?;
    let sum: f64 = sr
        .data()
        .iter()
        .zip(hr.data())
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum();
    Ok(sum / sr.len() as f64)
}

/// Gradient of [`mse_loss`] with respect to `sr`.
pub fn mse_loss_grad<T: Scalar>(sr: &Tensor4<T>, hr: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape(sr, hr, "mse_loss_grad")?;
    let scale = 2.0 / sr.len() as f64;
    let data = sr
        .data()
        .iter()
        .zip(hr.data())
        .map(|(&a, &b)| T::from_f64(scale * (a.to_f64() - b.to_f64())))
        .collect();
    let (b, h, w, c) = sr.shape();
    Tensor4::from_vec(b, h, w, c, data)
}

/// Feature-reconstruction loss: squared feature distance divided by the
/// feature-map area `Wj*Hj` (channels are summed, not averaged), averaged
/// over the batch.
pub fn feat_loss<T: Scalar>(phi_sr: &Tensor4<T>, phi_hr: &Tensor4<T>) -> Result<f64> {
    check_same_shape(phi_sr, phi_hr, "feat_loss")?;
    let (b, h, w, _) = phi_sr.shape();
    let sum: f64 = phi_sr
        .data()
        .iter()
        .zip(phi_hr.data())
        .map(|(&a, &bb)| {
            let d = a.to_f64() - bb.to_f64();
            d * d
        })
        .sum();
    Ok(sum / (b * h * w) as f64)
}

/// Gradient of [`feat_loss`] with respect to `phi_sr`.
pub fn feat_loss_grad<T: Scalar>(phi_sr: &Tensor4<T>, phi_hr: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape(phi_sr, phi_hr, "feat_loss_grad")?;
    let (b, h, w, c) = phi_sr.shape();
    let scale = 2.0 / (b * h * w) as f64;
    let data = phi_sr
        .data()
        .iter()
        .zip(phi_hr.data())
        .map(|(&a, &bb)| T::from_f64(scale * (a.to_f64() - bb.to_f64())))
        .collect();
    Tensor4::from_vec(b, h, w, c, data)
}

fn check_prob<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    for &v in values {
        let v = v.to_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::LossDomain(format!(
                "{what}: probability {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

#[inline]
fn clamp_prob(v: f64) -> f64 {
    v.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Adversarial generator loss: mean of `-log D(SR)`.
pub fn adv_loss_g<T: Scalar>(d_out: &[T]) -> Result<f64> {
    if d_out.is_empty() {
        return Err(Error::LossDomain("empty discriminator output".into()));
    }
    check_prob(d_out, "adv_loss_g")?;
    let sum: f64 = d_out.iter().map(|&v| -clamp_prob(v.to_f64()).ln()).sum();
    Ok(sum / d_out.len() as f64)
}

/// Gradient of [`adv_loss_g`] with respect to each probability. Values in
/// the clamp's flat zone get zero gradient.
pub fn adv_loss_g_grad<T: Scalar>(d_out: &[T]) -> Result<Vec<T>> {
    check_prob(d_out, "adv_loss_g_grad")?;
    let n = d_out.len() as f64;
    Ok(d_out
        .iter()
        .map(|&v| {
            let v = v.to_f64();
            if (PROB_EPSILON..=1.0 - PROB_EPSILON).contains(&v) {
                T::from_f64(-1.0 / (n * v))
            } else {
                T::zero()
            }
        })
        .collect())
}

/// Discriminator loss: mean of `-log D(HR) - log(1 - D(SR))`.
pub fn d_loss<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Result<f64> {
    if d_real.len() != d_fake.len() || d_real.is_empty() {
        return Err(Error::LossDomain(
            "real/fake probability batches must be equal-length and non-empty".into(),
        ));
    }
    check_prob(d_real, "d_loss real")?;
    check_prob(d_fake, "d_loss fake")?;
    let n = d_real.len() as f64;
    let sum: f64 = d_real
        .iter()
        .zip(d_fake)
        .map(|(&r, &f)| {
            -clamp_prob(r.to_f64()).ln() - (1.0 - clamp_prob(f.to_f64())).ln()
        })
        .sum();
    Ok(sum / n)
}

/// Gradients of [`d_loss`]: `(d/d_real, d/d_fake)`.
pub fn d_loss_grads<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_prob(d_real, "d_loss_grads real")?;
    check_prob(d_fake, "d_loss_grads fake")?;
    let n = d_real.len() as f64;
    let lo = PROB_EPSILON;
    let hi = 1.0 - PROB_EPSILON;
    let dr = d_real
        .iter()
        .map(|&r| {
            let r = r.to_f64();
            if (lo..=hi).contains(&r) {
                T::from_f64(-1.0 / (n * r))
            } else {
                T::zero()
            }
        })
        .collect();
    let df = d_fake
        .iter()
        .map(|&f| {
            let f = f.to_f64();
            if (lo..=hi).contains(&f) {
                T::from_f64(1.0 / (n * (1.0 - f)))
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((dr, df))
}

/// Weighted sum of the generator components per the configured weights.
pub fn total_g_loss(mse: f64, feat: f64, adv: f64, weights: &LossWeights) -> f64 {
    weights.w_mse * mse + weights.w_feat * feat + weights.w_adv * adv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn tensor(b: usize, h: usize, w: usize, c: usize, v: f64) -> Tensor4<f64> {
        Tensor4::from_vec(b, h, w, c, vec![v; b * h * w * c]).unwrap()
    }

    #[test]
    fn mse_closed_forms() {
        let a = tensor(2, 3, 3, 1, 1.0);
        let b = tensor(2, 3, 3, 1, 0.0);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a, &b).unwrap(), 1.0);

        // Divisor: one pixel differing by d in a 384x384 single-channel
        // tensor contributes d^2 / (4^2 * 96 * 96) = d^2 / 147456.
        let mut sr = tensor(1, 384, 384, 1, 0.25);
        let hr = sr.clone();
        sr.data_mut()[1234] = 0.75;
        let expect = 0.5 * 0.5 / 147456.0;
        assert!((mse_loss(&sr, &hr).unwrap() - expect).abs() < 1e-18);
    }

    #[test]
    fn mse_is_symmetric_positive_definite() {
        let mut rng = SeededRng::new(4);
        let a = Tensor4::from_vec(1, 4, 4, 1, (0..16).map(|_| rng.uniform()).collect()).unwrap();
        let b = Tensor4::from_vec(1, 4, 4, 1, (0..16).map(|_| rng.uniform()).collect()).unwrap();
        assert_eq!(mse_loss(&a, &b).unwrap(), mse_loss(&b, &a).unwrap());
        assert!(mse_loss(&a, &b).unwrap() > 0.0);
        assert_eq!(mse_loss(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn feat_closed_forms() {
        let a = tensor(1, 4, 5, 3, 0.7);
        assert_eq!(feat_loss(&a, &a).unwrap(), 0.0);

        // Constant difference c in every entry with Cj channels: c^2 * Cj.
        let c = 0.3f64;
        let b = tensor(1, 4, 5, 3, 0.7 + c);
        let expect = c * c * 3.0;
        assert!((feat_loss(&a, &b).unwrap() - expect).abs() < 1e-12);

        // Doubling both inputs quadruples the loss.
        let a2 = a.map(|v| v * 2.0);
        let b2 = b.map(|v| v * 2.0);
        assert!(
            (feat_loss(&a2, &b2).unwrap() - 4.0 * feat_loss(&a, &b).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn adversarial_closed_forms() {
        assert!(adv_loss_g(&[1.0f64]).unwrap().abs() < 1e-6);
        let at_half = adv_loss_g(&[0.5f64]).unwrap();
        assert!((at_half - LN2).abs() < 1e-9, "{at_half} vs ln 2");
        let at_inv_e = adv_loss_g(&[(-1.0f64).exp()]).unwrap();
        assert!((at_inv_e - 1.0).abs() < 1e-9);
        // Six significant figures per the frozen example values.
        assert!((at_half - 0.693147).abs() < 5e-7);
    }

    #[test]
    fn discriminator_closed_forms() {
        assert!(d_loss(&[1.0f64], &[0.0f64]).unwrap().abs() < 1e-6);
        let both_half = d_loss(&[0.5f64], &[0.5f64]).unwrap();
        assert!((both_half - 2.0 * LN2).abs() < 1e-9);
        assert!((both_half - 1.386294).abs() < 5e-7);
        let half_vs_zero = d_loss(&[0.5f64], &[1e-12f64]).unwrap();
        assert!((half_vs_zero - LN2).abs() < 1e-6);
    }

    #[test]
    fn losses_are_monotone_in_probabilities() {
        assert!(adv_loss_g(&[0.3f64]).unwrap() > adv_loss_g(&[0.6f64]).unwrap());
        assert!(d_loss(&[0.3f64], &[0.2]).unwrap() > d_loss(&[0.6f64], &[0.2]).unwrap());
        assert!(d_loss(&[0.6f64], &[0.5]).unwrap() > d_loss(&[0.6f64], &[0.2]).unwrap());
    }

    #[test]
    fn out_of_domain_probabilities_rejected() {
        assert!(adv_loss_g(&[1.5f64]).is_err());
        assert!(adv_loss_g(&[-0.1f64]).is_err());
        assert!(d_loss(&[0.5f64], &[2.0]).is_err());
    }

    #[test]
    fn extreme_probabilities_stay_finite() {
        assert!(adv_loss_g(&[0.0f64]).unwrap().is_finite());
        assert!(d_loss(&[0.0f64], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn total_matches_frozen_arithmetic() {
        let w = LossWeights {
            w_mse: 1.0,
            w_feat: 1e-6,
            w_adv: 1e-3,
        };
        let total = total_g_loss(0.01, 100.0, 0.693147, &w);
        assert!((total - 0.010793147).abs() < 1e-9);
        assert!((total - 0.0107931).abs() < 5e-8, "six significant figures");
        assert_eq!(total_g_loss(0.0, 0.0, 0.0, &w), 0.0);

        // Degenerate weights reduce to pure MSE.
        let w = LossWeights {
            w_mse: 1.0,
            w_feat: 0.0,
            w_adv: 0.0,
        };
        assert_eq!(total_g_loss(0.04, 123.0, 9.0, &w), 0.04);
    }

    #[test]
    fn breakdown_total_identity() {
        let w = LossWeights::default();
        let b = LossBreakdown {
            mse: 0.02,
            feat: 31.0,
            adv: 0.9,
            total: total_g_loss(0.02, 31.0, 0.9, &w),
            d_loss: 1.1,
        };
        let recomputed = w.w_mse * b.mse + w.w_feat * b.feat + w.w_adv * b.adv;
        assert!((b.total - recomputed).abs() < 1e-9);
        assert!(b.is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(12);
        let sr =
            Tensor4::from_vec(2, 3, 3, 1, (0..18).map(|_| rng.uniform()).collect()).unwrap();
        let hr =
            Tensor4::from_vec(2, 3, 3, 1, (0..18).map(|_| rng.uniform()).collect()).unwrap();
        let step = 1e-6;

        let g = mse_loss_grad(&sr, &hr).unwrap();
        for i in [0usize, 7, 17] {
            let mut p = sr.clone();
            p.data_mut()[i] += step;
            let mut m = sr.clone();
            m.data_mut()[i] -= step;
            let fd =
                (mse_loss(&p, &hr).unwrap() - mse_loss(&m, &hr).unwrap()) / (2.0 * step);
            assert!((g.data()[i] - fd).abs() < 1e-8);
        }

        let g = feat_loss_grad(&sr, &hr).unwrap();
        for i in [0usize, 7, 17] {
            let mut p = sr.clone();
            p.data_mut()[i] += step;
            let mut m = sr.clone();
            m.data_mut()[i] -= step;
            let fd =
                (feat_loss(&p, &hr).unwrap() - feat_loss(&m, &hr).unwrap()) / (2.0 * step);
            assert!((g.data()[i] - fd).abs() < 1e-7);
        }

        let d: Vec<f64> = vec![0.3, 0.6, 0.9];
        let g = adv_loss_g_grad(&d).unwrap();
        for i in 0..3 {
            let mut p = d.clone();
            p[i] += step;
            let mut m = d.clone();
            m[i] -= step;
            let fd = (adv_loss_g(&p).unwrap() - adv_loss_g(&m).unwrap()) / (2.0 * step);
            assert!((g[i] - fd).abs() / fd.abs() < 1e-6);
        }

        let real: Vec<f64> = vec![0.7, 0.4];
        let fake: Vec<f64> = vec![0.2, 0.55];
        let (gr, gf) = d_loss_grads(&real, &fake).unwrap();
        for i in 0..2 {
            let mut p = real.clone();
            p[i] += step;
            let mut m = real.clone();
            m[i] -= step;
            let fd =
                (d_loss(&p, &fake).unwrap() - d_loss(&m, &fake).unwrap()) / (2.0 * step);
            assert!((gr[i] - fd).abs() / fd.abs() < 1e-6);

            let mut p = fake.clone();
            p[i] += step;
            let mut m = fake.clone();
            m[i] -= step;
            let fd =
                (d_loss(&real, &p).unwrap() - d_loss(&real, &m).unwrap()) / (2.0 * step);
            assert!((gf[i] - fd).abs() / fd.abs() < 1e-6);
        }
    }
}
