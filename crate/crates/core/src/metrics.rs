//! Distortion and rate metrics: MSE, PSNR, rate-distortion curves and the
//! Bjøntegaard delta-rate.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Plane};

fn check_same_dims(a: &Plane, b: &Plane) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dim(format!(
            "planes differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &Plane, b: &Plane) -> Result<f64> {
    check_same_dims(a, b)?;
    let se: f64 = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(se / a.samples().len() as f64)
}

/// `10·log10(peak² / mse)` with `peak = 2^bit_depth - 1`; infinite for a zero MSE.
pub fn psnr_from_mse(mse: f64, bit_depth: u8) -> f64 {
    let peak = f64::from((1u32 << bit_depth) - 1);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR in dB; identical planes give `f64::INFINITY`.
pub fn psnr(a: &Plane, b: &Plane, bit_depth: u8) -> Result<f64> {
    if !(1..=16).contains(&bit_depth) {
        return Err(Error::Param(format!("bit depth {bit_depth} out of range")));
    }
    Ok(psnr_from_mse(mse(a, b)?, bit_depth))
}

/// Rate-distortion points sorted by strictly increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<(f64, f64)>,
}

impl RdCurve {
    /// `points` are `(rate, psnr)` and must already be in increasing rate order.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Data(format!("an RD curve needs at least 4 points, got {}", points.len())));
        }
        for &(r, p) in &points {
            if !r.is_finite() || !p.is_finite() {
                return Err(Error::NonFinite("rd curve"));
            }
            if r <= 0.0 {
                return Err(Error::Data(format!("rate must be positive, got {r}")));
            }
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data("rates must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn psnr_range(&self) -> (f64, f64) {
        let lo = self.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = self.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Same curve with every rate multiplied by `factor`.
    pub fn scale_rates(&self, factor: f64) -> Result<Self> {
        Self::new(self.points.iter().map(|&(r, p)| (r * factor, p)).collect())
    }
}

/// Sort run reports by rate and validate them as a curve.
pub fn build_rd_curve(mut runs: Vec<(f64, f64)>) -> Result<RdCurve> {
    if runs.len() < 4 {
        return Err(Error::Data(format!("need at least 4 runs for an RD curve, got {}", runs.len())));
    }
    runs.sort_by(|a, b| a.0.total_cmp(&b.0));
    RdCurve::new(runs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdResult {
    /// Average rate difference at equal PSNR; negative means `test` needs fewer bits.
    pub bd_rate_percent: f64,
    /// PSNR interval both curves cover, over which the average is taken.
    pub overlap: (f64, f64),
}

/// Least-squares cubic `ln(rate) ≈ Σ c_k·u^k` with `u = (psnr - center) / scale`.
struct CubicFit {
    coeffs: [f64; 4],
    center: f64,
    scale: f64,
}

impl CubicFit {
    fn new(curve: &RdCurve) -> Result<Self> {
        let pts = curve.points();
        let mut psnrs: Vec<f64> = pts.iter().map(|p| p.1).collect();
        psnrs.sort_by(f64::total_cmp);
        if psnrs.windows(2).any(|w| w[1] - w[0] <= 1e-12 * (1.0 + w[0].abs())) {
            return Err(Error::Fit("duplicate PSNR values make the cubic fit ill-posed".into()));
        }
        let center = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let scale = pts.iter().map(|p| (p.1 - center).abs()).fold(0.0, f64::max);
        let mut ata = Matrix::zeros(4, 4).into_values();
        let mut atb = vec![0.0; 4];
        for &(r, p) in pts {
            let u = (p - center) / scale;
            let basis = [1.0, u, u * u, u * u * u];
            for i in 0..4 {
                for j in 0..4 {
                    ata[i * 4 + j] += basis[i] * basis[j];
                }
                atb[i] += basis[i] * r.ln();
            }
        }
        let sol = crate::tensor::cholesky_solve(&Matrix::new(4, 4, ata)?, &Matrix::new(4, 1, atb)?)
            .map_err(|e| Error::Fit(format!("cubic fit failed: {e}")))?
            .into_values();
        Ok(Self {
            coeffs: [sol[0], sol[1], sol[2], sol[3]],
            center,
            scale,
        })
    }

    /// Exact `∫ f(psnr) dpsnr` from `lo` to `hi`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |p: f64| {
            let u = (p - self.center) / self.scale;
            let c = &self.coeffs;
            self.scale * (c[0] * u + c[1] * u * u / 2.0 + c[2] * u.powi(3) / 3.0 + c[3] * u.powi(4) / 4.0)
        };
        anti(hi) - anti(lo)
    }
}

/// Bjøntegaard delta-rate of `test` against `anchor`, in percent.
///
/// Each curve's natural-log rate is fitted by a least-squares cubic in PSNR;
/// the fits' difference is averaged over the common PSNR interval and the
/// average log-ratio is mapped back with `exp`. A uniform rate scaling by
/// `s` therefore gives exactly `(s - 1)·100`.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<BdResult> {
    let (alo, ahi) = anchor.psnr_range();
    let (tlo, thi) = test.psnr_range();
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if !(hi > lo) {
        return Err(Error::Overlap(format!(
            "PSNR ranges [{alo}, {ahi}] and [{tlo}, {thi}] do not overlap"
        )));
    }
    let fa = CubicFit::new(anchor)?;
    let ft = CubicFit::new(test)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(BdResult {
        bd_rate_percent: avg.exp_m1() * 100.0,
        overlap: (lo, hi),
    })
}

/// Desk-scale rate proxy: the empirical entropy, in bits, of the residual
/// `orig - pred` quantized with step `qstep`. Not a codec bitrate.
pub fn residual_bits(orig: &Plane, pred: &Plane, qstep: f64) -> Result<f64> {
    check_same_dims(orig, pred)?;
    if !(qstep > 0.0) || !qstep.is_finite() {
        return Err(Error::Param(format!("quantizer step must be positive, got {qstep}")));
    }
    let mut hist: HashMap<i64, usize> = HashMap::new();
    for (o, p) in orig.samples().iter().zip(pred.samples()) {
        *hist.entry(((o - p) / qstep).round() as i64).or_default() += 1;
    }
    let n = orig.samples().len() as f64;
    Ok(hist.values().map(|&c| -(c as f64) * (c as f64 / n).log2()).sum())
}

/// One RD point for coding the residual of `pred` with step `qstep`:
/// `(residual_bits, psnr of the reconstruction)`. Every rate gets one extra
/// bit so that a lossless zero-entropy residual still has a positive rate.
pub fn residual_rd_point(orig: &Plane, pred: &Plane, qstep: f64) -> Result<(f64, f64)> {
    let bits = residual_bits(orig, pred, qstep)? + 1.0;
    let recon: Vec<f64> = orig
        .samples()
        .iter()
        .zip(pred.samples())
        .map(|(o, p)| (p + ((o - p) / qstep).round() * qstep).round().clamp(0.0, orig.max_value()))
        .collect();
    let recon = Plane::new(orig.width(), orig.height(), orig.bit_depth(), recon)?;
    Ok((bits, psnr(orig, &recon, orig.bit_depth())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor() -> RdCurve {
        RdCurve::new(vec![(100.0, 30.0), (200.0, 33.0), (400.0, 36.0), (800.0, 39.0)]).unwrap()
    }

    #[test]
    fn psnr_of_constant_offset() {
        let a = Plane::filled(8, 8, 8, 100.0).unwrap();
        let b = Plane::filled(8, 8, 8, 116.0).unwrap();
        let expect = 10.0 * (65025.0f64 / 256.0).log10();
        assert_eq!(mse(&a, &b).unwrap(), 256.0);
        assert!((psnr(&a, &b, 8).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 24.05).abs() < 0.01);
        assert_eq!(psnr(&a, &b, 8).unwrap(), psnr(&b, &a, 8).unwrap());
        assert_eq!(psnr(&a, &a, 8).unwrap(), f64::INFINITY);
        let c = Plane::filled(8, 9, 8, 0.0).unwrap();
        assert!(matches!(psnr(&a, &c, 8), Err(Error::Dimension(_))));
    }

    #[test]
    fn bd_rate_closed_forms() {
        let a = anchor();
        assert!(bd_rate(&a, &a).unwrap().bd_rate_percent.abs() < 1e-9);
        let up = bd_rate(&a, &a.scale_rates(1.10).unwrap()).unwrap();
        assert!((up.bd_rate_percent - 10.0).abs() < 0.01);
        let down = bd_rate(&a, &a.scale_rates(0.90).unwrap()).unwrap();
        assert!((down.bd_rate_percent + 10.0).abs() < 0.01);
        let back = bd_rate(&a.scale_rates(1.10).unwrap(), &a).unwrap();
        assert!((back.bd_rate_percent - (1.0 / 1.1 - 1.0) * 100.0).abs() < 1e-6);
        assert_eq!(up.overlap, (30.0, 39.0));
    }

    #[test]
    fn bd_rate_errors() {
        let a = anchor();
        let far = RdCurve::new(vec![(100.0, 50.0), (200.0, 51.0), (400.0, 52.0), (800.0, 53.0)]).unwrap();
        assert!(matches!(bd_rate(&a, &far), Err(Error::Overlap(_))));
        let dup = RdCurve::new(vec![(100.0, 30.0), (200.0, 33.0), (400.0, 33.0), (800.0, 39.0)]).unwrap();
        assert!(matches!(bd_rate(&a, &dup), Err(Error::Fit(_))));
    }

    #[test]
    fn curve_validation() {
        assert!(matches!(build_rd_curve(vec![(1.0, 30.0); 3]), Err(Error::Data(_))));
        assert!(RdCurve::new(vec![(1.0, 30.0), (1.0, 31.0), (2.0, 32.0), (3.0, 33.0)]).is_err());
        assert!(RdCurve::new(vec![(0.0, 30.0), (1.0, 31.0), (2.0, 32.0), (3.0, 33.0)]).is_err());
        let c = build_rd_curve(vec![(800.0, 39.0), (100.0, 30.0), (400.0, 36.0), (200.0, 33.0)]).unwrap();
        assert_eq!(c, anchor());
    }

    #[test]
    fn residual_entropy_proxy() {
        let a = Plane::from_fn(16, 16, 8, |x, y| (x * 7 + y * 3) as f64).unwrap();
        assert_eq!(residual_bits(&a, &a, 1.0).unwrap(), 0.0);
        // residual alternates between two values: one bit per sample
        let b = Plane::from_fn(16, 16, 8, |x, y| a.get(x, y) + if (x + y) % 2 == 0 { 4.0 } else { 0.0 }).unwrap();
        assert!((residual_bits(&a, &b, 1.0).unwrap() - 256.0).abs() < 1e-9);
        let (fine_bits, fine_psnr) = residual_rd_point(&a, &b, 1.0).unwrap();
        let (coarse_bits, coarse_psnr) = residual_rd_point(&a, &b, 16.0).unwrap();
        assert!(fine_bits > coarse_bits && fine_psnr > coarse_psnr);
        assert!(residual_bits(&a, &b, 0.0).is_err());
    }
}
