//! Image-quality and edit-quality metrics.
//!
//! SSIM uses 8×8 uniform windows at stride 4 with `K1 = 0.01`, `K2 = 0.03`,
//! dynamic range 1 and population (1/N) moments, averaged over windows and
//! channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Latent, SpatialMap};

/// Reported PSNR when the MSE is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_string(),
            actual: b.shape().to_string(),
        });
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(a: &Latent, b: &Latent, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

/// Windowed SSIM, channel-averaged.
pub fn ssim(a: &Latent, b: &Latent) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.height, s.width
        )));
    }
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for c in 0..s.channels {
        let (pa, pb) = (a.channel(c), b.channel(c));
        for y0 in (0..=s.height - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for x0 in (0..=s.width - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    let row = y * s.width;
                    for x in x0..x0 + SSIM_WINDOW {
                        let (u, v) = (pa[row + x], pb[row + x]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Background preservation and edit effect for one edited image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub bg_mse: f64,
    pub bg_psnr: f64,
    pub bg_ssim: f64,
    /// Mean of the target colour channel minus the mean of the source colour
    /// channel inside the region, on `[0, 1]`-clamped pixels; lies in `[-1, 1]`.
    pub edit_score: f64,
}

impl RegionReport {
    pub const CSV_HEADER: &'static str = "bg_mse,bg_psnr,bg_ssim,edit_score";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.bg_mse, self.bg_psnr, self.bg_ssim, self.edit_score
        )
    }
}

/// Metrics restricted by a binary `region_mask` (1 inside the edited region).
///
/// Background MSE/PSNR use only pixels where the mask is 0. Background SSIM
/// is computed on copies of both images with the region zeroed out.
pub fn region_report(
    original: &Latent,
    edited: &Latent,
    region_mask: &SpatialMap,
    source_channel: usize,
    target_channel: usize,
) -> Result<RegionReport> {
    same_shape(original, edited)?;
    let s = original.shape();
    if region_mask.height() != s.height || region_mask.width() != s.width {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, {}]", s.height, s.width),
            actual: format!("[{}, {}]", region_mask.height(), region_mask.width()),
        });
    }
    assert!(source_channel < s.channels && target_channel < s.channels);
    let inside: Vec<bool> = region_mask.as_slice().iter().map(|&m| m > 0.5).collect();
    let n_in = inside.iter().filter(|&&b| b).count();
    if n_in == inside.len() {
        return Err(Error::EmptyRegion("background"));
    }
    if n_in == 0 {
        return Err(Error::EmptyRegion("edit"));
    }

    let p = s.plane();
    let mut sq = 0.0;
    let mut n_bg = 0usize;
    for (j, (x, y)) in original
        .as_slice()
        .iter()
        .zip(edited.as_slice())
        .enumerate()
    {
        if !inside[j % p] {
            sq += (x - y) * (x - y);
            n_bg += 1;
        }
    }
    let bg_mse = sq / n_bg as f64;

    let zero_region = |z: &Latent| {
        let mut out = z.clone();
        for (j, x) in out.as_mut_slice().iter_mut().enumerate() {
            if inside[j % p] {
                *x = 0.0;
            }
        }
        out
    };
    let bg_ssim = if s.height >= SSIM_WINDOW && s.width >= SSIM_WINDOW {
        ssim(&zero_region(original), &zero_region(edited))?
    } else {
        f64::NAN
    };

    let channel_mean_inside = |ch: usize| {
        let plane = edited.channel(ch);
        let sum: f64 = plane
            .iter()
            .zip(&inside)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x.clamp(0.0, 1.0))
            .sum();
        sum / n_in as f64
    };
    let edit_score = channel_mean_inside(target_channel) - channel_mean_inside(source_channel);

    Ok(RegionReport {
        bg_mse,
        bg_psnr: psnr_from_mse(bg_mse, 1.0),
        bg_ssim,
        edit_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{SeededRng, Shape};
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let s = Shape::new(2, 3, 3);
        let a = SeededRng::new(1).normal_latent(s);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x + 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse(&a, &Latent::zeros(Shape::new(1, 3, 3))).is_err());
    }

    #[test]
    fn mse_matches_two_pass_oracle() {
        let s = Shape::new(3, 7, 5);
        let a = SeededRng::new(2).normal_latent(s);
        let b = SeededRng::new(3).normal_latent(s);
        // independent route: per-channel partial sums, then combine
        let mut per_channel = Vec::new();
        for c in 0..3 {
            let d: Vec<f64> = a
                .channel(c)
                .iter()
                .zip(b.channel(c))
                .map(|(x, y)| x - y)
                .collect();
            per_channel.push(d.iter().map(|x| x * x).sum::<f64>());
        }
        let oracle = per_channel.iter().sum::<f64>() / s.len() as f64;
        let got = mse(&a, &b).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        let a = Latent::filled(Shape::new(1, 2, 2), 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let s = Shape::new(3, 16, 16);
        let a = SeededRng::new(4)
            .normal_latent(s)
            .map(|x| x.clamp(0.0, 1.0));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let binary = Latent::from_fn(s, |c, h, w| ((c + h + w) % 2) as f64);
        let flipped = binary.map(|x| 1.0 - x);
        assert!(ssim(&binary, &flipped).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Latent::zeros(Shape::new(1, 7, 9));
        assert!(ssim(&a, &a).is_err());
    }

    fn square_region() -> SpatialMap {
        SpatialMap::from_vec(
            8,
            8,
            (0..64)
                .map(|k| if (k / 8) < 4 && (k % 8) < 4 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn region_report_unchanged_image() {
        let s = Shape::new(3, 8, 8);
        let img = Latent::from_fn(s, |c, _, _| [0.8, 0.2, 0.1][c]);
        let r = region_report(&img, &img, &square_region(), 0, 2).unwrap();
        assert_eq!(r.bg_psnr, PSNR_CAP_DB);
        assert_eq!(r.bg_mse, 0.0);
        assert!((r.edit_score - (0.1 - 0.8)).abs() < 1e-12);
    }

    #[test]
    fn region_report_perfect_recolor() {
        let s = Shape::new(3, 8, 8);
        let region = square_region();
        let red = Latent::from_fn(s, |c, h, w| {
            if region.get(h, w) > 0.5 {
                [0.9, 0.1, 0.1][c]
            } else {
                0.4
            }
        });
        let blue = Latent::from_fn(s, |c, h, w| {
            if region.get(h, w) > 0.5 {
                [0.1, 0.1, 0.9][c]
            } else {
                0.4
            }
        });
        let r = region_report(&red, &blue, &region, 0, 2).unwrap();
        assert!(r.edit_score > 0.0);
        assert_eq!(r.bg_mse, 0.0);
    }

    #[test]
    fn region_report_empty_regions() {
        let s = Shape::new(3, 8, 8);
        let img = Latent::zeros(s);
        let all = SpatialMap::filled(8, 8, 1.0);
        assert!(matches!(
            region_report(&img, &img, &all, 0, 1),
            Err(Error::EmptyRegion("background"))
        ));
        let none = SpatialMap::filled(8, 8, 0.0);
        assert!(matches!(
            region_report(&img, &img, &none, 0, 1),
            Err(Error::EmptyRegion("edit"))
        ));
    }

    proptest! {
        #[test]
        fn psnr_decreasing_in_mse(a in 1e-9f64..10.0, b in 1e-9f64..10.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a, 1.0) > psnr_from_mse(b, 1.0));
        }

        #[test]
        fn ssim_symmetric_and_self_one(seed in 0u64..500) {
            let s = Shape::new(2, 12, 10);
            let mut rng = SeededRng::new(seed);
            let a = rng.normal_latent(s);
            let b = rng.normal_latent(s);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        }
    }
}
