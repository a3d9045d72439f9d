//! Image comparison metrics: PSNR, SSIM, and mean absolute error.

use crate::error::{Error, Result};
use crate::render::ImageBuf;

/// PSNR is capped here when the images are bit-identical.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &ImageBuf, b: &ImageBuf, what: &str) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch {
            context: what.to_string(),
            expected: vec![a.width, a.height],
            got: vec![b.width, b.height],
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels, peak 1.0.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_same_shape(a, b, "psnr")?;
    let mse: f64 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.rgb.len() as f64;
    if mse == 0.0 {
        Ok(PSNR_CAP)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

/// Mean absolute error over all channels.
pub fn l1(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_same_shape(a, b, "l1")?;
    Ok(a.rgb
        .iter()
        .zip(&b.rgb)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.rgb.len() as f64)
}

fn to_gray(img: &ImageBuf) -> Vec<f64> {
    img.rgb
        .chunks_exact(3)
        .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0)
        .collect()
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid convolution with the Gaussian window.
fn blur_valid(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; wv * h];
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * src[y * w + x + k];
            }
            horiz[y * wv + x] = acc;
        }
    }
    let mut out = vec![0.0; wv * hv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + k) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    out
}

fn ssim_from_stats(mx: f64, my: f64, xx: f64, yy: f64, xy: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let vx = xx - mx * mx;
    let vy = yy - my * my;
    let cov = xy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM over valid 11x11 Gaussian windows of the gray images.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image must be at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
        ));
    }
    let (w, h) = (a.width, a.height);
    let x = to_gray(a);
    let y = to_gray(b);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
    let mx = blur_valid(&x, w, h);
    let my = blur_valid(&y, w, h);
    let mxx = blur_valid(&xx, w, h);
    let myy = blur_valid(&yy, w, h);
    let mxy = blur_valid(&xy, w, h);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        total += ssim_from_stats(mx[i], my[i], mxx[i], myy[i], mxy[i]);
    }
    Ok(total / n as f64)
}

/// Windowed SSIM computed the slow, direct way; the separable path above
/// must agree with it.
pub fn ssim_reference(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image must be at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
        ));
    }
    let (w, h) = (a.width, a.height);
    let x = to_gray(a);
    let y = to_gray(b);
    let taps = gaussian_taps();
    let mut total = 0.0;
    let mut count = 0;
    for wy in 0..h - SSIM_WINDOW + 1 {
        for wx in 0..w - SSIM_WINDOW + 1 {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let g = taps[dy] * taps[dx];
                    let u = x[(wy + dy) * w + wx + dx];
                    let v = y[(wy + dy) * w + wx + dx];
                    mx += g * u;
                    my += g * v;
                    mxx += g * u * u;
                    myy += g * v * v;
                    mxy += g * u * v;
                }
            }
            total += ssim_from_stats(mx, my, mxx, myy, mxy);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, w: usize, h: usize) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuf {
            width: w,
            height: h,
            rgb: (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    fn perturbed(img: &ImageBuf, seed: u64, amp: f32) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = img.clone();
        for v in out.rgb.iter_mut() {
            *v = (*v + rng.gen_range(-amp..amp)).clamp(0.0, 1.0);
        }
        out
    }

    #[test]
    fn identical_images_hit_the_caps() {
        let img = noise_image(1, 24, 24);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(l1(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn constant_tenth_offset_gives_twenty_db() {
        let a = ImageBuf {
            width: 16,
            height: 16,
            rgb: vec![0.5; 16 * 16 * 3],
        };
        let mut b = a.clone();
        for v in b.rgb.iter_mut() {
            *v += 0.1;
        }
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "psnr {p}");
        assert!((l1(&a, &b).unwrap() - 0.1).abs() < 1e-7);
    }

    #[test]
    fn metrics_degrade_monotonically_with_noise() {
        let base = noise_image(2, 32, 32);
        let mut last_psnr = f64::INFINITY;
        let mut last_ssim = 2.0;
        for (i, amp) in [0.02f32, 0.08, 0.3].iter().enumerate() {
            let noisy = perturbed(&base, 10 + i as u64, *amp);
            let p = psnr(&base, &noisy).unwrap();
            let s = ssim(&base, &noisy).unwrap();
            assert!(p < last_psnr, "psnr not decreasing at amp {amp}");
            assert!(s < last_ssim, "ssim not decreasing at amp {amp}");
            last_psnr = p;
            last_ssim = s;
        }
    }

    #[test]
    fn separable_ssim_matches_direct_form() {
        let a = noise_image(3, 20, 17);
        let b = perturbed(&a, 4, 0.1);
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_reference(&a, &b).unwrap();
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = noise_image(5, 16, 16);
        let b = noise_image(6, 16, 12);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
        assert!(l1(&a, &b).is_err());
    }
}
