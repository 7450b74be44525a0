//! PSNR and SSIM image quality metrics.

use crate::error::{Error, Result};
use crate::img::Image;

/// PSNR cap returned for effectively identical images (MSE < 1e-10).
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    Ok(())
}

/// 10 * log10(1 / MSE) for [0,1] images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for y in -r..=r {
        for x in -r..=r {
            let v = (-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// C1 = 0.01^2, C2 = 0.03^2, evaluated at valid window positions and
/// averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for cy in r..h - r {
            for cx in r..w - r {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                let mut wi = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let y = cy + dy - r;
                        let x = cx + dx - r;
                        let pa = a.data[(y * w + x) * 3 + c];
                        let pb = b.data[(y * w + x) * 3 + c];
                        let wt = win[wi];
                        wi += 1;
                        mx += wt * pa;
                        my += wt * pb;
                        mxx += wt * pa * pa;
                        myy += wt * pb * pb;
                        mxy += wt * pa * pb;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
