//! Image quality metrics on magnitude images.

use crate::error::{Error, Result};
use crate::numerics::{filter_symmetric, gaussian_kernel, ComplexImage, Kernel, RealImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const HFEN_SIDE: usize = 15;
pub const HFEN_SIGMA: f64 = 1.5;

fn magnitudes(x_hat: &ComplexImage, x_gt: &ComplexImage, what: &str) -> Result<(RealImage, RealImage)> {
    x_hat.check_same_dims(x_gt, what)?;
    Ok((x_hat.magnitude(), x_gt.magnitude()))
}

/// `20·log10(max|x_gt| / RMSE)`; `+∞` when the magnitudes agree exactly.
pub fn psnr(x_hat: &ComplexImage, x_gt: &ComplexImage) -> Result<f64> {
    let (a, b) = magnitudes(x_hat, x_gt, "psnr")?;
    psnr_real(&a, &b)
}

pub fn psnr_real(a: &RealImage, gt: &RealImage) -> Result<f64> {
    check_dims(a, gt, "psnr")?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(gt.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = gt.max();
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr: ground truth peak is zero"));
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

fn check_dims(a: &RealImage, b: &RealImage, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("{what}: dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Correlation over the region where the kernel fits entirely inside the image.
fn filter_valid(img: &RealImage, k: &Kernel) -> RealImage {
    let s = k.side();
    let (h, w) = img.dims();
    RealImage::from_fn(h + 1 - s, w + 1 - s, |i, j| {
        let mut acc = 0.0;
        for a in 0..s {
            for b in 0..s {
                acc += k.get(a, b) * img.get(i + a, j + b);
            }
        }
        acc
    })
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5), dynamic range 1.
pub fn ssim(x_hat: &ComplexImage, x_gt: &ComplexImage) -> Result<f64> {
    let (a, b) = magnitudes(x_hat, x_gt, "ssim")?;
    ssim_real(&a, &b)
}

pub fn ssim_real(a: &RealImage, b: &RealImage) -> Result<f64> {
    check_dims(a, b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW)?;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: fn(f64, f64) -> f64| {
        RealImage::from_vec(h, w, a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect())
            .expect("dims match")
    };
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let e_aa = filter_valid(&prod(|p, _| p * p), &k);
    let e_bb = filter_valid(&prod(|_, q| q * q), &k);
    let e_ab = filter_valid(&prod(|p, q| p * q), &k);
    let mut total = 0.0;
    for idx in 0..mu_a.data().len() {
        let ma = mu_a.data()[idx];
        let mb = mu_b.data()[idx];
        let va = e_aa.data()[idx] - ma * ma;
        let vb = e_bb.data()[idx] - mb * mb;
        let cov = e_ab.data()[idx] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.data().len() as f64)
}

/// Zero-mean Laplacian-of-Gaussian kernel.
pub fn log_kernel(sigma: f64, side: usize) -> Result<Kernel> {
    if side.is_multiple_of(2) || !(sigma > 0.0) {
        return Err(Error::invalid("log_kernel: side must be odd and sigma positive"));
    }
    let r = (side / 2) as f64;
    let s2 = sigma * sigma;
    let mut w: Vec<f64> = (0..side * side)
        .map(|idx| {
            let y = (idx / side) as f64 - r;
            let x = (idx % side) as f64 - r;
            let d2 = x * x + y * y;
            (d2 - 2.0 * s2) / (s2 * s2) * (-d2 / (2.0 * s2)).exp()
        })
        .collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter_mut().for_each(|v| *v -= mean);
    Kernel::new(side, w)
}

fn log_residuals(a: &RealImage, gt: &RealImage) -> Result<(f64, f64)> {
    check_dims(a, gt, "hfen")?;
    let k = log_kernel(HFEN_SIGMA, HFEN_SIDE)?;
    let la = filter_symmetric(a, &k)?;
    let lg = filter_symmetric(gt, &k)?;
    let diff = la.data().iter().zip(lg.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    Ok((diff, lg.norm()))
}

/// `‖LoG(|x_hat|) − LoG(|x_gt|)‖₂ / ‖LoG(|x_gt|)‖₂`.
pub fn hfen(x_hat: &ComplexImage, x_gt: &ComplexImage) -> Result<f64> {
    let (a, b) = magnitudes(x_hat, x_gt, "hfen")?;
    let (diff, reference) = log_residuals(&a, &b)?;
    if reference == 0.0 {
        return Err(Error::invalid("hfen: ground truth has no high-frequency content"));
    }
    Ok(diff / reference)
}

/// Unnormalized `‖LoG(|x_hat|) − LoG(|x_gt|)‖₂`.
pub fn hfen_absolute(x_hat: &ComplexImage, x_gt: &ComplexImage) -> Result<f64> {
    let (a, b) = magnitudes(x_hat, x_gt, "hfen")?;
    Ok(log_residuals(&a, &b)?.0)
}

/// `‖|x_hat| − |x_gt|‖₂ / ‖|x_gt|‖₂`.
pub fn nmse_metric(x_hat: &ComplexImage, x_gt: &ComplexImage) -> Result<f64> {
    let (a, b) = magnitudes(x_hat, x_gt, "nmse")?;
    let reference = b.norm();
    if !(reference > 0.0) {
        return Err(Error::invalid("nmse: ground truth has zero norm"));
    }
    let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    Ok(diff / reference)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub hfen: f64,
    pub nmse: f64,
}

pub const CSV_HEADER: &str = "image_id,psnr_db,hfen,ssim,nmse";

impl MetricReport {
    pub fn csv_row(&self, image_id: &str) -> String {
        format!(
            "{image_id},{},{},{},{}",
            fmt_float(self.psnr_db),
            fmt_float(self.hfen),
            fmt_float(self.ssim),
            fmt_float(self.nmse)
        )
    }
}

fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// All four metrics; `absolute_hfen` selects the unnormalized HFEN.
pub fn evaluate(x_hat: &ComplexImage, x_gt: &ComplexImage, absolute_hfen: bool) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(x_hat, x_gt)?,
        ssim: ssim(x_hat, x_gt)?,
        hfen: if absolute_hfen {
            hfen_absolute(x_hat, x_gt)?
        } else {
            hfen(x_hat, x_gt)?
        },
        nmse: nmse_metric(x_hat, x_gt)?,
    })
}
