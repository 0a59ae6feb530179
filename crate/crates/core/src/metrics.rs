//! Image-quality metrics on magnitude volumes: NMSE, PSNR, SSIM and HFEN.
//!
//! SSIM and HFEN are computed per frame and averaged over frames; NMSE and
//! PSNR are taken over the whole volume.

use serde::{Deserialize, Serialize};

use crate::data::{DynamicImage, Shape};
use crate::error::{LanternError, Result};

/// PSNR reported for (near-)identical inputs.
pub const PSNR_CAP_DB: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HfenParams {
    pub size: usize,
    pub sigma: f64,
}

impl Default for HfenParams {
    fn default() -> Self {
        HfenParams { size: 15, sigma: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricConfig {
    pub ssim: SsimParams,
    pub hfen: HfenParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub hfen: f64,
}

/// Mean and (population) standard deviation over a set of reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricReport,
    pub std: MetricReport,
    pub count: usize,
}

impl MetricSummary {
    pub fn from_reports(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let stat = |f: fn(&MetricReport) -> f64| {
            let mean = reports.iter().map(f).sum::<f64>() / n;
            let var = reports.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (nm, ns) = stat(|r| r.nmse);
        let (pm, ps) = stat(|r| r.psnr_db);
        let (sm, ss) = stat(|r| r.ssim);
        let (hm, hs) = stat(|r| r.hfen);
        Some(MetricSummary {
            mean: MetricReport {
                nmse: nm,
                psnr_db: pm,
                ssim: sm,
                hfen: hm,
            },
            std: MetricReport {
                nmse: ns,
                psnr_db: ps,
                ssim: ss,
                hfen: hs,
            },
            count: reports.len(),
        })
    }
}

fn magnitudes(x: &DynamicImage, gt: &DynamicImage) -> Result<(Vec<f64>, Vec<f64>)> {
    x.shape().ensure_eq(&gt.shape())?;
    Ok((x.magnitude(), gt.magnitude()))
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|a| a * a).sum::<f64>().sqrt()
}

/// `| |x| - |gt| | / | |gt| |` over the whole volume.
pub fn nmse(x: &DynamicImage, gt: &DynamicImage) -> Result<f64> {
    let (a, b) = magnitudes(x, gt)?;
    let den = l2(b.iter().copied());
    if den == 0.0 {
        return Err(LanternError::DegenerateReference("reference is all zero".into()));
    }
    Ok(l2(a.iter().zip(&b).map(|(p, q)| p - q)) / den)
}

/// `10 log10(peak^2 / MSE)` with `peak = max |gt|`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(x: &DynamicImage, gt: &DynamicImage) -> Result<f64> {
    let (a, b) = magnitudes(x, gt)?;
    let peak = b.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(LanternError::DegenerateReference("reference is all zero".into()));
    }
    let mse = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of an `nx x ny` frame.
fn filter_valid(f: &[f64], nx: usize, ny: usize, g: &[f64]) -> Vec<f64> {
    let w = g.len();
    let (ox, oy) = (nx - w + 1, ny - w + 1);
    let mut rows = vec![0.0; ox * ny];
    for y in 0..ny {
        for x in 0..ox {
            rows[x + ox * y] = (0..w).map(|j| g[j] * f[x + j + nx * y]).sum();
        }
    }
    let mut out = vec![0.0; ox * oy];
    for y in 0..oy {
        for x in 0..ox {
            out[x + ox * y] = (0..w).map(|j| g[j] * rows[x + ox * (y + j)]).sum();
        }
    }
    out
}

fn frame_ssim(a: &[f64], b: &[f64], shape: Shape, g: &[f64], c1: f64, c2: f64) -> f64 {
    let (nx, ny) = (shape.nx, shape.ny);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, nx, ny, g);
    let mu_b = filter_valid(b, nx, ny, g);
    let e_aa = filter_valid(&prod(a, a), nx, ny, g);
    let e_bb = filter_valid(&prod(b, b), nx, ny, g);
    let e_ab = filter_valid(&prod(a, b), nx, ny, g);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

pub fn ssim(x: &DynamicImage, gt: &DynamicImage) -> Result<f64> {
    ssim_with(x, gt, &SsimParams::default())
}

/// Mean SSIM over all windows lying fully inside each frame, averaged over
/// frames. The dynamic range is `max |gt|` over the volume.
pub fn ssim_with(x: &DynamicImage, gt: &DynamicImage, p: &SsimParams) -> Result<f64> {
    let (a, b) = magnitudes(x, gt)?;
    let shape = x.shape();
    if p.window == 0 || shape.nx < p.window || shape.ny < p.window {
        return Err(LanternError::InvalidShape(format!(
            "SSIM needs frames of at least {0}x{0}, got {1}x{2}",
            p.window, shape.nx, shape.ny
        )));
    }
    let range = b.iter().copied().fold(0.0, f64::max);
    if range == 0.0 {
        return Err(LanternError::DegenerateReference("reference is all zero".into()));
    }
    let g = gaussian_1d(p.window, p.sigma);
    let c1 = (p.k1 * range).powi(2);
    let c2 = (p.k2 * range).powi(2);
    let fl = shape.frame_len();
    let total: f64 = (0..shape.nt)
        .map(|t| frame_ssim(&a[t * fl..(t + 1) * fl], &b[t * fl..(t + 1) * fl], shape, &g, c1, c2))
        .sum();
    Ok(total / shape.nt as f64)
}

/// Zero-sum Laplacian-of-Gaussian kernel, `size x size`, row-major.
pub fn log_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let s2 = sigma * sigma;
    let mut hg = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            hg.push(((-r2) / (2.0 * s2)).exp());
        }
    }
    let sum: f64 = hg.iter().sum();
    let mut h: Vec<f64> = hg
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let r2 = ((i % size) as f64 - c).powi(2) + ((i / size) as f64 - c).powi(2);
            g * (r2 - 2.0 * s2) / (s2 * s2 * sum)
        })
        .collect();
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    h.iter_mut().for_each(|v| *v -= mean);
    h
}

/// Same-size filtering with edge-replicating borders.
fn filter_replicate(f: &[f64], nx: usize, ny: usize, k: &[f64], size: usize) -> Vec<f64> {
    let c = (size / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for j in 0..size {
                let sy = clamp(y as isize + j as isize - c, ny);
                for i in 0..size {
                    let sx = clamp(x as isize + i as isize - c, nx);
                    acc += k[i + size * j] * f[sx + nx * sy];
                }
            }
            out[x + nx * y] = acc;
        }
    }
    out
}

pub fn hfen(x: &DynamicImage, gt: &DynamicImage) -> Result<f64> {
    hfen_with(x, gt, &HfenParams::default())
}

/// Per-frame `|LoG(|x|) - LoG(|gt|)| / |LoG(|gt|)|`, averaged over frames.
pub fn hfen_with(x: &DynamicImage, gt: &DynamicImage, p: &HfenParams) -> Result<f64> {
    let (a, b) = magnitudes(x, gt)?;
    let shape = x.shape();
    let k = log_kernel(p.size, p.sigma);
    let k_l1: f64 = k.iter().map(|v| v.abs()).sum();
    let fl = shape.frame_len();
    let mut total = 0.0;
    for t in 0..shape.nt {
        let fb = &b[t * fl..(t + 1) * fl];
        let la = filter_replicate(&a[t * fl..(t + 1) * fl], shape.nx, shape.ny, &k, p.size);
        let lb = filter_replicate(fb, shape.nx, shape.ny, &k, p.size);
        let den = l2(lb.iter().copied());
        // Round-off floor: a flat frame filters to ~1e-16 of its size.
        if den <= 1e-12 * k_l1 * l2(fb.iter().copied()) {
            return Err(LanternError::DegenerateReference(format!(
                "frame {t} of the reference has no high-frequency content"
            )));
        }
        total += l2(la.iter().zip(&lb).map(|(u, v)| u - v)) / den;
    }
    Ok(total / shape.nt as f64)
}

pub fn evaluate(x: &DynamicImage, gt: &DynamicImage) -> Result<MetricReport> {
    evaluate_with(x, gt, &MetricConfig::default())
}

pub fn evaluate_with(x: &DynamicImage, gt: &DynamicImage, cfg: &MetricConfig) -> Result<MetricReport> {
    Ok(MetricReport {
        nmse: nmse(x, gt)?,
        psnr_db: psnr(x, gt)?,
        ssim: ssim_with(x, gt, &cfg.ssim)?,
        hfen: hfen_with(x, gt, &cfg.hfen)?,
    })
}
