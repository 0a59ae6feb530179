//! Synthetic cine phantoms: moving ellipses over a static smooth
//! background, with a smooth phase map so the images are genuinely complex.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DynamicImage, Sample, Shape};
use crate::error::{LanternError, Result};
use crate::sampling::{
    forward_undersample, make_mask_1d_random, make_mask_radial, PatternKind, SamplingMask,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub n_ellipses: usize,
    /// Peak relative change of each moving ellipse's radii, in `[0, 0.5]`.
    pub contraction_amplitude: f64,
    pub background_texture_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            nx: 64,
            ny: 64,
            nt: 8,
            n_ellipses: 4,
            contraction_amplitude: 0.2,
            background_texture_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// 126x126x16 volumes.
    pub fn full_scale() -> Self {
        PhantomConfig {
            nx: 126,
            ny: 126,
            nt: 16,
            ..PhantomConfig::default()
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.nx, self.ny, self.nt)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if !(0.0..=0.5).contains(&self.contraction_amplitude) {
            return Err(LanternError::InvalidParameter(format!(
                "contraction amplitude must lie in [0, 0.5], got {}",
                self.contraction_amplitude
            )));
        }
        if !(self.background_texture_sigma >= 0.0 && self.background_texture_sigma.is_finite()) {
            return Err(LanternError::InvalidParameter(format!(
                "texture sigma must be >= 0, got {}",
                self.background_texture_sigma
            )));
        }
        Ok(())
    }
}

/// One moving ellipse in normalized coordinates (`[-1, 1]` across the
/// field of view).
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
    pub intensity: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub period: usize,
}

impl Ellipse {
    /// Radius scale at frame `t`: `1 + a sin(2 pi t / period + phase)`.
    pub fn scale_at(&self, t: usize) -> f64 {
        1.0 + self.amplitude * (2.0 * PI * t as f64 / self.period as f64 + self.phase).sin()
    }

    pub fn contains(&self, u: f64, v: f64, t: usize) -> bool {
        let s = self.scale_at(t);
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let (c, sn) = (self.angle.cos(), self.angle.sin());
        let a = (c * du + sn * dv) / (self.axes.0 * s);
        let b = (-sn * du + c * dv) / (self.axes.1 * s);
        a * a + b * b <= 1.0
    }
}

/// Normalized coordinate of pixel `i` on an `n`-pixel axis.
pub fn pixel_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

struct Layout {
    ellipses: Vec<Ellipse>,
    /// Low-frequency cosine terms `(amp, fu, fv, offset)` of the texture.
    texture: Vec<(f64, f64, f64, f64)>,
    phase: (f64, f64, f64),
}

fn layout(cfg: &PhantomConfig) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ellipses = (0..cfg.n_ellipses)
        .map(|_| Ellipse {
            center: (rng.gen_range(-0.45..0.45), rng.gen_range(-0.45..0.45)),
            axes: (rng.gen_range(0.12..0.3), rng.gen_range(0.12..0.3)),
            angle: rng.gen_range(0.0..PI),
            intensity: rng.gen_range(0.3..0.8),
            amplitude: cfg.contraction_amplitude,
            phase: rng.gen_range(0.0..2.0 * PI),
            period: cfg.nt,
        })
        .collect();
    let texture = (0..6)
        .map(|_| {
            (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let phase = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5));
    Layout {
        ellipses,
        texture,
        phase,
    }
}

impl Layout {
    /// Static magnitude: a smooth body plus low-frequency texture.
    fn background(&self, u: f64, v: f64, sigma: f64) -> f64 {
        let body = 0.15 + 0.2 * (-(u * u + v * v) / 0.6).exp();
        let tex: f64 = self
            .texture
            .iter()
            .map(|(a, fu, fv, off)| a * (PI * (fu * u + fv * v) + off).cos())
            .sum::<f64>()
            / self.texture.len() as f64;
        (body + sigma * tex).max(0.0)
    }

    fn phase_at(&self, u: f64, v: f64) -> f64 {
        let (a, b, c) = self.phase;
        0.5 * PI * (a * u + b * v + c * u * v)
    }
}

/// The moving ellipses of the phantom described by `cfg`.
pub fn moving_ellipses(cfg: &PhantomConfig) -> Vec<Ellipse> {
    layout(cfg).ellipses
}

fn render_unnormalized(cfg: &PhantomConfig, lay: &Layout, frames: usize) -> Vec<Complex64> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    let mut out = Vec::with_capacity(nx * ny * frames);
    for t in 0..frames {
        for y in 0..ny {
            let v = pixel_coord(y, ny);
            for x in 0..nx {
                let u = pixel_coord(x, nx);
                let mut m = lay.background(u, v, cfg.background_texture_sigma);
                for e in &lay.ellipses {
                    if e.contains(u, v, t) {
                        m += e.intensity;
                    }
                }
                out.push(Complex64::from_polar(m, lay.phase_at(u, v)));
            }
        }
    }
    out
}

/// Renders `frames` frames (which may exceed one period); the scaling is
/// fixed by the first period so that repeated periods agree.
pub fn render_frames(cfg: &PhantomConfig, frames: usize) -> Result<DynamicImage> {
    cfg.validate()?;
    let lay = layout(cfg);
    let period = render_unnormalized(cfg, &lay, cfg.nt);
    let peak = period.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut data = if frames == cfg.nt {
        period
    } else {
        render_unnormalized(cfg, &lay, frames)
    };
    if peak > 0.0 {
        data.iter_mut().for_each(|z| *z /= peak);
    }
    DynamicImage::new(Shape::new(cfg.nx, cfg.ny, frames), data)
}

/// One period of the phantom, scaled to a maximum magnitude of 1.
pub fn generate_dynamic_phantom(cfg: &PhantomConfig) -> Result<DynamicImage> {
    render_frames(cfg, cfg.nt)
}

/// How [`build_dataset`] draws masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: PatternKind,
    pub accel: f64,
    /// Always-acquired low-frequency lines (Cartesian masks only).
    pub center_lines: usize,
}

impl MaskSpec {
    pub fn one_d_random(accel: f64) -> Self {
        MaskSpec {
            kind: PatternKind::OneDRandom,
            accel,
            center_lines: 4,
        }
    }

    pub fn draw(&self, shape: Shape, seed: u64) -> Result<SamplingMask> {
        match self.kind {
            PatternKind::OneDRandom => make_mask_1d_random(shape, self.accel, self.center_lines, seed),
            PatternKind::Radial => make_mask_radial(shape, self.accel, seed),
            PatternKind::Full => Ok(SamplingMask::full(shape)),
        }
    }
}

/// `n_samples` phantoms, each with its own seed, a freshly drawn mask and
/// `y = P (F x + noise)`. Per-sample seeds come from the master `seed`.
pub fn build_dataset(
    n_samples: usize,
    template: &PhantomConfig,
    mask: &MaskSpec,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(LanternError::InvalidParameter("need at least one sample".into()));
    }
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    for _ in 0..n_samples {
        let (ps, ms, ns): (u64, u64, u64) = (rng.gen(), rng.gen(), rng.gen());
        let cfg = PhantomConfig {
            seed: ps,
            ..template.clone()
        };
        let truth = generate_dynamic_phantom(&cfg)?;
        let m = mask.draw(cfg.shape(), ms)?;
        let kspace = forward_undersample(&truth, &m, noise_sigma, ns)?;
        ds.push(Sample {
            kspace,
            mask: m,
            truth,
        })?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{conv_apply, init_dct_tv};

    fn small() -> PhantomConfig {
        PhantomConfig {
            nx: 32,
            ny: 32,
            nt: 6,
            seed: 3,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn normalized_to_unit_peak() {
        for seed in 0..5 {
            let x = generate_dynamic_phantom(&PhantomConfig { seed, ..small() }).unwrap();
            assert_eq!(x.max_magnitude(), 1.0);
            assert!(x.is_finite());
        }
    }

    #[test]
    fn complex_valued() {
        let x = generate_dynamic_phantom(&small()).unwrap();
        let im: f64 = x.as_slice().iter().map(|z| z.im.abs()).sum();
        assert!(im > 1e-3 * x.norm());
    }

    #[test]
    fn static_without_contraction() {
        let x = generate_dynamic_phantom(&PhantomConfig {
            contraction_amplitude: 0.0,
            ..small()
        })
        .unwrap();
        for t in 1..x.shape().nt {
            assert_eq!(x.frame(t), x.frame(0));
        }
    }

    #[test]
    fn moves_with_contraction() {
        let x = generate_dynamic_phantom(&small()).unwrap();
        assert_ne!(x.frame(1), x.frame(0));
    }

    #[test]
    fn periodic_in_time() {
        let cfg = small();
        let one = render_frames(&cfg, cfg.nt).unwrap();
        let two = render_frames(&cfg, 2 * cfg.nt).unwrap();
        for t in 0..2 * cfg.nt {
            for (a, b) in two.frame(t).iter().zip(one.frame(t % cfg.nt)) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_dynamic_phantom(&small()).unwrap();
        assert_eq!(a, generate_dynamic_phantom(&small()).unwrap());
        let b = generate_dynamic_phantom(&PhantomConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn temporal_mean_is_smoother_than_frames() {
        // Averaging over the cycle blurs the moving edges: the mean image
        // has less gradient energy than the average frame.
        let cfg = PhantomConfig::default();
        let x = generate_dynamic_phantom(&cfg).unwrap();
        let s = x.shape();
        let grad = |f: &dyn Fn(usize, usize) -> f64| {
            let mut e = 0.0;
            for y in 0..s.ny {
                for i in 0..s.nx - 1 {
                    e += (f(i + 1, y) - f(i, y)).powi(2);
                }
            }
            e
        };
        let mean = |i: usize, y: usize| (0..s.nt).map(|t| x.get(i, y, t).norm()).sum::<f64>() / s.nt as f64;
        let frames: f64 = (0..s.nt).map(|t| grad(&|i, y| x.get(i, y, t).norm())).sum::<f64>() / s.nt as f64;
        assert!(grad(&mean) < frames);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_dynamic_phantom(&PhantomConfig {
            contraction_amplitude: 0.6,
            ..small()
        })
        .is_err());
        assert!(generate_dynamic_phantom(&PhantomConfig { nx: 1, ..small() }).is_err());
        assert!(build_dataset(0, &small(), &MaskSpec::one_d_random(4.0), 0.0, 0).is_err());
    }

    /// The temporal difference filter (frame `t + 1` minus frame `t`) only
    /// responds where a moving ellipse covers a pixel in one of the two
    /// frames but not the other.
    #[test]
    fn temporal_tv_follows_moving_edges() {
        let cfg = PhantomConfig::default();
        let x = generate_dynamic_phantom(&cfg).unwrap();
        let s = x.shape();
        let bank = init_dct_tv(8, 3, 3).unwrap();
        let tv = &conv_apply(&bank, &x).unwrap()[8];
        let ellipses = moving_ellipses(&cfg);
        let (mut support, mut overlap) = (0usize, 0usize);
        for t in 0..s.nt {
            let next = (t + 1) % s.nt;
            for y in 0..s.ny {
                for i in 0..s.nx {
                    if tv.get(i, y, t).norm() <= 1e-12 {
                        continue;
                    }
                    support += 1;
                    let (u, v) = (pixel_coord(i, s.nx), pixel_coord(y, s.ny));
                    if ellipses.iter().any(|e| e.contains(u, v, t) != e.contains(u, v, next)) {
                        overlap += 1;
                    }
                }
            }
        }
        assert!(support > 0);
        assert!(overlap as f64 / support as f64 >= 0.9, "{overlap}/{support}");
    }

    #[test]
    fn dataset_is_reproducible_and_consistent() {
        let spec = MaskSpec::one_d_random(4.0);
        let a = build_dataset(3, &small(), &spec, 0.01, 7).unwrap();
        let b = build_dataset(3, &small(), &spec, 0.01, 7).unwrap();
        assert_eq!(a.len(), 3);
        for (p, q) in a.samples().iter().zip(b.samples()) {
            assert_eq!(p.truth, q.truth);
            assert_eq!(p.mask, q.mask);
            assert_eq!(p.kspace, q.kspace);
        }
        assert_ne!(a.samples()[0].truth, a.samples()[1].truth);
        for s in a.samples() {
            for (z, &m) in s.kspace.as_slice().iter().zip(s.mask.as_slice()) {
                if m == 0 {
                    assert_eq!(*z, Complex64::default());
                }
            }
        }
        let radial = MaskSpec {
            kind: PatternKind::Radial,
            accel: 4.0,
            center_lines: 0,
        };
        assert_eq!(build_dataset(1, &small(), &radial, 0.0, 1).unwrap().len(), 1);
    }

    #[test]
    fn full_scale_preset() {
        let cfg = PhantomConfig::full_scale();
        assert_eq!(cfg.shape(), Shape::new(126, 126, 16));
    }
}
