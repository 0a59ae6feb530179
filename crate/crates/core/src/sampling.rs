//! k-space undersampling: mask generators, the acquisition operator `F_u`,
//! its adjoint, and the closed-form data-consistency (Recon) update.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DynamicImage, KSpaceData, Shape};
use crate::error::{LanternError, Result};
use crate::fourier::{bin_of_frequency, Fourier2d};
use crate::probe;

/// Tolerance on the achieved net acceleration of generated masks.
pub const ACCEL_TOLERANCE: f64 = 0.10;

/// Radial spokes advance by this angle from one frame to the next.
pub const GOLDEN_ANGLE: f64 = std::f64::consts::PI * 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternKind {
    #[serde(rename = "1drandom")]
    OneDRandom,
    #[serde(rename = "radial")]
    Radial,
    #[serde(rename = "full")]
    Full,
}

impl PatternKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::OneDRandom => "1drandom",
            PatternKind::Radial => "radial",
            PatternKind::Full => "full",
        }
    }
}

impl std::fmt::Display for PatternKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PatternKind {
    type Err = LanternError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1drandom" => Ok(PatternKind::OneDRandom),
            "radial" => Ok(PatternKind::Radial),
            "full" => Ok(PatternKind::Full),
            other => Err(LanternError::InvalidParameter(format!(
                "unknown sampling pattern {other:?} (expected 1drandom, radial or full)"
            ))),
        }
    }
}

/// Binary k-space selection `P`, one 2D mask per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    shape: Shape,
    data: Vec<u8>,
    kind: PatternKind,
    target_accel: f64,
}

impl SamplingMask {
    pub fn full(shape: Shape) -> Self {
        SamplingMask {
            shape,
            data: vec![1; shape.len()],
            kind: PatternKind::Full,
            target_accel: 1.0,
        }
    }

    /// Builds a mask from raw entries, which must all be 0 or 1.
    pub fn from_parts(
        shape: Shape,
        data: Vec<u8>,
        kind: PatternKind,
        target_accel: f64,
    ) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(LanternError::ShapeMismatch {
                expected: format!("{} entries", shape.len()),
                actual: format!("{} entries", data.len()),
            });
        }
        if data.iter().any(|&m| m > 1) {
            return Err(LanternError::InvalidParameter(
                "mask entries must be 0 or 1".into(),
            ));
        }
        Ok(SamplingMask {
            shape,
            data,
            kind,
            target_accel,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn target_accel(&self) -> f64 {
        self.target_accel
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.shape.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn is_sampled(&self, x: usize, y: usize, t: usize) -> bool {
        self.data[self.shape.index(x, y, t)] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&m| m as usize).sum()
    }

    /// Total grid points divided by acquired points.
    pub fn net_acceleration(&self) -> f64 {
        self.shape.len() as f64 / self.count_ones().max(1) as f64
    }

    /// Copy with entry `i` forced to `value`.
    pub fn with_entry(&self, i: usize, value: bool) -> Self {
        let mut m = self.clone();
        m.data[i] = value as u8;
        m
    }

    fn check_accel(&self) -> Result<()> {
        if self.count_ones() == 0 {
            return Err(LanternError::Mask("mask selects no samples".into()));
        }
        let rel = (self.net_acceleration() - self.target_accel).abs() / self.target_accel;
        if rel > ACCEL_TOLERANCE {
            return Err(LanternError::Mask(format!(
                "achieved net acceleration {:.3} is not within {:.0}% of {} on a {} grid",
                self.net_acceleration(),
                ACCEL_TOLERANCE * 100.0,
                self.target_accel,
                self.shape
            )));
        }
        Ok(())
    }
}

fn check_accel_param(accel: f64) -> Result<()> {
    if !accel.is_finite() || accel < 1.0 {
        return Err(LanternError::InvalidParameter(format!(
            "acceleration must be >= 1, got {accel}"
        )));
    }
    Ok(())
}

/// Cartesian mask of whole phase-encode lines (`y` rows), redrawn per frame.
///
/// The `center_lines` lowest frequencies are always acquired. The remaining
/// line budget is drawn uniformly without replacement. The total budget over
/// all frames is `round(ny * nt / accel)`, spread as evenly as possible
/// (frames receiving the remainder are chosen at random).
pub fn make_mask_1d_random(
    shape: Shape,
    accel: f64,
    center_lines: usize,
    seed: u64,
) -> Result<SamplingMask> {
    shape.validate()?;
    check_accel_param(accel)?;
    let (nx, ny, nt) = (shape.nx, shape.ny, shape.nt);
    if center_lines > ny {
        return Err(LanternError::Mask(format!(
            "{center_lines} center lines exceed {ny} phase-encode lines"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let total = ((ny * nt) as f64 / accel).round() as usize;
    let base = total / nt;
    let extra = total % nt;
    let mut budgets = vec![base; nt];
    let mut frames: Vec<usize> = (0..nt).collect();
    frames.shuffle(&mut rng);
    for &t in &frames[..extra] {
        budgets[t] += 1;
    }
    if base < center_lines || base == 0 {
        return Err(LanternError::Mask(format!(
            "acceleration {accel} leaves {base} lines per frame, fewer than {} required",
            center_lines.max(1)
        )));
    }

    let lo = -(center_lines as i64 / 2);
    let center: Vec<usize> = (0..center_lines as i64)
        .map(|i| bin_of_frequency(lo + i, ny))
        .collect();
    let mut outer: Vec<usize> = (0..ny).filter(|j| !center.contains(j)).collect();

    let mut data = vec![0u8; shape.len()];
    for (t, &budget) in budgets.iter().enumerate() {
        let (chosen, _) = outer.partial_shuffle(&mut rng, budget - center_lines);
        for &line in center.iter().chain(chosen.iter()) {
            let start = shape.index(0, line, t);
            data[start..start + nx].fill(1);
        }
    }

    let mask = SamplingMask {
        shape,
        data,
        kind: if accel == 1.0 {
            PatternKind::Full
        } else {
            PatternKind::OneDRandom
        },
        target_accel: accel,
    };
    mask.check_accel()?;
    Ok(mask)
}

fn rasterize_radial(shape: Shape, spokes: usize, offset: f64) -> Vec<u8> {
    let (nx, ny) = (shape.nx, shape.ny);
    let (cx, cy) = ((nx / 2) as f64, (ny / 2) as f64);
    let reach = 0.5 * ((nx * nx + ny * ny) as f64).sqrt() + 1.0;
    let steps = (2.0 * reach).ceil() as i64;
    let mut data = vec![0u8; shape.len()];
    for t in 0..shape.nt {
        for s in 0..spokes {
            let theta = offset + t as f64 * GOLDEN_ANGLE + s as f64 * std::f64::consts::PI / spokes as f64;
            let (sn, cs) = theta.sin_cos();
            for i in -steps..=steps {
                let r = 0.5 * i as f64;
                let px = (cx + r * cs).round();
                let py = (cy + r * sn).round();
                if px < 0.0 || py < 0.0 || px >= nx as f64 || py >= ny as f64 {
                    continue;
                }
                let kx = bin_of_frequency(px as i64 - nx as i64 / 2, nx);
                let ky = bin_of_frequency(py as i64 - ny as i64 / 2, ny);
                data[shape.index(kx, ky, t)] = 1;
            }
        }
    }
    data
}

/// Radial mask: `S` equiangular spokes through the k-space centre per frame,
/// rotated by the golden angle between frames and rasterized to the nearest
/// Cartesian grid point. `S` is chosen by bisection on coverage.
pub fn make_mask_radial(shape: Shape, accel: f64, seed: u64) -> Result<SamplingMask> {
    shape.validate()?;
    check_accel_param(accel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0.0..std::f64::consts::PI);
    let target = shape.len() as f64 / accel;
    let ones = |s: usize| -> usize {
        rasterize_radial(shape, s, offset)
            .iter()
            .map(|&m| m as usize)
            .sum()
    };

    let diag = ((shape.nx * shape.nx + shape.ny * shape.ny) as f64).sqrt();
    let (mut lo, mut hi) = (1usize, (std::f64::consts::PI * diag).ceil() as usize + 4);
    if (ones(hi) as f64) < target {
        lo = hi;
    }
    // smallest spoke count whose coverage reaches the target
    while lo < hi {
        let mid = (lo + hi) / 2;
        if (ones(mid) as f64) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut best = lo;
    if lo > 1 {
        let below = lo - 1;
        if (ones(below) as f64 - target).abs() < (ones(lo) as f64 - target).abs() {
            best = below;
        }
    }

    let mask = SamplingMask {
        shape,
        data: rasterize_radial(shape, best, offset),
        kind: PatternKind::Radial,
        target_accel: accel,
    };
    mask.check_accel()?;
    Ok(mask)
}

/// `F_u x`: orthonormal per-frame DFT followed by the mask projection.
pub fn apply_fu(x: &DynamicImage, mask: &SamplingMask) -> Result<KSpaceData> {
    forward_undersample(x, mask, 0.0, 0)
}

/// `F_u^H y`: zero-fill and inverse-transform each frame.
pub fn apply_fu_adjoint(y: &KSpaceData, mask: &SamplingMask) -> Result<DynamicImage> {
    y.shape().ensure_eq(&mask.shape())?;
    let shape = y.shape();
    let mut data: Vec<Complex64> = y
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(z, &m)| if m == 1 { *z } else { Complex64::default() })
        .collect();
    Fourier2d::plan(shape.nx, shape.ny).inverse(&mut data);
    Ok(DynamicImage::from_raw(shape, data))
}

/// Simulated acquisition `y = P (F x + eta)` with complex Gaussian noise of
/// per-component standard deviation `noise_sigma`.
pub fn forward_undersample(
    x: &DynamicImage,
    mask: &SamplingMask,
    noise_sigma: f64,
    seed: u64,
) -> Result<KSpaceData> {
    x.shape().ensure_eq(&mask.shape())?;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(LanternError::InvalidParameter(format!(
            "noise sigma must be a finite non-negative number, got {noise_sigma}"
        )));
    }
    let shape = x.shape();
    let mut data = x.as_slice().to_vec();
    Fourier2d::plan(shape.nx, shape.ny).forward(&mut data);
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        for z in data.iter_mut() {
            *z += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    for (z, &m) in data.iter_mut().zip(mask.as_slice()) {
        if m == 0 {
            *z = Complex64::default();
        }
    }
    Ok(KSpaceData::from_raw(shape, data))
}

/// Zero-filled reconstruction `F^H P^H y`.
pub fn zero_filled_recon(y: &KSpaceData, mask: &SamplingMask) -> Result<DynamicImage> {
    apply_fu_adjoint(y, mask)
}

/// k-space quantities of one Recon evaluation, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ReconSpectra {
    /// `P^H y + rho F(v - beta)`
    pub rhs: Vec<Complex64>,
    /// `F(v - beta)`
    pub diff: Vec<Complex64>,
}

pub(crate) fn recon_forward(
    y: &KSpaceData,
    v: &DynamicImage,
    beta: &DynamicImage,
    rho: f64,
    mask: &SamplingMask,
) -> (DynamicImage, ReconSpectra) {
    probe::tick();
    let shape = y.shape();
    let fft = Fourier2d::plan(shape.nx, shape.ny);
    let mut diff: Vec<Complex64> = v
        .as_slice()
        .iter()
        .zip(beta.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    fft.forward(&mut diff);
    let mut rhs = Vec::with_capacity(diff.len());
    let mut xk = Vec::with_capacity(diff.len());
    for ((d, yk), &m) in diff.iter().zip(y.as_slice()).zip(mask.as_slice()) {
        let sampled = m == 1;
        let z = if sampled { *yk } else { Complex64::default() } + d * rho;
        rhs.push(z);
        xk.push(z / (if sampled { 1.0 } else { 0.0 } + rho));
    }
    fft.inverse(&mut xk);
    (DynamicImage::from_raw(shape, xk), ReconSpectra { rhs, diff })
}

/// Exact minimizer of `1/2 |F_u x - y|^2 + rho/2 |x + beta - v|^2`:
/// `x = F^H (P^H P + rho I)^-1 [P^H y + rho F (v - beta)]`.
pub fn recon_x_update(
    y: &KSpaceData,
    v: &DynamicImage,
    beta: &DynamicImage,
    rho: f64,
    mask: &SamplingMask,
) -> Result<DynamicImage> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(LanternError::InvalidParameter(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let shape = y.shape();
    shape.ensure_eq(&mask.shape())?;
    shape.ensure_eq(&v.shape())?;
    shape.ensure_eq(&beta.shape())?;
    Ok(recon_forward(y, v, beta, rho, mask).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(shape: Shape, seed: u64) -> DynamicImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        DynamicImage::new(shape, data).unwrap()
    }

    fn random_mask(shape: Shape, seed: u64) -> SamplingMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| rng.gen_bool(0.4) as u8).collect();
        SamplingMask::from_parts(shape, data, PatternKind::OneDRandom, 2.5).unwrap()
    }

    #[test]
    fn one_d_random_accel_one_is_full() {
        let m = make_mask_1d_random(Shape::new(16, 16, 3), 1.0, 4, 0).unwrap();
        assert_eq!(m.count_ones(), 16 * 16 * 3);
    }

    #[test]
    fn one_d_random_line_counts() {
        let shape = Shape::new(64, 64, 8);
        let m = make_mask_1d_random(shape, 4.0, 4, 7).unwrap();
        for t in 0..8 {
            let lines: Vec<usize> = (0..64).filter(|&y| m.is_sampled(0, y, t)).collect();
            assert_eq!(lines.len(), 16);
            for c in [62, 63, 0, 1] {
                assert!(lines.contains(&c), "center line {c} missing in frame {t}");
            }
            // whole lines along the readout axis
            for &y in &lines {
                assert!((0..64).all(|x| m.is_sampled(x, y, t)));
            }
        }
        assert_eq!(m.net_acceleration(), 4.0);
    }

    #[test]
    fn one_d_random_is_redrawn_per_frame() {
        let m = make_mask_1d_random(Shape::new(32, 32, 4), 4.0, 2, 3).unwrap();
        assert_ne!(m.frame(0), m.frame(1));
    }

    #[test]
    fn one_d_random_eleven_x() {
        let m = make_mask_1d_random(Shape::new(126, 126, 16), 11.0, 4, 1).unwrap();
        let frac = m.count_ones() as f64 / (126.0 * 126.0 * 16.0);
        assert!((frac * 11.0 - 1.0).abs() < 0.05, "fraction {frac}");
    }

    #[test]
    fn one_d_random_budget_below_center_fails() {
        let err = make_mask_1d_random(Shape::new(16, 16, 2), 8.0, 4, 0).unwrap_err();
        assert!(matches!(err, LanternError::Mask(_)));
        assert!(make_mask_1d_random(Shape::new(16, 16, 2), 0.5, 4, 0).is_err());
    }

    #[test]
    fn radial_dense_and_dc() {
        let m = make_mask_radial(Shape::new(32, 32, 4), 1.0, 5).unwrap();
        assert!(m.count_ones() as f64 >= 0.9 * (32 * 32 * 4) as f64);
        for t in 0..4 {
            assert!(m.is_sampled(0, 0, t));
        }
        let m = make_mask_radial(Shape::new(32, 32, 4), 6.0, 5).unwrap();
        for t in 0..4 {
            assert!(m.is_sampled(0, 0, t));
        }
    }

    #[test]
    fn radial_eight_x_per_frame_counts() {
        let m = make_mask_radial(Shape::new(64, 64, 8), 8.0, 3).unwrap();
        let target = 64.0 * 64.0 / 8.0;
        for t in 0..8 {
            let ones = m.frame(t).iter().filter(|&&v| v == 1).count() as f64;
            assert!((ones - target).abs() <= 0.1 * target, "frame {t}: {ones}");
        }
    }

    #[test]
    fn radial_fifteen_x_full_grid() {
        let m = make_mask_radial(Shape::new(126, 126, 16), 15.0, 0).unwrap();
        assert!((m.net_acceleration() - 15.0).abs() <= 1.5);
    }

    #[test]
    fn radial_too_small_grid_fails() {
        assert!(matches!(
            make_mask_radial(Shape::new(4, 4, 1), 15.0, 0),
            Err(LanternError::Mask(_))
        ));
    }

    #[test]
    fn masks_are_deterministic() {
        let s = Shape::new(24, 24, 3);
        assert_eq!(
            make_mask_1d_random(s, 3.0, 2, 9).unwrap(),
            make_mask_1d_random(s, 3.0, 2, 9).unwrap()
        );
        assert_eq!(make_mask_radial(s, 3.0, 9).unwrap(), make_mask_radial(s, 3.0, 9).unwrap());
    }

    #[test]
    fn full_mask_round_trip() {
        let shape = Shape::new(8, 6, 3);
        let x = random_image(shape, 1);
        let mask = SamplingMask::full(shape);
        let y = forward_undersample(&x, &mask, 0.0, 0).unwrap();
        let back = zero_filled_recon(&y, &mask).unwrap();
        assert!(back.sub(&x).norm() <= 1e-12 * x.norm());
    }

    #[test]
    fn zeroed_line_is_zero_in_y() {
        let shape = Shape::new(8, 8, 2);
        let x = random_image(shape, 2);
        let mut data = vec![1u8; shape.len()];
        for xk in 0..8 {
            data[shape.index(xk, 3, 1)] = 0;
        }
        let mask = SamplingMask::from_parts(shape, data, PatternKind::OneDRandom, 1.0).unwrap();
        let y = forward_undersample(&x, &mask, 0.5, 4).unwrap();
        for xk in 0..8 {
            assert_eq!(y.get(xk, 3, 1), Complex64::default());
        }
        assert_ne!(y.get(0, 3, 0), Complex64::default());
    }

    #[test]
    fn projection_does_not_add_energy() {
        let shape = Shape::new(10, 8, 3);
        let x = random_image(shape, 3);
        let y = apply_fu(&x, &random_mask(shape, 4)).unwrap();
        assert!(y.norm_sqr() <= x.norm_sqr());
    }

    #[test]
    fn zero_data_gives_zero_image() {
        let shape = Shape::new(6, 6, 2);
        let x = zero_filled_recon(&KSpaceData::zeros(shape), &random_mask(shape, 1)).unwrap();
        assert_eq!(x.norm(), 0.0);
    }

    #[test]
    fn fu_adjoint_identity() {
        let shape = Shape::new(9, 7, 3);
        let mask = random_mask(shape, 5);
        let a = random_image(shape, 6);
        let b_img = random_image(shape, 7);
        let b = KSpaceData::new(shape, b_img.as_slice().to_vec()).unwrap();
        let lhs = apply_fu(&a, &mask).unwrap().dot(&b);
        let rhs = a.dot(&apply_fu_adjoint(&b, &mask).unwrap());
        assert!((lhs - rhs).norm() <= 1e-12 * lhs.norm());
    }

    #[test]
    fn recon_full_mask_zero_prior() {
        let shape = Shape::new(6, 6, 2);
        let x = random_image(shape, 8);
        let mask = SamplingMask::full(shape);
        let y = apply_fu(&x, &mask).unwrap();
        let zero = DynamicImage::zeros(shape);
        let rho = 0.7;
        let out = recon_x_update(&y, &zero, &zero, rho, &mask).unwrap();
        assert!(out.sub(&x.scaled(1.0 / (1.0 + rho))).norm() < 1e-12);
        // fixed point: v = x, beta = 0
        let out = recon_x_update(&y, &x, &zero, rho, &mask).unwrap();
        assert!(out.sub(&x).norm() < 1e-12);
    }

    #[test]
    fn recon_normal_equations() {
        let shape = Shape::new(8, 8, 2);
        let mask = random_mask(shape, 10);
        let y = apply_fu(&random_image(shape, 11), &mask).unwrap();
        let v = random_image(shape, 12);
        let beta = random_image(shape, 13);
        let rho = 0.3;
        let x = recon_x_update(&y, &v, &beta, rho, &mask).unwrap();
        // (F_u^H F_u + rho I) x  vs  F_u^H y + rho (v - beta)
        let mut lhs = apply_fu_adjoint(&apply_fu(&x, &mask).unwrap(), &mask).unwrap();
        lhs.axpy(rho, &x);
        let mut rhs = apply_fu_adjoint(&y, &mask).unwrap();
        rhs.axpy(rho, &v.sub(&beta));
        assert!(lhs.sub(&rhs).norm() / rhs.norm() < 1e-10);
    }

    #[test]
    fn recon_minimizes_subproblem() {
        let shape = Shape::new(8, 8, 2);
        let mask = random_mask(shape, 20);
        let y = apply_fu(&random_image(shape, 21), &mask).unwrap();
        let v = random_image(shape, 22);
        let beta = random_image(shape, 23);
        let rho = 0.2;
        let objective = |x: &DynamicImage| {
            let r = apply_fu(x, &mask).unwrap().sub(&y);
            0.5 * r.norm_sqr() + 0.5 * rho * x.add(&beta).sub(&v).norm_sqr()
        };
        let x = recon_x_update(&y, &v, &beta, rho, &mask).unwrap();
        let best = objective(&x);
        for seed in 0..5 {
            let mut p = x.clone();
            p.axpy(1e-3, &random_image(shape, 100 + seed));
            assert!(objective(&p) > best);
        }
    }

    #[test]
    fn recon_rejects_bad_rho() {
        let shape = Shape::new(4, 4, 1);
        let z = DynamicImage::zeros(shape);
        let y = KSpaceData::zeros(shape);
        assert!(recon_x_update(&y, &z, &z, 0.0, &SamplingMask::full(shape)).is_err());
    }
}
