//! Learnable analysis filter banks and their circular convolutions.
//!
//! Kernels are real and act on the real and imaginary channels of an image
//! independently. Convolution is periodic in all three axes; a kernel of
//! extent `k` along an axis is centred at tap `k / 2`, so the temporal
//! difference kernel `[+1, -1]` (extent 2) yields `v[t + 1] - v[t]`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{DynamicImage, Shape};
use crate::error::{LanternError, Result};
use crate::probe;

/// One feature map per filter.
pub type FeatureStack = Vec<DynamicImage>;

/// Nominal `lambda * l_r` used to scale Conv2 at initialization.
pub const DEFAULT_CONV2_SCALE: f64 = 0.018;

/// A real 3D kernel, taps stored `kx` fastest then `ky` then `kt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub kx: usize,
    pub ky: usize,
    pub kt: usize,
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn new(kx: usize, ky: usize, kt: usize, taps: Vec<f64>) -> Result<Self> {
        if kx == 0 || ky == 0 || kt == 0 || taps.len() != kx * ky * kt {
            return Err(LanternError::InvalidParameter(format!(
                "kernel {kx}x{ky}x{kt} with {} taps",
                taps.len()
            )));
        }
        if taps.iter().any(|w| !w.is_finite()) {
            return Err(LanternError::NonFinite("kernel taps".into()));
        }
        Ok(Kernel { kx, ky, kt, taps })
    }

    pub fn zeros(kx: usize, ky: usize, kt: usize) -> Self {
        Kernel {
            kx,
            ky,
            kt,
            taps: vec![0.0; kx * ky * kt],
        }
    }

    /// Single unit tap at the centre.
    pub fn identity(kx: usize, ky: usize, kt: usize) -> Self {
        let mut k = Kernel::zeros(kx, ky, kt);
        let c = k.tap_index(kx / 2, ky / 2, kt / 2);
        k.taps[c] = 1.0;
        k
    }

    #[inline]
    pub fn tap_index(&self, a: usize, b: usize, c: usize) -> usize {
        a + self.kx * (b + self.ky * c)
    }

    /// Kernel whose convolution equals correlation with `self`. Even extents
    /// grow by one tap so the reflected support stays centred.
    pub fn adjoint(&self) -> Kernel {
        self.adjoint_periodic([usize::MAX; 3])
    }

    /// Like [`Kernel::adjoint`], but an axis whose grown extent would exceed
    /// the image extent `dims` keeps its size and wraps periodically instead.
    pub fn adjoint_periodic(&self, dims: [usize; 3]) -> Kernel {
        let ext = [self.kx, self.ky, self.kt];
        let mut grown = [0; 3];
        for i in 0..3 {
            grown[i] = if ext[i] % 2 == 0 && ext[i] < dims[i] { ext[i] + 1 } else { ext[i] };
        }
        let mut out = Kernel::zeros(grown[0], grown[1], grown[2]);
        for (w, shift) in self.shifts() {
            let mut idx = [0usize; 3];
            for i in 0..3 {
                let c = (grown[i] / 2) as isize;
                idx[i] = (c - shift[i]).rem_euclid(grown[i] as isize) as usize;
            }
            let i = out.tap_index(idx[0], idx[1], idx[2]);
            out.taps[i] += w;
        }
        out
    }

    pub fn frobenius_dot(&self, other: &Kernel) -> f64 {
        self.taps.iter().zip(&other.taps).map(|(a, b)| a * b).sum()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.kx, self.ky, self.kt]
    }

    /// `(tap, shift)` pairs with shift relative to the kernel centre.
    fn shifts(&self) -> impl Iterator<Item = (f64, [isize; 3])> + '_ {
        let (cx, cy, ct) = ((self.kx / 2) as isize, (self.ky / 2) as isize, (self.kt / 2) as isize);
        (0..self.kt).flat_map(move |c| {
            (0..self.ky).flat_map(move |b| {
                (0..self.kx).map(move |a| {
                    (
                        self.taps[self.tap_index(a, b, c)],
                        [a as isize - cx, b as isize - cy, c as isize - ct],
                    )
                })
            })
        })
    }
}

/// `L` kernels with one real bias each.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub kernels: Vec<Kernel>,
    pub biases: Vec<f64>,
}

impl FilterBank {
    pub fn new(kernels: Vec<Kernel>, biases: Vec<f64>) -> Result<Self> {
        if kernels.is_empty() || kernels.len() != biases.len() {
            return Err(LanternError::InvalidParameter(format!(
                "filter bank with {} kernels and {} biases",
                kernels.len(),
                biases.len()
            )));
        }
        Ok(FilterBank { kernels, biases })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Same shapes, every tap and bias zero.
    pub fn zeros_like(&self) -> FilterBank {
        FilterBank {
            kernels: self
                .kernels
                .iter()
                .map(|k| Kernel::zeros(k.kx, k.ky, k.kt))
                .collect(),
            biases: vec![0.0; self.biases.len()],
        }
    }

    /// Conv2 initializer: adjoint kernels scaled by `scale`, zero biases.
    pub fn adjoint_init(&self, scale: f64, shape: Shape) -> FilterBank {
        FilterBank {
            kernels: self
                .kernels
                .iter()
                .map(|k| {
                    let mut f = k.adjoint_periodic([shape.nx, shape.ny, shape.nt]);
                    f.taps.iter_mut().for_each(|w| *w *= scale);
                    f
                })
                .collect(),
            biases: vec![0.0; self.biases.len()],
        }
    }

    pub(crate) fn check_fits(&self, shape: Shape) -> Result<()> {
        for k in &self.kernels {
            if k.kx > shape.nx || k.ky > shape.ny || k.kt > shape.nt {
                return Err(LanternError::ShapeMismatch {
                    expected: format!("kernel no larger than {shape}"),
                    actual: format!("{}x{}x{}", k.kx, k.ky, k.kt),
                });
            }
        }
        Ok(())
    }
}

/// 2D DCT-II atom `(u, v)` on a `kx x ky` grid, unit Frobenius norm.
fn dct_atom(u: usize, v: usize, kx: usize, ky: usize) -> Kernel {
    let mut taps = Vec::with_capacity(kx * ky);
    for b in 0..ky {
        for a in 0..kx {
            let cu = (std::f64::consts::PI * (2 * a + 1) as f64 * u as f64 / (2 * kx) as f64).cos();
            let cv = (std::f64::consts::PI * (2 * b + 1) as f64 * v as f64 / (2 * ky) as f64).cos();
            taps.push(cu * cv);
        }
    }
    let norm = taps.iter().map(|w| w * w).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|w| *w /= norm);
    Kernel {
        kx,
        ky,
        kt: 1,
        taps,
    }
}

/// The first `l_spatial` non-DC DCT-II atoms, in `(u, v)` raster order.
pub fn init_dct_only(l_spatial: usize, kx: usize, ky: usize) -> Result<FilterBank> {
    if l_spatial == 0 || l_spatial + 1 > kx * ky {
        return Err(LanternError::InvalidParameter(format!(
            "a {kx}x{ky} DCT has {} non-DC atoms, {l_spatial} requested",
            (kx * ky).saturating_sub(1)
        )));
    }
    let kernels: Vec<Kernel> = (0..ky)
        .flat_map(|v| (0..kx).map(move |u| (u, v)))
        .filter(|&(u, v)| (u, v) != (0, 0))
        .take(l_spatial)
        .map(|(u, v)| dct_atom(u, v, kx, ky))
        .collect();
    let biases = vec![0.0; kernels.len()];
    FilterBank::new(kernels, biases)
}

/// Spatial DCT atoms followed by the temporal difference kernel `[+1, -1]`.
pub fn init_dct_tv(l_spatial: usize, kx: usize, ky: usize) -> Result<FilterBank> {
    let mut bank = init_dct_only(l_spatial, kx, ky)?;
    bank.kernels.push(Kernel {
        kx: 1,
        ky: 1,
        kt: 2,
        taps: vec![1.0, -1.0],
    });
    bank.biases.push(0.0);
    Ok(bank)
}

/// `l` kernels of i.i.d. `N(0, sigma^2)` taps.
pub fn init_random_gaussian(
    l: usize,
    kx: usize,
    ky: usize,
    kt: usize,
    sigma: f64,
    seed: u64,
) -> Result<FilterBank> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(LanternError::InvalidParameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if l == 0 || kx == 0 || ky == 0 || kt == 0 {
        return Err(LanternError::InvalidParameter("empty filter bank".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let kernels = (0..l)
        .map(|_| Kernel {
            kx,
            ky,
            kt,
            taps: (0..kx * ky * kt).map(|_| normal.sample(&mut rng)).collect(),
        })
        .collect();
    FilterBank::new(kernels, vec![0.0; l])
}

/// `dst[i] += w * src[i - shift]` with periodic indexing.
fn shifted_axpy(dst: &mut [Complex64], src: &[Complex64], w: f64, shift: [isize; 3], shape: Shape) {
    let (nx, ny, nt) = (shape.nx, shape.ny, shape.nt);
    let dx = shift[0].rem_euclid(nx as isize) as usize;
    let dy = shift[1].rem_euclid(ny as isize) as usize;
    let dt = shift[2].rem_euclid(nt as isize) as usize;
    for t in 0..nt {
        let st = (t + nt - dt) % nt;
        for y in 0..ny {
            let sy = (y + ny - dy) % ny;
            let d = &mut dst[nx * (y + ny * t)..nx * (y + ny * t + 1)];
            let s = &src[nx * (sy + ny * st)..nx * (sy + ny * st + 1)];
            for (o, i) in d[dx..].iter_mut().zip(&s[..nx - dx]) {
                *o += i * w;
            }
            for (o, i) in d[..dx].iter_mut().zip(&s[nx - dx..]) {
                *o += i * w;
            }
        }
    }
}

/// `sum_i Re(conj(g[i]) * src[i - shift])` with periodic indexing.
fn shifted_dot_re(g: &[Complex64], src: &[Complex64], shift: [isize; 3], shape: Shape) -> f64 {
    let (nx, ny, nt) = (shape.nx, shape.ny, shape.nt);
    let dx = shift[0].rem_euclid(nx as isize) as usize;
    let dy = shift[1].rem_euclid(ny as isize) as usize;
    let dt = shift[2].rem_euclid(nt as isize) as usize;
    let mut acc = 0.0;
    for t in 0..nt {
        let st = (t + nt - dt) % nt;
        for y in 0..ny {
            let sy = (y + ny - dy) % ny;
            let d = &g[nx * (y + ny * t)..nx * (y + ny * t + 1)];
            let s = &src[nx * (sy + ny * st)..nx * (sy + ny * st + 1)];
            for (o, i) in d[dx..].iter().zip(&s[..nx - dx]) {
                acc += o.re * i.re + o.im * i.im;
            }
            for (o, i) in d[..dx].iter().zip(&s[nx - dx..]) {
                acc += o.re * i.re + o.im * i.im;
            }
        }
    }
    acc
}

fn neg(s: [isize; 3]) -> [isize; 3] {
    [-s[0], -s[1], -s[2]]
}

/// `out += kernel (*) src` (circular convolution).
pub(crate) fn convolve_into(out: &mut [Complex64], src: &[Complex64], kernel: &Kernel, shape: Shape) {
    for (w, s) in kernel.shifts() {
        if w != 0.0 {
            shifted_axpy(out, src, w, s, shape);
        }
    }
}

/// `out += kernel (x) src` (circular correlation, adjoint of convolution).
pub(crate) fn correlate_into(out: &mut [Complex64], src: &[Complex64], kernel: &Kernel, shape: Shape) {
    for (w, s) in kernel.shifts() {
        if w != 0.0 {
            shifted_axpy(out, src, w, neg(s), shape);
        }
    }
}

/// Gradient of `Re <g, kernel (*) src>` with respect to each tap.
pub(crate) fn kernel_gradient(g: &[Complex64], src: &[Complex64], kernel: &Kernel, shape: Shape) -> Vec<f64> {
    kernel
        .shifts()
        .map(|(_, s)| shifted_dot_re(g, src, s, shape))
        .collect()
}

fn add_bias(data: &mut [Complex64], b: f64) {
    if b != 0.0 {
        data.iter_mut().for_each(|z| z.re += b);
    }
}

/// Conv1: `C_l = w_l (*) v + b_l` for every filter, bias on the real channel.
pub fn conv_apply(bank: &FilterBank, v: &DynamicImage) -> Result<FeatureStack> {
    let shape = v.shape();
    bank.check_fits(shape)?;
    probe::tick();
    Ok(bank
        .kernels
        .iter()
        .zip(&bank.biases)
        .map(|(k, &b)| {
            let mut out = vec![Complex64::default(); shape.len()];
            convolve_into(&mut out, v.as_slice(), k, shape);
            add_bias(&mut out, b);
            DynamicImage::from_raw(shape, out)
        })
        .collect())
}

/// Adjoint of bias-free [`conv_apply`]: `sum_l w_l (x) u_l`.
pub fn conv_adjoint(bank: &FilterBank, features: &[DynamicImage]) -> Result<DynamicImage> {
    check_stack(bank, features)?;
    let shape = features[0].shape();
    let mut out = vec![Complex64::default(); shape.len()];
    for (k, f) in bank.kernels.iter().zip(features) {
        correlate_into(&mut out, f.as_slice(), k, shape);
    }
    Ok(DynamicImage::from_raw(shape, out))
}

/// Conv2: `sum_l (w_l (*) h_l + b_l)`.
pub fn conv_combine(bank: &FilterBank, features: &[DynamicImage]) -> Result<DynamicImage> {
    check_stack(bank, features)?;
    probe::tick();
    let shape = features[0].shape();
    let mut out = vec![Complex64::default(); shape.len()];
    for (k, f) in bank.kernels.iter().zip(features) {
        convolve_into(&mut out, f.as_slice(), k, shape);
    }
    add_bias(&mut out, bank.biases.iter().sum());
    Ok(DynamicImage::from_raw(shape, out))
}

/// Adjoint of bias-free [`conv_combine`]: `u_l = w_l (x) g`.
pub fn conv_combine_adjoint(bank: &FilterBank, g: &DynamicImage) -> Result<FeatureStack> {
    let shape = g.shape();
    bank.check_fits(shape)?;
    Ok(bank
        .kernels
        .iter()
        .map(|k| {
            let mut out = vec![Complex64::default(); shape.len()];
            correlate_into(&mut out, g.as_slice(), k, shape);
            DynamicImage::from_raw(shape, out)
        })
        .collect())
}

fn check_stack(bank: &FilterBank, features: &[DynamicImage]) -> Result<()> {
    if features.len() != bank.len() {
        return Err(LanternError::ShapeMismatch {
            expected: format!("{} feature maps", bank.len()),
            actual: format!("{} feature maps", features.len()),
        });
    }
    let shape = features[0].shape();
    for f in features {
        shape.ensure_eq(&f.shape())?;
    }
    bank.check_fits(shape)
}
