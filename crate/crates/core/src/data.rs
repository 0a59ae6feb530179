//! Complex spatiotemporal volumes and dataset containers.
//!
//! Every volume is stored frame-major: `t` varies slowest, then `y`, with `x`
//! fastest, so a single frame is one contiguous `nx * ny` slice.

use num_complex::Complex64;

use crate::error::{LanternError, Result};
use crate::sampling::SamplingMask;

/// Extents of a dynamic volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
}

impl Shape {
    pub fn new(nx: usize, ny: usize, nt: usize) -> Self {
        Shape { nx, ny, nt }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, t: usize) -> usize {
        x + self.nx * (y + self.ny * t)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || self.nt < 1 {
            return Err(LanternError::InvalidShape(format!(
                "{self} (need nx >= 2, ny >= 2, nt >= 1)"
            )));
        }
        Ok(())
    }

    pub(crate) fn ensure_eq(&self, other: &Shape) -> Result<()> {
        if self != other {
            return Err(LanternError::ShapeMismatch {
                expected: self.to_string(),
                actual: other.to_string(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nt)
    }
}

macro_rules! complex_volume {
    ($name:ident) => {
        impl $name {
            /// Validating constructor: checks extents, length and finiteness.
            pub fn new(shape: Shape, data: Vec<Complex64>) -> Result<Self> {
                shape.validate()?;
                if data.len() != shape.len() {
                    return Err(LanternError::ShapeMismatch {
                        expected: format!("{} elements", shape.len()),
                        actual: format!("{} elements", data.len()),
                    });
                }
                if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(LanternError::NonFinite(stringify!($name).into()));
                }
                Ok($name { shape, data })
            }

            pub fn zeros(shape: Shape) -> Self {
                $name {
                    shape,
                    data: vec![Complex64::new(0.0, 0.0); shape.len()],
                }
            }

            pub(crate) fn from_raw(shape: Shape, data: Vec<Complex64>) -> Self {
                debug_assert_eq!(shape.len(), data.len());
                $name { shape, data }
            }

            pub fn shape(&self) -> Shape {
                self.shape
            }

            pub fn as_slice(&self) -> &[Complex64] {
                &self.data
            }

            pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<Complex64> {
                self.data
            }

            pub fn frame(&self, t: usize) -> &[Complex64] {
                let n = self.shape.frame_len();
                &self.data[t * n..(t + 1) * n]
            }

            pub fn get(&self, x: usize, y: usize, t: usize) -> Complex64 {
                self.data[self.shape.index(x, y, t)]
            }

            /// Squared Euclidean norm over all voxels.
            pub fn norm_sqr(&self) -> f64 {
                self.data.iter().map(|z| z.norm_sqr()).sum()
            }

            pub fn norm(&self) -> f64 {
                self.norm_sqr().sqrt()
            }

            /// Complex inner product `<self, other> = sum conj(self) * other`.
            pub fn dot(&self, other: &Self) -> Complex64 {
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(a, b)| a.conj() * b)
                    .sum()
            }

            /// `Re <self, other>`, the inner product of the realified vectors.
            pub fn dot_re(&self, other: &Self) -> f64 {
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(a, b)| a.re * b.re + a.im * b.im)
                    .sum()
            }

            /// `self += alpha * other`
            pub fn axpy(&mut self, alpha: f64, other: &Self) {
                for (a, b) in self.data.iter_mut().zip(&other.data) {
                    *a += b * alpha;
                }
            }

            pub fn scaled(&self, alpha: f64) -> Self {
                $name::from_raw(self.shape, self.data.iter().map(|z| z * alpha).collect())
            }

            pub fn sub(&self, other: &Self) -> Self {
                $name::from_raw(
                    self.shape,
                    self.data
                        .iter()
                        .zip(&other.data)
                        .map(|(a, b)| a - b)
                        .collect(),
                )
            }

            pub fn add(&self, other: &Self) -> Self {
                $name::from_raw(
                    self.shape,
                    self.data
                        .iter()
                        .zip(&other.data)
                        .map(|(a, b)| a + b)
                        .collect(),
                )
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            }

            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max)
            }
        }
    };
}

/// A complex image sequence `x` of shape `(nx, ny, nt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicImage {
    shape: Shape,
    data: Vec<Complex64>,
}

/// Per-frame 2D Fourier coefficients, same layout as [`DynamicImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    shape: Shape,
    data: Vec<Complex64>,
}

complex_volume!(DynamicImage);
complex_volume!(KSpaceData);

impl DynamicImage {
    /// Magnitude image, same layout.
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// One training or test example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub kspace: KSpaceData,
    pub mask: SamplingMask,
    pub truth: DynamicImage,
}

/// A list of samples that all share one shape.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut ds = Dataset::default();
        for s in samples {
            ds.push(s)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        let shape = sample.truth.shape();
        shape.ensure_eq(&sample.kspace.shape())?;
        shape.ensure_eq(&sample.mask.shape())?;
        if let Some(first) = self.samples.first() {
            first.truth.shape().ensure_eq(&shape)?;
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn shape(&self) -> Option<Shape> {
        self.samples.first().map(|s| s.truth.shape())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let at = self.samples.len().saturating_sub(n);
        let tail = self.samples.split_off(at);
        (self, Dataset { samples: tail })
    }
}

impl FromIterator<Sample> for Dataset {
    /// Panics if the samples disagree on shape.
    fn from_iter<I: IntoIterator<Item = Sample>>(iter: I) -> Self {
        Dataset::new(iter.into_iter().collect()).expect("samples must share one shape")
    }
}
