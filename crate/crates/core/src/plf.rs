//! Learnable piecewise-linear pointwise nonlinearity.
//!
//! Knot positions `p` are fixed; the values `q` at the knots are learned.
//! Inputs outside `[p_0, p_last]` are extrapolated along the end segments.

use crate::error::{LanternError, Result};

pub const DEFAULT_CONTROL_POINTS: usize = 101;
pub const DEFAULT_RANGE: (f64, f64) = (-1.0, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    positions: Vec<f64>,
    pub values: Vec<f64>,
    uniform: Option<(f64, f64)>,
}

/// Where an input lands: segment `seg` spans knots `seg` and `seg + 1`, and
/// `frac` is the (possibly out-of-range) position inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Locus {
    pub seg: usize,
    pub frac: f64,
}

impl Locus {
    /// Interpolation weights of knots `seg` and `seg + 1`.
    pub fn weights(&self) -> (f64, f64) {
        (1.0 - self.frac, self.frac)
    }
}

/// Output of [`PiecewiseLinear::eval_and_grads`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlfEval {
    pub values: Vec<f64>,
    /// Slope of the active segment for each input.
    pub d_input: Vec<f64>,
    /// `d value / d q` has two nonzeros per input, given by these loci.
    pub d_values: Vec<Locus>,
}

impl PiecewiseLinear {
    pub fn new(positions: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if positions.len() < 2 || positions.len() != values.len() {
            return Err(LanternError::InvalidParameter(format!(
                "piecewise-linear function needs >= 2 matching knots, got {} positions and {} values",
                positions.len(),
                values.len()
            )));
        }
        if positions.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(LanternError::NonFinite("piecewise-linear knots".into()));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LanternError::InvalidParameter(
                "knot positions must be strictly increasing".into(),
            ));
        }
        let n = positions.len();
        let step = (positions[n - 1] - positions[0]) / (n - 1) as f64;
        let uniform = positions
            .iter()
            .enumerate()
            .all(|(i, &p)| (p - (positions[0] + step * i as f64)).abs() <= 1e-12 * step.abs().max(1.0))
            .then_some((positions[0], step));
        Ok(PiecewiseLinear {
            positions,
            values,
            uniform,
        })
    }

    /// `n` uniform knots on `[lo, hi]` with `q = p`.
    pub fn identity(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 2 || lo >= hi {
            return Err(LanternError::InvalidParameter(format!(
                "identity PLF needs n >= 2 and lo < hi, got n={n}, [{lo}, {hi}]"
            )));
        }
        let p: Vec<f64> = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect();
        PiecewiseLinear::new(p.clone(), p)
    }

    pub fn default_identity() -> Self {
        PiecewiseLinear::identity(DEFAULT_CONTROL_POINTS, DEFAULT_RANGE.0, DEFAULT_RANGE.1)
            .expect("valid defaults")
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Segment lookup. At an interior knot the segment to its right wins.
    #[inline]
    pub fn locate(&self, c: f64) -> Locus {
        let p = &self.positions;
        let last = p.len() - 2;
        let seg = match self.uniform {
            Some((p0, step)) => {
                let f = ((c - p0) / step).floor();
                if f.is_nan() || f < 0.0 {
                    0
                } else {
                    let mut s = (f as usize).min(last);
                    // floor() can land one segment off next to a knot
                    if s < last && c >= p[s + 1] {
                        s += 1;
                    } else if s > 0 && c < p[s] {
                        s -= 1;
                    }
                    s
                }
            }
            None => p.partition_point(|&k| k <= c).saturating_sub(1).min(last),
        };
        Locus {
            seg,
            frac: (c - p[seg]) / (p[seg + 1] - p[seg]),
        }
    }

    #[inline]
    pub fn value_at(&self, locus: Locus) -> f64 {
        let (a, b) = locus.weights();
        a * self.values[locus.seg] + b * self.values[locus.seg + 1]
    }

    #[inline]
    pub fn slope_at(&self, locus: Locus) -> f64 {
        let s = locus.seg;
        (self.values[s + 1] - self.values[s]) / (self.positions[s + 1] - self.positions[s])
    }

    #[inline]
    pub fn eval(&self, c: f64) -> f64 {
        self.value_at(self.locate(c))
    }

    pub fn eval_and_grads(&self, c: &[f64]) -> PlfEval {
        let mut out = PlfEval {
            values: Vec::with_capacity(c.len()),
            d_input: Vec::with_capacity(c.len()),
            d_values: Vec::with_capacity(c.len()),
        };
        for &x in c {
            let l = self.locate(x);
            out.values.push(self.value_at(l));
            out.d_input.push(self.slope_at(l));
            out.d_values.push(l);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plf(seed: u64, n: usize) -> PiecewiseLinear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::with_capacity(n);
        let mut at = rng.gen_range(-2.5..-1.5);
        for _ in 0..n {
            p.push(at);
            at += rng.gen_range(0.05..0.6);
        }
        let q = p.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        PiecewiseLinear::new(p, q).unwrap()
    }

    #[test]
    fn identity_map() {
        let plf = PiecewiseLinear::default_identity();
        let c = [-3.0, -1.0, -0.537, 0.0, 0.02, 0.999, 1.0, 4.5];
        let ev = plf.eval_and_grads(&c);
        for (i, &x) in c.iter().enumerate() {
            assert!((ev.values[i] - x).abs() < 1e-12);
            assert!((ev.d_input[i] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_knot_interpolation() {
        let plf = PiecewiseLinear::new(vec![-1.0, 1.0], vec![-1.0, 1.0]).unwrap();
        let ev = plf.eval_and_grads(&[0.5]);
        assert_eq!(ev.values[0], 0.5);
        assert_eq!(ev.d_input[0], 1.0);
        assert_eq!(ev.d_values[0].seg, 0);
        assert_eq!(ev.d_values[0].weights(), (0.25, 0.75));
    }

    #[test]
    fn extrapolates_with_end_slopes() {
        let plf = PiecewiseLinear::new(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 2.5]).unwrap();
        assert_eq!(plf.eval(-1.0), -2.0);
        assert_eq!(plf.eval(4.0), 3.5);
        let ev = plf.eval_and_grads(&[4.0]);
        assert_eq!(ev.d_input[0], 0.5);
    }

    #[test]
    fn knot_takes_right_segment() {
        let plf = PiecewiseLinear::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(plf.locate(1.0).seg, 1);
        assert_eq!(plf.eval_and_grads(&[1.0]).d_input[0], 2.0);
    }

    #[test]
    fn uniform_fast_path_agrees_with_search() {
        let plf = PiecewiseLinear::identity(101, -1.0, 1.0).unwrap();
        let general = PiecewiseLinear {
            uniform: None,
            ..plf.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xs: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.5..1.5)).collect();
        xs.extend(plf.positions().iter().copied());
        for x in xs {
            assert_eq!(plf.locate(x), general.locate(x), "at {x}");
        }
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(PiecewiseLinear::new(vec![0.0], vec![0.0]).is_err());
        assert!(PiecewiseLinear::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(PiecewiseLinear::new(vec![0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for seed in 0..5 {
            let plf = random_plf(seed, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for _ in 0..50 {
                let x: f64 = rng.gen_range(-3.0..3.0);
                let near_knot = plf.positions().iter().any(|p| (p - x).abs() < 1e-3);
                if near_knot {
                    continue;
                }
                let ev = plf.eval_and_grads(&[x]);
                let fd = (plf.eval(x + h) - plf.eval(x - h)) / (2.0 * h);
                assert!((fd - ev.d_input[0]).abs() <= 1e-7 * fd.abs().max(1.0));
                let l = ev.d_values[0];
                let (wa, wb) = l.weights();
                for i in 0..plf.len() {
                    let mut up = plf.clone();
                    up.values[i] += h;
                    let mut dn = plf.clone();
                    dn.values[i] -= h;
                    let fd = (up.eval(x) - dn.eval(x)) / (2.0 * h);
                    let analytic = if i == l.seg {
                        wa
                    } else if i == l.seg + 1 {
                        wb
                    } else {
                        0.0
                    };
                    assert!((fd - analytic).abs() <= 1e-7 * fd.abs().max(1.0));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn continuous_across_knots(seed in 0u64..500, k in 0usize..10) {
            let plf = random_plf(seed, 10);
            let p = plf.positions()[k.min(plf.len() - 1)];
            let eps = 1e-9;
            prop_assert!((plf.eval(p - eps) - plf.eval(p + eps)).abs() < 1e-6);
        }

        #[test]
        fn affine_inside_segment(seed in 0u64..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let plf = random_plf(seed, 8);
            let s = plf.len() / 2;
            let (p0, p1) = (plf.positions()[s - 1], plf.positions()[s]);
            let xa = p0 + (p1 - p0) * a * 0.999;
            let xb = p0 + (p1 - p0) * b * 0.999;
            let mid = 0.5 * (xa + xb);
            prop_assert!((plf.eval(mid) - 0.5 * (plf.eval(xa) + plf.eval(xb))).abs() < 1e-12);
        }
    }
}
