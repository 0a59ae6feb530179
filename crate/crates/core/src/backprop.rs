//! Reverse pass through the unrolled network.
//!
//! Complex tensors are treated as pairs of real tensors; the cotangent of a
//! complex tensor `z` is `g = dE/dRe(z) + i dE/dIm(z)`. With that convention
//! a real scalar `theta` entering as `z = theta u` receives `Re <g, u>`, and
//! a convolution tap `w_j` receives `sum_i Re(conj(g_i) src[i - off_j])`.
//!
//! The pass reuses the intermediates stored in the [`ForwardTape`] and never
//! re-runs any forward operator.

use num_complex::Complex64;

use crate::data::{DynamicImage, KSpaceData, Shape};
use crate::error::{LanternError, Result};
use crate::fourier::Fourier2d;
use crate::net::{forward, ForwardTape, LanternParams, SubstageParams, SubstageTape};
use crate::plf::PiecewiseLinear;
use crate::sampling::{ReconSpectra, SamplingMask};
use crate::transforms::{correlate_into, kernel_gradient, FeatureStack, FilterBank};

/// Below this ratio `|x - gt| / |gt|` the loss gradient is set to zero.
pub const LOSS_GRAD_FLOOR: f64 = 1e-12;

/// `E = |x - gt| / |gt|` and its cotangent with respect to `x`.
pub fn loss_and_grad(x: &DynamicImage, gt: &DynamicImage) -> Result<(f64, DynamicImage)> {
    x.shape().ensure_eq(&gt.shape())?;
    let gt_norm = gt.norm();
    if gt_norm == 0.0 || !gt_norm.is_finite() {
        return Err(LanternError::DegenerateReference(
            "ground truth has zero or non-finite norm".into(),
        ));
    }
    let diff = x.sub(gt);
    let dn = diff.norm();
    let loss = dn / gt_norm;
    let grad = if dn < LOSS_GRAD_FLOOR * gt_norm {
        DynamicImage::zeros(x.shape())
    } else {
        diff.scaled(1.0 / (gt_norm * dn))
    };
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstageGrads {
    pub mu1: f64,
    pub mu2: f64,
    pub conv1: FilterBank,
    pub conv2: FilterBank,
    pub plf_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageGrads {
    /// `dE/drho` (not `dE/dln rho`).
    pub rho: f64,
    pub eta: f64,
    pub substages: Vec<SubstageGrads>,
}

/// Gradients mirroring [`LanternParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub stages: Vec<StageGrads>,
    pub final_rho: f64,
}

impl ParamGrads {
    pub fn zeros_like(params: &LanternParams) -> Self {
        ParamGrads {
            stages: params
                .stages
                .iter()
                .map(|st| StageGrads {
                    rho: 0.0,
                    eta: 0.0,
                    substages: st
                        .substages
                        .iter()
                        .map(|s| SubstageGrads {
                            mu1: 0.0,
                            mu2: 0.0,
                            conv1: s.conv1.zeros_like(),
                            conv2: s.conv2.zeros_like(),
                            plf_values: vec![0.0; s.plf.len()],
                        })
                        .collect(),
                })
                .collect(),
            final_rho: 0.0,
        }
    }

    /// Flattened in the order of [`LanternParams::to_vector`]; penalty
    /// entries become `dE/dln rho = rho dE/drho`.
    pub fn to_vector(&self, params: &LanternParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.num_learnable());
        for (g, p) in self.stages.iter().zip(&params.stages) {
            out.push(g.rho * p.rho());
            out.push(g.eta);
            for s in &g.substages {
                out.push(s.mu1);
                out.push(s.mu2);
                for bank in [&s.conv1, &s.conv2] {
                    for k in &bank.kernels {
                        out.extend_from_slice(&k.taps);
                    }
                    out.extend_from_slice(&bank.biases);
                }
                out.extend_from_slice(&s.plf_values);
            }
        }
        out.push(self.final_rho * params.final_rho());
        out
    }
}

/// Result of [`backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: ParamGrads,
    /// Cotangent of the measured k-space.
    pub d_y: KSpaceData,
}

fn zeros(n: usize) -> Vec<Complex64> {
    vec![Complex64::default(); n]
}

fn dot_re(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.re * q.re + p.im * q.im).sum()
}

fn axpy(dst: &mut [Complex64], alpha: f64, src: &[Complex64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * alpha;
    }
}

/// Recon backward. Returns `dE/drho` and adds into the cotangents of
/// `v`, `beta` and `y`.
fn recon_backward(
    fft: &Fourier2d,
    g_x: &[Complex64],
    spectra: &ReconSpectra,
    rho: f64,
    mask: &[u8],
    g_v: &mut [Complex64],
    g_beta: &mut [Complex64],
    g_y: &mut [Complex64],
) -> f64 {
    let mut gk = g_x.to_vec();
    fft.forward(&mut gk);
    let mut d_rho = 0.0;
    for i in 0..gk.len() {
        let m = if mask[i] == 1 { 1.0 } else { 0.0 };
        let denom = m + rho;
        let dxk = spectra.diff[i] / denom - spectra.rhs[i] / (denom * denom);
        d_rho += gk[i].re * dxk.re + gk[i].im * dxk.im;
        let g = gk[i] / denom;
        if mask[i] == 1 {
            g_y[i] += g;
        }
        gk[i] = g * rho;
    }
    fft.inverse(&mut gk);
    for ((v, b), g) in g_v.iter_mut().zip(g_beta.iter_mut()).zip(&gk) {
        *v += g;
        *b -= g;
    }
    d_rho
}

fn plf_backward(plf: &PiecewiseLinear, c: &[Complex64], g_h: &[Complex64], d_q: &mut [f64]) -> Vec<Complex64> {
    c.iter()
        .zip(g_h)
        .map(|(z, g)| {
            let lr = plf.locate(z.re);
            let li = plf.locate(z.im);
            let (a, b) = lr.weights();
            d_q[lr.seg] += a * g.re;
            d_q[lr.seg + 1] += b * g.re;
            let (a, b) = li.weights();
            d_q[li.seg] += a * g.im;
            d_q[li.seg + 1] += b * g.im;
            Complex64::new(plf.slope_at(lr) * g.re, plf.slope_at(li) * g.im)
        })
        .collect()
}

/// Conv1 -> Nonlinear -> Conv2 backward from the cotangent of `C2`.
fn prior_backward(
    sub: &SubstageParams,
    c1: &FeatureStack,
    h: &FeatureStack,
    v_in: &[Complex64],
    g_c2: &[Complex64],
    shape: Shape,
    grads: &mut SubstageGrads,
    g_vin: &mut [Complex64],
) {
    let bias_grad: f64 = g_c2.iter().map(|z| z.re).sum();
    for l in 0..sub.conv2.len() {
        let k2 = &sub.conv2.kernels[l];
        for (d, g) in grads.conv2.kernels[l]
            .taps
            .iter_mut()
            .zip(kernel_gradient(g_c2, h[l].as_slice(), k2, shape))
        {
            *d += g;
        }
        grads.conv2.biases[l] += bias_grad;

        let mut g_h = zeros(shape.len());
        correlate_into(&mut g_h, g_c2, k2, shape);
        let g_c1 = plf_backward(&sub.plf, c1[l].as_slice(), &g_h, &mut grads.plf_values);

        let k1 = &sub.conv1.kernels[l];
        for (d, g) in grads.conv1.kernels[l]
            .taps
            .iter_mut()
            .zip(kernel_gradient(&g_c1, v_in, k1, shape))
        {
            *d += g;
        }
        grads.conv1.biases[l] += g_c1.iter().map(|z| z.re).sum::<f64>();
        correlate_into(g_vin, &g_c1, k1, shape);
    }
}

/// Back-propagates `g_out = dE/d(output)` through a recorded forward pass.
pub fn backward(
    tape: &ForwardTape,
    mask: &SamplingMask,
    params: &LanternParams,
    g_out: &DynamicImage,
) -> Result<Backward> {
    let shape = tape.output.shape();
    shape.ensure_eq(&g_out.shape())?;
    shape.ensure_eq(&mask.shape())?;
    if tape.stages.len() != params.stages.len() {
        return Err(LanternError::InvalidParameter(format!(
            "tape has {} stages, parameters have {}",
            tape.stages.len(),
            params.stages.len()
        )));
    }
    let n = shape.len();
    let fft = Fourier2d::plan(shape.nx, shape.ny);
    let m = mask.as_slice();
    let mut grads = ParamGrads::zeros_like(params);
    let mut g_y = zeros(n);
    // Cotangents of v_n and beta_n for the stage being processed.
    let mut g_v = zeros(n);
    let mut g_beta = zeros(n);

    grads.final_rho = recon_backward(
        &fft,
        g_out.as_slice(),
        &tape.final_recon,
        params.final_rho(),
        m,
        &mut g_v,
        &mut g_beta,
        &mut g_y,
    );

    let zero = DynamicImage::zeros(shape);
    for s in (0..params.stages.len()).rev() {
        let st = &params.stages[s];
        let tp = &tape.stages[s];
        let sg = &mut grads.stages[s];
        if tp.substages.len() != st.substages.len() {
            return Err(LanternError::InvalidParameter(format!(
                "stage {s}: tape/parameter substage count mismatch"
            )));
        }
        let (v_prev, beta_prev) = if s == 0 {
            (&zero, &zero)
        } else {
            (tape.stages[s - 1].v(), &tape.stages[s - 1].beta)
        };

        // Multi: beta = beta_prev + eta (x - v)
        let mut g_x = zeros(n);
        let mut g_beta_prev = g_beta.clone();
        sg.eta = tp
            .x
            .as_slice()
            .iter()
            .zip(tp.v().as_slice())
            .zip(&g_beta)
            .map(|((x, v), g)| {
                let d = x - v;
                g.re * d.re + g.im * d.im
            })
            .sum();
        axpy(&mut g_x, st.eta, &g_beta);
        axpy(&mut g_v, -st.eta, &g_beta);

        // Substages in reverse; g_v carries the cotangent of v_{n,k}.
        let base = tp.x.add(beta_prev);
        for k in (0..st.substages.len()).rev() {
            let sub = &st.substages[k];
            let subg = &mut sg.substages[k];
            let v_in: &DynamicImage = if k == 0 { v_prev } else { &tp.substages[k - 1].v };
            let SubstageTape { prior, .. } = &tp.substages[k];

            subg.mu1 += dot_re(&g_v, v_in.as_slice());
            subg.mu2 += dot_re(&g_v, base.as_slice());
            axpy(&mut g_x, sub.mu2, &g_v);
            axpy(&mut g_beta_prev, sub.mu2, &g_v);

            let mut g_vin = zeros(n);
            axpy(&mut g_vin, sub.mu1, &g_v);
            if let Some(p) = prior {
                let g_c2: Vec<Complex64> = g_v.iter().map(|z| -z).collect();
                prior_backward(sub, &p.c1, &p.h, v_in.as_slice(), &g_c2, shape, subg, &mut g_vin);
            }
            g_v = g_vin;
        }

        // Recon of stage s consumed (v_prev, beta_prev).
        sg.rho = recon_backward(&fft, &g_x, &tp.recon, st.rho(), m, &mut g_v, &mut g_beta_prev, &mut g_y);
        g_beta = g_beta_prev;
    }

    Ok(Backward {
        grads,
        d_y: KSpaceData::from_raw(shape, g_y),
    })
}

/// Forward, loss and backward for one training sample.
pub fn loss_and_gradients(
    params: &LanternParams,
    y: &KSpaceData,
    mask: &SamplingMask,
    truth: &DynamicImage,
) -> Result<(f64, ParamGrads)> {
    let (x, tape) = forward(y, mask, params)?;
    let (loss, g) = loss_and_grad(&x, truth)?;
    let b = backward(&tape, mask, params, &g)?;
    Ok((loss, b.grads))
}

/// Which directions a finite-difference check probes, in the learnable
/// coordinates of [`LanternParams::to_vector`].
#[derive(Debug, Clone, PartialEq)]
pub enum FdSelector {
    Coordinates(Vec<usize>),
    Directions(Vec<Vec<f64>>),
}

/// One probed direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    /// Smallest distance between any nonlinearity input and a knot at the
    /// base point; `inf` if no nonlinearity is active.
    pub knot_clearance: f64,
    /// Set when the step is so small that round-off dominates.
    pub warning: Option<String>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// `|a - f| / max(|a|, |f|, floor)`; the floor keeps near-zero pairs from
/// producing huge ratios out of round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-7;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Steps below this lose most significant digits to cancellation.
pub const MIN_RELIABLE_STEP: f64 = 1e-9;

/// Compares back-propagated gradients against central differences
/// `(E(theta + h d) - E(theta - h d)) / 2h`.
pub fn finite_diff_check(
    y: &KSpaceData,
    mask: &SamplingMask,
    truth: &DynamicImage,
    params: &LanternParams,
    selector: &FdSelector,
    h: f64,
) -> Result<FdReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(LanternError::InvalidParameter(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (x, tape) = forward(y, mask, params)?;
    let (_, g) = loss_and_grad(&x, truth)?;
    let analytic = backward(&tape, mask, params, &g)?.grads.to_vector(params);
    let knot_clearance = knot_clearance(&tape, params);
    let base = params.to_vector();
    let loss_at = |theta: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.set_from_vector(theta)?;
        let x = crate::net::reconstruct(y, mask, &p)?;
        let loss = loss_and_grad(&x, truth)?.0;
        if !loss.is_finite() {
            return Err(LanternError::NonFinite("loss at a perturbed point".into()));
        }
        Ok(loss)
    };
    let probe = |dir: &[f64]| -> Result<f64> {
        let up: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b + h * d).collect();
        let dn: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b - h * d).collect();
        Ok((loss_at(&up)? - loss_at(&dn)?) / (2.0 * h))
    };
    let mut entries = Vec::new();
    match selector {
        FdSelector::Coordinates(indices) => {
            let names = params.learnable_names();
            for &i in indices {
                if i >= base.len() {
                    return Err(LanternError::InvalidParameter(format!(
                        "parameter index {i} out of range ({} learnable)",
                        base.len()
                    )));
                }
                let mut dir = vec![0.0; base.len()];
                dir[i] = 1.0;
                let numeric = probe(&dir)?;
                entries.push(FdEntry {
                    label: names[i].clone(),
                    analytic: analytic[i],
                    numeric,
                    rel_error: relative_error(analytic[i], numeric),
                });
            }
        }
        FdSelector::Directions(dirs) => {
            for (j, dir) in dirs.iter().enumerate() {
                if dir.len() != base.len() {
                    return Err(LanternError::ShapeMismatch {
                        expected: format!("direction of length {}", base.len()),
                        actual: format!("length {}", dir.len()),
                    });
                }
                let a: f64 = analytic.iter().zip(dir).map(|(g, d)| g * d).sum();
                let numeric = probe(dir)?;
                entries.push(FdEntry {
                    label: format!("direction {j}"),
                    analytic: a,
                    numeric,
                    rel_error: relative_error(a, numeric),
                });
            }
        }
    }
    let warning = (h < MIN_RELIABLE_STEP).then(|| {
        format!("step {h:e} is below {MIN_RELIABLE_STEP:e}; differences are dominated by round-off")
    });
    Ok(FdReport {
        entries,
        knot_clearance,
        warning,
    })
}

fn plf_inputs(c1: &FeatureStack) -> impl Iterator<Item = f64> + '_ {
    c1.iter()
        .flat_map(|m| m.as_slice().iter().flat_map(|z| [z.re, z.im]))
}

fn distance_to_knots(knots: &[f64], c: f64) -> f64 {
    let i = knots.partition_point(|&k| k < c);
    let right = knots.get(i).map_or(f64::INFINITY, |k| k - c);
    let left = i.checked_sub(1).map_or(f64::INFINITY, |j| c - knots[j]);
    left.min(right)
}

/// Smallest distance between a recorded nonlinearity input and a knot.
pub fn knot_clearance(tape: &ForwardTape, params: &LanternParams) -> f64 {
    let mut best = f64::INFINITY;
    for (st, tp) in params.stages.iter().zip(&tape.stages) {
        for (sub, stp) in st.substages.iter().zip(&tp.substages) {
            if let Some(p) = &stp.prior {
                let knots = sub.plf.positions();
                for c in plf_inputs(&p.c1) {
                    best = best.min(distance_to_knots(knots, c));
                }
            }
        }
    }
    best
}

/// Moves the knots of every active nonlinearity into gaps of its recorded
/// inputs so that no input lies within `clearance` of a knot, keeping up to
/// `max_knots` knots per function. Values are set to the identity plus a
/// smooth bend so the function stays genuinely piecewise linear.
///
/// Used to prepare gradient checks, which are only meaningful away from the
/// kinks.
pub fn clear_knots(
    params: &LanternParams,
    y: &KSpaceData,
    mask: &SamplingMask,
    clearance: f64,
    max_knots: usize,
) -> Result<LanternParams> {
    let mut out = params.clone();
    let max_knots = max_knots.max(2);
    for s in 0..out.stages.len() {
        for k in 0..out.stages[s].substages.len() {
            let (_, tape) = forward(y, mask, &out)?;
            let Some(prior) = &tape.stages[s].substages[k].prior else {
                continue;
            };
            let mut vals: Vec<f64> = plf_inputs(&prior.c1).collect();
            vals.sort_by(f64::total_cmp);
            let (lo, hi) = (vals[0], vals[vals.len() - 1]);
            let span = (hi - lo).max(clearance);
            let mut gaps: Vec<f64> = vals
                .windows(2)
                .filter(|w| w[1] - w[0] > 2.0 * clearance * 1.5)
                .map(|w| 0.5 * (w[0] + w[1]))
                .collect();
            let mut knots = vec![lo - 0.25 * span - clearance, hi + 0.25 * span + clearance];
            // Interior knots nearest to an even spread over [lo, hi].
            let want = max_knots - 2;
            for j in 1..=want {
                if gaps.is_empty() {
                    break;
                }
                let target = lo + span * j as f64 / (want + 1) as f64;
                let (best, _) = gaps
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (i, (g - target).abs()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("non-empty");
                knots.push(gaps.swap_remove(best));
            }
            knots.sort_by(f64::total_cmp);
            let values = knots
                .iter()
                .enumerate()
                .map(|(i, p)| p + 0.2 * span * (1.7 * i as f64).sin())
                .collect();
            out.stages[s].substages[k].plf = PiecewiseLinear::new(knots, values)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{reconstruct, ArchConfig, InitMode};
    use crate::probe;
    use crate::sampling::{apply_fu, make_mask_1d_random};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_image(shape: Shape, seed: u64, scale: f64) -> DynamicImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len())
            .map(|_| Complex64::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)))
            .collect();
        DynamicImage::new(shape, data).unwrap()
    }

    /// Small network with nonzero biases so every parameter has a
    /// nontrivial gradient.
    fn setup(
        shape: Shape,
        stages: usize,
        substages: usize,
        init: InitMode,
    ) -> (LanternParams, KSpaceData, SamplingMask, DynamicImage) {
        let mut params = LanternParams::build(
            shape,
            &ArchConfig {
                stages,
                substages,
                init,
                seed: 5,
                conv2_scale: 0.3,
                ..ArchConfig::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for st in &mut params.stages {
            for sub in &mut st.substages {
                for b in sub.conv1.biases.iter_mut().chain(sub.conv2.biases.iter_mut()) {
                    *b = rng.gen_range(-0.05..0.05);
                }
            }
        }
        params.set_final_rho(0.35).unwrap();
        let truth = random_image(shape, 1, 0.5);
        let mask = make_mask_1d_random(shape, 2.0, 2, 3).unwrap();
        let y = apply_fu(&truth, &mask).unwrap();
        let params = clear_knots(&params, &y, &mask, 1e-3, 9).unwrap();
        (params, y, mask, truth)
    }

    fn class_representatives(params: &LanternParams) -> Vec<usize> {
        let names = params.learnable_names();
        let mut idx = Vec::new();
        for pat in [
            ".log_rho", ".eta", ".mu1", ".mu2", ".conv1.w", ".conv1.b", ".conv2.w", ".conv2.b", ".plf.q",
        ] {
            // The last matching entry sits in the deepest stage, where the
            // prior branch is active.
            let hits: Vec<usize> = (0..names.len()).filter(|&i| names[i].contains(pat)).collect();
            let stride = if hits.len() > 20 { 7 } else { 1 };
            idx.extend(hits.iter().rev().step_by(stride).take(3));
        }
        idx
    }

    #[test]
    fn loss_gradient_matches_formula() {
        let shape = Shape::new(4, 4, 2);
        let gt = random_image(shape, 1, 1.0);
        let x = random_image(shape, 2, 1.0);
        let (loss, g) = loss_and_grad(&x, &gt).unwrap();
        let d = x.sub(&gt);
        assert!((loss - d.norm() / gt.norm()).abs() < 1e-15);
        let h = 1e-6;
        for i in [0, 5, 31] {
            for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                let mut up = x.clone();
                up.as_mut_slice()[i] += dir * h;
                let mut dn = x.clone();
                dn.as_mut_slice()[i] -= dir * h;
                let fd = (loss_and_grad(&up, &gt).unwrap().0 - loss_and_grad(&dn, &gt).unwrap().0) / (2.0 * h);
                let an = g.as_slice()[i].re * dir.re + g.as_slice()[i].im * dir.im;
                assert!(relative_error(an, fd) < 1e-6);
            }
        }
        let (l0, g0) = loss_and_grad(&gt, &gt).unwrap();
        assert_eq!(l0, 0.0);
        assert_eq!(g0.norm(), 0.0);
        assert!(loss_and_grad(&x, &DynamicImage::zeros(shape)).is_err());
    }

    #[test]
    fn single_stage_scalars_match_finite_differences() {
        let (params, y, mask, truth) = setup(Shape::new(8, 8, 2), 1, 1, InitMode::DctTv);
        let idx = class_representatives(&params);
        let r = finite_diff_check(&y, &mask, &truth, &params, &FdSelector::Coordinates(idx), 1e-5).unwrap();
        for e in &r.entries {
            assert!(e.rel_error < 1e-4, "{}: analytic {} numeric {}", e.label, e.analytic, e.numeric);
        }
        // rho, eta, mu1, mu2 all matter even without an active prior branch
        assert!(r.entries.iter().filter(|e| e.analytic != 0.0).count() >= 4);
    }

    #[test]
    fn every_parameter_class_matches_finite_differences() {
        for init in [InitMode::DctTv, InitMode::RandomGauss] {
            let (params, y, mask, truth) = setup(Shape::new(8, 8, 4), 3, 2, init);
            let idx = class_representatives(&params);
            let r = finite_diff_check(&y, &mask, &truth, &params, &FdSelector::Coordinates(idx), 1e-5).unwrap();
            assert!(r.knot_clearance >= 1e-3, "clearance {}", r.knot_clearance);
            assert!(r.warning.is_none());
            for e in &r.entries {
                assert!(
                    e.rel_error < 1e-4,
                    "{init:?} {}: analytic {} numeric {}",
                    e.label,
                    e.analytic,
                    e.numeric
                );
                assert!(e.analytic != 0.0, "{} has zero gradient", e.label);
            }
        }
    }

    #[test]
    fn directional_derivatives_match() {
        let (params, y, mask, truth) = setup(Shape::new(8, 8, 2), 3, 2, InitMode::DctTv);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = params.num_learnable();
        let dirs: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                d.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        let r = finite_diff_check(&y, &mask, &truth, &params, &FdSelector::Directions(dirs), 1e-5).unwrap();
        assert!(r.knot_clearance >= 1e-3);
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.entries);
    }

    #[test]
    fn tiny_step_warns() {
        let (params, y, mask, truth) = setup(Shape::new(8, 8, 2), 2, 1, InitMode::DctTv);
        let sel = FdSelector::Coordinates(vec![0]);
        let r = finite_diff_check(&y, &mask, &truth, &params, &sel, 1e-12).unwrap();
        assert!(r.warning.is_some());
        assert!(finite_diff_check(&y, &mask, &truth, &params, &sel, 0.0).is_err());
        let bad = FdSelector::Directions(vec![vec![1.0]]);
        assert!(finite_diff_check(&y, &mask, &truth, &params, &bad, 1e-5).is_err());
    }

    #[test]
    fn cleared_knots_keep_their_distance() {
        let (params, y, mask, _) = setup(Shape::new(8, 8, 4), 2, 2, InitMode::RandomGauss);
        let (_, tape) = forward(&y, &mask, &params).unwrap();
        assert!(knot_clearance(&tape, &params) >= 1e-3);
        for (n, st) in params.stages.iter().enumerate() {
            for (k, sub) in st.substages.iter().enumerate() {
                if n > 0 || k > 0 {
                    assert!(sub.plf.len() >= 2 && sub.plf.len() <= 9);
                }
            }
        }
    }

    #[test]
    fn measurement_cotangent_matches_finite_differences() {
        let (params, y, mask, truth) = setup(Shape::new(8, 8, 4), 3, 2, InitMode::DctTv);
        let (x, tape) = forward(&y, &mask, &params).unwrap();
        let (_, g) = loss_and_grad(&x, &truth).unwrap();
        let b = backward(&tape, &mask, &params, &g).unwrap();
        let h = 1e-6;
        let sampled: Vec<usize> = (0..mask.as_slice().len()).filter(|&i| mask.as_slice()[i] == 1).collect();
        for &i in sampled.iter().step_by(17) {
            for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                let mut up = y.clone();
                up.as_mut_slice()[i] += dir * h;
                let mut dn = y.clone();
                dn.as_mut_slice()[i] -= dir * h;
                let lu = loss_and_grad(&reconstruct(&up, &mask, &params).unwrap(), &truth).unwrap().0;
                let ld = loss_and_grad(&reconstruct(&dn, &mask, &params).unwrap(), &truth).unwrap().0;
                let fd = (lu - ld) / (2.0 * h);
                let an = b.d_y.as_slice()[i].re * dir.re + b.d_y.as_slice()[i].im * dir.im;
                assert!(relative_error(an, fd) < 1e-4, "{i}: {an} vs {fd}");
            }
        }
        for (i, &m) in mask.as_slice().iter().enumerate() {
            if m == 0 {
                assert_eq!(b.d_y.as_slice()[i], Complex64::default());
            }
        }
    }

    #[test]
    fn reverse_pass_is_linear_in_cotangent() {
        let (params, y, mask, _) = setup(Shape::new(8, 8, 4), 3, 2, InitMode::RandomGauss);
        let (_, tape) = forward(&y, &mask, &params).unwrap();
        let shape = y.shape();
        let g1 = random_image(shape, 21, 1.0);
        let g2 = random_image(shape, 22, 1.0);
        let (a, b) = (0.7, -1.3);
        let mut comb = g1.scaled(a);
        comb.axpy(b, &g2);
        let v1 = backward(&tape, &mask, &params, &g1).unwrap().grads.to_vector(&params);
        let v2 = backward(&tape, &mask, &params, &g2).unwrap().grads.to_vector(&params);
        let vc = backward(&tape, &mask, &params, &comb).unwrap().grads.to_vector(&params);
        for i in 0..vc.len() {
            let expected = a * v1[i] + b * v2[i];
            assert!((vc[i] - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{i}");
        }
    }

    #[test]
    fn reverse_pass_runs_no_forward_operators() {
        let (params, y, mask, truth) = setup(Shape::new(8, 8, 4), 2, 2, InitMode::DctTv);
        let before = probe::forward_ops();
        let (x, tape) = forward(&y, &mask, &params).unwrap();
        let after_forward = probe::forward_ops();
        assert!(after_forward > before);
        let (_, g) = loss_and_grad(&x, &truth).unwrap();
        backward(&tape, &mask, &params, &g).unwrap();
        assert_eq!(probe::forward_ops(), after_forward);
    }

    #[test]
    fn gradient_vector_matches_layout() {
        let (params, y, mask, truth) = setup(Shape::new(8, 8, 2), 2, 1, InitMode::DctOnly);
        let (_, g) = loss_and_gradients(&params, &y, &mask, &truth).unwrap();
        assert_eq!(g.to_vector(&params).len(), params.num_learnable());
        assert_eq!(params.learnable_names().len(), params.num_learnable());
    }
}
