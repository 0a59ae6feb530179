//! The unrolled network: `N` stages of Recon, `K` prior substages
//! (Conv1, Nonlinear, Conv2, Addition) and a Multi update, followed by a
//! final Recon that produces the output.
//!
//! Stage `n` computes, with `v_0 = beta_0 = 0`,
//!
//! ```text
//! x_n      = F^H (P^H P + rho_n I)^-1 [P^H y + rho_n F (v_{n-1} - beta_{n-1})]
//! C1       = w1 (*) v_{n,k-1} + b1            (one map per filter)
//! h        = S_PLF(C1)
//! C2       = sum_l (w2_l (*) h_l + b2_l)
//! v_{n,k}  = mu1 v_{n,k-1} + mu2 (x_n + beta_{n-1}) - C2
//! beta_n   = beta_{n-1} + eta_n (x_n - v_n)
//! ```
//!
//! where `v_{n,-1} = v_{n-1}` and `v_n` is the last substage output. The
//! very first substage of the first stage has no prior input and uses
//! `C2 = 0`. The network output is one more Recon from `(v_N, beta_N)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::{DynamicImage, KSpaceData, Shape};
use crate::error::{LanternError, Result};
use crate::plf::PiecewiseLinear;
use crate::sampling::{recon_forward, ReconSpectra, SamplingMask};
use crate::transforms::{
    conv_apply, conv_combine, init_dct_only, init_dct_tv, init_random_gaussian, FeatureStack,
    FilterBank, DEFAULT_CONV2_SCALE,
};

pub const DEFAULT_STAGES: usize = 13;
pub const DEFAULT_SUBSTAGES: usize = 1;
pub const DEFAULT_RHO: f64 = 0.2;
pub const DEFAULT_STEP: f64 = 0.3;
pub const DEFAULT_ETA: f64 = 1.8;
pub const DEFAULT_SPATIAL_FILTERS: usize = 8;
pub const DEFAULT_KERNEL: usize = 3;

/// How the Conv1 bank is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Eight spatial DCT atoms plus a temporal difference filter.
    DctTv,
    /// Eight spatial DCT atoms.
    DctOnly,
    /// Nine `3x3x1` kernels with i.i.d. Gaussian taps.
    RandomGauss,
}

impl std::str::FromStr for InitMode {
    type Err = LanternError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dct_tv" | "dcttv" => Ok(InitMode::DctTv),
            "dct" | "dct_only" => Ok(InitMode::DctOnly),
            "gauss" | "random_gauss" => Ok(InitMode::RandomGauss),
            other => Err(LanternError::InvalidParameter(format!(
                "unknown init mode {other:?} (expected dct_tv, dct or gauss)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstageParams {
    pub mu1: f64,
    pub mu2: f64,
    pub conv1: FilterBank,
    pub conv2: FilterBank,
    pub plf: PiecewiseLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    log_rho: f64,
    pub eta: f64,
    pub substages: Vec<SubstageParams>,
}

impl StageParams {
    pub fn new(rho: f64, eta: f64, substages: Vec<SubstageParams>) -> Result<Self> {
        check_rho(rho)?;
        Ok(StageParams {
            log_rho: rho.ln(),
            eta,
            substages,
        })
    }

    pub fn rho(&self) -> f64 {
        self.log_rho.exp()
    }

    pub fn log_rho(&self) -> f64 {
        self.log_rho
    }

    pub fn set_rho(&mut self, rho: f64) -> Result<()> {
        check_rho(rho)?;
        self.log_rho = rho.ln();
        Ok(())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(LanternError::InvalidParameter(format!(
            "rho must be positive, got {rho}"
        )));
    }
    Ok(())
}

/// The full learnable parameter set. Penalty weights are stored as `ln rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct LanternParams {
    pub stages: Vec<StageParams>,
    final_log_rho: f64,
}

/// Architecture and initialization choices for [`LanternParams::build`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub stages: usize,
    pub substages: usize,
    pub init: InitMode,
    pub seed: u64,
    pub rho: f64,
    pub step: f64,
    pub eta: f64,
    pub conv2_scale: f64,
    /// Standard deviation of Gaussian-initialized taps; `None` means
    /// `1 / sqrt(taps)` so kernels start with roughly unit norm.
    pub gauss_sigma: Option<f64>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stages: DEFAULT_STAGES,
            substages: DEFAULT_SUBSTAGES,
            init: InitMode::DctTv,
            seed: 0,
            rho: DEFAULT_RHO,
            step: DEFAULT_STEP,
            eta: DEFAULT_ETA,
            conv2_scale: DEFAULT_CONV2_SCALE,
            gauss_sigma: None,
        }
    }
}

/// Default network for `(nx, ny, nt)` volumes: 13 stages, one substage,
/// `rho = 0.2`, `mu2 = rho * l_r = 0.06`, `mu1 = 0.94`, `eta = 1.8`.
pub fn default_params(shape: Shape, init: InitMode, seed: u64) -> Result<LanternParams> {
    LanternParams::build(
        shape,
        &ArchConfig {
            init,
            seed,
            ..ArchConfig::default()
        },
    )
}

fn substage_seed(seed: u64, n: usize, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((n as u64) << 32) | k as u64)
}

impl LanternParams {
    pub fn build(shape: Shape, cfg: &ArchConfig) -> Result<Self> {
        shape.validate()?;
        if cfg.stages == 0 || cfg.substages == 0 {
            return Err(LanternError::InvalidParameter(
                "need at least one stage and one substage".into(),
            ));
        }
        let mu2 = cfg.rho * cfg.step;
        let k = DEFAULT_KERNEL;
        let mut stages = Vec::with_capacity(cfg.stages);
        for n in 0..cfg.stages {
            let mut substages = Vec::with_capacity(cfg.substages);
            for s in 0..cfg.substages {
                let conv1 = match cfg.init {
                    InitMode::DctTv => init_dct_tv(DEFAULT_SPATIAL_FILTERS, k, k)?,
                    InitMode::DctOnly => init_dct_only(DEFAULT_SPATIAL_FILTERS, k, k)?,
                    InitMode::RandomGauss => {
                        let sigma = cfg.gauss_sigma.unwrap_or(1.0 / ((k * k) as f64).sqrt());
                        init_random_gaussian(
                            DEFAULT_SPATIAL_FILTERS + 1,
                            k,
                            k,
                            1,
                            sigma,
                            substage_seed(cfg.seed, n, s),
                        )?
                    }
                };
                conv1.check_fits(shape)?;
                let conv2 = conv1.adjoint_init(cfg.conv2_scale, shape);
                substages.push(SubstageParams {
                    mu1: 1.0 - mu2,
                    mu2,
                    conv1,
                    conv2,
                    plf: PiecewiseLinear::default_identity(),
                });
            }
            stages.push(StageParams::new(cfg.rho, cfg.eta, substages)?);
        }
        Ok(LanternParams {
            stages,
            final_log_rho: cfg.rho.ln(),
        })
    }

    pub fn from_stages(stages: Vec<StageParams>, final_rho: f64) -> Result<Self> {
        check_rho(final_rho)?;
        if stages.is_empty() {
            return Err(LanternError::InvalidParameter("no stages".into()));
        }
        Ok(LanternParams {
            stages,
            final_log_rho: final_rho.ln(),
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn final_rho(&self) -> f64 {
        self.final_log_rho.exp()
    }

    pub fn set_final_rho(&mut self, rho: f64) -> Result<()> {
        check_rho(rho)?;
        self.final_log_rho = rho.ln();
        Ok(())
    }

    pub fn validate_for(&self, shape: Shape) -> Result<()> {
        if self.stages.is_empty() {
            return Err(LanternError::InvalidParameter("no stages".into()));
        }
        for (n, st) in self.stages.iter().enumerate() {
            if st.substages.is_empty() {
                return Err(LanternError::InvalidParameter(format!(
                    "stage {n} has no substages"
                )));
            }
            for sub in &st.substages {
                if sub.conv1.len() != sub.conv2.len() {
                    return Err(LanternError::InvalidParameter(format!(
                        "stage {n}: conv1 has {} filters but conv2 has {}",
                        sub.conv1.len(),
                        sub.conv2.len()
                    )));
                }
                sub.conv1.check_fits(shape)?;
                sub.conv2.check_fits(shape)?;
            }
        }
        Ok(())
    }

    /// Structural description, enough to rebuild an equally shaped set.
    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            stages: self
                .stages
                .iter()
                .map(|st| StageLayout {
                    substages: st
                        .substages
                        .iter()
                        .map(|s| SubstageLayout {
                            conv1: s.conv1.kernels.iter().map(|k| k.shape()).collect(),
                            conv2: s.conv2.kernels.iter().map(|k| k.shape()).collect(),
                            control_points: s.plf.len(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Zero-valued parameters (unit `rho`) with the given layout.
    pub fn from_layout(layout: &ParamLayout) -> Result<Self> {
        let bank = |shapes: &[[usize; 3]]| {
            FilterBank::new(
                shapes
                    .iter()
                    .map(|&[a, b, c]| crate::transforms::Kernel::zeros(a, b, c))
                    .collect(),
                vec![0.0; shapes.len()],
            )
        };
        let mut stages = Vec::new();
        for st in &layout.stages {
            let mut subs = Vec::new();
            for s in &st.substages {
                subs.push(SubstageParams {
                    mu1: 0.0,
                    mu2: 0.0,
                    conv1: bank(&s.conv1)?,
                    conv2: bank(&s.conv2)?,
                    plf: PiecewiseLinear::identity(s.control_points, -1.0, 1.0)?,
                });
            }
            stages.push(StageParams::new(1.0, 0.0, subs)?);
        }
        LanternParams::from_stages(stages, 1.0)
    }

    /// Visits every tensor in canonical order: `(name, shape, values,
    /// learnable)`. Penalties appear as `ln rho`.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[usize], &[f64], bool)) {
        for (n, st) in self.stages.iter().enumerate() {
            f(&format!("stage{n}.log_rho"), &[1], &[st.log_rho], true);
            f(&format!("stage{n}.eta"), &[1], &[st.eta], true);
            for (k, s) in st.substages.iter().enumerate() {
                let pre = format!("stage{n}.sub{k}");
                f(&format!("{pre}.mu1"), &[1], &[s.mu1], true);
                f(&format!("{pre}.mu2"), &[1], &[s.mu2], true);
                for (name, bank) in [("conv1", &s.conv1), ("conv2", &s.conv2)] {
                    for (l, ker) in bank.kernels.iter().enumerate() {
                        f(&format!("{pre}.{name}.w{l}"), &ker.shape(), &ker.taps, true);
                    }
                    f(&format!("{pre}.{name}.b"), &[bank.len()], &bank.biases, true);
                }
                f(&format!("{pre}.plf.p"), &[s.plf.len()], s.plf.positions(), false);
                f(&format!("{pre}.plf.q"), &[s.plf.len()], &s.plf.values, true);
            }
        }
        f("final.log_rho", &[1], &[self.final_log_rho], true);
    }

    /// Mutable counterpart of [`LanternParams::for_each_tensor`]. Knot
    /// positions are revalidated afterwards.
    pub fn for_each_tensor_mut(
        &mut self,
        mut f: impl FnMut(&str, &[usize], &mut [f64], bool),
    ) -> Result<()> {
        for (n, st) in self.stages.iter_mut().enumerate() {
            f(&format!("stage{n}.log_rho"), &[1], std::slice::from_mut(&mut st.log_rho), true);
            f(&format!("stage{n}.eta"), &[1], std::slice::from_mut(&mut st.eta), true);
            for (k, s) in st.substages.iter_mut().enumerate() {
                let pre = format!("stage{n}.sub{k}");
                f(&format!("{pre}.mu1"), &[1], std::slice::from_mut(&mut s.mu1), true);
                f(&format!("{pre}.mu2"), &[1], std::slice::from_mut(&mut s.mu2), true);
                for (name, bank) in [("conv1", &mut s.conv1), ("conv2", &mut s.conv2)] {
                    for (l, ker) in bank.kernels.iter_mut().enumerate() {
                        let shape = ker.shape();
                        f(&format!("{pre}.{name}.w{l}"), &shape, &mut ker.taps, true);
                    }
                    let len = bank.len();
                    f(&format!("{pre}.{name}.b"), &[len], &mut bank.biases, true);
                }
                let nc = s.plf.len();
                let mut p = s.plf.positions().to_vec();
                f(&format!("{pre}.plf.p"), &[nc], &mut p, false);
                let mut q = std::mem::take(&mut s.plf.values);
                f(&format!("{pre}.plf.q"), &[nc], &mut q, true);
                s.plf = PiecewiseLinear::new(p, q)?;
            }
        }
        f("final.log_rho", &[1], std::slice::from_mut(&mut self.final_log_rho), true);
        Ok(())
    }

    /// Learnable values in canonical order (optimizer coordinates).
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_tensor(|_, _, v, learnable| {
            if learnable {
                out.extend_from_slice(v);
            }
        });
        out
    }

    pub fn num_learnable(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, _, v, learnable| {
            if learnable {
                n += v.len();
            }
        });
        n
    }

    /// One name per learnable coordinate, e.g. `stage2.sub0.conv1.w3[4]`.
    pub fn learnable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each_tensor(|name, _, v, learnable| {
            if learnable {
                if v.len() == 1 && !name.ends_with(".b") {
                    out.push(name.to_string());
                } else {
                    out.extend((0..v.len()).map(|i| format!("{name}[{i}]")));
                }
            }
        });
        out
    }

    pub fn set_from_vector(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_learnable() {
            return Err(LanternError::ShapeMismatch {
                expected: format!("{} parameters", self.num_learnable()),
                actual: format!("{} parameters", values.len()),
            });
        }
        let mut at = 0;
        self.for_each_tensor_mut(|_, _, v, learnable| {
            if learnable {
                v.copy_from_slice(&values[at..at + v.len()]);
                at += v.len();
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstageLayout {
    pub conv1: Vec<[usize; 3]>,
    pub conv2: Vec<[usize; 3]>,
    pub control_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLayout {
    pub substages: Vec<SubstageLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub stages: Vec<StageLayout>,
}

/// Intermediates of the Conv1 -> Nonlinear -> Conv2 branch.
#[derive(Debug, Clone)]
pub struct PriorTape {
    pub c1: FeatureStack,
    pub h: FeatureStack,
    pub c2: DynamicImage,
}

#[derive(Debug, Clone)]
pub struct SubstageTape {
    /// `v_{n,k}`
    pub v: DynamicImage,
    /// Absent for the first substage of the first stage.
    pub prior: Option<PriorTape>,
}

#[derive(Debug, Clone)]
pub struct StageTape {
    pub x: DynamicImage,
    pub recon: ReconSpectra,
    pub substages: Vec<SubstageTape>,
    pub beta: DynamicImage,
}

impl StageTape {
    /// `v_n`, the output of the last substage.
    pub fn v(&self) -> &DynamicImage {
        &self.substages.last().expect("at least one substage").v
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub stages: Vec<StageTape>,
    pub final_recon: ReconSpectra,
    pub output: DynamicImage,
}

/// Applies the nonlinearity to the real and imaginary channels separately.
pub fn apply_plf(plf: &PiecewiseLinear, c: &DynamicImage) -> DynamicImage {
    let data = c
        .as_slice()
        .iter()
        .map(|z| Complex64::new(plf.eval(z.re), plf.eval(z.im)))
        .collect();
    DynamicImage::from_raw(c.shape(), data)
}

fn check_inputs(y: &KSpaceData, mask: &SamplingMask, params: &LanternParams) -> Result<()> {
    let shape = y.shape();
    shape.ensure_eq(&mask.shape())?;
    params.validate_for(shape)
}

/// Runs the network and records the full tape for [`crate::backprop::backward`].
pub fn forward(
    y: &KSpaceData,
    mask: &SamplingMask,
    params: &LanternParams,
) -> Result<(DynamicImage, ForwardTape)> {
    check_inputs(y, mask, params)?;
    let tape = run(y, mask, params);
    Ok((tape.output.clone(), tape))
}

/// Network output only.
pub fn reconstruct(y: &KSpaceData, mask: &SamplingMask, params: &LanternParams) -> Result<DynamicImage> {
    check_inputs(y, mask, params)?;
    let shape = y.shape();
    let mut v_prev = DynamicImage::zeros(shape);
    let mut beta_prev = DynamicImage::zeros(shape);
    for (n, st) in params.stages.iter().enumerate() {
        let (x, _) = recon_forward(y, &v_prev, &beta_prev, st.rho(), mask);
        let base = x.add(&beta_prev);
        let mut v_in = v_prev;
        for (k, sub) in st.substages.iter().enumerate() {
            let c2 = (n > 0 || k > 0).then(|| prior_branch(sub, &v_in).2);
            v_in = addition(sub, &v_in, &base, c2.as_ref());
        }
        beta_prev = multi(&beta_prev, st.eta, &x, &v_in);
        v_prev = v_in;
    }
    Ok(recon_forward(y, &v_prev, &beta_prev, params.final_rho(), mask).0)
}

fn prior_branch(sub: &SubstageParams, v_in: &DynamicImage) -> (FeatureStack, FeatureStack, DynamicImage) {
    let c1 = conv_apply(&sub.conv1, v_in).expect("validated shapes");
    let h: FeatureStack = c1.iter().map(|c| apply_plf(&sub.plf, c)).collect();
    let c2 = conv_combine(&sub.conv2, &h).expect("validated shapes");
    (c1, h, c2)
}

fn addition(
    sub: &SubstageParams,
    v_in: &DynamicImage,
    base: &DynamicImage,
    c2: Option<&DynamicImage>,
) -> DynamicImage {
    let (mu1, mu2) = (sub.mu1, sub.mu2);
    let mut data: Vec<Complex64> = v_in
        .as_slice()
        .iter()
        .zip(base.as_slice())
        .map(|(v, b)| v * mu1 + b * mu2)
        .collect();
    if let Some(c2) = c2 {
        for (d, c) in data.iter_mut().zip(c2.as_slice()) {
            *d -= c;
        }
    }
    DynamicImage::from_raw(v_in.shape(), data)
}

fn multi(beta_prev: &DynamicImage, eta: f64, x: &DynamicImage, v: &DynamicImage) -> DynamicImage {
    let data = beta_prev
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .zip(v.as_slice())
        .map(|((b, x), v)| b + (x - v) * eta)
        .collect();
    DynamicImage::from_raw(x.shape(), data)
}

fn run(y: &KSpaceData, mask: &SamplingMask, params: &LanternParams) -> ForwardTape {
    let shape = y.shape();
    let zero = DynamicImage::zeros(shape);
    let mut stages: Vec<StageTape> = Vec::with_capacity(params.stages.len());
    for (n, st) in params.stages.iter().enumerate() {
        let (v_prev, beta_prev) = match stages.last() {
            Some(prev) => (prev.v(), &prev.beta),
            None => (&zero, &zero),
        };
        let (x, recon) = recon_forward(y, v_prev, beta_prev, st.rho(), mask);
        let base = x.add(beta_prev);
        let mut subs: Vec<SubstageTape> = Vec::with_capacity(st.substages.len());
        for (k, sub) in st.substages.iter().enumerate() {
            let v_in = subs.last().map(|s| &s.v).unwrap_or(v_prev);
            let prior = (n > 0 || k > 0).then(|| {
                let (c1, h, c2) = prior_branch(sub, v_in);
                PriorTape { c1, h, c2 }
            });
            let v = addition(sub, v_in, &base, prior.as_ref().map(|p| &p.c2));
            subs.push(SubstageTape { v, prior });
        }
        let beta = multi(beta_prev, st.eta, &x, &subs.last().unwrap().v);
        stages.push(StageTape {
            x,
            recon,
            substages: subs,
            beta,
        });
    }
    let last = stages.last().expect("at least one stage");
    let (output, final_recon) = recon_forward(y, last.v(), &last.beta, params.final_rho(), mask);
    ForwardTape {
        stages,
        final_recon,
        output,
    }
}
