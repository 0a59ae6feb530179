//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use lantern::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_EXT};
use lantern::data::{DynamicImage, KSpaceData};
use lantern::io::{load_kspace, load_mask, load_volume, save_kspace, save_mask, save_volume};
use lantern::metrics::{evaluate as evaluate_pair, psnr, MetricReport, MetricSummary};
use lantern::net::{reconstruct as run_net, ArchConfig, InitMode, LanternParams};
use lantern::phantom::{build_dataset, MaskSpec, PhantomConfig};
use lantern::sampling::{zero_filled_recon, PatternKind, SamplingMask};
use lantern::train::{train_with_observer, Optimizer, TrainConfig};
use serde::Serialize;

use crate::config::ConfigFile;
use crate::datadir::{
    container_files, export_frames, list_ids, load_dir, mask_path, sample_id, volume_path, KSPACE_TAG, RECON_TAG,
    TRUTH_TAG,
};
use crate::manifest::{RunManifest, MANIFEST_NAME};
use crate::{EvaluateArgs, GenDataArgs, ReconstructArgs, TrainArgs};

/// A bad option value; reported together with the subcommand's usage.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

pub const DEFAULT_SAMPLES: usize = 20;
pub const DEFAULT_ACCEL: f64 = 4.0;
pub const MODEL_NAME: &str = "model";
pub const LOSS_NAME: &str = "loss.csv";

/// `out.cvol` -> `out.cvol.manifest.json`, for commands whose output is a
/// single file.
pub fn file_manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(MANIFEST_NAME);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenDataConfig {
    pub n: usize,
    pub phantom: PhantomConfig,
    pub mask: MaskSpec,
    pub noise: f64,
    pub seed: u64,
}

pub fn resolve_gen_data(args: &GenDataArgs) -> Result<GenDataConfig> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let base = PhantomConfig::default();
    let kind: String = file.resolve(args.mask.clone(), "mask", PatternKind::OneDRandom.as_str().into())?;
    let kind: PatternKind = kind.parse().map_err(usage)?;
    let cfg = GenDataConfig {
        n: file.resolve(args.n, "n", DEFAULT_SAMPLES)?,
        phantom: PhantomConfig {
            nx: file.resolve(args.nx, "nx", base.nx)?,
            ny: file.resolve(args.ny, "ny", base.ny)?,
            nt: file.resolve(args.nt, "nt", base.nt)?,
            n_ellipses: file.resolve(args.ellipses, "ellipses", base.n_ellipses)?,
            contraction_amplitude: file.resolve(args.amplitude, "amplitude", base.contraction_amplitude)?,
            background_texture_sigma: file.resolve(args.texture, "texture", base.background_texture_sigma)?,
            seed: 0,
        },
        mask: MaskSpec {
            kind,
            accel: file.resolve(args.accel, "accel", DEFAULT_ACCEL)?,
            center_lines: file.resolve(args.center_lines, "center_lines", MaskSpec::one_d_random(1.0).center_lines)?,
        },
        noise: file.resolve(args.noise, "noise", 0.0)?,
        seed: file.resolve(args.seed, "seed", 0)?,
    };
    file.check_all_used().map_err(usage)?;
    if cfg.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(usage(format!("--noise must be >= 0, got {}", cfg.noise)));
    }
    cfg.phantom.validate().map_err(usage)?;
    cfg.mask.draw(cfg.phantom.shape(), 0).map_err(usage)?;
    Ok(cfg)
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = resolve_gen_data(args)?;
    let mut manifest = RunManifest::start("gen-data", &cfg)?;
    manifest.seed("seed", cfg.seed);
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    let ds = build_dataset(cfg.n, &cfg.phantom, &cfg.mask, cfg.noise, cfg.seed)?;
    create_dir(&args.out)?;
    for (i, s) in ds.samples().iter().enumerate() {
        let id = sample_id(i);
        let tp = volume_path(&args.out, &id, TRUTH_TAG);
        let kp = volume_path(&args.out, &id, KSPACE_TAG);
        let mp = mask_path(&args.out, &id);
        save_volume(&tp, &s.truth)?;
        save_kspace(&kp, &s.kspace)?;
        save_mask(&mp, &s.mask)?;
        if load_volume(&tp)? != s.truth || load_kspace(&kp)? != s.kspace || load_mask(&mp)? != s.mask {
            bail!("sample {id} did not read back identically");
        }
        for p in [tp, kp, mp] {
            for f in container_files(&p) {
                manifest.output(&f);
            }
        }
    }
    manifest.finish(&args.out.join(MANIFEST_NAME))?;
    println!("wrote {} samples of {:?} to {}", ds.len(), cfg.phantom.shape(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

pub fn resolve_train(args: &TrainArgs) -> Result<TrainRunConfig> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let arch0 = ArchConfig::default();
    let train0 = TrainConfig::default();
    let init: String = file.resolve(args.init.clone(), "init", "dct_tv".into())?;
    let init: InitMode = init.parse().map_err(usage)?;
    let optimizer: String = file.resolve(args.optimizer.clone(), "optimizer", "gd".into())?;
    let optimizer: Optimizer = optimizer.parse().map_err(usage)?;
    let seed = file.resolve(args.seed, "seed", train0.seed)?;
    let arch = ArchConfig {
        stages: file.resolve(args.stages, "stages", arch0.stages)?,
        substages: file.resolve(args.substages, "substages", arch0.substages)?,
        init,
        seed,
        rho: file.resolve(args.rho, "rho", arch0.rho)?,
        eta: file.resolve(args.eta, "eta", arch0.eta)?,
        ..arch0
    };
    let train = TrainConfig {
        learning_rate: file.resolve(args.lr, "lr", train0.learning_rate)?,
        epochs: file.resolve(args.epochs, "epochs", train0.epochs)?,
        batch_size: file.resolve(args.batch_size, "batch_size", train0.batch_size)?,
        optimizer,
        seed,
        validation_fraction: file.resolve(args.val_fraction, "val_fraction", train0.validation_fraction)?,
        clip_norm: file.resolve_opt(args.clip_norm, "clip_norm")?,
    };
    file.check_all_used().map_err(usage)?;
    train.validate().map_err(usage)?;
    if arch.stages == 0 || arch.substages == 0 {
        return Err(usage("--stages and --substages must be at least 1"));
    }
    if !(arch.rho > 0.0 && arch.rho.is_finite()) {
        return Err(usage(format!("--rho must be positive, got {}", arch.rho)));
    }
    Ok(TrainRunConfig {
        data: args.data.clone(),
        arch,
        train,
    })
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_train(args)?;
    let mut manifest = RunManifest::start("train", &cfg)?;
    manifest.seed("seed", cfg.train.seed);
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    let loaded = load_dir(&args.data)?;
    for f in &loaded.files {
        manifest.input(f)?;
    }
    let shape = loaded.dataset.shape().expect("non-empty dataset");
    let init = LanternParams::build(shape, &cfg.arch)?;
    let quiet = args.quiet;
    let (params, report) = train_with_observer(&loaded.dataset, &init, &cfg.train, |s| {
        if !quiet {
            match s.val_loss {
                Some(v) => eprintln!("epoch {:4}  train {:.6e}  val {:.6e}", s.epoch, s.train_loss, v),
                None => eprintln!("epoch {:4}  train {:.6e}", s.epoch, s.train_loss),
            }
        }
    })
    .context("training failed")?;

    create_dir(&args.out)?;
    let ckpt_path = args.out.join(format!("{MODEL_NAME}.{CHECKPOINT_EXT}"));
    let ckpt = Checkpoint {
        params,
        config: Some(cfg.train.clone()),
        report: Some(report.clone()),
        shape: Some(shape),
    };
    save_checkpoint(&ckpt_path, &ckpt)?;
    if load_checkpoint(&ckpt_path)? != ckpt {
        bail!("checkpoint {} did not read back identically", ckpt_path.display());
    }
    let loss_path = args.out.join(LOSS_NAME);
    report.save_csv(&loss_path)?;
    manifest.output(&ckpt_path);
    manifest.output(&loss_path);
    manifest.finish(&args.out.join(MANIFEST_NAME))?;
    println!(
        "trained {} samples for {} epochs in {:.1} s: loss {:.4e} -> {:.4e}, checkpoint {}",
        loaded.dataset.len(),
        cfg.train.epochs,
        report.wall_time_secs,
        report.initial_train_loss,
        report.train_loss.last().copied().unwrap_or(report.initial_train_loss),
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- reconstruct

enum Model {
    ZeroFilled,
    Net(Box<Checkpoint>),
}

impl Model {
    fn run(&self, y: &KSpaceData, mask: &SamplingMask) -> Result<DynamicImage> {
        let shape = y.shape();
        match self {
            Model::ZeroFilled => Ok(zero_filled_recon(y, mask)?),
            Model::Net(ck) => {
                if let Some(s) = ck.shape {
                    if s != shape {
                        bail!("checkpoint was trained on {s:?} volumes but the data is {shape:?}");
                    }
                }
                ck.params.validate_for(shape)?;
                Ok(run_net(y, mask, &ck.params)?)
            }
        }
    }
}

#[derive(Serialize)]
struct ReconstructConfig<'a> {
    checkpoint: Option<&'a Path>,
    zero_filled: bool,
    data: Option<&'a Path>,
    kspace: Option<&'a Path>,
    mask: Option<&'a Path>,
    export_frames: Option<&'a Path>,
}

fn write_recon(path: &Path, x: &DynamicImage, manifest: &mut RunManifest) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_volume(path, x)?;
    if load_volume(path)? != *x {
        bail!("{} did not read back identically", path.display());
    }
    for f in container_files(path) {
        manifest.output(&f);
    }
    Ok(())
}

pub fn reconstruct(args: &ReconstructArgs) -> Result<()> {
    let cfg = ReconstructConfig {
        checkpoint: args.checkpoint.as_deref(),
        zero_filled: args.zero_filled,
        data: args.data.as_deref(),
        kspace: args.kspace.as_deref(),
        mask: args.mask.as_deref(),
        export_frames: args.export_frames.as_deref(),
    };
    let mut manifest = RunManifest::start("reconstruct", &cfg)?;
    let model = match &args.checkpoint {
        Some(p) => {
            manifest.input(p)?;
            Model::Net(Box::new(load_checkpoint(p)?))
        }
        None => Model::ZeroFilled,
    };

    if let Some(data) = &args.data {
        let loaded = load_dir(data)?;
        for f in &loaded.files {
            manifest.input(f)?;
        }
        create_dir(&args.out)?;
        for (id, s) in loaded.ids.iter().zip(loaded.dataset.samples()) {
            let t0 = Instant::now();
            let x = model.run(&s.kspace, &s.mask).with_context(|| format!("sample {id}"))?;
            let secs = t0.elapsed().as_secs_f64();
            let db = psnr(&x, &s.truth)?;
            eprintln!("{id}: {secs:.3} s, PSNR {db:.2} dB");
            write_recon(&volume_path(&args.out, id, RECON_TAG), &x, &mut manifest)?;
            if let Some(dir) = &args.export_frames {
                for f in export_frames(&x, &dir.join(id))? {
                    manifest.output(&f);
                }
            }
        }
        manifest.finish(&args.out.join(MANIFEST_NAME))?;
        println!("reconstructed {} samples into {}", loaded.ids.len(), args.out.display());
    } else {
        let (kp, mp) = match (&args.kspace, &args.mask) {
            (Some(k), Some(m)) => (k, m),
            _ => return Err(usage("give either --data or both --kspace and --mask")),
        };
        let y = load_kspace(kp)?;
        let mask = load_mask(mp)?;
        for p in [kp, mp] {
            for f in container_files(p) {
                manifest.input(&f)?;
            }
        }
        if y.shape() != mask.shape() {
            bail!("k-space is {:?} but the mask is {:?}", y.shape(), mask.shape());
        }
        let t0 = Instant::now();
        let x = model.run(&y, &mask)?;
        eprintln!("reconstructed in {:.3} s", t0.elapsed().as_secs_f64());
        write_recon(&args.out, &x, &mut manifest)?;
        if let Some(dir) = &args.export_frames {
            for f in export_frames(&x, dir)? {
                manifest.output(&f);
            }
        }
        manifest.finish(&file_manifest_path(&args.out))?;
        println!("wrote {}", args.out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

pub const CSV_HEADER: &str = "sample_id,nmse,psnr_db,ssim,hfen";
pub const FOOTER_ID: &str = "mean±std";

fn fields(r: &MetricReport) -> [f64; 4] {
    [r.nmse, r.psnr_db, r.ssim, r.hfen]
}

fn from_fields(v: [f64; 4]) -> MetricReport {
    MetricReport {
        nmse: v[0],
        psnr_db: v[1],
        ssim: v[2],
        hfen: v[3],
    }
}

/// Per-sample rows, then one footer row whose cells read `mean±std`.
/// Numbers use the shortest text that parses back to the same `f64`.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> Result<String> {
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let summary = MetricSummary::from_reports(&reports).ok_or_else(|| anyhow!("no samples to summarize"))?;
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}")?;
    for (id, r) in rows {
        let [a, b, c, d] = fields(r);
        writeln!(out, "{id},{a},{b},{c},{d}")?;
    }
    write!(out, "{FOOTER_ID}")?;
    for (m, s) in fields(&summary.mean).iter().zip(fields(&summary.std)) {
        write!(out, ",{m}±{s}")?;
    }
    out.push('\n');
    Ok(out)
}

/// Inverse of [`metrics_csv`]: the rows and the footer's (mean, std).
pub fn parse_metrics_csv(text: &str) -> Result<(Vec<(String, MetricReport)>, MetricReport, MetricReport)> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        bail!("missing CSV header");
    }
    let mut rows = Vec::new();
    let mut footer = None;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            bail!("expected 5 columns: {line}");
        }
        if cells[0] == FOOTER_ID {
            let mut mean = [0.0; 4];
            let mut std = [0.0; 4];
            for (i, c) in cells[1..].iter().enumerate() {
                let (m, s) = c.split_once('±').ok_or_else(|| anyhow!("bad footer cell {c}"))?;
                mean[i] = m.parse()?;
                std[i] = s.parse()?;
            }
            footer = Some((from_fields(mean), from_fields(std)));
        } else {
            if footer.is_some() {
                bail!("rows after the footer");
            }
            let mut v = [0.0; 4];
            for (i, c) in cells[1..].iter().enumerate() {
                v[i] = c.parse()?;
            }
            rows.push((cells[0].to_string(), from_fields(v)));
        }
    }
    let (mean, std) = footer.ok_or_else(|| anyhow!("missing footer row"))?;
    Ok((rows, mean, std))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let mut manifest = RunManifest::start("evaluate", &serde_json::json!({
        "truth": args.truth,
        "recon": args.recon,
        "tag": args.tag,
    }))?;
    let truth_ids = list_ids(&args.truth, TRUTH_TAG)?;
    let recon_ids = list_ids(&args.recon, &args.tag)?;
    if truth_ids != recon_ids {
        let missing: Vec<&String> = truth_ids.iter().filter(|i| !recon_ids.contains(i)).collect();
        let extra: Vec<&String> = recon_ids.iter().filter(|i| !truth_ids.contains(i)).collect();
        bail!("sample sets differ: no reconstruction for {missing:?}, no ground truth for {extra:?}");
    }
    if truth_ids.is_empty() {
        bail!("no samples in {}", args.truth.display());
    }
    let mut rows = Vec::with_capacity(truth_ids.len());
    for id in &truth_ids {
        let tp = volume_path(&args.truth, id, TRUTH_TAG);
        let rp = volume_path(&args.recon, id, &args.tag);
        let gt = load_volume(&tp)?;
        let x = load_volume(&rp)?;
        for f in container_files(&tp).into_iter().chain(container_files(&rp)) {
            manifest.input(&f)?;
        }
        let r = evaluate_pair(&x, &gt).with_context(|| format!("sample {id}"))?;
        rows.push((id.clone(), r));
    }
    let csv = metrics_csv(&rows)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(&args.out, &csv).with_context(|| format!("writing {}", args.out.display()))?;
    let reread = std::fs::read_to_string(&args.out)?;
    let (back, _, _) = parse_metrics_csv(&reread)?;
    if back != rows {
        bail!("{} did not read back identically", args.out.display());
    }
    manifest.output(&args.out);
    manifest.finish(&file_manifest_path(&args.out))?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lantern::net::{DEFAULT_ETA, DEFAULT_RHO, DEFAULT_STAGES, DEFAULT_SUBSTAGES};

    fn train_args() -> TrainArgs {
        TrainArgs {
            data: "d".into(),
            out: "o".into(),
            config: None,
            init: None,
            stages: None,
            substages: None,
            epochs: None,
            lr: None,
            optimizer: None,
            batch_size: None,
            val_fraction: None,
            clip_norm: None,
            seed: None,
            rho: None,
            eta: None,
            quiet: false,
        }
    }

    #[test]
    fn train_defaults_are_the_published_settings() {
        let cfg = resolve_train(&train_args()).unwrap();
        assert_eq!(cfg.arch.stages, 13);
        assert_eq!(cfg.arch.substages, 1);
        assert_eq!(cfg.train.batch_size, 1);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.epochs, 400);
        assert_eq!(cfg.arch.init, InitMode::DctTv);
        assert_eq!(cfg.train.clip_norm, None);
        assert_eq!(cfg.arch.stages, DEFAULT_STAGES);
        assert_eq!(cfg.arch.substages, DEFAULT_SUBSTAGES);
        assert_eq!(cfg.arch.rho, DEFAULT_RHO);
        assert_eq!(cfg.arch.eta, DEFAULT_ETA);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn train_flags_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs = 5\nlr = 0.5\noptimizer = adam\nclip-norm = 100\n").unwrap();
        let args = TrainArgs {
            config: Some(path),
            lr: Some(0.02),
            ..train_args()
        };
        let cfg = resolve_train(&args).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.learning_rate, 0.02);
        assert_eq!(cfg.train.optimizer, Optimizer::Adam);
        assert_eq!(cfg.train.clip_norm, Some(100.0));
    }

    #[test]
    fn bad_train_values_are_usage_errors() {
        for args in [
            TrainArgs { init: Some("wavelet".into()), ..train_args() },
            TrainArgs { epochs: Some(0), ..train_args() },
            TrainArgs { stages: Some(0), ..train_args() },
            TrainArgs { rho: Some(-1.0), ..train_args() },
        ] {
            let e = resolve_train(&args).unwrap_err();
            assert!(e.downcast_ref::<Usage>().is_some(), "{e}");
        }
    }

    fn report(seed: f64) -> MetricReport {
        MetricReport {
            nmse: 0.1 / seed,
            psnr_db: 30.0 + seed / 3.0,
            ssim: 1.0 - 1.0 / (7.0 * seed),
            hfen: 0.2 * seed.sqrt(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows: Vec<(String, MetricReport)> = (1..=4).map(|i| (sample_id(i), report(i as f64))).collect();
        let text = metrics_csv(&rows).unwrap();
        let (back, mean, std) = parse_metrics_csv(&text).unwrap();
        assert_eq!(back, rows);
        let n = rows.len() as f64;
        let m = rows.iter().map(|(_, r)| r.psnr_db).sum::<f64>() / n;
        assert!((mean.psnr_db - m).abs() <= 1e-12 * m.abs());
        let s = (rows.iter().map(|(_, r)| (r.psnr_db - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std.psnr_db - s).abs() <= 1e-12);
    }

    #[test]
    fn csv_parse_rejects_garbage() {
        assert!(parse_metrics_csv("a,b\n").is_err());
        assert!(parse_metrics_csv(&format!("{CSV_HEADER}\ns,1,2,3,4\n")).is_err());
        assert!(parse_metrics_csv(&format!("{CSV_HEADER}\ns,1,2,x,4\n{FOOTER_ID},1±0,2±0,3±0,4±0\n")).is_err());
    }

    #[test]
    fn manifest_name_for_file_outputs() {
        assert_eq!(
            file_manifest_path(Path::new("a/b.cvol")),
            PathBuf::from("a/b.cvol.manifest.json")
        );
    }
}
