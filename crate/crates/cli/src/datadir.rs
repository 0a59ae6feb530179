//! On-disk dataset layout: per sample `<id>.truth.cvol`, `<id>.kspace.cvol`
//! and `<id>.mask.cmask`, each with its JSON sidecar.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lantern::data::{Dataset, DynamicImage, Sample};
use lantern::io::{load_kspace, load_mask, load_volume, sidecar_path};

pub const TRUTH_TAG: &str = "truth";
pub const KSPACE_TAG: &str = "kspace";
pub const MASK_TAG: &str = "mask";
pub const RECON_TAG: &str = "recon";

pub fn sample_id(i: usize) -> String {
    format!("sample_{i:04}")
}

pub fn volume_path(dir: &Path, id: &str, tag: &str) -> PathBuf {
    dir.join(format!("{id}.{tag}.cvol"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{MASK_TAG}.cmask"))
}

/// Payload plus sidecar.
pub fn container_files(path: &Path) -> [PathBuf; 2] {
    [path.to_path_buf(), sidecar_path(path)]
}

/// Sorted ids of every `<id>.<tag>.cvol` in `dir`.
pub fn list_ids(dir: &Path, tag: &str) -> Result<Vec<String>> {
    let suffix = format!(".{tag}.cvol");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(&suffix)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

/// A loaded sample directory together with every file that was read.
pub struct LoadedData {
    pub ids: Vec<String>,
    pub dataset: Dataset,
    pub files: Vec<PathBuf>,
}

pub fn load_dir(dir: &Path) -> Result<LoadedData> {
    let ids = list_ids(dir, TRUTH_TAG)?;
    if ids.is_empty() {
        bail!("no samples (*.{TRUTH_TAG}.cvol) in {}", dir.display());
    }
    let mut samples = Vec::with_capacity(ids.len());
    let mut files = Vec::new();
    for id in &ids {
        let tp = volume_path(dir, id, TRUTH_TAG);
        let kp = volume_path(dir, id, KSPACE_TAG);
        let mp = mask_path(dir, id);
        let truth = load_volume(&tp).with_context(|| format!("sample {id}"))?;
        let kspace = load_kspace(&kp).with_context(|| format!("sample {id}"))?;
        let mask = load_mask(&mp).with_context(|| format!("sample {id}"))?;
        if kspace.shape() != truth.shape() || mask.shape() != truth.shape() {
            bail!("sample {id}: truth, k-space and mask shapes differ");
        }
        for p in [tp, kp, mp] {
            files.extend(container_files(&p));
        }
        samples.push(Sample { kspace, mask, truth });
    }
    let dataset = Dataset::new(samples).context("samples must all have the same shape")?;
    Ok(LoadedData { ids, dataset, files })
}

/// Magnitudes of every frame as 8-bit binary PGM images, scaled so the
/// volume's largest magnitude maps to 255.
pub fn export_frames(image: &DynamicImage, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let shape = image.shape();
    let peak = image.max_magnitude();
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let mut written = Vec::with_capacity(shape.nt);
    for t in 0..shape.nt {
        let mut bytes = format!("P5\n{} {}\n255\n", shape.nx, shape.ny).into_bytes();
        // Frame storage is x-fastest, which is PGM's row order.
        bytes.extend(image.frame(t).iter().map(|z| (z.norm() * scale).round().clamp(0.0, 255.0) as u8));
        let path = dir.join(format!("frame_{t:03}.pgm"));
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lantern::data::Shape;
    use num_complex::Complex64;

    #[test]
    fn pgm_frames() {
        let shape = Shape::new(3, 2, 2);
        let data: Vec<Complex64> = (0..shape.len()).map(|i| Complex64::new(0.0, i as f64)).collect();
        let img = DynamicImage::new(shape, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_frames(&img, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let bytes = std::fs::read(&files[1]).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 6);
        assert_eq!(px[5], 255);
        assert_eq!(px[0], (6.0f64 * 255.0 / 11.0).round() as u8);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dir(dir.path()).is_err());
    }
}
