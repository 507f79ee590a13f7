//! Corpus ingestion and derived-dataset management.
//!
//! The toolkit trains on ground-truth (lensed) images only; lensless
//! measurements are synthesized on the fly through the forward model, so any
//! directory of RGB images works as a corpus. Splits are deterministic
//! functions of (filename, seed) and held-out test images never enter
//! training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{load_png, save_png, ImageTensor, PngDepth};
use crate::physics::{forward_image, ConvPolicy, NoiseSpec};
use crate::psf::Psf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train|val|test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub checksum: String,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    /// Working resolution images are resampled to when served.
    pub resolution: usize,
    pub records: Vec<ImageRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic split assignment: hash of (filename, seed) against
/// 80/10/10 fractions.
fn assign_split(file_name: &str, seed: u64) -> Split {
    let mut hasher = Sha256::new();
    hasher.update(file_name.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let frac = h as f64 / u64::MAX as f64;
    if frac < 0.8 {
        Split::Train
    } else if frac < 0.9 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Scan a directory of images into a manifest with a deterministic split.
///
/// Undecodable files abort the ingest (listing every offender) unless
/// `skip_bad` is set, in which case they are skipped and reported.
pub fn ingest(
    dir: &Path,
    resolution: usize,
    seed: u64,
    skip_bad: bool,
) -> Result<(DatasetManifest, Vec<PathBuf>)> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "no images (png/jpg) found in {}",
            dir.display()
        )));
    }

    let mut records = Vec::with_capacity(entries.len());
    let mut bad = Vec::new();
    for path in entries {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        match image::load_from_memory(&bytes) {
            Ok(_) => {
                let name = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                records.push(ImageRecord {
                    split: assign_split(&name, seed),
                    checksum: sha256_hex(&bytes),
                    path: path.canonicalize().map_err(|e| Error::io(&path, e))?,
                });
            }
            Err(_) => bad.push(path),
        }
    }
    if !bad.is_empty() && !skip_bad {
        let listing: Vec<String> = bad.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Dataset(format!(
            "undecodable files (pass --skip-bad to ignore): {}",
            listing.join(", ")
        )));
    }
    if records.is_empty() {
        return Err(Error::Dataset("every candidate image was undecodable".into()));
    }
    Ok((
        DatasetManifest {
            version: 1,
            seed,
            resolution,
            records,
        },
        bad,
    ))
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        Ok(manifest)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_sizes(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            out.insert(
                format!("{split:?}").to_lowercase(),
                self.indices(split).len(),
            );
        }
        out
    }

    /// Decode one record at the manifest resolution, optionally verifying its
    /// checksum first.
    pub fn load_image(&self, index: usize, verify: bool) -> Result<ImageTensor> {
        let record = self
            .records
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("record index {index} out of range")))?;
        if verify {
            let bytes = std::fs::read(&record.path).map_err(|e| Error::io(&record.path, e))?;
            let sum = sha256_hex(&bytes);
            if sum != record.checksum {
                return Err(Error::Dataset(format!(
                    "{}: checksum mismatch (file changed since ingest)",
                    record.path.display()
                )));
            }
        }
        load_png(&record.path)?.to_resolution(self.resolution)
    }
}

/// Load a ground-truth image and synthesize its lensless measurement.
pub fn sample_pair(
    manifest: &DatasetManifest,
    index: usize,
    psf: &Psf,
    noise: &NoiseSpec,
    policy: ConvPolicy,
) -> Result<(ImageTensor, ImageTensor)> {
    let x = manifest.load_image(index, false)?;
    let k = crate::physics::fit_kernel(psf, manifest.resolution, manifest.resolution)?;
    let y = forward_image(&x, &k, noise, policy)?;
    Ok((x, y))
}

/// Procedural ground-truth corpus: smooth gradient backgrounds with random
/// rectangles, disks, and stripes. Good enough to exercise the whole training
/// stack in demos and tests without shipping a dataset.
pub fn generate_demo_corpus(
    dir: &Path,
    count: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = demo_image(resolution, seed.wrapping_add(i as u64));
        let path = dir.join(format!("demo_{i:05}.png"));
        save_png(&img, &path, PngDepth::Eight, Some(seed))?;
        paths.push(path);
    }
    Ok(paths)
}

/// One synthetic scene, deterministic per seed.
pub fn demo_image(resolution: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = resolution;
    let mut data = ndarray::Array3::<f32>::zeros((n, n, 3));

    // Gradient background between two random colors.
    let c0: [f32; 3] = [0.0; 3].map(|_| rng.random_range(0.0..0.6));
    let c1: [f32; 3] = [0.0; 3].map(|_| rng.random_range(0.2..1.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    for i in 0..n {
        for j in 0..n {
            let t = ((i as f64 * dy + j as f64 * dx) / n as f64 * 0.5 + 0.5).clamp(0.0, 1.0) as f32;
            for k in 0..3 {
                data[[i, j, k]] = c0[k] * (1.0 - t) + c1[k] * t;
            }
        }
    }

    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color: [f32; 3] = [0.0; 3].map(|_| rng.random_range(0.0..1.0));
        match rng.random_range(0..3) {
            0 => {
                let h = rng.random_range(n / 8..n / 2);
                let w = rng.random_range(n / 8..n / 2);
                let r0 = rng.random_range(0..n - h);
                let c0 = rng.random_range(0..n - w);
                for i in r0..r0 + h {
                    for j in c0..c0 + w {
                        for k in 0..3 {
                            data[[i, j, k]] = color[k];
                        }
                    }
                }
            }
            1 => {
                let r = rng.random_range(n as f64 / 12.0..n as f64 / 4.0);
                let cy = rng.random_range(0.0..n as f64);
                let cx = rng.random_range(0.0..n as f64);
                for i in 0..n {
                    for j in 0..n {
                        let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                        if d < r {
                            for k in 0..3 {
                                data[[i, j, k]] = color[k];
                            }
                        }
                    }
                }
            }
            _ => {
                let period = rng.random_range(n / 16..n / 4).max(2);
                let vertical = rng.random_range(0..2) == 0;
                let phase = rng.random_range(0..period);
                for i in 0..n {
                    for j in 0..n {
                        let coord = if vertical { j } else { i };
                        if (coord + phase) / (period / 2).max(1) % 2 == 0 {
                            for k in 0..3 {
                                data[[i, j, k]] = 0.5 * data[[i, j, k]] + 0.5 * color[k];
                            }
                        }
                    }
                }
            }
        }
    }
    ImageTensor::from_valid(data)
}

/// Record of one synthesized lensless measurement.
#[derive(Debug, Serialize, Deserialize)]
pub struct DerivedRecord {
    pub source: PathBuf,
    pub lensless: String,
    pub psf: String,
    pub noise_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DerivedManifest {
    pub version: u32,
    pub sigma: f64,
    pub records: Vec<DerivedRecord>,
}

/// Write a derived lensless dataset: each selected image convolved with a PSF
/// (round-robin over the family) plus noise, as 16-bit PNGs with a JSON
/// manifest.
pub fn synthesize_derived(
    manifest: &DatasetManifest,
    psfs: &[(String, Psf)],
    split: Split,
    sigma: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DerivedManifest> {
    if psfs.is_empty() {
        return Err(Error::InvalidArgument("no PSFs supplied".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let indices = manifest.indices(split);
    if indices.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    let mut records = Vec::with_capacity(indices.len());
    for (row, &idx) in indices.iter().enumerate() {
        let (name, psf) = &psfs[row % psfs.len()];
        let noise_seed = seed.wrapping_add(row as u64);
        let noise = NoiseSpec::new(sigma, noise_seed)?;
        let (_, y) = sample_pair(manifest, idx, psf, &noise, ConvPolicy::circular())?;
        let file = format!("lensless_{row:05}.png");
        save_png(&y, &out_dir.join(&file), PngDepth::Sixteen, Some(noise_seed))?;
        records.push(DerivedRecord {
            source: manifest.records[idx].path.clone(),
            lensless: file,
            psf: name.clone(),
            noise_seed,
        });
    }
    let derived = DerivedManifest {
        version: 1,
        sigma,
        records,
    };
    std::fs::write(
        out_dir.join("derived.json"),
        serde_json::to_string_pretty(&derived)? + "\n",
    )
    .map_err(|e| Error::io(out_dir, e))?;
    Ok(derived)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf::{random_permutation, shuffle_psf, split_sections, synthetic_caustic};

    #[test]
    fn ingest_empty_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(dir.path(), 32, 0, false),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn ingest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        generate_demo_corpus(dir.path(), 12, 16, 7).unwrap();
        let (a, _) = ingest(dir.path(), 16, 3, false).unwrap();
        let (b, _) = ingest(dir.path(), 16, 3, false).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn splits_are_disjoint_and_roughly_eighty_ten_ten() {
        let dir = tempfile::tempdir().unwrap();
        generate_demo_corpus(dir.path(), 300, 8, 1).unwrap();
        let (m, _) = ingest(dir.path(), 8, 5, false).unwrap();
        let (tr, va, te) = (
            m.indices(Split::Train).len(),
            m.indices(Split::Val).len(),
            m.indices(Split::Test).len(),
        );
        assert_eq!(tr + va + te, 300);
        let trf = tr as f64 / 300.0;
        assert!((trf - 0.8).abs() < 0.08, "train fraction {trf}");
        assert!(va > 0 && te > 0);
    }

    #[test]
    fn skip_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_demo_corpus(dir.path(), 3, 8, 2).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        assert!(ingest(dir.path(), 8, 0, false).is_err());
        let (m, bad) = ingest(dir.path(), 8, 0, true).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(bad.len(), 1);
    }

    #[test]
    fn checksum_verification_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        generate_demo_corpus(dir.path(), 1, 8, 3).unwrap();
        let (m, _) = ingest(dir.path(), 8, 0, false).unwrap();
        m.load_image(0, true).unwrap();
        let img = demo_image(8, 999);
        save_png(&img, &m.records[0].path, PngDepth::Eight, None).unwrap();
        assert!(m.load_image(0, true).is_err());
    }

    #[test]
    fn sample_pair_delta_psf_zero_noise_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        generate_demo_corpus(dir.path(), 1, 16, 4).unwrap();
        let (m, _) = ingest(dir.path(), 16, 0, false).unwrap();
        let mut d = ndarray::Array2::<f32>::zeros((16, 16));
        d[[7, 7]] = 1.0; // center of a 16-grid under the (len-1)/2 convention
        let delta = Psf::new(d).unwrap();
        let (x, y) =
            sample_pair(&m, 0, &delta, &NoiseSpec::none(), ConvPolicy::circular()).unwrap();
        for (a, b) in x.data().iter().zip(y.data().iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn distinct_permutations_give_distinct_measurements() {
        let dir = tempfile::tempdir().unwrap();
        generate_demo_corpus(dir.path(), 1, 20, 5).unwrap();
        let (m, _) = ingest(dir.path(), 20, 0, false).unwrap();
        let seed_psf = synthetic_caustic(20, 0);
        let grid = split_sections(&seed_psf, 5, 5).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in 0..6u64 {
            let k = shuffle_psf(&grid, &random_permutation(25, s).unwrap()).unwrap();
            let (_, y) =
                sample_pair(&m, 0, &k, &NoiseSpec::none(), ConvPolicy::circular()).unwrap();
            let bits: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(bits), "collision at permutation seed {s}");
        }
    }

    #[test]
    fn demo_images_are_deterministic_and_in_range() {
        let a = demo_image(24, 11);
        let b = demo_image(24, 11);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
