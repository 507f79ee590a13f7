//! Library-level implementations of the operator commands. The `lenslesskit`
//! binary is a thin argument parser over these functions, which keeps every
//! command testable in-process.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::critics::CriticSpec;
use crate::data::{self, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::generators::{build_generator, prepare_psf_aux, Generator};
use crate::image::{contact_sheet, load_png, save_png, ImageTensor, PngDepth};
use crate::metrics::{psnr, runtime_benchmark, ssim, BenchRow, EvalEntry, EvalReport, SsimParams};
use crate::nn::{import_params, tensor_io, Ctx};
use crate::physics::{apply_forward, direct_convolve, fft_convolve, ConvPolicy, NoiseSpec};
use crate::psf::{
    load_psf, random_permutation, save_psf, shuffle_psf, split_sections, synthetic_caustic,
    Permutation, Psf, ShuffleManifest, ShuffleRecord,
};
use crate::training::Trainer;
use crate::autodiff::Var;
use ndarray::{ArrayD, IxDyn};

/// `ingest`: scan an image directory into a split manifest.
pub fn cmd_ingest(
    dir: &Path,
    out: &Path,
    resolution: usize,
    seed: u64,
    skip_bad: bool,
) -> Result<()> {
    let (manifest, bad) = data::ingest(dir, resolution, seed, skip_bad)?;
    manifest.save(out)?;
    for b in &bad {
        eprintln!("skipped undecodable file: {}", b.display());
    }
    println!(
        "ingested {} images -> {} (splits: {:?})",
        manifest.records.len(),
        out.display(),
        manifest.split_sizes()
    );
    Ok(())
}

/// `psf synth`: write a procedural caustic-style seed PSF.
pub fn cmd_psf_synth(size: usize, seed: u64, out: &Path) -> Result<()> {
    let psf = synthetic_caustic(size, seed).normalize()?;
    save_psf(&psf, out)?;
    println!(
        "wrote {size}x{size} seed PSF (sparsity fraction {:.3}) -> {}",
        psf.sparsity_fraction(),
        out.display()
    );
    Ok(())
}

/// `psf shuffle`: emit a family of section-permuted PSFs plus a manifest that
/// makes each one reproducible.
pub fn cmd_psf_shuffle(
    seed_psf: &Path,
    grid: (usize, usize),
    count: usize,
    rng_seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let seed = load_psf(seed_psf)?;
    let sections = split_sections(&seed, grid.0, grid.1)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(count);
    let mut previews: Vec<Psf> = Vec::new();
    for i in 0..count {
        let perm_seed = rng_seed.wrapping_add(i as u64);
        let perm = random_permutation(sections.section_count(), perm_seed)?;
        let shuffled = shuffle_psf(&sections, &perm)?;
        let file = format!("psf_{i:05}.psf");
        save_psf(&shuffled, &out_dir.join(&file))?;
        if previews.len() < 8 {
            previews.push(shuffled);
        }
        records.push(ShuffleRecord {
            file,
            permutation: perm.mapping().to_vec(),
            rng_seed: perm_seed,
        });
    }
    let manifest = ShuffleManifest {
        seed_psf: seed_psf.display().to_string(),
        grid_rows: grid.0,
        grid_cols: grid.1,
        records,
    };
    let manifest_path = out_dir.join("psf_manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)? + "\n",
    )
    .map_err(|e| Error::io(&manifest_path, e))?;

    let tiles: Vec<ImageTensor> = previews.iter().map(|p| p.to_preview()).collect();
    if !tiles.is_empty() {
        let row: Vec<&ImageTensor> = tiles.iter().collect();
        let sheet = contact_sheet(&[row], 128)?;
        save_png(&sheet, &out_dir.join("preview.png"), PngDepth::Eight, Some(rng_seed))?;
    }
    println!("wrote {count} shuffled PSFs -> {}", out_dir.display());
    Ok(())
}

/// `synthesize`: derive a lensless dataset from a manifest split.
#[allow(clippy::too_many_arguments)]
pub fn cmd_synthesize(
    manifest_path: &Path,
    seed_psf: &Path,
    split: &str,
    count_psfs: usize,
    grid: (usize, usize),
    sigma: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let seed_k = load_psf(seed_psf)?;
    let sections = split_sections(&seed_k, grid.0, grid.1)?;
    let mut psfs = Vec::with_capacity(count_psfs.max(1));
    for i in 0..count_psfs.max(1) {
        let perm = random_permutation(sections.section_count(), seed.wrapping_add(i as u64))?;
        let k = shuffle_psf(&sections, &perm)?;
        let name = format!("psf_{i:03}");
        save_psf(&k, &out_dir.join(format!("{name}.psf")).with_extension("psf")).ok();
        psfs.push((name, k));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let derived = data::synthesize_derived(
        &manifest,
        &psfs,
        Split::parse(split)?,
        sigma,
        seed,
        out_dir,
    )?;
    println!(
        "synthesized {} lensless measurements -> {}",
        derived.records.len(),
        out_dir.display()
    );
    Ok(())
}

/// `train`: run (or resume) the full loop described by a run config.
pub fn cmd_train(config_path: &Path, resume: bool) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    config.save_copy()?;
    let out_dir = config.output_dir.clone();

    let mut trainer: Trainer<f32> = if resume {
        let latest = Trainer::<f32>::latest_checkpoint(&out_dir)?;
        println!("resuming from {}", latest.display());
        Trainer::resume(&latest)?
    } else {
        let manifest = DatasetManifest::load(&config.data.manifest)?;
        let seed_psf = load_psf(&config.data.seed_psf)?;
        Trainer::new(
            config.training.clone(),
            &config.generator,
            &config.critic_patch,
            &config.critic_global,
            manifest,
            config.data.manifest.clone(),
            seed_psf,
        )?
    };
    trainer.run(&out_dir)?;
    let val = trainer.validate()?;
    println!(
        "finished at iteration {}: seen {:.2} dB (baseline {:.2}), unseen {:.2} dB, cycle residual {:.4}",
        trainer.iteration(),
        val.seen_psnr_db,
        val.seen_baseline_psnr_db,
        val.unseen_psnr_db,
        val.cycle_residual
    );
    Ok(())
}

/// A generator re-hydrated from a checkpoint directory.
pub struct LoadedGenerator {
    pub generator: Generator<f32>,
    pub resolution: usize,
    pub seed_psf: Psf,
    pub grid: (usize, usize),
    pub val_seen: Permutation,
    pub val_unseen: Permutation,
    pub manifest_path: PathBuf,
    pub fingerprint: String,
}

pub fn load_generator(checkpoint: &Path) -> Result<LoadedGenerator> {
    let state_path = checkpoint.join("state.json");
    let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state: serde_json::Value = serde_json::from_str(&text)?;
    let gen_spec: crate::generators::GeneratorSpec =
        serde_json::from_value(state["generator_spec"].clone())?;
    let val_seen: Permutation = serde_json::from_value(state["val_seen"].clone())?;
    let val_unseen: Permutation = serde_json::from_value(state["val_unseen"].clone())?;
    let grid = (
        state["config"]["grid_rows"].as_u64().unwrap_or(5) as usize,
        state["config"]["grid_cols"].as_u64().unwrap_or(5) as usize,
    );
    let manifest_path = PathBuf::from(
        state["manifest_path"]
            .as_str()
            .ok_or_else(|| Error::Checkpoint("state.json missing manifest_path".into()))?,
    );
    let mut generator = build_generator::<f32>(&gen_spec, 0)?;
    import_params(
        &mut generator,
        tensor_io::read_tensors::<f32>(&checkpoint.join("generator.bin"))?.into_iter(),
    )?;
    let seed_psf = load_psf(&checkpoint.join("seed_psf.psf"))?;
    let fingerprint = {
        use sha2::Digest;
        let digest = sha2::Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    };
    Ok(LoadedGenerator {
        resolution: gen_spec.input_resolution,
        generator,
        seed_psf,
        grid,
        val_seen,
        val_unseen,
        manifest_path,
        fingerprint,
    })
}

/// Reconstruct one lensless image with a known PSF (the pipeline is
/// non-blind: the PSF is an input, never estimated).
pub fn reconstruct_image(
    loaded: &LoadedGenerator,
    lensless: &ImageTensor,
    psf: &Psf,
) -> Result<ImageTensor> {
    let res = loaded.resolution;
    if lensless.height() != res || lensless.width() != res {
        return Err(Error::Shape(format!(
            "lensless input is {}x{}, checkpoint expects {res}x{res}",
            lensless.height(),
            lensless.width()
        )));
    }
    let aux = prepare_psf_aux::<f32>(&loaded.generator.spec, std::slice::from_ref(psf))?;
    let chw = lensless.to_chw::<f32>();
    let mut batched = ArrayD::zeros(IxDyn(&[1, 3, res, res]));
    batched.index_axis_mut(ndarray::Axis(0), 0).assign(
        &chw.view().into_dimensionality::<ndarray::Ix3>().expect("CHW"),
    );
    let out = loaded
        .generator
        .forward(
            &mut Ctx::inference(),
            &Var::constant(batched),
            &Var::constant(aux),
        )?
        .image;
    let plane = out.value().index_axis(ndarray::Axis(0), 0).to_owned();
    ImageTensor::from_chw(&plane)
}

/// `reconstruct` command body.
pub fn cmd_reconstruct(
    checkpoint: &Path,
    input: &Path,
    psf_path: &Path,
    out: &Path,
    truth: Option<&Path>,
    sheet: Option<&Path>,
) -> Result<()> {
    let loaded = load_generator(checkpoint)?;
    let lensless = load_png(input)?;
    let psf = load_psf(psf_path)?;
    let recon = reconstruct_image(&loaded, &lensless, &psf)?;
    save_png(&recon, out, PngDepth::Eight, None)?;
    println!("reconstruction -> {}", out.display());

    if let Some(truth_path) = truth {
        let truth_img = load_png(truth_path)?.to_resolution(loaded.resolution)?;
        let db = psnr(&truth_img, &recon, 1.0)?;
        let s = ssim(&truth_img, &recon, &SsimParams::default())?;
        let metrics = serde_json::json!({
            "psnr_db": if db.is_finite() { serde_json::json!(db) } else { serde_json::json!("inf") },
            "ssim": s,
            "checkpoint_fingerprint": loaded.fingerprint,
        });
        let mpath = out.with_extension("metrics.json");
        std::fs::write(&mpath, serde_json::to_string_pretty(&metrics)? + "\n")
            .map_err(|e| Error::io(&mpath, e))?;
        println!("psnr {db:.2} dB, ssim {s:.4} -> {}", mpath.display());
    }
    if let Some(sheet_path) = sheet {
        let preview = psf.to_preview();
        let row: Vec<&ImageTensor> = vec![&lensless, &preview, &recon];
        let grid = contact_sheet(&[row], loaded.resolution)?;
        save_png(&grid, sheet_path, PngDepth::Eight, None)?;
    }
    Ok(())
}

/// `eval`: reconstruct a whole split under a PSF mode and report PSNR/SSIM.
pub fn cmd_eval(
    checkpoint: &Path,
    split: &str,
    psf_mode: &str,
    limit: Option<usize>,
    out: &Path,
    sheet: Option<&Path>,
) -> Result<EvalReport> {
    let loaded = load_generator(checkpoint)?;
    let manifest = DatasetManifest::load(&loaded.manifest_path)?;
    if manifest.resolution != loaded.resolution {
        return Err(Error::Config {
            path: "manifest.resolution".into(),
            message: "manifest and checkpoint resolutions differ".into(),
        });
    }
    let split_parsed = Split::parse(split)?;
    let sections = split_sections(&loaded.seed_psf, loaded.grid.0, loaded.grid.1)?;
    let psf = match psf_mode {
        "seen" => shuffle_psf(&sections, &loaded.val_seen)?,
        "unseen" => shuffle_psf(&sections, &loaded.val_unseen)?,
        "single" => loaded.seed_psf.normalize()?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown psf mode `{other}` (expected seen|unseen|single)"
            )))
        }
    };

    let indices = manifest.indices(split_parsed);
    if indices.is_empty() {
        return Err(Error::Dataset(format!("split {split} is empty")));
    }
    let take = limit.unwrap_or(indices.len()).min(indices.len());
    let mut entries = Vec::with_capacity(take);
    let mut sheet_rows: Vec<Vec<ImageTensor>> = Vec::new();
    for (row, &idx) in indices.iter().take(take).enumerate() {
        let noise = NoiseSpec::new(0.01, eval_seed(row))?;
        let (x, y) = data::sample_pair(&manifest, idx, &psf, &noise, ConvPolicy::circular())?;
        let recon = reconstruct_image(&loaded, &y, &psf)?;
        let entry = EvalEntry {
            name: manifest.records[idx]
                .path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("image")
                .to_string(),
            psnr_db: psnr(&x, &recon, 1.0)?,
            ssim: ssim(&x, &recon, &SsimParams::default())?,
            baseline_psnr_db: psnr(&x, &y, 1.0)?,
        };
        entries.push(entry);
        if sheet_rows.len() < 6 {
            sheet_rows.push(vec![x, y, recon]);
        }
    }
    let report = EvalReport::from_entries(psf_mode, split, entries, loaded.fingerprint.clone());
    std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")
        .map_err(|e| Error::io(out, e))?;
    let csv_path = out.with_extension("csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    if let Some(sheet_path) = sheet {
        let rows: Vec<Vec<&ImageTensor>> = sheet_rows
            .iter()
            .map(|r| r.iter().collect::<Vec<_>>())
            .collect();
        let grid = contact_sheet(&rows, loaded.resolution.min(128))?;
        save_png(&grid, sheet_path, PngDepth::Eight, None)?;
    }
    println!(
        "eval [{psf_mode}/{split}] over {take} images: psnr {:.2} dB (baseline {:.2}), ssim {:.4} -> {}",
        report.mean_psnr_db,
        report.mean_baseline_psnr_db,
        report.mean_ssim,
        out.display()
    );
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub shuffle_median_seconds: f64,
}

/// `bench`: FFT vs direct convolution timing plus the PSF shuffle timing.
pub fn cmd_bench(
    sizes: &[usize],
    batch: usize,
    kernel: Option<usize>,
    repeats: usize,
    out: Option<&Path>,
) -> Result<BenchReport> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rows = Vec::new();
    for &size in sizes {
        let ksize = kernel.unwrap_or((size / 4).max(3));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(size as u64);
        let kdata =
            ndarray::Array2::from_shape_fn((ksize, ksize), |_| rng.random_range(0.0..1.0f32));
        let k = Psf::new(kdata)?.normalize()?;
        let batch_data: Vec<ArrayD<f32>> = (0..batch)
            .map(|_| {
                ArrayD::from_shape_simple_fn(IxDyn(&[3, size, size]), || {
                    rng.random_range(0.0..1.0f32)
                })
            })
            .collect();

        let fft_row = runtime_benchmark("fft_convolve", size, batch, 1, repeats, || {
            for x in &batch_data {
                std::hint::black_box(fft_convolve(x, &k, ConvPolicy::circular()).unwrap());
            }
        });
        println!(
            "fft    {size:4}x{size:<4} k{ksize:<3} batch {batch}: {:.4} s",
            fft_row.median_seconds
        );
        let direct_row = runtime_benchmark("direct_convolve", size, batch, 0, repeats, || {
            for x in &batch_data {
                std::hint::black_box(direct_convolve(x, &k, ConvPolicy::circular()).unwrap());
            }
        });
        println!(
            "direct {size:4}x{size:<4} k{ksize:<3} batch {batch}: {:.4} s",
            direct_row.median_seconds
        );
        rows.push(fft_row);
        rows.push(direct_row);
    }

    // PSF shuffle timing at seed-PSF resolution.
    let seed = synthetic_caustic(128, 0);
    let grid = split_sections(&seed, 5, 5)?;
    let mut i = 0u64;
    let shuffle_row = runtime_benchmark("psf_shuffle", 128, 1, 5, 101, || {
        let perm = random_permutation(25, i).unwrap();
        i += 1;
        std::hint::black_box(shuffle_psf(&grid, &perm).unwrap());
    });
    println!("psf shuffle 128x128  5x5: {:.6} s", shuffle_row.median_seconds);

    let report = BenchReport {
        shuffle_median_seconds: shuffle_row.median_seconds,
        rows,
    };
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Demo helper shared by examples and the smoke tests: corpus + manifest +
/// seed PSF + run config, all under one directory.
pub fn prepare_demo_run(
    root: &Path,
    images: usize,
    resolution: usize,
    seed: u64,
) -> Result<RunConfig> {
    let corpus = root.join("corpus");
    data::generate_demo_corpus(&corpus, images, resolution * 2, seed)?;
    let manifest_path = root.join("manifest.json");
    let (manifest, _) = data::ingest(&corpus, resolution, seed, false)?;
    manifest.save(&manifest_path)?;
    let psf_path = root.join("seed.psf");
    // Compact caustic: the demo models a mask close to the sensor, so the
    // seed PSF is stored at its support size and the forward model embeds it.
    // Section shuffles then rearrange the caustic within that support.
    let support = (resolution * 3 / 8).max(8);
    save_psf(&synthetic_caustic(support, seed).normalize()?, &psf_path)?;
    Ok(RunConfig {
        schema_version: 1,
        output_dir: root.join("run"),
        data: crate::config::DataConfig {
            manifest: manifest_path,
            seed_psf: psf_path,
        },
        training: crate::training::TrainingConfig {
            resolution,
            ..Default::default()
        },
        generator: crate::generators::GeneratorSpec {
            input_resolution: resolution,
            ..Default::default()
        },
        critic_patch: CriticSpec::patch(),
        critic_global: CriticSpec {
            allow_random_init: true,
            ..CriticSpec::global()
        },
    })
}

/// Forward-model demo used by an example: synthesize one measurement.
pub fn demo_forward(out_dir: &Path, resolution: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let x = data::demo_image(resolution, seed);
    let k = synthetic_caustic(resolution, seed).normalize()?;
    let chw = x.to_chw::<f32>();
    let noise = NoiseSpec::new(0.01, seed)?;
    let y = apply_forward(&chw, &k, &noise, ConvPolicy::circular())?;
    let y_img = ImageTensor::from_chw(&y.mapv(|v| v.clamp(0.0, 1.0)))?;
    save_png(&x, &out_dir.join("lensed.png"), PngDepth::Eight, Some(seed))?;
    save_png(&y_img, &out_dir.join("lensless.png"), PngDepth::Eight, Some(seed))?;
    save_png(
        &k.to_preview(),
        &out_dir.join("psf.png"),
        PngDepth::Eight,
        Some(seed),
    )?;
    Ok(())
}

fn eval_seed(row: usize) -> u64 {
    0x5eed_0000u64 ^ row as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_small_sizes_fft_not_slower_overall() {
        let report = cmd_bench(&[32], 2, Some(16), 1, None).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.shuffle_median_seconds < 0.01);
    }

    #[test]
    fn demo_run_config_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = prepare_demo_run(dir.path(), 12, 32, 0).unwrap();
        // resolution 32 with default depth 4 gives bottleneck 2, valid.
        cfg.validate().unwrap();
    }
}
