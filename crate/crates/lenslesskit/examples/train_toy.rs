//! End-to-end toy training on a procedural corpus.
//!
//! Builds a small demo dataset, trains the cyclic adversarial pipeline for a
//! few hundred iterations, and prints validation PSNR under seen and unseen
//! PSF permutations. Tune via env vars:
//!
//! ```text
//! TOY_IMAGES=200 TOY_RES=64 TOY_ITERS=2000 TOY_WARMUP=200 TOY_BATCH=4 \
//! TOY_BASE=8 TOY_DEPTH=3 TOY_POOL=3 cargo run --release --example train_toy
//! ```

use std::time::Instant;

use lenslesskit::cli::prepare_demo_run;
use lenslesskit::data::DatasetManifest;
use lenslesskit::generators::{GeneratorSpec, GeneratorVariant, PsfBranchKind};
use lenslesskit::psf::load_psf;
use lenslesskit::training::Trainer;

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let images = env_usize("TOY_IMAGES", 60);
    let res = env_usize("TOY_RES", 64);
    let iters = env_usize("TOY_ITERS", 300);
    let warmup = env_usize("TOY_WARMUP", 50);
    let batch = env_usize("TOY_BATCH", 4);
    let base = env_usize("TOY_BASE", 8);
    let depth = env_usize("TOY_DEPTH", 3);
    let pool = env_usize("TOY_POOL", 3);
    let lr = std::env::var("TOY_LR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1e-3f64);
    let adv = std::env::var("TOY_ADV")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1.0f64);
    let sup = std::env::var("TOY_SUP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(10.0f64);

    let root = std::env::temp_dir().join(format!("lenslesskit_toy_{res}_{images}"));
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    std::fs::create_dir_all(&root)?;
    println!("workspace: {}", root.display());

    let mut cfg = prepare_demo_run(&root, images, res, 42)?;
    cfg.training.total_iters = iters;
    cfg.training.warmup_iters = warmup;
    cfg.training.batch_size = batch;
    cfg.training.psf_pool = Some(pool);
    // Toy scale favors the supervised terms: the critics train from scratch
    // on tiny data, so their early signal is weak.
    cfg.training.loss_weights.adversarial = adv;
    cfg.training.loss_weights.supervised = sup;
    cfg.training.optimizer.lr = lr;
    cfg.training.checkpoint_interval = iters.max(1);
    cfg.training.val_interval = (iters / 4).max(1);
    cfg.training.log_interval = 25;
    cfg.generator = GeneratorSpec {
        variant: GeneratorVariant::Y,
        psf_branch: PsfBranchKind::Sparse,
        base_channels: base,
        depth,
        input_resolution: res,
        psf_feature_channels: base * 2,
        norm: std::env::var("TOY_NORM").map(|v| v == "1").unwrap_or(false),
        input_skip: std::env::var("TOY_SKIP").map(|v| v != "0").unwrap_or(true),
        ..GeneratorSpec::default()
    };
    cfg.critic_patch.base_channels = base;
    cfg.critic_global.base_channels = base;
    cfg.validate()?;
    cfg.save_copy()?;

    let manifest = DatasetManifest::load(&cfg.data.manifest)?;
    let seed_psf = load_psf(&cfg.data.seed_psf)?;
    let mut trainer: Trainer<f32> = Trainer::new(
        cfg.training.clone(),
        &cfg.generator,
        &cfg.critic_patch,
        &cfg.critic_global,
        manifest,
        cfg.data.manifest.clone(),
        seed_psf,
    )?;

    let t0 = Instant::now();
    trainer.run(&cfg.output_dir)?;
    let val = trainer.validate()?;
    println!(
        "done in {:.1}s: seen {:.2} dB (raw lensless baseline {:.2} dB), unseen {:.2} dB, cycle residual {:.4}",
        t0.elapsed().as_secs_f64(),
        val.seen_psnr_db,
        val.seen_baseline_psnr_db,
        val.unseen_psnr_db,
        val.cycle_residual
    );
    if let Some(post) = trainer.post_warmup_val() {
        println!(
            "post-warmup reference: seen {:.2} dB, cycle residual {:.4}",
            post.seen_psnr_db, post.cycle_residual
        );
    }
    println!(
        "checkpoints and logs under {}",
        cfg.output_dir.display()
    );
    Ok(())
}
