//! The cyclic adversarial training loop.
//!
//! Each iteration follows the same shape: sample lensed images, generate one
//! shuffled PSF per element, synthesize noisy lensless measurements with the
//! forward model, update the critics with the generator frozen, then update
//! the generator (with freshly synthesized measurements) while the critics
//! are frozen. Critics warm up alone before the first generator update.
//!
//! Freezing is structural: the frozen side's parameters are bound into the
//! graph as constants, so no gradient can exist for them, and the optimizer
//! for the other side never touches them.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::spectral::KernelSpectra;
use crate::autodiff::Var;
use crate::critics::{build_critic, Critic, CriticSpec};
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::generators::{build_generator, prepare_psf_aux, Generator, GeneratorSpec};
use crate::losses::{
    generator_adversarial_loss, generator_supervised_loss, total_critic_loss,
    total_generator_loss, CriticBatch, CriticLossTerms, LossWeights,
};
use crate::nn::{
    adam::Adam, export_params, import_params, params_hash, tensor_io, Ctx, NetModule,
};
use crate::physics::{batch_spectra, forward_op, noise_field, NoiseSpec};
use crate::psf::{
    load_psf, random_permutation, save_psf, split_sections, shuffle_psf, Permutation, Psf,
    PsfSectionGrid,
};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub optimizer: OptimizerConfig,
    pub critic_steps_per_gen: usize,
    pub seed: u64,
    pub resolution: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub loss_weights: LossWeights,
    /// `Some(n)`: draw PSFs from a fixed pool of n permutations; `None`:
    /// fresh permutation for every batch element (the full augmentation).
    pub psf_pool: Option<usize>,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub val_interval: usize,
    /// Images used per validation pass.
    pub val_batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 4,
            warmup_iters: 1000,
            total_iters: 10_000,
            optimizer: OptimizerConfig::default(),
            critic_steps_per_gen: 1,
            seed: 0,
            resolution: 128,
            grid_rows: 5,
            grid_cols: 5,
            loss_weights: LossWeights::default(),
            psf_pool: None,
            checkpoint_interval: 500,
            log_interval: 10,
            val_interval: 500,
            val_batch: 8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, m: String| {
            Err(Error::Config {
                path: format!("training.{path}"),
                message: m,
            })
        };
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if self.total_iters == 0 {
            return fail("total_iters", "must be at least 1".into());
        }
        if self.critic_steps_per_gen == 0 {
            return fail("critic_steps_per_gen", "must be at least 1".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return fail("grid_rows", "section grid must be positive".into());
        }
        if let Some(0) = self.psf_pool {
            return fail("psf_pool", "pool size must be at least 1".into());
        }
        if self.val_batch == 0 {
            return fail("val_batch", "must be at least 1".into());
        }
        self.loss_weights.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngCursor {
    seed: u64,
    word_hi: u64,
    word_lo: u64,
}

fn save_cursor(seed: u64, rng: &ChaCha8Rng) -> RngCursor {
    let pos = rng.get_word_pos();
    RngCursor {
        seed,
        word_hi: (pos >> 64) as u64,
        word_lo: pos as u64,
    }
}

fn restore_cursor(c: &RngCursor) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    rng.set_word_pos(((c.word_hi as u128) << 64) | c.word_lo as u128);
    rng
}

/// Everything the forward model produced for one batch.
pub struct SynthBatch<T: Scalar> {
    pub permutations: Vec<Permutation>,
    pub psfs: Vec<Psf>,
    pub spectra: Rc<KernelSpectra<T>>,
    pub psf_aux: ArrayD<T>,
    pub lensless: ArrayD<T>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct GeneratorLossTerms {
    pub adversarial: f64,
    pub supervised: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValRecord {
    pub iteration: usize,
    pub seen_psnr_db: f64,
    pub seen_baseline_psnr_db: f64,
    pub unseen_psnr_db: f64,
    pub unseen_baseline_psnr_db: f64,
    /// mean |F(G(y,k),k) - y| on the seen validation batch.
    pub cycle_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic: Option<CriticLossTerms>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorLossTerms>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValRecord>,
    pub wall_ms: f64,
}

/// Serialized trainer state (everything but the tensors).
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerState {
    version: u32,
    iteration: usize,
    warmup_done: bool,
    config: TrainingConfig,
    generator_spec: GeneratorSpec,
    critic_patch_spec: CriticSpec,
    critic_global_spec: CriticSpec,
    manifest_path: PathBuf,
    rng_data: RngCursor,
    rng_psf: RngCursor,
    rng_noise: RngCursor,
    rng_alpha: RngCursor,
    psf_pool: Vec<Permutation>,
    val_seen: Permutation,
    val_unseen: Permutation,
    post_warmup_val: Option<ValRecord>,
}

pub struct Trainer<T: Scalar> {
    pub config: TrainingConfig,
    pub generator: Generator<T>,
    pub critic_patch: Critic<T>,
    pub critic_global: Critic<T>,
    opt_gen: Adam<T>,
    opt_patch: Adam<T>,
    opt_global: Adam<T>,
    iteration: usize,
    warmup_done: bool,
    rng_data: ChaCha8Rng,
    rng_psf: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
    rng_alpha: ChaCha8Rng,
    seed_psf: Psf,
    seed_grid: PsfSectionGrid,
    psf_pool: Vec<Permutation>,
    val_seen: Permutation,
    val_unseen: Permutation,
    manifest: DatasetManifest,
    manifest_path: PathBuf,
    train_indices: Vec<usize>,
    val_indices: Vec<usize>,
    image_cache: HashMap<usize, Rc<ArrayD<T>>>,
    post_warmup_val: Option<ValRecord>,
}

const STREAM_DATA: u64 = 0x6461_7461;
const STREAM_PSF: u64 = 0x7073_665f;
const STREAM_NOISE: u64 = 0x6e6f_6973;
const STREAM_ALPHA: u64 = 0x616c_7068;

impl<T: Scalar> Trainer<T> {
    pub fn new(
        config: TrainingConfig,
        generator_spec: &GeneratorSpec,
        critic_patch_spec: &CriticSpec,
        critic_global_spec: &CriticSpec,
        manifest: DatasetManifest,
        manifest_path: PathBuf,
        seed_psf: Psf,
    ) -> Result<Self> {
        config.validate()?;
        if generator_spec.input_resolution != config.resolution {
            return Err(Error::Config {
                path: "generator.input_resolution".into(),
                message: format!(
                    "generator resolution {} != training resolution {}",
                    generator_spec.input_resolution, config.resolution
                ),
            });
        }
        if manifest.resolution != config.resolution {
            return Err(Error::Config {
                path: "training.resolution".into(),
                message: format!(
                    "manifest resolution {} != training resolution {}",
                    manifest.resolution, config.resolution
                ),
            });
        }
        let train_indices = manifest.indices(Split::Train);
        let val_indices = manifest.indices(Split::Val);
        if train_indices.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        if val_indices.is_empty() {
            return Err(Error::Dataset("validation split is empty".into()));
        }

        let seed_grid = split_sections(&seed_psf, config.grid_rows, config.grid_cols)?;
        let sections = seed_grid.section_count();
        let mut rng_psf = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_PSF);

        let mut psf_pool = Vec::new();
        if let Some(n) = config.psf_pool {
            let mut seen = std::collections::HashSet::new();
            while psf_pool.len() < n {
                let perm = random_permutation(sections, rng_psf.random::<u64>())?;
                if seen.insert(perm.mapping().to_vec()) {
                    psf_pool.push(perm);
                }
                if sections == 1 {
                    break; // only the identity exists
                }
            }
        }
        // Fixed validation permutations: the seen one comes from the pool (or
        // a reference draw), the unseen one is guaranteed outside the pool.
        let val_seen = psf_pool
            .first()
            .cloned()
            .unwrap_or(random_permutation(sections, config.seed ^ 0x5ee9)?);
        let mut val_unseen = random_permutation(sections, config.seed ^ 0x0dd5)?;
        if sections > 1 {
            let mut bump = 0u64;
            while psf_pool.iter().any(|p| p.mapping() == val_unseen.mapping())
                || val_unseen.mapping() == val_seen.mapping()
            {
                bump += 1;
                val_unseen = random_permutation(sections, (config.seed ^ 0x0dd5) + bump)?;
            }
        }

        let generator = build_generator(generator_spec, config.seed ^ 0x9e37)?;
        let critic_patch = build_critic(critic_patch_spec, config.resolution, config.seed ^ 0x511d)?;
        let critic_global =
            build_critic(critic_global_spec, config.resolution, config.seed ^ 0x610b)?;
        let opt = &config.optimizer;
        Ok(Trainer {
            rng_data: ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_DATA),
            rng_noise: ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_NOISE),
            rng_alpha: ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_ALPHA),
            rng_psf,
            opt_gen: Adam::new(opt.lr, opt.beta1, opt.beta2),
            opt_patch: Adam::new(opt.lr, opt.beta1, opt.beta2),
            opt_global: Adam::new(opt.lr, opt.beta1, opt.beta2),
            iteration: 0,
            warmup_done: false,
            generator,
            critic_patch,
            critic_global,
            seed_psf,
            seed_grid,
            psf_pool,
            val_seen,
            val_unseen,
            manifest,
            manifest_path,
            train_indices,
            val_indices,
            image_cache: HashMap::new(),
            post_warmup_val: None,
            config,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn warmup_done(&self) -> bool {
        self.warmup_done
    }

    pub fn post_warmup_val(&self) -> Option<&ValRecord> {
        self.post_warmup_val.as_ref()
    }

    pub fn val_permutations(&self) -> (&Permutation, &Permutation) {
        (&self.val_seen, &self.val_unseen)
    }

    fn cached_image(&mut self, index: usize) -> Result<Rc<ArrayD<T>>> {
        if let Some(img) = self.image_cache.get(&index) {
            return Ok(Rc::clone(img));
        }
        let img = self.manifest.load_image(index, false)?;
        let chw = Rc::new(img.to_chw::<T>());
        self.image_cache.insert(index, Rc::clone(&chw));
        Ok(chw)
    }

    fn stack_images(&mut self, indices: &[usize]) -> Result<ArrayD<T>> {
        let res = self.config.resolution;
        let mut out = ArrayD::zeros(IxDyn(&[indices.len(), 3, res, res]));
        for (i, &idx) in indices.iter().enumerate() {
            let img = self.cached_image(idx)?;
            out.index_axis_mut(ndarray::Axis(0), i)
                .assign(&img.view().into_dimensionality::<ndarray::Ix3>().expect("CHW image"));
        }
        Ok(out)
    }

    /// Draw one training batch of lensed images.
    pub fn sample_lensed(&mut self) -> Result<ArrayD<T>> {
        let indices: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.train_indices[self.rng_data.random_range(0..self.train_indices.len())])
            .collect();
        self.stack_images(&indices)
    }

    fn draw_permutation(&mut self) -> Result<Permutation> {
        if self.psf_pool.is_empty() {
            random_permutation(self.seed_grid.section_count(), self.rng_psf.random::<u64>())
        } else {
            let i = self.rng_psf.random_range(0..self.psf_pool.len());
            Ok(self.psf_pool[i].clone())
        }
    }

    /// Shuffle one PSF per batch element and push the batch through the
    /// forward model: `y_i = k_i * x_i + noise`.
    pub fn synthesize_batch(&mut self, lensed: &ArrayD<T>) -> Result<SynthBatch<T>> {
        let n = lensed.shape()[0];
        let res = self.config.resolution;
        let mut permutations = Vec::with_capacity(n);
        let mut psfs = Vec::with_capacity(n);
        for _ in 0..n {
            let perm = self.draw_permutation()?;
            psfs.push(shuffle_psf(&self.seed_grid, &perm)?);
            permutations.push(perm);
        }
        let spectra = batch_spectra::<T>(&psfs, res, res)?;
        let sigma = self.config.loss_weights.noise_sigma;
        let noise = NoiseSpec::new(sigma, self.rng_noise.random::<u64>())?;
        let eta = noise_field::<T>(lensed.shape(), &noise);
        let lensless = forward_op(&Var::constant(lensed.clone()), &spectra, Some(&eta))
            .value()
            .clone();
        let psf_aux = prepare_psf_aux::<T>(&self.generator.spec, &psfs)?;
        Ok(SynthBatch {
            permutations,
            psfs,
            spectra,
            psf_aux,
            lensless,
        })
    }

    /// One critic update on a freshly synthesized batch; the generator runs
    /// in inference mode and is untouched.
    pub fn discriminator_step(&mut self, lensed: &ArrayD<T>) -> Result<CriticLossTerms> {
        let synth = self.synthesize_batch(lensed)?;

        // Frozen generator: constants in, constants out.
        let mut gen_ctx = Ctx::inference();
        let fake_lensed = self
            .generator
            .forward(
                &mut gen_ctx,
                &Var::constant(synth.lensless.clone()),
                &Var::constant(synth.psf_aux.clone()),
            )?
            .image;
        let sigma = self.config.loss_weights.noise_sigma;
        let noise = NoiseSpec::new(sigma, self.rng_noise.random::<u64>())?;
        let eta = noise_field::<T>(fake_lensed.shape(), &noise);
        let fake_lensless = forward_op(&fake_lensed, &synth.spectra, Some(&eta));

        let mut ctx = Ctx::train();
        let batch = CriticBatch {
            lensed_real: lensed,
            lensless_real: &synth.lensless,
            lensed_fake: fake_lensed.value(),
            lensless_fake: fake_lensless.value(),
        };
        let (total, terms) = total_critic_loss(
            &self.critic_patch,
            &self.critic_global,
            &mut ctx,
            &batch,
            &self.config.loss_weights,
            self.rng_alpha.random::<u64>(),
        )?;
        if !total.all_finite() {
            return Err(Error::Numeric(format!(
                "iteration {}: critic loss went non-finite",
                self.iteration
            )));
        }
        let grads = total.backward();
        self.opt_patch.step(&mut self.critic_patch, &ctx, &grads);
        self.opt_global.step(&mut self.critic_global, &ctx, &grads);
        Ok(terms)
    }

    /// One generator update with the critics frozen; synthesizes its own
    /// fresh lensless batch from the same lensed images.
    pub fn generator_step(&mut self, lensed: &ArrayD<T>) -> Result<GeneratorLossTerms> {
        let synth = self.synthesize_batch(lensed)?;

        let mut gen_ctx = Ctx::train();
        let fake_lensed = self
            .generator
            .forward(
                &mut gen_ctx,
                &Var::constant(synth.lensless.clone()),
                &Var::constant(synth.psf_aux.clone()),
            )?
            .image;
        // The cycle: push the estimate back through the physics, in-graph.
        let sigma = self.config.loss_weights.noise_sigma;
        let noise = NoiseSpec::new(sigma, self.rng_noise.random::<u64>())?;
        let eta = noise_field::<T>(fake_lensed.shape(), &noise);
        let fake_lensless = forward_op(&fake_lensed, &synth.spectra, Some(&eta));

        // Frozen critics: their parameters bind as constants here.
        let mut critic_ctx = Ctx::inference();
        let adversarial = generator_adversarial_loss(
            &self.critic_patch,
            &self.critic_global,
            &mut critic_ctx,
            &fake_lensed,
            &fake_lensless,
        )?;
        let supervised = generator_supervised_loss(
            &Var::constant(lensed.clone()),
            &fake_lensed,
            &Var::constant(synth.lensless.clone()),
            &fake_lensless,
        );
        let total = total_generator_loss(&adversarial, &supervised, &self.config.loss_weights);
        if !total.all_finite() {
            return Err(Error::Numeric(format!(
                "iteration {}: generator loss went non-finite",
                self.iteration
            )));
        }
        let terms = GeneratorLossTerms {
            adversarial: adversarial.scalar().as_f64(),
            supervised: supervised.scalar().as_f64(),
            total: total.scalar().as_f64(),
        };
        let grads = total.backward();
        self.opt_gen.step(&mut self.generator, &gen_ctx, &grads);
        Ok(terms)
    }

    /// Critic-only warmup; generator parameters are bit-identical afterwards.
    pub fn warmup<F: FnMut(LogRecord)>(&mut self, mut sink: F) -> Result<()> {
        if self.warmup_done {
            return Ok(());
        }
        let gen_hash = params_hash(&self.generator);
        for w in 0..self.config.warmup_iters {
            let t0 = Instant::now();
            let lensed = self.sample_lensed()?;
            let terms = self.discriminator_step(&lensed)?;
            if (w + 1) % self.config.log_interval == 0 || w + 1 == self.config.warmup_iters {
                sink(LogRecord {
                    phase: "warmup".into(),
                    iteration: w + 1,
                    critic: Some(terms),
                    critic_total: Some(terms.total()),
                    generator: None,
                    validation: None,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                });
            }
        }
        debug_assert_eq!(gen_hash, params_hash(&self.generator));
        self.warmup_done = true;
        let val = self.validate()?;
        self.post_warmup_val = Some(val.clone());
        sink(LogRecord {
            phase: "val".into(),
            iteration: 0,
            critic: None,
            critic_total: None,
            generator: None,
            validation: Some(val),
            wall_ms: 0.0,
        });
        Ok(())
    }

    /// One full iteration: `critic_steps_per_gen` critic updates, then one
    /// generator update on the same lensed batch.
    pub fn step_once(&mut self) -> Result<LogRecord> {
        let t0 = Instant::now();
        let mut critic_terms = CriticLossTerms::default();
        let mut lensed = self.sample_lensed()?;
        for s in 0..self.config.critic_steps_per_gen {
            if s > 0 {
                lensed = self.sample_lensed()?;
            }
            critic_terms = self.discriminator_step(&lensed)?;
        }
        let gen_terms = self.generator_step(&lensed)?;
        self.iteration += 1;
        Ok(LogRecord {
            phase: "train".into(),
            iteration: self.iteration,
            critic: Some(critic_terms),
            critic_total: Some(critic_terms.total()),
            generator: Some(gen_terms),
            validation: None,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Reconstruct a fixed validation batch under the seen and unseen
    /// permutations; reports PSNR against ground truth, the raw lensless
    /// baseline, and the cycle residual.
    pub fn validate(&mut self) -> Result<ValRecord> {
        let indices: Vec<usize> = self
            .val_indices
            .iter()
            .copied()
            .take(self.config.val_batch)
            .collect();
        let lensed = self.stack_images(&indices)?;
        let sigma = self.config.loss_weights.noise_sigma;

        let mut seen_stats = (0.0, 0.0, 0.0); // (psnr, baseline, cycle)
        let mut unseen_stats = (0.0, 0.0);
        for (tag, perm) in [("seen", self.val_seen.clone()), ("unseen", self.val_unseen.clone())] {
            let psf = shuffle_psf(&self.seed_grid, &perm)?;
            let psfs = vec![psf; indices.len()];
            let spectra = batch_spectra::<T>(&psfs, self.config.resolution, self.config.resolution)?;
            // Fixed noise seed: validation numbers are comparable across
            // iterations and runs.
            let noise = NoiseSpec::new(sigma, self.config.seed ^ 0x7a1)?;
            let eta = noise_field::<T>(lensed.shape(), &noise);
            let lensless = forward_op(&Var::constant(lensed.clone()), &spectra, Some(&eta));
            let aux = prepare_psf_aux::<T>(&self.generator.spec, &psfs)?;
            let recon = self
                .generator
                .forward(
                    &mut Ctx::inference(),
                    &Var::constant(lensless.value().clone()),
                    &Var::constant(aux),
                )?
                .image;

            let psnr_val = batch_psnr(recon.value(), &lensed);
            let baseline = batch_psnr(lensless.value(), &lensed);
            if tag == "seen" {
                // Cycle residual against the measurement (noiseless re-blur).
                let reblur = forward_op(&recon.detach(), &spectra, None);
                let residual = reblur
                    .value()
                    .iter()
                    .zip(lensless.value().iter())
                    .map(|(a, b)| (*a - *b).abs().as_f64())
                    .sum::<f64>()
                    / reblur.len() as f64;
                seen_stats = (psnr_val, baseline, residual);
            } else {
                unseen_stats = (psnr_val, baseline);
            }
        }
        Ok(ValRecord {
            iteration: self.iteration,
            seen_psnr_db: seen_stats.0,
            seen_baseline_psnr_db: seen_stats.1,
            unseen_psnr_db: unseen_stats.0,
            unseen_baseline_psnr_db: unseen_stats.1,
            cycle_residual: seen_stats.2,
        })
    }

    /// Warmup (if pending) plus the main loop, with JSONL logging,
    /// checkpoints, and periodic validation under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("log.jsonl");
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut write_rec = |rec: &LogRecord| -> Result<()> {
            let line = serde_json::to_string(rec)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
        };

        if !self.warmup_done {
            let mut pending = Vec::new();
            self.warmup(|rec| pending.push(rec))?;
            for rec in &pending {
                write_rec(rec)?;
            }
            self.save_checkpoint(out_dir)?;
        }
        while self.iteration < self.config.total_iters {
            let rec = self.step_once()?;
            if rec.iteration % self.config.log_interval == 0
                || rec.iteration == self.config.total_iters
            {
                write_rec(&rec)?;
            }
            if rec.iteration % self.config.val_interval == 0
                || rec.iteration == self.config.total_iters
            {
                let val = self.validate()?;
                write_rec(&LogRecord {
                    phase: "val".into(),
                    iteration: rec.iteration,
                    critic: None,
                    critic_total: None,
                    generator: None,
                    validation: Some(val),
                    wall_ms: 0.0,
                })?;
            }
            if rec.iteration % self.config.checkpoint_interval == 0
                || rec.iteration == self.config.total_iters
            {
                self.save_checkpoint(out_dir)?;
            }
        }
        Ok(())
    }

    /// Atomic checkpoint: write to a temp dir, rename into place, then point
    /// `LATEST` at it.
    pub fn save_checkpoint(&self, out_dir: &Path) -> Result<()> {
        let name = format!("iter_{:06}", self.iteration);
        let ck_root = out_dir.join("checkpoints");
        std::fs::create_dir_all(&ck_root).map_err(|e| Error::io(&ck_root, e))?;
        let tmp = ck_root.join(format!("{name}.tmp"));
        let final_dir = ck_root.join(&name);
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

        tensor_io::write_tensors(&tmp.join("generator.bin"), &export_params(&self.generator))?;
        tensor_io::write_tensors(
            &tmp.join("critic_patch.bin"),
            &export_params(&self.critic_patch),
        )?;
        tensor_io::write_tensors(
            &tmp.join("critic_global.bin"),
            &export_params(&self.critic_global),
        )?;
        for (file, opt, net) in [
            ("optim_gen.bin", &self.opt_gen, &self.generator as &dyn NetModule<T>),
            ("optim_patch.bin", &self.opt_patch, &self.critic_patch as &dyn NetModule<T>),
            ("optim_global.bin", &self.opt_global, &self.critic_global as &dyn NetModule<T>),
        ] {
            let (step, mut tensors) = opt.export_state(net);
            tensors.push((
                "__step".to_string(),
                ArrayD::from_elem(IxDyn(&[1]), T::cast(step as f64)),
            ));
            tensor_io::write_tensors(&tmp.join(file), &tensors)?;
        }
        save_psf(&self.seed_psf, &tmp.join("seed_psf.psf"))?;

        let state = TrainerState {
            version: 1,
            iteration: self.iteration,
            warmup_done: self.warmup_done,
            config: self.config.clone(),
            generator_spec: self.generator.spec.clone(),
            critic_patch_spec: self.critic_patch.spec.clone(),
            critic_global_spec: self.critic_global.spec.clone(),
            manifest_path: self.manifest_path.clone(),
            rng_data: save_cursor(self.config.seed ^ STREAM_DATA, &self.rng_data),
            rng_psf: save_cursor(self.config.seed ^ STREAM_PSF, &self.rng_psf),
            rng_noise: save_cursor(self.config.seed ^ STREAM_NOISE, &self.rng_noise),
            rng_alpha: save_cursor(self.config.seed ^ STREAM_ALPHA, &self.rng_alpha),
            psf_pool: self.psf_pool.clone(),
            val_seen: self.val_seen.clone(),
            val_unseen: self.val_unseen.clone(),
            post_warmup_val: self.post_warmup_val.clone(),
        };
        std::fs::write(
            tmp.join("state.json"),
            serde_json::to_string_pretty(&state)? + "\n",
        )
        .map_err(|e| Error::io(&tmp, e))?;

        if final_dir.exists() {
            std::fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
        }
        std::fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
        std::fs::write(ck_root.join("LATEST"), name.as_bytes())
            .map_err(|e| Error::io(&ck_root, e))?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint directory, bit-compatible with the
    /// run that wrote it.
    pub fn resume(checkpoint: &Path) -> Result<Self> {
        let state_text = std::fs::read_to_string(checkpoint.join("state.json"))
            .map_err(|e| Error::io(checkpoint, e))?;
        let state: TrainerState = serde_json::from_str(&state_text)?;
        let manifest = DatasetManifest::load(&state.manifest_path)?;
        let seed_psf = load_psf(&checkpoint.join("seed_psf.psf"))?;

        // Missing pretrained backbones must not block resuming: the weights
        // come from the checkpoint tensors anyway.
        let mut global_spec = state.critic_global_spec.clone();
        global_spec.allow_random_init = true;

        let mut trainer = Trainer::new(
            state.config.clone(),
            &state.generator_spec,
            &state.critic_patch_spec,
            &global_spec,
            manifest,
            state.manifest_path.clone(),
            seed_psf,
        )?;
        trainer.critic_global.spec = state.critic_global_spec.clone();
        trainer.iteration = state.iteration;
        trainer.warmup_done = state.warmup_done;
        trainer.psf_pool = state.psf_pool.clone();
        trainer.val_seen = state.val_seen.clone();
        trainer.val_unseen = state.val_unseen.clone();
        trainer.post_warmup_val = state.post_warmup_val.clone();
        trainer.rng_data = restore_cursor(&state.rng_data);
        trainer.rng_psf = restore_cursor(&state.rng_psf);
        trainer.rng_noise = restore_cursor(&state.rng_noise);
        trainer.rng_alpha = restore_cursor(&state.rng_alpha);

        import_params(
            &mut trainer.generator,
            tensor_io::read_tensors::<T>(&checkpoint.join("generator.bin"))?.into_iter(),
        )?;
        import_params(
            &mut trainer.critic_patch,
            tensor_io::read_tensors::<T>(&checkpoint.join("critic_patch.bin"))?.into_iter(),
        )?;
        import_params(
            &mut trainer.critic_global,
            tensor_io::read_tensors::<T>(&checkpoint.join("critic_global.bin"))?.into_iter(),
        )?;
        fn load_opt<T: Scalar>(
            checkpoint: &Path,
            file: &str,
            opt: &mut Adam<T>,
            net: &dyn NetModule<T>,
        ) -> Result<()> {
            let mut tensors = tensor_io::read_tensors::<T>(&checkpoint.join(file))?;
            let step_pos = tensors
                .iter()
                .position(|(n, _)| n == "__step")
                .ok_or_else(|| Error::Checkpoint(format!("{file}: missing __step")))?;
            let (_, step_arr) = tensors.remove(step_pos);
            let step = step_arr[[0]].as_f64() as u64;
            opt.import_state(net, step, tensors)
        }
        load_opt(checkpoint, "optim_gen.bin", &mut trainer.opt_gen, &trainer.generator)?;
        load_opt(
            checkpoint,
            "optim_patch.bin",
            &mut trainer.opt_patch,
            &trainer.critic_patch,
        )?;
        load_opt(
            checkpoint,
            "optim_global.bin",
            &mut trainer.opt_global,
            &trainer.critic_global,
        )?;
        Ok(trainer)
    }

    pub fn latest_checkpoint(out_dir: &Path) -> Result<PathBuf> {
        let ck_root = out_dir.join("checkpoints");
        let latest = std::fs::read_to_string(ck_root.join("LATEST"))
            .map_err(|e| Error::io(&ck_root, e))?;
        Ok(ck_root.join(latest.trim()))
    }
}

/// Mean PSNR over a batch pair (arrays in NCHW).
fn batch_psnr<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> f64 {
    let n = a.shape()[0];
    let per = a.len() / n;
    let mut total = 0.0;
    let a_std = a.as_standard_layout();
    let b_std = b.as_standard_layout();
    let av = a_std.as_slice().expect("layout");
    let bv = b_std.as_slice().expect("layout");
    for i in 0..n {
        let mse: f64 = av[i * per..(i + 1) * per]
            .iter()
            .zip(&bv[i * per..(i + 1) * per])
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>()
            / per as f64;
        total += if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (1.0 / mse).log10()
        };
    }
    total / n as f64
}
