//! Scratch probe: can the generator overfit one fixed batch?

use lenslesskit::autodiff::Var;
use lenslesskit::data::demo_image;
use lenslesskit::generators::{
    build_generator, prepare_psf_aux, GeneratorSpec, GeneratorVariant, PsfBranchKind,
};
use lenslesskit::losses::generator_supervised_loss;
use lenslesskit::nn::{Adam, Ctx};
use lenslesskit::physics::{batch_spectra, forward_op};
use lenslesskit::psf::synthetic_caustic;
use ndarray::{ArrayD, IxDyn};

fn main() {
    let res = 64usize;
    let n = 2usize;
    let spec = GeneratorSpec {
        variant: GeneratorVariant::Y,
        psf_branch: PsfBranchKind::Sparse,
        base_channels: 8,
        depth: 3,
        input_resolution: res,
        psf_feature_channels: 16,
        norm: false,
        input_skip: std::env::var("SKIP").map(|v| v != "0").unwrap_or(true),
        ..GeneratorSpec::default()
    };
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let beta2: f64 = std::env::var("B2").ok().and_then(|v| v.parse().ok()).unwrap_or(0.9);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(300);

    let mut g = build_generator::<f32>(&spec, 7).unwrap();
    let b1: f64 = std::env::var("B1").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5);
    let mut opt = Adam::new(lr, b1, beta2);

    let psfs: Vec<_> = (0..n).map(|i| synthetic_caustic(24, i as u64)).collect();
    let spectra = batch_spectra::<f32>(&psfs, res, res).unwrap();
    let aux = prepare_psf_aux::<f32>(&spec, &psfs).unwrap();

    let pool_images: usize = std::env::var("POOL")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let noise_sigma: f32 = std::env::var("SIGMA")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.0);

    let make_batch = |seed: u64| -> ArrayD<f32> {
        let mut x = ArrayD::zeros(IxDyn(&[n, 3, res, res]));
        for i in 0..n {
            let id = if pool_images > 0 {
                100 + ((seed as usize * 7 + i * 3) % pool_images) as u64
            } else {
                100 + i as u64
            };
            let img = demo_image(res, id).to_chw::<f32>();
            x.index_axis_mut(ndarray::Axis(0), i)
                .assign(&img.view().into_dimensionality::<ndarray::Ix3>().unwrap());
        }
        x
    };
    let x_eval = make_batch(0);
    let y_eval = forward_op(&Var::constant(x_eval.clone()), &spectra, None).value().clone();

    for step in 0..steps {
        let x = make_batch(step as u64);
        let mut y = forward_op(&Var::constant(x.clone()), &spectra, None).value().clone();
        if noise_sigma > 0.0 {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(step as u64);
            for v in y.iter_mut() {
                *v += noise_sigma * rng.random_range(-1.0f32..1.0);
            }
        }
        let mut ctx = Ctx::train();
        let xbar = g
            .forward(&mut ctx, &Var::constant(y.clone()), &Var::constant(aux.clone()))
            .unwrap()
            .image;
        let ybar = forward_op(&xbar, &spectra, None);
        let loss = generator_supervised_loss(
            &Var::constant(x.clone()),
            &xbar,
            &Var::constant(y.clone()),
            &ybar,
        );
        if step % 25 == 0 || step == steps - 1 {
            let mut ectx = Ctx::inference();
            let xe = g
                .forward(&mut ectx, &Var::constant(y_eval.clone()), &Var::constant(aux.clone()))
                .unwrap()
                .image;
            let mse: f32 = xe
                .value()
                .iter()
                .zip(x_eval.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                / x_eval.len() as f32;
            println!(
                "step {step:4}  sup {:.5}  eval-psnr {:.2}",
                loss.scalar(),
                10.0 * (1.0 / mse as f64).log10()
            );
        }
        let grads = loss.backward();
        opt.step(&mut g, &ctx, &grads);
    }
}
