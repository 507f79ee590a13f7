//! Training objectives: critic real/fake terms with a drift penalty,
//! gradient penalties on domain mixtures, the Wasserstein generator loss,
//! and the dual-domain supervised support.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Var};
use crate::critics::ScoreModel;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::scalar::Scalar;

/// Scalar weights of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Quadratic penalty on real-sample critic scores (keeps magnitudes from
    /// drifting).
    pub drift: f64,
    /// Gradient-penalty coefficient (soft Lipschitz constraint).
    pub gradient_penalty: f64,
    /// Weight of the adversarial generator term.
    pub adversarial: f64,
    /// Weight of the supervised dual-domain L1 term.
    pub supervised: f64,
    /// Additive noise level of the forward model on [0,1]-scaled images.
    pub noise_sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            drift: 1e-4,
            gradient_penalty: 1.0,
            adversarial: 10.0,
            supervised: 1.0,
            noise_sigma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("drift", self.drift),
            ("gradient_penalty", self.gradient_penalty),
            ("adversarial", self.adversarial),
            ("supervised", self.supervised),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config {
                    path: format!("loss_weights.{name}"),
                    message: format!("must be nonnegative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// `-mean D(real) + drift * mean D(real)^2`.
pub fn critic_loss_real<T: Scalar>(
    critic: &dyn ScoreModel<T>,
    ctx: &mut Ctx<T>,
    reals: &Var<T>,
    drift: T,
) -> Var<T> {
    let scores = critic.score(ctx, reals);
    let wasserstein = ops::neg(&ops::mean_all(&scores));
    let drift_term = ops::scale(&ops::mean_all(&ops::square(&scores)), drift);
    ops::add(&wasserstein, &drift_term)
}

/// `+mean D(fake)`.
pub fn critic_loss_fake<T: Scalar>(
    critic: &dyn ScoreModel<T>,
    ctx: &mut Ctx<T>,
    fakes: &Var<T>,
) -> Var<T> {
    ops::mean_all(&critic.score(ctx, fakes))
}

/// One mixing coefficient per batch element, uniform on [0, 1].
pub fn sample_mix_coeffs<T: Scalar>(seed: u64, n: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| T::uniform01(&mut rng)).collect()
}

/// Convex per-sample mixture `alpha * fake + (1 - alpha) * real`, exposed as
/// a gradient endpoint for the penalty.
pub struct MixSample<T: Scalar> {
    pub mixed: Var<T>,
    pub alphas: Vec<T>,
}

pub fn build_mix<T: Scalar>(
    reals: &ArrayD<T>,
    fakes: &ArrayD<T>,
    alphas: &[T],
) -> Result<MixSample<T>> {
    if reals.shape() != fakes.shape() {
        return Err(Error::Shape(format!(
            "mix operands differ: {:?} vs {:?}",
            reals.shape(),
            fakes.shape()
        )));
    }
    let n = reals.shape()[0];
    if alphas.len() != n {
        return Err(Error::Shape(format!(
            "{} mixing coefficients for a batch of {n}",
            alphas.len()
        )));
    }
    let mut mixed = ArrayD::zeros(IxDyn(reals.shape()));
    for (i, &alpha) in alphas.iter().enumerate() {
        let r = reals.index_axis(ndarray::Axis(0), i);
        let f = fakes.index_axis(ndarray::Axis(0), i);
        let mut m = mixed.index_axis_mut(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut m)
            .and(&r)
            .and(&f)
            .for_each(|mv, &rv, &fv| *mv = alpha * fv + (T::one() - alpha) * rv);
    }
    Ok(MixSample {
        mixed: Var::leaf(mixed),
        alphas: alphas.to_vec(),
    })
}

/// `(weight / N) * sum_i (|| grad_mix D(mix_i) ||_2 - 1)^2`.
///
/// The inner gradient is a graph value, so the returned loss differentiates
/// through it when the critic parameters are bound in train mode.
pub fn gradient_penalty<T: Scalar>(
    critic: &dyn ScoreModel<T>,
    ctx: &mut Ctx<T>,
    reals: &ArrayD<T>,
    fakes: &ArrayD<T>,
    weight: T,
    alphas: &[T],
) -> Result<Var<T>> {
    let mix = build_mix(reals, fakes, alphas)?;
    let n = mix.mixed.shape()[0];
    let scores = critic.score(ctx, &mix.mixed);
    // Per-sample scores are independent, so the gradient of their sum is the
    // stack of per-sample input gradients.
    let grads = ops::sum_all(&scores).backward();
    let g = grads.wrt_or_zeros(&mix.mixed);
    let reduce_axes: Vec<usize> = (1..g.shape().len()).collect();
    let sq = ops::reshape(&ops::sum_axes(&ops::square(&g), &reduce_axes), &[n]);
    // Tiny epsilon keeps sqrt differentiable at exactly zero gradient.
    let norms = ops::sqrt(&ops::add_scalar(&sq, T::cast(1e-12)));
    let shifted = ops::add_scalar(&norms, -T::one());
    Ok(ops::scale(&ops::mean_all(&ops::square(&shifted)), weight))
}

/// Seeded convenience wrapper over [`gradient_penalty`].
pub fn gradient_penalty_seeded<T: Scalar>(
    critic: &dyn ScoreModel<T>,
    ctx: &mut Ctx<T>,
    reals: &ArrayD<T>,
    fakes: &ArrayD<T>,
    weight: T,
    seed: u64,
) -> Result<Var<T>> {
    let alphas = sample_mix_coeffs::<T>(seed, reals.shape()[0]);
    gradient_penalty(critic, ctx, reals, fakes, weight, &alphas)
}

/// One full critic batch: both domains, real and synthesized.
pub struct CriticBatch<'a, T: Scalar> {
    pub lensed_real: &'a ArrayD<T>,
    pub lensless_real: &'a ArrayD<T>,
    pub lensed_fake: &'a ArrayD<T>,
    pub lensless_fake: &'a ArrayD<T>,
}

/// The six summands of the critic objective, evaluated for logging.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CriticLossTerms {
    pub patch_real: f64,
    pub global_real: f64,
    pub patch_fake: f64,
    pub global_fake: f64,
    pub patch_mix: f64,
    pub global_mix: f64,
}

impl CriticLossTerms {
    pub fn total(&self) -> f64 {
        self.patch_real
            + self.global_real
            + self.patch_fake
            + self.global_fake
            + self.patch_mix
            + self.global_mix
    }
}

/// Sum of all six critic terms. The patch critic judges the lensless domain,
/// the global critic the lensed domain.
pub fn total_critic_loss<T: Scalar>(
    patch: &dyn ScoreModel<T>,
    global: &dyn ScoreModel<T>,
    ctx: &mut Ctx<T>,
    batch: &CriticBatch<'_, T>,
    weights: &LossWeights,
    mix_seed: u64,
) -> Result<(Var<T>, CriticLossTerms)> {
    let drift = T::cast(weights.drift);
    let penalty = T::cast(weights.gradient_penalty);

    let patch_real = critic_loss_real(patch, ctx, &Var::constant(batch.lensless_real.clone()), drift);
    let global_real = critic_loss_real(global, ctx, &Var::constant(batch.lensed_real.clone()), drift);
    let patch_fake = critic_loss_fake(patch, ctx, &Var::constant(batch.lensless_fake.clone()));
    let global_fake = critic_loss_fake(global, ctx, &Var::constant(batch.lensed_fake.clone()));
    let patch_mix = gradient_penalty(
        patch,
        ctx,
        batch.lensless_real,
        batch.lensless_fake,
        penalty,
        &sample_mix_coeffs::<T>(mix_seed, batch.lensless_real.shape()[0]),
    )?;
    let global_mix = gradient_penalty(
        global,
        ctx,
        batch.lensed_real,
        batch.lensed_fake,
        penalty,
        &sample_mix_coeffs::<T>(mix_seed.wrapping_add(1), batch.lensed_real.shape()[0]),
    )?;

    let terms = CriticLossTerms {
        patch_real: patch_real.scalar().as_f64(),
        global_real: global_real.scalar().as_f64(),
        patch_fake: patch_fake.scalar().as_f64(),
        global_fake: global_fake.scalar().as_f64(),
        patch_mix: patch_mix.scalar().as_f64(),
        global_mix: global_mix.scalar().as_f64(),
    };
    let total = ops::add(
        &ops::add(&ops::add(&patch_real, &global_real), &ops::add(&patch_fake, &global_fake)),
        &ops::add(&patch_mix, &global_mix),
    );
    Ok((total, terms))
}

/// `-mean D_patch(lensless_fake) - mean D_global(lensed_fake)`.
///
/// Both inputs must be live graph values: the whole point of the cyclic
/// design is that gradients reach the generator through the forward model,
/// so detached inputs are an error, not a silent zero.
pub fn generator_adversarial_loss<T: Scalar>(
    patch: &dyn ScoreModel<T>,
    global: &dyn ScoreModel<T>,
    ctx: &mut Ctx<T>,
    lensed_fake: &Var<T>,
    lensless_fake: &Var<T>,
) -> Result<Var<T>> {
    if !lensed_fake.requires_grad() || !lensless_fake.requires_grad() {
        return Err(Error::InvalidArgument(
            "generator outputs are detached; adversarial gradients cannot reach the generator"
                .into(),
        ));
    }
    let p = ops::mean_all(&patch.score(ctx, lensless_fake));
    let g = ops::mean_all(&global.score(ctx, lensed_fake));
    Ok(ops::neg(&ops::add(&p, &g)))
}

/// `mean |lensed_real - lensed_fake| + mean |lensless_real - lensless_fake|`;
/// the second term is the physics-consistency residual since the fake
/// lensless image comes from the forward model.
pub fn generator_supervised_loss<T: Scalar>(
    lensed_real: &Var<T>,
    lensed_fake: &Var<T>,
    lensless_real: &Var<T>,
    lensless_fake: &Var<T>,
) -> Var<T> {
    let a = ops::mean_all(&ops::abs(&ops::sub(lensed_real, lensed_fake)));
    let b = ops::mean_all(&ops::abs(&ops::sub(lensless_real, lensless_fake)));
    ops::add(&a, &b)
}

/// `adversarial_weight * adversarial + supervised_weight * supervised`.
pub fn total_generator_loss<T: Scalar>(
    adversarial: &Var<T>,
    supervised: &Var<T>,
    weights: &LossWeights,
) -> Var<T> {
    ops::add(
        &ops::scale(adversarial, T::cast(weights.adversarial)),
        &ops::scale(supervised, T::cast(weights.supervised)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `D(x) = c` for every sample.
    struct ConstProbe(f64);

    impl ScoreModel<f64> for ConstProbe {
        fn score(&self, _ctx: &mut Ctx<f64>, images: &Var<f64>) -> Var<f64> {
            let n = images.shape()[0];
            // Keep graph connectivity: c + 0 * sum(x).
            let z = ops::scale(&ops::reshape(&ops::sum_axes(images, &[1, 2, 3]), &[n]), 0.0);
            ops::add_scalar(&z, self.0)
        }
    }

    /// `D(x) = sum of all pixels of x`.
    struct SumProbe;

    impl ScoreModel<f64> for SumProbe {
        fn score(&self, _ctx: &mut Ctx<f64>, images: &Var<f64>) -> Var<f64> {
            let n = images.shape()[0];
            ops::reshape(&ops::sum_axes(images, &[1, 2, 3]), &[n])
        }
    }

    /// `D(x) = x[0,0,0] per sample` (single-coordinate projection).
    struct FirstCoordProbe;

    impl ScoreModel<f64> for FirstCoordProbe {
        fn score(&self, _ctx: &mut Ctx<f64>, images: &Var<f64>) -> Var<f64> {
            let n = images.shape()[0];
            let c = ops::slice_axis(images, 1, 0, 1);
            let h = ops::slice_axis(&c, 2, 0, 1);
            let w = ops::slice_axis(&h, 3, 0, 1);
            ops::reshape(&w, &[n])
        }
    }

    fn batch(n: usize, v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[n, 1, 4, 4]), v)
    }

    #[test]
    fn real_term_zero_critic() {
        let x = Var::constant(batch(3, 0.5));
        let l = critic_loss_real(&ConstProbe(0.0), &mut Ctx::inference(), &x, 1e-4);
        assert_eq!(l.scalar(), 0.0);
    }

    #[test]
    fn real_term_unit_critic_with_drift() {
        let x = Var::constant(batch(3, 0.5));
        let l = critic_loss_real(&ConstProbe(1.0), &mut Ctx::inference(), &x, 1e-4);
        assert!((l.scalar() - (-1.0 + 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn real_term_without_drift_is_plain_wasserstein() {
        let x = Var::constant(batch(2, 0.1));
        let l = critic_loss_real(&ConstProbe(2.5), &mut Ctx::inference(), &x, 0.0);
        assert!((l.scalar() + 2.5).abs() < 1e-12);
    }

    #[test]
    fn fake_term_and_wasserstein_gap() {
        let x = Var::constant(batch(2, 0.3));
        let f = critic_loss_fake(&ConstProbe(0.7), &mut Ctx::inference(), &x);
        assert!((f.scalar() - 0.7).abs() < 1e-12);
        // Constant critic, no drift: real + fake = -c + c = 0.
        let r = critic_loss_real(&ConstProbe(0.7), &mut Ctx::inference(), &x, 0.0);
        assert!((r.scalar() + f.scalar()).abs() < 1e-12);
    }

    #[test]
    fn penalty_linear_critic_analytic() {
        // D(x) = sum(x): grad is all-ones, norm sqrt(D), penalty w*(sqrt(D)-1)^2.
        let reals = batch(4, 0.2);
        let fakes = batch(4, 0.9);
        let alphas = sample_mix_coeffs::<f64>(11, 4);
        let weight = 1.0;
        let p = gradient_penalty(
            &SumProbe,
            &mut Ctx::inference(),
            &reals,
            &fakes,
            weight,
            &alphas,
        )
        .unwrap();
        let d = 16.0f64;
        let expect = (d.sqrt() - 1.0).powi(2);
        assert!(
            (p.scalar() - expect).abs() / expect < 1e-6,
            "{} vs {expect}",
            p.scalar()
        );
    }

    #[test]
    fn penalty_unit_gradient_is_zero() {
        let reals = batch(3, 0.4);
        let fakes = batch(3, 0.6);
        let alphas = sample_mix_coeffs::<f64>(12, 3);
        let p = gradient_penalty(
            &FirstCoordProbe,
            &mut Ctx::inference(),
            &reals,
            &fakes,
            1.0,
            &alphas,
        )
        .unwrap();
        assert!(p.scalar().abs() < 1e-9, "{}", p.scalar());
    }

    #[test]
    fn penalty_zero_weight_is_zero() {
        let reals = batch(2, 0.1);
        let fakes = batch(2, 0.2);
        let p = gradient_penalty_seeded(&SumProbe, &mut Ctx::inference(), &reals, &fakes, 0.0, 5)
            .unwrap();
        assert_eq!(p.scalar(), 0.0);
    }

    #[test]
    fn penalty_alpha_endpoints() {
        // alpha = 0 evaluates at the real sample, alpha = 1 at the fake.
        struct SquareProbe; // D(x) = sum(x^2): grad = 2x, norm = 2*||x||.
        impl ScoreModel<f64> for SquareProbe {
            fn score(&self, _ctx: &mut Ctx<f64>, images: &Var<f64>) -> Var<f64> {
                let n = images.shape()[0];
                ops::reshape(&ops::sum_axes(&ops::square(images), &[1, 2, 3]), &[n])
            }
        }
        let reals = batch(1, 0.25);
        let fakes = batch(1, 1.0);
        for (alpha, at) in [(0.0f64, 0.25f64), (1.0, 1.0)] {
            let p = gradient_penalty(
                &SquareProbe,
                &mut Ctx::inference(),
                &reals,
                &fakes,
                1.0,
                &[alpha],
            )
            .unwrap();
            let norm = 2.0 * at * 4.0; // ||2x||_2 over 16 equal entries = 2*at*sqrt(16)
            let expect = (norm - 1.0).powi(2);
            assert!(
                (p.scalar() - expect).abs() < 1e-6,
                "alpha {alpha}: {} vs {expect}",
                p.scalar()
            );
        }
    }

    #[test]
    fn total_critic_loss_is_compositional() {
        let lensed_real = batch(2, 0.8);
        let lensless_real = batch(2, 0.5);
        let lensed_fake = batch(2, 0.3);
        let lensless_fake = batch(2, 0.2);
        let weights = LossWeights::default();
        let mix_seed = 33;
        let b = CriticBatch {
            lensed_real: &lensed_real,
            lensless_real: &lensless_real,
            lensed_fake: &lensed_fake,
            lensless_fake: &lensless_fake,
        };
        let (total, terms) =
            total_critic_loss(&SumProbe, &SumProbe, &mut Ctx::inference(), &b, &weights, mix_seed)
                .unwrap();
        assert!((total.scalar() - terms.total()).abs() < 1e-9);

        // Recompute each term independently and compare.
        let drift = weights.drift;
        let pr = critic_loss_real(
            &SumProbe,
            &mut Ctx::inference(),
            &Var::constant(lensless_real.clone()),
            drift,
        );
        assert!((pr.scalar() - terms.patch_real).abs() < 1e-12);
        let pf = critic_loss_fake(
            &SumProbe,
            &mut Ctx::inference(),
            &Var::constant(lensless_fake.clone()),
        );
        assert!((pf.scalar() - terms.patch_fake).abs() < 1e-12);
        let pm = gradient_penalty(
            &SumProbe,
            &mut Ctx::inference(),
            &lensless_real,
            &lensless_fake,
            weights.gradient_penalty,
            &sample_mix_coeffs::<f64>(mix_seed, 2),
        )
        .unwrap();
        assert!((pm.scalar() - terms.patch_mix).abs() < 1e-12);
    }

    #[test]
    fn generator_losses_substitution() {
        // Constant critics a and b give -(a + b).
        let xf = Var::leaf(batch(2, 0.5));
        let yf = Var::leaf(batch(2, 0.5));
        let l = generator_adversarial_loss(
            &ConstProbe(1.5),
            &ConstProbe(-0.25),
            &mut Ctx::inference(),
            &xf,
            &yf,
        )
        .unwrap();
        assert!((l.scalar() - -(1.5 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn generator_adversarial_rejects_detached() {
        let xf = Var::constant(batch(1, 0.5));
        let yf = Var::leaf(batch(1, 0.5));
        assert!(generator_adversarial_loss(
            &ConstProbe(0.0),
            &ConstProbe(0.0),
            &mut Ctx::inference(),
            &xf,
            &yf
        )
        .is_err());
    }

    #[test]
    fn supervised_loss_values() {
        let x = Var::constant(batch(2, 0.5));
        let x_same = Var::constant(batch(2, 0.5));
        let y = Var::constant(batch(2, 0.1));
        let y_same = Var::constant(batch(2, 0.1));
        assert_eq!(
            generator_supervised_loss(&x, &x_same, &y, &y_same).scalar(),
            0.0
        );
        let x_off = Var::constant(batch(2, 1.0));
        let l = generator_supervised_loss(&x, &x_off, &y, &y_same);
        assert!((l.scalar() - 0.5).abs() < 1e-12);
        // Symmetric in the sign of the residual.
        let x_neg = Var::constant(batch(2, 0.0));
        let l2 = generator_supervised_loss(&x, &x_neg, &y, &y_same);
        assert!((l.scalar() - l2.scalar()).abs() < 1e-12);
    }

    #[test]
    fn total_generator_weighting() {
        let adv = Var::constant(ArrayD::from_elem(IxDyn(&[]), -2.0f64));
        let sup = Var::constant(ArrayD::from_elem(IxDyn(&[]), 0.3f64));
        let w = LossWeights::default();
        let total = total_generator_loss(&adv, &sup, &w);
        assert!((total.scalar() - (-20.0 + 0.3)).abs() < 1e-12);

        let only_sup = total_generator_loss(
            &adv,
            &sup,
            &LossWeights {
                adversarial: 0.0,
                ..w
            },
        );
        assert!((only_sup.scalar() - 0.3).abs() < 1e-12);
        let only_adv = total_generator_loss(
            &adv,
            &sup,
            &LossWeights {
                supervised: 0.0,
                ..w
            },
        );
        assert!((only_adv.scalar() + 20.0).abs() < 1e-12);
    }

    #[test]
    fn weight_linearity_of_penalty() {
        let reals = batch(3, 0.2);
        let fakes = batch(3, 0.7);
        let alphas = sample_mix_coeffs::<f64>(9, 3);
        let p1 = gradient_penalty(&SumProbe, &mut Ctx::inference(), &reals, &fakes, 1.0, &alphas)
            .unwrap()
            .scalar();
        let p2 = gradient_penalty(&SumProbe, &mut Ctx::inference(), &reals, &fakes, 2.0, &alphas)
            .unwrap()
            .scalar();
        assert!((p2 - 2.0 * p1).abs() < 1e-12);
    }
}
