//! Marginal-likelihood loss and the derivative-free training loop.
//!
//! Each epoch factorizes the diagonal blocks once, computes the baseline
//! loss, then estimates a forward-difference gradient per hyperparameter by
//! halving the step until two consecutive estimates agree. Perturbed losses
//! reuse the baseline factors: noise and output-scale steps through their
//! algebraic shortcuts, lengthscale steps through the generic path with
//! rebuilt diagonal blocks. Adam updates the hyperparameters once per epoch.

use nalgebra::DMatrix;

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::kernel::{build_structured, Hyperparameters};
use crate::logdet::{estimate_logdet, HutchinsonProbes};
use crate::pcg::{batch_cg, CgConfig};
use crate::real::Real;
use crate::structured::{
    factorize_blocks, BlockCholesky, JitterPolicy, PreconditionedOperator, ShortcutKind,
    StructuredKernel,
};

/// How the per-parameter forward-difference steps are chosen at the start of
/// every epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSizes<T> {
    /// Fixed (Δλ, Δσ², Δα).
    Absolute([T; 3]),
    /// A fraction of each hyperparameter's current value.
    RelativeToCurrent(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub learning_rate: T,
    /// Halving stops once two consecutive gradient estimates differ by less
    /// than this.
    pub grad_threshold: T,
    pub initial_steps: StepSizes<T>,
    pub cg: CgConfig<T>,
    pub max_halvings: usize,
    pub jitter: JitterPolicy<T>,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: T::of_f64(0.05),
            grad_threshold: T::of_f64(1e-3),
            initial_steps: StepSizes::RelativeToCurrent(T::of_f64(0.1)),
            cg: CgConfig::default(),
            max_halvings: 20,
            jitter: JitterPolicy::default(),
            seed: 0,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= T::zero() || self.cg.tol <= T::zero() || self.cg.max_iter == 0 {
            return Err(Error::usage(
                "learning rate, CG tolerance, and iteration budget must be positive".to_string(),
            ));
        }
        let (lo, hi) = (T::of_f64(1e-6), T::of_f64(1e-2));
        if self.grad_threshold < lo || self.grad_threshold > hi {
            return Err(Error::usage(format!(
                "gradient threshold {} outside the supported range [1e-6, 1e-2]",
                self.grad_threshold.as_f64()
            )));
        }
        match self.initial_steps {
            StepSizes::Absolute(steps) => {
                if steps.iter().any(|&s| s <= T::zero()) {
                    return Err(Error::usage("step sizes must be positive".to_string()));
                }
            }
            StepSizes::RelativeToCurrent(frac) => {
                if frac <= T::zero() {
                    return Err(Error::usage("step fraction must be positive".to_string()));
                }
            }
        }
        Ok(())
    }
}

/// The loss value with its pieces and the reports of the two inner solves.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub loss: T,
    /// `yᵀu` with `K·u = y`.
    pub quad_term: T,
    pub logdet: T,
    pub solve_iterations: [usize; 2],
}

/// Negative marginal log likelihood `½(yᵀu + log|K| + n·log 2π)` through the
/// structured pipeline.
///
/// `bc` must hold the epoch-baseline factors; `hp` is the baseline or a
/// single-parameter perturbation consistent with `shortcut`. The linear
/// solve runs on the transformed system `R⁻ᵀKR⁻¹·ũ = R⁻ᵀy` and recovers
/// `u = R⁻¹ũ`; the log-determinant reuses the same preconditioned operator.
pub fn compute_loss<T: Real>(
    bc: &BlockCholesky<T>,
    base: &StructuredKernel<T>,
    data: &ClusteredDataset<T>,
    hp: &Hyperparameters<T>,
    shortcut: &ShortcutKind<T>,
    probes: &HutchinsonProbes<T>,
    cg: &CgConfig<T>,
) -> Result<LossBreakdown<T>> {
    hp.validate()?;
    let sk_prime = match shortcut {
        ShortcutKind::Baseline => base.clone(),
        ShortcutKind::NoiseStep { .. } | ShortcutKind::ScaleStep { .. } => {
            base.with_offdiag(data.reps(), hp)?
        }
        ShortcutKind::Generic => build_structured(data, hp)?,
    };
    let op = PreconditionedOperator::new(bc, &sk_prime, *shortcut)?;
    let n = data.n();

    let y = DMatrix::from_column_slice(n, 1, data.y_train().as_slice());
    let rhs = bc.apply_inv_rt(&y);
    let (u_tilde, rep_y) = batch_cg(&op, &rhs, cg);
    if !rep_y.converged {
        return Err(Error::NonConvergence {
            max_iter: cg.max_iter,
            context: "linear solve for the training labels".to_string(),
        });
    }
    let u = bc.apply_inv_r(&u_tilde);
    let quad_term = y.column(0).dot(&u.column(0));

    let (logdet, rep_ld) = estimate_logdet(bc, &op, probes, cg)?;

    let half = T::of_f64(0.5);
    let loss = half * (quad_term + logdet + T::of_f64(n as f64) * T::two_pi().ln());
    Ok(LossBreakdown {
        loss,
        quad_term,
        logdet,
        solve_iterations: [rep_y.iterations, rep_ld.iterations],
    })
}

/// A forward-difference gradient estimate. `converged` is false when the
/// halving cap was hit before two consecutive estimates agreed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradEstimate<T> {
    pub gradient: T,
    pub halvings: usize,
    pub converged: bool,
}

/// Forward-difference gradient with step halving: evaluates
/// `g_k = (L(θ_i + Δ/2^k) − L0)/(Δ/2^k)` for k = 0, 1, ... until two
/// consecutive estimates differ by less than `threshold`, returning the last
/// one. The step is pre-shrunk if it would drive the parameter non-positive.
pub fn numeric_grad<T: Real>(
    mut loss_at: impl FnMut(T) -> Result<T>,
    loss0: T,
    theta_i: T,
    initial_step: T,
    threshold: T,
    max_halvings: usize,
) -> Result<GradEstimate<T>> {
    if initial_step <= T::zero() || threshold <= T::zero() || theta_i <= T::zero() {
        return Err(Error::usage(
            "parameter, step, and threshold must be positive".to_string(),
        ));
    }
    let half = T::of_f64(0.5);
    let mut step = initial_step;
    while theta_i + step <= T::zero() {
        step *= half;
    }

    let mut halvings = 0usize;
    let mut previous: Option<T> = None;
    loop {
        let perturbed = loss_at(step)?;
        let gradient = (perturbed - loss0) / step;
        if let Some(prev) = previous {
            if (gradient - prev).abs() < threshold {
                return Ok(GradEstimate {
                    gradient,
                    halvings,
                    converged: true,
                });
            }
        }
        if halvings == max_halvings {
            return Ok(GradEstimate {
                gradient,
                halvings,
                converged: false,
            });
        }
        previous = Some(gradient);
        step *= half;
        halvings += 1;
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;
/// Updated hyperparameters never go below this.
const POSITIVITY_FLOOR: f64 = 1e-8;

/// Adam moments for the three hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdamState<T> {
    first_moment: [T; 3],
    second_moment: [T; 3],
    step_count: u32,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            first_moment: [T::zero(); 3],
            second_moment: [T::zero(); 3],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }
}

/// One bias-corrected Adam step on the hyperparameters, clamped to stay
/// positive.
pub fn adam_update<T: Real>(
    state: &AdamState<T>,
    hp: &Hyperparameters<T>,
    grads: [T; 3],
    learning_rate: T,
) -> (AdamState<T>, Hyperparameters<T>) {
    let b1 = T::of_f64(ADAM_BETA1);
    let b2 = T::of_f64(ADAM_BETA2);
    let eps = T::of_f64(ADAM_EPSILON);
    let floor = T::of_f64(POSITIVITY_FLOOR);
    let one = T::one();

    let t = state.step_count + 1;
    let bias1 = one - b1.powi(t as i32);
    let bias2 = one - b2.powi(t as i32);

    let mut next = *state;
    next.step_count = t;
    let mut values = hp.as_array();
    for i in 0..3 {
        next.first_moment[i] = b1 * state.first_moment[i] + (one - b1) * grads[i];
        next.second_moment[i] = b2 * state.second_moment[i] + (one - b2) * grads[i] * grads[i];
        let m_hat = next.first_moment[i] / bias1;
        let v_hat = next.second_moment[i] / bias2;
        values[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        if values[i] < floor {
            values[i] = floor;
        }
    }
    (next, Hyperparameters::from_array(values))
}

/// Everything recorded about one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<T> {
    pub epoch: usize,
    /// Baseline loss at this epoch's hyperparameters.
    pub loss: T,
    /// Gradient estimates in the order (lengthscale, noise, output scale).
    pub gradients: [T; 3],
    /// The hyperparameters the epoch operated on (before the Adam update).
    pub hyperparameters: [T; 3],
    pub pcg_max: usize,
    pub pcg_mean: f64,
    pub halvings: [usize; 3],
    pub grad_converged: [bool; 3],
}

/// Per-epoch records plus loop-level counters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport<T> {
    pub epochs: Vec<EpochRecord<T>>,
    /// Block factorizations performed (one per epoch).
    pub factorizations: usize,
}

impl<T: Real> TrainReport<T> {
    pub fn max_pcg_iterations(&self) -> usize {
        self.epochs.iter().map(|e| e.pcg_max).max().unwrap_or(0)
    }

    pub fn mean_pcg_iterations(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.pcg_mean).sum::<f64>() / self.epochs.len() as f64
    }

    pub fn final_loss(&self) -> Option<T> {
        self.epochs.last().map(|e| e.loss)
    }
}

fn train_err(epoch: usize, context: &str, source: Error) -> Error {
    Error::Train {
        epoch,
        context: context.to_string(),
        source: Box::new(source),
    }
}

/// Runs the full training loop and returns the final hyperparameters with
/// the per-epoch report. Deterministic for fixed inputs and probes.
pub fn train<T: Real>(
    data: &ClusteredDataset<T>,
    hp0: Hyperparameters<T>,
    cfg: &TrainConfig<T>,
    probes: &HutchinsonProbes<T>,
) -> Result<(Hyperparameters<T>, TrainReport<T>)> {
    cfg.validate()?;
    hp0.validate()?;
    if probes.n() != data.n() {
        return Err(Error::shape(format!(
            "probes have dimension {}, training set has {}",
            probes.n(),
            data.n()
        )));
    }

    let param_names = ["lengthscale", "noise", "output scale"];
    let mut hp = hp0;
    let mut adam = AdamState::new();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let sk = build_structured(data, &hp)
            .map_err(|e| train_err(epoch, "covariance assembly", e))?;
        let bc = factorize_blocks(&sk, &cfg.jitter)
            .map_err(|e| train_err(epoch, "block factorization", e))?;
        report.factorizations += 1;

        let mut iterations: Vec<usize> = Vec::new();
        let baseline = compute_loss(
            &bc,
            &sk,
            data,
            &hp,
            &ShortcutKind::Baseline,
            probes,
            &cfg.cg,
        )
        .map_err(|e| train_err(epoch, "baseline loss", e))?;
        iterations.extend(baseline.solve_iterations);

        let steps = match cfg.initial_steps {
            StepSizes::Absolute(steps) => steps,
            StepSizes::RelativeToCurrent(frac) => {
                let v = hp.as_array();
                [v[0] * frac, v[1] * frac, v[2] * frac]
            }
        };

        let mut gradients = [T::zero(); 3];
        let mut halvings = [0usize; 3];
        let mut grad_converged = [true; 3];
        for i in 0..3 {
            let estimate = numeric_grad(
                |delta| {
                    let hp_prime = hp.perturbed(i, delta);
                    let shortcut = match i {
                        0 => ShortcutKind::Generic,
                        1 => ShortcutKind::NoiseStep { delta_noise: delta },
                        _ => ShortcutKind::ScaleStep {
                            delta_scale: delta,
                            base_scale: hp.output_scale,
                            base_noise: hp.noise,
                        },
                    };
                    let breakdown =
                        compute_loss(&bc, &sk, data, &hp_prime, &shortcut, probes, &cfg.cg)?;
                    iterations.extend(breakdown.solve_iterations);
                    Ok(breakdown.loss)
                },
                baseline.loss,
                hp.as_array()[i],
                steps[i],
                cfg.grad_threshold,
                cfg.max_halvings,
            )
            .map_err(|e| train_err(epoch, &format!("{} gradient", param_names[i]), e))?;
            gradients[i] = estimate.gradient;
            halvings[i] = estimate.halvings;
            grad_converged[i] = estimate.converged;
            if !estimate.converged {
                log::warn!(
                    "epoch {epoch}: {} gradient hit the halving cap ({})",
                    param_names[i],
                    cfg.max_halvings
                );
            }
        }

        let pcg_max = iterations.iter().copied().max().unwrap_or(0);
        let pcg_mean = iterations.iter().sum::<usize>() as f64 / iterations.len() as f64;
        report.epochs.push(EpochRecord {
            epoch,
            loss: baseline.loss,
            gradients,
            hyperparameters: hp.as_array(),
            pcg_max,
            pcg_mean,
            halvings,
            grad_converged,
        });

        let (next_adam, next_hp) = adam_update(&adam, &hp, gradients, cfg.learning_rate);
        adam = next_adam;
        hp = next_hp;
    }

    Ok((hp, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_1d;
    use crate::logdet::hutchinson_gen;
    use crate::oracle;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn hp(l: f64, s: f64, a: f64) -> Hyperparameters<f64> {
        Hyperparameters::new(l, s, a).unwrap()
    }

    #[test]
    fn loss_on_identity_covariance() {
        // Identity blocks built directly; the loss reduces to
        // 1/2 (y'y + n log 2pi).
        let b = 6;
        let x = DMatrix::from_fn(b, 1, |i, _| i as f64);
        let y = DVector::from_fn(b, |i, _| (i as f64) - 2.5);
        let data = crate::data::ClusteredDataset::new(
            x,
            y.clone(),
            DMatrix::from_row_slice(1, 1, &[0.0]),
            1,
            b,
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let sk = StructuredKernel::new(
            vec![DMatrix::identity(b, b)],
            DMatrix::from_row_slice(1, 1, &[1.0]),
            1,
            b,
        )
        .unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let probes = hutchinson_gen::<f64>(b, 4, 0);
        let out = compute_loss(
            &bc,
            &sk,
            &data,
            &hp(1.0, 1.0, 1.0),
            &ShortcutKind::Baseline,
            &probes,
            &CgConfig::default(),
        )
        .unwrap();
        let expect = 0.5 * (y.dot(&y) + b as f64 * (2.0 * std::f64::consts::PI).ln());
        assert_relative_eq!(out.loss, expect, max_relative = 1e-12);
        assert_eq!(out.logdet, 0.0);
    }

    #[test]
    fn loss_tracks_dense_oracle() {
        let data = gen_1d::<f64>(2, 32, 0.2, 0.4, 21).unwrap();
        let h = hp(1.0, 0.25, 1.0);
        let sk = crate::kernel::build_structured(&data, &h).unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let probes = hutchinson_gen::<f64>(64, 8, 2);
        let out = compute_loss(
            &bc,
            &sk,
            &data,
            &h,
            &ShortcutKind::Baseline,
            &probes,
            &CgConfig::default(),
        )
        .unwrap();
        let exact = oracle::exact_loss(&oracle::densify(&sk), data.y_train()).unwrap();
        assert!(
            ((out.loss - exact) / exact).abs() <= 0.01,
            "structured {} vs exact {}",
            out.loss,
            exact
        );
    }

    #[test]
    fn baseline_equals_generic_at_same_hyperparameters() {
        let data = gen_1d::<f64>(2, 16, 0.2, 0.4, 22).unwrap();
        let h = hp(0.9, 0.3, 1.1);
        let sk = crate::kernel::build_structured(&data, &h).unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let probes = hutchinson_gen::<f64>(32, 8, 3);
        let cg = CgConfig::default();
        let base = compute_loss(&bc, &sk, &data, &h, &ShortcutKind::Baseline, &probes, &cg)
            .unwrap();
        let generic = compute_loss(&bc, &sk, &data, &h, &ShortcutKind::Generic, &probes, &cg)
            .unwrap();
        assert_relative_eq!(base.loss, generic.loss, max_relative = 1e-8);
    }

    #[test]
    fn shortcut_losses_match_generic_at_perturbed_hyperparameters() {
        let data = gen_1d::<f64>(2, 16, 0.2, 0.4, 23).unwrap();
        let h = hp(0.9, 0.3, 1.1);
        let sk = crate::kernel::build_structured(&data, &h).unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let probes = hutchinson_gen::<f64>(32, 8, 4);
        let cg = CgConfig { tol: 1e-6, max_iter: 2000 };

        let dn = 0.05;
        let noise_fast = compute_loss(
            &bc,
            &sk,
            &data,
            &h.perturbed(1, dn),
            &ShortcutKind::NoiseStep { delta_noise: dn },
            &probes,
            &cg,
        )
        .unwrap();
        let noise_slow = compute_loss(
            &bc,
            &sk,
            &data,
            &h.perturbed(1, dn),
            &ShortcutKind::Generic,
            &probes,
            &cg,
        )
        .unwrap();
        assert_relative_eq!(noise_fast.loss, noise_slow.loss, max_relative = 1e-6);

        let da = 0.11;
        let scale_fast = compute_loss(
            &bc,
            &sk,
            &data,
            &h.perturbed(2, da),
            &ShortcutKind::ScaleStep {
                delta_scale: da,
                base_scale: h.output_scale,
                base_noise: h.noise,
            },
            &probes,
            &cg,
        )
        .unwrap();
        let scale_slow = compute_loss(
            &bc,
            &sk,
            &data,
            &h.perturbed(2, da),
            &ShortcutKind::Generic,
            &probes,
            &cg,
        )
        .unwrap();
        assert_relative_eq!(scale_fast.loss, scale_slow.loss, max_relative = 1e-6);
    }

    #[test]
    fn numeric_grad_of_constant_loss() {
        let est = numeric_grad(|_| Ok(5.0f64), 5.0, 1.0, 0.5, 1e-3, 20).unwrap();
        assert_eq!(est.gradient, 0.0);
        assert_eq!(est.halvings, 1);
        assert!(est.converged);
    }

    #[test]
    fn numeric_grad_of_quadratic_is_exact() {
        // L(θ) = θ² at θ = 1: forward difference is exactly 2 + Δ for the
        // power-of-two steps used here, so the halving loop stops at
        // Δ = 2⁻¹⁰ after 9 halvings.
        let est = numeric_grad(
            |delta| Ok((1.0 + delta) * (1.0 + delta)),
            1.0,
            1.0,
            0.5,
            1e-3,
            40,
        )
        .unwrap();
        assert_eq!(est.gradient, 2.0 + 2.0f64.powi(-10));
        assert_eq!(est.halvings, 9);
        assert!(est.converged);
    }

    #[test]
    fn numeric_grad_reports_halving_cap() {
        // Noisy evaluator that never stabilizes.
        let mut flip = 1.0f64;
        let est = numeric_grad(
            |_| {
                flip = -flip;
                Ok(flip)
            },
            0.0,
            1.0,
            0.5,
            1e-6,
            8,
        )
        .unwrap();
        assert!(!est.converged);
        assert_eq!(est.halvings, 8);
    }

    #[test]
    fn gp_gradient_matches_central_difference_oracle() {
        let data = gen_1d::<f64>(2, 32, 0.2, 0.4, 24).unwrap();
        let h = hp(1.1, 0.4, 1.3);
        // Exact dense loss of the densified structured covariance as a
        // function of the hyperparameters.
        let dense_loss = |hh: &Hyperparameters<f64>| -> crate::error::Result<f64> {
            let sk = crate::kernel::build_structured(&data, hh)?;
            oracle::exact_loss(&oracle::densify(&sk), data.y_train())
        };
        let reference = oracle::fd_gradient(dense_loss, &h, 1e-5).unwrap();
        let l0 = dense_loss(&h).unwrap();
        for (i, &expect) in reference.iter().enumerate() {
            let est = numeric_grad(
                |delta| dense_loss(&h.perturbed(i, delta)),
                l0,
                h.as_array()[i],
                0.1 * h.as_array()[i],
                1e-5,
                30,
            )
            .unwrap();
            let rel = ((est.gradient - expect) / expect).abs();
            assert!(
                rel <= 1e-2,
                "parameter {i}: halved {} vs central {} (rel {rel})",
                est.gradient,
                expect
            );
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let state = AdamState::new();
        let h = hp(1.0, 0.5, 2.0);
        let (next, updated) = adam_update(&state, &h, [0.0; 3], 0.05);
        assert_eq!(updated, h);
        assert_eq!(next.first_moment, [0.0; 3]);
        assert_eq!(next.second_moment, [0.0; 3]);
        assert_eq!(next.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let state = AdamState::new();
        let h = hp(1.0, 0.5, 2.0);
        let (_, updated) = adam_update(&state, &h, [3.0, -2.0, 0.7], 0.05);
        // Bias correction cancels at step one, so each parameter moves by
        // about the learning rate against the gradient sign.
        assert_relative_eq!(updated.lengthscale, 1.0 - 0.05, epsilon = 1e-8);
        assert_relative_eq!(updated.noise, 0.5 + 0.05, epsilon = 1e-8);
        assert_relative_eq!(updated.output_scale, 2.0 - 0.05, epsilon = 1e-8);
    }

    #[test]
    fn adam_repeated_gradients_move_monotonically() {
        let mut state = AdamState::new();
        let mut h = hp(1.0, 0.5, 2.0);
        let mut previous = h.lengthscale;
        for _ in 0..10 {
            let (next, updated) = adam_update(&state, &h, [1.0, 0.0, 0.0], 0.05);
            state = next;
            h = updated;
            assert!(h.lengthscale < previous);
            previous = h.lengthscale;
        }
    }

    #[test]
    fn adam_respects_positivity_floor() {
        let mut state = AdamState::new();
        let mut h = hp(1e-7, 0.5, 2.0);
        for _ in 0..5 {
            let (next, updated) = adam_update(&state, &h, [10.0, 0.0, 0.0], 0.05);
            state = next;
            h = updated;
        }
        assert!(h.lengthscale >= 1e-8);
    }

    #[test]
    fn zero_epochs_returns_initial_hyperparameters() {
        let data = gen_1d::<f64>(2, 8, 0.2, 0.4, 25).unwrap();
        let probes = hutchinson_gen::<f64>(16, 4, 5);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let h0 = hp(1.0, 1.0, 1.0);
        let (h, report) = train(&data, h0, &cfg, &probes).unwrap();
        assert_eq!(h, h0);
        assert!(report.epochs.is_empty());
        assert_eq!(report.factorizations, 0);
    }

    #[test]
    fn training_is_deterministic_and_factorizes_once_per_epoch() {
        let data = gen_1d::<f64>(2, 16, 0.2, 0.4, 26).unwrap();
        let probes = hutchinson_gen::<f64>(32, 8, 6);
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let h0 = hp(1.0, 1.0, 1.0);
        let (h1, r1) = train(&data, h0, &cfg, &probes).unwrap();
        let (h2, r2) = train(&data, h0, &cfg, &probes).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(r1, r2);
        assert_eq!(r1.factorizations, 5);
        assert_eq!(r1.epochs.len(), 5);
    }

    #[test]
    fn single_precision_training_runs_end_to_end() {
        let data = gen_1d::<f32>(2, 16, 0.2, 0.4, 28).unwrap();
        let probes = hutchinson_gen::<f32>(32, 8, 8);
        let cfg = TrainConfig::<f32> {
            epochs: 3,
            ..TrainConfig::default()
        };
        let h0 = Hyperparameters::new(1.0f32, 1.0, 1.0).unwrap();
        let (h, report) = train(&data, h0, &cfg, &probes).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert!(h.lengthscale > 0.0 && h.noise > 0.0 && h.output_scale > 0.0);
        assert!(report.epochs.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn config_rejects_out_of_range_threshold() {
        for bad in [1e-7, 0.5] {
            let cfg = TrainConfig::<f64> {
                grad_threshold: bad,
                ..TrainConfig::default()
            };
            assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
        }
        assert!(TrainConfig::<f64>::default().validate().is_ok());
    }

    #[test]
    fn hyperparameters_must_be_positive() {
        assert!(Hyperparameters::new(1.0, 0.0, 1.0).is_err());
        assert!(Hyperparameters::new(-1.0, 0.1, 1.0).is_err());
        assert!(Hyperparameters::new(1.0, 0.1, 1.0).is_ok());
    }

    #[test]
    fn training_reduces_the_loss_on_synthetic_data() {
        let data = gen_1d::<f64>(4, 16, 0.2, 0.4, 27).unwrap();
        let probes = hutchinson_gen::<f64>(64, 8, 7);
        let cfg = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        let (_, report) = train(&data, hp(1.0, 1.0, 1.0), &cfg, &probes).unwrap();
        let first = report.epochs.first().unwrap().loss;
        let last = report.epochs.last().unwrap().loss;
        assert!(last < first, "loss went from {first} to {last}");
    }
}
