//! Projected gradient descent in the shared embedding space: the plain
//! pixel-space illusion attack, the adaptive variant that differentiates
//! through a sanitizer (expectation over transformation), and the
//! attack-cost measurement protocol.

use nalgebra::{DMatrix, DVector};

use crate::encoder::{self, EncoderModel};
use crate::error::{CoreError, Result};
use crate::exec;
use crate::reconstruct::{dm_purify_traced, dm_vjp, Reconstructor};
use crate::rng::{self, stream};
use crate::synthdata::{ImageSample, LabelBank};

/// How the adaptive attack backpropagates through the diffusion purifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmGradientMode {
    /// Accumulate the exact Jacobian through every Euler step.
    ExactJacobian,
    /// Treat the purifier Jacobian as identity.
    StraightThrough,
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// L-infinity perturbation budget.
    pub linf_budget: f64,
    /// Signed-gradient step size.
    pub step_size: f64,
    pub max_iters: usize,
    /// Fresh sanitizer draws per iteration (adaptive attack only).
    pub eot_samples: usize,
    pub dm_gradient_mode: DmGradientMode,
    /// Cosine at which an attack counts as successful.
    pub cos_threshold: f64,
    /// Iteration cap for the attack-cost protocol.
    pub loop_budget: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            linf_budget: 0.1,
            step_size: 0.01,
            max_iters: 3000,
            eot_samples: 8,
            dm_gradient_mode: DmGradientMode::StraightThrough,
            cos_threshold: 0.8,
            loop_budget: 3000,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.linf_budget >= 0.0 && self.linf_budget.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "linf_budget must be finite and >= 0, got {}",
                self.linf_budget
            )));
        }
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.max_iters == 0 || self.loop_budget == 0 {
            return Err(CoreError::InvalidConfig(
                "max_iters and loop_budget must be >= 1".into(),
            ));
        }
        if self.eot_samples == 0 {
            return Err(CoreError::InvalidConfig("eot_samples must be >= 1".into()));
        }
        if !(self.cos_threshold > 0.0 && self.cos_threshold <= 1.0) && self.cos_threshold != -1.0 {
            // the vacuous threshold -1 is allowed for protocol edge cases
            if self.cos_threshold > 1.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "cos_threshold must lie in (0, 1], got {}",
                    self.cos_threshold
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of one attack run. `success` is judged on the best iterate.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub delta: DVector<f64>,
    pub perturbed: DVector<f64>,
    pub best_cos: f64,
    pub cos_trajectory: Vec<f64>,
    pub loops_used: usize,
    pub success: bool,
    /// Fifty consecutive all-zero gradients were seen.
    pub stagnated: bool,
}

const STAGNATION_RUN: usize = 50;

/// Project `delta` so that both constraint sets hold coordinatewise:
/// `|delta_i| <= eps` and `x_i + delta_i` in `[0, 1]`.
fn project_delta(delta: &mut DVector<f64>, x: &DVector<f64>, eps: f64) {
    for i in 0..delta.len() {
        let lo = (-eps).max(-x[i]);
        let hi = eps.min(1.0 - x[i]);
        delta[i] = delta[i].clamp(lo, hi);
    }
}

/// Shared PGD loop. `objective` returns the tracked cosine objective and
/// its gradient at the current perturbed point; per the error contract a
/// singular gradient becomes a zero step (tracked value -1).
fn pgd_loop<F>(
    x: &DVector<f64>,
    cfg: &AttackConfig,
    iters: usize,
    mut objective: F,
) -> Result<AttackResult>
where
    F: FnMut(&DVector<f64>, usize) -> Result<(f64, DVector<f64>)>,
{
    cfg.validate()?;
    let n = x.len();
    let eps = cfg.linf_budget;
    let mut delta = DVector::zeros(n);
    let mut best_cos = f64::NEG_INFINITY;
    let mut best_delta = delta.clone();
    let mut trajectory = Vec::with_capacity(iters.min(4096));
    let mut loops_used = 0;
    let mut zero_run = 0usize;
    let mut stagnated = false;

    // gradient at the starting point drives the first step
    let mut grad = match objective(&(x + &delta), 0) {
        Ok((_, g)) => g,
        Err(CoreError::SingularGradient { .. }) | Err(CoreError::UndefinedSimilarity) => {
            DVector::zeros(n)
        }
        Err(e) => return Err(e),
    };

    for iter in 1..=iters {
        if grad.iter().all(|g| *g == 0.0) {
            zero_run += 1;
            if zero_run >= STAGNATION_RUN {
                stagnated = true;
            }
        } else {
            zero_run = 0;
        }

        for i in 0..n {
            delta[i] += cfg.step_size * grad[i].signum() * if grad[i] == 0.0 { 0.0 } else { 1.0 };
        }
        project_delta(&mut delta, x, eps);
        let x_adv = x + &delta;
        debug_assert!(delta.amax() <= eps + 1e-12);
        debug_assert!(x_adv.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));

        let cos = match objective(&x_adv, iter) {
            Ok((cos, g)) => {
                grad = g;
                cos
            }
            Err(CoreError::SingularGradient { .. }) | Err(CoreError::UndefinedSimilarity) => {
                grad = DVector::zeros(n);
                -1.0
            }
            Err(e) => return Err(e),
        };
        trajectory.push(cos);
        if cos > best_cos {
            best_cos = cos;
            best_delta.copy_from(&delta);
        }
        loops_used = iter;
        if cos >= cfg.cos_threshold {
            break;
        }
    }

    let perturbed = crate::clip01(x + &best_delta);
    let success = best_cos >= cfg.cos_threshold;
    Ok(AttackResult {
        delta: best_delta,
        perturbed,
        best_cos,
        cos_trajectory: trajectory,
        loops_used,
        success,
        stagnated,
    })
}

/// Pixel-space illusion attack: signed-gradient ascent on
/// `cos(f(clip(x + delta)), e_target)` inside the L-infinity ball.
pub fn pgd_illusion(
    x: &DVector<f64>,
    y_target: usize,
    model: &EncoderModel,
    bank: &LabelBank,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let target = bank.embeddings[y_target].clone();
    pgd_loop(x, cfg, cfg.max_iters, |x_adv, _| {
        encoder::cosine_and_grad(model, x_adv, &target)
    })
}

/// EOT objective for the adaptive attack at one point: the mean over
/// `draw_seeds` of `cos(f(G(x, seed)), target)` and the matching averaged
/// gradient, with the sanitizer Jacobian applied per draw (exact `U U^T`
/// for ae/vae, exact or straight-through for dm).
pub fn eot_objective_and_gradient(
    model: &EncoderModel,
    recon: &Reconstructor,
    x: &DVector<f64>,
    target: &DVector<f64>,
    draw_seeds: &[u64],
    dm_mode: DmGradientMode,
) -> Result<(f64, DVector<f64>)> {
    let m = draw_seeds.len().max(1);
    match recon {
        Reconstructor::Ae { basis } => {
            let rec = crate::clip01(basis.reconstruct_latent(&basis.project(x)));
            let (cos, g) = encoder::cosine_and_grad(model, &rec, target)?;
            Ok((cos, basis.project_direction(&g)))
        }
        Reconstructor::Vae { basis, sigma } => {
            // batched draws: columns are reconstructions
            let z0 = basis.project(x);
            let k = z0.len();
            let mut recs = DMatrix::zeros(x.len(), m);
            for (col, seed) in draw_seeds.iter().enumerate() {
                let mut z = z0.clone();
                if *sigma > 0.0 {
                    let mut rng = rng::seeded_rng(*seed);
                    z += *sigma * rng::normal_vector(&mut rng, k);
                }
                recs.set_column(col, &crate::clip01(basis.reconstruct_latent(&z)));
            }
            let (cosines, grads) = encoder::cosine_and_grad_batch(model, &recs, target);
            let mean_cos = cosines.iter().sum::<f64>() / m as f64;
            let mut mean_grad = DVector::zeros(x.len());
            for col in 0..m {
                mean_grad += grads.column(col);
            }
            mean_grad /= m as f64;
            Ok((mean_cos, basis.project_direction(&mean_grad)))
        }
        Reconstructor::Dm {
            mixture,
            noise_level,
            reverse_steps,
            stochastic,
        } => {
            let mut mean_cos = 0.0;
            let mut mean_grad = DVector::zeros(x.len());
            for seed in draw_seeds {
                let (rec, trace) =
                    dm_purify_traced(mixture, *noise_level, *reverse_steps, *stochastic, x, *seed)?;
                let (cos, g) = encoder::cosine_and_grad(model, &rec, target)?;
                mean_cos += cos;
                match dm_mode {
                    DmGradientMode::StraightThrough => mean_grad += g,
                    DmGradientMode::ExactJacobian => mean_grad += dm_vjp(mixture, &trace, &g),
                }
            }
            Ok((mean_cos / m as f64, mean_grad / m as f64))
        }
        Reconstructor::Transform { .. } => Err(CoreError::InvalidConfig(
            "adaptive attack needs a differentiable sanitizer (ae, vae, or dm)".into(),
        )),
    }
}

/// Adaptive attack through a sanitizer. The tracked objective (and the
/// success judgment) is the EOT mean cosine over the per-iteration draws.
pub fn adaptive_pgd(
    x: &DVector<f64>,
    y_target: usize,
    model: &EncoderModel,
    bank: &LabelBank,
    recon: &Reconstructor,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    recon.validate()?;
    if matches!(recon, Reconstructor::Transform { .. }) {
        return Err(CoreError::InvalidConfig(
            "adaptive attack needs a differentiable sanitizer (ae, vae, or dm)".into(),
        ));
    }
    let target = bank.embeddings[y_target].clone();
    let m = if recon.is_stochastic() { cfg.eot_samples } else { 1 };
    let seed = cfg.seed;
    let mode = cfg.dm_gradient_mode;
    pgd_loop(x, cfg, cfg.max_iters, |x_adv, iter| {
        let draw_seeds: Vec<u64> = (0..m)
            .map(|d| rng::derive_seed(seed, stream::EOT_DRAW, iter as u64, d as u64))
            .collect();
        eot_objective_and_gradient(model, recon, x_adv, &target, &draw_seeds, mode)
    })
}

/// Per-sample attack-cost record; failed attacks carry
/// `loops_used = loop_budget`.
#[derive(Debug, Clone)]
pub struct AttackCostRecord {
    pub sample_id: usize,
    pub target_label: usize,
    pub loops_used: usize,
    pub final_cos: f64,
    pub success: bool,
    pub defended: bool,
}

/// One attack run bundled with its protocol identity.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub sample_id: usize,
    pub target_label: usize,
    pub defended: bool,
    pub result: AttackResult,
}

impl AttackRun {
    /// Collapse to the cost-protocol record: failures record the full
    /// budget, the reported cosine is the best iterate's.
    pub fn cost_record(&self, loop_budget: usize) -> AttackCostRecord {
        AttackCostRecord {
            sample_id: self.sample_id,
            target_label: self.target_label,
            loops_used: if self.result.success {
                self.result.loops_used
            } else {
                loop_budget
            },
            final_cos: self.result.best_cos,
            success: self.result.success,
            defended: self.defended,
        }
    }
}

/// Attack every `(sample, target)` pair, in parallel when enabled.
///
/// With `recon = None` each sample gets the plain pixel-space attack;
/// otherwise the adaptive attack through the sanitizer. Iterations are
/// capped at `cfg.loop_budget`; each sample consumes its own stream
/// derived from `(cfg.seed, sample_id, defended)`.
pub fn run_attack_batch(
    samples: &[ImageSample],
    targets: &[usize],
    model: &EncoderModel,
    bank: &LabelBank,
    recon: Option<&Reconstructor>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackRun>> {
    if samples.len() != targets.len() {
        return Err(CoreError::InvalidConfig(format!(
            "{} samples but {} targets",
            samples.len(),
            targets.len()
        )));
    }
    cfg.validate()?;
    let indices: Vec<usize> = (0..samples.len()).collect();
    let results = exec::batch_map(&indices, |&i| -> Result<AttackRun> {
        let sample = &samples[i];
        let defended = recon.is_some();
        let mut run_cfg = cfg.clone();
        run_cfg.max_iters = cfg.loop_budget;
        run_cfg.seed = rng::derive_seed(
            cfg.seed,
            stream::ATTACK,
            sample.sample_id as u64,
            defended as u64,
        );
        let result = match recon {
            None => pgd_illusion(&sample.pixels, targets[i], model, bank, &run_cfg)?,
            Some(r) => adaptive_pgd(&sample.pixels, targets[i], model, bank, r, &run_cfg)?,
        };
        Ok(AttackRun {
            sample_id: sample.sample_id,
            target_label: targets[i],
            defended,
            result,
        })
    });
    results.into_iter().collect()
}

/// Run the attack-cost protocol over paired `(sample, target)` lists.
pub fn measure_attack_cost(
    samples: &[ImageSample],
    targets: &[usize],
    model: &EncoderModel,
    bank: &LabelBank,
    recon: Option<&Reconstructor>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackCostRecord>> {
    let runs = run_attack_batch(samples, targets, model, bank, recon, cfg)?;
    Ok(runs.iter().map(|r| r.cost_record(cfg.loop_budget)).collect())
}
