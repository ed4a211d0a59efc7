//! The sanitizer family: deterministic PCA autoencoder, its
//! stochastic-latent variant, an exact-score diffusion purifier, and the
//! classic pixel-transform baselines.
//!
//! Every reconstructor maps `[0,1]^n` into `[0,1]^n`; clipping happens
//! only at the final output.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::clip01;
use crate::error::{CoreError, Result};
use crate::img::{self, GridDims};
use crate::rng::{self, stream};
use crate::synthdata::{mixture_score, mixture_score_jacobian_product, MixtureModel};

/// Affine latent subspace fitted by PCA.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: DVector<f64>,
    /// n x k, orthonormal columns.
    pub basis: DMatrix<f64>,
}

impl PcaBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Latent coordinates of `x`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * (x - &self.mean)
    }

    /// Pixel-space point for latent `z`, no clipping.
    pub fn reconstruct_latent(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.basis * z
    }

    /// `U U^T v`: projection of a direction onto the latent subspace.
    pub fn project_direction(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }
}

/// PCA fit together with diagnostics.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub basis: PcaBasis,
    /// Fraction of total variance captured by the retained components.
    pub captured_variance: f64,
    /// Number of eigenvalues above 1e-12 of the largest.
    pub effective_rank: usize,
}

/// Top-`rank` eigenvectors of the sample covariance, with a deterministic
/// sign convention (first component of magnitude > 1e-9 is positive).
pub fn fit_pca(pixels: &[DVector<f64>], rank: usize) -> Result<PcaFit> {
    if pixels.is_empty() {
        return Err(CoreError::EmptyInput("no pixels to fit PCA on".into()));
    }
    let n = pixels[0].len();
    let m = pixels.len();
    if rank == 0 || rank > n.min(m) {
        return Err(CoreError::InvalidConfig(format!(
            "pca rank {rank} must lie in [1, min(n={n}, samples={m})]"
        )));
    }

    let mean = pixels.iter().fold(DVector::zeros(n), |acc, x| acc + x) / m as f64;
    let mut cov = DMatrix::zeros(n, n);
    for x in pixels {
        let c = x - &mean;
        cov.syger(1.0 / m as f64, &c, &c, 1.0);
    }
    // syger only fills the lower triangle
    for i in 0..n {
        for j in (i + 1)..n {
            cov[(i, j)] = cov[(j, i)];
        }
    }

    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });

    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let captured: f64 = eigenvalues.iter().take(rank).sum();
    let captured_variance = if total > 0.0 { captured / total } else { 1.0 };
    let lead = eigenvalues.first().copied().unwrap_or(0.0);
    let effective_rank = eigenvalues.iter().filter(|&&l| l > 1e-12 * lead).count();

    let mut basis = DMatrix::zeros(n, rank);
    for (col, &src) in order.iter().take(rank).enumerate() {
        let mut v = eig.eigenvectors.column(src).clone_owned();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-9) {
            if *first < 0.0 {
                v = -v;
            }
        }
        basis.set_column(col, &v);
    }

    Ok(PcaFit {
        basis: PcaBasis { mean, basis },
        captured_variance,
        effective_rank,
    })
}

/// Pixel-space transform baselines.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformKind {
    /// 8x8 block DCT, truncation to the lowest `keep_fraction` of
    /// coefficients, uniform quantization to `levels` steps.
    DctQuantize { levels: u32, keep_fraction: f64 },
    GaussianBlur { sigma: f64 },
    /// Random integer shift up to `max_shift` pixels per axis, zero fill.
    Translate { max_shift: usize },
    HFlip,
    /// `clip01(a x + b)` with `a`, `b` drawn uniformly from the ranges.
    Jitter {
        contrast: (f64, f64),
        brightness: (f64, f64),
    },
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::DctQuantize { .. } => "dct_quantize",
            TransformKind::GaussianBlur { .. } => "gaussian_blur",
            TransformKind::Translate { .. } => "translate",
            TransformKind::HFlip => "hflip",
            TransformKind::Jitter { .. } => "jitter",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            TransformKind::Translate { .. } | TransformKind::Jitter { .. }
        )
    }
}

/// Apply a pixel transform on the grid view of `x`.
pub fn transform_apply(
    kind: &TransformKind,
    dims: GridDims,
    x: &DVector<f64>,
    draw_seed: u64,
) -> Result<DVector<f64>> {
    let out = match kind {
        TransformKind::DctQuantize {
            levels,
            keep_fraction,
        } => img::dct_quantize(x, dims, *levels, *keep_fraction)?,
        TransformKind::GaussianBlur { sigma } => img::gaussian_blur(x, dims, *sigma)?,
        TransformKind::Translate { max_shift } => {
            let mut rng = rng::seeded_rng(rng::derive_seed(draw_seed, stream::TRANSFORM, 0, 0));
            let s = *max_shift as i64;
            let dy = rng.gen_range(-s..=s);
            let dx = rng.gen_range(-s..=s);
            img::translate(x, dims, dy, dx)?
        }
        TransformKind::HFlip => img::hflip(x, dims)?,
        TransformKind::Jitter {
            contrast,
            brightness,
        } => {
            let mut rng = rng::seeded_rng(rng::derive_seed(draw_seed, stream::TRANSFORM, 0, 0));
            let a = rng.gen_range(contrast.0..=contrast.1);
            let b = rng.gen_range(brightness.0..=brightness.1);
            x.map(|v| a * v + b)
        }
    };
    Ok(clip01(out))
}

/// A sanitizer: reconstructs an input onto (an approximation of) the data
/// manifold before classification.
#[derive(Debug, Clone)]
pub enum Reconstructor {
    Ae {
        basis: PcaBasis,
    },
    Vae {
        basis: PcaBasis,
        /// Latent noise std.
        sigma: f64,
    },
    Dm {
        mixture: MixtureModel,
        /// Forward noising fraction tau in (0, 1].
        noise_level: f64,
        reverse_steps: usize,
        stochastic: bool,
    },
    Transform {
        kind: TransformKind,
        dims: GridDims,
    },
}

impl Reconstructor {
    pub fn validate(&self) -> Result<()> {
        match self {
            Reconstructor::Ae { .. } => Ok(()),
            Reconstructor::Vae { sigma, .. } => {
                if *sigma < 0.0 {
                    return Err(CoreError::InvalidConfig(format!(
                        "vae sigma must be >= 0, got {sigma}"
                    )));
                }
                Ok(())
            }
            Reconstructor::Dm {
                noise_level,
                reverse_steps,
                ..
            } => {
                if !(*noise_level > 0.0 && *noise_level <= 1.0) {
                    return Err(CoreError::InvalidConfig(format!(
                        "dm noise_level must lie in (0, 1], got {noise_level}"
                    )));
                }
                if *reverse_steps == 0 {
                    return Err(CoreError::InvalidConfig("dm reverse_steps must be >= 1".into()));
                }
                Ok(())
            }
            Reconstructor::Transform { .. } => Ok(()),
        }
    }

    /// Whether distinct draw seeds can produce distinct outputs.
    pub fn is_stochastic(&self) -> bool {
        match self {
            Reconstructor::Ae { .. } => false,
            Reconstructor::Vae { sigma, .. } => *sigma > 0.0,
            Reconstructor::Dm { stochastic, .. } => *stochastic,
            Reconstructor::Transform { kind, .. } => kind.is_stochastic(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Reconstructor::Ae { .. } => "ae",
            Reconstructor::Vae { .. } => "vae",
            Reconstructor::Dm { .. } => "dm",
            Reconstructor::Transform { kind, .. } => kind.name(),
        }
    }

    /// Reconstruct `x`; `draw_seed` feeds whatever randomness the variant
    /// uses and is ignored by deterministic ones.
    pub fn apply(&self, x: &DVector<f64>, draw_seed: u64) -> Result<DVector<f64>> {
        match self {
            Reconstructor::Ae { basis } => Ok(ae_reconstruct(basis, x)),
            Reconstructor::Vae { basis, sigma } => Ok(vae_reconstruct(basis, *sigma, x, draw_seed)),
            Reconstructor::Dm {
                mixture,
                noise_level,
                reverse_steps,
                stochastic,
            } => dm_purify(mixture, *noise_level, *reverse_steps, *stochastic, x, draw_seed),
            Reconstructor::Transform { kind, dims } => transform_apply(kind, *dims, x, draw_seed),
        }
    }
}

/// Deterministic projection onto the PCA subspace.
pub fn ae_reconstruct(basis: &PcaBasis, x: &DVector<f64>) -> DVector<f64> {
    let z = basis.project(x);
    clip01(basis.reconstruct_latent(&z))
}

/// Projection with Gaussian latent noise: `z = U^T (x - mean) + sigma xi`.
pub fn vae_reconstruct(basis: &PcaBasis, sigma: f64, x: &DVector<f64>, draw_seed: u64) -> DVector<f64> {
    let mut z = basis.project(x);
    if sigma > 0.0 {
        let mut rng = rng::seeded_rng(draw_seed);
        z += sigma * rng::normal_vector(&mut rng, z.len());
    }
    clip01(basis.reconstruct_latent(&z))
}

fn dm_alpha_bars(noise_level: f64, steps: usize) -> (f64, Vec<f64>) {
    let delta = noise_level / steps as f64;
    let bars = (0..steps)
        .map(|j| 1.0 - noise_level + j as f64 * delta)
        .collect();
    (delta, bars)
}

/// One Euler step of the variance-preserving probability flow in
/// alpha-bar time: `x += (delta / (2 alpha_bar)) (x + score)`.
fn dm_step(
    mixture: &MixtureModel,
    x: &mut DVector<f64>,
    alpha_bar: f64,
    delta: f64,
    noise: Option<&DVector<f64>>,
) {
    // At alpha_bar = 0 the drift (x + score) vanishes identically; skip the
    // 0/0 rather than divide.
    if alpha_bar > 1e-12 {
        let score = mixture_score(mixture, x, alpha_bar);
        let coeff = delta / (2.0 * alpha_bar);
        let drift = (&*x + &score) * coeff;
        *x += drift;
    }
    if let Some(xi) = noise {
        // variance delta (1 - ab) / ab, evaluated at the post-step
        // alpha_bar so it stays finite on the first step at tau = 1
        let ab_next = alpha_bar + delta;
        let var = delta * (1.0 - ab_next) / ab_next;
        if var > 0.0 {
            *x += var.sqrt() * xi;
        }
    }
}

/// Diffusion purification with the exact mixture score.
///
/// Deterministic (probability-flow) mode is a pure ODE round trip: the
/// input is scaled to `x_tau = sqrt(1-tau) x` and the flow integrates
/// back to alpha_bar = 1 over `reverse_steps` uniform Euler steps, so the
/// map degenerates to the identity as tau -> 0. Stochastic mode draws the
/// forward noise `x_tau = sqrt(1-tau) x + sqrt(tau) xi` and adds the
/// variance-preserving per-step noise, both from `draw_seed`.
pub fn dm_purify(
    mixture: &MixtureModel,
    noise_level: f64,
    reverse_steps: usize,
    stochastic: bool,
    x: &DVector<f64>,
    draw_seed: u64,
) -> Result<DVector<f64>> {
    let (out, _) = dm_purify_traced(mixture, noise_level, reverse_steps, stochastic, x, draw_seed)?;
    Ok(out)
}

/// Recorded forward pass of [`dm_purify`], enough to backpropagate.
#[derive(Debug, Clone)]
pub struct DmTrace {
    /// State entering each Euler step.
    pub states: Vec<DVector<f64>>,
    pub alpha_bars: Vec<f64>,
    pub delta: f64,
    /// `sqrt(1 - tau)` from the forward noising.
    pub forward_scale: f64,
}

/// As [`dm_purify`] but also returns the trace for [`dm_vjp`].
pub fn dm_purify_traced(
    mixture: &MixtureModel,
    noise_level: f64,
    reverse_steps: usize,
    stochastic: bool,
    x: &DVector<f64>,
    draw_seed: u64,
) -> Result<(DVector<f64>, DmTrace)> {
    if !(noise_level > 0.0 && noise_level <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "dm noise_level must lie in (0, 1], got {noise_level}"
        )));
    }
    if reverse_steps == 0 {
        return Err(CoreError::InvalidConfig("dm reverse_steps must be >= 1".into()));
    }

    let forward_scale = (1.0 - noise_level).sqrt();
    let mut state = forward_scale * x;
    if stochastic {
        let mut fwd_rng = rng::seeded_rng(rng::derive_seed(draw_seed, stream::DM_FORWARD, 0, 0));
        state += noise_level.sqrt() * rng::normal_vector(&mut fwd_rng, x.len());
    }

    let (delta, alpha_bars) = dm_alpha_bars(noise_level, reverse_steps);
    let mut states = Vec::with_capacity(reverse_steps);
    for (j, &ab) in alpha_bars.iter().enumerate() {
        states.push(state.clone());
        let noise = if stochastic {
            let mut step_rng =
                rng::seeded_rng(rng::derive_seed(draw_seed, stream::DM_STEP, j as u64, 0));
            Some(rng::normal_vector(&mut step_rng, x.len()))
        } else {
            None
        };
        dm_step(mixture, &mut state, ab, delta, noise.as_ref());
        if state.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NumericFailure {
                context: format!("dm purification at step {j}"),
            });
        }
    }

    Ok((
        clip01(state),
        DmTrace {
            states,
            alpha_bars,
            delta,
            forward_scale,
        },
    ))
}

/// Pull a gradient at the purifier output back to its input through every
/// Euler step (clip regions pass through as identity).
pub fn dm_vjp(mixture: &MixtureModel, trace: &DmTrace, grad_out: &DVector<f64>) -> DVector<f64> {
    let mut lambda = grad_out.clone();
    for (state, &ab) in trace.states.iter().zip(&trace.alpha_bars).rev() {
        if ab <= 1e-12 {
            continue;
        }
        let coeff = trace.delta / (2.0 * ab);
        // (I + c (I + H))^T lambda, H symmetric
        let h_l = mixture_score_jacobian_product(mixture, state, ab, &lambda);
        let increment = (&lambda + &h_l) * coeff;
        lambda += increment;
    }
    trace.forward_scale * lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, DataConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy_basis() -> PcaBasis {
        // orthonormal 2-dim basis in 4-dim space
        let basis = DMatrix::from_columns(&[
            DVector::from_row_slice(&[0.5, 0.5, 0.5, 0.5]),
            DVector::from_row_slice(&[0.5, -0.5, 0.5, -0.5]),
        ]);
        PcaBasis {
            mean: DVector::from_element(4, 0.5),
            basis,
        }
    }

    #[test]
    fn pca_recovers_a_line() {
        let dir = DVector::from_row_slice(&[3.0, 4.0]) / 5.0;
        let pixels: Vec<DVector<f64>> = (0..20).map(|i| (i as f64 / 40.0) * &dir).collect();
        let fit = fit_pca(&pixels, 1).unwrap();
        let u = fit.basis.basis.column(0);
        assert_abs_diff_eq!(u.dot(&dir).abs(), 1.0, epsilon = 1e-9);
        assert!(fit.captured_variance > 1.0 - 1e-9);
    }

    #[test]
    fn full_rank_pca_is_complete() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 4,
            height: 3,
            width: 3,
            embed_dim: 4,
            train_per_class: 20,
            eval_per_class: 1,
            master_seed: 9,
            ..DataConfig::default()
        })
        .unwrap();
        let pixels: Vec<_> = ds.train.iter().map(|s| s.pixels.clone()).collect();
        let fit = fit_pca(&pixels, 9).unwrap();
        let u = &fit.basis.basis;
        let gram = u.transpose() * u;
        assert!((gram - DMatrix::<f64>::identity(9, 9)).norm() <= 1e-8);
        let proj = u * u.transpose();
        assert!((proj - DMatrix::<f64>::identity(9, 9)).norm() <= 1e-7);
    }

    #[test]
    fn default_dataset_pca_captures_most_variance() {
        let ds = generate_dataset(&DataConfig::default()).unwrap();
        let pixels: Vec<_> = ds.train.iter().map(|s| s.pixels.clone()).collect();
        let fit = fit_pca(&pixels, 24).unwrap();
        assert!(
            fit.captured_variance > 0.9,
            "captured {:.4}",
            fit.captured_variance
        );
    }

    #[test]
    fn pca_basis_is_orthonormal_with_sign_convention() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 5,
            height: 4,
            width: 4,
            embed_dim: 8,
            train_per_class: 10,
            eval_per_class: 1,
            master_seed: 1,
            ..DataConfig::default()
        })
        .unwrap();
        let pixels: Vec<_> = ds.train.iter().map(|s| s.pixels.clone()).collect();
        let fit = fit_pca(&pixels, 6).unwrap();
        let u = &fit.basis.basis;
        let gram = u.transpose() * u;
        assert!((gram - DMatrix::<f64>::identity(6, 6)).norm() <= 1e-8);
        for col in 0..u.ncols() {
            let first = u.column(col).iter().find(|c| c.abs() > 1e-9).copied().unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn ae_is_idempotent_without_clipping() {
        let basis = toy_basis();
        let x = DVector::from_row_slice(&[0.7, 0.55, 0.62, 0.4]);
        let once = ae_reconstruct(&basis, &x);
        let twice = ae_reconstruct(&basis, &once);
        assert!((&twice - &once).amax() <= 1e-8);
    }

    #[test]
    fn ae_fixes_the_mean() {
        let basis = toy_basis();
        let out = ae_reconstruct(&basis, &basis.mean.clone());
        assert!((out - &basis.mean).amax() <= 1e-12);
    }

    #[test]
    fn ae_kills_orthogonal_components() {
        let basis = toy_basis();
        // w orthogonal to both basis columns
        let w = DVector::from_row_slice(&[0.1, 0.1, -0.1, -0.1]);
        assert!(basis.basis.transpose().clone() * &w == DVector::zeros(2));
        let x = &basis.mean + &w;
        let out = ae_reconstruct(&basis, &x);
        assert!((out - &basis.mean).amax() <= 1e-8);
    }

    #[test]
    fn vae_with_zero_sigma_equals_ae() {
        let basis = toy_basis();
        for i in 0..50 {
            let x = DVector::from_fn(4, |j, _| ((i * 7 + j * 3) % 11) as f64 / 11.0);
            let a = ae_reconstruct(&basis, &x);
            let v = vae_reconstruct(&basis, 0.0, &x, i as u64);
            assert_eq!(a, v);
        }
    }

    #[test]
    fn vae_same_seed_same_output() {
        let basis = toy_basis();
        let x = DVector::from_row_slice(&[0.3, 0.8, 0.2, 0.6]);
        let a = vae_reconstruct(&basis, 0.2, &x, 99);
        let b = vae_reconstruct(&basis, 0.2, &x, 99);
        assert_eq!(a, b);
        let c = vae_reconstruct(&basis, 0.2, &x, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn vae_monte_carlo_mean_matches_ae_in_latent() {
        let basis = toy_basis();
        let sigma = 0.1;
        let x = DVector::from_row_slice(&[0.55, 0.5, 0.45, 0.52]);
        let ae_latent = basis.project(&ae_reconstruct(&basis, &x));
        let draws = 1000;
        let mut latent_sum = DVector::zeros(2);
        for i in 0..draws {
            let v = vae_reconstruct(&basis, sigma, &x, 10_000 + i as u64);
            latent_sum += basis.project(&v);
        }
        let latent_mean = latent_sum / draws as f64;
        let bound = 3.0 * sigma / (draws as f64).sqrt();
        for k in 0..2 {
            assert!(
                (latent_mean[k] - ae_latent[k]).abs() < bound,
                "latent {k}: {} vs {}",
                latent_mean[k],
                ae_latent[k]
            );
        }
    }

    fn small_mixture() -> MixtureModel {
        let ds = generate_dataset(&DataConfig {
            num_classes: 3,
            height: 4,
            width: 4,
            embed_dim: 6,
            train_per_class: 2,
            eval_per_class: 1,
            master_seed: 21,
            ..DataConfig::default()
        })
        .unwrap();
        ds.mixture
    }

    fn desk_mixture() -> MixtureModel {
        let ds = generate_dataset(&DataConfig {
            num_classes: 3,
            train_per_class: 2,
            eval_per_class: 1,
            master_seed: 21,
            ..DataConfig::default()
        })
        .unwrap();
        ds.mixture
    }

    #[test]
    fn dm_tiny_noise_is_nearly_identity() {
        let m = desk_mixture();
        let x = m.prototypes[0].clone();
        let out = dm_purify(&m, 1e-6, 30, false, &x, 5).unwrap();
        let dev = (&out - &x).amax();
        assert!(dev < 1e-3, "deviation {dev}");
    }

    #[test]
    fn dm_pulls_toward_own_prototype() {
        let m = desk_mixture();
        for (y, proto) in m.prototypes.iter().enumerate() {
            let out = dm_purify(&m, 0.3, 30, false, proto, 17).unwrap();
            let own = (&out - proto).norm();
            for (z, other) in m.prototypes.iter().enumerate() {
                if z != y {
                    let dist = (&out - other).norm();
                    assert!(own < dist, "class {y}: own {own} vs {z} at {dist}");
                }
            }
        }
    }

    #[test]
    fn dm_stochastic_draws_vary_by_seed() {
        let m = desk_mixture();
        let x = m.prototypes[0].clone();
        let a = dm_purify(&m, 0.3, 10, true, &x, 1).unwrap();
        let b = dm_purify(&m, 0.3, 10, true, &x, 2).unwrap();
        let a2 = dm_purify(&m, 0.3, 10, true, &x, 1).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn dm_single_gaussian_matches_constant_quantile_flow() {
        // one component: the probability flow preserves the standardized
        // residual, so x_hat = mu + s * (x_tau - sqrt(ab0) mu) / sqrt(v0)
        let mu = DVector::from_element(8, 0.5);
        let s = 0.08;
        let m = MixtureModel {
            prototypes: vec![mu.clone()],
            component_std: s,
        };
        let x = DVector::from_fn(8, |i, _| 0.4 + 0.02 * i as f64);
        let tau = 0.999;
        let steps = 4000;
        let seed = 3;

        let (out, trace) = dm_purify_traced(&m, tau, steps, false, &x, seed).unwrap();
        let x_tau = &trace.states[0];
        let ab0 = 1.0 - tau;
        let v0 = ab0 * s * s + 1.0 - ab0;
        let oracle = &mu + (s / v0.sqrt()) * (x_tau - ab0.sqrt() * &mu);
        let expected = clip01(oracle);
        let dev = (&out - &expected).amax();
        assert!(dev < 5e-3, "deviation from closed form {dev}");
        // tau -> 1 with small s lands near the component mean
        assert!((&out - &mu).amax() < 5.0 * s + 5e-3);
    }

    #[test]
    fn dm_deterministic_mode_is_pure() {
        let m = small_mixture();
        let x = DVector::from_element(16, 0.4);
        let a = dm_purify(&m, 0.3, 20, false, &x, 11).unwrap();
        let b = dm_purify(&m, 0.3, 20, false, &x, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transform_hflip_twice_is_identity() {
        let dims = GridDims::new(8, 8);
        let kind = TransformKind::HFlip;
        let x = DVector::from_fn(64, |i, _| (i as f64 * 0.37).fract());
        let once = transform_apply(&kind, dims, &x, 0).unwrap();
        let twice = transform_apply(&kind, dims, &once, 0).unwrap();
        for (a, b) in twice.iter().zip(x.iter()) {
            assert_abs_diff_eq!(*a, b.clamp(0.0, 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn transform_blur_zero_sigma_is_identity() {
        let dims = GridDims::new(8, 8);
        let kind = TransformKind::GaussianBlur { sigma: 0.0 };
        let x = DVector::from_fn(64, |i, _| (i as f64 * 0.29).fract());
        let out = transform_apply(&kind, dims, &x, 0).unwrap();
        for (a, b) in out.iter().zip(x.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn transform_dct_roundtrip_tight_on_smooth_prototype() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 2,
            train_per_class: 1,
            eval_per_class: 1,
            ..DataConfig::default()
        })
        .unwrap();
        let dims = GridDims::new(16, 16);
        let kind = TransformKind::DctQuantize {
            levels: 256,
            keep_fraction: 1.0,
        };
        let x = &ds.prototypes[0].mean_image;
        let out = transform_apply(&kind, dims, x, 0).unwrap();
        let dev = (&out - x).amax();
        assert!(dev < 1.0 / 128.0, "max deviation {dev}");
    }

    #[test]
    fn translate_and_jitter_are_seed_deterministic() {
        let dims = GridDims::new(8, 8);
        let x = DVector::from_fn(64, |i, _| (i as f64 * 0.11).fract());
        for kind in [
            TransformKind::Translate { max_shift: 2 },
            TransformKind::Jitter {
                contrast: (0.8, 1.2),
                brightness: (-0.1, 0.1),
            },
        ] {
            let a = transform_apply(&kind, dims, &x, 7).unwrap();
            let b = transform_apply(&kind, dims, &x, 7).unwrap();
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn reconstructors_map_unit_box_to_unit_box(values in proptest::collection::vec(0.0f64..=1.0, 16)) {
            let x = DVector::from_vec(values);
            let basis = {
                let ds = generate_dataset(&DataConfig {
                    num_classes: 3,
                    height: 4,
                    width: 4,
                    embed_dim: 6,
                    train_per_class: 4,
                    eval_per_class: 1,
                    master_seed: 13,
                    ..DataConfig::default()
                }).unwrap();
                let pixels: Vec<_> = ds.train.iter().map(|s| s.pixels.clone()).collect();
                fit_pca(&pixels, 4).unwrap().basis
            };
            let m = small_mixture();
            let dims = GridDims::new(4, 4);
            let recons = [
                Reconstructor::Ae { basis: basis.clone() },
                Reconstructor::Vae { basis: basis.clone(), sigma: 0.3 },
                Reconstructor::Dm { mixture: m, noise_level: 0.4, reverse_steps: 8, stochastic: true },
                Reconstructor::Transform { kind: TransformKind::GaussianBlur { sigma: 1.0 }, dims },
                Reconstructor::Transform { kind: TransformKind::Jitter { contrast: (0.5, 1.5), brightness: (-0.3, 0.3) }, dims },
            ];
            for r in &recons {
                let out = r.apply(&x, 42).unwrap();
                for v in out.iter() {
                    prop_assert!((0.0..=1.0).contains(v));
                }
            }
        }
    }
}
