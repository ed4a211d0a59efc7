//! Attack-level properties: EOT gradient sanity, sanitizer-annihilated
//! gradients, degeneracies, and the attack-cost protocol edges.

use illusion_core::attack::{
    adaptive_pgd, eot_objective_and_gradient, measure_attack_cost, AttackConfig, DmGradientMode,
};
use illusion_core::encoder::{fit_encoder_mlp, EncoderModel, MlpHyperParams};
use illusion_core::reconstruct::{fit_pca, PcaBasis, Reconstructor};
use illusion_core::rng::seeded_rng;
use illusion_core::rng::normal_vector;
use illusion_core::synthdata::{generate_dataset, DataConfig, LabelBank};
use nalgebra::{DMatrix, DVector};

fn desk() -> (illusion_core::synthdata::Dataset, EncoderModel, PcaBasis) {
    let ds = generate_dataset(&DataConfig {
        prototype_low: 0.3,
        prototype_high: 0.7,
        ..DataConfig::default()
    })
    .unwrap();
    let enc = fit_encoder_mlp(
        &ds.train,
        &ds.bank,
        &MlpHyperParams {
            epochs: 40,
            seed: 1,
            ..MlpHyperParams::default()
        },
    )
    .unwrap();
    let pixels: Vec<DVector<f64>> = ds.train.iter().map(|s| s.pixels.clone()).collect();
    let basis = fit_pca(&pixels, 24).unwrap().basis;
    (ds, enc, basis)
}

#[test]
fn eot_gradient_direction_agrees_with_deterministic_jacobian_path() {
    // the vae Jacobian U U^T does not depend on sigma, so the EOT average
    // at moderate sigma must align with the sigma = 0 (ae) gradient
    let (ds, enc, basis) = desk();
    let vae = Reconstructor::Vae {
        basis: basis.clone(),
        sigma: 0.15,
    };
    let ae = Reconstructor::Ae { basis };
    let x = ds.eval[0].pixels.clone();
    let target = &ds.bank.embeddings[3];

    let seeds: Vec<u64> = (0..1000).map(|i| 90_000 + i as u64).collect();
    let (_, g_eot) =
        eot_objective_and_gradient(&enc, &vae, &x, target, &seeds, DmGradientMode::StraightThrough)
            .unwrap();
    let (_, g_exact) =
        eot_objective_and_gradient(&enc, &ae, &x, target, &[0], DmGradientMode::StraightThrough)
            .unwrap();
    let dir_cos = g_eot.dot(&g_exact) / (g_eot.norm() * g_exact.norm());
    assert!(dir_cos >= 0.95, "direction cosine {dir_cos:.4}");
}

#[test]
fn adaptive_ae_gradient_annihilated_when_target_orthogonal_to_latent_image() {
    // U spans the first two pixel axes; the encoder maps pixels so that
    // f(span(U)) is the third embedding axis; a target on the second axis
    // then yields an exactly-zero projected gradient
    let basis = PcaBasis {
        mean: DVector::zeros(4),
        basis: DMatrix::from_columns(&[
            DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0]),
            DVector::from_row_slice(&[0.0, 1.0, 0.0, 0.0]),
        ]),
    };
    let mut w = DMatrix::zeros(3, 4);
    w[(0, 2)] = 1.0;
    w[(1, 3)] = 1.0;
    w[(2, 0)] = 1.0;
    let enc = EncoderModel::Linear { weights: w };
    let bank = LabelBank {
        embeddings: vec![
            DVector::from_row_slice(&[0.0, 0.0, 1.0]),
            DVector::from_row_slice(&[0.0, 1.0, 0.0]),
        ],
    };
    let recon = Reconstructor::Ae { basis };
    let x = DVector::from_row_slice(&[0.4, 0.2, 0.0, 0.0]);
    let cfg = AttackConfig {
        max_iters: 80,
        ..AttackConfig::default()
    };
    let r = adaptive_pgd(&x, 1, &enc, &bank, &recon, &cfg).unwrap();
    assert_eq!(r.delta, DVector::zeros(4), "no feasible ascent direction");
    assert!(r.stagnated);
    assert!(!r.success);
}

#[test]
fn adaptive_vae_zero_sigma_single_draw_equals_ae() {
    let (ds, enc, basis) = desk();
    let vae = Reconstructor::Vae {
        basis: basis.clone(),
        sigma: 0.0,
    };
    let ae = Reconstructor::Ae { basis };
    let cfg = AttackConfig {
        max_iters: 40,
        eot_samples: 1,
        seed: 5,
        ..AttackConfig::default()
    };
    let x = &ds.eval[1].pixels;
    let a = adaptive_pgd(x, 2, &enc, &ds.bank, &vae, &cfg).unwrap();
    let b = adaptive_pgd(x, 2, &enc, &ds.bank, &ae, &cfg).unwrap();
    assert_eq!(a.cos_trajectory, b.cos_trajectory);
    assert_eq!(a.delta, b.delta);
}

#[test]
fn adaptive_attack_is_reproducible() {
    let (ds, enc, basis) = desk();
    let vae = Reconstructor::Vae { basis, sigma: 0.2 };
    let cfg = AttackConfig {
        max_iters: 30,
        seed: 17,
        ..AttackConfig::default()
    };
    let x = &ds.eval[2].pixels;
    let a = adaptive_pgd(x, 4, &enc, &ds.bank, &vae, &cfg).unwrap();
    let b = adaptive_pgd(x, 4, &enc, &ds.bank, &vae, &cfg).unwrap();
    assert_eq!(a.cos_trajectory, b.cos_trajectory);
    assert_eq!(a.best_cos, b.best_cos);
}

#[test]
fn attack_cost_vacuous_threshold_succeeds_immediately() {
    let (ds, enc, _) = desk();
    let samples: Vec<_> = ds.eval.iter().take(5).cloned().collect();
    let targets = vec![1usize; 5];
    let cfg = AttackConfig {
        cos_threshold: -1.0,
        ..AttackConfig::default()
    };
    let records = measure_attack_cost(&samples, &targets, &enc, &ds.bank, None, &cfg).unwrap();
    for r in &records {
        assert!(r.success);
        assert_eq!(r.loops_used, 1);
    }
}

#[test]
fn attack_cost_unreachable_threshold_records_full_budget() {
    let (ds, enc, _) = desk();
    let samples: Vec<_> = ds.eval.iter().take(3).cloned().collect();
    let targets = vec![2usize; 3];
    let cfg = AttackConfig {
        cos_threshold: 1.0,
        loop_budget: 25,
        ..AttackConfig::default()
    };
    let records = measure_attack_cost(&samples, &targets, &enc, &ds.bank, None, &cfg).unwrap();
    for r in &records {
        assert!(!r.success);
        assert_eq!(r.loops_used, 25);
    }
}

#[test]
fn attack_cost_loop_budget_one() {
    let (ds, enc, _) = desk();
    let samples: Vec<_> = ds.eval.iter().take(3).cloned().collect();
    let targets = vec![3usize; 3];
    let cfg = AttackConfig {
        loop_budget: 1,
        ..AttackConfig::default()
    };
    let records = measure_attack_cost(&samples, &targets, &enc, &ds.bank, None, &cfg).unwrap();
    for r in &records {
        assert_eq!(r.loops_used, 1);
    }
}

#[test]
fn dm_exact_jacobian_mode_runs_and_differs_from_straight_through() {
    let ds = generate_dataset(&DataConfig {
        num_classes: 3,
        height: 4,
        width: 4,
        embed_dim: 6,
        train_per_class: 4,
        eval_per_class: 1,
        prototype_low: 0.3,
        prototype_high: 0.7,
        master_seed: 2,
        ..DataConfig::default()
    })
    .unwrap();
    let enc = fit_encoder_mlp(
        &ds.train,
        &ds.bank,
        &MlpHyperParams {
            hidden_dim: 12,
            epochs: 30,
            seed: 4,
            ..MlpHyperParams::default()
        },
    )
    .unwrap();
    let dm = Reconstructor::Dm {
        mixture: ds.mixture.clone(),
        noise_level: 0.3,
        reverse_steps: 8,
        stochastic: false,
    };
    let x = &ds.eval[0].pixels;
    let target = &ds.bank.embeddings[1];
    let (cos_st, g_st) =
        eot_objective_and_gradient(&enc, &dm, x, target, &[7], DmGradientMode::StraightThrough)
            .unwrap();
    let (cos_ex, g_ex) =
        eot_objective_and_gradient(&enc, &dm, x, target, &[7], DmGradientMode::ExactJacobian)
            .unwrap();
    assert_eq!(cos_st, cos_ex); // same forward pass
    assert!(g_st != g_ex);
    // the exact pullback should still correlate with a finite difference
    // of the full through-purifier objective along a random direction
    let mut rng = seeded_rng(11);
    let dir = normal_vector(&mut rng, 16);
    let h = 1e-5;
    let f = |xx: &DVector<f64>| {
        eot_objective_and_gradient(&enc, &dm, xx, target, &[7], DmGradientMode::ExactJacobian)
            .unwrap()
            .0
    };
    let fd = (f(&(x + h * &dir)) - f(&(x - h * &dir))) / (2.0 * h);
    let analytic = g_ex.dot(&dir);
    let rel = (analytic - fd).abs() / fd.abs().max(1e-9);
    assert!(rel < 1e-4, "directional derivative rel err {rel:.2e}");
}
