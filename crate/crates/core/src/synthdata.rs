//! Seeded synthetic multi-modal dataset: Gaussian-mixture image classes
//! paired with unit-norm label embeddings, plus the exact mixture score
//! used by the diffusion purifier.

use nalgebra::DVector;
use rand::Rng;

use crate::clip01;
use crate::error::{CoreError, Result};
use crate::img::{self, GridDims};
use crate::rng::{self, stream};

/// Generation parameters for the synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    /// Per-pixel sample noise std around the class prototype.
    pub pixel_noise_std: f64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Gaussian smoothing std (pixels) applied to the prototype noise field.
    pub prototype_smoothing_std: f64,
    /// Prototype pixel values are affinely compressed into this band.
    pub prototype_low: f64,
    pub prototype_high: f64,
    pub master_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            height: 16,
            width: 16,
            embed_dim: 64,
            pixel_noise_std: 0.05,
            train_per_class: 50,
            eval_per_class: 5,
            prototype_smoothing_std: 2.0,
            prototype_low: 0.1,
            prototype_high: 0.9,
            master_seed: 7,
        }
    }
}

impl DataConfig {
    /// Flattened pixel count.
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.pixel_count() < self.embed_dim {
            return Err(CoreError::InvalidConfig(format!(
                "pixel count {} must be >= embed_dim {}",
                self.pixel_count(),
                self.embed_dim
            )));
        }
        if self.embed_dim == 0 {
            return Err(CoreError::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if !(self.pixel_noise_std >= 0.0 && self.pixel_noise_std.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "pixel_noise_std must be finite and >= 0, got {}",
                self.pixel_noise_std
            )));
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return Err(CoreError::InvalidConfig(
                "train_per_class and eval_per_class must be >= 1".into(),
            ));
        }
        if self.prototype_smoothing_std < 0.0 {
            return Err(CoreError::InvalidConfig(
                "prototype_smoothing_std must be >= 0".into(),
            ));
        }
        if !(0.0 <= self.prototype_low
            && self.prototype_low < self.prototype_high
            && self.prototype_high <= 1.0)
        {
            return Err(CoreError::InvalidConfig(format!(
                "prototype band [{}, {}] must satisfy 0 <= low < high <= 1",
                self.prototype_low, self.prototype_high
            )));
        }
        Ok(())
    }
}

/// Class mean image; every component lies inside the configured band.
#[derive(Debug, Clone)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub mean_image: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// One flattened image with its ground-truth class.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: DVector<f64>,
    pub label: usize,
    pub split: Split,
    pub sample_id: usize,
}

/// Unit-norm label embeddings, one per class, with bounded pairwise
/// coherence.
#[derive(Debug, Clone)]
pub struct LabelBank {
    pub embeddings: Vec<DVector<f64>>,
}

impl LabelBank {
    pub fn num_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.len())
    }
}

/// Maximum |dot| allowed between distinct label embeddings.
pub const COHERENCE_BOUND: f64 = 0.5;

/// Uniform-weight isotropic Gaussian mixture over the class prototypes.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    pub prototypes: Vec<DVector<f64>>,
    pub component_std: f64,
}

/// Everything produced by one seeded generation run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub prototypes: Vec<ClassPrototype>,
    pub train: Vec<ImageSample>,
    pub eval: Vec<ImageSample>,
    pub bank: LabelBank,
    pub mixture: MixtureModel,
}

fn build_prototype(cfg: &DataConfig, class_id: usize) -> ClassPrototype {
    let mut rng = rng::seeded_rng(rng::derive_seed(
        cfg.master_seed,
        stream::PROTOTYPE,
        class_id as u64,
        0,
    ));
    let noise = DVector::from_fn(cfg.pixel_count(), |_, _| rng.gen::<f64>());
    let smoothed = img::gaussian_blur(&noise, cfg.dims(), cfg.prototype_smoothing_std)
        .expect("prototype grid dims are validated");
    let (min, max) = (smoothed.min(), smoothed.max());
    let mid = 0.5 * (cfg.prototype_low + cfg.prototype_high);
    let mean_image = if max - min < 1e-15 {
        DVector::from_element(cfg.pixel_count(), mid)
    } else {
        let scale = (cfg.prototype_high - cfg.prototype_low) / (max - min);
        smoothed.map(|v| cfg.prototype_low + (v - min) * scale)
    };
    ClassPrototype { class_id, mean_image }
}

fn draw_sample(
    cfg: &DataConfig,
    proto: &ClassPrototype,
    split: Split,
    sample_id: usize,
) -> ImageSample {
    let tag = match split {
        Split::Train => stream::TRAIN_SAMPLE,
        Split::Eval => stream::EVAL_SAMPLE,
    };
    let mut rng = rng::seeded_rng(rng::derive_seed(cfg.master_seed, tag, sample_id as u64, 0));
    let noise = rng::normal_vector(&mut rng, cfg.pixel_count());
    let pixels = clip01(&proto.mean_image + cfg.pixel_noise_std * noise);
    ImageSample {
        pixels,
        label: proto.class_id,
        split,
        sample_id,
    }
}

fn build_label_bank(cfg: &DataConfig) -> Result<LabelBank> {
    let budget = 10 * cfg.num_classes * cfg.num_classes;
    let mut embeddings: Vec<DVector<f64>> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0usize;
    while embeddings.len() < cfg.num_classes {
        if attempts >= budget {
            return Err(CoreError::CoherenceRejection {
                attempts,
                embed_dim: cfg.embed_dim,
                num_classes: cfg.num_classes,
                coherence_bound: COHERENCE_BOUND,
            });
        }
        let mut rng = rng::seeded_rng(rng::derive_seed(
            cfg.master_seed,
            stream::LABEL_BANK,
            attempts as u64,
            0,
        ));
        attempts += 1;
        let raw = rng::normal_vector(&mut rng, cfg.embed_dim);
        let norm = raw.norm();
        if norm < 1e-12 {
            continue;
        }
        let candidate = raw / norm;
        if embeddings
            .iter()
            .all(|e| e.dot(&candidate).abs() <= COHERENCE_BOUND)
        {
            embeddings.push(candidate);
        }
    }
    Ok(LabelBank { embeddings })
}

/// Generate prototypes, train/eval samples, the label bank, and the
/// mixture model, all deterministically from `cfg.master_seed`.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let prototypes: Vec<ClassPrototype> =
        (0..cfg.num_classes).map(|y| build_prototype(cfg, y)).collect();

    let mut train = Vec::with_capacity(cfg.num_classes * cfg.train_per_class);
    for proto in &prototypes {
        for i in 0..cfg.train_per_class {
            let sample_id = proto.class_id * cfg.train_per_class + i;
            train.push(draw_sample(cfg, proto, Split::Train, sample_id));
        }
    }
    let mut eval = Vec::with_capacity(cfg.num_classes * cfg.eval_per_class);
    for proto in &prototypes {
        for i in 0..cfg.eval_per_class {
            let sample_id = proto.class_id * cfg.eval_per_class + i;
            eval.push(draw_sample(cfg, proto, Split::Eval, sample_id));
        }
    }

    let bank = build_label_bank(cfg)?;
    let mixture = MixtureModel {
        prototypes: prototypes.iter().map(|p| p.mean_image.clone()).collect(),
        component_std: cfg.pixel_noise_std,
    };

    Ok(Dataset {
        config: cfg.clone(),
        prototypes,
        train,
        eval,
        bank,
        mixture,
    })
}

/// Score function of the noised mixture.
///
/// At noise scale `alpha_bar` the marginal is
/// `p(x) = sum_y (1/C) N(x; sqrt(alpha_bar) mu_y, v I)` with
/// `v = alpha_bar s^2 + 1 - alpha_bar`; the returned vector is
/// `grad_x log p(x)`, computed with log-sum-exp stabilized component
/// responsibilities.
pub fn mixture_score(m: &MixtureModel, x: &DVector<f64>, alpha_bar: f64) -> DVector<f64> {
    debug_assert!(
        (0.0..=1.0).contains(&alpha_bar),
        "alpha_bar out of range: {alpha_bar}"
    );
    let v = alpha_bar * m.component_std * m.component_std + 1.0 - alpha_bar;
    debug_assert!(v > 0.0, "degenerate noise variance");
    let sqrt_ab = alpha_bar.sqrt();

    let mut log_resp: Vec<f64> = Vec::with_capacity(m.prototypes.len());
    let mut residuals: Vec<DVector<f64>> = Vec::with_capacity(m.prototypes.len());
    for mu in &m.prototypes {
        let r = sqrt_ab * mu - x;
        log_resp.push(-r.norm_squared() / (2.0 * v));
        residuals.push(r);
    }
    let max_lr = log_resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_resp.iter().map(|lr| (lr - max_lr).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    let mut score = DVector::zeros(x.len());
    for (w, r) in weights.iter().zip(&residuals) {
        score.axpy(*w / v, r, 1.0);
    }
    score
}

/// Product of the score Jacobian (the log-density Hessian) with `vec`.
///
/// With responsibilities `w_y` and residuals `r_y = sqrt(alpha_bar) mu_y - x`,
/// the Jacobian is
/// `H = (sum_y w_y r_y r_y^T - r r^T) / v^2 - I / v` where `r = sum_y w_y r_y`;
/// the product costs O(C n) instead of materializing the n x n matrix.
pub fn mixture_score_jacobian_product(
    m: &MixtureModel,
    x: &DVector<f64>,
    alpha_bar: f64,
    vec: &DVector<f64>,
) -> DVector<f64> {
    let v = alpha_bar * m.component_std * m.component_std + 1.0 - alpha_bar;
    debug_assert!(v > 0.0, "degenerate noise variance");
    let sqrt_ab = alpha_bar.sqrt();

    let mut log_resp: Vec<f64> = Vec::with_capacity(m.prototypes.len());
    let mut residuals: Vec<DVector<f64>> = Vec::with_capacity(m.prototypes.len());
    for mu in &m.prototypes {
        let r = sqrt_ab * mu - x;
        log_resp.push(-r.norm_squared() / (2.0 * v));
        residuals.push(r);
    }
    let max_lr = log_resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_resp.iter().map(|lr| (lr - max_lr).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    let mut mean_residual = DVector::zeros(x.len());
    for (w, r) in weights.iter().zip(&residuals) {
        mean_residual.axpy(*w, r, 1.0);
    }

    let inv_v2 = 1.0 / (v * v);
    let mut out = vec * (-1.0 / v);
    for (w, r) in weights.iter().zip(&residuals) {
        out.axpy(w * r.dot(vec) * inv_v2, r, 1.0);
    }
    out.axpy(-mean_residual.dot(vec) * inv_v2, &mean_residual, 1.0);
    out
}
