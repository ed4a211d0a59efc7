//! Shared-embedding encoders, the cosine classifier head, analytic input
//! gradients of the cosine objective, and the embedding-to-image decoder
//! used to materialize downstream reconstructions.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::clip01;
use crate::error::{CoreError, Result};
use crate::rng::{self, stream};
use crate::synthdata::{ClassPrototype, ImageSample, LabelBank};

const NORM_FLOOR: f64 = 1e-12;

/// Image-to-embedding map. Embeddings are deliberately not normalized
/// here; normalization happens inside the cosine.
#[derive(Debug, Clone)]
pub enum EncoderModel {
    /// `f(x) = W x` with `W` of shape d x n.
    Linear { weights: DMatrix<f64> },
    /// `f(x) = W2 tanh(W1 x)`.
    Mlp {
        w1: DMatrix<f64>,
        w2: DMatrix<f64>,
        /// Mean training loss per epoch.
        loss_history: Vec<f64>,
    },
}

impl EncoderModel {
    pub fn input_dim(&self) -> usize {
        match self {
            EncoderModel::Linear { weights } => weights.ncols(),
            EncoderModel::Mlp { w1, .. } => w1.ncols(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            EncoderModel::Linear { weights } => weights.nrows(),
            EncoderModel::Mlp { w2, .. } => w2.nrows(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EncoderModel::Linear { .. } => "linear",
            EncoderModel::Mlp { .. } => "mlp",
        }
    }
}

/// Per-class cosine scores, each in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.scores[class]
    }

    /// Highest-scoring class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }

    /// Class indices in descending score order, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        idx
    }
}

/// Apply the encoder. Infallible: any finite input yields an embedding.
pub fn encode(model: &EncoderModel, x: &DVector<f64>) -> DVector<f64> {
    match model {
        EncoderModel::Linear { weights } => weights * x,
        EncoderModel::Mlp { w1, w2, .. } => {
            let hidden = (w1 * x).map(f64::tanh);
            w2 * &hidden
        }
    }
}

/// Cosine scores of `x` against every label embedding.
pub fn classify(model: &EncoderModel, bank: &LabelBank, x: &DVector<f64>) -> Result<ScoreVector> {
    let u = encode(model, x);
    score_embedding(&u, bank)
}

/// Cosine scores of an already-computed embedding.
pub fn score_embedding(u: &DVector<f64>, bank: &LabelBank) -> Result<ScoreVector> {
    let norm = u.norm();
    if norm < NORM_FLOOR {
        return Err(CoreError::UndefinedSimilarity);
    }
    let scores = bank
        .embeddings
        .iter()
        .map(|e| (u.dot(e) / (norm * e.norm())).clamp(-1.0, 1.0))
        .collect();
    Ok(ScoreVector { scores })
}

/// Gradient of `cos(u, target)` with respect to the embedding `u`.
fn cosine_grad_wrt_embedding(u: &DVector<f64>, target: &DVector<f64>) -> Result<DVector<f64>> {
    let un = u.norm();
    if un < NORM_FLOOR {
        return Err(CoreError::SingularGradient { norm: un });
    }
    let tn = target.norm();
    if tn < NORM_FLOOR {
        return Err(CoreError::SingularGradient { norm: tn });
    }
    let dot = u.dot(target);
    Ok(target / (un * tn) - (dot / (un.powi(3) * tn)) * u)
}

/// Gradient of `cos(f(x), target)` with respect to the input pixels.
pub fn grad_cosine_wrt_input(
    model: &EncoderModel,
    x: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<DVector<f64>> {
    cosine_and_grad(model, x, target).map(|(_, g)| g)
}

/// `cos(f(x), target)` and its input gradient from one forward pass.
pub fn cosine_and_grad(
    model: &EncoderModel,
    x: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let tn = target.norm();
    match model {
        EncoderModel::Linear { weights } => {
            let u = weights * x;
            let g_u = cosine_grad_wrt_embedding(&u, target)?;
            let cos = (u.dot(target) / (u.norm() * tn)).clamp(-1.0, 1.0);
            Ok((cos, weights.transpose() * g_u))
        }
        EncoderModel::Mlp { w1, w2, .. } => {
            let a = w1 * x;
            let h = a.map(f64::tanh);
            let u = w2 * &h;
            let g_u = cosine_grad_wrt_embedding(&u, target)?;
            let cos = (u.dot(target) / (u.norm() * tn)).clamp(-1.0, 1.0);
            let g_h = w2.transpose() * g_u;
            let g_a = g_h.zip_map(&h, |g, hv| g * (1.0 - hv * hv));
            Ok((cos, w1.transpose() * g_a))
        }
    }
}

/// Batched [`cosine_and_grad`] over the columns of `xs`.
///
/// Columns whose embedding norm underflows contribute cosine 0 and a zero
/// gradient instead of an error; attack loops treat an all-zero gradient
/// as a stalled step.
pub fn cosine_and_grad_batch(
    model: &EncoderModel,
    xs: &DMatrix<f64>,
    target: &DVector<f64>,
) -> (Vec<f64>, DMatrix<f64>) {
    let tn = target.norm();
    let cols = xs.ncols();
    let finish = |u: DMatrix<f64>| -> (Vec<f64>, DMatrix<f64>) {
        let mut cosines = Vec::with_capacity(cols);
        let mut g_u = DMatrix::zeros(u.nrows(), cols);
        for b in 0..cols {
            let ub = u.column(b);
            let un = ub.norm();
            if un < NORM_FLOOR || tn < NORM_FLOOR {
                cosines.push(0.0);
                continue;
            }
            let dot = ub.dot(target);
            cosines.push((dot / (un * tn)).clamp(-1.0, 1.0));
            let scale_u = -dot / (un.powi(3) * tn);
            let scale_e = 1.0 / (un * tn);
            for i in 0..u.nrows() {
                g_u[(i, b)] = scale_e * target[i] + scale_u * ub[i];
            }
        }
        (cosines, g_u)
    };
    match model {
        EncoderModel::Linear { weights } => {
            let u = weights * xs;
            let (cosines, g_u) = finish(u);
            (cosines, weights.transpose() * g_u)
        }
        EncoderModel::Mlp { w1, w2, .. } => {
            let h = (w1 * xs).map(f64::tanh);
            let u = w2 * &h;
            let (cosines, g_u) = finish(u);
            let g_h = w2.transpose() * g_u;
            let g_a = g_h.zip_map(&h, |g, hv| g * (1.0 - hv * hv));
            (cosines, w1.transpose() * g_a)
        }
    }
}

/// Scale-aware default ridge for the encoder fit:
/// `1e-6 * trace(P P^T) / n`.
pub fn default_encoder_ridge(prototypes: &[ClassPrototype]) -> f64 {
    let n = prototypes.first().map_or(1, |p| p.mean_image.len());
    let trace: f64 = prototypes.iter().map(|p| p.mean_image.norm_squared()).sum();
    1e-6 * trace / n as f64
}

/// Cholesky solve that reports rank deficiency instead of returning the
/// garbage a numerically semidefinite factorization would produce.
fn spd_solve(gram: DMatrix<f64>, rhs: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let deficient = || CoreError::RankDeficient {
        context: context.to_string(),
    };
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(deficient)?;
    let l = chol.l_dirty();
    let mut min_piv = f64::INFINITY;
    let mut max_piv = 0.0f64;
    for i in 0..l.nrows() {
        let p = l[(i, i)];
        min_piv = min_piv.min(p);
        max_piv = max_piv.max(p);
    }
    // pivots are square roots of the elimination diagonal; 1e-6 here
    // corresponds to an eigenvalue ratio of 1e-12
    if min_piv <= 1e-6 * max_piv || !min_piv.is_finite() {
        return Err(deficient());
    }
    Ok(chol.solve(rhs))
}

/// Ridge fit of the linear encoder on the class prototypes.
///
/// Solves `W = E (P^T P + ridge I)^{-1} P^T` (the dual form of
/// `E P^T (P P^T + ridge I)^{-1}`, identical for ridge > 0 and defined
/// whenever the prototypes are linearly independent at ridge 0); the
/// resulting map reproduces `W mu_y = e_y` exactly in that case.
pub fn fit_encoder_linear(
    prototypes: &[ClassPrototype],
    bank: &LabelBank,
    ridge: f64,
) -> Result<EncoderModel> {
    if prototypes.is_empty() {
        return Err(CoreError::EmptyInput("no prototypes to fit on".into()));
    }
    if prototypes.len() != bank.num_classes() {
        return Err(CoreError::InvalidConfig(format!(
            "{} prototypes vs {} label embeddings",
            prototypes.len(),
            bank.num_classes()
        )));
    }
    if ridge < 0.0 {
        return Err(CoreError::InvalidConfig("ridge must be >= 0".into()));
    }
    let n = prototypes[0].mean_image.len();
    let c = prototypes.len();
    let d = bank.embed_dim();

    let p = DMatrix::from_fn(n, c, |i, j| prototypes[j].mean_image[i]);
    let e = DMatrix::from_fn(d, c, |i, j| bank.embeddings[j][i]);

    let mut gram = p.transpose() * &p;
    for i in 0..c {
        gram[(i, i)] += ridge;
    }
    let k = spd_solve(
        gram,
        &p.transpose(),
        &format!("fitting linear encoder on {c} prototypes with ridge {ridge}"),
    )?;
    let weights = e * k;
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NumericFailure {
            context: "linear encoder weights".into(),
        });
    }
    Ok(EncoderModel::Linear { weights })
}

/// Hyperparameters for the MLP encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHyperParams {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// First-layer init std is `init_scale / sqrt(n)`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for MlpHyperParams {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 64,
            init_scale: 4.0,
            seed: 0,
        }
    }
}

/// Loss `mean_b (1 - cos(W2 tanh(W1 x_b), e_b))` and its gradients with
/// respect to both weight matrices. Columns of `xs` are inputs, columns
/// of `targets` the matching label embeddings.
pub fn mlp_loss_and_grads(
    w1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    xs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let batch = xs.ncols();
    let a = w1 * xs;
    let h = a.map(f64::tanh);
    let u = w2 * &h;

    let mut loss = 0.0;
    let mut g_u = DMatrix::zeros(u.nrows(), batch);
    for b in 0..batch {
        let ub = u.column(b);
        let eb = targets.column(b);
        let un = ub.norm();
        let en = eb.norm();
        if un < NORM_FLOOR || en < NORM_FLOOR {
            loss += 1.0;
            continue;
        }
        let dot = ub.dot(&eb);
        loss += 1.0 - dot / (un * en);
        // d(1 - cos)/du = -(e/(|u||e|) - dot * u / (|u|^3 |e|))
        let scale_e = -1.0 / (un * en);
        let scale_u = dot / (un.powi(3) * en);
        for i in 0..u.nrows() {
            g_u[(i, b)] = scale_e * eb[i] + scale_u * ub[i];
        }
    }
    loss /= batch as f64;

    let inv_b = 1.0 / batch as f64;
    let grad_w2 = (&g_u * h.transpose()) * inv_b;
    let g_h = w2.transpose() * &g_u;
    let g_a = g_h.zip_map(&h, |g, hv| g * (1.0 - hv * hv));
    let grad_w1 = (&g_a * xs.transpose()) * inv_b;
    (loss, grad_w1, grad_w2)
}

/// Mini-batch gradient descent on the mean cosine loss, deterministic for
/// a fixed seed.
pub fn fit_encoder_mlp(
    train: &[ImageSample],
    bank: &LabelBank,
    params: &MlpHyperParams,
) -> Result<EncoderModel> {
    if train.is_empty() {
        return Err(CoreError::EmptyInput("no training samples".into()));
    }
    if params.hidden_dim == 0 || params.batch_size == 0 {
        return Err(CoreError::InvalidConfig(
            "hidden_dim and batch_size must be >= 1".into(),
        ));
    }
    let n = train[0].pixels.len();
    let d = bank.embed_dim();
    let h_dim = params.hidden_dim;

    let mut init_rng = rng::seeded_rng(rng::derive_seed(params.seed, stream::MLP_INIT, 0, 0));
    let w1_std = params.init_scale / (n as f64).sqrt();
    let w2_std = 1.0 / (h_dim as f64).sqrt();
    let mut w1 = DMatrix::from_fn(h_dim, n, |_, _| {
        w1_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut init_rng)
    });
    let mut w2 = DMatrix::from_fn(d, h_dim, |_, _| {
        w2_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut init_rng)
    });

    let mut loss_history = Vec::with_capacity(params.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..params.epochs {
        let mut shuffle_rng = rng::seeded_rng(rng::derive_seed(
            params.seed,
            stream::MLP_SHUFFLE,
            epoch as u64,
            0,
        ));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(params.batch_size) {
            let xs = DMatrix::from_fn(n, chunk.len(), |i, j| train[chunk[j]].pixels[i]);
            let es = DMatrix::from_fn(d, chunk.len(), |i, j| {
                bank.embeddings[train[chunk[j]].label][i]
            });
            let (loss, g1, g2) = mlp_loss_and_grads(&w1, &w2, &xs, &es);
            if !loss.is_finite() {
                return Err(CoreError::Divergence { epoch });
            }
            w1 -= params.learning_rate * g1;
            w2 -= params.learning_rate * g2;
            epoch_loss += loss;
            batches += 1;
        }
        loss_history.push(epoch_loss / batches as f64);
    }

    Ok(EncoderModel::Mlp { w1, w2, loss_history })
}

/// Affine map from embeddings back to pixel space.
#[derive(Debug, Clone)]
pub struct DownstreamDecoder {
    /// n x d decode matrix.
    pub matrix: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Mean per-pixel squared training residual.
    pub fit_residual: f64,
}

/// Scale-aware default decoder ridge: `1e-6 * trace(Z Z^T) / d`.
pub fn default_decoder_ridge(embeddings: &[DVector<f64>]) -> f64 {
    let d = embeddings.first().map_or(1, |e| e.len());
    let trace: f64 = embeddings.iter().map(|e| e.norm_squared()).sum();
    1e-6 * trace / d as f64
}

/// Centered ridge regression from `f(x_i)` to `x_i` over the train set.
pub fn fit_downstream_decoder(
    model: &EncoderModel,
    train: &[ImageSample],
    ridge: f64,
) -> Result<DownstreamDecoder> {
    if train.is_empty() {
        return Err(CoreError::EmptyInput("no training samples".into()));
    }
    if ridge < 0.0 {
        return Err(CoreError::InvalidConfig("ridge must be >= 0".into()));
    }
    let n = train[0].pixels.len();
    let d = model.embed_dim();
    let m = train.len();

    let embeddings: Vec<DVector<f64>> = train.iter().map(|s| encode(model, &s.pixels)).collect();
    let z_mean = embeddings.iter().fold(DVector::zeros(d), |acc, z| acc + z) / m as f64;
    let x_mean = train
        .iter()
        .fold(DVector::zeros(n), |acc, s| acc + &s.pixels)
        / m as f64;

    let zc = DMatrix::from_fn(d, m, |i, j| embeddings[j][i] - z_mean[i]);
    let xc = DMatrix::from_fn(n, m, |i, j| train[j].pixels[i] - x_mean[i]);

    let mut gram = &zc * zc.transpose();
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    // D = Xc Zc^T (Zc Zc^T + ridge I)^{-1}, via solving for the transpose.
    let k = spd_solve(
        gram,
        &(&zc * xc.transpose()),
        &format!("fitting downstream decoder with ridge {ridge}"),
    )?;
    let matrix = k.transpose();
    let bias = &x_mean - &matrix * &z_mean;

    let mut residual = 0.0;
    for (s, z) in train.iter().zip(&embeddings) {
        let rec = &matrix * z + &bias;
        residual += (&rec - &s.pixels).norm_squared();
    }
    residual /= (m * n) as f64;

    Ok(DownstreamDecoder {
        matrix,
        bias,
        fit_residual: residual,
    })
}

/// Decode an embedding to pixels, clipped into `[0, 1]`.
pub fn decode_embedding(dec: &DownstreamDecoder, e: &DVector<f64>) -> DVector<f64> {
    clip01(&dec.matrix * e + &dec.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, DataConfig};
    use approx::assert_abs_diff_eq;

    fn proto(values: &[f64]) -> ClassPrototype {
        ClassPrototype {
            class_id: 0,
            mean_image: DVector::from_row_slice(values),
        }
    }

    fn bank(vectors: &[&[f64]]) -> LabelBank {
        LabelBank {
            embeddings: vectors.iter().map(|v| DVector::from_row_slice(v)).collect(),
        }
    }

    #[test]
    fn identity_alignment_single_prototype() {
        let prototypes = vec![proto(&[1.0, 0.0])];
        let bank = bank(&[&[1.0, 0.0]]);
        let model = fit_encoder_linear(&prototypes, &bank, 0.0).unwrap();
        let out = encode(&model, &DVector::from_row_slice(&[1.0, 0.0]));
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn huge_ridge_shrinks_weights() {
        let prototypes = vec![proto(&[1.0, 0.0]), {
            let mut p = proto(&[0.0, 1.0]);
            p.class_id = 1;
            p
        }];
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let model = fit_encoder_linear(&prototypes, &b, 1e9).unwrap();
        let EncoderModel::Linear { weights } = &model else {
            panic!("expected linear")
        };
        // || W ||_F << || E P^T ||_F = sqrt(2)
        assert!(weights.norm() < 1e-6 * 2.0_f64.sqrt());
    }

    #[test]
    fn exact_fit_on_independent_prototypes() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 3,
            height: 2,
            width: 2,
            embed_dim: 3,
            train_per_class: 1,
            eval_per_class: 1,
            master_seed: 5,
            ..DataConfig::default()
        })
        .unwrap();
        let model = fit_encoder_linear(&ds.prototypes, &ds.bank, 0.0).unwrap();
        for (p, e) in ds.prototypes.iter().zip(&ds.bank.embeddings) {
            let err = (encode(&model, &p.mean_image) - e).norm();
            assert!(err <= 1e-8, "fit error {err}");
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        // two identical prototypes cannot be interpolated at ridge 0
        let prototypes = vec![proto(&[1.0, 1.0]), {
            let mut p = proto(&[1.0, 1.0]);
            p.class_id = 1;
            p
        }];
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let err = fit_encoder_linear(&prototypes, &b, 0.0).unwrap_err();
        assert!(matches!(err, CoreError::RankDeficient { .. }));
    }

    #[test]
    fn encode_identity_block_keeps_leading_coords() {
        let mut w = DMatrix::zeros(2, 4);
        w[(0, 0)] = 1.0;
        w[(1, 1)] = 1.0;
        let model = EncoderModel::Linear { weights: w };
        let x = DVector::from_row_slice(&[0.3, 0.7, 9.0, -2.0]);
        let u = encode(&model, &x);
        assert_eq!(u, DVector::from_row_slice(&[0.3, 0.7]));
        let zero = encode(&model, &DVector::zeros(4));
        assert_eq!(zero, DVector::zeros(2));
    }

    #[test]
    fn classify_exact_embedding_hits_one() {
        let model = EncoderModel::Linear {
            weights: DMatrix::identity(4, 4),
        };
        let b = bank(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
        ]);
        let x = DVector::from_row_slice(&[0.0, 0.0, 0.0, 1.0]);
        let s = classify(&model, &b, &x).unwrap();
        assert_abs_diff_eq!(s.get(3), 1.0, epsilon = 1e-12);
        assert_eq!(s.argmax(), 3);
    }

    #[test]
    fn classify_orthogonal_embedding_scores_zero() {
        let model = EncoderModel::Linear {
            weights: DMatrix::identity(4, 4),
        };
        let b = bank(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
        ]);
        let x = DVector::from_row_slice(&[0.0, 0.0, 0.0, 2.0]);
        let s = classify(&model, &b, &x).unwrap();
        for y in 0..3 {
            assert_abs_diff_eq!(s.get(y), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn classify_diagonal_two_class_case() {
        let model = EncoderModel::Linear {
            weights: DMatrix::identity(2, 2),
        };
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let inv = 1.0 / 2.0_f64.sqrt();
        let s = classify(&model, &b, &DVector::from_row_slice(&[inv, inv])).unwrap();
        assert_abs_diff_eq!(s.get(0), 0.7071, epsilon = 1e-4);
        assert_abs_diff_eq!(s.get(1), 0.7071, epsilon = 1e-4);
    }

    #[test]
    fn classify_zero_embedding_is_an_error() {
        let model = EncoderModel::Linear {
            weights: DMatrix::zeros(2, 2),
        };
        let b = bank(&[&[1.0, 0.0]]);
        let err = classify(&model, &b, &DVector::from_row_slice(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, CoreError::UndefinedSimilarity));
    }

    #[test]
    fn gradient_identity_encoder_hand_case() {
        let model = EncoderModel::Linear {
            weights: DMatrix::identity(2, 2),
        };
        let x = DVector::from_row_slice(&[0.0, 1.0]);
        let target = DVector::from_row_slice(&[1.0, 0.0]);
        let g = grad_cosine_wrt_input(&model, &x, &target).unwrap();
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_vanishes_when_parallel_to_target() {
        let model = EncoderModel::Linear {
            weights: DMatrix::identity(3, 3),
        };
        let x = DVector::from_row_slice(&[0.4, 0.2, -0.1]);
        let target = 3.5 * &x;
        let g = grad_cosine_wrt_input(&model, &x, &target).unwrap();
        assert!(g.norm() <= 1e-8, "gradient norm {}", g.norm());
    }

    #[test]
    fn scale_invariance_of_ranking() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 5,
            height: 4,
            width: 4,
            embed_dim: 8,
            train_per_class: 2,
            eval_per_class: 1,
            master_seed: 3,
            ..DataConfig::default()
        })
        .unwrap();
        let model = fit_encoder_linear(&ds.prototypes, &ds.bank, 0.0).unwrap();
        let EncoderModel::Linear { weights } = &model else {
            panic!()
        };
        let scaled = EncoderModel::Linear {
            weights: weights * 3.0,
        };
        for s in &ds.eval {
            let a = classify(&model, &ds.bank, &s.pixels).unwrap();
            let b = classify(&scaled, &ds.bank, &s.pixels).unwrap();
            assert_eq!(a.ranking(), b.ranking());
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mlp_zero_learning_rate_keeps_init() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 3,
            height: 4,
            width: 4,
            embed_dim: 6,
            train_per_class: 4,
            eval_per_class: 1,
            master_seed: 2,
            ..DataConfig::default()
        })
        .unwrap();
        let base = MlpHyperParams {
            hidden_dim: 8,
            epochs: 0,
            seed: 9,
            ..MlpHyperParams::default()
        };
        let frozen = MlpHyperParams {
            epochs: 1,
            learning_rate: 0.0,
            ..base.clone()
        };
        let init = fit_encoder_mlp(&ds.train, &ds.bank, &base).unwrap();
        let after = fit_encoder_mlp(&ds.train, &ds.bank, &frozen).unwrap();
        let (EncoderModel::Mlp { w1: a1, w2: a2, .. }, EncoderModel::Mlp { w1: b1, w2: b2, .. }) =
            (&init, &after)
        else {
            panic!()
        };
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn mlp_training_is_deterministic() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 3,
            height: 4,
            width: 4,
            embed_dim: 6,
            train_per_class: 4,
            eval_per_class: 1,
            master_seed: 2,
            ..DataConfig::default()
        })
        .unwrap();
        let params = MlpHyperParams {
            hidden_dim: 8,
            epochs: 3,
            seed: 4,
            ..MlpHyperParams::default()
        };
        let a = fit_encoder_mlp(&ds.train, &ds.bank, &params).unwrap();
        let b = fit_encoder_mlp(&ds.train, &ds.bank, &params).unwrap();
        let (EncoderModel::Mlp { w1: a1, .. }, EncoderModel::Mlp { w1: b1, .. }) = (&a, &b) else {
            panic!()
        };
        assert_eq!(a1, b1);
    }

    #[test]
    fn degenerate_decoder_returns_pixel_mean() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 3,
            height: 4,
            width: 4,
            embed_dim: 6,
            train_per_class: 4,
            eval_per_class: 1,
            master_seed: 2,
            ..DataConfig::default()
        })
        .unwrap();
        // an all-zero encoder embeds every sample identically
        let zero_enc = EncoderModel::Linear {
            weights: DMatrix::zeros(6, 16),
        };
        let dec = fit_downstream_decoder(&zero_enc, &ds.train, 1e-3).unwrap();
        let m = ds.train.len() as f64;
        let mean = ds
            .train
            .iter()
            .fold(DVector::zeros(16), |acc, s| acc + &s.pixels)
            / m;
        let out = decode_embedding(&dec, &DVector::from_element(6, 0.37));
        for (a, b) in out.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(*a, b.clamp(0.0, 1.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn huge_decoder_ridge_collapses_to_mean() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 3,
            height: 4,
            width: 4,
            embed_dim: 6,
            train_per_class: 4,
            eval_per_class: 1,
            master_seed: 2,
            ..DataConfig::default()
        })
        .unwrap();
        let enc = fit_encoder_linear(&ds.prototypes, &ds.bank, 0.0).unwrap();
        let dec = fit_downstream_decoder(&enc, &ds.train, 1e12).unwrap();
        let m = ds.train.len() as f64;
        let mean = ds
            .train
            .iter()
            .fold(DVector::zeros(16), |acc, s| acc + &s.pixels)
            / m;
        let out = decode_embedding(&dec, &encode(&enc, &ds.train[0].pixels));
        for (a, b) in out.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(*a, b.clamp(0.0, 1.0), epsilon = 1e-4);
        }
    }

    #[test]
    fn decoder_reconstructs_train_samples_within_residual() {
        let ds = generate_dataset(&DataConfig {
            num_classes: 4,
            height: 4,
            width: 4,
            embed_dim: 8,
            train_per_class: 8,
            eval_per_class: 1,
            master_seed: 6,
            ..DataConfig::default()
        })
        .unwrap();
        let enc = fit_encoder_linear(&ds.prototypes, &ds.bank, 0.0).unwrap();
        let ridge = 1e-8;
        let dec = fit_downstream_decoder(&enc, &ds.train, ridge).unwrap();
        // per-pixel MSE over train matches the recorded residual
        let mut mse = 0.0;
        for s in &ds.train {
            let rec = &dec.matrix * encode(&enc, &s.pixels) + &dec.bias;
            mse += (rec - &s.pixels).norm_squared();
        }
        mse /= (ds.train.len() * 16) as f64;
        assert_abs_diff_eq!(mse, dec.fit_residual, epsilon = 1e-12);
    }
}
