//! On-disk serialization of datasets and fitted models: flat CSV arrays
//! plus a TOML manifest carrying the config echo and a content hash.
//!
//! Layout under the output directory:
//!
//! ```text
//! dataset/
//!   manifest.toml        config echo, row counts, sha256 content hash
//!   prototypes.csv       one row per class, n pixel columns
//!   train_pixels.csv     one row per sample
//!   train_labels.csv     sample_id,label
//!   eval_pixels.csv
//!   eval_labels.csv
//!   label_embeddings.csv one row per class, d columns
//! models/
//!   manifest.toml
//!   linear_weights.csv   d x n
//!   mlp_w1.csv           hidden x n
//!   mlp_w2.csv           d x hidden
//!   pca_mean.csv         1 x n
//!   pca_basis.csv        n x rank
//!   decoder_matrix.csv   n x d (experiment encoder's decoder)
//!   decoder_bias.csv     1 x n
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces the exact bit pattern.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use illusion_core::encoder::EncoderModel;
use illusion_core::synthdata::{Dataset, ImageSample};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::workbench::Workbench;

fn vectors_csv<'a>(rows: impl Iterator<Item = &'a DVector<f64>>) -> String {
    let mut out = String::new();
    for row in rows {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    out
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let mut first = true;
        for c in 0..m.ncols() {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{}", m[(r, c)]);
            first = false;
        }
        out.push('\n');
    }
    out
}

fn labels_csv(samples: &[ImageSample]) -> String {
    let mut out = String::from("sample_id,label\n");
    for s in samples {
        let _ = writeln!(out, "{},{}", s.sample_id, s.label);
    }
    out
}

fn write_all(dir: &Path, files: &[(&str, &str)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

fn content_hash(files: &[(&str, &str)]) -> String {
    let mut hasher = Sha256::new();
    for (name, contents) in files {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(contents.as_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Serialize the dataset under `out_dir/dataset/`.
pub fn write_dataset(out_dir: &Path, cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<PathBuf>> {
    let prototypes = vectors_csv(ds.prototypes.iter().map(|p| &p.mean_image));
    let train_pixels = vectors_csv(ds.train.iter().map(|s| &s.pixels));
    let eval_pixels = vectors_csv(ds.eval.iter().map(|s| &s.pixels));
    let train_labels = labels_csv(&ds.train);
    let eval_labels = labels_csv(&ds.eval);
    let embeddings = vectors_csv(ds.bank.embeddings.iter());

    let data_files: Vec<(&str, &str)> = vec![
        ("prototypes.csv", prototypes.as_str()),
        ("train_pixels.csv", train_pixels.as_str()),
        ("train_labels.csv", train_labels.as_str()),
        ("eval_pixels.csv", eval_pixels.as_str()),
        ("eval_labels.csv", eval_labels.as_str()),
        ("label_embeddings.csv", embeddings.as_str()),
    ];
    let manifest = format!(
        "content_hash = \"{}\"\nconfig_hash = \"{}\"\ntrain_samples = {}\neval_samples = {}\n\n[config]\n{}",
        content_hash(&data_files),
        cfg.short_hash()?,
        ds.train.len(),
        ds.eval.len(),
        indent_toml(&cfg.canonical_toml()?),
    );
    let mut files = data_files;
    files.push(("manifest.toml", manifest.as_str()));
    write_all(&out_dir.join("dataset"), &files)
}

// nests the config echo under [config] by prefixing table headers
fn indent_toml(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('[') {
            out.push_str(&format!("[config.{rest}\n"));
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Serialize the fitted models under `out_dir/models/`.
pub fn write_models(out_dir: &Path, wb: &Workbench) -> Result<Vec<PathBuf>> {
    let (linear, mlp) = match (&wb.encoder, &wb.alt_encoder) {
        (EncoderModel::Linear { .. }, _) => (&wb.encoder, &wb.alt_encoder),
        _ => (&wb.alt_encoder, &wb.encoder),
    };
    let EncoderModel::Linear { weights } = linear else {
        anyhow::bail!("expected one linear encoder");
    };
    let EncoderModel::Mlp { w1, w2, .. } = mlp else {
        anyhow::bail!("expected one mlp encoder");
    };

    let linear_csv = matrix_csv(weights);
    let w1_csv = matrix_csv(w1);
    let w2_csv = matrix_csv(w2);
    let pca_mean = vectors_csv(std::iter::once(&wb.pca.basis.mean));
    let pca_basis = matrix_csv(&wb.pca.basis.basis);
    let dec_matrix = matrix_csv(&wb.decoder.matrix);
    let dec_bias = vectors_csv(std::iter::once(&wb.decoder.bias));

    let model_files: Vec<(&str, &str)> = vec![
        ("linear_weights.csv", linear_csv.as_str()),
        ("mlp_w1.csv", w1_csv.as_str()),
        ("mlp_w2.csv", w2_csv.as_str()),
        ("pca_mean.csv", pca_mean.as_str()),
        ("pca_basis.csv", pca_basis.as_str()),
        ("decoder_matrix.csv", dec_matrix.as_str()),
        ("decoder_bias.csv", dec_bias.as_str()),
    ];
    let manifest = format!(
        "content_hash = \"{}\"\nconfig_hash = \"{}\"\nencoder_kind = \"{}\"\nvae_sigma = {}\npca_captured_variance = {}\npca_effective_rank = {}\ndecoder_fit_residual = {}\n\n[config]\n{}",
        content_hash(&model_files),
        wb.cfg.short_hash()?,
        wb.encoder.kind_name(),
        wb.vae_sigma,
        wb.pca.captured_variance,
        wb.pca.effective_rank,
        wb.decoder.fit_residual,
        indent_toml(&wb.cfg.canonical_toml()?),
    );
    let mut files = model_files;
    files.push(("manifest.toml", manifest.as_str()));
    write_all(&out_dir.join("models"), &files)
}
