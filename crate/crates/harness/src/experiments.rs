//! The four experiment protocols: the method x input-kind metric grid,
//! the sampling-size sweep, the attack-cost measurement, and the
//! cross-encoder transfer run.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use illusion_core::attack::{run_attack_batch, AttackCostRecord};
use illusion_core::consensus::{
    consensus_classify, summarize, ConsensusConfig, ConsensusDecision, EvalRecord, LabelKind,
    MetricSummary,
};
use illusion_core::encoder::{
    classify, decode_embedding, encode, score_embedding, DownstreamDecoder, EncoderModel,
    ScoreVector,
};
use illusion_core::exec;
use illusion_core::reconstruct::Reconstructor;
use illusion_core::rng::{derive_seed, stream};
use illusion_core::synthdata::LabelBank;
use nalgebra::DVector;

use crate::workbench::{consensus_seed, ctx, Workbench};

/// A defense method evaluated by the grid.
#[derive(Debug, Clone)]
pub enum MethodSpec {
    None,
    Single(Reconstructor),
    Sampling(Reconstructor),
}

impl MethodSpec {
    fn from_name(wb: &Workbench, name: &str) -> Result<Self> {
        Ok(match name {
            "none" => MethodSpec::None,
            "ae" => MethodSpec::Single(wb.ae()),
            "vae" => MethodSpec::Single(wb.vae()),
            "dm" => MethodSpec::Single(wb.dm(false)),
            "vae_sampling" => MethodSpec::Sampling(wb.vae()),
            "dm_sampling" => MethodSpec::Sampling(wb.dm(true)),
            other => {
                let kind = wb
                    .cfg
                    .transform_kind(other)
                    .ok_or_else(|| anyhow!("unknown method \"{other}\""))?;
                MethodSpec::Single(Reconstructor::Transform {
                    kind,
                    dims: wb.cfg.grid_dims(),
                })
            }
        })
    }
}

pub const INPUT_KINDS: [&str; 4] = ["org_img", "org_rec", "prt_img", "prt_rec"];
pub const LABEL_KINDS: [LabelKind; 2] = [LabelKind::Original, LabelKind::Target];

/// Per-sample, per-cell flat record for the audit CSV.
#[derive(Debug, Clone)]
pub struct GridRecordRow {
    pub method: String,
    pub input_kind: String,
    pub sample_id: usize,
    pub true_label: usize,
    pub target_label: usize,
    pub top1_original: bool,
    pub top5_original: bool,
    pub cs_original: f64,
    pub top1_target: bool,
    pub top5_target: bool,
    pub cs_target: f64,
}

/// One consensus draw, flattened for the audit CSV.
#[derive(Debug, Clone)]
pub struct VoteRow {
    pub method: String,
    pub input_kind: String,
    pub sample_id: usize,
    pub draw_index: usize,
    pub vote: usize,
    pub top_score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GridOutput {
    /// (method, input_kind, label_kind) -> summary, lexicographic.
    pub cells: BTreeMap<(String, String, String), MetricSummary>,
    pub records: Vec<GridRecordRow>,
    /// Per-draw vote records; populated when `consensus.dump_votes` is set.
    pub votes: Vec<VoteRow>,
}

fn record_row(method: &str, input_kind: &str, r: &EvalRecord) -> GridRecordRow {
    let k5 = 5.min(r.scores.len());
    GridRecordRow {
        method: method.to_string(),
        input_kind: input_kind.to_string(),
        sample_id: r.sample_id,
        true_label: r.true_label,
        target_label: r.target_label,
        top1_original: r.top1_hit(LabelKind::Original),
        top5_original: illusion_core::consensus::topk_hit(&r.scores, r.true_label, k5),
        cs_original: r.scores.get(r.true_label),
        top1_target: r.top1_hit(LabelKind::Target),
        top5_target: illusion_core::consensus::topk_hit(&r.scores, r.target_label, k5),
        cs_target: r.scores.get(r.target_label),
    }
}

/// Pipeline for one (method, input) pair: the "img" scores classify the
/// sanitized input directly; the "rec" scores classify the image decoded
/// from its embedding (for sampling methods, the embedding of the draw
/// that voted with the consensus winner at the highest score).
struct CellScores {
    img: ScoreVector,
    img_winner: Option<usize>,
    rec: ScoreVector,
    /// (vote, top score) per draw, kept only when vote dumping is on.
    draw_votes: Vec<(usize, f64)>,
}

fn decode_and_classify(
    encoder: &EncoderModel,
    decoder: &DownstreamDecoder,
    bank: &LabelBank,
    embedding: &DVector<f64>,
) -> Result<ScoreVector> {
    let image = decode_embedding(decoder, embedding);
    classify(encoder, bank, &image).map_err(|e| anyhow!("classifying decoded image: {e}"))
}

fn winning_draw_embedding(decision: &ConsensusDecision) -> &DVector<f64> {
    let mut best: Option<usize> = None;
    for (i, d) in decision.draws.iter().enumerate() {
        if d.vote != decision.winner {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) => {
                if d.top_score > decision.draws[b].top_score {
                    best = Some(i);
                }
            }
        }
    }
    // the winner always holds at least one vote
    &decision.draws[best.expect("winning class holds a vote")].embedding
}

fn cell_scores(
    wb: &Workbench,
    method_idx: usize,
    method: &MethodSpec,
    sample_id: usize,
    input: &DVector<f64>,
    perturbed_arm: bool,
) -> Result<CellScores> {
    let enc = &wb.encoder;
    let bank = &wb.dataset.bank;
    let arm = perturbed_arm as u64;
    match method {
        MethodSpec::None => {
            let img = classify(enc, bank, input).map_err(|e| anyhow!("classify: {e}"))?;
            let rec = decode_and_classify(enc, &wb.decoder, bank, &encode(enc, input))?;
            Ok(CellScores {
                img,
                img_winner: None,
                rec,
                draw_votes: Vec::new(),
            })
        }
        MethodSpec::Single(recon) => {
            let seed = derive_seed(
                wb.cfg.master_seed,
                stream::SINGLE_RECON,
                sample_id as u64,
                (method_idx as u64) << 1 | arm,
            );
            let sanitized = recon
                .apply(input, seed)
                .map_err(|e| anyhow!("sanitizer {}: {e}", recon.kind_name()))?;
            let img = classify(enc, bank, &sanitized).map_err(|e| anyhow!("classify: {e}"))?;
            let rec = decode_and_classify(enc, &wb.decoder, bank, &encode(enc, &sanitized))?;
            Ok(CellScores {
                img,
                img_winner: None,
                rec,
                draw_votes: Vec::new(),
            })
        }
        MethodSpec::Sampling(recon) => {
            let cc = ConsensusConfig {
                num_samples: wb.cfg.consensus.num_draws,
                seed: consensus_seed(
                    wb.cfg.master_seed,
                    sample_id,
                    ctx::GRID_BASE + ((method_idx as u64) << 1 | arm),
                ),
            };
            let decision = consensus_classify(input, &cc, recon, enc, bank)
                .map_err(|e| anyhow!("consensus: {e}"))?;
            let rec = decode_and_classify(enc, &wb.decoder, bank, winning_draw_embedding(&decision))?;
            let draw_votes = if wb.cfg.consensus.dump_votes {
                decision.draws.iter().map(|d| (d.vote, d.top_score)).collect()
            } else {
                Vec::new()
            };
            Ok(CellScores {
                img: decision.mean_scores.clone(),
                img_winner: Some(decision.winner),
                rec,
                draw_votes,
            })
        }
    }
}

fn run_method_grid(wb: &Workbench, method_names: &[String]) -> Result<GridOutput> {
    let methods: Vec<(String, MethodSpec)> = method_names
        .iter()
        .map(|name| Ok((name.clone(), MethodSpec::from_name(wb, name)?)))
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        bail!("empty method roster");
    }

    let indices: Vec<usize> = (0..wb.dataset.eval.len()).collect();
    type SampleCells = Vec<(String, String, EvalRecord, Vec<(usize, f64)>)>;
    let per_sample: Vec<Result<SampleCells>> = exec::batch_map(&indices, |&i| {
        let sample = &wb.dataset.eval[i];
        let target = wb.targets[i];
        let mut out: SampleCells = Vec::with_capacity(methods.len() * 4);
        for (m_idx, (name, spec)) in methods.iter().enumerate() {
            for (input, is_prt) in [(&sample.pixels, false), (wb.attacked_pixels(i), true)] {
                let scores = cell_scores(wb, m_idx, spec, sample.sample_id, input, is_prt)
                    .with_context(|| format!("method {name}, sample {}", sample.sample_id))?;
                let (img_kind, rec_kind) = if is_prt {
                    ("prt_img", "prt_rec")
                } else {
                    ("org_img", "org_rec")
                };
                out.push((
                    name.clone(),
                    img_kind.into(),
                    EvalRecord {
                        sample_id: sample.sample_id,
                        true_label: sample.label,
                        target_label: target,
                        scores: scores.img,
                        winner_override: scores.img_winner,
                    },
                    scores.draw_votes,
                ));
                out.push((
                    name.clone(),
                    rec_kind.into(),
                    EvalRecord {
                        sample_id: sample.sample_id,
                        true_label: sample.label,
                        target_label: target,
                        scores: scores.rec,
                        winner_override: None,
                    },
                    Vec::new(),
                ));
            }
        }
        Ok(out)
    });

    let mut by_cell: BTreeMap<(String, String), Vec<EvalRecord>> = BTreeMap::new();
    let mut votes: Vec<VoteRow> = Vec::new();
    for sample_cells in per_sample {
        for (method, input_kind, record, draw_votes) in sample_cells? {
            for (draw_index, (vote, top_score)) in draw_votes.into_iter().enumerate() {
                votes.push(VoteRow {
                    method: method.clone(),
                    input_kind: input_kind.clone(),
                    sample_id: record.sample_id,
                    draw_index,
                    vote,
                    top_score,
                });
            }
            by_cell.entry((method, input_kind)).or_default().push(record);
        }
    }
    votes.sort_by(|a, b| {
        (&a.method, &a.input_kind, a.sample_id, a.draw_index)
            .cmp(&(&b.method, &b.input_kind, b.sample_id, b.draw_index))
    });

    let mut output = GridOutput {
        votes,
        ..GridOutput::default()
    };
    for ((method, input_kind), mut records) in by_cell {
        records.sort_by_key(|r| r.sample_id);
        for kind in LABEL_KINDS {
            let summary = summarize(&records, kind)
                .map_err(|e| anyhow!("summarizing {method}/{input_kind}: {e}"))?;
            output
                .cells
                .insert((method.clone(), input_kind.clone(), kind.name().into()), summary);
        }
        for r in &records {
            output.records.push(record_row(&method, &input_kind, r));
        }
    }
    output
        .records
        .sort_by(|a, b| (&a.method, &a.input_kind, a.sample_id).cmp(&(&b.method, &b.input_kind, b.sample_id)));
    Ok(output)
}

/// Table-style grid over the configured method roster.
pub fn run_grid(wb: &Workbench) -> Result<GridOutput> {
    run_method_grid(wb, &wb.cfg.grid.methods.clone())
}

/// Pixel-transform baseline comparison (same protocol, different roster).
pub fn run_baselines(wb: &Workbench) -> Result<GridOutput> {
    run_method_grid(wb, &wb.cfg.baselines.methods.clone())
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub sanitizer: String,
    pub num_draws: usize,
    pub input_kind: String,
    /// Original-label consensus metrics.
    pub summary: MetricSummary,
    /// Consensus target-label Top-1 (attack success under the defense).
    pub target_top1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
}

/// Mode winner over the first `n` draws, with the same tie rule as
/// consensus aggregation (highest prefix mean cosine, then lowest index).
fn prefix_winner(decision: &ConsensusDecision, n: usize, bank: &LabelBank) -> (usize, ScoreVector) {
    let c = bank.num_classes();
    let mut counts = vec![0usize; c];
    let mut mean = vec![0.0f64; c];
    for draw in &decision.draws[..n] {
        counts[draw.vote] += 1;
        let scores = score_embedding(&draw.embedding, bank).expect("draw embedding scored before");
        for (m, s) in mean.iter_mut().zip(&scores.scores) {
            *m += s / n as f64;
        }
    }
    let max = *counts.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..c).filter(|&y| counts[y] == max).collect();
    let mut winner = tied[0];
    for &y in &tied[1..] {
        if mean[y] > mean[winner] {
            winner = y;
        }
    }
    (winner, ScoreVector { scores: mean })
}

/// Consensus metrics as a function of the number of draws.
pub fn run_sweep(wb: &Workbench) -> Result<SweepOutput> {
    let n_values = &wb.cfg.sweep.num_draws_values;
    let n_max = *n_values.iter().max().expect("validated non-empty");
    let sanitizers: Vec<(String, Reconstructor)> = wb
        .cfg
        .sweep
        .sanitizers
        .iter()
        .map(|name| {
            let r = match name.as_str() {
                "vae" => wb.vae(),
                "dm" => wb.dm(true),
                other => bail!("sweep sanitizer \"{other}\""),
            };
            Ok((name.clone(), r))
        })
        .collect::<Result<_>>()?;

    let indices: Vec<usize> = (0..wb.dataset.eval.len()).collect();
    type PerSample = Vec<(usize, bool, ConsensusDecision)>; // sanitizer idx, perturbed, decision
    let decisions: Vec<Result<PerSample>> = exec::batch_map(&indices, |&i| {
        let sample = &wb.dataset.eval[i];
        let mut out = Vec::with_capacity(sanitizers.len() * 2);
        for (s_idx, (name, recon)) in sanitizers.iter().enumerate() {
            for (input, is_prt) in [(&sample.pixels, false), (wb.attacked_pixels(i), true)] {
                let cc = ConsensusConfig {
                    num_samples: n_max,
                    seed: consensus_seed(
                        wb.cfg.master_seed,
                        sample.sample_id,
                        ctx::SWEEP_BASE + ((s_idx as u64) << 1 | is_prt as u64),
                    ),
                };
                let d = consensus_classify(input, &cc, recon, &wb.encoder, &wb.dataset.bank)
                    .with_context(|| format!("sweep {name}, sample {}", sample.sample_id))?;
                out.push((s_idx, is_prt, d));
            }
        }
        Ok(out)
    });
    let decisions: Vec<PerSample> = decisions.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (s_idx, (name, _)) in sanitizers.iter().enumerate() {
        for &n in n_values {
            for is_prt in [false, true] {
                let mut records = Vec::with_capacity(indices.len());
                for (i, per_sample) in decisions.iter().enumerate() {
                    let sample = &wb.dataset.eval[i];
                    let decision = &per_sample
                        .iter()
                        .find(|(s, p, _)| *s == s_idx && *p == is_prt)
                        .expect("every combination computed")
                        .2;
                    let (winner, mean_scores) = prefix_winner(decision, n, &wb.dataset.bank);
                    records.push(EvalRecord {
                        sample_id: sample.sample_id,
                        true_label: sample.label,
                        target_label: wb.targets[i],
                        scores: mean_scores,
                        winner_override: Some(winner),
                    });
                }
                records.sort_by_key(|r| r.sample_id);
                let summary = summarize(&records, LabelKind::Original)
                    .map_err(|e| anyhow!("sweep summary: {e}"))?;
                let target = summarize(&records, LabelKind::Target)
                    .map_err(|e| anyhow!("sweep summary: {e}"))?;
                rows.push(SweepRow {
                    sanitizer: name.clone(),
                    num_draws: n,
                    input_kind: if is_prt { "prt_img".into() } else { "org_img".into() },
                    summary,
                    target_top1: target.top1,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.sanitizer, a.num_draws, &a.input_kind).cmp(&(&b.sanitizer, b.num_draws, &b.input_kind))
    });
    Ok(SweepOutput { rows })
}

#[derive(Debug, Clone, Default)]
pub struct CostOutput {
    /// Undefended records first (by sample id), then defended.
    pub records: Vec<AttackCostRecord>,
}

impl CostOutput {
    pub fn arm(&self, defended: bool) -> Vec<&AttackCostRecord> {
        self.records.iter().filter(|r| r.defended == defended).collect()
    }
}

/// Attack-cost protocol: the shared pixel-space arm plus the adaptive
/// arm through the calibrated vae sanitizer.
pub fn run_attack_cost(wb: &Workbench) -> Result<CostOutput> {
    let budget = wb.cfg.attack.loop_budget;
    let mut records: Vec<AttackCostRecord> = wb
        .attacked
        .iter()
        .map(|run| run.cost_record(budget))
        .collect();

    let vae = wb.vae();
    let defended = run_attack_batch(
        &wb.dataset.eval,
        &wb.targets,
        &wb.encoder,
        &wb.dataset.bank,
        Some(&vae),
        &wb.cfg.attack_config(),
    )
    .map_err(|e| anyhow!("defended attack arm: {e}"))?;
    records.extend(defended.iter().map(|run| run.cost_record(budget)));
    records.sort_by_key(|r| (r.defended, r.sample_id));
    Ok(CostOutput { records })
}

#[derive(Debug, Clone)]
pub struct TransferRow {
    pub direction: String,
    pub arm: String,
    pub label_kind: String,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, Default)]
pub struct TransferOutput {
    pub rows: Vec<TransferRow>,
}

/// Craft attacks on one encoder, evaluate them (raw and under the
/// consensus defense) on the other, both directions.
pub fn run_transfer(wb: &Workbench) -> Result<TransferOutput> {
    let pairs = [
        (&wb.encoder, &wb.alt_encoder),
        (&wb.alt_encoder, &wb.encoder),
    ];
    let vae = wb.vae();
    let mut rows = Vec::new();

    for (dir_idx, (source, victim)) in pairs.iter().enumerate() {
        let direction = format!("{}_to_{}", source.kind_name(), victim.kind_name());
        let mut atk = wb.cfg.attack_config();
        atk.seed = derive_seed(wb.cfg.master_seed, stream::ATTACK, 0x7A, dir_idx as u64);
        let runs = run_attack_batch(
            &wb.dataset.eval,
            &wb.targets,
            source,
            &wb.dataset.bank,
            None,
            &atk,
        )
        .map_err(|e| anyhow!("transfer attack ({direction}): {e}"))?;

        let mut undefended = Vec::with_capacity(runs.len());
        let mut defended = Vec::with_capacity(runs.len());
        for (i, run) in runs.iter().enumerate() {
            let sample = &wb.dataset.eval[i];
            let scores = classify(victim, &wb.dataset.bank, &run.result.perturbed)
                .map_err(|e| anyhow!("transfer eval, sample {}: {e}", sample.sample_id))?;
            undefended.push(EvalRecord {
                sample_id: sample.sample_id,
                true_label: sample.label,
                target_label: run.target_label,
                scores,
                winner_override: None,
            });
            let cc = ConsensusConfig {
                num_samples: wb.cfg.consensus.num_draws,
                seed: consensus_seed(
                    wb.cfg.master_seed,
                    sample.sample_id,
                    ctx::TRANSFER_BASE + dir_idx as u64,
                ),
            };
            let d = consensus_classify(&run.result.perturbed, &cc, &vae, victim, &wb.dataset.bank)
                .map_err(|e| anyhow!("transfer consensus, sample {}: {e}", sample.sample_id))?;
            defended.push(EvalRecord {
                sample_id: sample.sample_id,
                true_label: sample.label,
                target_label: run.target_label,
                scores: d.mean_scores,
                winner_override: Some(d.winner),
            });
        }
        for (arm, records) in [("undefended", &undefended), ("defended", &defended)] {
            for kind in LABEL_KINDS {
                let summary =
                    summarize(records, kind).map_err(|e| anyhow!("transfer summary: {e}"))?;
                rows.push(TransferRow {
                    direction: direction.clone(),
                    arm: arm.into(),
                    label_kind: kind.name().into(),
                    summary,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.direction, &a.arm, &a.label_kind).cmp(&(&b.direction, &b.arm, &b.label_kind))
    });
    Ok(TransferOutput { rows })
}
