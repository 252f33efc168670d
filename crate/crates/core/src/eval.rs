//! Evaluation: per-opinion-source accuracy, uncertainty-based OOD
//! separation (AUROC), feature dumps and the metrics CSV schema.

use std::io::Write;

use thiserror::Error;

use crate::data::DataSplit;
use crate::data::eval_batches;
use crate::evidential::{ds_fuse, predict, to_evidence, to_opinion, EvidentialError, Opinion};
use crate::losses::LossBreakdown;
use crate::model::{Head, Model, ModelError};
use crate::ndtensor::{Graph, Mode, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// How a strategy variant turns head outputs into a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionRule {
    /// Argmax of the global head (single-softmax baselines).
    GlobalSoftmax,
    /// Argmax of directly summed head logits.
    SummedLogits,
    /// Argmax of the Dempster-Shafer fused opinion.
    FusedOpinion,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub acc_fused: f64,
    pub acc_global: f64,
    pub acc_local: f64,
    pub mean_uncertainty: f64,
    pub per_sample_u: Vec<f64>,
}

/// Evaluate a model on a split: accuracy under the variant's decision rule
/// (reported as `acc_fused`), per-head opinion accuracies, and fused
/// uncertainties.
pub fn evaluate(
    model: &mut Model<f32>,
    split: DataSplit<'_>,
    rule: DecisionRule,
    batch_size: usize,
) -> Result<EvalResult, EvalError> {
    if split.is_empty() {
        return Err(EvalError::Empty("evaluation split"));
    }
    let mut hits_fused = 0usize;
    let mut hits_global = 0usize;
    let mut hits_local = 0usize;
    let mut per_sample_u = Vec::with_capacity(split.len());
    for (x, labels) in eval_batches(split, batch_size) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let xv = g.constant(x);
        let (_, raw_g, raw_l) = model.forward(&mut g, &bound, xv, Mode::Eval)?;
        let rg: Tensor<f64> = g.value(raw_g).cast();
        let rl: Tensor<f64> = g.value(raw_l).cast();

        let (_, op_g) = to_opinion(&to_evidence(&rg));
        let (_, op_l) = to_opinion(&to_evidence(&rl));
        let (fused, _) = ds_fuse(&op_g, &op_l)?;

        let pg = predict(&op_g);
        let pl = predict(&op_l);
        let pf = predict(&fused);
        for (i, &label) in labels.iter().enumerate() {
            let y = label as usize;
            if pg[i].class == y {
                hits_global += 1;
            }
            if pl[i].class == y {
                hits_local += 1;
            }
            let decided = match rule {
                DecisionRule::FusedOpinion => pf[i].class,
                DecisionRule::GlobalSoftmax => pg[i].class,
                DecisionRule::SummedLogits => {
                    let k = rg.shape[1];
                    let mut best = 0usize;
                    for j in 1..k {
                        if rg.data[i * k + j] + rl.data[i * k + j]
                            > rg.data[i * k + best] + rl.data[i * k + best]
                        {
                            best = j;
                        }
                    }
                    best
                }
            };
            if decided == y {
                hits_fused += 1;
            }
            per_sample_u.push(fused.uncertainty[i]);
        }
    }
    let n = split.len() as f64;
    let mean_uncertainty = per_sample_u.iter().sum::<f64>() / n;
    Ok(EvalResult {
        acc_fused: hits_fused as f64 / n,
        acc_global: hits_global as f64 / n,
        acc_local: hits_local as f64 / n,
        mean_uncertainty,
        per_sample_u,
    })
}

/// Fused per-sample uncertainties for a batch tensor (used by the OOD
/// pipeline on corrupted inputs).
pub fn fused_uncertainties(
    model: &mut Model<f32>,
    inputs: &Tensor<f32>,
    batch_size: usize,
) -> Result<Vec<f64>, EvalError> {
    let n = inputs.shape[0];
    if n == 0 {
        return Err(EvalError::Empty("input batch"));
    }
    let dim: usize = inputs.shape[1..].iter().product();
    let mut out = Vec::with_capacity(n);
    let mut start = 0usize;
    while start < n {
        let take = batch_size.min(n - start);
        let mut shape = vec![take];
        shape.extend_from_slice(&inputs.shape[1..]);
        let x = Tensor {
            shape,
            data: inputs.data[start * dim..(start + take) * dim].to_vec(),
        };
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let xv = g.constant(x);
        let (_, raw_g, raw_l) = model.forward(&mut g, &bound, xv, Mode::Eval)?;
        let rg: Tensor<f64> = g.value(raw_g).cast();
        let rl: Tensor<f64> = g.value(raw_l).cast();
        let (_, og) = to_opinion(&to_evidence(&rg));
        let (_, ol) = to_opinion(&to_evidence(&rl));
        let (fused, _) = ds_fuse(&og, &ol)?;
        out.extend(fused.uncertainty.iter().copied());
        start += take;
    }
    Ok(out)
}

/// Rank-based AUROC of uncertainty as an OOD score: the probability that a
/// corrupted sample's uncertainty exceeds a clean one's, ties counted half.
pub fn ood_separation(clean_u: &[f64], noisy_u: &[f64]) -> Result<f64, EvalError> {
    if clean_u.is_empty() {
        return Err(EvalError::Empty("clean uncertainty list"));
    }
    if noisy_u.is_empty() {
        return Err(EvalError::Empty("noisy uncertainty list"));
    }
    // average ranks over the pooled sample
    let mut pooled: Vec<(f64, bool)> = clean_u
        .iter()
        .map(|&u| (u, false))
        .chain(noisy_u.iter().map(|&u| (u, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("NaN uncertainty"));
    let mut rank_sum_noisy = 0.0f64;
    let mut i = 0usize;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks are 1-based; ties share the average rank of their block
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &pooled[i..=j] {
            if item.1 {
                rank_sum_noisy += avg_rank;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (noisy_u.len() as f64, clean_u.len() as f64);
    Ok((rank_sum_noisy - np * (np + 1.0) / 2.0) / (np * nn))
}

/// CSV dump of encoder features and raw head outputs per sample:
/// `client,label,enc_0..,g_0..,l_0..`.
pub fn dump_embeddings(
    model: &mut Model<f32>,
    split: DataSplit<'_>,
    client: usize,
    out: &mut dyn Write,
) -> Result<(), EvalError> {
    if split.is_empty() {
        return Err(EvalError::Empty("embedding split"));
    }
    let feat_dim = model.config.feat_dim()?;
    let k = model.config.num_classes;
    let mut header = String::from("client,label");
    for i in 0..feat_dim {
        header.push_str(&format!(",enc_{i}"));
    }
    for i in 0..k {
        header.push_str(&format!(",g_{i}"));
    }
    for i in 0..k {
        header.push_str(&format!(",l_{i}"));
    }
    writeln!(out, "{header}")?;
    for (x, labels) in eval_batches(split, 64) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let xv = g.constant(x);
        let feats = model.encode(&mut g, &bound, xv, Mode::Eval)?;
        let raw_g = model.head_forward(&mut g, &bound, feats, Head::Global)?;
        let raw_l = model.head_forward(&mut g, &bound, feats, Head::Local)?;
        let fv = g.value(feats).clone();
        let gv = g.value(raw_g).clone();
        let lv = g.value(raw_l).clone();
        for (i, &label) in labels.iter().enumerate() {
            let mut line = format!("{client},{label}");
            for j in 0..feat_dim {
                line.push_str(&format!(",{}", fv.data[i * feat_dim + j]));
            }
            for j in 0..k {
                line.push_str(&format!(",{}", gv.data[i * k + j]));
            }
            for j in 0..k {
                line.push_str(&format!(",{}", lv.data[i * k + j]));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

// ---- metrics CSV schema ----

pub const METRICS_HEADER: &str = "seed,round,client,split,acc_fused,acc_global,acc_local,mean_u,\
l_total,l_un_global,l_un_local,l_un_fused,l_ce_global,l_ce_local,l_dis";

/// Train-split row: loss components only.
pub fn metrics_train_row(seed: u64, round: usize, client: usize, bd: &LossBreakdown) -> String {
    format!(
        "{seed},{round},{client},train,,,,,{},{},{},{},{},{},{}",
        bd.l_total,
        bd.l_un_global,
        bd.l_un_local,
        bd.l_un_fused,
        bd.l_ce_global,
        bd.l_ce_local,
        bd.l_dis
    )
}

/// Test-split row: accuracies and mean uncertainty only.
pub fn metrics_test_row(seed: u64, round: usize, client: usize, ev: &EvalResult) -> String {
    format!(
        "{seed},{round},{client},test,{},{},{},{},,,,,,,",
        ev.acc_fused, ev.acc_global, ev.acc_local, ev.mean_uncertainty
    )
}

/// Per-sample uncertainty CSV for OOD analysis: `client,split,u`.
pub fn write_uncertainty_csv(
    out: &mut dyn Write,
    rows: &[(usize, &str, f64)],
) -> Result<(), EvalError> {
    writeln!(out, "client,split,u")?;
    for (client, split, u) in rows {
        writeln!(out, "{client},{split},{u}")?;
    }
    Ok(())
}

/// Extract an opinion triple directly from raw head outputs (helper for
/// tests and tools).
pub fn opinions_from_raw(raw_g: &Tensor<f64>, raw_l: &Tensor<f64>) -> Result<(Opinion<f64>, Opinion<f64>, Opinion<f64>), EvalError> {
    let (_, og) = to_opinion(&to_evidence(raw_g));
    let (_, ol) = to_opinion(&to_evidence(raw_l));
    let (fused, _) = ds_fuse(&og, &ol)?;
    Ok((og, ol, fused))
}
