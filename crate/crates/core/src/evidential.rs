//! Subjective-logic machinery: per-class evidence, Dirichlet opinions and
//! the two-source Dempster-Shafer decision fusion.
//!
//! Every operation exists in two forms: plain batch functions used at
//! evaluation time, and graph builders recording the same arithmetic on a
//! [`Graph`] tape so the fusion is differentiable inside the losses.

use thiserror::Error;

use crate::ndtensor::{Graph, Tensor, TensorError, Var};
use crate::scalar::Scalar;
use crate::specfun;

#[derive(Debug, Error, PartialEq)]
pub enum EvidentialError {
    #[error("opinions disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error("degenerate total conflict: 1 - C = {renorm} at sample {sample}")]
    TotalConflict { sample: usize, renorm: f64 },
    #[error("uncertainty must be positive, found {0}")]
    NonPositiveUncertainty(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Non-negative per-class evidence, [B, K].
#[derive(Debug, Clone)]
pub struct EvidenceBatch<T: Scalar> {
    pub e: Tensor<T>,
}

/// Dirichlet concentration parameters alpha = evidence + 1 and their
/// per-sample sum (the Dirichlet strength S).
#[derive(Debug, Clone)]
pub struct DirichletBatch<T: Scalar> {
    pub alpha: Tensor<T>,
    pub strength: Vec<T>,
}

/// Per-sample belief masses plus uncertainty mass, u + sum_k b_k = 1.
#[derive(Debug, Clone)]
pub struct Opinion<T: Scalar> {
    pub belief: Tensor<T>,
    pub uncertainty: Vec<T>,
}

impl<T: Scalar> Opinion<T> {
    pub fn batch_size(&self) -> usize {
        self.belief.shape[0]
    }

    pub fn num_classes(&self) -> usize {
        self.belief.shape[1]
    }

    /// The vacuous opinion: zero belief, full uncertainty.
    pub fn vacuous(batch: usize, k: usize) -> Self {
        Opinion {
            belief: Tensor::zeros(&[batch, k]),
            uncertainty: vec![T::one(); batch],
        }
    }
}

/// Conflict mass C and renormalizer 1 - C per sample.
#[derive(Debug, Clone)]
pub struct FusionDiagnostics<T: Scalar> {
    pub conflict: Vec<T>,
    pub renormalizer: Vec<T>,
}

/// Per-sample prediction extracted from an opinion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T: Scalar> {
    pub class: usize,
    pub confidence: T,
    pub uncertainty: T,
}

/// Softplus evidence from raw head outputs.
pub fn to_evidence<T: Scalar>(raw: &Tensor<T>) -> EvidenceBatch<T> {
    EvidenceBatch {
        e: raw.map(|v| T::from_f64(specfun::softplus(v.as_f64()))),
    }
}

/// Dirichlet parameterization and opinion masses:
/// alpha = e + 1, S = sum(alpha), b_k = e_k / S, u = K / S.
pub fn to_opinion<T: Scalar>(ev: &EvidenceBatch<T>) -> (DirichletBatch<T>, Opinion<T>) {
    let (b, k) = (ev.e.shape[0], ev.e.shape[1]);
    let alpha = ev.e.map(|v| v + T::one());
    let mut strength = Vec::with_capacity(b);
    let mut belief = Tensor::zeros(&[b, k]);
    let mut uncertainty = Vec::with_capacity(b);
    for r in 0..b {
        let s: f64 = alpha.data[r * k..(r + 1) * k]
            .iter()
            .map(|v| v.as_f64())
            .sum();
        strength.push(T::from_f64(s));
        for j in 0..k {
            belief.data[r * k + j] = T::from_f64(ev.e.data[r * k + j].as_f64() / s);
        }
        uncertainty.push(T::from_f64(k as f64 / s));
    }
    (
        DirichletBatch { alpha, strength },
        Opinion {
            belief,
            uncertainty,
        },
    )
}

/// Dempster-Shafer combination of the global and local opinions:
/// C = sum_{i != j} bG_i bL_j,
/// b_k = (bG_k bL_k + bG_k uL + bL_k uG) / (1 - C),
/// u = uG uL / (1 - C).
pub fn ds_fuse<T: Scalar>(
    g: &Opinion<T>,
    l: &Opinion<T>,
) -> Result<(Opinion<T>, FusionDiagnostics<T>), EvidentialError> {
    if g.belief.shape != l.belief.shape {
        return Err(EvidentialError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            g.belief.shape, l.belief.shape
        )));
    }
    let (b, k) = (g.batch_size(), g.num_classes());
    let mut belief = Tensor::zeros(&[b, k]);
    let mut uncertainty = Vec::with_capacity(b);
    let mut conflict = Vec::with_capacity(b);
    let mut renorm = Vec::with_capacity(b);
    for r in 0..b {
        let bg = &g.belief.data[r * k..(r + 1) * k];
        let bl = &l.belief.data[r * k..(r + 1) * k];
        let (ug, ul) = (g.uncertainty[r].as_f64(), l.uncertainty[r].as_f64());
        let sum_g: f64 = bg.iter().map(|v| v.as_f64()).sum();
        let sum_l: f64 = bl.iter().map(|v| v.as_f64()).sum();
        let dot: f64 = bg
            .iter()
            .zip(bl.iter())
            .map(|(x, y)| x.as_f64() * y.as_f64())
            .sum();
        let c = sum_g * sum_l - dot;
        let rn = 1.0 - c;
        if rn < 1e-12 {
            return Err(EvidentialError::TotalConflict {
                sample: r,
                renorm: rn,
            });
        }
        for j in 0..k {
            let (bgj, blj) = (bg[j].as_f64(), bl[j].as_f64());
            belief.data[r * k + j] = T::from_f64((bgj * blj + bgj * ul + blj * ug) / rn);
        }
        uncertainty.push(T::from_f64(ug * ul / rn));
        conflict.push(T::from_f64(c));
        renorm.push(T::from_f64(rn));
    }
    Ok((
        Opinion {
            belief,
            uncertainty,
        },
        FusionDiagnostics {
            conflict,
            renormalizer: renorm,
        },
    ))
}

/// Recover the Dirichlet parameters behind an opinion: S = K / u,
/// e_k = b_k S, alpha = e + 1. Inverse of [`to_opinion`].
pub fn opinion_to_dirichlet<T: Scalar>(
    o: &Opinion<T>,
) -> Result<DirichletBatch<T>, EvidentialError> {
    let (b, k) = (o.batch_size(), o.num_classes());
    let mut alpha = Tensor::zeros(&[b, k]);
    let mut strength = Vec::with_capacity(b);
    for r in 0..b {
        let u = o.uncertainty[r].as_f64();
        if u <= 0.0 {
            return Err(EvidentialError::NonPositiveUncertainty(u));
        }
        let s = k as f64 / u;
        strength.push(T::from_f64(s));
        for j in 0..k {
            alpha.data[r * k + j] = T::from_f64(o.belief.data[r * k + j].as_f64() * s + 1.0);
        }
    }
    Ok(DirichletBatch { alpha, strength })
}

/// Argmax over belief masses; ties break toward the lowest class index.
pub fn predict<T: Scalar>(o: &Opinion<T>) -> Vec<Prediction<T>> {
    let (b, k) = (o.batch_size(), o.num_classes());
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let row = &o.belief.data[r * k..(r + 1) * k];
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = j;
            }
        }
        out.push(Prediction {
            class: best,
            confidence: row[best],
            uncertainty: o.uncertainty[r],
        });
    }
    out
}

// ---- graph builders (differentiable path) ----

/// Opinion nodes on the tape: belief [B, K] and uncertainty [B, 1].
#[derive(Debug, Clone, Copy)]
pub struct OpinionVars {
    pub belief: Var,
    pub uncertainty: Var,
}

/// Softplus evidence node from raw head outputs.
pub fn evidence_node<T: Scalar>(g: &mut Graph<T>, raw: Var) -> Var {
    g.softplus(raw)
}

/// alpha, strength and opinion nodes from an evidence node.
pub fn opinion_nodes<T: Scalar>(
    g: &mut Graph<T>,
    evidence: Var,
) -> Result<(Var, Var, OpinionVars), TensorError> {
    let k = g.shape(evidence)[1];
    let alpha = g.add_const(evidence, 1.0);
    let strength = g.row_sum(alpha)?;
    let belief = g.div(evidence, strength)?;
    let k_const = g.constant(Tensor::scalar(T::from_f64(k as f64)));
    let uncertainty = g.div(k_const, strength)?;
    Ok((
        alpha,
        strength,
        OpinionVars {
            belief,
            uncertainty,
        },
    ))
}

/// Differentiable Dempster-Shafer fusion. Returns the fused opinion nodes
/// and the conflict node [B, 1].
pub fn fuse_nodes<T: Scalar>(
    g: &mut Graph<T>,
    og: OpinionVars,
    ol: OpinionVars,
) -> Result<(OpinionVars, Var), EvidentialError> {
    let sum_g = g.row_sum(og.belief)?;
    let sum_l = g.row_sum(ol.belief)?;
    let prod_sums = g.mul(sum_g, sum_l)?;
    let bg_bl = g.mul(og.belief, ol.belief)?;
    let dot = g.row_sum(bg_bl)?;
    let conflict = g.sub(prod_sums, dot)?;
    let neg_c = g.scale(conflict, -1.0);
    let renorm = g.add_const(neg_c, 1.0);
    if let Some(&bad) = g
        .value(renorm)
        .data
        .iter()
        .find(|v| v.as_f64() < 1e-12)
    {
        return Err(EvidentialError::TotalConflict {
            sample: 0,
            renorm: bad.as_f64(),
        });
    }
    let bg_ul = g.mul(og.belief, ol.uncertainty)?;
    let bl_ug = g.mul(ol.belief, og.uncertainty)?;
    let t = g.add(bg_bl, bg_ul)?;
    let numer = g.add(t, bl_ug)?;
    let belief = g.div(numer, renorm)?;
    let uu = g.mul(og.uncertainty, ol.uncertainty)?;
    let uncertainty = g.div(uu, renorm)?;
    Ok((
        OpinionVars {
            belief,
            uncertainty,
        },
        conflict,
    ))
}

/// Dirichlet alpha node recovered from a fused opinion (S = K / u).
pub fn fused_dirichlet_node<T: Scalar>(
    g: &mut Graph<T>,
    o: OpinionVars,
) -> Result<Var, TensorError> {
    let k = g.shape(o.belief)[1];
    let k_const = g.constant(Tensor::scalar(T::from_f64(k as f64)));
    let strength = g.div(k_const, o.uncertainty)?;
    let evidence = g.mul(o.belief, strength)?;
    Ok(g.add_const(evidence, 1.0))
}
