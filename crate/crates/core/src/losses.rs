//! Training objectives: per-head cross entropy, the evidential Dirichlet
//! losses with their KL regularizer, the inverse-KL disentangling penalty,
//! and the composite objective with annealed balance factors.

use thiserror::Error;

use crate::evidential::{
    evidence_node, fuse_nodes, fused_dirichlet_node, opinion_nodes, DirichletBatch,
    EvidentialError,
};
use crate::ndtensor::{Graph, Tensor, TensorError, Var};
use crate::scalar::Scalar;
use crate::specfun;

/// Softmax probabilities are clamped at this floor before taking logs.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("labels must be one-hot rows")]
    NotOneHot,
    #[error("Dirichlet parameters must satisfy alpha >= 1, found {0}")]
    AlphaBelowOne(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("fusion failed: {0}")]
    Evidential(String),
}

impl From<EvidentialError> for LossError {
    fn from(e: EvidentialError) -> Self {
        match e {
            EvidentialError::Tensor(t) => LossError::Tensor(t),
            other => LossError::Evidential(other.to_string()),
        }
    }
}

/// Linear ramp from 0 to `target` over `ramp_steps` optimization steps.
/// `ramp_steps == 0` means the target applies from step 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub target: f64,
    pub ramp_steps: u64,
}

impl AnnealSchedule {
    pub fn new(target: f64, ramp_steps: u64) -> Self {
        AnnealSchedule { target, ramp_steps }
    }

    pub fn value(&self, step: u64) -> f64 {
        if self.ramp_steps == 0 {
            return self.target;
        }
        let frac = (step as f64 / self.ramp_steps as f64).min(1.0);
        self.target * frac
    }
}

/// Balance-factor schedules for the composite objective.
#[derive(Debug, Clone, Copy)]
pub struct Schedules {
    pub lambda_u: AnnealSchedule,
    pub lambda_d: AnnealSchedule,
}

/// Schedule evaluation, kept as a named operation for test oracles.
pub fn anneal(schedule: &AnnealSchedule, step: u64) -> f64 {
    schedule.value(step)
}

/// Per-component loss values for one batch. `l_dis` is the raw penalty;
/// `l_total` includes it scaled by lambda_d, so
/// `l_total = l_un_global + l_un_local + l_un_fused + l_ce_global
///  + l_ce_local + lambda_d * l_dis`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_un_global: f64,
    pub l_un_local: f64,
    pub l_un_fused: f64,
    pub l_ce_global: f64,
    pub l_ce_local: f64,
    pub l_dis: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn add_assign(&mut self, other: &LossBreakdown) {
        self.l_un_global += other.l_un_global;
        self.l_un_local += other.l_un_local;
        self.l_un_fused += other.l_un_fused;
        self.l_ce_global += other.l_ce_global;
        self.l_ce_local += other.l_ce_local;
        self.l_dis += other.l_dis;
        self.l_total += other.l_total;
    }

    pub fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            l_un_global: self.l_un_global * c,
            l_un_local: self.l_un_local * c,
            l_un_fused: self.l_un_fused * c,
            l_ce_global: self.l_ce_global * c,
            l_ce_local: self.l_ce_local * c,
            l_dis: self.l_dis * c,
            l_total: self.l_total * c,
        }
    }
}

/// Which training objective a strategy variant optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Plain cross entropy on the global head (FedAvg/FedBN/SingleSet
    /// baselines and the ablation backbone).
    SingleHeadCe,
    /// Cross entropy on directly summed head logits, optionally with the
    /// disentangling penalty.
    SummedLogitsCe { dis: bool },
    /// Evidential losses on both heads and the fused opinion, optionally
    /// with per-head cross entropy and the disentangling penalty.
    Evidential { ce: bool, dis: bool },
}

fn check_one_hot<T: Scalar>(y: &Tensor<T>) -> Result<(), LossError> {
    if y.rank() != 2 {
        return Err(LossError::NotOneHot);
    }
    let k = y.shape[1];
    for row in y.data.chunks(k) {
        let mut ones = 0;
        for v in row {
            if *v == T::one() {
                ones += 1;
            } else if *v != T::zero() {
                return Err(LossError::NotOneHot);
            }
        }
        if ones != 1 {
            return Err(LossError::NotOneHot);
        }
    }
    Ok(())
}

fn check_alpha<T: Scalar>(alpha: &Tensor<T>) -> Result<(), LossError> {
    for v in &alpha.data {
        if v.as_f64() < 1.0 {
            return Err(LossError::AlphaBelowOne(v.as_f64()));
        }
    }
    Ok(())
}

// ---- graph builders ----

/// Batch-mean cross entropy of a probability node against one-hot labels.
pub fn cross_entropy_node<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    y: Var,
) -> Result<Var, TensorError> {
    let lp = g.log_clamped(probs, LOG_EPS);
    let picked = g.mul(y, lp)?;
    let per = g.row_sum(picked)?;
    let m = g.mean(per);
    Ok(g.scale(m, -1.0))
}

/// Re-parameterized evidential cross entropy:
/// batch mean of sum_k y_k (psi(S) - psi(alpha_k)).
pub fn dce_node<T: Scalar>(g: &mut Graph<T>, alpha: Var, y: Var) -> Result<Var, TensorError> {
    let s = g.row_sum(alpha)?;
    let dig_s = g.digamma(s)?;
    let dig_a = g.digamma(alpha)?;
    let diff = g.sub(dig_s, dig_a)?;
    let picked = g.mul(y, diff)?;
    let per = g.row_sum(picked)?;
    Ok(g.mean(per))
}

/// KL(Dir(alpha_tilde) || Dir(1)) with alpha_tilde = y + (1 - y) * alpha,
/// so evidence on the true class is never penalized.
pub fn kl_regularizer_node<T: Scalar>(
    g: &mut Graph<T>,
    alpha: Var,
    y: Var,
) -> Result<Var, TensorError> {
    let k = g.shape(alpha)[1];
    let neg_y = g.scale(y, -1.0);
    let one_minus_y = g.add_const(neg_y, 1.0);
    let masked = g.mul(alpha, one_minus_y)?;
    let alpha_tilde = g.add(masked, y)?;

    let s = g.row_sum(alpha_tilde)?;
    let t1 = g.lgamma(s)?;
    let lg = g.lgamma(alpha_tilde)?;
    let t2 = g.row_sum(lg)?;
    let dig_a = g.digamma(alpha_tilde)?;
    let dig_s = g.digamma(s)?;
    let diff = g.sub(dig_a, dig_s)?;
    let am1 = g.add_const(alpha_tilde, -1.0);
    let prod = g.mul(am1, diff)?;
    let t3 = g.row_sum(prod)?;

    let p1 = g.sub(t1, t2)?;
    let p2 = g.add(p1, t3)?;
    let per = g.add_const(p2, -specfun::lgamma(k as f64));
    Ok(g.mean(per))
}

/// L_Un = L_Dce + lambda_u * L_KL.
pub fn uncertainty_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    alpha: Var,
    y: Var,
    lambda_u: f64,
) -> Result<Var, TensorError> {
    let dce = dce_node(g, alpha, y)?;
    let kl = kl_regularizer_node(g, alpha, y)?;
    let kl_scaled = g.scale(kl, lambda_u);
    g.add(dce, kl_scaled)
}

/// Inverse-KL penalty exp(-D_KL(P || Q)) with P = softmax(local head raw),
/// Q = softmax(global head raw), KL per sample, batch mean. Minimizing it
/// pushes the two per-sample distributions apart.
pub fn disentangle_node<T: Scalar>(
    g: &mut Graph<T>,
    raw_global: Var,
    raw_local: Var,
) -> Result<Var, TensorError> {
    let p = g.softmax(raw_local)?;
    let q = g.softmax(raw_global)?;
    let lp = g.log_clamped(p, LOG_EPS);
    let lq = g.log_clamped(q, LOG_EPS);
    let diff = g.sub(lp, lq)?;
    let prod = g.mul(p, diff)?;
    let d = g.row_sum(prod)?;
    let neg_d = g.scale(d, -1.0);
    let e = g.exp(neg_d);
    Ok(g.mean(e))
}

/// Assemble a strategy variant's objective on the tape. Returns the total
/// loss node and the component values of this batch.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    raw_global: Var,
    raw_local: Var,
    y: &Tensor<T>,
    lambda_u: f64,
    lambda_d: f64,
    kind: ObjectiveKind,
    un_branch_weights: [f64; 3],
) -> Result<(Var, LossBreakdown), LossError> {
    check_one_hot(y)?;
    let yv = g.constant(y.clone());
    let mut bd = LossBreakdown::default();

    let total = match kind {
        ObjectiveKind::SingleHeadCe => {
            let probs = g.softmax(raw_global)?;
            let ce = cross_entropy_node(g, probs, yv)?;
            bd.l_ce_global = g.scalar_value(ce).as_f64();
            ce
        }
        ObjectiveKind::SummedLogitsCe { dis } => {
            let summed = g.add(raw_global, raw_local)?;
            let probs = g.softmax(summed)?;
            let ce = cross_entropy_node(g, probs, yv)?;
            bd.l_ce_global = g.scalar_value(ce).as_f64();
            if dis {
                let d = disentangle_node(g, raw_global, raw_local)?;
                bd.l_dis = g.scalar_value(d).as_f64();
                let d_scaled = g.scale(d, lambda_d);
                g.add(ce, d_scaled)?
            } else {
                ce
            }
        }
        ObjectiveKind::Evidential { ce, dis } => {
            let eg = evidence_node(g, raw_global);
            let el = evidence_node(g, raw_local);
            let (alpha_g, _, og) = opinion_nodes(g, eg)?;
            let (alpha_l, _, ol) = opinion_nodes(g, el)?;
            let (fused, _) = fuse_nodes(g, og, ol)?;
            let alpha_f = fused_dirichlet_node(g, fused)?;

            let un_g = uncertainty_loss_node(g, alpha_g, yv, lambda_u)?;
            let un_l = uncertainty_loss_node(g, alpha_l, yv, lambda_u)?;
            let un_f = uncertainty_loss_node(g, alpha_f, yv, lambda_u)?;
            let un_g = g.scale(un_g, un_branch_weights[0]);
            let un_l = g.scale(un_l, un_branch_weights[1]);
            let un_f = g.scale(un_f, un_branch_weights[2]);
            bd.l_un_global = g.scalar_value(un_g).as_f64();
            bd.l_un_local = g.scalar_value(un_l).as_f64();
            bd.l_un_fused = g.scalar_value(un_f).as_f64();

            let mut total = g.add(un_g, un_l)?;
            total = g.add(total, un_f)?;

            if ce {
                let pg = g.softmax(raw_global)?;
                let pl = g.softmax(raw_local)?;
                let ce_g = cross_entropy_node(g, pg, yv)?;
                let ce_l = cross_entropy_node(g, pl, yv)?;
                bd.l_ce_global = g.scalar_value(ce_g).as_f64();
                bd.l_ce_local = g.scalar_value(ce_l).as_f64();
                total = g.add(total, ce_g)?;
                total = g.add(total, ce_l)?;
            }
            if dis {
                let d = disentangle_node(g, raw_global, raw_local)?;
                bd.l_dis = g.scalar_value(d).as_f64();
                let d_scaled = g.scale(d, lambda_d);
                total = g.add(total, d_scaled)?;
            }
            total
        }
    };
    bd.l_total = g.scalar_value(total).as_f64();
    Ok((total, bd))
}

// ---- plain batch functions ----

/// Batch-mean cross entropy on probabilities.
pub fn cross_entropy<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>) -> Result<T, LossError> {
    check_one_hot(y)?;
    if p.shape != y.shape {
        return Err(LossError::Tensor(TensorError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            p.shape, y.shape
        ))));
    }
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let yv = g.constant(y.clone());
    let node = cross_entropy_node(&mut g, pv, yv)?;
    Ok(g.scalar_value(node))
}

/// Batch-mean evidential cross entropy for a Dirichlet batch.
pub fn dce_loss<T: Scalar>(alpha: &DirichletBatch<T>, y: &Tensor<T>) -> Result<T, LossError> {
    check_one_hot(y)?;
    check_alpha(&alpha.alpha)?;
    let mut g = Graph::new();
    let av = g.constant(alpha.alpha.clone());
    let yv = g.constant(y.clone());
    let node = dce_node(&mut g, av, yv)?;
    Ok(g.scalar_value(node))
}

/// Batch-mean KL(Dir(alpha_tilde) || Dir(1)).
pub fn kl_regularizer<T: Scalar>(
    alpha: &DirichletBatch<T>,
    y: &Tensor<T>,
) -> Result<T, LossError> {
    check_one_hot(y)?;
    check_alpha(&alpha.alpha)?;
    let mut g = Graph::new();
    let av = g.constant(alpha.alpha.clone());
    let yv = g.constant(y.clone());
    let node = kl_regularizer_node(&mut g, av, yv)?;
    Ok(g.scalar_value(node))
}

/// L_Un = L_Dce + lambda_u * L_KL.
pub fn uncertainty_loss<T: Scalar>(
    alpha: &DirichletBatch<T>,
    y: &Tensor<T>,
    lambda_u: f64,
) -> Result<T, LossError> {
    let dce = dce_loss(alpha, y)?.as_f64();
    let kl = kl_regularizer(alpha, y)?.as_f64();
    Ok(T::from_f64(dce + lambda_u * kl))
}

/// exp(-KL) disentangling penalty on raw head outputs.
pub fn disentangle_loss<T: Scalar>(
    f_global: &Tensor<T>,
    f_local: &Tensor<T>,
) -> Result<T, LossError> {
    if f_global.shape != f_local.shape {
        return Err(LossError::Tensor(TensorError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            f_global.shape, f_local.shape
        ))));
    }
    let mut g = Graph::new();
    let gv = g.constant(f_global.clone());
    let lv = g.constant(f_local.clone());
    let node = disentangle_node(&mut g, gv, lv)?;
    Ok(g.scalar_value(node))
}

/// Full composite objective at a given optimization step, evaluated without
/// retaining the tape.
pub fn total_loss<T: Scalar>(
    raw_global: &Tensor<T>,
    raw_local: &Tensor<T>,
    y: &Tensor<T>,
    step: u64,
    schedules: &Schedules,
) -> Result<LossBreakdown, LossError> {
    let mut g = Graph::new();
    let gv = g.constant(raw_global.clone());
    let lv = g.constant(raw_local.clone());
    let (_, bd) = objective(
        &mut g,
        gv,
        lv,
        y,
        schedules.lambda_u.value(step),
        schedules.lambda_d.value(step),
        ObjectiveKind::Evidential { ce: true, dis: true },
        [1.0, 1.0, 1.0],
    )?;
    Ok(bd)
}
