//! Client training objectives.
//!
//! Five composable objectives, all reported as raw (unweighted) terms plus a
//! weighted total:
//!
//! - `CE`: plain cross-entropy.
//! - `FEDNTD`: CE + (beta/b) * KL between temperature-softened student and
//!   global-model ("server") logits with each row's true class removed, so
//!   distillation only transfers not-true-class structure.
//! - `MOON`: CE + (mu/b) * a contrastive term pulling the student's
//!   representation toward the server's and away from the client's own
//!   previous-round representation.
//! - `HYDRA_NTD` / `HYDRA_MOON`: the corresponding objective plus a shallow
//!   copy of its distillation term, weighted by `gamma`, applied at the
//!   auxiliary classifier. The final-layer weight is divided by `b`, the
//!   shallow term is not: attenuate deep distillation, keep alignment early.
//!
//! Gradients flow only through student-side tensors; server logits, server
//! representations, and previous-round representations are constants.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, UpstreamGrads};

/// Which objective a client optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "FEDNTD")]
    FedNtd,
    #[serde(rename = "MOON")]
    Moon,
    #[serde(rename = "HYDRA_NTD")]
    HydraNtd,
    #[serde(rename = "HYDRA_MOON")]
    HydraMoon,
}

impl LossKind {
    pub fn needs_server_logits(self) -> bool {
        matches!(self, LossKind::FedNtd | LossKind::HydraNtd)
    }

    pub fn needs_representations(self) -> bool {
        matches!(self, LossKind::Moon | LossKind::HydraMoon)
    }

    pub fn needs_aux_head(self) -> bool {
        matches!(self, LossKind::HydraNtd | LossKind::HydraMoon)
    }
}

/// Objective hyperparameters. `beta` weights not-true distillation, `mu` the
/// contrastive term, `gamma` the shallow (auxiliary) term; `b` divides the
/// final-layer distillation weight only. Kinds that do not use a coefficient
/// ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default = "default_one")]
    pub mu: f64,
    #[serde(default = "default_one")]
    pub gamma: f64,
    #[serde(default = "default_one")]
    pub b: f64,
}

fn default_tau() -> f64 {
    1.0
}

fn default_one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            tau: 1.0,
            beta: 1.0,
            mu: 1.0,
            gamma: 1.0,
            b: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, v) in [("beta", self.beta), ("mu", self.mu), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.b.is_finite() && self.b >= 1.0) {
            return Err(Error::Config(format!("b must be >= 1, got {}", self.b)));
        }
        Ok(())
    }
}

/// Frozen context a client distills against during one round: the global
/// model's outputs on the current batch, and the representation computed by
/// the client's previous-round local model. A kind reads only the fields it
/// needs; missing required fields are a config error.
#[derive(Debug, Clone, Default)]
pub struct DistillContext {
    pub server_logits: Option<Array2<f64>>,
    pub server_representation: Option<Array2<f64>>,
    pub prev_local_representation: Option<Array2<f64>>,
}

/// Raw term values (unweighted) plus the weighted total actually optimized.
/// `kd_final` is the final-layer distillation term (KL for the NTD family,
/// contrastive for the MOON family); `kd_aux` is the shallow copy. Terms a
/// kind does not have are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub kd_final: f64,
    pub kd_aux: f64,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Input(format!(
            "{} labels for a batch of {rows} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Row-wise log-softmax of `logits / tau`.
fn log_softmax_scaled(logits: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = logits / tau;
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits
/// (`(softmax - onehot) / batch`).
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (rows, classes) = (logits.nrows(), logits.ncols());
    if rows == 0 || classes < 2 {
        return Err(Error::Input("cross_entropy needs a nonempty batch and >= 2 classes".into()));
    }
    check_labels(labels, rows, classes)?;

    let log_probs = log_softmax_scaled(logits, 1.0);
    let batch = rows as f64;
    let mut loss = 0.0;
    let mut grad = log_probs.mapv(f64::exp);
    for (r, &y) in labels.iter().enumerate() {
        loss -= log_probs[[r, y]];
        grad[[r, y]] -= 1.0;
    }
    grad /= batch;
    Ok((loss / batch, grad))
}

/// Mean KL divergence `KL(softened teacher || softened student)` over the
/// batch, with both logit sets divided by `tau` before the softmax. Returns
/// the gradient w.r.t. the *student* logits:
/// `(softmax(student/tau) - softmax(teacher/tau)) / (tau * batch)`.
/// There is deliberately no `tau^2` rescaling of the loss.
pub fn softened_kl(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Input(format!("tau must be > 0, got {tau}")));
    }
    if student_logits.dim() != teacher_logits.dim() {
        return Err(Error::Input(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    if student_logits.nrows() == 0 || student_logits.ncols() < 2 {
        return Err(Error::Input(
            "softened_kl needs a nonempty batch and >= 2 columns".into(),
        ));
    }

    let ls_student = log_softmax_scaled(student_logits, tau);
    let ls_teacher = log_softmax_scaled(teacher_logits, tau);
    let p_teacher = ls_teacher.mapv(f64::exp);

    let batch = student_logits.nrows() as f64;
    let mut loss = 0.0;
    for ((pt, lt), ls) in p_teacher.iter().zip(ls_teacher.iter()).zip(ls_student.iter()) {
        loss += pt * (lt - ls);
    }
    // KL is nonnegative; guard the sum against -1e-17 style rounding.
    let loss = (loss / batch).max(0.0);

    let mut grad = ls_student.mapv(f64::exp);
    grad -= &p_teacher;
    grad /= tau * batch;
    Ok((loss, grad))
}

/// Drop each row's true-class column, preserving the order of the remaining
/// columns. Output shape is `(batch, classes - 1)`.
pub fn not_true_projection(logits: &Array2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    let (rows, classes) = (logits.nrows(), logits.ncols());
    if classes < 2 {
        return Err(Error::Input(
            "not_true_projection needs at least 2 classes".into(),
        ));
    }
    check_labels(labels, rows, classes)?;
    let mut out = Array2::zeros((rows, classes - 1));
    for (r, &y) in labels.iter().enumerate() {
        let mut k = 0;
        for c in 0..classes {
            if c != y {
                out[[r, k]] = logits[[r, c]];
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`not_true_projection`] for gradients: place each reduced row
/// back at its original columns, zero at the true class.
fn scatter_not_true(reduced: &Array2<f64>, labels: &[usize], classes: usize) -> Array2<f64> {
    let rows = reduced.nrows();
    let mut out = Array2::zeros((rows, classes));
    for (r, &y) in labels.iter().enumerate() {
        let mut k = 0;
        for c in 0..classes {
            if c != y {
                out[[r, c]] = reduced[[r, k]];
                k += 1;
            }
        }
    }
    out
}

/// Mean row-wise contrastive term
/// `-log( exp(cos(z, z_g)/tau) / (exp(cos(z, z_g)/tau) + exp(cos(z, z_p)/tau)) )`
/// where `z` is the local representation, `z_g` the positive (server) and
/// `z_p` the negative (previous local). Returns the gradient w.r.t. `z_local`
/// only. Any zero-norm row in any argument is a numeric error: the cosine is
/// undefined there and silently clamping would hide a degenerate model.
pub fn contrastive_loss(
    z_local: &Array2<f64>,
    z_global: &Array2<f64>,
    z_prev: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Input(format!("tau must be > 0, got {tau}")));
    }
    if z_local.dim() != z_global.dim() || z_local.dim() != z_prev.dim() {
        return Err(Error::Input(format!(
            "representation shapes differ: local {:?}, global {:?}, previous {:?}",
            z_local.shape(),
            z_global.shape(),
            z_prev.shape()
        )));
    }
    if z_local.nrows() == 0 {
        return Err(Error::Input("contrastive_loss needs a nonempty batch".into()));
    }

    let batch = z_local.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(z_local.dim());
    for r in 0..z_local.nrows() {
        let l = z_local.row(r);
        let g = z_global.row(r);
        let p = z_prev.row(r);
        let nl = l.dot(&l).sqrt();
        let ng = g.dot(&g).sqrt();
        let np = p.dot(&p).sqrt();
        for (name, n) in [("local", nl), ("global", ng), ("previous", np)] {
            if n == 0.0 {
                return Err(Error::Numeric(format!(
                    "contrastive term undefined: {name} representation row {r} has zero norm"
                )));
            }
        }
        let cos_g = l.dot(&g) / (nl * ng);
        let cos_p = l.dot(&p) / (nl * np);
        let u = (cos_p - cos_g) / tau;
        // softplus(u), stably
        loss += if u > 0.0 {
            u + (-u).exp().ln_1p()
        } else {
            u.exp().ln_1p()
        };
        let sigma = 1.0 / (1.0 + (-u).exp());
        let coeff = sigma / (tau * nl * batch);
        let mut row = grad.row_mut(r);
        for i in 0..l.len() {
            let unit_l = l[i] / nl;
            let d_cos_p = p[i] / np - cos_p * unit_l;
            let d_cos_g = g[i] / ng - cos_g * unit_l;
            row[i] = coeff * (d_cos_p - d_cos_g);
        }
    }
    Ok((loss / batch, grad))
}

/// Evaluate the configured objective on one batch: raw terms plus upstream
/// gradients for [`crate::nn::backward`].
///
/// Terms with a zero coefficient are still computed and reported, but their
/// contribution is skipped entirely (not added as `0 * term`), so a run with
/// a zero coefficient optimizes bit-for-bit the same objective as the reduced
/// kind.
pub fn client_loss(
    trace: &ForwardTrace,
    labels: &[usize],
    spec: &LossSpec,
    ctx: &DistillContext,
) -> Result<(LossTerms, UpstreamGrads)> {
    spec.validate()?;
    let (ce, dce) = cross_entropy(&trace.logits, labels)?;
    let mut terms = LossTerms {
        total: ce,
        ce,
        ..Default::default()
    };
    let mut upstream = UpstreamGrads::from_logits(dce);

    match spec.kind {
        LossKind::Ce => {}
        LossKind::FedNtd | LossKind::HydraNtd => {
            let server = ctx.server_logits.as_ref().ok_or_else(|| {
                Error::Config("objective requires server logits in the distillation context".into())
            })?;
            if server.dim() != trace.logits.dim() {
                return Err(Error::Input(format!(
                    "server logits {:?} do not match student logits {:?}",
                    server.shape(),
                    trace.logits.shape()
                )));
            }
            let classes = trace.logits.ncols();
            let student_nt = not_true_projection(&trace.logits, labels)?;
            let server_nt = not_true_projection(server, labels)?;
            let (kd, dkd) = softened_kl(&student_nt, &server_nt, spec.tau)?;
            terms.kd_final = kd;
            let w_final = spec.beta / spec.b;
            if w_final != 0.0 {
                terms.total += w_final * kd;
                let mut scattered = scatter_not_true(&dkd, labels, classes);
                scattered *= w_final;
                upstream.accumulate(UpstreamGrads::from_logits(scattered));
            }
            if spec.kind == LossKind::HydraNtd {
                let aux_logits = trace.aux_logits.as_ref().ok_or_else(|| {
                    Error::Config(
                        "objective distills at the auxiliary head but the model has none".into(),
                    )
                })?;
                let aux_nt = not_true_projection(aux_logits, labels)?;
                let (kd_aux, dkd_aux) = softened_kl(&aux_nt, &server_nt, spec.tau)?;
                terms.kd_aux = kd_aux;
                if spec.gamma != 0.0 {
                    terms.total += spec.gamma * kd_aux;
                    let mut scattered = scatter_not_true(&dkd_aux, labels, classes);
                    scattered *= spec.gamma;
                    upstream.accumulate(UpstreamGrads {
                        aux_logits: Some(scattered),
                        ..Default::default()
                    });
                }
            }
        }
        LossKind::Moon | LossKind::HydraMoon => {
            let z_global = ctx.server_representation.as_ref().ok_or_else(|| {
                Error::Config(
                    "objective requires the server representation in the distillation context"
                        .into(),
                )
            })?;
            let z_prev = ctx.prev_local_representation.as_ref().ok_or_else(|| {
                Error::Config(
                    "objective requires the previous-round local representation in the distillation context"
                        .into(),
                )
            })?;
            let z_local = trace.representation();
            let (con, dcon) = contrastive_loss(z_local, z_global, z_prev, spec.tau)?;
            terms.kd_final = con;
            let w_final = spec.mu / spec.b;
            if w_final != 0.0 {
                terms.total += w_final * con;
                upstream.accumulate(UpstreamGrads {
                    representation: Some(dcon * w_final),
                    ..Default::default()
                });
            }
            if spec.kind == LossKind::HydraMoon {
                let z_aux = trace.aux_representation().ok_or_else(|| {
                    Error::Config(
                        "objective contrasts at the auxiliary head but the model has none".into(),
                    )
                })?;
                let (con_aux, dcon_aux) = contrastive_loss(z_aux, z_global, z_prev, spec.tau)?;
                terms.kd_aux = con_aux;
                if spec.gamma != 0.0 {
                    terms.total += spec.gamma * con_aux;
                    upstream.accumulate(UpstreamGrads {
                        aux_representation: Some(dcon_aux * spec.gamma),
                        ..Default::default()
                    });
                }
            }
        }
    }

    if !terms.total.is_finite() {
        return Err(Error::Numeric(format!(
            "objective evaluated to a non-finite total ({})",
            terms.total
        )));
    }
    Ok((terms, upstream))
}
