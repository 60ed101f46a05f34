//! Prototype banks, equipartitioned entropic-OT assignment and the
//! prototypical contrastive losses.
//!
//! Assignments are computed from forward values only and enter the losses as
//! tape constants, so no gradient ever flows through the Sinkhorn iteration.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::gaussian::{init_table, InitSpec};
use crate::matrix::Matrix;
use crate::scalar::{log_sum_exp, Scalar};
use crate::tape::{Tape, Var};

/// Trainable prototypes for the user and bundle families.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    /// `K_u x D`.
    pub users: Matrix<T>,
    /// `K_b x D`.
    pub bundles: Matrix<T>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn init(k_users: usize, k_bundles: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if k_users == 0 || k_bundles == 0 {
            return Err(Error::InvalidSpec("prototype counts must be positive".into()));
        }
        let spec = InitSpec {
            mean_scale: scale,
            raw_var_init: 0.0,
        };
        Ok(Self {
            users: init_table::<T>(k_users, dim, spec, seed)?.means,
            bundles: init_table::<T>(k_bundles, dim, spec, seed.wrapping_add(1))?.means,
        })
    }
}

/// Which rows enter the prototype losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtScope {
    /// Every user and every bundle.
    FullNodeSet,
    /// Only the entities of the current training batch.
    InBatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtConfig {
    /// Entropy regularization weight.
    pub lambda: f64,
    pub max_iters: usize,
    /// Marginal tolerance.
    pub tol: f64,
    pub scope: OtScope,
    /// Optimizer steps between Sinkhorn solves; assignments are reused in
    /// between. Only meaningful for the full node set.
    pub refresh_every: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            max_iters: 100,
            tol: 1e-6,
            scope: OtScope::FullNodeSet,
            refresh_every: 1,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.max_iters == 0 || !(self.tol > 0.0) || self.refresh_every == 0 {
            return Err(Error::InvalidSpec(format!("bad OT config {self:?}")));
        }
        if self.refresh_every > 1 && self.scope == OtScope::InBatch {
            return Err(Error::InvalidSpec("refresh_every > 1 needs the full node set scope".into()));
        }
        Ok(())
    }
}

/// Solution `Q = Diag(exp(f)) · exp(S/λ) · Diag(exp(g))` of the equipartition problem.
///
/// The scalings are kept in the log domain because `exp(S/λ)` overflows for
/// small `λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult<T> {
    /// `M x K`, rows sum to `1/M`, columns to `1/K`.
    pub q: Matrix<T>,
    /// `f`, length `M`.
    pub log_row_scale: Vec<T>,
    /// `g`, length `K`.
    pub log_col_scale: Vec<T>,
    pub iterations_used: usize,
    pub converged: bool,
}

impl<T: Scalar> AssignmentResult<T> {
    /// Largest deviation of a row sum from `1/M`.
    pub fn row_error(&self) -> T {
        let target = T::one() / T::lit(self.q.rows() as f64);
        (0..self.q.rows())
            .map(|r| (self.q.row(r).iter().copied().sum::<T>() - target).abs())
            .fold(T::zero(), T::max)
    }

    /// Largest deviation of a column sum from `1/K`.
    pub fn col_error(&self) -> T {
        let (m, k) = self.q.shape();
        let target = T::one() / T::lit(k as f64);
        (0..k)
            .map(|c| ((0..m).map(|r| self.q.get(r, c)).sum::<T>() - target).abs())
            .fold(T::zero(), T::max)
    }

    /// `H(Q) = -Σ q log q`.
    pub fn entropy(&self) -> T {
        self.q
            .data()
            .iter()
            .filter(|&&q| q > T::zero())
            .map(|&q| -q * q.ln())
            .sum()
    }

    /// Per-row argmax of `Q`, ties to the lowest prototype index.
    pub fn hard_assignment(&self) -> Vec<usize> {
        hard_assignment(&self.q)
    }
}

pub fn hard_assignment<T: Scalar>(q: &Matrix<T>) -> Vec<usize> {
    (0..q.rows())
        .map(|r| {
            let mut best = 0;
            for (c, &v) in q.row(r).iter().enumerate() {
                if v > q.get(r, best) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// `S = emb · protosᵀ`.
pub fn similarity<T: Scalar>(emb: &Matrix<T>, protos: &Matrix<T>) -> Result<Matrix<T>> {
    emb.matmul_t(protos)
}

/// Log-domain Sinkhorn-Knopp: alternately rescales the rows of `exp(S/λ)` to
/// `1/M` and the columns to `1/K` until both marginal errors drop below `tol`
/// or `max_iters` sweeps have run.
pub fn sinkhorn_assign<T: Scalar>(s: &Matrix<T>, cfg: &OtConfig) -> Result<AssignmentResult<T>> {
    cfg.validate()?;
    let (m, k) = s.shape();
    if m == 0 || k == 0 {
        return Err(dim_err("non-empty similarity matrix", format!("{m}x{k}")));
    }
    if !s.is_finite() {
        return Err(Error::NumericOverflow("similarity matrix has non-finite entries".into()));
    }
    let inv_lambda = T::one() / T::lit(cfg.lambda);
    let logits = s.scaled(inv_lambda);
    let log_row_target = -T::lit(m as f64).ln();
    let log_col_target = -T::lit(k as f64).ln();
    let tol = T::lit(cfg.tol);

    let mut f = vec![T::zero(); m];
    let mut g = vec![T::zero(); k];
    let mut buf_k = vec![T::zero(); k];
    let mut buf_m = vec![T::zero(); m];
    let mut result = None;
    for it in 1..=cfg.max_iters {
        for (r, fr) in f.iter_mut().enumerate() {
            for (b, (&l, &gc)) in buf_k.iter_mut().zip(logits.row(r).iter().zip(&g)) {
                *b = l + gc;
            }
            *fr = log_row_target - log_sum_exp(&buf_k);
        }
        for (c, gc) in g.iter_mut().enumerate() {
            for (r, b) in buf_m.iter_mut().enumerate() {
                *b = logits.get(r, c) + f[r];
            }
            *gc = log_col_target - log_sum_exp(&buf_m);
        }
        let q = Matrix::from_fn(m, k, |r, c| (logits.get(r, c) + f[r] + g[c]).exp());
        let res = AssignmentResult {
            q,
            log_row_scale: f.clone(),
            log_col_scale: g.clone(),
            iterations_used: it,
            converged: false,
        };
        if !res.q.is_finite() {
            return Err(Error::NumericOverflow(format!("assignment diverged at sweep {it}")));
        }
        if res.row_error() < tol && res.col_error() < tol {
            result = Some(AssignmentResult {
                converged: true,
                ..res
            });
            break;
        }
        result = Some(res);
    }
    Ok(result.expect("max_iters >= 1"))
}

/// `Σ_rows −log softmax(e·Cᵀ/τ)[assigned]` recorded on a tape.
pub fn proto_infonce_on<T: Scalar>(
    tape: &mut Tape<T>,
    emb: Var,
    protos: Var,
    assigned: &[usize],
    tau: T,
) -> Result<Var> {
    let s = tape.matmul_t(emb, protos)?;
    let scaled = tape.scale(s, T::one() / tau);
    let ls = tape.log_softmax_rows(scaled);
    let picked = tape.pick_cols(ls, assigned)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -T::one()))
}

/// `⟨Q, −log softmax(S/τ)⟩` with `Q` held constant.
pub fn ot_loss_on<T: Scalar>(tape: &mut Tape<T>, s: Var, q: &Matrix<T>, tau: T) -> Result<Var> {
    let scaled = tape.scale(s, T::one() / tau);
    let ls = tape.log_softmax_rows(scaled);
    let f = tape.frobenius_const(ls, Arc::new(q.clone()))?;
    Ok(tape.scale(f, -T::one()))
}

/// Value of [`proto_infonce_on`].
pub fn proto_infonce<T: Scalar>(emb: &Matrix<T>, protos: &Matrix<T>, assigned: &[usize], tau: T) -> Result<T> {
    if emb.cols() != protos.cols() {
        return Err(dim_err(protos.cols(), emb.cols()));
    }
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let p = tape.constant(protos.clone());
    let l = proto_infonce_on(&mut tape, e, p, assigned, tau)?;
    Ok(tape.scalar_value(l))
}

/// Value of [`ot_loss_on`].
pub fn ot_loss<T: Scalar>(q: &AssignmentResult<T>, s: &Matrix<T>, tau: T) -> Result<T> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let l = ot_loss_on(&mut tape, sv, &q.q, tau)?;
    Ok(tape.scalar_value(l))
}

/// Assignments for one prototype step, reusable when frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyAssignments<T> {
    pub users: AssignmentResult<T>,
    pub bundles: AssignmentResult<T>,
}

/// Prototype loss nodes for the user and bundle families.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeLossVars {
    /// Summed prototypical InfoNCE.
    pub proto: Var,
    /// Summed OT cross-entropy.
    pub ot: Var,
}

/// Computes the two prototype losses on a tape. `user_emb`/`bundle_emb` hold
/// exactly the rows in scope. When `frozen` is given its assignments are used
/// instead of running Sinkhorn on the current values.
#[allow(clippy::too_many_arguments)]
pub fn prototype_losses_on<T: Scalar>(
    tape: &mut Tape<T>,
    user_emb: Var,
    bundle_emb: Var,
    user_protos: Var,
    bundle_protos: Var,
    cfg: &OtConfig,
    tau: T,
    frozen: Option<&FamilyAssignments<T>>,
) -> Result<(PrototypeLossVars, FamilyAssignments<T>)> {
    let mut family = |emb: Var, protos: Var, fixed: Option<&AssignmentResult<T>>| -> Result<_> {
        let s = tape.matmul_t(emb, protos)?;
        let assignment = match fixed {
            Some(a) => {
                if a.q.shape() != tape.value(s).shape() {
                    return Err(dim_err(
                        format!("{:?}", tape.value(s).shape()),
                        format!("{:?}", a.q.shape()),
                    ));
                }
                a.clone()
            }
            None => sinkhorn_assign(tape.value(s), cfg)?,
        };
        let hard = assignment.hard_assignment();
        let proto = proto_infonce_on(tape, emb, protos, &hard, tau)?;
        let ot = ot_loss_on(tape, s, &assignment.q, tau)?;
        Ok((proto, ot, assignment))
    };
    let (pu, ou, au) = family(user_emb, user_protos, frozen.map(|f| &f.users))?;
    let (pb, ob, ab) = family(bundle_emb, bundle_protos, frozen.map(|f| &f.bundles))?;
    let proto = tape.add(pu, pb)?;
    let ot = tape.add(ou, ob)?;
    Ok((
        PrototypeLossVars { proto, ot },
        FamilyAssignments {
            users: au,
            bundles: ab,
        },
    ))
}

/// Value-level prototype step: `(L_proto, L_ot)` over the given rows.
pub fn prototype_step<T: Scalar>(
    user_emb: &Matrix<T>,
    bundle_emb: &Matrix<T>,
    bank: &PrototypeBank<T>,
    cfg: &OtConfig,
    tau: T,
) -> Result<(T, T)> {
    let mut tape = Tape::new();
    let u = tape.constant(user_emb.clone());
    let b = tape.constant(bundle_emb.clone());
    let cu = tape.constant(bank.users.clone());
    let cb = tape.constant(bank.bundles.clone());
    let (vars, _) = prototype_losses_on(&mut tape, u, b, cu, cb, cfg, tau, None)?;
    Ok((tape.scalar_value(vars.proto), tape.scalar_value(vars.ot)))
}
