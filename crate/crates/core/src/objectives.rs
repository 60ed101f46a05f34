//! Prediction score, BPR, cross-view InfoNCE and the weighted total loss.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::{softplus, Scalar};
use crate::tape::{Tape, Var};

/// Row-norm floor used before cosine-style dot products.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// The four view-specific representations feeding the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings<T> {
    pub user_bundle_view: Matrix<T>,
    pub bundle_bundle_view: Matrix<T>,
    pub user_item_view: Matrix<T>,
    pub bundle_item_view: Matrix<T>,
}

impl<T: Scalar> ViewEmbeddings<T> {
    pub fn num_users(&self) -> usize {
        self.user_bundle_view.rows()
    }

    pub fn num_bundles(&self) -> usize {
        self.bundle_bundle_view.rows()
    }

    /// Score of one pair: `e_u^B·e_b^B + e_u^I·e_b^I`.
    pub fn score(&self, user: usize, bundle: usize) -> T {
        dot(self.user_bundle_view.row(user), self.bundle_bundle_view.row(bundle))
            + dot(self.user_item_view.row(user), self.bundle_item_view.row(bundle))
    }

    fn check(&self, users: &[usize], bundles: &[usize]) -> Result<()> {
        let (m, o) = (self.num_users(), self.num_bundles());
        if let Some(&u) = users.iter().find(|&&u| u >= m) {
            return Err(Error::IdOutOfBounds { id: u, bound: m });
        }
        if let Some(&b) = bundles.iter().find(|&&b| b >= o) {
            return Err(Error::IdOutOfBounds { id: b, bound: o });
        }
        Ok(())
    }
}

/// `|users| x |bundles|` score matrix.
pub fn predict_scores<T: Scalar>(v: &ViewEmbeddings<T>, users: &[usize], bundles: &[usize]) -> Result<Matrix<T>> {
    v.check(users, bundles)?;
    Ok(Matrix::from_fn(users.len(), bundles.len(), |i, j| {
        v.score(users[i], bundles[j])
    }))
}

/// `Σ −ln σ(pos − neg)`, evaluated as `Σ softplus(neg − pos)`.
pub fn bpr_loss<T: Scalar>(pos: &[T], neg: &[T]) -> Result<T> {
    if pos.len() != neg.len() {
        return Err(dim_err(pos.len(), neg.len()));
    }
    Ok(pos.iter().zip(neg).map(|(&p, &n)| softplus(n - p)).sum())
}

/// Tape form of [`bpr_loss`] over two column vectors.
pub fn bpr_loss_on<T: Scalar>(tape: &mut Tape<T>, pos: Var, neg: Var) -> Result<Var> {
    let margin = tape.sub(neg, pos)?;
    let sp = tape.softplus(margin);
    Ok(tape.sum(sp))
}

/// One InfoNCE direction: row `r` of `anchors` is positive with row `r` of
/// `others` and negative with every other row. Rows are L2-normalized first;
/// returns the mean over rows.
pub fn infonce_on<T: Scalar>(tape: &mut Tape<T>, anchors: Var, others: Var, tau: T) -> Result<Var> {
    let n = tape.value(anchors).rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if tape.value(others).shape() != tape.value(anchors).shape() {
        return Err(dim_err(
            format!("{:?}", tape.value(anchors).shape()),
            format!("{:?}", tape.value(others).shape()),
        ));
    }
    let a = tape.normalize_rows(anchors, T::lit(NORMALIZE_EPS));
    let b = tape.normalize_rows(others, T::lit(NORMALIZE_EPS));
    let logits = tape.matmul_t(a, b)?;
    let scaled = tape.scale(logits, T::one() / tau);
    let ls = tape.log_softmax_rows(scaled);
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick_cols(ls, &diag)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::one()))
}

/// First-occurrence order without repeats.
pub fn unique_in_order(ids: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    ids.iter().copied().filter(|&i| seen.insert(i)).collect()
}

/// `L_CL^U + L_CL^B` with in-batch negatives over the distinct batch users and bundles.
pub fn cross_view_infonce<T: Scalar>(
    batch_users: &[usize],
    batch_bundles: &[usize],
    v: &ViewEmbeddings<T>,
    tau: T,
) -> Result<T> {
    v.check(batch_users, batch_bundles)?;
    let users = unique_in_order(batch_users);
    let bundles = unique_in_order(batch_bundles);
    let mut tape = Tape::new();
    let ub = tape.constant(v.user_bundle_view.gather_rows(&users));
    let ui = tape.constant(v.user_item_view.gather_rows(&users));
    let bb = tape.constant(v.bundle_bundle_view.gather_rows(&bundles));
    let bi = tape.constant(v.bundle_item_view.gather_rows(&bundles));
    let lu = infonce_on(&mut tape, ub, ui, tau)?;
    let lb = infonce_on(&mut tape, bb, bi, tau)?;
    let l = tape.add(lu, lb)?;
    Ok(tape.scalar_value(l))
}

/// Loss weights and sampling settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_cl: f64,
    pub gamma_pcl: f64,
    pub gamma_ot: f64,
    pub tau: f64,
    /// Gaussian samples per step.
    pub samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_cl: 0.04,
            gamma_pcl: 0.1,
            gamma_ot: 0.1,
            tau: 0.25,
            samples: 2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let gammas = [self.gamma_cl, self.gamma_pcl, self.gamma_ot];
        if gammas.iter().any(|g| !(*g >= 0.0)) || !(self.tau > 0.0) || self.samples == 0 {
            return Err(Error::InvalidSpec(format!("bad loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Component losses of one step (or one sample) and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bpr: f64,
    pub l_cl: f64,
    pub l_proto: f64,
    pub l_ot: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(l_bpr: f64, l_cl: f64, l_proto: f64, l_ot: f64, w: &LossWeights) -> Self {
        Self {
            l_bpr,
            l_cl,
            l_proto,
            l_ot,
            total: l_bpr + w.gamma_cl * l_cl + w.gamma_pcl * l_proto + w.gamma_ot * l_ot,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_bpr, self.l_cl, self.l_proto, self.l_ot, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    /// Componentwise mean.
    pub fn mean(items: &[LossBreakdown]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptySampleList);
        }
        let n = items.len() as f64;
        let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            l_bpr: s(|b| b.l_bpr),
            l_cl: s(|b| b.l_cl),
            l_proto: s(|b| b.l_proto),
            l_ot: s(|b| b.l_ot),
            total: s(|b| b.total),
        })
    }
}

/// `(1/T) Σ_t [L_BPR + γ_CL L_CL + γ_PCL L_proto + γ_OT L_OT]` from per-sample components.
/// The `total` field of the inputs is ignored and recomputed from `w`.
pub fn total_loss(per_sample: &[LossBreakdown], w: &LossWeights) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::EmptySampleList);
    }
    let sum: f64 = per_sample
        .iter()
        .map(|b| LossBreakdown::weighted(b.l_bpr, b.l_cl, b.l_proto, b.l_ot, w).total)
        .sum();
    Ok(sum / per_sample.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    fn views(ub: Matrix<f64>, bb: Matrix<f64>, ui: Matrix<f64>, bi: Matrix<f64>) -> ViewEmbeddings<f64> {
        ViewEmbeddings {
            user_bundle_view: ub,
            bundle_bundle_view: bb,
            user_item_view: ui,
            bundle_item_view: bi,
        }
    }

    #[test]
    fn prediction_is_sum_of_view_dots() {
        let v = views(m(&[vec![1.0, 0.0]]), m(&[vec![1.0, 0.0]]), m(&[vec![0.0, 1.0]]), m(&[vec![0.0, 1.0]]));
        assert_eq!(predict_scores(&v, &[0], &[0]).unwrap().item(), 2.0);
        let v0 = views(m(&[vec![1.0, 2.0]]), m(&[vec![3.0, 1.0]]), Matrix::zeros(1, 2), Matrix::zeros(1, 2));
        assert_eq!(predict_scores(&v0, &[0], &[0]).unwrap().item(), 5.0);
        let z = views(Matrix::zeros(1, 2), Matrix::zeros(1, 2), Matrix::zeros(1, 2), Matrix::zeros(1, 2));
        assert_eq!(predict_scores(&z, &[0], &[0]).unwrap().item(), 0.0);
        assert!(matches!(predict_scores(&z, &[1], &[0]), Err(Error::IdOutOfBounds { .. })));
    }

    #[test]
    fn bpr_values() {
        assert!((bpr_loss(&[1.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((bpr_loss(&[3f64.ln()], &[0.0]).unwrap() - (-(0.75f64).ln())).abs() < 1e-15);
        let tiny = bpr_loss(&[40.0f64], &[0.0]).unwrap();
        assert!(tiny.is_finite() && tiny < 1e-15 && tiny > 0.0);
        assert!(bpr_loss(&[1.0], &[]).is_err());
        let huge = bpr_loss(&[-800.0f64], &[800.0]).unwrap();
        assert!((huge - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn bpr_strictly_decreasing_in_margin() {
        let mut last = f64::INFINITY;
        for k in -20..=20 {
            let l = bpr_loss(&[k as f64 * 0.5], &[0.0]).unwrap();
            assert!(l > 0.0 && l < last);
            last = l;
        }
    }

    #[test]
    fn infonce_single_entity_is_zero() {
        let v = views(m(&[vec![1.0, 2.0]]), m(&[vec![0.5, 1.0]]), m(&[vec![-1.0, 0.2]]), m(&[vec![0.3, 0.3]]));
        assert!(cross_view_infonce(&[0], &[0], &v, 0.25).unwrap().abs() < 1e-15);
        assert!(matches!(cross_view_infonce(&[], &[0], &v, 0.25), Err(Error::EmptyBatch)));
    }

    #[test]
    fn infonce_orthonormal_pair() {
        // users: bundle view e1, e2; item view e1, e2 => each user: −log(e/(e+1))
        let e = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut tape = Tape::new();
        let a = tape.constant(e.clone());
        let b = tape.constant(e);
        let l = infonce_on(&mut tape, a, b, 1.0).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((tape.scalar_value(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn aligned_views_beat_anti_aligned() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
            let y = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
            let aligned = views(x.clone(), y.clone(), x.clone(), y.clone());
            let anti = views(x.clone(), y.clone(), x.scaled(-1.0), y.scaled(-1.0));
            let users: Vec<usize> = (0..6).collect();
            let bundles: Vec<usize> = (0..5).collect();
            let la = cross_view_infonce(&users, &bundles, &aligned, 0.25).unwrap();
            let lb = cross_view_infonce(&users, &bundles, &anti, 0.25).unwrap();
            assert!(la < lb);
        }
    }

    #[test]
    fn infonce_permutation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut r = || Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let v = views(r(), r(), r(), r());
        let a = cross_view_infonce(&[0, 1, 2, 3], &[4, 2, 0], &v, 0.3).unwrap();
        let b = cross_view_infonce(&[3, 1, 0, 2], &[0, 4, 2], &v, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights {
            gamma_cl: 0.1,
            gamma_pcl: 0.1,
            gamma_ot: 0.1,
            ..LossWeights::default()
        };
        let a = LossBreakdown { l_bpr: 1.0, l_cl: 1.0, l_proto: 1.0, l_ot: 1.0, total: 0.0 };
        let b = LossBreakdown { l_bpr: 3.0, ..a };
        assert!((total_loss(&[a, b], &w).unwrap() - 2.3).abs() < 1e-12);
        assert!((total_loss(&[a], &w).unwrap() - 1.3).abs() < 1e-12);
        let zero = LossWeights { gamma_cl: 0.0, gamma_pcl: 0.0, gamma_ot: 0.0, ..w };
        assert!((total_loss(&[a, b], &zero).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(total_loss(&[], &w), Err(Error::EmptySampleList)));
        // linear in each weight
        let f = |g: f64| total_loss(&[a, b], &LossWeights { gamma_ot: g, ..w }).unwrap();
        assert!(((f(0.3) - f(0.1)) - 2.0 * (f(0.2) - f(0.1))).abs() < 1e-12);
    }
}
