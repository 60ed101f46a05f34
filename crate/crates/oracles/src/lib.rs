//! Reference implementations written independently of `gpcl-core`'s
//! numeric code: brute-force ranking metrics, a dual-bisection entropic OT
//! solver, closed-form OT-loss gradients and a dense two-view BPR trainer.
//! They only share the public data types of the core crate.

use num_rational::Ratio;

/// Full sort by score descending, ties by ascending id, masked ids removed.
pub fn brute_rank(scores: &[f64], masked: &[usize], n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|b| !masked.contains(b)).collect();
    // insertion sort keeps the comparison logic explicit
    for i in 1..ids.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (ids[j - 1], ids[j]);
            let before = scores[b] > scores[a] || (scores[b] == scores[a] && b < a);
            if !before {
                break;
            }
            ids.swap(j - 1, j);
            j -= 1;
        }
    }
    ids.truncate(n);
    ids
}

fn hit_count(ranked: &[usize], gt: &[usize], n: usize) -> u64 {
    let mut c = 0;
    for (pos, b) in ranked.iter().enumerate() {
        if pos < n && gt.contains(b) {
            c += 1;
        }
    }
    c
}

/// Mean Recall@n as an exact fraction, accumulated over a common denominator.
pub fn brute_recall_exact(ranked: &[Vec<usize>], gt: &[Vec<usize>], n: usize) -> Ratio<u64> {
    let mut num: u128 = 0;
    let mut den: u128 = 1;
    for (r, g) in ranked.iter().zip(gt) {
        let (a, b) = (hit_count(r, g, n) as u128, g.len() as u128);
        num = num * b + a * den;
        den *= b;
        let d = gcd(num, den);
        num /= d;
        den /= d;
    }
    den *= ranked.len() as u128;
    let d = gcd(num, den);
    Ratio::new_raw((num / d) as u64, (den / d) as u64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

pub fn brute_recall(ranked: &[Vec<usize>], gt: &[Vec<usize>], n: usize) -> f64 {
    let mut s = 0.0;
    for (r, g) in ranked.iter().zip(gt) {
        s += hit_count(r, g, n) as f64 / g.len() as f64;
    }
    s / ranked.len() as f64
}

pub fn brute_ndcg(ranked: &[Vec<usize>], gt: &[Vec<usize>], n: usize) -> f64 {
    let mut s = 0.0;
    for (r, g) in ranked.iter().zip(gt) {
        let mut dcg = 0.0;
        for (pos, b) in r.iter().enumerate() {
            if pos < n && g.contains(b) {
                dcg += 1.0 / (pos as f64 + 2.0).log2();
            }
        }
        let mut idcg = 0.0;
        for pos in 0..n.min(g.len()) {
            idcg += 1.0 / (pos as f64 + 2.0).log2();
        }
        s += dcg / idcg;
    }
    s / ranked.len() as f64
}

/// Optimal entropic plan for a 3x2 problem with rows summing to 1/3 and
/// columns to 1/2, maximizing `⟨Q, S⟩ + λ H(Q)`.
///
/// Stationarity gives `Q_ij ∝ exp((S_ij + a_i + b_j)/λ)`. Fixing the column
/// gap `t = b_1 − b_0`, each row is a two-way softmax scaled to 1/3, and the
/// first-column mass falls monotonically in `t`; bisection on `t` balances it.
pub fn ot_dual_3x2(s: &[[f64; 2]; 3], lambda: f64) -> [[f64; 2]; 3] {
    let third = 1.0 / 3.0;
    let first = |t: f64, i: usize| {
        let z = (s[i][1] + t - s[i][0]) / lambda;
        third / (1.0 + z.exp())
    };
    let mass = |t: f64| (0..3).map(|i| first(t, i)).sum::<f64>();
    // t = ±(spread + 40λ) pushes every row almost fully into one column
    let spread = s.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())) * 2.0 + 40.0 * lambda;
    let (mut lo, mut hi) = (-spread, spread);
    while mass(lo) < 0.5 {
        lo *= 2.0;
    }
    while mass(hi) > 0.5 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    let mut q = [[0.0; 2]; 3];
    for (i, row) in q.iter_mut().enumerate() {
        row[0] = first(t, i);
        row[1] = third - row[0];
    }
    q
}

/// Closed-form gradients of `L = -Σ_ij Q_ij log softmax_j(S_i/τ)` with
/// `S = E Cᵀ` and `Q` constant: `dS = (rowsum(Q) ⊙ P − Q)/τ`, `dE = dS C`, `dC = dSᵀ E`.
pub fn ot_loss_grads(e: &[Vec<f64>], c: &[Vec<f64>], q: &[Vec<f64>], tau: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (m, k, d) = (e.len(), c.len(), e[0].len());
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut ds = vec![vec![0.0; k]; m];
    for i in 0..m {
        let logits: Vec<f64> = (0..k).map(|j| dot(&e[i], &c[j]) / tau).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let rs: f64 = q[i].iter().sum();
        for j in 0..k {
            let p = (logits[j] - mx).exp() / z;
            ds[i][j] = (rs * p - q[i][j]) / tau;
        }
    }
    let mut de = vec![vec![0.0; d]; m];
    let mut dc = vec![vec![0.0; d]; k];
    for i in 0..m {
        for j in 0..k {
            for t in 0..d {
                de[i][t] += ds[i][j] * c[j][t];
                dc[j][t] += ds[i][j] * e[i][t];
            }
        }
    }
    (de, dc)
}

pub type Dense = Vec<Vec<f64>>;

fn zeros(r: usize, c: usize) -> Dense {
    vec![vec![0.0; c]; r]
}

/// `out[l] = Σ_r w(l, r) x[r]` over an edge list with weights.
fn edge_mul(edges: &[(usize, usize, f64)], x: &Dense, rows: usize, transpose: bool) -> Dense {
    let mut out = zeros(rows, x[0].len());
    for &(l, r, w) in edges {
        let (dst, src) = if transpose { (r, l) } else { (l, r) };
        for t in 0..x[0].len() {
            out[dst][t] += w * x[src][t];
        }
    }
    out
}

fn sym_edges(pairs: &[(usize, usize)], left: usize, right: usize) -> Vec<(usize, usize, f64)> {
    let mut dl = vec![0usize; left];
    let mut dr = vec![0usize; right];
    for &(l, r) in pairs {
        dl[l] += 1;
        dr[r] += 1;
    }
    pairs
        .iter()
        .map(|&(l, r)| (l, r, 1.0 / ((dl[l] * dr[r]) as f64).sqrt()))
        .collect()
}

/// Dense one-layer two-view BPR model with hand-derived gradients and its own Adam.
pub struct TwoViewBpr {
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    ub: Vec<(usize, usize, f64)>,
    ui: Vec<(usize, usize, f64)>,
    pool: Vec<(usize, usize, f64)>,
    pub eu: Dense,
    pub eb: Dense,
    pub ei: Dense,
    moments: Vec<(Dense, Dense)>,
    step: i32,
    lr: f64,
}

impl TwoViewBpr {
    /// Graphs: `ub` train pairs, `ui` pairs, `bi` pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        counts: (usize, usize, usize),
        ub: &[(usize, usize)],
        ui: &[(usize, usize)],
        bi: &[(usize, usize)],
        eu: Dense,
        eb: Dense,
        ei: Dense,
        lr: f64,
    ) -> Self {
        let (m, o, n) = counts;
        let mut bdeg = vec![0usize; o];
        for &(b, _) in bi {
            bdeg[b] += 1;
        }
        let pool = bi.iter().map(|&(b, i)| (b, i, 1.0 / bdeg[b] as f64)).collect();
        let moments = vec![(zeros(m, eu[0].len()), zeros(m, eu[0].len())), (zeros(o, eb[0].len()), zeros(o, eb[0].len())), (zeros(n, ei[0].len()), zeros(n, ei[0].len()))];
        Self {
            users: m,
            bundles: o,
            items: n,
            ub: sym_edges(ub, m, o),
            ui: sym_edges(ui, m, n),
            pool,
            eu,
            eb,
            ei,
            moments,
            step: 0,
            lr,
        }
    }

    /// `(U_B, B_B, U_I, I_I, B_I)`.
    fn forward(&self) -> (Dense, Dense, Dense, Dense, Dense) {
        let u_b = edge_mul(&self.ub, &self.eb, self.users, false);
        let b_b = edge_mul(&self.ub, &self.eu, self.bundles, true);
        let u_i = edge_mul(&self.ui, &self.ei, self.users, false);
        let i_i = edge_mul(&self.ui, &self.eu, self.items, true);
        let b_i = edge_mul(&self.pool, &i_i, self.bundles, false);
        (u_b, b_b, u_i, i_i, b_i)
    }

    /// Summed BPR loss of the triples, then one Adam step on the three tables.
    pub fn step(&mut self, triples: &[(usize, usize, usize)]) -> f64 {
        let (u_b, b_b, u_i, _, b_i) = self.forward();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let y = |u: usize, b: usize| dot(&u_b[u], &b_b[b]) + dot(&u_i[u], &b_i[b]);
        let d = self.eu[0].len();
        let (mut du_b, mut db_b, mut du_i, mut db_i) = (zeros(self.users, d), zeros(self.bundles, d), zeros(self.users, d), zeros(self.bundles, d));
        let mut loss = 0.0;
        for &(u, p, n) in triples {
            let x = y(u, n) - y(u, p);
            loss += if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
            let s = 1.0 / (1.0 + (-x).exp());
            for (b, dy) in [(p, -s), (n, s)] {
                for t in 0..d {
                    du_b[u][t] += dy * b_b[b][t];
                    db_b[b][t] += dy * u_b[u][t];
                    du_i[u][t] += dy * b_i[b][t];
                    db_i[b][t] += dy * u_i[u][t];
                }
            }
        }
        let deb = edge_mul(&self.ub, &du_b, self.bundles, true);
        let mut deu = edge_mul(&self.ub, &db_b, self.users, false);
        let di_i = edge_mul(&self.pool, &db_i, self.items, true);
        let deu_i = edge_mul(&self.ui, &di_i, self.users, false);
        for (a, b) in deu.iter_mut().zip(&deu_i) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        let dei = edge_mul(&self.ui, &du_i, self.items, true);
        self.step += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (c1, c2) = (1.0 - b1.powi(self.step), 1.0 - b2.powi(self.step));
        let lr = self.lr;
        for (k, (table, grad)) in [(&mut self.eu, deu), (&mut self.eb, deb), (&mut self.ei, dei)].into_iter().enumerate() {
            let (m, v) = &mut self.moments[k];
            for r in 0..table.len() {
                for t in 0..d {
                    let g = grad[r][t];
                    m[r][t] = b1 * m[r][t] + (1.0 - b1) * g;
                    v[r][t] = b2 * v[r][t] + (1.0 - b2) * g * g;
                    table[r][t] -= lr * (m[r][t] / c1) / ((v[r][t] / c2).sqrt() + eps);
                }
            }
        }
        loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gpcl_core::dataset::{generate_synthetic, sample_batch, SyntheticSpec};
    use gpcl_core::eval::{ndcg_at_n, recall_at_n, recall_at_n_exact, top_n};
    use gpcl_core::model::{BUNDLE_MEAN, ITEM_MEAN, USER_MEAN};
    use gpcl_core::trainer::{train, TrainConfig, TrainState};
    use gpcl_core::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(m: &Matrix<f64>) -> Dense {
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
    }

    #[test]
    fn dual_solver_recovers_uniform_plan() {
        let q = ot_dual_3x2(&[[0.2, 0.2], [0.5, 0.5], [-1.0, -1.0]], 0.05);
        for row in q {
            for x in row {
                assert!((x - 1.0 / 6.0).abs() < 1e-14, "{x}");
            }
        }
    }

    #[test]
    fn dual_plan_beats_feasible_perturbations() {
        let objective = |s: &[[f64; 2]; 3], q: &[[f64; 2]; 3]| {
            let mut v = 0.0;
            for i in 0..3 {
                for j in 0..2 {
                    v += q[i][j] * s[i][j] - 0.05 * q[i][j] * q[i][j].ln();
                }
            }
            v
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s = [[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]];
            let q = ot_dual_3x2(&s, 0.05);
            let col: f64 = q.iter().map(|r| r[0]).sum();
            assert!((col - 0.5).abs() < 1e-12);
            let best = objective(&s, &q);
            for _ in 0..200 {
                // moving mass d along rows 0 and 1 in opposite columns keeps both marginals
                let d = rng.random_range(-1e-3..1e-3);
                let (a, b) = (rng.random_range(0..3), rng.random_range(0..3));
                if a == b {
                    continue;
                }
                let mut p = q;
                p[a][0] += d;
                p[a][1] -= d;
                p[b][0] -= d;
                p[b][1] += d;
                if p.iter().flatten().all(|&x| x > 0.0) {
                    assert!(objective(&s, &p) <= best + 1e-15);
                }
            }
        }
    }

    #[test]
    fn brute_metrics_small_cases() {
        assert_eq!(brute_rank(&[0.1, 0.9, 0.5], &[], 2), vec![1, 2]);
        assert_eq!(brute_rank(&[0.1, 0.9, 0.5], &[1], 2), vec![2, 0]);
        assert_eq!(brute_recall_exact(&[vec![1, 5]], &[vec![1, 9]], 20), Ratio::new(1, 2));
        assert!((brute_ndcg(&[vec![7, 8, 1]], &[vec![1]], 5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn engine_metrics_match_brute_force_on_rankings_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let o = rng.random_range(1..=30);
            let n = rng.random_range(1..=10);
            // coarse scores force ties
            let scores: Vec<f64> = (0..o).map(|_| rng.random_range(0..5) as f64).collect();
            let masked: Vec<usize> = (0..o).filter(|_| rng.random_bool(0.2)).collect();
            assert_eq!(top_n(&scores, &masked, n).0, brute_rank(&scores, &masked, n));
            let ranked = vec![brute_rank(&scores, &masked, n)];
            let gt = vec![vec![rng.random_range(0..o)]];
            assert_eq!(recall_at_n_exact(&ranked, &gt, n).unwrap(), brute_recall_exact(&ranked, &gt, n));
            assert!((recall_at_n(&ranked, &gt, n).unwrap() - brute_recall(&ranked, &gt, n)).abs() <= 1e-12);
            assert!((ndcg_at_n(&ranked, &gt, n).unwrap() - brute_ndcg(&ranked, &gt, n)).abs() <= 1e-12);
        }
    }

    /// With every auxiliary weight zero and deterministic embeddings the
    /// trainer is plain two-view BPR; its loss trace must match the dense reference.
    #[test]
    fn trainer_reduces_to_two_view_bpr() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_clusters: 2,
            users_per_cluster: 8,
            bundles_per_cluster: 5,
            items_per_cluster: 10,
            noise_rate: 0.1,
            seed: 3,
        })
        .unwrap();
        let mut cfg = TrainConfig::default();
        cfg.model.dim = 6;
        cfg.model.k_users = 2;
        cfg.model.k_bundles = 2;
        cfg.model.disable_gaussian = true;
        cfg.loss.gamma_cl = 0.0;
        cfg.loss.gamma_pcl = 0.0;
        cfg.loss.gamma_ot = 0.0;
        cfg.learning_rate = 0.01;
        cfg.batch_size = 16;
        cfg.epochs = 5;
        cfg.eval_every = 0;
        cfg.seed = 21;
        let out = train::<f64>(&ds, &cfg).unwrap();

        let init = TrainState::<f64>::init(&ds.counts, &cfg).unwrap();
        let p = &init.model.params;
        let c = ds.counts;
        let mut reference = TwoViewBpr::new(
            (c.num_users, c.num_bundles, c.num_items),
            &ds.ub_train.pairs,
            &ds.ui.pairs,
            &ds.bi.pairs,
            dense(&p[USER_MEAN].values),
            dense(&p[BUNDLE_MEAN].values),
            dense(&p[ITEM_MEAN].values),
            cfg.learning_rate,
        );
        let mut rng = init.rng.clone();
        assert_eq!(out.steps.len(), cfg.epochs * cfg.steps_for(&ds));
        for s in &out.steps {
            let batch = sample_batch(&ds, cfg.batch_size, &mut rng).unwrap();
            let l = reference.step(&batch.triples);
            assert!((s.l_bpr - l).abs() <= 1e-9 * l.abs().max(1.0), "{} vs {l}", s.l_bpr);
            assert!((s.total - l).abs() <= 1e-9 * l.abs().max(1.0));
        }
        let fin = &out.state.model.params;
        for (a, b) in fin[USER_MEAN].values.data().iter().zip(reference.eu.concat()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
