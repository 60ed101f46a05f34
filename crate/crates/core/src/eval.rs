//! All-ranking evaluation, Recall@n / NDCG@n, sampled predictions and
//! frequency-bucketed uncertainty.

use std::cmp::Ordering;
use std::fmt::Write as _;

use num_rational::Ratio;
use num_traits::{CheckedAdd, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::gaussian::uncertainty_score;
use crate::model::{Family, GpclModel, ModelConfig, ModelGraphs};
use crate::objectives::ViewEmbeddings;
use crate::scalar::Scalar;

/// Top-n list of one user, scores non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub user: usize,
    pub bundles: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Score order: higher first, ties by ascending id.
fn by_score(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Top `n` ids of `scores`, skipping the ascending `masked` ids.
pub fn top_n(scores: &[f64], masked: &[usize], n: usize) -> (Vec<usize>, Vec<f64>) {
    let mut cand: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(b, _)| masked.binary_search(b).is_err())
        .collect();
    let n = n.min(cand.len());
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    if n < cand.len() {
        cand.select_nth_unstable_by(n - 1, by_score);
        cand.truncate(n);
    }
    cand.sort_by(by_score);
    cand.into_iter().unzip()
}

/// Per-user ground truth of a split, only users with at least one bundle.
pub fn ground_truth(ds: &InteractionDataset, split: Split) -> Vec<(usize, Vec<usize>)> {
    ds.split(split)
        .adjacency(ds.counts.num_users)
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .collect()
}

/// Bundles hidden when ranking `split`: train, plus tune when ranking test.
pub fn seen_bundles(ds: &InteractionDataset, split: Split) -> Vec<Vec<usize>> {
    let mut seen = ds.ub_train.adjacency(ds.counts.num_users);
    if split == Split::Test {
        for (u, b) in ds.ub_tune.adjacency(ds.counts.num_users).into_iter().enumerate() {
            seen[u].extend(b);
            seen[u].sort_unstable();
        }
    }
    seen
}

/// Ranks every bundle for each user that has ground truth in `split`.
pub fn rank_with<F>(ds: &InteractionDataset, split: Split, n: usize, mask_seen: bool, score_user: F) -> Vec<RankingResult>
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    let users: Vec<usize> = ground_truth(ds, split).into_iter().map(|(u, _)| u).collect();
    let seen = mask_seen.then(|| seen_bundles(ds, split));
    users
        .par_iter()
        .map(|&u| {
            let scores = score_user(u);
            let masked: &[usize] = seen.as_ref().map_or(&[], |s| &s[u]);
            let (bundles, scores) = top_n(&scores, masked, n);
            RankingResult { user: u, bundles, scores }
        })
        .collect()
}

/// Ranking from precomputed view embeddings.
pub fn rank_views<T: Scalar>(
    v: &ViewEmbeddings<T>,
    ds: &InteractionDataset,
    split: Split,
    n: usize,
    mask_seen: bool,
) -> Vec<RankingResult> {
    let nb = v.num_bundles();
    rank_with(ds, split, n, mask_seen, |u| (0..nb).map(|b| v.score(u, b).as_f64()).collect())
}

/// Deterministic (mean-embedding) ranking of a model.
pub fn rank_all<T: Scalar>(
    model: &GpclModel<T>,
    graphs: &ModelGraphs<T>,
    cfg: &ModelConfig,
    ds: &InteractionDataset,
    split: Split,
    n: usize,
    mask_seen: bool,
) -> Result<Vec<RankingResult>> {
    let v = model.views(graphs, cfg, None)?;
    Ok(rank_views(&v, ds, split, n, mask_seen))
}

fn check_gt(gt: &[usize], user: usize) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth(user));
    }
    Ok(())
}

fn hits<'a>(ranked: &'a [usize], gt: &[usize], n: usize) -> impl Iterator<Item = usize> + 'a {
    let gt: std::collections::HashSet<usize> = gt.iter().copied().collect();
    ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(move |(_, b)| gt.contains(b))
        .map(|(r, _)| r + 1)
}

/// `|top-n ∩ gt| / |gt|` for one user, exact.
pub fn recall_user(ranked: &[usize], gt: &[usize], n: usize) -> Result<Ratio<u64>> {
    check_gt(gt, 0)?;
    Ok(Ratio::new(hits(ranked, gt, n).count() as u64, gt.len() as u64))
}

/// Binary-relevance NDCG with 1-based ranks for one user.
pub fn ndcg_user(ranked: &[usize], gt: &[usize], n: usize) -> Result<f64> {
    check_gt(gt, 0)?;
    let dcg: f64 = hits(ranked, gt, n).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
    let idcg: f64 = (1..=n.min(gt.len())).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

fn check_lists(ranked: &[Vec<usize>], gt: &[Vec<usize>]) -> Result<()> {
    if ranked.len() != gt.len() {
        return Err(crate::error::dim_err(format!("{} users", gt.len()), format!("{} rankings", ranked.len())));
    }
    if gt.is_empty() {
        return Err(Error::InvalidSpec("no users to evaluate".into()));
    }
    if let Some(u) = gt.iter().position(|g| g.is_empty()) {
        return Err(Error::EmptyGroundTruth(u));
    }
    Ok(())
}

/// Mean Recall@n over users as an exact ratio.
pub fn recall_at_n_exact(ranked: &[Vec<usize>], gt: &[Vec<usize>], n: usize) -> Result<Ratio<u64>> {
    check_lists(ranked, gt)?;
    let mut acc = Ratio::<u64>::zero();
    for (r, g) in ranked.iter().zip(gt) {
        acc = acc
            .checked_add(&recall_user(r, g, n)?)
            .ok_or_else(|| Error::NumericOverflow("recall sum".into()))?;
    }
    Ok(acc / Ratio::from_integer(gt.len() as u64))
}

/// Mean Recall@n over users: per-user ratios summed in user order, divided by the user count.
pub fn recall_at_n(ranked: &[Vec<usize>], gt: &[Vec<usize>], n: usize) -> Result<f64> {
    check_lists(ranked, gt)?;
    let mut s = 0.0;
    for (r, g) in ranked.iter().zip(gt) {
        s += recall_user(r, g, n)?.to_f64().unwrap_or(0.0);
    }
    Ok(s / gt.len() as f64)
}

/// Mean NDCG@n over users.
pub fn ndcg_at_n(ranked: &[Vec<usize>], gt: &[Vec<usize>], n: usize) -> Result<f64> {
    check_lists(ranked, gt)?;
    let mut s = 0.0;
    for (r, g) in ranked.iter().zip(gt) {
        s += ndcg_user(r, g, n)?;
    }
    Ok(s / gt.len() as f64)
}

/// Recall/NDCG for several cutoffs on one split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub users: usize,
    pub n_list: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl EvalReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.n_list.iter().position(|&m| m == n).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, n: usize) -> Option<f64> {
        self.n_list.iter().position(|&m| m == n).map(|i| self.ndcg[i])
    }

    /// `metric@n<TAB>value` lines, recall first.
    pub fn lines(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.n_list.iter().enumerate() {
            let _ = writeln!(s, "recall@{n}\t{:.6}", self.recall[i]);
        }
        for (i, n) in self.n_list.iter().enumerate() {
            let _ = writeln!(s, "ndcg@{n}\t{:.6}", self.ndcg[i]);
        }
        s
    }

    pub fn json_line(&self) -> String {
        let mut m = serde_json::Map::new();
        m.insert("split".into(), self.split.clone().into());
        m.insert("users".into(), self.users.into());
        for (i, n) in self.n_list.iter().enumerate() {
            m.insert(format!("recall@{n}"), self.recall[i].into());
            m.insert(format!("ndcg@{n}"), self.ndcg[i].into());
        }
        serde_json::Value::Object(m).to_string()
    }
}

/// Evaluates rankings at every cutoff in `n_list`.
pub fn report_from_rankings(
    ds: &InteractionDataset,
    split: Split,
    rankings: &[RankingResult],
    n_list: &[usize],
) -> Result<EvalReport> {
    let gt_all = ds.split(split).adjacency(ds.counts.num_users);
    let ranked: Vec<Vec<usize>> = rankings.iter().map(|r| r.bundles.clone()).collect();
    let gt: Vec<Vec<usize>> = rankings.iter().map(|r| gt_all[r.user].clone()).collect();
    let mut recall = Vec::new();
    let mut ndcg = Vec::new();
    for &n in n_list {
        recall.push(recall_at_n(&ranked, &gt, n)?);
        ndcg.push(ndcg_at_n(&ranked, &gt, n)?);
    }
    Ok(EvalReport {
        split: split.to_string(),
        users: rankings.len(),
        n_list: n_list.to_vec(),
        recall,
        ndcg,
    })
}

/// Deterministic evaluation of a model with seen-bundle masking.
pub fn evaluate<T: Scalar>(
    model: &GpclModel<T>,
    graphs: &ModelGraphs<T>,
    cfg: &ModelConfig,
    ds: &InteractionDataset,
    split: Split,
    n_list: &[usize],
) -> Result<EvalReport> {
    let v = model.views(graphs, cfg, None)?;
    evaluate_views(&v, ds, split, n_list)
}

pub fn evaluate_views<T: Scalar>(
    v: &ViewEmbeddings<T>,
    ds: &InteractionDataset,
    split: Split,
    n_list: &[usize],
) -> Result<EvalReport> {
    let max_n = n_list.iter().copied().max().unwrap_or(0);
    let r = rank_views(v, ds, split, max_n, true);
    report_from_rankings(ds, split, &r, n_list)
}

/// Train-split interaction count of every bundle.
pub fn bundle_popularity(ds: &InteractionDataset) -> Vec<usize> {
    let mut pop = vec![0; ds.counts.num_bundles];
    for &(_, b) in &ds.ub_train.pairs {
        pop[b] += 1;
    }
    pop
}

/// Ranks every user's unseen bundles by train popularity.
pub fn popularity_report(ds: &InteractionDataset, split: Split, n_list: &[usize]) -> Result<EvalReport> {
    let pop: Vec<f64> = bundle_popularity(ds).into_iter().map(|p| p as f64).collect();
    let max_n = n_list.iter().copied().max().unwrap_or(0);
    let r = rank_with(ds, split, max_n, true, |_| pop.clone());
    report_from_rankings(ds, split, &r, n_list)
}

/// Expected Recall@n of a uniformly random ranking of each user's unmasked bundles.
pub fn random_expected_recall(ds: &InteractionDataset, split: Split, n: usize) -> Result<Ratio<u64>> {
    let gt = ground_truth(ds, split);
    if gt.is_empty() {
        return Err(Error::InvalidSpec("no users to evaluate".into()));
    }
    let seen = seen_bundles(ds, split);
    let nb = ds.counts.num_bundles as u64;
    let mut acc = Ratio::<u64>::zero();
    for (u, _) in &gt {
        let pool = nb - seen[*u].len() as u64;
        let r = Ratio::new((n as u64).min(pool), pool);
        acc = acc
            .checked_add(&r)
            .ok_or_else(|| Error::NumericOverflow("random recall sum".into()))?;
    }
    Ok(acc / Ratio::from_integer(gt.len() as u64))
}

/// Sample statistics of a score under `T` Gaussian draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UncertainPrediction {
    pub mean_score: f64,
    pub variance_score: f64,
    pub t_used: usize,
}

/// Mean and unbiased variance of `samples`; variance 0 for a single sample.
pub fn aggregate_samples(samples: &[f64]) -> Result<UncertainPrediction> {
    if samples.is_empty() {
        return Err(Error::EmptySampleList);
    }
    let t = samples.len();
    let mean = samples.iter().sum::<f64>() / t as f64;
    let var = if t < 2 {
        0.0
    } else {
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (t - 1) as f64
    };
    Ok(UncertainPrediction {
        mean_score: mean,
        variance_score: var.max(0.0),
        t_used: t,
    })
}

/// Scores every `(user, bundle)` pair under `t` independent noise draws.
pub fn predict_uncertain_pairs<T: Scalar>(
    model: &GpclModel<T>,
    graphs: &ModelGraphs<T>,
    cfg: &ModelConfig,
    pairs: &[(usize, usize)],
    t: usize,
    seed: u64,
) -> Result<Vec<UncertainPrediction>> {
    if t == 0 {
        return Err(Error::EmptySampleList);
    }
    let nu = model.params[crate::model::USER_MEAN].values.rows();
    let nb = model.params[crate::model::BUNDLE_MEAN].values.rows();
    for &(u, b) in pairs {
        if u >= nu {
            return Err(Error::IdOutOfBounds { id: u, bound: nu });
        }
        if b >= nb {
            return Err(Error::IdOutOfBounds { id: b, bound: nb });
        }
    }
    let draws: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|i| {
            let noise = model.noise(seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let v = model.views(graphs, cfg, Some(&noise))?;
            Ok(pairs.iter().map(|&(u, b)| v.score(u, b).as_f64()).collect())
        })
        .collect::<Result<_>>()?;
    (0..pairs.len())
        .map(|p| aggregate_samples(&draws.iter().map(|d| d[p]).collect::<Vec<_>>()))
        .collect()
}

pub fn predict_uncertain<T: Scalar>(
    model: &GpclModel<T>,
    graphs: &ModelGraphs<T>,
    cfg: &ModelConfig,
    user: usize,
    bundle: usize,
    t: usize,
    seed: u64,
) -> Result<UncertainPrediction> {
    Ok(predict_uncertain_pairs(model, graphs, cfg, &[(user, bundle)], t, seed)?[0])
}

/// Inclusive frequency range; `hi = None` is open-ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreqBucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl FreqBucket {
    pub fn contains(&self, f: usize) -> bool {
        f >= self.lo && self.hi.is_none_or(|h| f <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("{}-{}", self.lo, h),
            None => format!("{}-", self.lo),
        }
    }
}

/// Parses `1-10,11-30,31-50,51-`.
pub fn parse_buckets(text: &str) -> Result<Vec<FreqBucket>> {
    let bad = || Error::Config(format!("bad bucket list '{text}'"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = part.split_once('-').ok_or_else(bad)?;
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi = match hi.trim() {
            "" => None,
            h => Some(h.parse::<usize>().map_err(|_| bad())?),
        };
        if hi.is_some_and(|h| h < lo) {
            return Err(bad());
        }
        out.push(FreqBucket { lo, hi });
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketRow {
    pub bucket: String,
    pub nodes: usize,
    pub mean_uncertainty: f64,
}

/// Train-split user-bundle interaction count per node.
pub fn train_frequency(ds: &InteractionDataset, family: Family) -> Vec<usize> {
    match family {
        Family::Users => {
            let mut f = vec![0; ds.counts.num_users];
            for &(u, _) in &ds.ub_train.pairs {
                f[u] += 1;
            }
            f
        }
        Family::Bundles => bundle_popularity(ds),
    }
}

/// Mean uncertainty score per frequency bucket; empty buckets are omitted.
pub fn uncertainty_report<T: Scalar>(
    model: &GpclModel<T>,
    ds: &InteractionDataset,
    family: Family,
    buckets: &[FreqBucket],
) -> Vec<BucketRow> {
    let table = model.family(family);
    let freq = train_frequency(ds, family);
    let scores: Vec<f64> = (0..table.rows()).map(|n| uncertainty_score(&table, n).as_f64()).collect();
    buckets
        .iter()
        .filter_map(|b| {
            let members: Vec<f64> = freq
                .iter()
                .zip(&scores)
                .filter(|(f, _)| b.contains(**f))
                .map(|(_, s)| *s)
                .collect();
            (!members.is_empty()).then(|| BucketRow {
                bucket: b.label(),
                nodes: members.len(),
                mean_uncertainty: members.iter().sum::<f64>() / members.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        let s = [0.1, 0.9, 0.5];
        assert_eq!(top_n(&s, &[], 2).0, vec![1, 2]);
        assert_eq!(top_n(&s, &[1], 2).0, vec![2, 0]);
        assert_eq!(top_n(&[0.3; 4], &[], 3).0, vec![0, 1, 2]);
        assert_eq!(top_n(&s, &[0, 1, 2], 2).0, Vec::<usize>::new());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(recall_user(&[4, 5, 1], &[1], 20).unwrap(), Ratio::from_integer(1));
        assert_eq!(recall_user(&[4, 5], &[1], 20).unwrap(), Ratio::zero());
        assert_eq!(recall_user(&[1, 5], &[1, 9], 20).unwrap(), Ratio::new(1, 2));
        assert_eq!(ndcg_user(&[1, 2], &[1], 5).unwrap(), 1.0);
        assert_eq!(ndcg_user(&[7, 8, 1], &[1], 5).unwrap(), 0.5);
        assert_eq!(ndcg_user(&[7, 8], &[1], 5).unwrap(), 0.0);
        assert!(matches!(recall_user(&[1], &[], 5), Err(Error::EmptyGroundTruth(_))));
        assert!(matches!(
            ndcg_at_n(&[vec![1], vec![2]], &[vec![1], vec![]], 5),
            Err(Error::EmptyGroundTruth(1))
        ));
    }

    #[test]
    fn aggregation_conventions() {
        let p = aggregate_samples(&[2.5]).unwrap();
        assert_eq!((p.mean_score, p.variance_score, p.t_used), (2.5, 0.0, 1));
        let p = aggregate_samples(&[1.0, 3.0]).unwrap();
        assert_eq!((p.mean_score, p.variance_score), (2.0, 2.0));
    }

    #[test]
    fn buckets_parse() {
        let b = parse_buckets("1-10,11-30,31-50,51-").unwrap();
        assert_eq!(b.len(), 4);
        assert!(b[3].contains(1000) && !b[0].contains(0) && b[0].contains(10));
        assert_eq!(b[3].label(), "51-");
        assert!(parse_buckets("5-2").is_err());
        assert!(parse_buckets("x").is_err());
    }
}
