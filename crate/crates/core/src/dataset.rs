//! Relation tables, dataset directories, statistics, BPR triple sampling and
//! the planted-cluster synthetic generator.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SIZE_FILE: &str = "data_size.txt";
pub const UB_TRAIN_FILE: &str = "user_bundle_train.txt";
pub const UB_TUNE_FILE: &str = "user_bundle_tune.txt";
pub const UB_TEST_FILE: &str = "user_bundle_test.txt";
pub const UI_FILE: &str = "user_item.txt";
pub const BI_FILE: &str = "bundle_item.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntityCounts {
    pub num_users: usize,
    pub num_bundles: usize,
    pub num_items: usize,
}

impl EntityCounts {
    pub fn new(num_users: usize, num_bundles: usize, num_items: usize) -> Result<Self> {
        if num_users == 0 || num_bundles == 0 || num_items == 0 {
            return Err(Error::InvalidSpec(format!(
                "entity counts must be positive, got {num_users} {num_bundles} {num_items}"
            )));
        }
        Ok(Self {
            num_users,
            num_bundles,
            num_items,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationKind {
    UserBundle,
    UserItem,
    BundleItem,
}

impl RelationKind {
    /// `(left, right)` entity counts for this relation.
    pub fn bounds(self, c: &EntityCounts) -> (usize, usize) {
        match self {
            Self::UserBundle => (c.num_users, c.num_bundles),
            Self::UserItem => (c.num_users, c.num_items),
            Self::BundleItem => (c.num_bundles, c.num_items),
        }
    }
}

/// Binary relation stored as its list of present `(left, right)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationTable {
    pub kind: RelationKind,
    pub pairs: Vec<(usize, usize)>,
}

impl RelationTable {
    pub fn new(kind: RelationKind, pairs: Vec<(usize, usize)>) -> Self {
        Self { kind, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Right-side neighbours of every left node, ascending.
    pub fn adjacency(&self, left_count: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); left_count];
        for &(l, r) in &self.pairs {
            adj[l].push(r);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    fn validate(&self, counts: &EntityCounts, file: &str) -> Result<()> {
        let (lb, rb) = self.kind.bounds(counts);
        let mut seen = HashSet::with_capacity(self.pairs.len());
        for (i, &(l, r)) in self.pairs.iter().enumerate() {
            if l >= lb || r >= rb {
                return Err(Error::IdOutOfRange {
                    file: file.to_string(),
                    line: i + 1,
                });
            }
            if !seen.insert((l, r)) {
                return Err(Error::DuplicatePair {
                    file: file.to_string(),
                    line: i + 1,
                    left: l,
                    right: r,
                });
            }
        }
        Ok(())
    }
}

/// The three relation tables plus the user-bundle split.
#[derive(Clone, Debug)]
pub struct InteractionDataset {
    pub counts: EntityCounts,
    pub ub_train: RelationTable,
    pub ub_tune: RelationTable,
    pub ub_test: RelationTable,
    pub ui: RelationTable,
    pub bi: RelationTable,
    train_by_user: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Validates bounds, duplicates and split disjointness.
    pub fn new(
        counts: EntityCounts,
        ub_train: Vec<(usize, usize)>,
        ub_tune: Vec<(usize, usize)>,
        ub_test: Vec<(usize, usize)>,
        ui: Vec<(usize, usize)>,
        bi: Vec<(usize, usize)>,
    ) -> Result<Self> {
        use RelationKind::*;
        let ds = Self {
            counts,
            ub_train: RelationTable::new(UserBundle, ub_train),
            ub_tune: RelationTable::new(UserBundle, ub_tune),
            ub_test: RelationTable::new(UserBundle, ub_test),
            ui: RelationTable::new(UserItem, ui),
            bi: RelationTable::new(BundleItem, bi),
            train_by_user: Vec::new(),
        };
        ds.ub_train.validate(&counts, UB_TRAIN_FILE)?;
        ds.ub_tune.validate(&counts, UB_TUNE_FILE)?;
        ds.ub_test.validate(&counts, UB_TEST_FILE)?;
        ds.ui.validate(&counts, UI_FILE)?;
        ds.bi.validate(&counts, BI_FILE)?;
        let splits = [
            ("train", &ds.ub_train),
            ("tune", &ds.ub_tune),
            ("test", &ds.ub_test),
        ];
        for i in 0..splits.len() {
            let set: HashSet<_> = splits[i].1.pairs.iter().copied().collect();
            for (second, table) in &splits[i + 1..] {
                if let Some(&(u, b)) = table.pairs.iter().find(|p| set.contains(p)) {
                    return Err(Error::OverlappingSplits {
                        user: u,
                        bundle: b,
                        first: splits[i].0,
                        second,
                    });
                }
            }
        }
        let train_by_user = ds.ub_train.adjacency(counts.num_users);
        Ok(Self { train_by_user, ..ds })
    }

    /// Training bundles of `user`, ascending.
    pub fn train_bundles(&self, user: usize) -> &[usize] {
        &self.train_by_user[user]
    }

    pub fn split(&self, split: Split) -> &RelationTable {
        match split {
            Split::Train => &self.ub_train,
            Split::Tune => &self.ub_tune,
            Split::Test => &self.ub_test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Tune,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Tune => "tune",
            Split::Test => "test",
        })
    }
}

fn parse_line(text: &str, file: &str, line: usize, arity: usize) -> Result<Vec<usize>> {
    let fields: Vec<&str> = text.split('\t').map(str::trim).collect();
    if fields.len() != arity {
        return Err(Error::MalformedLine {
            file: file.to_string(),
            line,
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<usize>().map_err(|_| Error::MalformedLine {
                file: file.to_string(),
                line,
            })
        })
        .collect()
}

fn read_file(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(Error::MissingFile(p));
    }
    Ok(fs::read_to_string(p)?)
}

fn read_pairs(
    dir: &Path,
    name: &str,
    kind: RelationKind,
    counts: &EntityCounts,
) -> Result<Vec<(usize, usize)>> {
    let text = read_file(dir, name)?;
    let (lb, rb) = kind.bounds(counts);
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let v = parse_line(l, name, i + 1, 2)?;
        let (a, b) = (v[0], v[1]);
        if a >= lb || b >= rb {
            return Err(Error::IdOutOfRange {
                file: name.to_string(),
                line: i + 1,
            });
        }
        if !seen.insert((a, b)) {
            return Err(Error::DuplicatePair {
                file: name.to_string(),
                line: i + 1,
                left: a,
                right: b,
            });
        }
        pairs.push((a, b));
    }
    Ok(pairs)
}

/// Reads a dataset directory (size file plus five relation files).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<InteractionDataset> {
    let dir = dir.as_ref();
    let size = read_file(dir, SIZE_FILE)?;
    let first = size.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let v = parse_line(first, SIZE_FILE, 1, 3)?;
    let counts = EntityCounts::new(v[0], v[1], v[2])?;
    use RelationKind::*;
    InteractionDataset::new(
        counts,
        read_pairs(dir, UB_TRAIN_FILE, UserBundle, &counts)?,
        read_pairs(dir, UB_TUNE_FILE, UserBundle, &counts)?,
        read_pairs(dir, UB_TEST_FILE, UserBundle, &counts)?,
        read_pairs(dir, UI_FILE, UserItem, &counts)?,
        read_pairs(dir, BI_FILE, BundleItem, &counts)?,
    )
}

/// Writes the directory layout read by [`load_dataset`], pairs sorted ascending.
pub fn write_dataset(ds: &InteractionDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let c = ds.counts;
    fs::write(
        dir.join(SIZE_FILE),
        format!("{}\t{}\t{}\n", c.num_users, c.num_bundles, c.num_items),
    )?;
    for (name, table) in [
        (UB_TRAIN_FILE, &ds.ub_train),
        (UB_TUNE_FILE, &ds.ub_tune),
        (UB_TEST_FILE, &ds.ub_test),
        (UI_FILE, &ds.ui),
        (BI_FILE, &ds.bi),
    ] {
        let mut pairs = table.pairs.clone();
        pairs.sort_unstable();
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(name))?);
        for (a, b) in pairs {
            writeln!(f, "{a}\t{b}")?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Exact ratios over raw table sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub num_users: u64,
    pub num_bundles: u64,
    pub num_items: u64,
    pub user_item: u64,
    pub user_bundle: u64,
    pub bundle_item: u64,
    pub avg_item_interactions: Ratio<u64>,
    pub avg_bundle_interactions: Ratio<u64>,
    pub avg_bundle_size: Ratio<u64>,
}

impl DatasetStats {
    pub fn from_counts(
        num_users: u64,
        num_bundles: u64,
        num_items: u64,
        user_item: u64,
        user_bundle: u64,
        bundle_item: u64,
    ) -> Self {
        Self {
            num_users,
            num_bundles,
            num_items,
            user_item,
            user_bundle,
            bundle_item,
            avg_item_interactions: Ratio::new(user_item, num_users),
            avg_bundle_interactions: Ratio::new(user_bundle, num_users),
            avg_bundle_size: Ratio::new(bundle_item, num_bundles),
        }
    }

    /// Rows in the layout of the usual dataset statistics table.
    pub fn table_rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("|User|", self.num_users.to_string()),
            ("|Bundle|", self.num_bundles.to_string()),
            ("|Item|", self.num_items.to_string()),
            ("|User-Item|", self.user_item.to_string()),
            ("|User-Bundle|", self.user_bundle.to_string()),
            ("|Bundle-Item|", self.bundle_item.to_string()),
            ("Avg item interactions", fixed2(self.avg_item_interactions)),
            ("Avg bundle interactions", fixed2(self.avg_bundle_interactions)),
            ("Avg bundle size", fixed2(self.avg_bundle_size)),
        ]
    }
}

/// Rounds a non-negative ratio half-up to two decimals using integer arithmetic.
pub fn fixed2(r: Ratio<u64>) -> String {
    let (n, d) = (*r.numer() as u128, *r.denom() as u128);
    let hundredths = (n * 200 + d) / (2 * d);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// User-bundle interactions counted over all three splits.
pub fn compute_stats(ds: &InteractionDataset) -> DatasetStats {
    let c = ds.counts;
    let ub = ds.ub_train.len() + ds.ub_tune.len() + ds.ub_test.len();
    DatasetStats::from_counts(
        c.num_users as u64,
        c.num_bundles as u64,
        c.num_items as u64,
        ds.ui.len() as u64,
        ub as u64,
        ds.bi.len() as u64,
    )
}

/// BPR triples `(user, positive bundle, negative bundle)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainBatch {
    pub triples: Vec<(usize, usize, usize)>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn users(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.0).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.1).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.2).collect()
    }
}

/// Uniform draw from `{0..n} \ excluded` where `excluded` is sorted ascending.
fn sample_complement<R: Rng>(rng: &mut R, n: usize, excluded: &[usize]) -> Option<usize> {
    let free = n - excluded.len();
    if free == 0 {
        return None;
    }
    let mut k = rng.random_range(0..free);
    // k-th free id: skip every excluded id at or below the running candidate
    for &e in excluded {
        if e <= k {
            k += 1;
        } else {
            break;
        }
    }
    Some(k)
}

/// Draws `batch_size` positives uniformly (with replacement) from the train
/// split, each paired with a uniform negative from the user's non-interacted bundles.
pub fn sample_batch<R: Rng>(
    ds: &InteractionDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    let pairs = &ds.ub_train.pairs;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut triples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (u, b) = pairs[rng.random_range(0..pairs.len())];
        let neg = sample_complement(rng, ds.counts.num_bundles, ds.train_bundles(u))
            .ok_or(Error::NoNegativeAvailable(u))?;
        triples.push((u, b, neg));
    }
    Ok(TrainBatch { triples })
}

/// Parameters of the planted-cluster generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_clusters: usize,
    pub users_per_cluster: usize,
    pub bundles_per_cluster: usize,
    pub items_per_cluster: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn user_cluster(&self, u: usize) -> usize {
        u / self.users_per_cluster
    }

    pub fn bundle_cluster(&self, b: usize) -> usize {
        b / self.bundles_per_cluster
    }

    pub fn item_cluster(&self, i: usize) -> usize {
        i / self.items_per_cluster
    }

    fn validate(&self) -> Result<()> {
        if self.num_clusters == 0
            || self.users_per_cluster == 0
            || self.bundles_per_cluster == 0
            || self.items_per_cluster == 0
        {
            return Err(Error::InvalidSpec("all counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidSpec(format!(
                "noise_rate {} outside [0, 1)",
                self.noise_rate
            )));
        }
        if self.num_clusters == 1 && self.noise_rate > 0.0 {
            return Err(Error::InvalidSpec(
                "cross-cluster noise needs at least two clusters".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted sampling without replacement of `k` entries of `pool`.
fn weighted_subset<R: Rng>(rng: &mut R, pool: &[usize], weights: &[f64], k: usize) -> Vec<usize> {
    let mut pool: Vec<(usize, f64)> = pool.iter().copied().zip(weights.iter().copied()).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !pool.is_empty() {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let mut x = rng.random::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (j, p) in pool.iter().enumerate() {
            if x < p.1 {
                pick = j;
                break;
            }
            x -= p.1;
        }
        out.push(pool.swap_remove(pick).0);
    }
    out
}

/// Adds `count` distinct cross-cluster edges not already in `existing`.
fn add_noise_edges<R: Rng>(
    rng: &mut R,
    count: usize,
    left: usize,
    right: usize,
    left_cluster: impl Fn(usize) -> usize,
    right_cluster: impl Fn(usize) -> usize,
    existing: &mut HashSet<(usize, usize)>,
) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count && attempts < count * 1000 + 1000 {
        attempts += 1;
        let l = rng.random_range(0..left);
        let r = rng.random_range(0..right);
        if left_cluster(l) != right_cluster(r) && existing.insert((l, r)) {
            out.push((l, r));
        }
    }
    out
}

/// Planted block-structured dataset.
///
/// Users of cluster `c` interact with bundles and items of cluster `c`; each
/// bundle holds items of its own cluster. Bundle popularity inside a cluster
/// decays as `1/sqrt(rank)` and per-user activity varies, so node frequencies
/// are heterogeneous. `noise_rate` adds that fraction of extra cross-cluster
/// user-bundle and user-item edges. Each user's bundles are split 70/10/20 into
/// train/tune/test (at least one test bundle once the user has two or more).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<InteractionDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, upc, bpc, ipc) = (
        spec.num_clusters,
        spec.users_per_cluster,
        spec.bundles_per_cluster,
        spec.items_per_cluster,
    );
    let counts = EntityCounts::new(c * upc, c * bpc, c * ipc)?;

    let mut bi = Vec::new();
    let bundle_size_max = (ipc / 4).max(2).min(ipc);
    for b in 0..counts.num_bundles {
        let cl = spec.bundle_cluster(b);
        let size = rng.random_range(bundle_size_max.min(2)..=bundle_size_max);
        let mut items: Vec<usize> = (cl * ipc..(cl + 1) * ipc).collect();
        items.shuffle(&mut rng);
        bi.extend(items[..size].iter().map(|&i| (b, i)));
    }

    let bundle_weights: Vec<f64> = (0..bpc).map(|j| 1.0 / ((j + 1) as f64).sqrt()).collect();
    let max_bundles = ((bpc as f64 * 0.7).ceil() as usize).clamp(1, bpc);
    let min_bundles = 2.min(max_bundles);
    let max_items = (ipc / 3).max(1);
    let min_items = (ipc / 10).clamp(1, max_items);

    let mut ub = HashSet::new();
    let mut ui = HashSet::new();
    for u in 0..counts.num_users {
        let cl = spec.user_cluster(u);
        let k = rng.random_range(min_bundles..=max_bundles);
        let pool: Vec<usize> = (cl * bpc..(cl + 1) * bpc).collect();
        for b in weighted_subset(&mut rng, &pool, &bundle_weights, k) {
            ub.insert((u, b));
        }
        let ki = rng.random_range(min_items..=max_items);
        let mut items: Vec<usize> = (cl * ipc..(cl + 1) * ipc).collect();
        items.shuffle(&mut rng);
        ui.extend(items[..ki].iter().map(|&i| (u, i)));
    }
    let ub_noise = (spec.noise_rate * ub.len() as f64).round() as usize;
    let ui_noise = (spec.noise_rate * ui.len() as f64).round() as usize;
    add_noise_edges(
        &mut rng,
        ub_noise,
        counts.num_users,
        counts.num_bundles,
        |u| spec.user_cluster(u),
        |b| spec.bundle_cluster(b),
        &mut ub,
    );
    add_noise_edges(
        &mut rng,
        ui_noise,
        counts.num_users,
        counts.num_items,
        |u| spec.user_cluster(u),
        |i| spec.item_cluster(i),
        &mut ui,
    );

    let mut by_user = vec![Vec::new(); counts.num_users];
    for &(u, b) in &ub {
        by_user[u].push(b);
    }
    let (mut train, mut tune, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (u, bundles) in by_user.iter_mut().enumerate() {
        bundles.sort_unstable();
        bundles.shuffle(&mut rng);
        let (n_test, n_tune) = split_sizes(bundles.len());
        for (j, &b) in bundles.iter().enumerate() {
            if j < n_test {
                test.push((u, b));
            } else if j < n_test + n_tune {
                tune.push((u, b));
            } else {
                train.push((u, b));
            }
        }
    }
    let mut ui: Vec<_> = ui.into_iter().collect();
    ui.sort_unstable();
    bi.sort_unstable();
    InteractionDataset::new(counts, train, tune, test, ui, bi)
}

/// `(test, tune)` counts for a user with `k` interactions; train gets the rest.
pub fn split_sizes(k: usize) -> (usize, usize) {
    if k < 2 {
        return (0, 0);
    }
    let n_test = ((0.2 * k as f64).round() as usize).max(1);
    let n_tune = (0.1 * k as f64).round() as usize;
    let n_tune = if k - n_test > n_tune { n_tune } else { 0 };
    (n_test, n_tune)
}
