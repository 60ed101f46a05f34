use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpcl_core::config::{parse_override, RunConfig};
use gpcl_core::dataset::{compute_stats, generate_synthetic, load_dataset, write_dataset, DatasetStats, InteractionDataset, Split};
use gpcl_core::eval::{evaluate, parse_buckets, popularity_report, predict_uncertain, random_expected_recall, uncertainty_report};
use gpcl_core::model::{Family, ModelGraphs};
use gpcl_core::trainer::{gradcheck, load_checkpoint, micro_config, micro_dataset, save_checkpoint, train_from, TrainConfig};
use gpcl_core::Error;

#[derive(Parser)]
#[command(name = "gpcl", version, about = "Bundle recommendation with Gaussian embeddings and prototype contrast")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set trainer.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints and logs.
    Train {
        /// Independent runs with seeds seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Recall/NDCG of a checkpoint on tune and test.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also print popularity and random-ranker references on test.
        #[arg(long)]
        baselines: bool,
    },
    /// Scores for one user: top bundles, or one bundle with sampled uncertainty.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: usize,
        #[arg(long)]
        bundle: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Dataset statistics table.
    Stats {
        /// Raw counts `users,bundles,items,user_item,user_bundle,bundle_item` instead of a dataset.
        #[arg(long)]
        counts: Option<String>,
    },
    /// Write the configured synthetic dataset to `--out`.
    Synth,
    /// Finite-difference check of the full loss on the micro-instance.
    Gradcheck,
    /// Mean uncertainty per interaction-frequency bucket.
    Uncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every cell of a grid and tabulate test metrics.
    Sweep {
        /// `key=v1,v2,...`; repeatable, cells are the cartesian product.
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidSpec(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

/// Writes every line to stdout and to the run log.
struct Log {
    file: Option<fs::File>,
}

impl Log {
    fn open(path: Option<&Path>) -> Res<Self> {
        let file = match path {
            Some(p) => Some(fs::File::create(p)?),
            None => None,
        };
        Ok(Self { file })
    }

    fn line(&mut self, s: &str) -> Res<()> {
        println!("{s}");
        if let Some(f) = &mut self.file {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

fn resolve(g: &Global, extra: &[(String, String)]) -> Res<RunConfig> {
    let text = match &g.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut overrides = Vec::new();
    for s in &g.set {
        overrides.push(parse_override(s)?);
    }
    if let Some(seed) = g.seed {
        overrides.push(("trainer.seed".into(), seed.to_string()));
    }
    overrides.extend_from_slice(extra);
    Ok(RunConfig::resolve(text.as_deref(), &overrides)?)
}

fn dataset(cfg: &RunConfig) -> Res<InteractionDataset> {
    Ok(if cfg.data.dir.is_empty() {
        generate_synthetic(&cfg.data.synth)?
    } else {
        load_dataset(&cfg.data.dir)?
    })
}

fn stats_table(s: &DatasetStats) -> String {
    s.table_rows().into_iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

/// Trains one run, writing `train.log`, `checkpoint.gpcl` and `best.gpcl` under `dir`.
fn run_training(cfg: &RunConfig, ds: &InteractionDataset, dir: &Path, quiet: bool) -> Res<gpcl_core::eval::EvalReport> {
    fs::create_dir_all(dir)?;
    let mut log = Log::open(Some(&dir.join("train.log")))?;
    let emit = |log: &mut Log, s: &str| -> Res<()> {
        if quiet {
            if let Some(f) = &mut log.file {
                writeln!(f, "{s}")?;
            }
            Ok(())
        } else {
            log.line(s)
        }
    };
    emit(&mut log, &cfg.one_line())?;
    let tc = &cfg.train;
    let state = TrainState::init(&ds.counts, tc)?;
    let mut lines: Vec<String> = Vec::new();
    let mut step = 0usize;
    let outcome = train_from(state, ds, tc, |e| {
        let mut s = serde_json::json!({
            "epoch": e.epoch,
            "l_bpr": e.loss.l_bpr,
            "l_cl": e.loss.l_cl,
            "l_proto": e.loss.l_proto,
            "l_ot": e.loss.l_ot,
            "total": e.loss.total,
        });
        if let Some(r) = &e.tune {
            s["tune"] = serde_json::from_str(&r.json_line()).unwrap_or_default();
        }
        lines.push(s.to_string());
    });
    let outcome = outcome?;
    let steps_per_epoch = tc.steps_for(ds);
    for (i, l) in lines.iter().enumerate() {
        for b in outcome.steps.iter().skip(i * steps_per_epoch).take(steps_per_epoch) {
            step += 1;
            emit(
                &mut log,
                &format!(
                    "step {step}\tl_bpr={}\tl_cl={}\tl_proto={}\tl_ot={}\ttotal={}",
                    b.l_bpr, b.l_cl, b.l_proto, b.l_ot, b.total
                ),
            )?;
        }
        emit(&mut log, l)?;
    }
    save_checkpoint(&outcome.state, tc, dir.join("checkpoint.gpcl"))?;
    let mut best_state = outcome.state.clone();
    best_state.model = outcome.selected_model().clone();
    save_checkpoint(&best_state, tc, dir.join("best.gpcl"))?;
    let graphs = ModelGraphs::build(ds);
    let mut n_list = cfg.eval.n_list.clone();
    if !n_list.contains(&tc.eval_n) {
        n_list.push(tc.eval_n);
    }
    let report = evaluate(outcome.selected_model(), &graphs, &tc.model, ds, Split::Test, &n_list)?;
    for l in report.lines().lines() {
        emit(&mut log, &format!("test\t{l}"))?;
    }
    emit(&mut log, &report.json_line())?;
    Ok(report)
}

fn cmd_train(g: &Global, repeats: usize) -> Res<()> {
    if repeats == 0 {
        return Err(Failure::Usage("--repeats must be positive".into()));
    }
    let base = resolve(g, &[])?;
    let ds = dataset(&base)?;
    if repeats == 1 {
        run_training(&base, &ds, &g.out, false)?;
        return Ok(());
    }
    let mut reports = Vec::new();
    for r in 0..repeats {
        let mut cfg = base.clone();
        cfg.train.seed = base.train.seed + r as u64;
        let dir = g.out.join(format!("run{r}"));
        let rep = run_training(&cfg, &ds, &dir, true)?;
        println!("run {r}\tseed {}\t{}", cfg.train.seed, rep.json_line());
        reports.push(rep);
    }
    let n_list = &reports[0].n_list;
    for (i, n) in n_list.iter().enumerate() {
        let (m, s) = mean_std(&reports.iter().map(|r| r.recall[i]).collect::<Vec<_>>());
        println!("recall@{n}\t{m:.6} ± {s:.6}");
    }
    for (i, n) in n_list.iter().enumerate() {
        let (m, s) = mean_std(&reports.iter().map(|r| r.ndcg[i]).collect::<Vec<_>>());
        println!("ndcg@{n}\t{m:.6} ± {s:.6}");
    }
    Ok(())
}

/// Loads a checkpoint; data and eval settings come from the run config.
fn load(g: &Global, path: &Path) -> Res<(RunConfig, TrainState, InteractionDataset)> {
    let (tc, state): (TrainConfig, TrainState) = load_checkpoint(path)?;
    let mut cfg = resolve(g, &[])?;
    cfg.train = tc;
    let ds = dataset(&cfg)?;
    gpcl_core::trainer::check_compatible(&state, &cfg.train, Some(&ds.counts))?;
    Ok((cfg, state, ds))
}

type TrainState = gpcl_core::TrainState;

fn cmd_eval(g: &Global, ckpt: &Path, baselines: bool) -> Res<()> {
    let (cfg, state, ds) = load(g, ckpt)?;
    let graphs = ModelGraphs::build(&ds);
    let mut json = Vec::new();
    for split in [Split::Tune, Split::Test] {
        if ds.split(split).is_empty() {
            continue;
        }
        let r = evaluate(&state.model, &graphs, &cfg.train.model, &ds, split, &cfg.eval.n_list)?;
        println!("# {split}");
        print!("{}", r.lines());
        json.push(r.json_line());
    }
    fs::create_dir_all(&g.out)?;
    fs::write(g.out.join("metrics.jsonl"), json.join("\n") + "\n")?;
    for j in json {
        println!("{j}");
    }
    if baselines {
        print_baselines(&ds, &cfg.eval.n_list)?;
    }
    Ok(())
}

fn cmd_predict(g: &Global, ckpt: &Path, user: usize, bundle: Option<usize>, top: usize) -> Res<()> {
    let (cfg, state, ds) = load(g, ckpt)?;
    let graphs = ModelGraphs::build(&ds);
    let m = &cfg.train.model;
    if user >= ds.counts.num_users {
        return Err(Failure::Usage(format!("user {user} out of range")));
    }
    match bundle {
        Some(b) => {
            if b >= ds.counts.num_bundles {
                return Err(Failure::Usage(format!("bundle {b} out of range")));
            }
            let p = predict_uncertain(&state.model, &graphs, m, user, b, cfg.eval.samples, cfg.train.seed)?;
            let v = state.model.views(&graphs, m, None)?;
            println!("user\t{user}\nbundle\t{b}\nscore\t{}", v.score(user, b));
            println!("mean_score\t{}\nvariance_score\t{}\nT_used\t{}", p.mean_score, p.variance_score, p.t_used);
        }
        None => {
            let v = state.model.views(&graphs, m, None)?;
            let seen = ds.train_bundles(user);
            let scores: Vec<f64> = (0..ds.counts.num_bundles).map(|b| v.score(user, b)).collect();
            let (ids, sc) = gpcl_core::eval::top_n(&scores, seen, top);
            for (b, s) in ids.iter().zip(sc) {
                println!("{b}\t{s}");
            }
        }
    }
    Ok(())
}

fn cmd_stats(g: &Global, counts: Option<&str>) -> Res<()> {
    let s = match counts {
        Some(c) => {
            let v: Vec<u64> = c
                .split(',')
                .map(|x| x.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|_| Failure::Usage(format!("bad --counts '{c}'")))?;
            if v.len() != 6 || v[0] == 0 || v[1] == 0 {
                return Err(Failure::Usage("--counts needs six values with positive user and bundle counts".into()));
            }
            DatasetStats::from_counts(v[0], v[1], v[2], v[3], v[4], v[5])
        }
        None => compute_stats(&dataset(&resolve(g, &[])?)?),
    };
    print!("{}", stats_table(&s));
    Ok(())
}

fn cmd_synth(g: &Global) -> Res<()> {
    let cfg = resolve(g, &[])?;
    let ds = generate_synthetic(&cfg.data.synth)?;
    write_dataset(&ds, &g.out)?;
    print!("{}", stats_table(&compute_stats(&ds)));
    Ok(())
}

fn cmd_gradcheck(g: &Global) -> Res<()> {
    let mut cfg = micro_config();
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let r = gradcheck(&micro_dataset(), &cfg, 1e-5)?;
    for (name, e) in &r.per_param {
        println!("{name}\t{e:.3e}");
    }
    println!("entries\t{}", r.entries);
    println!("max_rel_err\t{:.3e}", r.max_rel_err);
    if r.max_rel_err < 1e-4 {
        println!("max rel err < 1e-4: PASS");
        Ok(())
    } else {
        println!("max rel err < 1e-4: FAIL");
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn cmd_uncertainty(g: &Global, ckpt: &Path) -> Res<()> {
    let (cfg, state, ds) = load(g, ckpt)?;
    let buckets = parse_buckets(&cfg.eval.buckets)?;
    for (name, fam) in [("users", Family::Users), ("bundles", Family::Bundles)] {
        println!("# {name}");
        println!("bucket\tnodes\tmean_uncertainty");
        for row in uncertainty_report(&state.model, &ds, fam, &buckets) {
            println!("{}\t{}\t{:.6e}", row.bucket, row.nodes, row.mean_uncertainty);
        }
    }
    Ok(())
}

fn cmd_sweep(g: &Global, grid: &[String]) -> Res<()> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for spec in grid {
        let (k, vs) = parse_override(spec)?;
        let vals: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if vals.is_empty() {
            return Err(Failure::Usage(format!("empty grid axis '{spec}'")));
        }
        axes.push((k, vals));
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vals) in &axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let configs: Vec<RunConfig> = cells.iter().map(|c| resolve(g, c)).collect::<Res<_>>()?;
    let ds = dataset(&configs[0])?;
    let n_list = configs[0].eval.n_list.clone();
    let header: Vec<String> = axes
        .iter()
        .map(|a| a.0.clone())
        .chain(n_list.iter().map(|n| format!("recall@{n}")))
        .chain(n_list.iter().map(|n| format!("ndcg@{n}")))
        .collect();
    println!("{}", header.join("\t"));
    for (i, (cell, cfg)) in cells.iter().zip(&configs).enumerate() {
        let r = run_training(cfg, &ds, &g.out.join(format!("cell{i}")), true)?;
        let row: Vec<String> = cell
            .iter()
            .map(|(_, v)| v.clone())
            .chain(n_list.iter().map(|&n| format!("{:.6}", r.recall_at(n).unwrap_or(f64::NAN))))
            .chain(n_list.iter().map(|&n| format!("{:.6}", r.ndcg_at(n).unwrap_or(f64::NAN))))
            .collect();
        println!("{}", row.join("\t"));
    }
    Ok(())
}

fn print_baselines(ds: &InteractionDataset, n_list: &[usize]) -> Res<()> {
    let pop = popularity_report(ds, Split::Test, n_list)?;
    println!("# popularity test");
    print!("{}", pop.lines());
    println!("# random test");
    for &n in n_list {
        let r = random_expected_recall(ds, Split::Test, n)?;
        println!("recall@{n}\t{:.6}", *r.numer() as f64 / *r.denom() as f64);
    }
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    let g = &cli.global;
    match &cli.cmd {
        Cmd::Train { repeats } => cmd_train(g, *repeats),
        Cmd::Eval { checkpoint, baselines } => cmd_eval(g, checkpoint, *baselines),
        Cmd::Predict {
            checkpoint,
            user,
            bundle,
            top,
        } => cmd_predict(g, checkpoint, *user, *bundle, *top),
        Cmd::Stats { counts } => cmd_stats(g, counts.as_deref()),
        Cmd::Synth => cmd_synth(g),
        Cmd::Gradcheck => cmd_gradcheck(g),
        Cmd::Uncertainty { checkpoint } => cmd_uncertainty(g, checkpoint),
        Cmd::Sweep { grid } => cmd_sweep(g, grid),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
