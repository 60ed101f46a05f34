//! Adam, the training loop, the finite-difference gradient check and
//! checkpoint I/O.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_train_entries, train_entries};
use crate::dataset::{sample_batch, EntityCounts, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::matrix::Matrix;
use crate::model::{loss_and_gradients, loss_on, GpclModel, ModelConfig, ModelGraphs, Parameter, StepInputs};
use crate::objectives::{LossBreakdown, LossWeights};
use crate::prototypes::{FamilyAssignments, OtConfig};
use crate::scalar::Scalar;
use crate::tape::Tape;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Parameter<T>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.values.rows(), p.values.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update from the populated gradients.
pub fn adam_step<T: Scalar>(params: &mut [Parameter<T>], opt: &mut OptimizerState<T>) {
    opt.step += 1;
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let c1 = T::one() - T::lit(opt.beta1.powi(opt.step as i32));
    let c2 = T::one() - T::lit(opt.beta2.powi(opt.step as i32));
    let (lr, eps) = (T::lit(opt.lr), T::lit(opt.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut opt.m).zip(&mut opt.v) {
        let g = p.gradient.data();
        for (((x, m), v), &g) in p
            .values
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub ot: OtConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Tune-split evaluation period in epochs; 0 disables evaluation.
    pub eval_every: usize,
    /// Cutoff of the early-stopping NDCG.
    pub eval_n: usize,
    /// Evaluations without tune improvement before stopping; 0 disables.
    pub patience: usize,
    /// 0 means `ceil(|train| / batch_size)`.
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            ot: OtConfig::default(),
            epochs: 100,
            batch_size: 2048,
            learning_rate: 1e-4,
            seed: 0,
            eval_every: 1,
            eval_n: 20,
            patience: 20,
            steps_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.ot.validate()?;
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.eval_n == 0 {
            return Err(Error::InvalidSpec("batch_size, learning_rate and eval_n must be positive".into()));
        }
        Ok(())
    }

    /// Gaussian samples per step after ablations.
    pub fn samples(&self) -> usize {
        if self.model.disable_gaussian {
            1
        } else {
            self.loss.samples
        }
    }

    pub fn steps_for(&self, ds: &InteractionDataset) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            ds.ub_train.len().div_ceil(self.batch_size).max(1)
        }
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: GpclModel<T>,
    pub opt: OptimizerState<T>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    /// Assignments reused until the next refresh when `ot.refresh_every > 1`.
    /// Not checkpointed; a resumed run solves afresh on its first step.
    pub assignments: Option<Vec<FamilyAssignments<T>>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(counts: &EntityCounts, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = GpclModel::init(counts, &cfg.model, cfg.seed)?;
        let opt = OptimizerState::new(&model.params, cfg.learning_rate);
        Ok(Self {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E_ED0F_7A41),
            epoch: 0,
            assignments: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    pub tune: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub history: Vec<EpochLog>,
    /// Breakdown of every optimizer step in order.
    pub steps: Vec<LossBreakdown>,
    /// Parameters with the best tune NDCG seen, and that epoch.
    pub best: Option<(usize, GpclModel<T>)>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Best-tune model when evaluation ran, otherwise the final one.
    pub fn selected_model(&self) -> &GpclModel<T> {
        self.best.as_ref().map_or(&self.state.model, |b| &b.1)
    }
}

/// Noise sets for one step, drawn from the trainer RNG.
pub fn draw_step_noise<T: Scalar>(
    model: &GpclModel<T>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<crate::model::SampleNoise<T>>> {
    if cfg.model.disable_gaussian {
        vec![None]
    } else {
        (0..cfg.samples()).map(|_| Some(model.noise(rng.next_u64()))).collect()
    }
}

/// One optimizer step; returns the step's loss breakdown.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    ds: &InteractionDataset,
    graphs: &ModelGraphs<T>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let batch = sample_batch(ds, cfg.batch_size, &mut state.rng)?;
    let step_graphs = graphs.with_edge_dropout(cfg.model.edge_dropout, &mut state.rng);
    let noise = draw_step_noise(&state.model, cfg, &mut state.rng);
    let every = cfg.ot.refresh_every as u64;
    let refresh = every <= 1 || state.opt.step.is_multiple_of(every) || state.assignments.is_none();
    let inputs = StepInputs {
        batch,
        noise,
        frozen: if refresh { None } else { state.assignments.clone() },
    };
    let (b, grads, assigned) = loss_and_gradients(&state.model, &step_graphs, &cfg.model, &cfg.loss, &cfg.ot, &inputs)?;
    if every > 1 && refresh && !cfg.model.disable_proto {
        state.assignments = Some(assigned);
    }
    if !b.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch: state.epoch,
            step: state.opt.step as usize,
            detail: format!("{b:?}"),
        });
    }
    for (p, g) in state.model.params.iter_mut().zip(grads) {
        p.gradient = g;
    }
    adam_step(&mut state.model.params, &mut state.opt);
    for p in &mut state.model.params {
        p.zero_grad();
    }
    Ok(b)
}

/// Runs `cfg.epochs` epochs from a fresh state.
pub fn train<T: Scalar>(ds: &InteractionDataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let state = TrainState::init(&ds.counts, cfg)?;
    train_from(state, ds, cfg, |_| {})
}

/// Continues training `state` until `cfg.epochs` total epochs; `on_epoch` sees each log entry.
pub fn train_from<T: Scalar>(
    mut state: TrainState<T>,
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let graphs = ModelGraphs::build(ds);
    let steps_per_epoch = cfg.steps_for(ds);
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<(usize, GpclModel<T>)> = None;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut stale = 0;
    let can_eval = cfg.eval_every > 0 && !ds.ub_tune.is_empty();
    while state.epoch < cfg.epochs {
        let mut epoch_steps = Vec::with_capacity(steps_per_epoch);
        for _ in 0..steps_per_epoch {
            epoch_steps.push(train_step(&mut state, ds, &graphs, cfg)?);
        }
        state.epoch += 1;
        let loss = LossBreakdown::mean(&epoch_steps)?;
        steps.extend(epoch_steps);
        let tune = if can_eval && state.epoch.is_multiple_of(cfg.eval_every) {
            Some(evaluate(&state.model, &graphs, &cfg.model, ds, Split::Tune, &[cfg.eval_n])?)
        } else {
            None
        };
        let mut stop = false;
        if let Some(r) = &tune {
            let ndcg = r.ndcg[0];
            if ndcg > best_ndcg {
                best_ndcg = ndcg;
                best = Some((state.epoch, state.model.clone()));
                stale = 0;
            } else {
                stale += 1;
                stop = cfg.patience > 0 && stale >= cfg.patience;
            }
        }
        let log = EpochLog {
            epoch: state.epoch,
            loss,
            tune,
        };
        on_epoch(&log);
        history.push(log);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        steps,
        best,
    })
}

/// Small deterministic dataset for gradient checks: 5 users, 6 bundles, 7 items.
pub fn micro_dataset() -> InteractionDataset {
    let counts = EntityCounts::new(5, 6, 7).expect("positive counts");
    InteractionDataset::new(
        counts,
        vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (3, 4), (3, 5), (4, 0), (4, 5), (2, 2)],
        vec![(0, 2)],
        vec![(1, 3), (4, 4)],
        vec![(0, 0), (0, 3), (1, 1), (1, 4), (2, 2), (2, 5), (3, 6), (4, 0), (4, 6), (3, 2)],
        vec![(0, 0), (0, 1), (1, 1), (1, 4), (2, 2), (2, 3), (3, 5), (4, 6), (4, 0), (5, 2), (5, 6)],
    )
    .expect("valid micro dataset")
}

/// Micro-instance configuration: D=4, K=3, T=2, every loss term active.
pub fn micro_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.dim = 4;
    cfg.model.k_users = 3;
    cfg.model.k_bundles = 3;
    cfg.model.init.mean_scale = 0.5;
    cfg.model.init.raw_var_init = -0.5;
    cfg.model.proto_init_scale = 0.5;
    cfg.loss = LossWeights {
        gamma_cl: 0.3,
        gamma_pcl: 0.5,
        gamma_ot: 0.7,
        tau: 0.5,
        samples: 2,
    };
    cfg.batch_size = 6;
    cfg
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per parameter.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub entries: usize,
    pub seconds: f64,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor of [`relative_error`] in gradient checks.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares tape gradients of the full loss with central differences.
///
/// Noise and OT assignments are fixed at the base point, so the loss is a
/// smooth function of the parameters in a neighbourhood.
pub fn gradcheck(ds: &InteractionDataset, cfg: &TrainConfig, h: f64) -> Result<GradCheckReport> {
    let start = Instant::now();
    let state = TrainState::<f64>::init(&ds.counts, cfg)?;
    let mut rng = state.rng.clone();
    let graphs = ModelGraphs::build(ds);
    let batch = sample_batch(ds, cfg.batch_size, &mut rng)?;
    let noise = draw_step_noise(&state.model, cfg, &mut rng);
    let mut inputs = StepInputs {
        batch,
        noise,
        frozen: None,
    };
    let mut tape = Tape::new();
    let base = loss_on(&mut tape, &state.model, &graphs, &cfg.model, &cfg.loss, &cfg.ot, &inputs)?;
    let frozen: Vec<FamilyAssignments<f64>> = base.assignments.clone();
    if !frozen.is_empty() {
        inputs.frozen = Some(frozen);
    }
    let (_, grads, _) = loss_and_gradients(&state.model, &graphs, &cfg.model, &cfg.loss, &cfg.ot, &inputs)?;
    let value = |m: &GpclModel<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let out = loss_on(&mut t, m, &graphs, &cfg.model, &cfg.loss, &cfg.ot, &inputs)?;
        Ok(t.scalar_value(out.total))
    };
    let mut model = state.model.clone();
    let mut per_param = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let mut entries = 0;
    for (pi, g) in grads.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..g.data().len() {
            let x = model.params[pi].values.data()[j];
            model.params[pi].values.data_mut()[j] = x + h;
            let fp = value(&model)?;
            model.params[pi].values.data_mut()[j] = x - h;
            let fm = value(&model)?;
            model.params[pi].values.data_mut()[j] = x;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(g.data()[j], fd, GRADCHECK_FLOOR));
            entries += 1;
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push((model.params[pi].name.clone(), worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

const MAGIC: &[u8; 4] = b"GPCL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

/// Checkpoint text block: the training config followed by `state.*` lines.
fn state_text<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig) -> String {
    let mut s = String::new();
    for (k, v) in train_entries(cfg) {
        s.push_str(&format!("{k} = {v}\n"));
    }
    let seed: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    s.push_str(&format!("state.epoch = {}\n", state.epoch));
    s.push_str(&format!("state.rng_seed = {seed}\n"));
    s.push_str(&format!("state.rng_stream = {}\n", state.rng.get_stream()));
    s.push_str(&format!("state.rng_word_pos = {}\n", state.rng.get_word_pos()));
    s.push_str(&format!("state.step = {}\n", state.opt.step));
    s
}

/// Serializes parameters, Adam moments, config and RNG position.
pub fn checkpoint_bytes<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let text = state_text(state, cfg);
    put_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    let mut records: Vec<(String, &Matrix<T>)> = Vec::new();
    for p in &state.model.params {
        records.push((p.name.clone(), &p.values));
    }
    for (p, m) in state.model.params.iter().zip(&state.opt.m) {
        records.push((format!("adam.m.{}", p.name), m));
    }
    for (p, v) in state.model.params.iter().zip(&state.opt.v) {
        records.push((format!("adam.v.{}", p.name), v));
    }
    put_u32(&mut buf, records.len() as u32);
    for (name, m) in records {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, m.rows() as u32);
        put_u32(&mut buf, m.cols() as u32);
        for x in m.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_bytes(state, cfg);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::VersionMismatch("record runs past end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn parse_state_value<X: std::str::FromStr>(entries: &[(String, String)], key: &str) -> Result<X> {
    entries
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::VersionMismatch(format!("missing or bad {key}")))
}

/// Parses checkpoint bytes into the stored config and training state.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(TrainConfig, TrainState<T>)> {
    if bytes.len() < 16 {
        return Err(Error::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::VersionMismatch("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::VersionMismatch("config block is not UTF-8".into()))?;
    let mut entries = Vec::new();
    let mut state_entries = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::VersionMismatch(format!("bad config line '{line}'")))?;
        let kv = (k.trim().to_string(), v.trim().to_string());
        if kv.0.starts_with("state.") {
            state_entries.push(kv);
        } else {
            entries.push(kv);
        }
    }
    let cfg = parse_train_entries(&entries)?;
    let n = r.u32()? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let nl = r.u32()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| Error::VersionMismatch("bad record name".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows.checked_mul(cols).and_then(|c| c.checked_mul(8)).ok_or(Error::ChecksumMismatch)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        records.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::VersionMismatch("trailing bytes after records".into()));
    }
    let np = records.len() / 3;
    if records.len() != 3 * np {
        return Err(Error::VersionMismatch("record count is not parameters plus two moments".into()));
    }
    let mut it = records.into_iter();
    let params: Vec<Parameter<T>> = it.by_ref().take(np).map(|(n, m)| Parameter::new(n, m)).collect();
    let m: Vec<Matrix<T>> = it.by_ref().take(np).map(|r| r.1).collect();
    let v: Vec<Matrix<T>> = it.map(|r| r.1).collect();

    let seed_hex: String = parse_state_value(&state_entries, "state.rng_seed")?;
    if seed_hex.len() != 64 {
        return Err(Error::VersionMismatch("bad rng seed".into()));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| Error::VersionMismatch("bad rng seed".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parse_state_value(&state_entries, "state.rng_stream")?);
    rng.set_word_pos(parse_state_value(&state_entries, "state.rng_word_pos")?);
    let opt = OptimizerState {
        m,
        v,
        step: parse_state_value(&state_entries, "state.step")?,
        lr: cfg.learning_rate,
        beta1: ADAM_BETA1,
        beta2: ADAM_BETA2,
        eps: ADAM_EPS,
    };
    let state = TrainState {
        model: GpclModel { params },
        opt,
        rng,
        epoch: parse_state_value(&state_entries, "state.epoch")?,
        assignments: None,
    };
    check_compatible(&state, &cfg, None)?;
    Ok((cfg, state))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(TrainConfig, TrainState<T>)> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Checks parameter names and shapes against what `cfg` (and `counts`) would build.
pub fn check_compatible<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig, counts: Option<&EntityCounts>) -> Result<()> {
    let p = &state.model.params;
    let counts = match counts {
        Some(c) => *c,
        None => EntityCounts::new(
            p.first().map_or(0, |x| x.values.rows()),
            p.get(2).map_or(0, |x| x.values.rows()),
            p.get(4).map_or(0, |x| x.values.rows()),
        )
        .map_err(|_| Error::VersionMismatch("checkpoint holds empty tables".into()))?,
    };
    let expected = GpclModel::<T>::init(&counts, &cfg.model, 0)
        .map_err(|e| Error::VersionMismatch(format!("config cannot build a model: {e}")))?;
    if expected.params.len() != p.len() {
        return Err(Error::VersionMismatch(format!(
            "checkpoint has {} parameters, config expects {}",
            p.len(),
            expected.params.len()
        )));
    }
    for (a, b) in p.iter().zip(&expected.params) {
        if a.name != b.name || a.values.shape() != b.values.shape() {
            return Err(Error::VersionMismatch(format!(
                "parameter {} {:?} does not match expected {} {:?}",
                a.name,
                a.values.shape(),
                b.name,
                b.values.shape()
            )));
        }
    }
    let moments_ok = state.opt.m.len() == p.len()
        && state.opt.v.len() == p.len()
        && p.iter()
            .zip(&state.opt.m)
            .zip(&state.opt.v)
            .all(|((a, m), v)| a.values.shape() == m.shape() && a.values.shape() == v.shape());
    if !moments_ok {
        return Err(Error::VersionMismatch("optimizer moments do not match parameters".into()));
    }
    Ok(())
}

/// Loads a checkpoint and checks it against the run's config and dataset sizes.
pub fn load_checkpoint_for<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: &TrainConfig,
    counts: &EntityCounts,
) -> Result<TrainState<T>> {
    let (_, state) = load_checkpoint(path)?;
    check_compatible(&state, cfg, Some(counts))?;
    Ok(state)
}
