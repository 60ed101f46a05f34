//! Run configuration: `section.key = value` text with strict key checking
//! and a canonical sorted serialization.

use std::str::FromStr;

use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::parse_buckets;
use crate::graph::LayerCombine;
use crate::model::{ClNegatives, ProtoInput};
use crate::prototypes::OtScope;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset directory; empty means the synthetic generator.
    pub dir: String,
    pub synth: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: String::new(),
            synth: SyntheticSpec {
                num_clusters: 4,
                users_per_cluster: 50,
                bundles_per_cluster: 10,
                items_per_cluster: 50,
                noise_rate: 0.05,
                seed: 7,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_list: Vec<usize>,
    pub buckets: String,
    /// Draws per prediction in `predict`.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_list: vec![20, 40],
            buckets: "1-10,11-30,31-50,51-".into(),
            samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value '{value}' for {key}"))
}

fn num<X: FromStr>(key: &str, value: &str) -> Result<X> {
    value.parse().map_err(|_| bad(key, value))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect::<Result<_>>()?;
    if v.is_empty() || v.contains(&0) {
        return Err(bad(key, value));
    }
    Ok(v)
}

/// Sorted `(key, value)` pairs of every training setting.
pub fn train_entries(c: &TrainConfig) -> Vec<(String, String)> {
    let m = &c.model;
    let mut v: Vec<(&str, String)> = vec![
        ("loss.gamma_cl", c.loss.gamma_cl.to_string()),
        ("loss.gamma_ot", c.loss.gamma_ot.to_string()),
        ("loss.gamma_pcl", c.loss.gamma_pcl.to_string()),
        ("loss.samples", c.loss.samples.to_string()),
        ("loss.tau", c.loss.tau.to_string()),
        ("model.cl_negatives", match m.cl_negatives {
            ClNegatives::InBatch => "in_batch",
            ClNegatives::Full => "full",
        }
        .into()),
        ("model.dim", m.dim.to_string()),
        ("model.disable_gaussian", m.disable_gaussian.to_string()),
        ("model.disable_proto", m.disable_proto.to_string()),
        ("model.edge_dropout", m.edge_dropout.to_string()),
        ("model.init_mean_scale", m.init.mean_scale.to_string()),
        ("model.init_raw_var", m.init.raw_var_init.to_string()),
        ("model.k_bundles", m.k_bundles.to_string()),
        ("model.k_users", m.k_users.to_string()),
        ("model.layer_combine", match m.combine {
            LayerCombine::LastLayer => "last",
            LayerCombine::MeanWithLayer0 => "mean",
        }
        .into()),
        ("model.layers", m.layers.to_string()),
        ("model.proto_init_scale", m.proto_init_scale.to_string()),
        ("model.proto_input", match m.proto_input {
            ProtoInput::Level0 => "level0",
            ProtoInput::BundleView => "bundle_view",
            ProtoInput::ItemView => "item_view",
        }
        .into()),
        ("model.share_level0", m.share_level0.to_string()),
        ("ot.lambda", c.ot.lambda.to_string()),
        ("ot.max_iters", c.ot.max_iters.to_string()),
        ("ot.refresh_every", c.ot.refresh_every.to_string()),
        ("ot.scope", match c.ot.scope {
            OtScope::FullNodeSet => "full",
            OtScope::InBatch => "in_batch",
        }
        .into()),
        ("ot.tol", c.ot.tol.to_string()),
        ("trainer.batch_size", c.batch_size.to_string()),
        ("trainer.epochs", c.epochs.to_string()),
        ("trainer.eval_every", c.eval_every.to_string()),
        ("trainer.eval_n", c.eval_n.to_string()),
        ("trainer.learning_rate", c.learning_rate.to_string()),
        ("trainer.patience", c.patience.to_string()),
        ("trainer.seed", c.seed.to_string()),
        ("trainer.steps_per_epoch", c.steps_per_epoch.to_string()),
    ];
    v.sort();
    v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Sets one training key. `Ok(false)` when the key is not a training key.
pub fn set_train_key(c: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    let m = &mut c.model;
    match key {
        "loss.gamma_cl" => c.loss.gamma_cl = num(key, value)?,
        "loss.gamma_ot" => c.loss.gamma_ot = num(key, value)?,
        "loss.gamma_pcl" => c.loss.gamma_pcl = num(key, value)?,
        "loss.samples" => c.loss.samples = num(key, value)?,
        "loss.tau" => c.loss.tau = num(key, value)?,
        "model.cl_negatives" => {
            m.cl_negatives = match value {
                "in_batch" => ClNegatives::InBatch,
                "full" => ClNegatives::Full,
                _ => return Err(bad(key, value)),
            }
        }
        "model.dim" | "model.embedding_dim_override" => m.dim = num(key, value)?,
        "model.disable_gaussian" => m.disable_gaussian = boolean(key, value)?,
        "model.disable_proto" => m.disable_proto = boolean(key, value)?,
        "model.edge_dropout" => m.edge_dropout = num(key, value)?,
        "model.init_mean_scale" => m.init.mean_scale = num(key, value)?,
        "model.init_raw_var" => m.init.raw_var_init = num(key, value)?,
        "model.k_bundles" => m.k_bundles = num(key, value)?,
        "model.k_users" => m.k_users = num(key, value)?,
        "model.layer_combine" => {
            m.combine = match value {
                "last" => LayerCombine::LastLayer,
                "mean" => LayerCombine::MeanWithLayer0,
                _ => return Err(bad(key, value)),
            }
        }
        "model.layers" => m.layers = num(key, value)?,
        "model.proto_init_scale" => m.proto_init_scale = num(key, value)?,
        "model.proto_input" => {
            m.proto_input = match value {
                "level0" => ProtoInput::Level0,
                "bundle_view" => ProtoInput::BundleView,
                "item_view" => ProtoInput::ItemView,
                _ => return Err(bad(key, value)),
            }
        }
        "model.share_level0" => m.share_level0 = boolean(key, value)?,
        "ot.lambda" => c.ot.lambda = num(key, value)?,
        "ot.max_iters" => c.ot.max_iters = num(key, value)?,
        "ot.refresh_every" => c.ot.refresh_every = num(key, value)?,
        "ot.scope" | "model.proto_scope" => {
            c.ot.scope = match value {
                "full" => OtScope::FullNodeSet,
                "in_batch" => OtScope::InBatch,
                _ => return Err(bad(key, value)),
            }
        }
        "ot.tol" => c.ot.tol = num(key, value)?,
        "trainer.batch_size" => c.batch_size = num(key, value)?,
        "trainer.epochs" => c.epochs = num(key, value)?,
        "trainer.eval_every" => c.eval_every = num(key, value)?,
        "trainer.eval_n" => c.eval_n = num(key, value)?,
        "trainer.learning_rate" => c.learning_rate = num(key, value)?,
        "trainer.patience" => c.patience = num(key, value)?,
        "trainer.seed" => c.seed = num(key, value)?,
        "trainer.steps_per_epoch" => c.steps_per_epoch = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Builds a training config from defaults plus `entries`; unknown keys are rejected.
pub fn parse_train_entries(entries: &[(String, String)]) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    for (k, v) in entries {
        if !set_train_key(&mut c, k, v)? {
            return Err(Error::Config(format!("unknown config key '{k}'")));
        }
    }
    c.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(c)
}

/// Splits config text into `(key, value)` pairs. `[section]` headers prefix
/// the keys that follow; `#` starts a comment; values may be double-quoted.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = s.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        out.push((key, unquote(v.trim()).to_string()));
    }
    Ok(out)
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

/// Parses a `KEY=VALUE` override.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{text}' is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), unquote(v.trim()).to_string()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_train_key(&mut self.train, key, value)? {
            return Ok(());
        }
        let s = &mut self.data.synth;
        match key {
            "data.dir" => self.data.dir = value.to_string(),
            "data.synth_clusters" => s.num_clusters = num(key, value)?,
            "data.synth_users" => s.users_per_cluster = num(key, value)?,
            "data.synth_bundles" => s.bundles_per_cluster = num(key, value)?,
            "data.synth_items" => s.items_per_cluster = num(key, value)?,
            "data.synth_noise" => s.noise_rate = num(key, value)?,
            "data.synth_seed" => s.seed = num(key, value)?,
            "eval.n_list" => self.eval.n_list = usize_list(key, value)?,
            "eval.buckets" => {
                parse_buckets(value)?;
                self.eval.buckets = value.to_string();
            }
            "eval.samples" => self.eval.samples = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults, then the file entries, then the overrides, in order.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(t) = file_text {
            for (k, v) in parse_config_text(t)? {
                c.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be positive".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.data.synth;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut v = train_entries(&self.train);
        v.extend([
            ("data.dir".to_string(), self.data.dir.clone()),
            ("data.synth_bundles".into(), s.bundles_per_cluster.to_string()),
            ("data.synth_clusters".into(), s.num_clusters.to_string()),
            ("data.synth_items".into(), s.items_per_cluster.to_string()),
            ("data.synth_noise".into(), s.noise_rate.to_string()),
            ("data.synth_seed".into(), s.seed.to_string()),
            ("data.synth_users".into(), s.users_per_cluster.to_string()),
            ("eval.buckets".into(), self.eval.buckets.clone()),
            ("eval.n_list".into(), list(&self.eval.n_list)),
            ("eval.samples".into(), self.eval.samples.to_string()),
        ]);
        v.sort();
        v
    }

    /// One `key = value` line per setting, sorted by key.
    pub fn canonical_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Single-line form used as the first log line of a run.
    pub fn one_line(&self) -> String {
        let parts: Vec<String> = self.entries().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("config {}", parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut c = RunConfig::default();
        c.set("trainer.learning_rate", "0.003").unwrap();
        c.set("model.disable_proto", "true").unwrap();
        c.set("eval.n_list", "5,10").unwrap();
        let text = c.canonical_text();
        let back = RunConfig::resolve(Some(&text), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_text(), text);
    }

    #[test]
    fn sections_and_unknown_keys() {
        let c = RunConfig::resolve(Some("[trainer]\nepochs = 3 # short\n[model]\ndim = \"8\"\n"), &[]).unwrap();
        assert_eq!((c.train.epochs, c.train.model.dim), (3, 8));
        let e = RunConfig::resolve(None, &[("foo.bar".into(), "1".into())]).unwrap_err();
        assert!(e.to_string().contains("unknown config key"));
        assert!(RunConfig::resolve(None, &[("model.dim".into(), "x".into())]).is_err());
    }

    #[test]
    fn overrides_apply_after_file() {
        let c = RunConfig::resolve(Some("trainer.epochs = 3"), &[parse_override("trainer.epochs=1").unwrap()]).unwrap();
        assert_eq!(c.train.epochs, 1);
    }
}
