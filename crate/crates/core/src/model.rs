//! Parameter layout and the differentiable forward pass of the full model:
//! Gaussian level-0 samples, two-view propagation, BPR, cross-view InfoNCE
//! and the prototype losses, averaged over the Gaussian samples.

use std::sync::Arc;

use crate::dataset::{InteractionDataset, TrainBatch};
use crate::error::{Error, Result};
use crate::gaussian::{init_table, sample, sample_on, GaussianEmbeddingTable, InitSpec, NoiseDraw};
use crate::graph::{build_graph, BipartiteGraph, LayerCombine};
use crate::matrix::Matrix;
use crate::objectives::{bpr_loss_on, infonce_on, unique_in_order, LossBreakdown, LossWeights, ViewEmbeddings};
use crate::prototypes::{prototype_losses_on, FamilyAssignments, OtConfig, OtScope, PrototypeBank};
use crate::scalar::Scalar;
use crate::tape::{SparseOp, Tape, Var};

/// Which embeddings feed the prototype losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoInput {
    Level0,
    BundleView,
    ItemView,
}

/// Negative set of the cross-view InfoNCE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClNegatives {
    InBatch,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub combine: LayerCombine,
    /// One layer-0 user table for both views.
    pub share_level0: bool,
    pub disable_gaussian: bool,
    pub disable_proto: bool,
    pub k_users: usize,
    pub k_bundles: usize,
    pub proto_input: ProtoInput,
    pub init: InitSpec,
    pub proto_init_scale: f64,
    pub edge_dropout: f64,
    pub cl_negatives: ClNegatives,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 1,
            combine: LayerCombine::LastLayer,
            share_level0: true,
            disable_gaussian: false,
            disable_proto: false,
            k_users: 64,
            k_bundles: 64,
            proto_input: ProtoInput::Level0,
            init: InitSpec::default(),
            proto_init_scale: 0.1,
            edge_dropout: 0.0,
            cl_negatives: ClNegatives::InBatch,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.k_users == 0 || self.k_bundles == 0 {
            return Err(Error::InvalidSpec("dim, layers and prototype counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return Err(Error::InvalidSpec(format!("edge_dropout {} outside [0, 1)", self.edge_dropout)));
        }
        Ok(())
    }
}

/// Named trainable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub values: Matrix<T>,
    pub gradient: Matrix<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, values: Matrix<T>) -> Self {
        let (r, c) = values.shape();
        Self {
            name: name.into(),
            values,
            gradient: Matrix::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

pub const USER_MEAN: usize = 0;
pub const USER_RAW_VAR: usize = 1;
pub const BUNDLE_MEAN: usize = 2;
pub const BUNDLE_RAW_VAR: usize = 3;
pub const ITEM_MEAN: usize = 4;
pub const ITEM_RAW_VAR: usize = 5;
pub const PROTO_USER: usize = 6;
pub const PROTO_BUNDLE: usize = 7;
/// Present only when the item view has its own layer-0 user table.
pub const USER_ITEM_MEAN: usize = 8;
pub const USER_ITEM_RAW_VAR: usize = 9;

/// Node family for uncertainty reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Users,
    Bundles,
}

/// All trainable parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct GpclModel<T> {
    pub params: Vec<Parameter<T>>,
}

impl<T: Scalar> GpclModel<T> {
    pub fn init(counts: &crate::dataset::EntityCounts, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let users = init_table::<T>(counts.num_users, d, cfg.init, seed)?;
        let bundles = init_table::<T>(counts.num_bundles, d, cfg.init, seed.wrapping_add(1))?;
        let items = init_table::<T>(counts.num_items, d, cfg.init, seed.wrapping_add(2))?;
        let bank = PrototypeBank::<T>::init(cfg.k_users, cfg.k_bundles, d, cfg.proto_init_scale, seed.wrapping_add(3))?;
        let mut params = vec![
            Parameter::new("user.mean", users.means),
            Parameter::new("user.raw_var", users.raw_variances),
            Parameter::new("bundle.mean", bundles.means),
            Parameter::new("bundle.raw_var", bundles.raw_variances),
            Parameter::new("item.mean", items.means),
            Parameter::new("item.raw_var", items.raw_variances),
            Parameter::new("proto.user", bank.users),
            Parameter::new("proto.bundle", bank.bundles),
        ];
        if !cfg.share_level0 {
            let ui = init_table::<T>(counts.num_users, d, cfg.init, seed.wrapping_add(4))?;
            params.push(Parameter::new("user_item.mean", ui.means));
            params.push(Parameter::new("user_item.raw_var", ui.raw_variances));
        }
        Ok(Self { params })
    }

    pub fn dim(&self) -> usize {
        self.params[USER_MEAN].values.cols()
    }

    pub fn shares_level0(&self) -> bool {
        self.params.len() <= USER_ITEM_MEAN
    }

    fn table(&self, mean: usize, raw: usize) -> GaussianEmbeddingTable<T> {
        GaussianEmbeddingTable {
            means: self.params[mean].values.clone(),
            raw_variances: self.params[raw].values.clone(),
        }
    }

    pub fn users(&self) -> GaussianEmbeddingTable<T> {
        self.table(USER_MEAN, USER_RAW_VAR)
    }

    pub fn bundles(&self) -> GaussianEmbeddingTable<T> {
        self.table(BUNDLE_MEAN, BUNDLE_RAW_VAR)
    }

    pub fn items(&self) -> GaussianEmbeddingTable<T> {
        self.table(ITEM_MEAN, ITEM_RAW_VAR)
    }

    pub fn family(&self, f: Family) -> GaussianEmbeddingTable<T> {
        match f {
            Family::Users => self.users(),
            Family::Bundles => self.bundles(),
        }
    }

    /// Layer-0 user table of the item view.
    pub fn users_item_view(&self) -> GaussianEmbeddingTable<T> {
        if self.shares_level0() {
            self.users()
        } else {
            self.table(USER_ITEM_MEAN, USER_ITEM_RAW_VAR)
        }
    }

    pub fn prototypes(&self) -> PrototypeBank<T> {
        PrototypeBank {
            users: self.params[PROTO_USER].values.clone(),
            bundles: self.params[PROTO_BUNDLE].values.clone(),
        }
    }

    /// Empty noise draws shaped for this model.
    pub fn noise(&self, seed: u64) -> SampleNoise<T> {
        let d = self.dim();
        let rows = |i: usize| self.params[i].values.rows();
        SampleNoise {
            users: NoiseDraw::generate(rows(USER_MEAN), d, seed),
            bundles: NoiseDraw::generate(rows(BUNDLE_MEAN), d, seed.wrapping_add(0x9E37_79B9)),
            items: NoiseDraw::generate(rows(ITEM_MEAN), d, seed.wrapping_add(0x3C6E_F372)),
            users_item: (!self.shares_level0())
                .then(|| NoiseDraw::generate(rows(USER_MEAN), d, seed.wrapping_add(0xDAA6_6D2B))),
        }
    }

    /// View embeddings from the means (`noise = None`) or one Gaussian draw.
    pub fn views(&self, graphs: &ModelGraphs<T>, cfg: &ModelConfig, noise: Option<&SampleNoise<T>>) -> Result<ViewEmbeddings<T>> {
        let draw = |t: GaussianEmbeddingTable<T>, n: Option<&NoiseDraw<T>>| -> Result<Matrix<T>> {
            match n {
                Some(n) => sample(&t, n),
                None => Ok(t.means),
            }
        };
        let eu = draw(self.users(), noise.map(|n| &n.users))?;
        let eb = draw(self.bundles(), noise.map(|n| &n.bundles))?;
        let ei = draw(self.items(), noise.map(|n| &n.items))?;
        let eu_item = if self.shares_level0() {
            eu.clone()
        } else {
            draw(self.users_item_view(), noise.and_then(|n| n.users_item.as_ref()))?
        };
        let (ub, bb) = graphs.ub.propagate_layers(&eu, &eb, cfg.layers, cfg.combine)?;
        let (ui, ii) = graphs.ui.propagate_layers(&eu_item, &ei, cfg.layers, cfg.combine)?;
        let bi = graphs.pool.forward.mul_dense(&ii)?;
        Ok(ViewEmbeddings {
            user_bundle_view: ub,
            bundle_bundle_view: bb,
            user_item_view: ui,
            bundle_item_view: bi,
        })
    }
}

/// Standard-normal draws for every layer-0 table.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleNoise<T> {
    pub users: NoiseDraw<T>,
    pub bundles: NoiseDraw<T>,
    pub items: NoiseDraw<T>,
    pub users_item: Option<NoiseDraw<T>>,
}

/// Graphs built from the training split and the side relations.
#[derive(Clone, Debug)]
pub struct ModelGraphs<T> {
    pub ub: BipartiteGraph<T>,
    pub ui: BipartiteGraph<T>,
    pub bi: BipartiteGraph<T>,
    pub pool: Arc<SparseOp<T>>,
}

impl<T: Scalar> ModelGraphs<T> {
    pub fn build(ds: &InteractionDataset) -> Self {
        let bi = build_graph(&ds.bi, &ds.counts);
        Self {
            ub: build_graph(&ds.ub_train, &ds.counts),
            ui: build_graph(&ds.ui, &ds.counts),
            pool: bi.mean_pooling(),
            bi,
        }
    }

    /// Per-step copy with propagation edges dropped at rate `p`.
    pub fn with_edge_dropout<R: rand::Rng>(&self, p: f64, rng: &mut R) -> Self {
        if p <= 0.0 {
            return self.clone();
        }
        Self {
            ub: self.ub.with_edge_dropout(p, rng),
            ui: self.ui.with_edge_dropout(p, rng),
            bi: self.bi.clone(),
            pool: Arc::clone(&self.pool),
        }
    }
}

/// Everything a single optimization step's loss depends on besides the parameters.
#[derive(Clone, Debug)]
pub struct StepInputs<T> {
    pub batch: TrainBatch,
    /// One entry per Gaussian sample; `None` means the mean embedding.
    pub noise: Vec<Option<SampleNoise<T>>>,
    /// Assignments to use instead of solving OT on the current values.
    pub frozen: Option<Vec<FamilyAssignments<T>>>,
}

/// Forward outputs of one step.
#[derive(Debug)]
pub struct StepOutput<T> {
    pub total: Var,
    pub leaves: Vec<Var>,
    pub per_sample: Vec<LossBreakdown>,
    pub breakdown: LossBreakdown,
    /// Per-sample assignments, empty when prototypes are disabled.
    pub assignments: Vec<FamilyAssignments<T>>,
    /// Per-sample OT loss nodes, for stop-gradient checks.
    pub ot_vars: Vec<Var>,
}

/// Records the full loss on `tape`; returns the total node and per-component values.
pub fn loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    model: &GpclModel<T>,
    graphs: &ModelGraphs<T>,
    cfg: &ModelConfig,
    w: &LossWeights,
    ot: &OtConfig,
    step: &StepInputs<T>,
) -> Result<StepOutput<T>> {
    if step.batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if step.noise.is_empty() {
        return Err(Error::EmptySampleList);
    }
    let leaves: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.values.clone())).collect();
    let tau = T::lit(w.tau);
    let users = step.batch.users();
    let pos = step.batch.positives();
    let neg = step.batch.negatives();
    let (cl_users, cl_bundles) = match cfg.cl_negatives {
        ClNegatives::InBatch => (unique_in_order(&users), unique_in_order(&pos)),
        ClNegatives::Full => (
            (0..model.params[USER_MEAN].values.rows()).collect(),
            (0..model.params[BUNDLE_MEAN].values.rows()).collect(),
        ),
    };
    let proto_rows = match ot.scope {
        OtScope::FullNodeSet => None,
        OtScope::InBatch => {
            let mut bundles = pos.clone();
            bundles.extend_from_slice(&neg);
            Some((unique_in_order(&users), unique_in_order(&bundles)))
        }
    };

    let mut per_sample = Vec::with_capacity(step.noise.len());
    let mut totals = Vec::with_capacity(step.noise.len());
    let mut assignments = Vec::new();
    let mut ot_vars = Vec::new();
    for (t, noise) in step.noise.iter().enumerate() {
        let eu = sample_on(tape, leaves[USER_MEAN], leaves[USER_RAW_VAR], noise.as_ref().map(|n| &n.users))?;
        let eb = sample_on(tape, leaves[BUNDLE_MEAN], leaves[BUNDLE_RAW_VAR], noise.as_ref().map(|n| &n.bundles))?;
        let ei = sample_on(tape, leaves[ITEM_MEAN], leaves[ITEM_RAW_VAR], noise.as_ref().map(|n| &n.items))?;
        let eu_item = if model.shares_level0() {
            eu
        } else {
            sample_on(
                tape,
                leaves[USER_ITEM_MEAN],
                leaves[USER_ITEM_RAW_VAR],
                noise.as_ref().and_then(|n| n.users_item.as_ref()),
            )?
        };
        let (u_b, b_b) = graphs.ub.propagate_layers_on(tape, eu, eb, cfg.layers, cfg.combine)?;
        let (u_i, i_i) = graphs.ui.propagate_layers_on(tape, eu_item, ei, cfg.layers, cfg.combine)?;
        let b_i = tape.spmm(&graphs.pool, i_i)?;

        let score = |tape: &mut Tape<T>, bundles: &[usize]| -> Result<Var> {
            let ub = tape.gather_rows(u_b, &users)?;
            let bb = tape.gather_rows(b_b, bundles)?;
            let ui = tape.gather_rows(u_i, &users)?;
            let bi = tape.gather_rows(b_i, bundles)?;
            let s1 = tape.row_dot(ub, bb)?;
            let s2 = tape.row_dot(ui, bi)?;
            tape.add(s1, s2)
        };
        let pos_s = score(tape, &pos)?;
        let neg_s = score(tape, &neg)?;
        let l_bpr = bpr_loss_on(tape, pos_s, neg_s)?;

        let au = tape.gather_rows(u_b, &cl_users)?;
        let bu = tape.gather_rows(u_i, &cl_users)?;
        let ab = tape.gather_rows(b_b, &cl_bundles)?;
        let bb = tape.gather_rows(b_i, &cl_bundles)?;
        let lu = infonce_on(tape, au, bu, tau)?;
        let lb = infonce_on(tape, ab, bb, tau)?;
        let l_cl = tape.add(lu, lb)?;

        let mut terms = vec![l_bpr, tape.scale(l_cl, T::lit(w.gamma_cl))];
        let (mut v_proto, mut v_ot) = (0.0, 0.0);
        if !cfg.disable_proto {
            let (pu, pb) = match cfg.proto_input {
                ProtoInput::Level0 => (eu, eb),
                ProtoInput::BundleView => (u_b, b_b),
                ProtoInput::ItemView => (u_i, b_i),
            };
            let (pu, pb) = match &proto_rows {
                None => (pu, pb),
                Some((ru, rb)) => (tape.gather_rows(pu, ru)?, tape.gather_rows(pb, rb)?),
            };
            let frozen = step.frozen.as_ref().map(|f| &f[t]);
            let (vars, assign) = prototype_losses_on(
                tape,
                pu,
                pb,
                leaves[PROTO_USER],
                leaves[PROTO_BUNDLE],
                ot,
                tau,
                frozen,
            )?;
            v_proto = tape.scalar_value(vars.proto).as_f64();
            v_ot = tape.scalar_value(vars.ot).as_f64();
            terms.push(tape.scale(vars.proto, T::lit(w.gamma_pcl)));
            terms.push(tape.scale(vars.ot, T::lit(w.gamma_ot)));
            assignments.push(assign);
            ot_vars.push(vars.ot);
        }
        let total_t = tape.add_all(&terms)?;
        totals.push(total_t);
        per_sample.push(LossBreakdown::weighted(
            tape.scalar_value(l_bpr).as_f64(),
            tape.scalar_value(l_cl).as_f64(),
            v_proto,
            v_ot,
            w,
        ));
    }
    let sum = tape.add_all(&totals)?;
    let total = tape.scale(sum, T::one() / T::lit(totals.len() as f64));
    let mut breakdown = LossBreakdown::mean(&per_sample)?;
    breakdown.total = tape.scalar_value(total).as_f64();
    Ok(StepOutput {
        total,
        leaves,
        per_sample,
        breakdown,
        assignments,
        ot_vars,
    })
}

/// Loss value and per-parameter gradients (in parameter order).
pub fn loss_and_gradients<T: Scalar>(
    model: &GpclModel<T>,
    graphs: &ModelGraphs<T>,
    cfg: &ModelConfig,
    w: &LossWeights,
    ot: &OtConfig,
    step: &StepInputs<T>,
) -> Result<(LossBreakdown, Vec<Matrix<T>>, Vec<FamilyAssignments<T>>)> {
    let mut tape = Tape::new();
    let out = loss_on(&mut tape, model, graphs, cfg, w, ot, step)?;
    let grads = tape.backward(out.total)?;
    let g = out.leaves.iter().map(|&v| grads.wrt(v)).collect();
    Ok((out.breakdown, g, out.assignments))
}
