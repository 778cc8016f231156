//! The gated mixture policy: cosine time encoding, per-branch action
//! embeddings, LSTM history encoders, bilinear action scorers and the gate.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityId, PredicateId, Query, RoleId, Tick};
use crate::env::Action;
use crate::error::{Error, Result};
use crate::gcn::{Gcn, GcnSpec};
use crate::nn::{Lstm, LstmSpec, LstmState};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The three low-level policies: predicate-only, core-element, whole-fact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    P,
    C,
    F,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::P, Branch::C, Branch::F];

    pub fn name(self) -> &'static str {
        match self {
            Branch::P => "P",
            Branch::C => "C",
            Branch::F => "F",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Width of the action embedding fed to this branch.
    pub fn action_width(self, entity_dim: usize, relation_dim: usize, time_dim: usize) -> usize {
        match self {
            Branch::P => relation_dim + time_dim,
            Branch::C => relation_dim + entity_dim + time_dim,
            Branch::F => 2 * relation_dim + entity_dim + time_dim,
        }
    }

    /// Width of the query summary fed to this branch's scorer.
    pub fn info_width(self, entity_dim: usize, relation_dim: usize) -> usize {
        match self {
            Branch::P => relation_dim,
            Branch::C => relation_dim + entity_dim,
            Branch::F => 2 * relation_dim + entity_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Learned,
    Uniform,
    /// Constant weights over the P, C, F branches (renormalised over the
    /// active ones).
    Fixed([f64; 3]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureMode {
    /// Gate-weighted average of the branch distributions.
    Probability,
    /// Gate-weighted average of the branch logits, then one softmax.
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub time_dim: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub mlp_hidden: usize,
    pub branches: Vec<Branch>,
    pub gate: GateMode,
    pub mixture: MixtureMode,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            time_dim: 20,
            hidden: 100,
            lstm_layers: 2,
            mlp_hidden: 100,
            branches: Branch::ALL.to_vec(),
            gate: GateMode::Learned,
            mixture: MixtureMode::Probability,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("every policy branch is disabled".into()));
        }
        let mut sorted = self.branches.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.branches {
            return Err(Error::Config("branches must be distinct and in P, C, F order".into()));
        }
        if let GateMode::Fixed(w) = &self.gate {
            let total: f64 = self.branches.iter().map(|b| w[b.index()]).sum();
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || total <= 0.0 {
                return Err(Error::Config("fixed gate weights must be non-negative with positive mass".into()));
            }
        }
        if self.time_dim == 0 || self.hidden == 0 || self.lstm_layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn has(&self, b: Branch) -> bool {
        self.branches.contains(&b)
    }
}

/// Full parameter layout: the encoder plus the policy.
///
/// Policy parameters: `policy.time.w`, `policy.time.b` `[1×d_t]`; per active
/// branch `X` a stacked LSTM under `policy.X.lstm`, `policy.X.mlp.w1
/// [mlp×(hidden+info)]`, `policy.X.mlp.w2 [width×mlp]`; and with a learned
/// gate over more than one branch `policy.gate.w [k×(k·hidden+2d_r+d_e)]`.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub gcn: GcnSpec,
    pub policy: PolicyConfig,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.gcn.cfg.validate()?;
        self.policy.validate()
    }

    fn lstm_spec(&self, b: Branch) -> LstmSpec {
        let c = &self.gcn.cfg;
        LstmSpec {
            prefix: format!("policy.{}.lstm", b.name()),
            input: b.action_width(c.entity_dim, c.relation_dim, self.policy.time_dim),
            hidden: self.policy.hidden,
            layers: self.policy.lstm_layers,
        }
    }

    fn learned_gate(&self) -> bool {
        self.policy.gate == GateMode::Learned && self.policy.branches.len() > 1
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        self.gcn.init(store, rng);
        let (de, dr) = (self.gcn.cfg.entity_dim, self.gcn.cfg.relation_dim);
        let p = &self.policy;
        // Geometric frequencies from 1 down to 1e-4 so both short and long
        // gaps are resolved at initialisation.
        let freqs: Vec<f64> = (0..p.time_dim)
            .map(|i| {
                let x = if p.time_dim > 1 { i as f64 / (p.time_dim - 1) as f64 } else { 0.0 };
                10f64.powf(-4.0 * x)
            })
            .collect();
        store.insert("policy.time.w", Tensor::row(freqs));
        store.insert("policy.time.b", Tensor::zeros(&[1, p.time_dim]));
        for &b in &p.branches {
            self.lstm_spec(b).init(store, rng);
            let input = p.hidden + b.info_width(de, dr);
            let width = b.action_width(de, dr, p.time_dim);
            store.init_uniform(&format!("policy.{}.mlp.w1", b.name()), &[p.mlp_hidden, input], input, rng);
            store.init_uniform(&format!("policy.{}.mlp.w2", b.name()), &[width, p.mlp_hidden], p.mlp_hidden, rng);
        }
        if self.learned_gate() {
            let k = p.branches.len();
            let input = k * p.hidden + 2 * dr + de;
            store.init_uniform("policy.gate.w", &[k, input], input, rng);
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<Model> {
        self.validate()?;
        let gcn = self.gcn.bind(tape, store)?;
        let mut branches = Vec::new();
        for &b in &self.policy.branches {
            branches.push(BranchVars {
                kind: b,
                lstm: self.lstm_spec(b).bind(tape, store)?,
                w1: tape.param(store, &format!("policy.{}.mlp.w1", b.name()))?,
                w2: tape.param(store, &format!("policy.{}.mlp.w2", b.name()))?,
            });
        }
        let gate = if self.learned_gate() {
            Some(tape.param(store, "policy.gate.w")?)
        } else {
            None
        };
        Ok(Model {
            cfg: self.policy.clone(),
            gcn,
            time_w: tape.param(store, "policy.time.w")?,
            time_b: tape.param(store, "policy.time.b")?,
            branches,
            gate,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BranchVars {
    pub kind: Branch,
    pub lstm: Lstm,
    pub w1: Var,
    pub w2: Var,
}

/// All model parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: PolicyConfig,
    pub gcn: Gcn,
    pub time_w: Var,
    pub time_b: Var,
    pub branches: Vec<BranchVars>,
    pub gate: Option<Var>,
}

/// What an action contributes to the embeddings, independent of branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionItem<'a> {
    pub predicate: PredicateId,
    pub entity: EntityId,
    pub aux: &'a [(RoleId, EntityId)],
    /// Query time minus the action's timestamp.
    pub delta: f64,
}

impl<'a> ActionItem<'a> {
    /// The self-loop keeps the current entity, has no auxiliary pairs and
    /// carries the gap of the current state.
    pub fn new(ds: &'a Dataset, query_time: Tick, entity: EntityId, time: Tick, a: Action) -> Self {
        match a {
            Action::SelfLoop => ActionItem {
                predicate: ds.self_loop_predicate(),
                entity,
                aux: &[],
                delta: (query_time - time) as f64,
            },
            Action::Fact(id) => {
                let f = ds.fact(id);
                ActionItem {
                    predicate: f.predicate,
                    entity: f.object(),
                    aux: f.aux(),
                    delta: (query_time - f.time) as f64,
                }
            }
        }
    }
}

/// Embedding components for a batch of actions, one row each.
#[derive(Clone, Copy, Debug)]
pub struct Embeds {
    pub r: Var,
    pub h: Var,
    pub aux: Var,
    pub phi: Var,
}

impl Embeds {
    pub fn select(&self, tape: &mut Tape, idx: &[usize]) -> Result<Embeds> {
        Ok(Embeds {
            r: tape.gather_rows(self.r, idx.to_vec())?,
            h: tape.gather_rows(self.h, idx.to_vec())?,
            aux: tape.gather_rows(self.aux, idx.to_vec())?,
            phi: tape.gather_rows(self.phi, idx.to_vec())?,
        })
    }

    pub fn branch_input(&self, tape: &mut Tape, b: Branch) -> Result<Var> {
        match b {
            Branch::P => tape.concat_cols(&[self.r, self.phi]),
            Branch::C => tape.concat_cols(&[self.r, self.h, self.phi]),
            Branch::F => tape.concat_cols(&[self.r, self.h, self.aux, self.phi]),
        }
    }
}

/// Per-row query summaries `r_q`, `h_{e_q}`, `h_{aux_q}`.
#[derive(Clone, Copy, Debug)]
pub struct QueryCtx {
    pub rows: usize,
    pub r: Var,
    pub h: Var,
    pub aux: Var,
}

impl QueryCtx {
    fn info(&self, tape: &mut Tape, b: Branch) -> Result<Var> {
        match b {
            Branch::P => Ok(self.r),
            Branch::C => tape.concat_cols(&[self.r, self.h]),
            Branch::F => tape.concat_cols(&[self.r, self.h, self.aux]),
        }
    }
}

/// LSTM states of the active branches, one row per trajectory.
#[derive(Clone, Debug)]
pub struct History {
    pub states: Vec<LstmState>,
}

impl History {
    pub fn select_rows(&self, tape: &mut Tape, idx: &[usize]) -> Result<History> {
        let states = self
            .states
            .iter()
            .map(|s| Lstm::select_rows(tape, s, idx))
            .collect::<Result<_>>()?;
        Ok(History { states })
    }
}

/// Output of scoring one step for a batch of trajectories.
#[derive(Clone, Debug)]
pub struct StepDist {
    /// Final probabilities `[ΣA × 1]`, segment per trajectory.
    pub probs: Var,
    /// Per active branch probabilities `[ΣA × 1]`.
    pub branch_probs: Vec<Var>,
    /// Gate weights `[rows × k]` over the active branches.
    pub gate: Var,
}

/// `[ΣA]` trajectory index of every action given segment offsets.
pub fn owners(offsets: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(offsets.last().copied().unwrap_or(0));
    for (row, w) in offsets.windows(2).enumerate() {
        out.extend(std::iter::repeat_n(row, w[1] - w[0]));
    }
    out
}

impl Model {
    /// `cos(Δt·w_t + b_t)` for each gap, `[n × d_t]`.
    pub fn time_encode(&self, tape: &mut Tape, deltas: &[f64]) -> Result<Var> {
        let dt = tape.constant(Tensor::column(deltas.to_vec()));
        let z = tape.matmul(dt, self.time_w)?;
        let z = tape.add_row(z, self.time_b)?;
        Ok(tape.cos(z))
    }

    /// Embeds actions against the entity table `h_t` (indexed by entity id).
    pub fn embed(&self, tape: &mut Tape, h_t: Var, items: &[ActionItem<'_>]) -> Result<Embeds> {
        let preds = items.iter().map(|a| a.predicate as usize).collect();
        let ents = items.iter().map(|a| a.entity as usize).collect();
        let auxes: Vec<&[(RoleId, EntityId)]> = items.iter().map(|a| a.aux).collect();
        let deltas: Vec<f64> = items.iter().map(|a| a.delta).collect();
        Ok(Embeds {
            r: tape.gather_rows(self.gcn.predicate, preds)?,
            h: tape.gather_rows(h_t, ents)?,
            aux: self.gcn.aux_embeddings(tape, h_t, &auxes)?,
            phi: self.time_encode(tape, &deltas)?,
        })
    }

    pub fn query_ctx(&self, tape: &mut Tape, h_t: Var, queries: &[&Query]) -> Result<QueryCtx> {
        let preds = queries.iter().map(|q| q.predicate as usize).collect();
        let ents = queries.iter().map(|q| q.entity as usize).collect();
        let auxes: Vec<&[(RoleId, EntityId)]> = queries.iter().map(|q| q.aux.as_slice()).collect();
        Ok(QueryCtx {
            rows: queries.len(),
            r: tape.gather_rows(self.gcn.predicate, preds)?,
            h: tape.gather_rows(h_t, ents)?,
            aux: self.gcn.aux_embeddings(tape, h_t, &auxes)?,
        })
    }

    /// History after the synthetic start action built from the query with
    /// zero gap.
    pub fn start(&self, tape: &mut Tape, ctx: &QueryCtx) -> Result<History> {
        let phi = self.time_encode(tape, &vec![0.0; ctx.rows])?;
        let a0 = Embeds {
            r: ctx.r,
            h: ctx.h,
            aux: ctx.aux,
            phi,
        };
        let mut states = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let zero = b.lstm.zero_state(tape, ctx.rows);
            let x = a0.branch_input(tape, b.kind)?;
            states.push(b.lstm.step(tape, x, &zero)?);
        }
        Ok(History { states })
    }

    /// Feeds the chosen actions (one row per trajectory) to every branch.
    pub fn advance(&self, tape: &mut Tape, hist: &History, chosen: &Embeds) -> Result<History> {
        let mut states = Vec::with_capacity(self.branches.len());
        for (b, s) in self.branches.iter().zip(&hist.states) {
            let x = chosen.branch_input(tape, b.kind)?;
            states.push(b.lstm.step(tape, x, s)?);
        }
        Ok(History { states })
    }

    fn gate_weights(&self, tape: &mut Tape, hist: &History, ctx: &QueryCtx) -> Result<Var> {
        let k = self.branches.len();
        let constant = |w: Vec<f64>| -> Tensor {
            let total: f64 = w.iter().sum();
            let row: Vec<f64> = w.iter().map(|x| x / total).collect();
            let values = (0..ctx.rows).flat_map(|_| row.iter().copied()).collect();
            Tensor::matrix(ctx.rows, k, values).expect("gate shape")
        };
        match (&self.cfg.gate, self.gate) {
            (_, Some(w)) => {
                let mut parts: Vec<Var> = hist.states.iter().map(LstmState::top).collect();
                parts.extend([ctx.r, ctx.h, ctx.aux]);
                let x = tape.concat_cols(&parts)?;
                let z = tape.linear(x, w)?;
                tape.softmax_rows(z)
            }
            (GateMode::Fixed(w), None) => {
                let w = self.branches.iter().map(|b| w[b.kind.index()]).collect();
                Ok(tape.constant(constant(w)))
            }
            _ => Ok(tape.constant(constant(vec![1.0; k]))),
        }
    }

    /// Scores the candidate actions of every trajectory; `offsets` delimits
    /// each trajectory's actions within `actions`.
    pub fn step(
        &self,
        tape: &mut Tape,
        hist: &History,
        ctx: &QueryCtx,
        actions: &Embeds,
        offsets: &[usize],
    ) -> Result<StepDist> {
        let own = owners(offsets);
        let mut logits = Vec::with_capacity(self.branches.len());
        let mut branch_probs = Vec::with_capacity(self.branches.len());
        for (b, s) in self.branches.iter().zip(&hist.states) {
            let info = ctx.info(tape, b.kind)?;
            let x = tape.concat_cols(&[s.top(), info])?;
            let z = tape.linear(x, b.w1)?;
            let z = tape.relu(z);
            let u = tape.linear(z, b.w2)?;
            let u = tape.gather_rows(u, own.clone())?;
            let a = actions.branch_input(tape, b.kind)?;
            let l = tape.row_dot(a, u)?;
            branch_probs.push(tape.segment_softmax(l, offsets.to_vec())?);
            logits.push(l);
        }
        let gate = self.gate_weights(tape, hist, ctx)?;
        let parts = match self.cfg.mixture {
            MixtureMode::Probability => &branch_probs,
            MixtureMode::Logit => &logits,
        };
        let mut mixed = None;
        for (i, &p) in parts.iter().enumerate() {
            let g = tape.slice_cols(gate, i, 1)?;
            let g = tape.gather_rows(g, own.clone())?;
            let term = tape.mul(g, p)?;
            mixed = Some(match mixed {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let mixed = mixed.expect("at least one branch");
        let probs = match self.cfg.mixture {
            MixtureMode::Probability => mixed,
            MixtureMode::Logit => tape.segment_softmax(mixed, offsets.to_vec())?,
        };
        Ok(StepDist {
            probs,
            branch_probs,
            gate,
        })
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Numeric("empty distribution".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Numeric(format!("invalid probabilities {probs:?}")));
    }
    Ok(())
}

/// Categorical draw from `probs`.
pub fn sample_action(probs: &[f64], rng: &mut impl Rng) -> Result<usize> {
    check_probs(probs)?;
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax_action(probs: &[f64]) -> Result<usize> {
    check_probs(probs)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}
