//! Background graphs and the auxiliary-element-aware graph convolution that
//! turns them into time-indexed entity embeddings.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityId, PredicateId, RoleId, Tick};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub layers: usize,
    /// Weight of the plain predicate embedding in the augmented predicate.
    pub mix_weight: f64,
    /// Background window `m` in ticks.
    pub window: u32,
    pub activation: Activation,
    pub aggregation: Aggregation,
    /// Skip message passing and use the base table directly.
    pub bypass: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            entity_dim: 80,
            relation_dim: 100,
            layers: 2,
            mix_weight: 0.7,
            window: 10,
            activation: Activation::Tanh,
            aggregation: Aggregation::Mean,
            bypass: false,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mix_weight > 0.0 && self.mix_weight < 1.0) {
            return Err(Error::Config(format!(
                "mix weight must lie strictly inside (0, 1), got {}",
                self.mix_weight
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one GCN layer is required".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("background window must be at least 1".into()));
        }
        if self.entity_dim == 0 || self.relation_dim == 0 {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// A timestamp-stripped fact.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub subject: EntityId,
    pub object: EntityId,
    pub predicate: PredicateId,
    /// Auxiliary pairs in canonical (sorted) order.
    pub aux: Vec<(RoleId, EntityId)>,
}

/// Deduplicated union of the stripped facts in snapshots `t−m .. t−1`,
/// stored in canonical order so the encoding does not depend on fact order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackgroundGraph {
    pub time: Tick,
    pub edges: Vec<Edge>,
}

impl BackgroundGraph {
    pub fn build(ds: &Dataset, t: Tick, m: u32) -> Self {
        let mut set = BTreeSet::new();
        for tau in t.saturating_sub(m)..t {
            for &id in ds.snapshot(tau) {
                let f = ds.fact(id);
                let mut aux = f.aux().to_vec();
                aux.sort_unstable();
                set.insert(Edge {
                    subject: f.subject(),
                    object: f.object(),
                    predicate: f.predicate,
                    aux,
                });
            }
        }
        BackgroundGraph {
            time: t,
            edges: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// `w·r + (1−w)·h_aux`.
pub fn augmented_predicate(r: &[f64], h_aux: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::Config(format!("mix weight {w} outside (0, 1)")));
    }
    if r.len() != h_aux.len() {
        return Err(Error::Shape(format!("{} vs {}", r.len(), h_aux.len())));
    }
    Ok(r.iter().zip(h_aux).map(|(a, b)| w * a + (1.0 - w) * b).collect())
}

/// Table sizes and hyperparameters of the encoder.
///
/// Parameters: `gcn.entity [(|E|+1)×d_e]` (last row shared by entities
/// unseen in training), `gcn.predicate [(|P|+1)×d_r]` (last row is the
/// self-loop), `gcn.role [|roles|×d_r]`, `gcn.lift [d_r×d_e]`,
/// `gcn.aux [d_r×d_r]` and per layer `gcn.layer{k}.neighbor [d_e×d_r]`,
/// `gcn.layer{k}.self [d_e×d_e]`.
#[derive(Clone, Debug)]
pub struct GcnSpec {
    pub num_entities: usize,
    pub num_predicates: usize,
    pub num_roles: usize,
    pub cfg: GcnConfig,
}

impl GcnSpec {
    /// Sizes from a dataset; the predicate table gets the self-loop row.
    pub fn for_dataset(ds: &Dataset, cfg: GcnConfig) -> Self {
        GcnSpec {
            num_entities: ds.num_entities(),
            num_predicates: ds.num_predicates() + 1,
            num_roles: ds.num_roles(),
            cfg,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (de, dr) = (self.cfg.entity_dim, self.cfg.relation_dim);
        store.init_uniform("gcn.entity", &[self.num_entities + 1, de], de, rng);
        store.init_uniform("gcn.predicate", &[self.num_predicates, dr], dr, rng);
        store.init_uniform("gcn.role", &[self.num_roles, dr], dr, rng);
        store.init_uniform("gcn.lift", &[dr, de], de, rng);
        store.init_uniform("gcn.aux", &[dr, dr], dr, rng);
        if !self.cfg.bypass {
            for k in 0..self.cfg.layers {
                store.init_uniform(&format!("gcn.layer{k}.neighbor"), &[de, dr], dr, rng);
                store.init_uniform(&format!("gcn.layer{k}.self"), &[de, de], de, rng);
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<Gcn> {
        self.cfg.validate()?;
        let layers = if self.cfg.bypass {
            Vec::new()
        } else {
            (0..self.cfg.layers)
                .map(|k| {
                    Ok((
                        tape.param(store, &format!("gcn.layer{k}.neighbor"))?,
                        tape.param(store, &format!("gcn.layer{k}.self"))?,
                    ))
                })
                .collect::<Result<_>>()?
        };
        Ok(Gcn {
            cfg: self.cfg.clone(),
            entity: tape.param(store, "gcn.entity")?,
            predicate: tape.param(store, "gcn.predicate")?,
            role: tape.param(store, "gcn.role")?,
            lift: tape.param(store, "gcn.lift")?,
            aux: tape.param(store, "gcn.aux")?,
            layers,
        })
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct Gcn {
    pub cfg: GcnConfig,
    pub entity: Var,
    pub predicate: Var,
    pub role: Var,
    pub lift: Var,
    pub aux: Var,
    pub layers: Vec<(Var, Var)>,
}

impl Gcn {
    /// Base embeddings indexed by entity id, `[|E| × d_e]`.
    pub fn base_table(&self, tape: &mut Tape, ds: &Dataset) -> Result<Var> {
        let rows = (0..ds.num_entities() as EntityId).map(|e| ds.embedding_row(e)).collect();
        tape.gather_rows(self.entity, rows)
    }

    /// `ψ(W₃ Σ (ρ + lift·h_e))` for each list of auxiliary pairs, looking
    /// entities up in `table` by id. Returns `[lists × d_r]`.
    pub fn aux_embeddings(
        &self,
        tape: &mut Tape,
        table: Var,
        lists: &[&[(RoleId, EntityId)]],
    ) -> Result<Var> {
        let (mut roles, mut ents, mut owner) = (Vec::new(), Vec::new(), Vec::new());
        for (i, list) in lists.iter().enumerate() {
            for &(r, e) in list.iter() {
                roles.push(r as usize);
                ents.push(e as usize);
                owner.push(i);
            }
        }
        if owner.is_empty() {
            let z = tape.constant(Tensor::zeros(&[lists.len(), self.cfg.relation_dim]));
            return Ok(self.cfg.activation.apply(tape, z));
        }
        let rho = tape.gather_rows(self.role, roles)?;
        let h = tape.gather_rows(table, ents)?;
        let h = tape.linear(h, self.lift)?;
        let s = tape.add(rho, h)?;
        let s = tape.scatter_add_rows(s, owner, lists.len())?;
        let z = tape.linear(s, self.aux)?;
        Ok(self.cfg.activation.apply(tape, z))
    }

    /// `w·R[p] + (1−w)·h_aux` row-wise.
    pub fn augment(&self, tape: &mut Tape, predicates: &[PredicateId], h_aux: Var) -> Result<Var> {
        let r = tape.gather_rows(self.predicate, predicates.iter().map(|&p| p as usize).collect())?;
        let w = self.cfg.mix_weight;
        let a = tape.scale(r, w);
        let b = tape.scale(h_aux, 1.0 - w);
        tape.add(a, b)
    }

    /// Entity table `H_t` `[|E| × d_e]` for the background graph `bg`.
    /// Entities that receive no message keep their base row.
    pub fn encode(&self, tape: &mut Tape, ds: &Dataset, bg: &BackgroundGraph) -> Result<Var> {
        let h0 = self.base_table(tape, ds)?;
        if self.cfg.bypass || bg.is_empty() {
            return Ok(h0);
        }
        let n = ds.num_entities();
        let aux_lists: Vec<&[(RoleId, EntityId)]> = bg.edges.iter().map(|e| e.aux.as_slice()).collect();
        let h_aux = self.aux_embeddings(tape, h0, &aux_lists)?;
        let preds: Vec<PredicateId> = bg.edges.iter().map(|e| e.predicate).collect();
        let r_hat = self.augment(tape, &preds, h_aux)?;

        let subjects: Vec<usize> = bg.edges.iter().map(|e| e.subject as usize).collect();
        let objects: Vec<usize> = bg.edges.iter().map(|e| e.object as usize).collect();
        let mut degree = vec![0usize; n];
        for &u in &subjects {
            degree[u] += 1;
        }
        let norm: Vec<f64> = degree
            .iter()
            .map(|&d| match self.cfg.aggregation {
                Aggregation::Mean if d > 0 => 1.0 / d as f64,
                _ => 1.0,
            })
            .collect();
        let mask: Vec<f64> = degree.iter().map(|&d| if d > 0 { 1.0 } else { 0.0 }).collect();
        let keep: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        let passthrough = tape.scale_rows(h0, keep)?;

        let mut h = h0;
        for &(neighbor, self_w) in &self.layers {
            let hv = tape.gather_rows(h, objects.clone())?;
            let hv = tape.linear(hv, self.lift)?;
            let m = tape.add(r_hat, hv)?;
            let m = tape.linear(m, neighbor)?;
            let agg = tape.scatter_add_rows(m, subjects.clone(), n)?;
            let agg = tape.scale_rows(agg, norm.clone())?;
            let own = tape.linear(h, self_w)?;
            let pre = tape.add(agg, own)?;
            let out = self.cfg.activation.apply(tape, pre);
            let out = tape.scale_rows(out, mask.clone())?;
            h = tape.add(out, passthrough)?;
        }
        Ok(h)
    }
}

/// Evaluates the encoder without recording gradients.
pub fn encode_values(spec: &GcnSpec, store: &ParamStore, ds: &Dataset, t: Tick) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gcn = spec.bind(&mut tape, store)?;
    let bg = BackgroundGraph::build(ds, t, spec.cfg.window);
    let h = gcn.encode(&mut tape, ds, &bg)?;
    Ok(tape.value(h).clone())
}
