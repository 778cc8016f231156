//! Rollouts, the REINFORCE objective, beam-search inference, time-aware
//! filtered evaluation, explanations and the training loop.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CandidateScore, RunConfig};
use crate::data::{Dataset, EntityId, Query, Split, Tick};
use crate::env::{terminal_reward, Action, Environment, State, TimePrior};
use crate::error::{Error, Result};
use crate::gcn::BackgroundGraph;
use crate::optim::{clip_global_norm, Optimizer};
use crate::params::{ParamStore, FORMAT_VERSION};
use crate::policy::{owners, ActionItem, Model, ModelSpec, QueryCtx, StepDist};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Floor added to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Beam rows evaluated on one tape; bounds memory.
const BEAM_ROWS: usize = 256;

/// Everything a walk needs besides parameters.
#[derive(Clone, Copy, Debug)]
pub struct Agent<'a> {
    pub ds: &'a Dataset,
    pub spec: &'a ModelSpec,
    pub prior: &'a TimePrior,
    pub env: Environment<'a>,
}

impl<'a> Agent<'a> {
    pub fn new(ds: &'a Dataset, spec: &'a ModelSpec, prior: &'a TimePrior, action_cap: usize, max_steps: usize) -> Self {
        Agent {
            ds,
            spec,
            prior,
            env: Environment::new(ds, action_cap, max_steps),
        }
    }

    /// `H_t` for query time `t` recorded on `tape`.
    pub fn encode(&self, tape: &mut Tape, model: &Model, t: Tick) -> Result<Var> {
        let bg = BackgroundGraph::build(self.ds, t, self.spec.gcn.cfg.window);
        model.gcn.encode(tape, self.ds, &bg)
    }

    /// `H_t` as a plain table, for inference.
    pub fn encode_values(&self, store: &ParamStore, t: Tick) -> Result<Tensor> {
        let mut tape = Tape::new();
        let model = self.spec.bind(&mut tape, store)?;
        let h = self.encode(&mut tape, &model, t)?;
        Ok(tape.value(h).clone())
    }
}

/// Gate weights of one step spread over P, C, F (0 for dropped branches).
fn gate_triples(tape: &Tape, model: &Model, gate: Var) -> Vec<[f64; 3]> {
    let g = tape.value(gate);
    (0..g.rows())
        .map(|r| {
            let mut out = [0.0; 3];
            for (i, b) in model.branches.iter().enumerate() {
                out[b.kind.index()] = g.get(r, i);
            }
            out
        })
        .collect()
}

/// How each trajectory picks its actions.
pub enum Steering<'r> {
    Sample(&'r mut ChaCha8Rng),
    Greedy,
    /// Replays a fixed action sequence per query.
    Forced(&'r [Vec<Action>]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: Query,
    pub actions: Vec<Action>,
    /// `(entity, time)` after each step, starting with the initial state.
    pub states: Vec<(EntityId, Tick)>,
    pub log_probs: Vec<f64>,
    pub gates: Vec<[f64; 3]>,
    pub reward: f64,
}

/// Rollouts of one query-time group, with the tape values needed for the
/// policy-gradient loss.
pub struct GroupRollout {
    pub trajectories: Vec<Trajectory>,
    /// `Σ_l log π(a_l|s_l)` per trajectory, `[rows × 1]`.
    pub log_prob_sum: Var,
    /// `Σ_l Σ_a π log π` per trajectory (negative entropy), `[rows × 1]`.
    pub neg_entropy_sum: Var,
}

fn actions_and_items<'d>(
    agent: &Agent<'d>,
    states: &[State<'_>],
) -> (Vec<Vec<Action>>, Vec<ActionItem<'d>>, Vec<usize>) {
    let mut all = Vec::with_capacity(states.len());
    let mut items = Vec::new();
    let mut offsets = vec![0];
    for s in states {
        let acts = agent.env.valid_actions(s);
        for &a in &acts {
            items.push(ActionItem::new(agent.ds, s.query.time, s.entity, s.time, a));
        }
        offsets.push(items.len());
        all.push(acts);
    }
    (all, items, offsets)
}

/// Walks every query of `queries` (all at the same time) for `L` steps.
pub fn rollout_group(
    tape: &mut Tape,
    model: &Model,
    agent: &Agent<'_>,
    queries: &[&Query],
    mut steer: Steering<'_>,
) -> Result<GroupRollout> {
    let t = queries.first().map(|q| q.time).ok_or_else(|| Error::Config("empty rollout group".into()))?;
    if queries.iter().any(|q| q.time != t) {
        return Err(Error::Config("rollout group mixes query times".into()));
    }
    let h_t = agent.encode(tape, model, t)?;
    let ctx = model.query_ctx(tape, h_t, queries)?;
    let mut hist = model.start(tape, &ctx)?;
    let mut states: Vec<State<'_>> = queries.iter().map(|q| State::initial(q)).collect();
    let rows = queries.len();
    let mut trajectories: Vec<Trajectory> = queries
        .iter()
        .map(|q| Trajectory {
            query: (*q).clone(),
            actions: Vec::new(),
            states: vec![(q.entity, q.time)],
            log_probs: Vec::new(),
            gates: Vec::new(),
            reward: 0.0,
        })
        .collect();
    let mut lp_sum: Option<Var> = None;
    let mut ne_sum: Option<Var> = None;
    let steps = agent.env.max_steps;
    for l in 0..steps {
        let (acts, items, offsets) = actions_and_items(agent, &states);
        let emb = model.embed(tape, h_t, &items)?;
        let dist = model.step(tape, &hist, &ctx, &emb, &offsets)?;
        let probs = tape.value(dist.probs).values().to_vec();
        let mut global = Vec::with_capacity(rows);
        for r in 0..rows {
            let seg = &probs[offsets[r]..offsets[r + 1]];
            let local = match &mut steer {
                Steering::Sample(rng) => crate::policy::sample_action(seg, *rng)?,
                Steering::Greedy => crate::policy::argmax_action(seg)?,
                Steering::Forced(paths) => {
                    let want = paths
                        .get(r)
                        .and_then(|p| p.get(l))
                        .ok_or_else(|| Error::InvalidAction(format!("no forced action for row {r} step {l}")))?;
                    acts[r]
                        .iter()
                        .position(|a| a == want)
                        .ok_or_else(|| Error::InvalidAction(format!("forced action {want:?} not available")))?
                }
            };
            global.push(offsets[r] + local);
        }
        let chosen = tape.gather_rows(dist.probs, global.clone())?;
        let lp = tape.log(chosen, LOG_FLOOR);
        let all_lp = tape.log(dist.probs, LOG_FLOOR);
        let plp = tape.mul(dist.probs, all_lp)?;
        let ne = tape.scatter_add_rows(plp, owners(&offsets), rows)?;
        lp_sum = Some(match lp_sum {
            None => lp,
            Some(acc) => tape.add(acc, lp)?,
        });
        ne_sum = Some(match ne_sum {
            None => ne,
            Some(acc) => tape.add(acc, ne)?,
        });
        let gates = gate_triples(tape, model, dist.gate);
        let lp_vals = tape.value(lp).values().to_vec();
        for r in 0..rows {
            let a = acts[r][global[r] - offsets[r]];
            states[r] = agent.env.transition(&states[r], a)?;
            let tr = &mut trajectories[r];
            tr.actions.push(a);
            tr.states.push((states[r].entity, states[r].time));
            tr.log_probs.push(lp_vals[r]);
            tr.gates.push(gates[r]);
        }
        if l + 1 < steps {
            let picked = emb.select(tape, &global)?;
            hist = model.advance(tape, &hist, &picked)?;
        }
    }
    for (tr, s) in trajectories.iter_mut().zip(&states) {
        tr.reward = terminal_reward(s, agent.prior);
    }
    let zero = || Tensor::zeros(&[rows, 1]);
    let log_prob_sum = lp_sum.unwrap_or_else(|| tape.constant(zero()));
    let neg_entropy_sum = ne_sum.unwrap_or_else(|| tape.constant(zero()));
    Ok(GroupRollout {
        trajectories,
        log_prob_sum,
        neg_entropy_sum,
    })
}

/// `−(1/N) Σ_i (R_i − b) Σ_l log π − β (1/N) Σ_i H_i` for this group's rows,
/// where `N` is the whole batch size.
pub fn reinforce_loss(
    tape: &mut Tape,
    group: &GroupRollout,
    baseline: f64,
    batch_size: usize,
    beta: f64,
) -> Result<Var> {
    let n = batch_size as f64;
    let coef: Vec<f64> = group.trajectories.iter().map(|t| -(t.reward - baseline) / n).collect();
    let pg = tape.scale_rows(group.log_prob_sum, coef)?;
    let pg = tape.sum(pg);
    let ent = tape.sum(group.neg_entropy_sum);
    let ent = tape.scale(ent, beta / n);
    tape.add(pg, ent)
}

/// Summary of one policy-gradient step.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

/// Groups query indices by query time, in time order.
pub fn group_by_time(queries: &[&Query]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<Tick, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        groups.entry(q.time).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Rolls out every query once and applies one REINFORCE update. Each time
/// group gets its own tape and RNG stream (`seed`, group index), so the
/// result does not depend on the number of worker threads.
pub fn reinforce_update(
    agent: &Agent<'_>,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    queries: &[&Query],
    cfg: &RunConfig,
    seed: u64,
) -> Result<UpdateStats> {
    if queries.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let groups = group_by_time(queries);
    let snapshot: &ParamStore = store;
    let rolled: Vec<(Tape, GroupRollout)> = groups
        .par_iter()
        .enumerate()
        .map(|(gi, idx)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(gi as u64);
            let mut tape = Tape::new();
            let model = agent.spec.bind(&mut tape, snapshot)?;
            let qs: Vec<&Query> = idx.iter().map(|&i| queries[i]).collect();
            let g = rollout_group(&mut tape, &model, agent, &qs, Steering::Sample(&mut rng))?;
            Ok((tape, g))
        })
        .collect::<Result<_>>()?;
    let n = queries.len();
    let total: f64 = rolled.iter().flat_map(|(_, g)| g.trajectories.iter().map(|t| t.reward)).sum();
    let baseline = total / n as f64;
    let parts: Vec<(f64, Gradients)> = rolled
        .into_par_iter()
        .map(|(mut tape, g)| {
            let loss = reinforce_loss(&mut tape, &g, baseline, n, cfg.entropy_beta)?;
            let value = tape.value(loss).item();
            Ok((value, tape.backward(loss)?))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = Gradients::new();
    for (l, g) in parts {
        loss += l;
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss {loss} or gradient; step skipped")));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    opt.step(store, &grads)?;
    Ok(UpdateStats {
        loss,
        mean_reward: baseline,
        grad_norm,
    })
}

/// Best walk found for one candidate entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamPath {
    pub entity: EntityId,
    pub log_prob: f64,
    pub actions: Vec<Action>,
    pub gates: Vec<[f64; 3]>,
}

/// Candidates of one query, best first (ties by entity id), with the best
/// path to each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub ranking: Vec<(EntityId, f64)>,
    pub paths: Vec<BeamPath>,
}

#[derive(Clone, Debug)]
struct Beam {
    query: usize,
    entity: EntityId,
    time: Tick,
    step: usize,
    log_prob: f64,
    actions: Vec<Action>,
    gates: Vec<[f64; 3]>,
}

fn beam_chunk(
    agent: &Agent<'_>,
    store: &ParamStore,
    h_t: &Tensor,
    queries: &[&Query],
    width: usize,
    score: CandidateScore,
) -> Result<Vec<BeamResult>> {
    let mut tape = Tape::new();
    let model = agent.spec.bind(&mut tape, store)?;
    let h = tape.constant(h_t.clone());
    let qctx = model.query_ctx(&mut tape, h, queries)?;
    let mut hist = model.start(&mut tape, &qctx)?;
    let mut beams: Vec<Beam> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| Beam {
            query: i,
            entity: q.entity,
            time: q.time,
            step: 0,
            log_prob: 0.0,
            actions: Vec::new(),
            gates: Vec::new(),
        })
        .collect();
    for _ in 0..agent.env.max_steps {
        let rows: Vec<usize> = beams.iter().map(|b| b.query).collect();
        let ctx = QueryCtx {
            rows: beams.len(),
            r: tape.gather_rows(qctx.r, rows.clone())?,
            h: tape.gather_rows(qctx.h, rows.clone())?,
            aux: tape.gather_rows(qctx.aux, rows)?,
        };
        let states: Vec<State<'_>> = beams
            .iter()
            .map(|b| State {
                query: queries[b.query],
                entity: b.entity,
                time: b.time,
                step: b.step,
            })
            .collect();
        let (acts, items, offsets) = actions_and_items(agent, &states);
        let emb = model.embed(&mut tape, h, &items)?;
        let StepDist { probs, gate, .. } = model.step(&mut tape, &hist, &ctx, &emb, &offsets)?;
        let probs = tape.value(probs).values().to_vec();
        let gates = gate_triples(&tape, &model, gate);
        // (score, beam, local action) per query
        let mut cands: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); queries.len()];
        for (bi, b) in beams.iter().enumerate() {
            for local in 0..acts[bi].len() {
                let p = probs[offsets[bi] + local];
                cands[b.query].push((b.log_prob + (p + LOG_FLOOR).ln(), bi, local));
            }
        }
        let mut next = Vec::new();
        let mut parents = Vec::new();
        let mut picked = Vec::new();
        for list in &mut cands {
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for &(s, bi, local) in list.iter().take(width) {
                let parent = &beams[bi];
                let a = acts[bi][local];
                let st = agent.env.transition(&states[bi], a)?;
                let mut actions = parent.actions.clone();
                actions.push(a);
                let mut g = parent.gates.clone();
                g.push(gates[bi]);
                next.push(Beam {
                    query: parent.query,
                    entity: st.entity,
                    time: st.time,
                    step: st.step,
                    log_prob: s,
                    actions,
                    gates: g,
                });
                parents.push(bi);
                picked.push(offsets[bi] + local);
            }
        }
        hist = hist.select_rows(&mut tape, &parents)?;
        let chosen = emb.select(&mut tape, &picked)?;
        hist = model.advance(&mut tape, &hist, &chosen)?;
        beams = next;
    }
    let mut out = Vec::with_capacity(queries.len());
    for qi in 0..queries.len() {
        let mut best: BTreeMap<EntityId, (f64, usize)> = BTreeMap::new();
        let mut mass: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
        for (bi, b) in beams.iter().enumerate().filter(|(_, b)| b.query == qi) {
            mass.entry(b.entity).or_default().push(b.log_prob);
            let e = best.entry(b.entity).or_insert((b.log_prob, bi));
            if b.log_prob > e.0 {
                *e = (b.log_prob, bi);
            }
        }
        let mut ranking: Vec<(EntityId, f64)> = match score {
            CandidateScore::Max => best.iter().map(|(&e, &(s, _))| (e, s)).collect(),
            CandidateScore::LogSumExp => mass
                .iter()
                .map(|(&e, v)| {
                    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (e, m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
                })
                .collect(),
        };
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let paths = ranking
            .iter()
            .map(|(e, _)| {
                let b = &beams[best[e].1];
                BeamPath {
                    entity: *e,
                    log_prob: b.log_prob,
                    actions: b.actions.clone(),
                    gates: b.gates.clone(),
                }
            })
            .collect();
        out.push(BeamResult { ranking, paths });
    }
    Ok(out)
}

/// Beam search for queries sharing one time, against a precomputed `H_t`.
pub fn beam_search_group(
    agent: &Agent<'_>,
    store: &ParamStore,
    h_t: &Tensor,
    queries: &[&Query],
    width: usize,
    score: CandidateScore,
) -> Result<Vec<BeamResult>> {
    let chunk = (BEAM_ROWS / width.max(1)).max(1);
    let mut out = Vec::with_capacity(queries.len());
    for part in queries.chunks(chunk) {
        out.extend(beam_chunk(agent, store, h_t, part, width, score)?);
    }
    Ok(out)
}

pub fn beam_search(
    agent: &Agent<'_>,
    store: &ParamStore,
    query: &Query,
    width: usize,
    score: CandidateScore,
) -> Result<BeamResult> {
    let h_t = agent.encode_values(store, query.time)?;
    Ok(beam_search_group(agent, store, &h_t, &[query], width, score)?.remove(0))
}

/// Beam search over many queries: `H_t` is computed once per distinct time
/// and groups run in parallel; output order follows `queries`.
pub fn beam_search_all(
    agent: &Agent<'_>,
    store: &ParamStore,
    queries: &[&Query],
    width: usize,
    score: CandidateScore,
) -> Result<Vec<BeamResult>> {
    let groups = group_by_time(queries);
    let done: Vec<Vec<BeamResult>> = groups
        .par_iter()
        .map(|idx| {
            let qs: Vec<&Query> = idx.iter().map(|&i| queries[i]).collect();
            let h_t = agent.encode_values(store, qs[0].time)?;
            beam_search_group(agent, store, &h_t, &qs, width, score)
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<BeamResult>> = vec![None; queries.len()];
    for (idx, res) in groups.iter().zip(done) {
        for (&i, r) in idx.iter().zip(res) {
            out[i] = Some(r);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every query searched")).collect())
}

/// 1-based rank of `answer` once `filtered` entities are removed; entities
/// never reached rank `num_entities`.
pub fn filtered_rank(
    ranking: &[(EntityId, f64)],
    answer: EntityId,
    filtered: &HashSet<EntityId>,
    num_entities: usize,
) -> usize {
    let mut rank = 1;
    for &(e, _) in ranking {
        if e == answer {
            return rank;
        }
        if !filtered.contains(&e) {
            rank += 1;
        }
    }
    num_entities.max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub count: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub ranks: Vec<usize>,
}

impl EvalResult {
    pub fn from_ranks(ranks: Vec<usize>) -> Self {
        let n = ranks.len();
        if n == 0 {
            return EvalResult {
                count: 0,
                mrr: 0.0,
                hits1: 0.0,
                hits3: 0.0,
                hits10: 0.0,
                ranks,
            };
        }
        let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        EvalResult {
            count: n,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64,
            hits1: frac(1),
            hits3: frac(3),
            hits10: frac(10),
            ranks,
        }
    }
}

/// Time-aware filtered ranking of every query's answer.
pub fn evaluate(
    agent: &Agent<'_>,
    store: &ParamStore,
    queries: &[Query],
    width: usize,
    score: CandidateScore,
) -> Result<(EvalResult, Vec<BeamResult>)> {
    let refs: Vec<&Query> = queries.iter().collect();
    let results = beam_search_all(agent, store, &refs, width, score)?;
    let ranks = queries
        .iter()
        .zip(&results)
        .map(|(q, r)| {
            let filtered: HashSet<EntityId> = agent.ds.filtered_answers(q).collect();
            filtered_rank(&r.ranking, q.answer, &filtered, agent.ds.num_entities())
        })
        .collect();
    Ok((EvalResult::from_ranks(ranks), results))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainStep {
    pub predicate: String,
    pub pairs: Vec<(String, String)>,
    pub time: u64,
    pub inverse: bool,
    /// Gate weights of the P, C and F policies at this step.
    pub gate: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub query: ExplainQuery,
    pub prediction: String,
    pub score: f64,
    pub correct: bool,
    pub path: Vec<ExplainStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainQuery {
    pub predicate: String,
    pub entity: (String, String),
    pub answer_role: String,
    pub aux: Vec<(String, String)>,
    pub time: u64,
    pub answer: String,
}

/// Checks that `actions` is a legal walk for `q` and returns its end state.
pub fn replay<'q>(env: &Environment<'_>, q: &'q Query, actions: &[Action]) -> Result<State<'q>> {
    let mut s = State::initial(q);
    for &a in actions {
        s = env.transition(&s, a)?;
    }
    Ok(s)
}

/// Record of the top-scoring walk for `q`; self-loop steps are omitted.
pub fn explain(agent: &Agent<'_>, q: &Query, result: &BeamResult) -> Result<Option<Explanation>> {
    let Some(path) = result.paths.first() else { return Ok(None) };
    let end = replay(&agent.env, q, &path.actions)?;
    if end.entity != path.entity {
        return Err(Error::InvalidAction("explanation path does not reach its entity".into()));
    }
    let ds = agent.ds;
    let name = |e: EntityId| ds.entities.token(e).to_string();
    let role = |r: u32| ds.roles.token(r).to_string();
    let mut steps = Vec::new();
    for (a, gate) in path.actions.iter().zip(&path.gates) {
        if let Action::Fact(id) = *a {
            let f = ds.fact(id);
            steps.push(ExplainStep {
                predicate: ds.predicates.token(f.predicate).to_string(),
                pairs: f.pairs.iter().map(|&(r, e)| (role(r), name(e))).collect(),
                time: ds.raw_time(f.time),
                inverse: f.inverse,
                gate: *gate,
            });
        }
    }
    Ok(Some(Explanation {
        query: ExplainQuery {
            predicate: ds.predicates.token(q.predicate).to_string(),
            entity: (role(q.entity_role), name(q.entity)),
            answer_role: role(q.answer_role),
            aux: q.aux.iter().map(|&(r, e)| (role(r), name(e))).collect(),
            time: ds.raw_time(q.time),
            answer: name(q.answer),
        },
        prediction: name(path.entity),
        score: result.ranking[0].1,
        correct: path.entity == q.answer,
        path: steps,
    }))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_reward: f64,
    pub valid_mrr: Option<f64>,
    pub valid_hits1: Option<f64>,
    pub valid_hits3: Option<f64>,
    pub valid_hits10: Option<f64>,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub epoch: usize,
    pub valid_mrr: Option<f64>,
    pub prior: TimePrior,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last one without
    /// validation).
    pub best: Checkpoint,
    pub last: ParamStore,
    pub metrics: Vec<EpochMetrics>,
}

/// Options that do not change results.
#[derive(Default)]
pub struct TrainHooks<'h> {
    /// Called after every epoch.
    pub on_epoch: Option<&'h mut dyn FnMut(&EpochMetrics)>,
    /// Restrict validation to these queries instead of the whole split.
    pub valid_queries: Option<Vec<Query>>,
}

/// Stable mixing of run seed and counters into a sub-seed.
pub fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

/// Batches of training queries: distinct query times are shuffled and their
/// groups packed until a batch holds at least `batch_size` queries.
pub fn make_batches<'q>(queries: &'q [Query], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'q Query>> {
    let refs: Vec<&Query> = queries.iter().collect();
    let mut groups = group_by_time(&refs);
    groups.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur: Vec<&Query> = Vec::new();
    for g in groups {
        cur.extend(g.iter().map(|&i| refs[i]));
        if cur.len() >= batch_size {
            batches.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

pub fn fit_prior(ds: &Dataset, cfg: &RunConfig) -> TimePrior {
    TimePrior::fit(&ds.queries(Split::Train), ds, cfg.prior_alpha, cfg.effective_max_gap())
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &[0]));
    spec.init(&mut store, &mut rng)?;
    Ok(store)
}

/// Full training run on a dataset that already has inverse facts.
pub fn train(ds: &Dataset, cfg: &RunConfig, mut hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !ds.has_inverse_facts() {
        return Err(Error::Config("dataset must include inverse facts".into()));
    }
    let start = Instant::now();
    let spec = cfg.model_spec(ds);
    let prior = fit_prior(ds, cfg);
    let agent = Agent::new(ds, &spec, &prior, cfg.action_cap, cfg.max_steps);
    let mut store = init_params(&spec, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let train_q = ds.queries(Split::Train);
    let valid_q = hooks.valid_queries.take().unwrap_or_else(|| ds.queries(Split::Valid));
    let validate = |store: &ParamStore| -> Result<Option<EvalResult>> {
        if valid_q.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(&agent, store, &valid_q, cfg.valid_beam, cfg.candidate_score)?.0))
    };

    let checkpoint = |store: &ParamStore, epoch: usize, mrr: Option<f64>| Checkpoint {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        epoch,
        valid_mrr: mrr,
        prior: prior.clone(),
        params: store.clone(),
    };
    let mut metrics = Vec::new();
    let mut best = checkpoint(&store, 0, None);
    if cfg.epochs == 0 {
        let v = validate(&store)?;
        best.valid_mrr = v.as_ref().map(|r| r.mrr);
        let m = EpochMetrics {
            epoch: 0,
            train_loss: 0.0,
            mean_reward: 0.0,
            valid_mrr: v.as_ref().map(|r| r.mrr),
            valid_hits1: v.as_ref().map(|r| r.hits1),
            valid_hits3: v.as_ref().map(|r| r.hits3),
            valid_hits10: v.as_ref().map(|r| r.hits10),
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&m);
        }
        metrics.push(m);
    }
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[1, epoch as u64]));
        let batches = make_batches(&train_q, cfg.batch_size, &mut rng);
        let (mut loss, mut reward, mut seen) = (0.0, 0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let seed = sub_seed(cfg.seed, &[2, epoch as u64, bi as u64]);
            let st = reinforce_update(&agent, &mut store, &mut opt, batch, cfg, seed)?;
            loss += st.loss * batch.len() as f64;
            reward += st.mean_reward * batch.len() as f64;
            seen += batch.len();
        }
        let denom = seen.max(1) as f64;
        let do_valid = cfg.valid_every > 0 && (epoch % cfg.valid_every == 0 || epoch == cfg.epochs);
        let v = if do_valid { validate(&store)? } else { None };
        let mrr = v.as_ref().map(|r| r.mrr);
        let improved = match (mrr, best.valid_mrr) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            // Unvalidated epochs only stand in while nothing was validated.
            (None, b) => b.is_none(),
        };
        if improved {
            best = checkpoint(&store, epoch, mrr);
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss / denom,
            mean_reward: reward / denom,
            valid_mrr: mrr,
            valid_hits1: v.as_ref().map(|r| r.hits1),
            valid_hits3: v.as_ref().map(|r| r.hits3),
            valid_hits10: v.as_ref().map(|r| r.hits10),
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&m);
        }
        metrics.push(m);
    }
    Ok(TrainOutcome {
        best,
        last: store,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Fact;
    use crate::gradcheck::check_store;
    use crate::optim::OptimizerKind;

    fn fact(p: u32, s: u32, o: u32, aux: &[(u32, u32)], t: Tick) -> Fact {
        let mut pairs = vec![(0, s), (1, o)];
        pairs.extend_from_slice(aux);
        Fact::new(p, pairs, t).unwrap()
    }

    fn dataset() -> Dataset {
        let train = vec![
            fact(0, 0, 1, &[(2, 5)], 1),
            fact(1, 1, 2, &[], 2),
            fact(0, 0, 3, &[(2, 4)], 2),
            fact(1, 3, 2, &[(2, 5)], 2),
            fact(0, 2, 4, &[], 3),
        ];
        let test = vec![fact(1, 0, 2, &[(2, 5)], 4), fact(0, 5, 4, &[], 1)];
        Dataset::from_ids(6, 2, 3, train, vec![], test).unwrap().add_inverse_facts()
    }

    fn config() -> RunConfig {
        RunConfig {
            entity_dim: 4,
            relation_dim: 5,
            time_dim: 3,
            hidden: 4,
            lstm_layers: 1,
            mlp_hidden: 4,
            window: 3,
            max_gap: 4,
            ..RunConfig::default()
        }
    }

    struct Fixture {
        ds: Dataset,
        cfg: RunConfig,
        spec: ModelSpec,
        prior: TimePrior,
        store: ParamStore,
    }

    impl Fixture {
        fn new(cfg: RunConfig) -> Self {
            let ds = dataset();
            let spec = cfg.model_spec(&ds);
            let prior = fit_prior(&ds, &cfg);
            let store = init_params(&spec, 5).unwrap();
            Fixture { ds, cfg, spec, prior, store }
        }

        fn agent(&self) -> Agent<'_> {
            Agent::new(&self.ds, &self.spec, &self.prior, self.cfg.action_cap, self.cfg.max_steps)
        }

        fn test_query(&self, i: usize) -> Query {
            self.ds.queries(Split::Test)[i].clone()
        }

        fn rollout(&self, q: &Query, steer: Steering<'_>) -> Trajectory {
            let mut tape = Tape::new();
            let model = self.spec.bind(&mut tape, &self.store).unwrap();
            rollout_group(&mut tape, &model, &self.agent(), &[q], steer)
                .unwrap()
                .trajectories
                .remove(0)
        }
    }

    /// Every legal walk of `L` steps with its summed log-probability, scored
    /// by teacher-forced rollouts.
    fn enumerate_paths(fx: &Fixture, q: &Query) -> Vec<(Vec<Action>, EntityId, f64)> {
        fn grow(env: &Environment<'_>, s: &State<'_>, prefix: Vec<Action>, out: &mut Vec<Vec<Action>>) {
            if s.step == env.max_steps {
                out.push(prefix);
                return;
            }
            for a in env.valid_actions(s) {
                let next = env.transition(s, a).unwrap();
                let mut p = prefix.clone();
                p.push(a);
                grow(env, &next, p, out);
            }
        }
        let agent = fx.agent();
        let mut paths = Vec::new();
        grow(&agent.env, &State::initial(q), Vec::new(), &mut paths);
        paths
            .into_iter()
            .map(|p| {
                let tr = fx.rollout(q, Steering::Forced(std::slice::from_ref(&p)));
                let end = tr.states.last().unwrap().0;
                (p, end, tr.log_probs.iter().sum())
            })
            .collect()
    }

    #[test]
    fn isolated_start_loops_in_place() {
        let fx = Fixture::new(config());
        let q = fx.test_query(2);
        assert_eq!(q.entity, 5);
        let tr = fx.rollout(&q, Steering::Greedy);
        assert_eq!(tr.actions, vec![Action::SelfLoop; 3]);
        assert!(tr.log_probs.iter().all(|&lp| lp.abs() < 1e-9));
        assert_eq!(tr.reward, 0.0);
    }

    #[test]
    fn walks_never_move_forward_in_time() {
        let fx = Fixture::new(config());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in fx.ds.queries(Split::Test) {
            for _ in 0..20 {
                let tr = fx.rollout(&q, Steering::Sample(&mut rng));
                for w in tr.states.windows(2) {
                    assert!(w[1].1 <= w[0].1);
                }
                for a in &tr.actions {
                    if let Action::Fact(id) = a {
                        assert!(fx.ds.fact(*id).time < q.time);
                    }
                }
            }
        }
    }

    #[test]
    fn forced_correct_walk_earns_shaped_reward() {
        let fx = Fixture::new(config());
        let q = fx.test_query(0);
        assert_eq!((q.entity, q.answer, q.time), (0, 2, 4));
        let hop = |s: u32, o: u32| {
            let id = (0..fx.ds.facts().len())
                .find(|&i| {
                    let f = fx.ds.fact(i);
                    f.subject() == s && f.object() == o && !f.inverse
                })
                .unwrap();
            Action::Fact(id)
        };
        let path = vec![hop(0, 3), hop(3, 2), Action::SelfLoop];
        let tr = fx.rollout(&q, Steering::Forced(std::slice::from_ref(&path)));
        assert_eq!(tr.states.last().unwrap(), &(2, 2));
        assert!(tr.reward > 1.0 && tr.reward <= 2.0);
        let expected = 1.0 + fx.prior.prob(q.predicate as usize, 2);
        assert_eq!(tr.reward, expected);
    }

    #[test]
    fn forced_unavailable_action_is_rejected() {
        let fx = Fixture::new(config());
        let q = fx.test_query(2);
        let mut tape = Tape::new();
        let model = fx.spec.bind(&mut tape, &fx.store).unwrap();
        let bad = vec![vec![Action::Fact(0)]];
        assert!(rollout_group(&mut tape, &model, &fx.agent(), &[&q], Steering::Forced(&bad)).is_err());
    }

    #[test]
    fn zero_advantage_leaves_parameters_unchanged() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let cfg = RunConfig {
                entropy_beta: 0.0,
                optimizer: kind,
                ..config()
            };
            let fx = Fixture::new(cfg.clone());
            let mut store = fx.store.clone();
            let mut opt = Optimizer::new(cfg.optimizer_config());
            // Both queries start isolated, so every reward is 0.
            let q = fx.test_query(2);
            let q2 = fx.test_query(3);
            let st = reinforce_update(&fx.agent(), &mut store, &mut opt, &[&q, &q2], &cfg, 1).unwrap();
            assert_eq!(st.mean_reward, 0.0);
            assert_eq!(st.grad_norm, 0.0);
            assert_eq!(store, fx.store);
        }
    }

    #[test]
    fn reinforce_gradient_matches_finite_differences() {
        let fx = Fixture::new(config());
        let q = fx.test_query(0);
        let path = vec![enumerate_paths(&fx, &q).into_iter().find(|(_, e, _)| *e == 2).unwrap().0];
        let agent = fx.agent();
        for beta in [0.0, 0.3] {
            let report = check_store(&fx.store, |tape, store| {
                let model = fx.spec.bind(tape, store)?;
                let g = rollout_group(tape, &model, &agent, &[&q], Steering::Forced(&path))?;
                assert!(g.trajectories[0].reward > 1.0);
                // Mean over a notional batch keeps the loss near unit scale.
                reinforce_loss(tape, &g, 0.0, 8, beta)
            })
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn reinforce_loss_is_negative_reward_weighted_log_prob() {
        let fx = Fixture::new(config());
        let q = fx.test_query(0);
        let mut tape = Tape::new();
        let model = fx.spec.bind(&mut tape, &fx.store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = rollout_group(&mut tape, &model, &fx.agent(), &[&q], Steering::Sample(&mut rng)).unwrap();
        let loss = reinforce_loss(&mut tape, &g, 0.25, 1, 0.0).unwrap();
        let tr = &g.trajectories[0];
        let want = -(tr.reward - 0.25) * tr.log_probs.iter().sum::<f64>();
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn width_one_beam_is_greedy() {
        let fx = Fixture::new(config());
        for q in fx.ds.queries(Split::Test) {
            let tr = fx.rollout(&q, Steering::Greedy);
            let res = beam_search(&fx.agent(), &fx.store, &q, 1, CandidateScore::Max).unwrap();
            assert_eq!(res.ranking.len(), 1);
            assert_eq!(res.paths[0].actions, tr.actions);
            assert_eq!(res.ranking[0].0, tr.states.last().unwrap().0);
            assert!((res.ranking[0].1 - tr.log_probs.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration() {
        let fx = Fixture::new(config());
        let q = fx.test_query(0);
        let paths = enumerate_paths(&fx, &q);
        assert!(paths.len() > 3 && paths.len() <= 50, "{} paths", paths.len());
        let mut best: BTreeMap<EntityId, f64> = BTreeMap::new();
        for (_, e, lp) in &paths {
            let b = best.entry(*e).or_insert(f64::NEG_INFINITY);
            *b = b.max(*lp);
        }
        let mut oracle: Vec<(EntityId, f64)> = best.into_iter().collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let res = beam_search(&fx.agent(), &fx.store, &q, 64, CandidateScore::Max).unwrap();
        let ids = |v: &[(EntityId, f64)]| v.iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(ids(&res.ranking), ids(&oracle));
        for (a, b) in res.ranking.iter().zip(&oracle) {
            assert!((a.1 - b.1).abs() < 1e-12);
        }
        // Narrower beams can only lose agreement with the oracle.
        let mut agree_prev = 0;
        for width in [1, 2, 4, 8, 16, 64] {
            let r = beam_search(&fx.agent(), &fx.store, &q, width, CandidateScore::Max).unwrap();
            let agree = r.ranking.iter().zip(&oracle).take_while(|(a, b)| a.0 == b.0).count();
            assert!(agree >= agree_prev || agree == oracle.len());
            agree_prev = agree;
        }
    }

    #[test]
    fn logsumexp_scores_sum_path_mass() {
        let fx = Fixture::new(config());
        let q = fx.test_query(0);
        let paths = enumerate_paths(&fx, &q);
        let res = beam_search(&fx.agent(), &fx.store, &q, 64, CandidateScore::LogSumExp).unwrap();
        for &(e, s) in &res.ranking {
            let mass: f64 = paths.iter().filter(|p| p.1 == e).map(|p| p.2.exp()).sum();
            assert!((s - mass.ln()).abs() < 1e-9);
        }
        let total: f64 = res.ranking.iter().map(|x| x.1.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn self_loop_only_start_has_single_candidate() {
        let fx = Fixture::new(config());
        let q = fx.test_query(2);
        let res = beam_search(&fx.agent(), &fx.store, &q, 64, CandidateScore::Max).unwrap();
        assert_eq!(res.ranking.len(), 1);
        assert_eq!(res.ranking[0].0, q.entity);
    }

    #[test]
    fn grouped_search_matches_single_queries() {
        let fx = Fixture::new(config());
        let qs = fx.ds.queries(Split::Test);
        let refs: Vec<&Query> = qs.iter().collect();
        let all = beam_search_all(&fx.agent(), &fx.store, &refs, 8, CandidateScore::Max).unwrap();
        for (q, r) in qs.iter().zip(&all) {
            assert_eq!(r, &beam_search(&fx.agent(), &fx.store, q, 8, CandidateScore::Max).unwrap());
        }
    }

    #[test]
    fn metric_definitions() {
        let r = EvalResult::from_ranks(vec![1, 2, 4]);
        assert!((r.mrr - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-12);
        assert_eq!((r.hits1, r.hits3, r.hits10), (1.0 / 3.0, 2.0 / 3.0, 1.0));
        let none = HashSet::new();
        assert_eq!(filtered_rank(&[(3, -1.0)], 7, &none, 50), 50);
        let r = EvalResult::from_ranks(vec![filtered_rank(&[], 1, &none, 40)]);
        assert_eq!(r.mrr, 1.0 / 40.0);
    }

    #[test]
    fn same_time_co_answers_are_filtered() {
        let train = vec![fact(0, 0, 1, &[], 3), fact(0, 0, 2, &[], 3), fact(0, 0, 3, &[], 2)];
        let ds = Dataset::from_ids(4, 1, 2, train, vec![], vec![]).unwrap();
        let q = ds.queries(Split::Train).into_iter().find(|q| q.masked == 1 && q.answer == 2).unwrap();
        let filtered: HashSet<EntityId> = ds.filtered_answers(&q).collect();
        assert_eq!(filtered, HashSet::from([1]));
        let ranking = [(1, -0.1), (3, -0.2), (2, -0.3)];
        assert_eq!(filtered_rank(&ranking, 2, &HashSet::new(), 4), 3);
        assert_eq!(filtered_rank(&ranking, 2, &filtered, 4), 2);
    }

    #[test]
    fn explanations_replay() {
        let fx = Fixture::new(config());
        let qs = fx.ds.queries(Split::Test);
        let (eval, results) = evaluate(&fx.agent(), &fx.store, &qs, 8, CandidateScore::Max).unwrap();
        assert_eq!(eval.count, qs.len());
        for (q, r) in qs.iter().zip(&results) {
            let ex = explain(&fx.agent(), q, r).unwrap().unwrap();
            let path = &r.paths[0];
            assert_eq!(replay(&fx.agent().env, q, &path.actions).unwrap().entity, path.entity);
            let facts = path.actions.iter().filter(|a| **a != Action::SelfLoop).count();
            assert_eq!(ex.path.len(), facts);
            for step in &ex.path {
                assert!(step.time < fx.ds.raw_time(q.time));
                assert!((step.gate.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_eq!(ex.correct, path.entity == q.answer);
            assert_eq!(ex.prediction, fx.ds.entities.token(path.entity));
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let ds = dataset();
        let cfg = RunConfig { epochs: 0, ..config() };
        let out = train(&ds, &cfg, TrainHooks::default()).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].epoch, 0);
        assert_eq!(out.best.params, init_params(&cfg.model_spec(&ds), cfg.seed).unwrap());
        assert_eq!(out.best.epoch, 0);
    }

    #[test]
    fn training_is_reproducible_and_round_trips() {
        let ds = dataset();
        let cfg = RunConfig { epochs: 2, batch_size: 4, ..config() };
        let a = train(&ds, &cfg, TrainHooks::default()).unwrap();
        let b = train(&ds, &cfg, TrainHooks::default()).unwrap();
        assert_eq!(a.last, b.last);
        assert_ne!(a.last, init_params(&cfg.model_spec(&ds), cfg.seed).unwrap());
        let strip = |m: &[EpochMetrics]| m.iter().map(|x| (x.train_loss, x.mean_reward, x.valid_mrr)).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        a.best.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), a.best);
    }

    #[test]
    fn dropped_branch_is_absent_from_checkpoint() {
        let ds = dataset();
        let cfg = RunConfig { epochs: 1, no_fp: true, ..config() };
        let out = train(&ds, &cfg, TrainHooks::default()).unwrap();
        let names = out.best.params.names();
        assert!(names.iter().all(|n| !n.starts_with("policy.F.")));
        assert!(names.iter().any(|n| n.starts_with("policy.C.")));
    }

    #[test]
    fn requires_inverse_facts() {
        let ds = Dataset::from_ids(2, 1, 2, vec![fact(0, 0, 1, &[], 1)], vec![], vec![]).unwrap();
        assert!(train(&ds, &config(), TrainHooks::default()).is_err());
    }

    #[test]
    fn batches_cover_queries_once() {
        let ds = dataset();
        let qs = ds.queries(Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&qs, 3, &mut rng);
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), qs.len());
        for b in &batches[..batches.len() - 1] {
            assert!(b.len() >= 3);
        }
    }
}
