//! The walk environment: states, restricted action sets, transitions and the
//! time-shaped terminal reward.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityId, FactId, Query, Tick};
use crate::error::{Error, Result};

/// Agent position `(entity, time)` while answering `query`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State<'q> {
    pub query: &'q Query,
    pub entity: EntityId,
    pub time: Tick,
    pub step: usize,
}

impl<'q> State<'q> {
    pub fn initial(query: &'q Query) -> Self {
        State {
            query,
            entity: query.entity,
            time: query.time,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Fact(FactId),
    SelfLoop,
}

#[derive(Clone, Copy, Debug)]
pub struct Environment<'d> {
    pub ds: &'d Dataset,
    pub action_cap: usize,
    pub max_steps: usize,
}

impl<'d> Environment<'d> {
    pub fn new(ds: &'d Dataset, action_cap: usize, max_steps: usize) -> Self {
        Environment {
            ds,
            action_cap,
            max_steps,
        }
    }

    /// Facts leaving the current entity no later than the current time and
    /// strictly before the query time, most recent first, capped, followed
    /// by the self-loop.
    pub fn valid_actions(&self, s: &State<'_>) -> Vec<Action> {
        let mut out = Vec::with_capacity(self.action_cap.min(256) + 1);
        if s.query.time > 0 {
            let bound = s.time.min(s.query.time - 1);
            out.extend(
                self.ds
                    .facts_adjacent(s.entity, bound)
                    .take(self.action_cap)
                    .map(Action::Fact),
            );
        }
        out.push(Action::SelfLoop);
        out
    }

    pub fn transition<'q>(&self, s: &State<'q>, a: Action) -> Result<State<'q>> {
        if s.step >= self.max_steps {
            return Err(Error::InvalidAction(format!("walk already took {} steps", s.step)));
        }
        match a {
            Action::SelfLoop => Ok(State { step: s.step + 1, ..*s }),
            Action::Fact(id) => {
                if id >= self.ds.facts().len() || !self.valid_actions(s).contains(&a) {
                    return Err(Error::InvalidAction(format!(
                        "fact {id} is not available from entity {} at tick {}",
                        s.entity, s.time
                    )));
                }
                let f = self.ds.fact(id);
                // For reflexive facts the other core entity is the same one.
                Ok(State {
                    query: s.query,
                    entity: f.object(),
                    time: f.time,
                    step: s.step + 1,
                })
            }
        }
    }
}

/// Per-predicate categorical distribution over time-gap buckets `1..=max_gap`
/// (Dirichlet posterior mean).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePrior {
    pub alpha: f64,
    pub max_gap: u32,
    pub rows: Vec<Vec<f64>>,
}

impl TimePrior {
    /// Posterior mean of `Dirichlet(alpha + counts)` for every predicate row.
    pub fn from_counts(counts: &[Vec<f64>], alpha: f64) -> Self {
        let max_gap = counts.first().map_or(1, |r| r.len()) as u32;
        let rows = counts
            .iter()
            .map(|row| {
                let total: f64 = row.iter().sum::<f64>() + alpha * row.len() as f64;
                if total <= 0.0 {
                    vec![1.0 / row.len() as f64; row.len()]
                } else {
                    row.iter().map(|c| (c + alpha) / total).collect()
                }
            })
            .collect();
        TimePrior { alpha, max_gap, rows }
    }

    /// For each query, the gap from the query time back to the most recent
    /// earlier fact in which the answer is a core entity, counted under the
    /// query predicate. Gaps beyond `max_gap` land in the last bucket.
    pub fn fit(queries: &[Query], ds: &Dataset, alpha: f64, max_gap: u32) -> Self {
        let max_gap = max_gap.max(1);
        let mut counts = vec![vec![0.0; max_gap as usize]; ds.num_predicates()];
        for q in queries {
            if q.time == 0 {
                continue;
            }
            if let Some(id) = ds.facts_adjacent(q.answer, q.time - 1).next() {
                let gap = q.time - ds.fact(id).time;
                let b = gap.clamp(1, max_gap) as usize - 1;
                if let Some(row) = counts.get_mut(q.predicate as usize) {
                    row[b] += 1.0;
                }
            }
        }
        TimePrior::from_counts(&counts, alpha)
    }

    pub fn bucket(&self, gap: u32) -> usize {
        gap.clamp(1, self.max_gap) as usize - 1
    }

    pub fn prob(&self, predicate: usize, gap: u32) -> f64 {
        let b = self.bucket(gap);
        match self.rows.get(predicate) {
            Some(row) => row[b],
            None => 1.0 / self.max_gap as f64,
        }
    }
}

/// `(1 + p_Δt)` when the walk ends on the answer, else 0. The gap
/// `t − τ_L` is clamped into `1..=max_gap`.
pub fn terminal_reward(final_state: &State<'_>, prior: &TimePrior) -> f64 {
    let q = final_state.query;
    if final_state.entity != q.answer {
        return 0.0;
    }
    let gap = q.time.saturating_sub(final_state.time);
    1.0 + prior.prob(q.predicate as usize, gap)
}
