//! Synthetic N-TKGs with planted temporal rules.
//!
//! Every snapshot holds trigger facts `body(subject: A, object: B, place: L)`
//! for each rule, decoy facts `body(A, B', place: L')` sharing the trigger's
//! subject, and noise facts over separate predicates. A trigger at `τ`
//! fires `head(A, B, place: ·)` at `τ + gap` with probability
//! `confidence` (subject and object swapped in `Swapped` order). In `Signal`
//! mode the head repeats the trigger's place, so only the auxiliary pair
//! separates the trigger from its decoys; in `Noise` mode the head's place
//! is drawn afresh.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityId, Fact, PredicateId, Query, Tick, Vocab};
use crate::error::{Error, Result};

/// Role ids fixed by the generator.
pub const SUBJECT: u32 = 0;
pub const OBJECT: u32 = 1;
pub const PLACE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreOrder {
    Same,
    Swapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxMode {
    Signal,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub gap: u32,
    pub confidence: f64,
    pub order: CoreOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub entities: usize,
    pub noise_predicates: usize,
    /// Total roles; the first three are subject, object and place.
    pub roles: usize,
    pub timestamps: u32,
    /// Trigger, decoy and noise facts per snapshot (rule heads come on top).
    pub facts_per_snapshot: usize,
    pub triggers_per_snapshot: usize,
    pub decoys_per_trigger: usize,
    /// Auxiliary pairs on noise facts are drawn from `0..=max_noise_aux`.
    pub max_noise_aux: usize,
    pub aux_mode: AuxMode,
    pub rules: Vec<RuleSpec>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 50,
            noise_predicates: 5,
            roles: 4,
            timestamps: 60,
            facts_per_snapshot: 10,
            triggers_per_snapshot: 1,
            decoys_per_trigger: 1,
            max_noise_aux: 2,
            aux_mode: AuxMode::Signal,
            rules: vec![RuleSpec {
                gap: 1,
                confidence: 0.9,
                order: CoreOrder::Same,
            }],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.entities < 3 {
            return bad("need at least three entities");
        }
        if self.roles < 3 {
            return bad("need subject, object and place roles");
        }
        if self.timestamps < 10 {
            return bad("need at least ten timestamps for the 80/10/10 split");
        }
        let planted = self.rules.len() * self.triggers_per_snapshot * (1 + self.decoys_per_trigger);
        if planted > self.facts_per_snapshot {
            return bad("facts_per_snapshot is smaller than the planted facts per snapshot");
        }
        if planted < self.facts_per_snapshot && self.noise_predicates == 0 {
            return bad("noise facts requested without noise predicates");
        }
        if self.decoys_per_trigger + 1 >= self.entities {
            return bad("too many decoys for the entity count");
        }
        for r in &self.rules {
            if r.gap == 0 || !(r.confidence > 0.0 && r.confidence <= 1.0) {
                return bad("rules need gap >= 1 and confidence in (0, 1]");
            }
        }
        Ok(())
    }
}

/// Ground truth written to `rules.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub body: String,
    pub head: String,
    pub gap: u32,
    pub confidence: f64,
    pub order: CoreOrder,
    pub aux_mode: AuxMode,
}

pub struct SynthOutput {
    /// Base facts only; call `add_inverse_facts` before training.
    pub dataset: Dataset,
    pub rules: Vec<PlantedRule>,
    /// Head facts emitted by rules.
    pub firings: usize,
}

fn body_id(cfg: &SynthConfig, rule: usize) -> PredicateId {
    (cfg.noise_predicates + 2 * rule) as PredicateId
}

fn head_id(cfg: &SynthConfig, rule: usize) -> PredicateId {
    body_id(cfg, rule) + 1
}

fn distinct(rng: &mut ChaCha8Rng, n: usize, avoid: &[EntityId]) -> EntityId {
    loop {
        let e = rng.gen_range(0..n) as EntityId;
        if !avoid.contains(&e) {
            return e;
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.entities;
    let mut preds: Vec<String> = (0..cfg.noise_predicates).map(|i| format!("noise{i}")).collect();
    for i in 0..cfg.rules.len() {
        preds.push(format!("rule{i}_body"));
        preds.push(format!("rule{i}_head"));
    }
    let mut roles = vec!["subject".to_string(), "object".to_string(), "place".to_string()];
    roles.extend((3..cfg.roles).map(|i| format!("attr{i}")));
    let entities = Vocab::numbered("e", n);

    let mut facts: Vec<Fact> = Vec::new();
    let mut pending: Vec<Fact> = Vec::new();
    let mut firings = 0;
    for tau in 0..cfg.timestamps {
        facts.extend(pending.iter().filter(|f| f.time == tau).cloned());
        pending.retain(|f| f.time != tau);
        let mut snapshot = Vec::with_capacity(cfg.facts_per_snapshot);
        for (ri, rule) in cfg.rules.iter().enumerate() {
            for _ in 0..cfg.triggers_per_snapshot {
                let a = rng.gen_range(0..n) as EntityId;
                let b = distinct(&mut rng, n, &[a]);
                let place = rng.gen_range(0..n) as EntityId;
                let trigger = vec![(SUBJECT, a), (OBJECT, b), (PLACE, place)];
                snapshot.push(Fact::new(body_id(cfg, ri), trigger, tau)?);
                let mut used = vec![a, b];
                let mut used_places = vec![place];
                for _ in 0..cfg.decoys_per_trigger {
                    let b2 = distinct(&mut rng, n, &used);
                    let p2 = distinct(&mut rng, n, &used_places);
                    used.push(b2);
                    used_places.push(p2);
                    snapshot.push(Fact::new(body_id(cfg, ri), vec![(SUBJECT, a), (OBJECT, b2), (PLACE, p2)], tau)?);
                }
                let fires = rng.gen_bool(rule.confidence);
                let head_place = match cfg.aux_mode {
                    AuxMode::Signal => place,
                    AuxMode::Noise => rng.gen_range(0..n) as EntityId,
                };
                let at = tau + rule.gap;
                if fires && at < cfg.timestamps {
                    let (s, o) = match rule.order {
                        CoreOrder::Same => (a, b),
                        CoreOrder::Swapped => (b, a),
                    };
                    pending.push(Fact::new(head_id(cfg, ri), vec![(SUBJECT, s), (OBJECT, o), (PLACE, head_place)], at)?);
                    firings += 1;
                }
            }
        }
        while snapshot.len() < cfg.facts_per_snapshot {
            let p = rng.gen_range(0..cfg.noise_predicates) as PredicateId;
            let s = rng.gen_range(0..n) as EntityId;
            let o = distinct(&mut rng, n, &[s]);
            let mut pairs = vec![(SUBJECT, s), (OBJECT, o)];
            let k = rng.gen_range(0..=cfg.max_noise_aux);
            let mut aux_roles: Vec<u32> = (PLACE..cfg.roles as u32).collect();
            aux_roles.shuffle(&mut rng);
            for &r in aux_roles.iter().take(k) {
                pairs.push((r, rng.gen_range(0..n) as EntityId));
            }
            snapshot.push(Fact::new(p, pairs, tau)?);
        }
        facts.extend(snapshot);
    }
    debug_assert!(pending.is_empty());

    let train_end = (cfg.timestamps as f64 * 0.8).round() as Tick;
    let valid_end = (cfg.timestamps as f64 * 0.9).round() as Tick;
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for f in facts {
        match f.time {
            t if t < train_end => train.push(f),
            t if t < valid_end => valid.push(f),
            _ => test.push(f),
        }
    }
    let dataset = Dataset::new(
        entities,
        Vocab::from_tokens(preds.clone())?,
        Vocab::from_tokens(roles)?,
        train,
        valid,
        test,
        1,
    )?;
    let rules = cfg
        .rules
        .iter()
        .enumerate()
        .map(|(i, r)| PlantedRule {
            body: preds[body_id(cfg, i) as usize].clone(),
            head: preds[head_id(cfg, i) as usize].clone(),
            gap: r.gap,
            confidence: r.confidence,
            order: r.order,
            aux_mode: cfg.aux_mode,
        })
        .collect();
    Ok(SynthOutput {
        dataset,
        rules,
        firings,
    })
}

/// Writes the dataset files plus `rules.json` and `synth_config.json`.
pub fn write(out: &SynthOutput, cfg: &SynthConfig, dir: &Path) -> Result<()> {
    crate::io::save_dataset(&out.dataset, dir)?;
    std::fs::write(dir.join("rules.json"), serde_json::to_string_pretty(&out.rules)? + "\n")?;
    std::fs::write(dir.join("synth_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

pub fn load_rules(dir: &Path) -> Result<Vec<PlantedRule>> {
    let p = dir.join("rules.json");
    let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingFile(p))?;
    Ok(serde_json::from_str(&text)?)
}

/// Whether `q` asks for a rule head (in either orientation).
pub fn is_rule_query(q: &Query, ds: &Dataset, rules: &[PlantedRule]) -> bool {
    rules.iter().any(|r| {
        ds.predicates.id(&r.head).is_some_and(|h| {
            let base = ds.base_predicates() as PredicateId;
            q.predicate == h || q.predicate == h + base
        })
    })
}

/// Ranks entities by how strongly the planted rules imply them: 2 for a
/// body fact whose place matches the query's place, 1 for any other body
/// fact at the right gap, 0 otherwise. Ties are ordered by entity id.
pub fn oracle_predict(q: &Query, ds: &Dataset, rules: &[PlantedRule]) -> Vec<(EntityId, f64)> {
    let mut score = vec![0.0f64; ds.num_entities()];
    let base = ds.base_predicates() as PredicateId;
    let place = q.aux.iter().find(|p| p.0 == PLACE).map(|p| p.1);
    for r in rules {
        let (Some(body), Some(head)) = (ds.predicates.id(&r.body), ds.predicates.id(&r.head)) else {
            continue;
        };
        let forward = if q.predicate == head {
            true
        } else if q.predicate == head + base {
            false
        } else {
            continue;
        };
        // Query entity sits in the body's subject slot when the query
        // follows the rule's own core order.
        let from_subject = forward == (r.order == CoreOrder::Same);
        let Some(t) = q.time.checked_sub(r.gap) else { continue };
        for &id in ds.snapshot(t) {
            let f = ds.fact(id);
            if f.predicate != body || f.inverse {
                continue;
            }
            let (mine, other) = if from_subject { (f.subject(), f.object()) } else { (f.object(), f.subject()) };
            if mine != q.entity {
                continue;
            }
            let body_place = f.aux().iter().find(|p| p.0 == PLACE).map(|p| p.1);
            let s = if place.is_some() && place == body_place && r.aux_mode == AuxMode::Signal { 2.0 } else { 1.0 };
            let cell = &mut score[other as usize];
            *cell = cell.max(s);
        }
    }
    let mut ranking: Vec<(EntityId, f64)> = score.into_iter().enumerate().map(|(e, s)| (e as EntityId, s)).collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranking
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::train::{filtered_rank, EvalResult};
    use std::collections::HashSet;

    fn oracle_mrr(out: &SynthOutput, split: Split) -> (f64, usize) {
        let ds = &out.dataset;
        let qs: Vec<Query> = ds.queries(split).into_iter().filter(|q| is_rule_query(q, ds, &out.rules)).collect();
        let ranks = qs
            .iter()
            .map(|q| {
                let filt: HashSet<EntityId> = ds.filtered_answers(q).collect();
                filtered_rank(&oracle_predict(q, ds, &out.rules), q.answer, &filt, ds.num_entities())
            })
            .collect();
        (EvalResult::from_ranks(ranks).mrr, qs.len())
    }

    #[test]
    fn clean_rule_is_solved_by_oracle() {
        for order in [CoreOrder::Same, CoreOrder::Swapped] {
            let cfg = SynthConfig {
                facts_per_snapshot: 1,
                decoys_per_trigger: 0,
                rules: vec![RuleSpec {
                    gap: 1,
                    confidence: 1.0,
                    order,
                }],
                ..SynthConfig::default()
            };
            let out = generate(&cfg).unwrap();
            let (mrr, n) = oracle_mrr(&out, Split::Test);
            assert!(n > 0);
            assert_eq!(mrr, 1.0);
        }
    }

    #[test]
    fn signal_mode_oracle_beats_decoys() {
        let out = generate(&SynthConfig::default()).unwrap();
        let (mrr, _) = oracle_mrr(&out, Split::Test);
        assert_eq!(mrr, 1.0);
        let noisy = generate(&SynthConfig {
            aux_mode: AuxMode::Noise,
            ..SynthConfig::default()
        })
        .unwrap();
        let (mrr, _) = oracle_mrr(&noisy, Split::Test);
        assert!(mrr < 1.0 && mrr > 0.5, "{mrr}");
    }

    #[test]
    fn counts_and_determinism() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let total = a.dataset.split(Split::Train).len() + a.dataset.split(Split::Valid).len() + a.dataset.split(Split::Test).len();
        assert_eq!(total, cfg.timestamps as usize * cfg.facts_per_snapshot + a.firings);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write(&a, &cfg, d1.path()).unwrap();
        write(&generate(&cfg).unwrap(), &cfg, d2.path()).unwrap();
        for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "entities.txt", "rules.json"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let other = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other.dataset.split(Split::Train), a.dataset.split(Split::Train));
    }

    #[test]
    fn heads_follow_bodies() {
        let out = generate(&SynthConfig::default()).unwrap();
        let ds = &out.dataset;
        let body = ds.predicates.id("rule0_body").unwrap();
        let head = ds.predicates.id("rule0_head").unwrap();
        for f in ds.facts().iter().filter(|f| f.predicate == head) {
            let found = ds.snapshot(f.time - 1).iter().any(|&id| {
                let b = ds.fact(id);
                b.predicate == body && b.subject() == f.subject() && b.object() == f.object() && b.aux() == f.aux()
            });
            assert!(found);
        }
    }

    #[test]
    fn splits_are_disjoint_in_time() {
        let out = generate(&SynthConfig::default()).unwrap();
        let ds = &out.dataset;
        let max_train = ds.split(Split::Train).iter().map(|f| f.time).max().unwrap();
        let min_valid = ds.split(Split::Valid).iter().map(|f| f.time).min().unwrap();
        let max_valid = ds.split(Split::Valid).iter().map(|f| f.time).max().unwrap();
        let min_test = ds.split(Split::Test).iter().map(|f| f.time).min().unwrap();
        assert!(max_train < min_valid && max_valid < min_test);
    }

    #[test]
    fn noise_query_is_uniform() {
        let out = generate(&SynthConfig::default()).unwrap();
        let ds = &out.dataset;
        let q = ds.queries(Split::Test).into_iter().find(|q| !is_rule_query(q, ds, &out.rules)).unwrap();
        let ranking = oracle_predict(&q, ds, &out.rules);
        assert!(ranking.iter().all(|r| r.1 == 0.0));
        assert_eq!(ranking.len(), ds.num_entities());
    }

    #[test]
    fn rejects_overfull_snapshots() {
        let cfg = SynthConfig {
            facts_per_snapshot: 1,
            ..SynthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn time_prior_peaks_at_rule_gap() {
        let out = generate(&SynthConfig::default()).unwrap();
        let ds = out.dataset.add_inverse_facts();
        let prior = crate::env::TimePrior::fit(&ds.queries(Split::Train), &ds, 1.0, 8);
        let head = ds.predicates.id("rule0_head").unwrap() as usize;
        let row = &prior.rows[head];
        let best = (1..=8).max_by(|&a, &b| prior.prob(head, a).total_cmp(&prior.prob(head, b))).unwrap();
        assert_eq!(best, 1);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
