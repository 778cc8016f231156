//! N-tuple temporal facts, vocabularies and the indexes the agent walks.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type PredicateId = u32;
pub type RoleId = u32;
/// Normalised timestamp (raw timestamp divided by the dataset granularity).
pub type Tick = u32;
/// Index into [`Dataset::facts`].
pub type FactId = usize;

/// `predicate(role₁:e₁, role₂:e₂, …, t)`. The first two pairs are the core
/// pairs, the rest are auxiliary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub predicate: PredicateId,
    pub pairs: Vec<(RoleId, EntityId)>,
    pub time: Tick,
    /// True for the swapped-core copy added by [`Dataset::add_inverse_facts`].
    #[serde(default)]
    pub inverse: bool,
}

impl Fact {
    pub fn new(predicate: PredicateId, pairs: Vec<(RoleId, EntityId)>, time: Tick) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::Config("fact has fewer than two core pairs".into()));
        }
        Ok(Fact {
            predicate,
            pairs,
            time,
            inverse: false,
        })
    }

    pub fn subject(&self) -> EntityId {
        self.pairs[0].1
    }

    pub fn object(&self) -> EntityId {
        self.pairs[1].1
    }

    pub fn aux(&self) -> &[(RoleId, EntityId)] {
        &self.pairs[2..]
    }

    /// Swaps the core pairs (roles travel with their entities) and maps the
    /// predicate to its inverse. `base` is the number of base predicates.
    pub fn inverted(&self, base: usize) -> Fact {
        let base = base as PredicateId;
        let predicate = if self.predicate < base {
            self.predicate + base
        } else {
            self.predicate - base
        };
        let mut pairs = self.pairs.clone();
        pairs.swap(0, 1);
        Fact {
            predicate,
            pairs,
            time: self.time,
            inverse: !self.inverse,
        }
    }
}

/// Dense string ↔ id mapping; id = position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            let t = t.into();
            if v.index.contains_key(&t) {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
            v.push(t);
        }
        Ok(v)
    }

    /// Generated names `{prefix}{i}` for `i < n`.
    pub fn numbered(prefix: &str, n: usize) -> Self {
        Vocab::from_tokens((0..n).map(|i| format!("{prefix}{i}"))).expect("distinct")
    }

    pub fn push(&mut self, token: String) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// A masked-core prediction task `r_q(ρ:e_q, ρ':?, aux…, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    /// The fact the query was cut from, in base orientation.
    pub source: Fact,
    /// Which core position of `source` is hidden (0 or 1).
    pub masked: usize,
    /// Query predicate; the inverse predicate when `masked == 0`.
    pub predicate: PredicateId,
    pub entity: EntityId,
    pub entity_role: RoleId,
    pub answer_role: RoleId,
    pub answer: EntityId,
    pub aux: Vec<(RoleId, EntityId)>,
    pub time: Tick,
}

impl Query {
    /// The query as an oriented fact whose second core entity is the answer.
    pub fn as_fact(&self) -> Fact {
        let mut pairs = vec![(self.entity_role, self.entity), (self.answer_role, self.answer)];
        pairs.extend_from_slice(&self.aux);
        Fact {
            predicate: self.predicate,
            pairs,
            time: self.time,
            inverse: self.masked == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct FilterKey {
    predicate: PredicateId,
    time: Tick,
    head: (RoleId, EntityId),
    answer_role: RoleId,
    aux: Vec<(RoleId, EntityId)>,
}

impl FilterKey {
    fn of(f: &Fact) -> Self {
        FilterKey {
            predicate: f.predicate,
            time: f.time,
            head: f.pairs[0],
            answer_role: f.pairs[1].0,
            aux: f.aux().to_vec(),
        }
    }
}

/// Corpus size summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub entities: usize,
    pub predicates: usize,
    pub roles: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub timestamps: usize,
    pub granularity: u64,
}

/// An indexed N-TKG. Immutable once built; safe for concurrent readers.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub entities: Vocab,
    pub predicates: Vocab,
    pub roles: Vocab,
    base_predicates: usize,
    granularity: u64,
    splits: [Vec<Fact>; 3],
    facts: Vec<Fact>,
    inverse_added: bool,
    snapshots: BTreeMap<Tick, Vec<FactId>>,
    adjacency: Vec<Vec<FactId>>,
    seen: Vec<bool>,
    filter: HashMap<FilterKey, Vec<EntityId>>,
}

impl Dataset {
    /// Builds a dataset from base-orientation split facts already in ticks.
    pub fn new(
        entities: Vocab,
        predicates: Vocab,
        roles: Vocab,
        train: Vec<Fact>,
        valid: Vec<Fact>,
        test: Vec<Fact>,
        granularity: u64,
    ) -> Result<Self> {
        let splits = [train, valid, test];
        for f in splits.iter().flatten() {
            if f.pairs.len() < 2 {
                return Err(Error::Config("fact has fewer than two core pairs".into()));
            }
            if f.predicate as usize >= predicates.len() {
                return Err(Error::Config(format!("unknown predicate id {}", f.predicate)));
            }
            for &(r, e) in &f.pairs {
                if r as usize >= roles.len() {
                    return Err(Error::Config(format!("unknown role id {r}")));
                }
                if e as usize >= entities.len() {
                    return Err(Error::Config(format!("unknown entity id {e}")));
                }
            }
        }
        let base_predicates = predicates.len();
        let mut ds = Dataset {
            entities,
            predicates,
            roles,
            base_predicates,
            granularity: granularity.max(1),
            splits,
            facts: Vec::new(),
            inverse_added: false,
            snapshots: BTreeMap::new(),
            adjacency: Vec::new(),
            seen: Vec::new(),
            filter: HashMap::new(),
        };
        ds.reindex();
        Ok(ds)
    }

    /// Numbered vocabularies (`e0…`, `p0…`, `role0…`), granularity 1.
    pub fn from_ids(
        num_entities: usize,
        num_predicates: usize,
        num_roles: usize,
        train: Vec<Fact>,
        valid: Vec<Fact>,
        test: Vec<Fact>,
    ) -> Result<Self> {
        Dataset::new(
            Vocab::numbered("e", num_entities),
            Vocab::numbered("p", num_predicates),
            Vocab::numbered("role", num_roles),
            train,
            valid,
            test,
            1,
        )
    }

    fn reindex(&mut self) {
        let mut facts: Vec<Fact> = self.splits.iter().flatten().cloned().collect();
        if self.inverse_added {
            let inv: Vec<Fact> = facts.iter().map(|f| f.inverted(self.base_predicates)).collect();
            facts.extend(inv);
        }
        let mut snapshots: BTreeMap<Tick, Vec<FactId>> = BTreeMap::new();
        let mut adjacency = vec![Vec::new(); self.entities.len()];
        let mut filter: HashMap<FilterKey, Vec<EntityId>> = HashMap::new();
        for (id, f) in facts.iter().enumerate() {
            snapshots.entry(f.time).or_default().push(id);
            adjacency[f.subject() as usize].push(id);
            let answers = filter.entry(FilterKey::of(f)).or_default();
            if !answers.contains(&f.object()) {
                answers.push(f.object());
            }
        }
        for list in &mut adjacency {
            list.sort_by(|&a, &b| facts[b].time.cmp(&facts[a].time).then(a.cmp(&b)));
        }
        let mut seen = vec![false; self.entities.len()];
        for f in &self.splits[0] {
            for &(_, e) in &f.pairs {
                seen[e as usize] = true;
            }
        }
        self.facts = facts;
        self.snapshots = snapshots;
        self.adjacency = adjacency;
        self.filter = filter;
        self.seen = seen;
    }

    /// Adds `r⁻¹` for every base predicate and a swapped-core copy of every
    /// fact. Idempotent.
    pub fn add_inverse_facts(mut self) -> Self {
        if self.inverse_added {
            return self;
        }
        for i in 0..self.base_predicates {
            let name = format!("{}^-1", self.predicates.token(i as u32));
            self.predicates.push(name);
        }
        self.inverse_added = true;
        self.reindex();
        self
    }

    pub fn has_inverse_facts(&self) -> bool {
        self.inverse_added
    }

    pub fn base_predicates(&self) -> usize {
        self.base_predicates
    }

    /// Predicate rows including inverses (not the reserved self-loop).
    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    /// Reserved predicate id of the self-loop action.
    pub fn self_loop_predicate(&self) -> PredicateId {
        self.predicates.len() as PredicateId
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_roles(&self) -> usize {
        self.roles.len()
    }

    pub fn granularity(&self) -> u64 {
        self.granularity
    }

    pub fn raw_time(&self, t: Tick) -> u64 {
        t as u64 * self.granularity
    }

    pub fn split(&self, s: Split) -> &[Fact] {
        match s {
            Split::Train => &self.splits[0],
            Split::Valid => &self.splits[1],
            Split::Test => &self.splits[2],
        }
    }

    /// Every fact of every split, base first, then inverses when added.
    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn fact(&self, id: FactId) -> &Fact {
        &self.facts[id]
    }

    pub fn snapshot(&self, t: Tick) -> &[FactId] {
        self.snapshots.get(&t).map_or(&[], Vec::as_slice)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = Tick> + '_ {
        self.snapshots.keys().copied()
    }

    /// Whether `e` occurs in the training split.
    pub fn is_seen(&self, e: EntityId) -> bool {
        self.seen.get(e as usize).copied().unwrap_or(false)
    }

    /// Row of the entity embedding table: its own row when seen in training,
    /// otherwise the shared unseen row `num_entities()`.
    pub fn embedding_row(&self, e: EntityId) -> usize {
        if self.is_seen(e) {
            e as usize
        } else {
            self.entities.len()
        }
    }

    /// Facts whose first core entity is `e` with time ≤ `max_time`, most
    /// recent first (ties by fact id).
    pub fn facts_adjacent(&self, e: EntityId, max_time: Tick) -> impl Iterator<Item = FactId> + '_ {
        let list: &[FactId] = self.adjacency.get(e as usize).map_or(&[], Vec::as_slice);
        let start = list.partition_point(|&id| self.facts[id].time > max_time);
        list[start..].iter().copied()
    }

    /// Entities other than the answer that complete the query into a true
    /// fact at the query's own timestamp.
    pub fn filtered_answers(&self, q: &Query) -> impl Iterator<Item = EntityId> + '_ {
        let key = FilterKey::of(&q.as_fact());
        let answer = q.answer;
        self.filter
            .get(&key)
            .into_iter()
            .flatten()
            .copied()
            .filter(move |&e| e != answer)
    }

    /// Two queries per fact: hide the second core entity of the fact, and
    /// hide the first (the second core entity of its inverse).
    pub fn extract_queries(&self, facts: &[Fact]) -> Vec<Query> {
        let mut out = Vec::with_capacity(2 * facts.len());
        for f in facts {
            let base = if f.inverse { f.inverted(self.base_predicates) } else { f.clone() };
            let inv = base.inverted(self.base_predicates);
            for (masked, oriented) in [(1, &base), (0, &inv)] {
                out.push(Query {
                    source: base.clone(),
                    masked,
                    predicate: oriented.predicate,
                    entity: oriented.subject(),
                    entity_role: oriented.pairs[0].0,
                    answer_role: oriented.pairs[1].0,
                    answer: oriented.object(),
                    aux: oriented.aux().to_vec(),
                    time: oriented.time,
                });
            }
        }
        out
    }

    pub fn queries(&self, split: Split) -> Vec<Query> {
        self.extract_queries(self.split(split))
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            entities: self.entities.len(),
            predicates: self.base_predicates,
            roles: self.roles.len(),
            train: self.splits[0].len(),
            valid: self.splits[1].len(),
            test: self.splits[2].len(),
            timestamps: self.snapshots.len(),
            granularity: self.granularity,
        }
    }

    /// The same graph with entity ids relabelled by `map` (a bijection).
    pub fn rename_entities(&self, map: &[EntityId]) -> Result<Dataset> {
        let n = self.entities.len();
        if map.len() != n {
            return Err(Error::Config("renaming must cover every entity".into()));
        }
        let mut tokens = vec![String::new(); n];
        for (old, &new) in map.iter().enumerate() {
            tokens[new as usize] = self.entities.token(old as u32).to_string();
        }
        let entities = Vocab::from_tokens(tokens)?;
        let relabel = |fs: &[Fact]| -> Vec<Fact> {
            fs.iter()
                .map(|f| Fact {
                    pairs: f.pairs.iter().map(|&(r, e)| (r, map[e as usize])).collect(),
                    ..f.clone()
                })
                .collect()
        };
        let mut preds = Vocab::new();
        for i in 0..self.base_predicates {
            preds.push(self.predicates.token(i as u32).to_string());
        }
        let ds = Dataset::new(
            entities,
            preds,
            self.roles.clone(),
            relabel(&self.splits[0]),
            relabel(&self.splits[1]),
            relabel(&self.splits[2]),
            self.granularity,
        )?;
        Ok(if self.inverse_added { ds.add_inverse_facts() } else { ds })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f(p: u32, s: u32, o: u32, t: u32) -> Fact {
        Fact::new(p, vec![(0, s), (1, o)], t).unwrap()
    }

    #[test]
    fn rejects_single_pair() {
        assert!(Fact::new(0, vec![(0, 1)], 0).is_err());
    }

    #[test]
    fn inverse_swaps_cores_and_keeps_aux() {
        let fact = Fact::new(2, vec![(0, 10), (1, 11), (2, 12)], 5).unwrap();
        let inv = fact.inverted(4);
        assert_eq!(inv.predicate, 6);
        assert_eq!(inv.pairs, vec![(1, 11), (0, 10), (2, 12)]);
        assert_eq!(inv.time, 5);
        assert!(inv.inverse);
        assert_eq!(inv.inverted(4), fact);
    }

    #[test]
    fn inverse_augmentation_is_idempotent() {
        let ds = Dataset::from_ids(3, 2, 2, vec![f(0, 0, 1, 0), f(1, 1, 2, 1)], vec![], vec![]).unwrap();
        assert_eq!(ds.num_predicates(), 2);
        let ds = ds.add_inverse_facts();
        assert_eq!(ds.num_predicates(), 4);
        assert_eq!(ds.facts().len(), 4);
        let ds = ds.add_inverse_facts();
        assert_eq!(ds.num_predicates(), 4);
        assert_eq!(ds.facts().len(), 4);
        assert_eq!(ds.predicates.token(2), "p0^-1");
        // each base fact appears once per orientation
        for base in ds.split(Split::Train) {
            let n_base = ds.facts().iter().filter(|x| *x == base).count();
            let inv = base.inverted(2);
            let n_inv = ds.facts().iter().filter(|x| **x == inv).count();
            assert_eq!((n_base, n_inv), (1, 1));
        }
    }

    #[test]
    fn queries_two_per_fact() {
        let ds = Dataset::from_ids(4, 1, 3, vec![], vec![], vec![]).unwrap();
        let fact = Fact::new(0, vec![(0, 1), (1, 2), (2, 3)], 7).unwrap();
        let qs = ds.extract_queries(std::slice::from_ref(&fact));
        assert_eq!(qs.len(), 2);
        assert_eq!((qs[0].entity, qs[0].answer, qs[0].predicate), (1, 2, 0));
        assert_eq!((qs[1].entity, qs[1].answer, qs[1].predicate), (2, 1, 1));
        for q in &qs {
            assert_eq!(q.source.pairs[q.masked].1, q.answer);
            assert_eq!(q.aux, vec![(2, 3)]);
        }
        let many: Vec<Fact> = (0..5).map(|i| f(0, i % 4, (i + 1) % 4, i)).collect();
        let qs = ds.extract_queries(&many);
        assert_eq!(qs.len(), 10);
        for q in qs {
            assert_eq!(q.source.pairs[q.masked].1, q.answer);
        }
    }

    #[test]
    fn adjacency_for_unknown_or_isolated_entity_is_empty() {
        let ds = Dataset::from_ids(3, 1, 2, vec![f(0, 0, 1, 2)], vec![], vec![]).unwrap();
        assert_eq!(ds.facts_adjacent(2, 100).count(), 0);
        assert_eq!(ds.facts_adjacent(99, 100).count(), 0);
    }

    #[test]
    fn unseen_entities_share_a_row() {
        let ds = Dataset::from_ids(4, 1, 2, vec![f(0, 0, 1, 0)], vec![], vec![f(0, 2, 3, 1)]).unwrap();
        assert_eq!(ds.embedding_row(1), 1);
        assert_eq!(ds.embedding_row(2), 4);
        assert_eq!(ds.embedding_row(3), 4);
    }

    #[test]
    fn filter_collects_co_true_answers() {
        let ds = Dataset::from_ids(4, 1, 2, vec![], vec![], vec![f(0, 0, 1, 3), f(0, 0, 2, 3), f(0, 0, 3, 4)])
            .unwrap();
        let q = &ds.queries(Split::Test)[0];
        assert_eq!(q.answer, 1);
        let filtered: Vec<_> = ds.filtered_answers(q).collect();
        assert_eq!(filtered, vec![2]);
    }

    fn random_ds(seed: u64, entities: u32, facts: usize, ticks: u32) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = (0..facts)
            .map(|_| {
                let mut pairs = vec![(0, rng.gen_range(0..entities)), (1, rng.gen_range(0..entities))];
                for _ in 0..rng.gen_range(0..3) {
                    pairs.push((2, rng.gen_range(0..entities)));
                }
                Fact::new(rng.gen_range(0..3), pairs, rng.gen_range(0..ticks)).unwrap()
            })
            .collect();
        Dataset::from_ids(entities as usize, 3, 3, train, vec![], vec![])
            .unwrap()
            .add_inverse_facts()
    }

    #[test]
    fn adjacency_matches_linear_scan_on_random_probes() {
        let ds = random_ds(17, 30, 600, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let e = rng.gen_range(0..30);
            let tmax = rng.gen_range(0..55);
            let got: Vec<FactId> = ds.facts_adjacent(e, tmax).collect();
            let mut want: Vec<FactId> = (0..ds.facts().len())
                .filter(|&i| ds.fact(i).subject() == e && ds.fact(i).time <= tmax)
                .collect();
            want.sort_by(|&a, &b| ds.fact(b).time.cmp(&ds.fact(a).time).then(a.cmp(&b)));
            assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn adjacency_is_monotone_in_time(seed in 0u64..1000, e in 0u32..10, t1 in 0u32..30, t2 in 0u32..30) {
            let ds = random_ds(seed, 10, 80, 25);
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let small: Vec<FactId> = ds.facts_adjacent(e, lo).collect();
            let big: Vec<FactId> = ds.facts_adjacent(e, hi).collect();
            prop_assert!(small.iter().all(|x| big.contains(x)));
        }

        #[test]
        fn inverse_is_an_involution(p in 0u32..8, n in 2usize..6, t in 0u32..100, base in 1usize..5) {
            let pairs: Vec<(RoleId, EntityId)> = (0..n as u32).map(|i| (i, i * 7)).collect();
            let fact = Fact::new(p % (2 * base as u32), pairs, t).unwrap();
            let twice = fact.inverted(base).inverted(base);
            prop_assert_eq!(twice.pairs[..2].to_vec(), fact.pairs[..2].to_vec());
            prop_assert_eq!(twice, fact);
        }
    }
}
