//! Canonical on-disk dataset format and the TSV converter.
//!
//! A dataset directory holds `entities.txt`, `predicates.txt`, `roles.txt`
//! (one token per line, line number = id) and `train.jsonl`, `valid.jsonl`,
//! `test.jsonl` with one fact per line:
//!
//! ```text
//! {"p":"Consult","pairs":[["Consulter","America"],["Consulted","Japan"]],"t":3120}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Fact, Split, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactLine {
    pub p: String,
    pub pairs: Vec<(String, String)>,
    pub t: u64,
}

const VOCAB_FILES: [&str; 3] = ["entities.txt", "predicates.txt", "roles.txt"];

fn read_required(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_required(path)?;
    let mut v = Vocab::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if v.id(line).is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate token {line:?}")));
        }
        v.push(line.to_string());
    }
    Ok(v)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses one split file into facts with raw timestamps.
fn read_split(path: &Path, ent: &Vocab, pred: &Vocab, role: &Vocab) -> Result<Vec<(Fact, u64)>> {
    let text = read_required(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fl: FactLine = serde_json::from_str(line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if fl.pairs.len() < 2 {
            return Err(parse_err(path, lineno, "fewer than two core pairs"));
        }
        let p = pred
            .id(&fl.p)
            .ok_or_else(|| parse_err(path, lineno, format!("unknown predicate {:?}", fl.p)))?;
        let mut pairs = Vec::with_capacity(fl.pairs.len());
        for (r, e) in &fl.pairs {
            let r = role
                .id(r)
                .ok_or_else(|| parse_err(path, lineno, format!("unknown role {r:?}")))?;
            let e = ent
                .id(e)
                .ok_or_else(|| parse_err(path, lineno, format!("unknown entity {e:?}")))?;
            pairs.push((r, e));
        }
        out.push((
            Fact {
                predicate: p,
                pairs,
                time: 0,
                inverse: false,
            },
            fl.t,
        ));
    }
    Ok(out)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Loads a canonical dataset directory. Raw timestamps are divided by their
/// greatest common divisor (the granularity) to give consecutive ticks.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let [ent, pred, role] = VOCAB_FILES.map(|f| dir.join(f));
    let entities = read_vocab(&ent)?;
    let predicates = read_vocab(&pred)?;
    let roles = read_vocab(&role)?;
    let mut raw = Vec::new();
    for s in Split::ALL {
        let path = dir.join(format!("{}.jsonl", s.file_stem()));
        raw.push(read_split(&path, &entities, &predicates, &roles)?);
    }
    let g = raw.iter().flatten().fold(0, |g, (_, t)| gcd(g, *t)).max(1);
    let mut splits = raw.into_iter().map(|facts| {
        facts
            .into_iter()
            .map(|(mut f, t)| {
                let tick = t / g;
                f.time = u32::try_from(tick)
                    .map_err(|_| Error::Config(format!("timestamp {t} does not fit a tick")))?;
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()
    });
    let train = splits.next().expect("train")?;
    let valid = splits.next().expect("valid")?;
    let test = splits.next().expect("test")?;
    Dataset::new(entities, predicates, roles, train, valid, test, g)
}

pub fn fact_line(ds: &Dataset, f: &Fact) -> FactLine {
    FactLine {
        p: ds.predicates.token(f.predicate).to_string(),
        pairs: f
            .pairs
            .iter()
            .map(|&(r, e)| (ds.roles.token(r).to_string(), ds.entities.token(e).to_string()))
            .collect(),
        t: ds.raw_time(f.time),
    }
}

/// Resolves a fact line against a loaded dataset's vocabularies and tick
/// granularity.
pub fn resolve_fact_line(ds: &Dataset, fl: &FactLine) -> Result<Fact> {
    let unknown = |kind: &str, tok: &str| Error::Config(format!("unknown {kind} {tok:?}"));
    if fl.pairs.len() < 2 {
        return Err(Error::Config("fact has fewer than two core pairs".into()));
    }
    let predicate = ds
        .predicates
        .id(&fl.p)
        .filter(|&p| (p as usize) < ds.base_predicates())
        .ok_or_else(|| unknown("predicate", &fl.p))?;
    let pairs = fl
        .pairs
        .iter()
        .map(|(r, e)| {
            let r = ds.roles.id(r).ok_or_else(|| unknown("role", r))?;
            let e = ds.entities.id(e).ok_or_else(|| unknown("entity", e))?;
            Ok((r, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let g = ds.granularity();
    if !fl.t.is_multiple_of(g) {
        return Err(Error::Config(format!("timestamp {} is not a multiple of the granularity {g}", fl.t)));
    }
    let time = u32::try_from(fl.t / g).map_err(|_| Error::Config(format!("timestamp {} does not fit a tick", fl.t)))?;
    Fact::new(predicate, pairs, time)
}

fn write_vocab(path: &Path, tokens: &[String]) -> Result<()> {
    let mut s = String::new();
    for t in tokens {
        s.push_str(t);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes the base facts (never the inverse copies) in canonical form.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_vocab(&dir.join(VOCAB_FILES[0]), ds.entities.tokens())?;
    write_vocab(&dir.join(VOCAB_FILES[1]), &ds.predicates.tokens()[..ds.base_predicates()])?;
    write_vocab(&dir.join(VOCAB_FILES[2]), ds.roles.tokens())?;
    for s in Split::ALL {
        let mut text = String::new();
        for f in ds.split(s) {
            text.push_str(&serde_json::to_string(&fact_line(ds, f))?);
            text.push('\n');
        }
        fs::write(dir.join(format!("{}.jsonl", s.file_stem())), text)?;
    }
    Ok(())
}

/// Converts a TSV corpus (`train.txt`, `valid.txt`, `test.txt`; each line
/// `predicate⇥role⇥entity⇥role⇥entity…⇥timestamp`) into a canonical
/// dataset directory. Vocabularies follow first appearance.
pub fn convert_tsv(input: &Path, out: &Path) -> Result<Dataset> {
    let mut ent = Vocab::new();
    let mut pred = Vocab::new();
    let mut role = Vocab::new();
    let mut lines_per_split: Vec<Vec<FactLine>> = Vec::new();
    for s in Split::ALL {
        let path: PathBuf = input.join(format!("{}.txt", s.file_stem()));
        let text = read_required(&path)?;
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() < 6 || !cols.len().is_multiple_of(2) {
                return Err(parse_err(
                    &path,
                    i + 1,
                    "expected predicate, role/entity pairs (at least two) and a timestamp",
                ));
            }
            let t: u64 = cols[cols.len() - 1]
                .parse()
                .map_err(|_| parse_err(&path, i + 1, "timestamp is not a non-negative integer"))?;
            pred.push(cols[0].to_string());
            let pairs: Vec<(String, String)> = cols[1..cols.len() - 1]
                .chunks(2)
                .map(|c| {
                    role.push(c[0].to_string());
                    ent.push(c[1].to_string());
                    (c[0].to_string(), c[1].to_string())
                })
                .collect();
            lines.push(FactLine {
                p: cols[0].to_string(),
                pairs,
                t,
            });
        }
        lines_per_split.push(lines);
    }
    fs::create_dir_all(out)?;
    write_vocab(&out.join(VOCAB_FILES[0]), ent.tokens())?;
    write_vocab(&out.join(VOCAB_FILES[1]), pred.tokens())?;
    write_vocab(&out.join(VOCAB_FILES[2]), role.tokens())?;
    for (s, lines) in Split::ALL.iter().zip(&lines_per_split) {
        let mut text = String::new();
        for l in lines {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        fs::write(out.join(format!("{}.jsonl", s.file_stem())), text)?;
    }
    load_dataset(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn fixture(dir: &Path) {
        write(dir, "entities.txt", "America\nJapan\nVisit\nChina\n");
        write(dir, "predicates.txt", "Consult\nCoop\n");
        write(dir, "roles.txt", "Consulter\nConsulted\nConsult way\nCooper1\nCooper2\n");
        write(
            dir,
            "train.jsonl",
            concat!(
                r#"{"p":"Consult","pairs":[["Consulter","America"],["Consulted","Japan"],["Consult way","Visit"]],"t":3096}"#,
                "\n",
                r#"{"p":"Coop","pairs":[["Cooper1","Japan"],["Cooper2","China"]],"t":3120}"#,
                "\n"
            ),
        );
        write(
            dir,
            "valid.jsonl",
            concat!(r#"{"p":"Coop","pairs":[["Cooper1","China"],["Cooper2","America"]],"t":3144}"#, "\n"),
        );
        write(dir, "test.jsonl", "");
    }

    #[test]
    fn loads_and_normalises_ticks() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.granularity(), 24);
        let times: Vec<_> = ds.timestamps().collect();
        assert_eq!(times, vec![129, 130, 131]);
        assert_eq!(ds.split(Split::Train)[0].aux().len(), 1);
        let st = ds.stats();
        assert_eq!((st.entities, st.predicates, st.train, st.valid, st.test), (4, 2, 2, 1, 0));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_dataset(dir.path()).unwrap().add_inverse_facts();
        let out = tempfile::tempdir().unwrap();
        save_dataset(&ds, out.path()).unwrap();
        for f in ["entities.txt", "predicates.txt", "roles.txt", "train.jsonl", "valid.jsonl", "test.jsonl"] {
            let a = fs::read(dir.path().join(f)).unwrap();
            let b = fs::read(out.path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }

    #[test]
    fn resolves_lines_against_vocab() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        let line = |t: u64, e: &str| FactLine {
            p: "Coop".into(),
            pairs: vec![("Cooper1".into(), "Japan".into()), ("Cooper2".into(), e.into())],
            t,
        };
        let f = resolve_fact_line(&ds, &line(3168, "China")).unwrap();
        assert_eq!((f.predicate, f.time, f.object()), (1, 132, 3));
        assert!(resolve_fact_line(&ds, &line(3170, "China")).is_err());
        assert!(resolve_fact_line(&ds, &line(3168, "Korea")).is_err());
    }

    #[test]
    fn empty_train_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(dir.path(), "train.jsonl", "");
        write(dir.path(), "valid.jsonl", "");
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.timestamps().count(), 0);
    }

    #[test]
    fn single_pair_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(
            dir.path(),
            "valid.jsonl",
            "\n{\"p\":\"Coop\",\"pairs\":[[\"Cooper1\",\"China\"]],\"t\":3}\n",
        );
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("fewer than two core pairs"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_entity_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(
            dir.path(),
            "test.jsonl",
            "{\"p\":\"Coop\",\"pairs\":[[\"Cooper1\",\"Mars\"],[\"Cooper2\",\"China\"]],\"t\":3}\n",
        );
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { line: 1, .. })));
        fs::remove_file(dir.path().join("roles.txt")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn tsv_conversion() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "Consult\tConsulter\tAmerica\tConsulted\tJapan\t0\n");
        write(dir.path(), "valid.txt", "Coop\tCooper1\tJapan\tCooper2\tChina\tWay\tVisit\t24\n");
        write(dir.path(), "test.txt", "");
        let out = tempfile::tempdir().unwrap();
        let ds = convert_tsv(dir.path(), out.path()).unwrap();
        assert_eq!(ds.stats().entities, 4);
        assert_eq!(ds.stats().predicates, 2);
        assert_eq!(ds.split(Split::Valid)[0].pairs.len(), 3);
        assert_eq!(ds.split(Split::Valid)[0].time, 1);
    }
}
