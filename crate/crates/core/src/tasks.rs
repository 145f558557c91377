//! Synthetic datasets and JSON Lines I/O.
//!
//! `modsum`: prompt `d1 + d2 + ... + dk`, answer the digit `(Σ d) mod m`.
//! Exact-match verifiable, one answer token.
//!
//! `longtransform`: prompt of 3–8 letters, answer the reversed prompt repeated
//! `multiplier` times. Long answers whose exact-match probability is
//! negligible for an untrained model.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{Example, Token, Vocab};
use crate::rng::Stream;
use crate::trainer::WarmstartTriple;

pub const LETTERS: [&str; 12] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    Modsum {
        #[serde(default = "default_operands")]
        operands: usize,
        #[serde(default = "default_modulus")]
        modulus: u32,
    },
    Longtransform {
        #[serde(default = "default_multiplier")]
        multiplier: usize,
    },
}

fn default_operands() -> usize {
    3
}
fn default_modulus() -> u32 {
    10
}
fn default_multiplier() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn modsum(size: usize, seed: u64, operands: usize, modulus: u32) -> Self {
        TaskSpec {
            task: Task::Modsum { operands, modulus },
            size,
            seed,
        }
    }

    pub fn longtransform(size: usize, seed: u64, multiplier: usize) -> Self {
        TaskSpec {
            task: Task::Longtransform { multiplier },
            size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Modsum { operands, modulus } if operands < 2 || !(2..=10).contains(&modulus) => Err(
                Error::InvalidArgument(format!("modsum needs operands >= 2 and 2 <= modulus <= 10, got {operands} and {modulus}")),
            ),
            Task::Longtransform { multiplier } if multiplier == 0 => {
                Err(Error::InvalidArgument("longtransform multiplier must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// The example at `index`; a pure function of `(self, index)`.
    pub fn example(&self, index: usize) -> Example {
        let vocab = Vocab::builtin();
        let tok = |s: &str| vocab.token(s).expect("builtin symbol");
        match self.task {
            Task::Modsum { operands, modulus } => {
                let mut rng = Stream::new(self.seed, "modsum").with_index(index as u64).rng();
                let digits: Vec<u32> = (0..operands).map(|_| rng.gen_range(0..modulus)).collect();
                let mut prompt = Vec::with_capacity(2 * operands - 1);
                for (i, d) in digits.iter().enumerate() {
                    if i > 0 {
                        prompt.push(tok("+"));
                    }
                    prompt.push(tok(&d.to_string()));
                }
                let answer = (digits.iter().sum::<u32>() % modulus).to_string();
                Example::new(format!("modsum-{}-{index}", self.seed), prompt, vec![tok(&answer)])
                    .expect("generated example is valid")
            }
            Task::Longtransform { multiplier } => {
                let mut rng = Stream::new(self.seed, "longtransform").with_index(index as u64).rng();
                let len = rng.gen_range(3..=8);
                let prompt: Vec<Token> = (0..len).map(|_| tok(LETTERS[rng.gen_range(0..LETTERS.len())])).collect();
                let reversed: Vec<Token> = prompt.iter().rev().copied().collect();
                let answer = reversed.repeat(multiplier);
                Example::new(format!("longtransform-{}-{index}", self.seed), prompt, answer)
                    .expect("generated example is valid")
            }
        }
    }

    pub fn generate(&self) -> Result<Vec<Example>> {
        self.validate()?;
        Ok((0..self.size).map(|i| self.example(i)).collect())
    }
}

pub fn gen_modsum(size: usize, seed: u64, operands: usize, modulus: u32) -> Result<Vec<Example>> {
    TaskSpec::modsum(size, seed, operands, modulus).generate()
}

pub fn gen_longtransform(size: usize, seed: u64, multiplier: usize) -> Result<Vec<Example>> {
    TaskSpec::longtransform(size, seed, multiplier).generate()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    id: String,
    prompt: Vec<String>,
    answer: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripleLine {
    id: String,
    prompt: Vec<String>,
    cot: Vec<String>,
    answer: Vec<String>,
}

fn encode_line(vocab: &Vocab, symbols: &[String], line: usize) -> Result<Vec<Token>> {
    vocab
        .encode(symbols)
        .map_err(|symbol| Error::UnknownToken { symbol, line })
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads `{"id", "prompt", "answer"}` lines; blank lines are skipped.
pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<Example>> {
    let text = read_lines(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ExampleLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let prompt = encode_line(vocab, &rec.prompt, line)?;
        let answer = encode_line(vocab, &rec.answer, line)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.push(Example::new(rec.id, prompt, answer)?);
    }
    Ok(out)
}

fn write_json_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row).expect("rows serialize");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    write_json_lines(
        path,
        examples.iter().map(|e| ExampleLine {
            id: e.id().to_string(),
            prompt: vocab.decode(e.prompt()),
            answer: vocab.decode(e.answer()),
        }),
    )
}

/// Warm-start triples as `{"id", "prompt", "cot", "answer"}` lines.
pub fn write_triples_jsonl(path: &Path, triples: &[WarmstartTriple], vocab: &Vocab) -> Result<()> {
    write_json_lines(
        path,
        triples.iter().map(|t| TripleLine {
            id: t.example.id().to_string(),
            prompt: vocab.decode(t.example.prompt()),
            cot: vocab.decode(&t.cot),
            answer: vocab.decode(t.example.answer()),
        }),
    )
}

pub fn load_triples_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<WarmstartTriple>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: TripleLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let example = Example::new(
            rec.id,
            encode_line(vocab, &rec.prompt, line)?,
            encode_line(vocab, &rec.answer, line)?,
        )?;
        out.push(WarmstartTriple {
            example,
            cot: encode_line(vocab, &rec.cot, line)?,
        });
    }
    Ok(out)
}

/// Seeded disjoint split; `round(n · val_fraction)` examples go to validation.
/// Both parts keep the input order.
pub fn split(examples: &[Example], val_fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = examples.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Stream::new(seed, "split").rng());
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (e, v) in examples.iter().zip(is_val) {
        if v {
            val.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symbols(v: &Vocab, t: &[Token]) -> Vec<String> {
        v.decode(t)
    }

    #[test]
    fn modsum_answers() {
        let v = Vocab::builtin();
        for e in gen_modsum(200, 7, 3, 10).unwrap() {
            let s = symbols(&v, e.prompt());
            let sum: u32 = s.iter().step_by(2).map(|d| d.parse::<u32>().unwrap()).sum();
            assert_eq!(s.len(), 5);
            assert_eq!(symbols(&v, e.answer()), vec![(sum % 10).to_string()]);
        }
        let spec = TaskSpec::modsum(10, 3, 2, 10);
        assert_eq!(spec.example(4), spec.example(4));
        assert!(TaskSpec::modsum(1, 0, 1, 10).validate().is_err());
        assert!(TaskSpec::modsum(1, 0, 2, 11).validate().is_err());
    }

    #[test]
    fn longtransform_answers() {
        let v = Vocab::builtin();
        for e in gen_longtransform(100, 1, 2).unwrap() {
            let p = symbols(&v, e.prompt());
            assert!((3..=8).contains(&p.len()));
            let mut rev = p.clone();
            rev.reverse();
            assert_eq!(symbols(&v, e.answer()), [rev.clone(), rev].concat());
        }
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ex = gen_modsum(100, 0, 2, 10).unwrap();
        let (tr, va) = split(&ex, 0.1, 5).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        let (tr2, va2) = split(&ex, 0.1, 5).unwrap();
        assert_eq!((tr.clone(), va.clone()), (tr2, va2));
        let mut ids: Vec<&str> = tr.iter().chain(&va).map(|e| e.id()).collect();
        ids.sort();
        let mut all: Vec<&str> = ex.iter().map(|e| e.id()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn jsonl_errors() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::builtin();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"prompt\":[\"1\",\"+\",\"2\"],\"answer\":[\"3\"]}\n{\"id\":\"b\",\"prompt\":[\"4\"],\"answer\":[\"5\"]}\n").unwrap();
        assert_eq!(load_jsonl(&p, &v).unwrap().len(), 2);
        fs::write(&p, "{\"id\":\"a\",\"prompt\":[\"1\"],\"answer\":[\"3\"]}\n{\"id\":\"b\",\"prompt\":[\"z\"],\"answer\":[\"5\"]}\n").unwrap();
        assert!(matches!(load_jsonl(&p, &v), Err(Error::UnknownToken { line: 2, .. })));
        fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p, &v).unwrap().is_empty());
        fs::write(&p, "{\"id\":\"a\",\"prompt\":[\"1\"],\"answer\":[\"3\"]}\n{\"id\":\"a\",\"prompt\":[\"2\"],\"answer\":[\"5\"]}\n").unwrap();
        assert!(matches!(load_jsonl(&p, &v), Err(Error::DuplicateId(_))));
        fs::write(&p, "not json\n").unwrap();
        assert!(matches!(load_jsonl(&p, &v), Err(Error::Parse { line: 1, .. })));
    }
}
