//! Masked kernels with their input bindings, expected leaks and reference
//! functions.

mod manifest;
pub mod oracle;

pub use manifest::{parse_manifest, RawEntry};

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::asm::{parse, ParseError, Program};
use crate::leakage::MAX_STEPS;
use crate::machine::{run, ExecError, MachineState};
use crate::tvla::{CampaignError, CampaignSpec, Cause, InputBinding};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("entry `{0}` needs program, oracle and output keys")]
    Incomplete(String),
    #[error("{file}: {source}")]
    Parse {
        file: String,
        #[source]
        source: ParseError,
    },
    #[error("entry `{entry}`: {source}")]
    Binding {
        entry: String,
        #[source]
        source: CampaignError,
    },
    #[error("entry `{entry}`: unknown oracle `{oracle}`")]
    UnknownOracle { entry: String, oracle: String },
    #[error("entry `{entry}`: output term `{term}` names neither a region nor a mask")]
    UnknownTerm { entry: String, term: String },
    #[error("entry `{entry}`: output term `{term}` is out of bounds")]
    TermBounds { entry: String, term: String },
    #[error("no corpus entry named `{0}`")]
    NoSuchEntry(String),
    #[error("entry `{entry}`, input {trial}: {source}")]
    Exec {
        entry: String,
        trial: usize,
        #[source]
        source: ExecError,
    },
    #[error("entry `{entry}`, input {trial}: output {got:02x?}, oracle {expected:02x?}")]
    OracleMismatch {
        entry: String,
        trial: usize,
        expected: Vec<u8>,
        got: Vec<u8>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputOp {
    /// Bytewise XOR of the terms.
    Xor,
    /// Wrapping sum of little-endian words.
    Add,
}

/// `NAME[start..end]` over a data region or a drawn mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub name: String,
    pub start: usize,
    pub end: usize,
    /// Right rotation in bits, applied to a one-word term.
    pub rotate: u32,
}

/// How to recombine shares in the final state into unmasked output bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputExpr {
    pub op: OutputOp,
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub name: String,
    pub path: PathBuf,
    pub program: Program,
    pub binding: InputBinding,
    pub expected: Vec<Cause>,
    pub outputs: Vec<OutputExpr>,
    pub oracle: String,
    pub description: String,
}

/// Directory holding the checked-in corpus.
pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

pub fn load_corpus() -> Result<Vec<CorpusEntry>, CorpusError> {
    load_corpus_from(&corpus_dir())
}

pub fn load_entry(name: &str) -> Result<CorpusEntry, CorpusError> {
    load_corpus()?
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CorpusError::NoSuchEntry(name.to_string()))
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads `manifest.txt` and the programs it names from `dir`.
pub fn load_corpus_from(dir: &Path) -> Result<Vec<CorpusEntry>, CorpusError> {
    let raw = parse_manifest(&read(&dir.join("manifest.txt"))?)?;
    raw.into_iter()
        .map(|r| {
            let path = dir.join(&r.program);
            let program = parse(&read(&path)?).map_err(|source| CorpusError::Parse {
                file: r.program.clone(),
                source,
            })?;
            let entry = CorpusEntry {
                name: r.name,
                path,
                program,
                binding: InputBinding {
                    input_len: r.input_len,
                    masks: r.masks,
                    regions: r.regions,
                    regs: r.regs,
                },
                expected: r.expected,
                outputs: r.outputs,
                oracle: r.oracle,
                description: r.description,
            };
            entry.validate()?;
            Ok(entry)
        })
        .collect()
}

impl CorpusEntry {
    fn validate(&self) -> Result<(), CorpusError> {
        self.binding.check(&self.program).map_err(|source| CorpusError::Binding {
            entry: self.name.clone(),
            source,
        })?;
        if oracle::lookup(&self.oracle).is_none() {
            return Err(CorpusError::UnknownOracle {
                entry: self.name.clone(),
                oracle: self.oracle.clone(),
            });
        }
        let mask_len = self.program.data.iter().map(|r| r.bytes.len()).chain([4]).max().unwrap_or(4);
        for t in self.outputs.iter().flat_map(|o| &o.terms) {
            let len = match self.program.region(&t.name) {
                Some(r) => r.bytes.len(),
                None if self.binding.masks.iter().any(|m| m.name == t.name) => mask_len,
                None => {
                    return Err(CorpusError::UnknownTerm {
                        entry: self.name.clone(),
                        term: t.name.clone(),
                    })
                }
            };
            if t.end > len {
                return Err(CorpusError::TermBounds {
                    entry: self.name.clone(),
                    term: format!("{}[{}..{}]", t.name, t.start, t.end),
                });
            }
        }
        Ok(())
    }

    /// Campaign over this entry's program (or a rewrite of it).
    pub fn campaign(&self, program: Program, fixed_inputs: Vec<Vec<u8>>) -> CampaignSpec {
        CampaignSpec::new(program, self.binding.clone(), fixed_inputs)
    }

    /// Initial state drawn the way campaigns draw it, for a random input.
    pub fn sample_state(&self, program: &Program, rng: &mut ChaCha12Rng) -> MachineState {
        let mut input = vec![0u8; self.binding.input_len];
        rng.fill_bytes(&mut input);
        self.binding.materialize(program, &input, rng)
    }

    /// Recombined output of a finished run.
    pub fn output(&self, state: &MachineState, masks: &[Vec<u8>]) -> Vec<u8> {
        let bytes = |t: &Term| -> Vec<u8> {
            let raw = match state.mem.region(&t.name) {
                Some(r) => &r.bytes[t.start..t.end],
                None => {
                    let i = self.binding.masks.iter().position(|m| m.name == t.name).expect("validated term");
                    &masks[i][t.start..t.end]
                }
            };
            if t.rotate == 0 {
                return raw.to_vec();
            }
            let w = u32::from_le_bytes(raw.try_into().expect("word"));
            w.rotate_right(t.rotate).to_le_bytes().to_vec()
        };
        let mut out = Vec::new();
        for expr in &self.outputs {
            let mut acc = bytes(&expr.terms[0]);
            for t in &expr.terms[1..] {
                let b = bytes(t);
                match expr.op {
                    OutputOp::Xor => acc.iter_mut().zip(&b).for_each(|(x, y)| *x ^= y),
                    OutputOp::Add => {
                        for (x, y) in acc.chunks_mut(4).zip(b.chunks(4)) {
                            let s = u32::from_le_bytes(x[..].try_into().expect("word"))
                                .wrapping_add(u32::from_le_bytes(y.try_into().expect("word")));
                            x.copy_from_slice(&s.to_le_bytes());
                        }
                    }
                }
            }
            out.extend(acc);
        }
        out
    }

    /// Runs `program` on `n` random inputs with fresh masks and compares the
    /// recombined output against the reference function.
    pub fn check_oracle(&self, program: &Program, n: usize, seed: u64) -> Result<(), CorpusError> {
        let f = oracle::lookup(&self.oracle).expect("validated oracle");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for trial in 0..n {
            let mut input = vec![0u8; self.binding.input_len];
            rng.fill_bytes(&mut input);
            let (init, masks) = self.binding.materialize_with_masks(program, &input, &mut rng);
            let (state, _) = run(program, init, MAX_STEPS).map_err(|source| CorpusError::Exec {
                entry: self.name.clone(),
                trial,
                source,
            })?;
            let got = self.output(&state, &masks);
            let expected = f(&input);
            if got != expected {
                return Err(CorpusError::OracleMismatch {
                    entry: self.name.clone(),
                    trial,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}
