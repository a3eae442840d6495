//! Synthetic corpus generation: a hidden-Markov source with exactly known
//! distribution, fixed train/val/test splits, and a plain-text dataset format.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Printable symbols used for vocabulary ids, in id order.
const SYMBOL_ALPHABET: &str =
    "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ!#$%&()*+,-./:;<=>?@[]^_{|}~";

/// Dense id <-> printable-symbol vocabulary of size V >= 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocab size must be >= 2, got {size}"
            )));
        }
        let alphabet: Vec<char> = SYMBOL_ALPHABET.chars().collect();
        if size > alphabet.len() {
            return Err(Error::InvalidArgument(format!(
                "vocab size {size} exceeds the {} available printable symbols",
                alphabet.len()
            )));
        }
        Ok(Vocab {
            symbols: alphabet[..size].to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    pub fn id(&self, symbol: char) -> Option<usize> {
        self.symbols.iter().position(|&c| c == symbol)
    }
}

/// One (prompt, continuation) pair of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqPair {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

/// Hidden-Markov data-generating process: `num_states` hidden states with
/// row-normalized transition and emission matrices drawn deterministically
/// from `seed`. Sequences start from the stationary state distribution so
/// the marginal token distribution is position-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub num_states: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// num_states x num_states, rows sum to 1.
    pub transition: Vec<Vec<f64>>,
    /// num_states x vocab_size, rows sum to 1.
    pub emission: Vec<Vec<f64>>,
    /// Stationary distribution of `transition`.
    pub initial: Vec<f64>,
}

/// Role tag for a dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SeqPair>,
    pub role: Role,
}

/// Draws a random probability row by normalizing cubed Exp(1) variates.
/// Cubing concentrates mass on a few entries per row, which keeps the
/// process entropy well below uniform so there is structure to learn.
fn random_prob_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let e = -u.ln();
            e * e * e
        })
        .collect();
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
    // One more pass so the row sums to 1 within 1e-12 regardless of len.
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
    row
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut dist = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                next[j] += dist[i] * p;
            }
        }
        let sum: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= sum;
        }
        let diff: f64 = next
            .iter()
            .zip(dist.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        dist = next;
        if diff < 1e-14 {
            break;
        }
    }
    dist
}

pub fn make_generator(num_states: usize, vocab_size: usize, seed: u64) -> Result<GeneratorSpec> {
    if num_states < 2 {
        return Err(Error::InvalidArgument(format!(
            "too few states: need >= 2, got {num_states}"
        )));
    }
    if vocab_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "too few vocabulary symbols: need >= 2, got {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transition: Vec<Vec<f64>> = (0..num_states)
        .map(|_| random_prob_row(&mut rng, num_states))
        .collect();
    let emission: Vec<Vec<f64>> = (0..num_states)
        .map(|_| random_prob_row(&mut rng, vocab_size))
        .collect();
    let initial = stationary_distribution(&transition);
    Ok(GeneratorSpec {
        num_states,
        vocab_size,
        seed,
        transition,
        emission,
        initial,
    })
}

impl GeneratorSpec {
    /// Marginal token distribution under the stationary state distribution.
    pub fn stationary_token_dist(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        for (s, w) in self.initial.iter().enumerate() {
            for (v, &e) in self.emission[s].iter().enumerate() {
                out[v] += w * e;
            }
        }
        out
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn sample_corpus(
    spec: &GeneratorSpec,
    n_pairs: usize,
    prompt_len: usize,
    cont_len: usize,
    rng_seed: u64,
) -> Result<Dataset> {
    if n_pairs < 1 {
        return Err(Error::InvalidArgument("n_pairs must be >= 1".into()));
    }
    if prompt_len < 1 || cont_len < 1 {
        return Err(Error::InvalidArgument(
            "prompt and continuation lengths must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let total_len = prompt_len + cont_len;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let mut state = sample_categorical(&mut rng, &spec.initial);
        let mut tokens = Vec::with_capacity(total_len);
        for _ in 0..total_len {
            tokens.push(sample_categorical(&mut rng, &spec.emission[state]));
            state = sample_categorical(&mut rng, &spec.transition[state]);
        }
        let y = tokens.split_off(prompt_len);
        pairs.push(SeqPair { x: tokens, y });
    }
    Ok(Dataset {
        pairs,
        role: Role::Train,
    })
}

/// Order-preserving split into (train, val, test). Val and test sizes round
/// down; the remainder goes to train.
pub fn split(dataset: Dataset, fractions: (f64, f64, f64)) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(Error::InvalidArgument("fractions must be positive".into()));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "fractions must sum to 1, got {}",
            ft + fv + fe
        )));
    }
    let n = dataset.pairs.len();
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fe).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(format!(
            "empty split: sizes ({n_train}, {n_val}, {n_test}) from {n} pairs"
        )));
    }
    let mut pairs = dataset.pairs;
    let test_pairs = pairs.split_off(n_train + n_val);
    let val_pairs = pairs.split_off(n_train);
    Ok((
        Dataset {
            pairs,
            role: Role::Train,
        },
        Dataset {
            pairs: val_pairs,
            role: Role::Val,
        },
        Dataset {
            pairs: test_pairs,
            role: Role::Test,
        },
    ))
}

/// Header metadata carried by a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub cont_len: usize,
    pub seed: u64,
}

/// Writes one pair per line as `x-tokens TAB y-tokens` with a
/// `#vocab=V m=M L=LEN seed=S` header line.
pub fn write_dataset(path: &Path, dataset: &Dataset, header: &DatasetHeader) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "#vocab={} m={} L={} seed={}",
        header.vocab_size, header.prompt_len, header.cont_len, header.seed
    )
    .expect("string write");
    for pair in &dataset.pairs {
        let xs: Vec<String> = pair.x.iter().map(|t| t.to_string()).collect();
        let ys: Vec<String> = pair.y.iter().map(|t| t.to_string()).collect();
        writeln!(out, "{}\t{}", xs.join(" "), ys.join(" ")).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path, role: Role) -> Result<(Dataset, DatasetHeader)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Dataset("empty dataset file".into()))??;
    let header = parse_header(&header_line)?;
    let mut pairs = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (xs, ys) = line
            .split_once('\t')
            .ok_or_else(|| Error::Dataset(format!("missing tab separator in line: {line}")))?;
        let parse_tokens = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Dataset(format!("bad token id: {t}")))
                })
                .collect()
        };
        let x = parse_tokens(xs)?;
        let y = parse_tokens(ys)?;
        if x.iter().chain(y.iter()).any(|&t| t >= header.vocab_size) {
            return Err(Error::Dataset("token id out of vocabulary range".into()));
        }
        pairs.push(SeqPair { x, y });
    }
    if pairs.is_empty() {
        return Err(Error::Dataset("dataset file has no pairs".into()));
    }
    Ok((Dataset { pairs, role }, header))
}

fn parse_header(line: &str) -> Result<DatasetHeader> {
    let line = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Dataset("dataset header must start with '#'".into()))?;
    let mut vocab = None;
    let mut m = None;
    let mut l = None;
    let mut seed = None;
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Dataset(format!("bad header field: {field}")))?;
        match key {
            "vocab" => vocab = Some(value.parse().map_err(|_| bad_header(field))?),
            "m" => m = Some(value.parse().map_err(|_| bad_header(field))?),
            "L" => l = Some(value.parse().map_err(|_| bad_header(field))?),
            "seed" => seed = Some(value.parse().map_err(|_| bad_header(field))?),
            _ => return Err(Error::Dataset(format!("unknown header key: {key}"))),
        }
    }
    match (vocab, m, l, seed) {
        (Some(vocab_size), Some(prompt_len), Some(cont_len), Some(seed)) => Ok(DatasetHeader {
            vocab_size,
            prompt_len,
            cont_len,
            seed,
        }),
        _ => Err(Error::Dataset("incomplete dataset header".into())),
    }
}

fn bad_header(field: &str) -> Error {
    Error::Dataset(format!("bad header field: {field}"))
}
