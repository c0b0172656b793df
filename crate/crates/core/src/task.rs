//! The 3-digit addition task with least-significant-digit-first answers.
//!
//! A sample `a + b` is rendered as the prompt `AAA+BBB=` followed by the
//! answer: the 4-digit zero-padded sum written backwards, then `$`. The
//! sequence shown to a model is `$` + prompt + answer (14 tokens), `$`
//! doubling as the start marker and the end-of-answer marker.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::rng::LabRng;

pub const SYMBOLS: [char; 13] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '+', '=', '$',
];
pub const VOCAB_SIZE: usize = SYMBOLS.len();
pub const PLUS: usize = 10;
pub const EQUALS: usize = 11;
pub const DOLLAR: usize = 12;

pub const PROMPT_LEN: usize = 8;
pub const ANSWER_LEN: usize = 5;
/// `$` + prompt + answer.
pub const SEQUENCE_LEN: usize = 1 + PROMPT_LEN + ANSWER_LEN;
/// Number of distinct `(a, b)` operand pairs.
pub const PAIR_SPACE: usize = 1_000_000;

pub fn token_id(c: char) -> Result<usize> {
    SYMBOLS
        .iter()
        .position(|&s| s == c)
        .ok_or(LabError::Tokenize(c))
}

pub fn tokenize(s: &str) -> Result<Vec<usize>> {
    s.chars().map(token_id).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    ids.iter()
        .map(|&id| {
            SYMBOLS.get(id).copied().ok_or(LabError::Index {
                id,
                size: VOCAB_SIZE,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AdditionSample {
    pub a: u32,
    pub b: u32,
    /// Token ids of `AAA+BBB=`.
    pub prompt: Vec<usize>,
    /// Token ids of the reversed 4-digit sum followed by `$`.
    pub answer: Vec<usize>,
}

pub fn render_sample(a: u32, b: u32) -> Result<AdditionSample> {
    if a > 999 || b > 999 {
        return Err(LabError::Domain(format!(
            "operands must lie in 0..=999, got ({a}, {b})"
        )));
    }
    let prompt = tokenize(&format!("{a:03}+{b:03}="))?;
    let sum: String = format!("{:04}", a + b).chars().rev().collect();
    let answer = tokenize(&format!("{sum}$"))?;
    Ok(AdditionSample {
        a,
        b,
        prompt,
        answer,
    })
}

impl AdditionSample {
    /// The full 14-token sequence `$AAA+BBB=SSSS$`.
    pub fn sequence(&self) -> Vec<usize> {
        let mut seq = Vec::with_capacity(SEQUENCE_LEN);
        seq.push(DOLLAR);
        seq.extend_from_slice(&self.prompt);
        seq.extend_from_slice(&self.answer);
        seq
    }

    /// What a decoder sees before producing the first answer token.
    pub fn decoder_prefix(&self) -> Vec<usize> {
        let mut seq = Vec::with_capacity(1 + PROMPT_LEN);
        seq.push(DOLLAR);
        seq.extend_from_slice(&self.prompt);
        seq
    }

    /// Prompt immediately followed by answer, e.g. `123+456=9750$`.
    pub fn text(&self) -> String {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(&self.answer);
        detokenize(&ids).expect("rendered ids are in vocabulary")
    }

    /// Parses a rendered line and checks that its answer is the true sum.
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || LabError::Domain(format!("malformed sample line {line:?}"));
        let line = line.trim();
        tokenize(line)?;
        let (lhs, rest) = line.split_once('+').ok_or_else(bad)?;
        let (rhs, answer) = rest.split_once('=').ok_or_else(bad)?;
        if lhs.len() != 3 || rhs.len() != 3 || answer.len() != ANSWER_LEN {
            return Err(bad());
        }
        let a = lhs.parse().map_err(|_| bad())?;
        let b = rhs.parse().map_err(|_| bad())?;
        let sample = render_sample(a, b)?;
        if sample.text() != line {
            return Err(LabError::Domain(format!(
                "line {line:?} does not carry the sum of its operands"
            )));
        }
        Ok(sample)
    }
}

/// Reads the integer sum back out of a reversed answer.
pub fn parse_answer(answer: &[usize]) -> Option<u32> {
    if answer.len() != ANSWER_LEN || answer[4] != DOLLAR {
        return None;
    }
    answer[..4]
        .iter()
        .rev()
        .try_fold(0u32, |acc, &d| (d < 10).then(|| acc * 10 + d as u32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<AdditionSample>,
    pub test: Vec<AdditionSample>,
    pub seed: u64,
}

/// Draws `n_train + n_test` distinct operand pairs uniformly without
/// replacement (sparse Fisher–Yates over the 10^6 pair space).
pub fn generate_splits(n_train: usize, n_test: usize, seed: u64) -> Result<DatasetSplit> {
    let total = n_train + n_test;
    if total > PAIR_SPACE {
        return Err(LabError::Capacity {
            requested: total,
            available: PAIR_SPACE,
        });
    }
    let mut rng = LabRng::derived(seed, 1);
    let mut swapped: HashMap<usize, usize> = HashMap::new();
    let mut picks = Vec::with_capacity(total);
    for i in 0..total {
        let j = i + rng.below(PAIR_SPACE - i);
        let vi = *swapped.get(&i).unwrap_or(&i);
        let vj = *swapped.get(&j).unwrap_or(&j);
        swapped.insert(j, vi);
        picks.push(vj);
    }
    let to_sample = |p: usize| render_sample((p / 1000) as u32, (p % 1000) as u32);
    let mut samples = picks
        .into_iter()
        .map(to_sample)
        .collect::<Result<Vec<_>>>()?;
    let test = samples.split_off(n_train);
    Ok(DatasetSplit {
        train: samples,
        test,
        seed,
    })
}

impl DatasetSplit {
    pub fn overlap(&self) -> usize {
        let train: HashSet<(u32, u32)> = self.train.iter().map(|s| (s.a, s.b)).collect();
        self.test
            .iter()
            .filter(|s| train.contains(&(s.a, s.b)))
            .count()
    }
}

pub fn write_samples(path: &Path, samples: &[AdditionSample]) -> Result<()> {
    let mut text = String::with_capacity(samples.len() * 14);
    for s in samples {
        text.push_str(&s.text());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<AdditionSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(AdditionSample::parse)
        .collect()
}

/// Anything that can propose the next token for a batch of equal-length
/// prefixes.
pub trait NextToken {
    fn next_tokens(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<usize>>;
}

/// Greedily decodes `ANSWER_LEN` tokens after each sample's prompt.
pub fn decode_answers<D: NextToken + ?Sized>(
    decoder: &mut D,
    samples: &[AdditionSample],
) -> Result<Vec<Vec<usize>>> {
    let prefixes: Vec<Vec<usize>> = samples.iter().map(|s| s.decoder_prefix()).collect();
    decode_from_prefixes(decoder, prefixes)
}

pub fn decode_from_prefixes<D: NextToken + ?Sized>(
    decoder: &mut D,
    mut prefixes: Vec<Vec<usize>>,
) -> Result<Vec<Vec<usize>>> {
    let start = prefixes.first().map_or(0, Vec::len);
    for _ in 0..ANSWER_LEN {
        let next = decoder.next_tokens(&prefixes)?;
        for (p, t) in prefixes.iter_mut().zip(next) {
            p.push(t);
        }
    }
    Ok(prefixes.into_iter().map(|p| p[start..].to_vec()).collect())
}

pub fn count_exact_matches<D: NextToken + ?Sized>(
    decoder: &mut D,
    samples: &[AdditionSample],
) -> Result<usize> {
    let decoded = decode_answers(decoder, samples)?;
    Ok(decoded
        .iter()
        .zip(samples)
        .filter(|(d, s)| **d == s.answer)
        .count())
}

/// Fraction of samples whose five greedily decoded tokens equal the answer.
pub fn evaluate_exact_match<D: NextToken + ?Sized>(
    decoder: &mut D,
    samples: &[AdditionSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(LabError::Contract(
            "exact-match needs at least one sample".into(),
        ));
    }
    Ok(count_exact_matches(decoder, samples)? as f64 / samples.len() as f64)
}

impl fmt::Display for AdditionSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}
