//! Numerical checks of permutation invariance and equivariance.
//!
//! Without positional embeddings and without the causal mask, every
//! operation in the model either acts position-wise or (attention) mixes
//! positions symmetrically. Permuting input positions therefore permutes the
//! output rows, and the logits at the final position depend only on the
//! multiset of earlier tokens. Either mechanism alone breaks the symmetry.

use std::fmt;

use crate::error::{LabError, Result};
use crate::model::TransformerModel;
use crate::rng::LabRng;
use crate::task::{decode_answers, decode_from_prefixes, AdditionSample};
use crate::tensor::Tensor;

/// Deviation below which logits count as unchanged. Rounding noise in
/// 64-bit floats sits near 1e-13; broken symmetry shows up above 1e-3.
pub const INVARIANCE_TOL: f64 = 1e-9;
/// Deviation above which symmetry counts as generically broken.
pub const SYMMETRY_BREAK_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Invariant,
    SymmetryBroken,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Invariant => "invariant",
            Verdict::SymmetryBroken => "symmetry-broken",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationTestReport {
    pub config: String,
    pub prompt_len: usize,
    pub n_permutations: usize,
    /// Max |Δ| over final-position logits when positions `1..l-1` are
    /// permuted and the last position is fixed.
    pub max_final_position_logit_deviation: f64,
    /// Max |Δ| between `f(π·x)` and `π·f(x)` over all logits for full
    /// permutations.
    pub max_equivariance_deviation: f64,
    /// How many of the sampled prefix permutations moved some final logit
    /// by more than [`SYMMETRY_BREAK_TOL`].
    pub n_breaking: usize,
    pub verdict: Verdict,
}

impl PermutationTestReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "config: {}\nprompt_len: {}\nn_permutations: {}\n\
             max_final_position_logit_deviation: {:e}\nmax_equivariance_deviation: {:e}\n\
             n_breaking_permutations: {}\ninvariance_tolerance: {:e}\nverdict: {}\n",
            self.config,
            self.prompt_len,
            self.n_permutations,
            self.max_final_position_logit_deviation,
            self.max_equivariance_deviation,
            self.n_breaking,
            INVARIANCE_TOL,
            self.verdict
        )
    }
}

fn permute<T: Copy>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| items[i]).collect()
}

/// Max absolute difference between the final-position logits of `tokens`
/// and of `tokens` reordered by `perm` (`out[i] = tokens[perm[i]]`).
pub fn final_position_deviation(
    model: &TransformerModel,
    tokens: &[usize],
    perm: &[usize],
) -> Result<f64> {
    check_perm(perm, tokens.len())?;
    let base = model.logits(tokens)?;
    let moved = model.logits(&permute(tokens, perm))?;
    let last = tokens.len() - 1;
    Ok(max_abs(base.row(last), moved.row(last)))
}

/// Max absolute difference between `f(π·x)` and `π·f(x)` over all rows.
pub fn equivariance_deviation(
    model: &TransformerModel,
    tokens: &[usize],
    perm: &[usize],
) -> Result<f64> {
    check_perm(perm, tokens.len())?;
    let base = model.logits(tokens)?;
    let moved = model.logits(&permute(tokens, perm))?;
    Ok(perm
        .iter()
        .enumerate()
        .map(|(i, &src)| max_abs(moved.row(i), base.row(src)))
        .fold(0.0, f64::max))
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n
        || !perm
            .iter()
            .all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
    {
        return Err(LabError::Contract(format!(
            "{perm:?} is not a permutation of 0..{n}"
        )));
    }
    Ok(())
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Draws a permutation of `0..n` that actually reorders `tokens` within
/// `0..movable` and leaves positions `movable..n` fixed.
fn effective_permutation(rng: &mut LabRng, tokens: &[usize], movable: usize) -> Option<Vec<usize>> {
    for _ in 0..64 {
        let mut perm: Vec<usize> = (0..tokens.len()).collect();
        rng.shuffle(&mut perm[..movable]);
        if permute(tokens, &perm) != tokens {
            return Some(perm);
        }
    }
    None
}

fn random_tokens(rng: &mut LabRng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab)).collect()
}

/// Samples `n_permutations` random token sequences of length `prompt_len`
/// and, for each, one prefix permutation (last position fixed) and one full
/// permutation, both chosen so the sequence really changes.
pub fn check_invariance(
    model: &TransformerModel,
    prompt_len: usize,
    n_permutations: usize,
    seed: u64,
) -> Result<PermutationTestReport> {
    if prompt_len < 3 || prompt_len > model.config.context_len {
        return Err(LabError::Contract(format!(
            "prompt_len must lie in 3..={}, got {prompt_len}",
            model.config.context_len
        )));
    }
    let vocab = model.config.vocab_size;
    let mut rng = LabRng::derived(seed, 3);
    let mut worst_final = 0.0_f64;
    let mut worst_equi = 0.0_f64;
    let mut n_breaking = 0;
    let mut done = 0;
    while done < n_permutations {
        let tokens = random_tokens(&mut rng, prompt_len, vocab);
        let (Some(prefix), Some(full)) = (
            effective_permutation(&mut rng, &tokens, prompt_len - 1),
            effective_permutation(&mut rng, &tokens, prompt_len),
        ) else {
            continue;
        };
        let dev = final_position_deviation(model, &tokens, &prefix)?;
        if dev > SYMMETRY_BREAK_TOL {
            n_breaking += 1;
        }
        worst_final = worst_final.max(dev);
        worst_equi = worst_equi.max(equivariance_deviation(model, &tokens, &full)?);
        done += 1;
    }
    let verdict = if worst_final < INVARIANCE_TOL {
        Verdict::Invariant
    } else {
        Verdict::SymmetryBroken
    };
    Ok(PermutationTestReport {
        config: model.config.label(),
        prompt_len,
        n_permutations,
        max_final_position_logit_deviation: worst_final,
        max_equivariance_deviation: worst_equi,
        n_breaking,
        verdict,
    })
}

/// Positions of the six operand digits within a decoder prefix `$AAA+BBB=`.
pub const DIGIT_SLOTS: [usize; 6] = [1, 2, 3, 5, 6, 7];

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSymmetryReport {
    pub n_checked: usize,
    /// Samples whose decoded answer is token-identical after permuting the
    /// operand digits.
    pub n_identical: usize,
    /// Samples where the permuted prompt has a different true answer.
    pub n_answer_changed: usize,
}

/// Greedily decodes each sample before and after shuffling its six operand
/// digits and counts how often the decoded answers agree token for token.
pub fn decode_symmetry(
    model: &TransformerModel,
    samples: &[AdditionSample],
    seed: u64,
) -> Result<DecodeSymmetryReport> {
    let mut rng = LabRng::derived(seed, 4);
    let mut shuffled = Vec::with_capacity(samples.len());
    let mut n_answer_changed = 0;
    for s in samples {
        let mut prefix = s.decoder_prefix();
        let mut digits: Vec<usize> = DIGIT_SLOTS.iter().map(|&i| prefix[i]).collect();
        rng.shuffle(&mut digits);
        for (&slot, d) in DIGIT_SLOTS.iter().zip(digits) {
            prefix[slot] = d;
        }
        let val = |r: std::ops::Range<usize>| r.fold(0u32, |acc, i| acc * 10 + prefix[i] as u32);
        if val(1..4) + val(5..8) != s.a + s.b {
            n_answer_changed += 1;
        }
        shuffled.push(prefix);
    }
    let mut decoder = model;
    let original = decode_answers(&mut decoder, samples)?;
    let permuted = decode_from_prefixes(&mut decoder, shuffled)?;
    let n_identical = original
        .iter()
        .zip(&permuted)
        .filter(|(a, b)| a == b)
        .count();
    Ok(DecodeSymmetryReport {
        n_checked: samples.len(),
        n_identical,
        n_answer_changed,
    })
}

/// Attention weights of every block and head for one sequence,
/// `[n_layers][n_heads]` of `l × l` matrices.
pub fn attention_maps(model: &TransformerModel, tokens: &[usize]) -> Result<Vec<Vec<Tensor>>> {
    let mut tape = crate::autodiff::Tape::new();
    let l = tokens.len();
    let pass = model.forward(&mut tape, tokens, 1, l, false)?;
    Ok(pass
        .attention
        .iter()
        .map(|&v| {
            tape.value(v)
                .data()
                .chunks(l * l)
                .map(|c| Tensor::new(&[l, l], c.to_vec()).expect("l×l"))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::init_params;

    fn model(pe: bool, causal: bool, seed: u64) -> TransformerModel {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_mlp: 32,
            use_positional_encoding: pe,
            causal_attention: causal,
            ..ModelConfig::default()
        };
        init_params(&cfg, seed).unwrap()
    }

    #[test]
    fn identity_permutation_is_exactly_zero() {
        let m = model(true, true, 1);
        let tokens = [3, 1, 4, 1, 5, 9, 2];
        let id: Vec<usize> = (0..7).collect();
        assert_eq!(final_position_deviation(&m, &tokens, &id).unwrap(), 0.0);
        assert_eq!(equivariance_deviation(&m, &tokens, &id).unwrap(), 0.0);
    }

    #[test]
    fn non_permutations_are_rejected() {
        let m = model(false, false, 1);
        assert!(final_position_deviation(&m, &[1, 2, 3], &[0, 0, 1]).is_err());
        assert!(final_position_deviation(&m, &[1, 2, 3], &[0, 1]).is_err());
    }

    #[test]
    fn nope_non_causal_is_invariant() {
        let r = check_invariance(&model(false, false, 2), 9, 100, 5).unwrap();
        assert_eq!(r.verdict, Verdict::Invariant, "{}", r.to_text());
        assert!(r.max_equivariance_deviation < INVARIANCE_TOL);
        assert_eq!(r.n_breaking, 0);
    }

    #[test]
    fn causal_or_positions_break_symmetry() {
        for (pe, causal) in [(false, true), (true, false), (true, true)] {
            let r = check_invariance(&model(pe, causal, 3), 9, 20, 6).unwrap();
            assert_eq!(r.verdict, Verdict::SymmetryBroken, "{}", r.to_text());
            assert!(r.max_final_position_logit_deviation > SYMMETRY_BREAK_TOL);
        }
    }

    #[test]
    fn prompt_len_is_validated() {
        assert!(check_invariance(&model(false, false, 1), 2, 5, 0).is_err());
        assert!(check_invariance(&model(false, false, 1), 15, 5, 0).is_err());
    }

    #[test]
    fn report_text_has_key_value_lines() {
        let r = check_invariance(&model(false, false, 2), 5, 3, 1).unwrap();
        let text = r.to_text();
        assert!(text.lines().all(|l| l.contains(": ")));
        assert!(text.contains("verdict: invariant"));
    }

    #[test]
    fn non_causal_nope_decodes_identically_under_digit_shuffles() {
        let m = model(false, false, 4);
        let split = crate::task::generate_splits(0, 40, 2).unwrap();
        let r = decode_symmetry(&m, &split.test, 3).unwrap();
        assert_eq!(r.n_identical, r.n_checked);
        assert!(r.n_answer_changed > 0);
    }

    #[test]
    fn causal_attention_maps_are_lower_triangular() {
        let m = model(false, true, 5);
        let maps = attention_maps(&m, &[12, 1, 2, 3, 10, 4, 5, 6, 11]).unwrap();
        assert_eq!(maps.len(), 2);
        for head in maps.iter().flatten() {
            for i in 0..9 {
                for j in i + 1..9 {
                    assert_eq!(head.get2(i, j), 0.0);
                }
                let s: f64 = head.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
