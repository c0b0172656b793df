//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Criteria 5 to 8 train desk-scale models with the default config. Each
//! finished run is cached as a checkpoint under `target/acceptance/`
//! (override with `NOPELAB_ACCEPTANCE_DIR`) together with the exact config
//! it was trained with. A cached run is reused only when that config matches
//! the current one; its accuracy is always re-measured from the checkpoint.
//! `NOPELAB_ACCEPTANCE_FRESH=1` ignores the cache, and
//! `NOPELAB_ACCEPTANCE_ONLY=1,2,3` restricts the run to some criteria.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use nopelab::analysis::{
    block_structure, check_invariance, collect_activations, correlation_matrix, decode_symmetry,
    render_heatmap, Positions, Tap, Verdict, INVARIANCE_TOL, SYMMETRY_BREAK_TOL,
};
use nopelab::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use nopelab::rng::LabRng;
use nopelab::task::{generate_splits, DatasetSplit};
use nopelab::trainer::{ProgressPrinter, Trainer};
use nopelab::{
    grad_check, init_params, ExperimentConfig, GeluKind, ModelConfig, Result, Tape, Tensor,
    TransformerModel,
};

const GRAD_TOL: f64 = 1e-6;
const GRAD_STEP: f64 = 1e-5;
const PE_TARGET: f64 = 99.0;
const NOPE_TARGET: f64 = 90.0;
const ABLATED_CEILING: f64 = 10.0;
const PARTIAL_ABLATION_TARGET: f64 = 50.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

struct Trained {
    model: TransformerModel,
    /// Exact-match accuracy on the full test split, in percent.
    accuracy: f64,
    wall_seconds: f64,
}

struct Lab {
    dir: PathBuf,
    fresh: bool,
    split: DatasetSplit,
    runs: HashMap<String, Trained>,
}

fn variant(pe: bool, causal: bool, ablated: &[usize]) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.use_positional_encoding = pe;
    c.model.causal_attention = causal;
    c.model.ablated_layers = ablated.iter().copied().collect();
    c
}

fn run_id(c: &ExperimentConfig, seed: u64) -> String {
    let layers: Vec<String> = c
        .model
        .ablated_layers
        .iter()
        .map(|l| l.to_string())
        .collect();
    format!(
        "{}_{}_ablate{}_seed{seed}",
        if c.model.use_positional_encoding {
            "pe"
        } else {
            "nope"
        },
        if c.model.causal_attention {
            "causal"
        } else {
            "noncausal"
        },
        if layers.is_empty() {
            "none".to_string()
        } else {
            layers.join("-")
        }
    )
}

impl Lab {
    fn new() -> Result<Self> {
        let dir = std::env::var_os("NOPELAB_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| {
                PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance")
            });
        let data = ExperimentConfig::default().data;
        Ok(Lab {
            dir,
            fresh: std::env::var("NOPELAB_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1"),
            split: generate_splits(data.n_train, data.n_test, data.seed)?,
            runs: HashMap::new(),
        })
    }

    /// Trains (or reloads) one model; `config.train.seed` is set to `seed`.
    fn trained(&mut self, config: &ExperimentConfig, seed: u64) -> Result<&Trained> {
        let mut config = config.clone();
        config.train.seed = seed;
        let id = run_id(&config, seed);
        if !self.runs.contains_key(&id) {
            let run = self.load_or_train(&config, seed, &id)?;
            eprintln!(
                "  {id}: {:.2}% ({:.0} s training)",
                run.accuracy, run.wall_seconds
            );
            self.runs.insert(id.clone(), run);
        }
        Ok(&self.runs[&id])
    }

    fn load_or_train(&self, config: &ExperimentConfig, seed: u64, id: &str) -> Result<Trained> {
        let dir = self.dir.join(id);
        let (ckpt, cfg_path, wall_path) = (
            dir.join("model.ckpt"),
            dir.join("config.toml"),
            dir.join("wall_seconds"),
        );
        let cached = !self.fresh
            && ckpt.exists()
            && std::fs::read_to_string(&cfg_path).is_ok_and(|t| t == config.to_toml());
        let (trainer, wall_seconds) = if cached {
            let t = load_checkpoint(&ckpt)?;
            let wall = std::fs::read_to_string(&wall_path)
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(f64::NAN);
            (t, wall)
        } else {
            eprintln!("  training {id}");
            let mut trainer = Trainer::new(config.clone(), seed)?;
            let mut printer = ProgressPrinter {
                every: config.train.eval_interval,
                prefix: format!("  [{id}] "),
            };
            let report = trainer.run(&self.split, &mut printer)?;
            std::fs::create_dir_all(&dir).map_err(|e| nopelab::LabError::io(&dir, e))?;
            save_checkpoint(&ckpt, &trainer)?;
            std::fs::write(&wall_path, format!("{}\n", report.wall_seconds))
                .map_err(|e| nopelab::LabError::io(&wall_path, e))?;
            std::fs::write(&cfg_path, config.to_toml())
                .map_err(|e| nopelab::LabError::io(&cfg_path, e))?;
            (trainer, report.wall_seconds)
        };
        let accuracy = 100.0 * trainer.evaluate(&self.split.test)?;
        Ok(Trained {
            model: trainer.model,
            accuracy,
            wall_seconds,
        })
    }
}

/// NoPE with non-causal attention: next-token logits are invariant to
/// permutations of the preceding tokens, and the whole map is equivariant.
fn criterion_1(_: &mut Lab) -> Result<Outcome> {
    let mut worst_final = 0.0_f64;
    let mut worst_equi = 0.0_f64;
    let mut all_invariant = true;
    for seed in 1..=5u64 {
        for ablated in [&[][..], &[1, 2][..]] {
            let config = variant(false, false, ablated);
            let model = init_params(&config.model, seed)?;
            for len in [9, 13] {
                let r = check_invariance(&model, len, 100, seed)?;
                worst_final = worst_final.max(r.max_final_position_logit_deviation);
                worst_equi = worst_equi.max(r.max_equivariance_deviation);
                all_invariant &= r.verdict == Verdict::Invariant;
            }
        }
    }
    outcome(
        all_invariant && worst_final < INVARIANCE_TOL && worst_equi < INVARIANCE_TOL,
        format!(
            "5 seeds x 2 ablations x 2 lengths x 100 permutations; max final-logit dev {worst_final:.3e}, max equivariance dev {worst_equi:.3e} (tol {INVARIANCE_TOL:e})"
        ),
    )
}

/// Causal masking or positional encodings break the symmetry.
fn criterion_2(_: &mut Lab) -> Result<Outcome> {
    let mut pass = true;
    let mut detail = String::new();
    for (name, pe, causal) in [
        ("causal NoPE", false, true),
        ("non-causal PE", true, false),
        ("causal PE", true, true),
    ] {
        let mut min_dev = f64::INFINITY;
        let mut seeds_breaking = 0;
        for seed in 1..=5u64 {
            let model = init_params(&variant(pe, causal, &[]).model, seed)?;
            let r = check_invariance(&model, 9, 20, seed)?;
            if r.n_breaking >= 1 {
                seeds_breaking += 1;
            }
            min_dev = min_dev.min(r.max_final_position_logit_deviation);
        }
        pass &= seeds_breaking == 5;
        let _ = write!(
            detail,
            "{name}: {seeds_breaking}/5 seeds break (min per-seed max dev {min_dev:.3e}); "
        );
    }
    outcome(pass, format!("{detail}threshold {SYMMETRY_BREAK_TOL:e}"))
}

fn random_tensor(rng: &mut LabRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape matches")
}

type OpCheck = Box<dyn Fn(&mut Tape, nopelab::Var) -> Result<nopelab::Var>>;

/// Weighted sum `Σ w ⊙ y`, so every output entry carries a distinct weight.
fn probe(t: &mut Tape, y: nopelab::Var, w: &Tensor) -> Result<nopelab::Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

fn op_checks(rng: &mut LabRng) -> Vec<(&'static str, Tensor, OpCheck)> {
    let mut r = |shape: &[usize]| random_tensor(rng, shape);
    let (b45, bt54, bb243) = (r(&[4, 5]), r(&[5, 4]), r(&[2, 4, 3]));
    let (other, gain, bias, ln_in) = (r(&[3, 4]), r(&[6]), r(&[6]), r(&[3, 6]));
    let (w35, w25, w233, w232, w34, w36, w43, w423, w46) = (
        r(&[3, 5]),
        r(&[2, 5]),
        r(&[2, 3, 3]),
        r(&[2, 3, 3]),
        r(&[3, 4]),
        r(&[3, 6]),
        r(&[4, 3]),
        r(&[4, 2, 3]),
        r(&[4, 6]),
    );
    let (w35b, w36b, w34b) = (w35.clone(), w36.clone(), w34.clone());
    vec![
        (
            "matmul",
            r(&[3, 4]),
            Box::new(move |t: &mut Tape, x| {
                let b = t.constant(b45.clone());
                let y = t.matmul(x, b)?;
                probe(t, y, &w35)
            }) as OpCheck,
        ),
        (
            "matmul_nt",
            r(&[2, 4]),
            Box::new(move |t: &mut Tape, x| {
                let b = t.constant(bt54.clone());
                let y = t.matmul_nt(x, b)?;
                probe(t, y, &w25)
            }),
        ),
        (
            "batch_matmul",
            r(&[2, 3, 4]),
            Box::new(move |t: &mut Tape, x| {
                let b = t.constant(bb243.clone());
                let y = t.batch_matmul(x, b, false)?;
                probe(t, y, &w233)
            }),
        ),
        (
            "batch_matmul_transposed",
            r(&[2, 3, 4]),
            Box::new(move |t: &mut Tape, x| {
                let y = t.batch_matmul(x, x, true)?;
                probe(t, y, &w232)
            }),
        ),
        (
            "add_mul_scale",
            r(&[3, 4]),
            Box::new(move |t: &mut Tape, x| {
                let o = t.constant(other.clone());
                let a = t.add(x, o)?;
                let m = t.mul(a, x)?;
                let s = t.scale(m, -0.7);
                probe(t, s, &w34)
            }),
        ),
        (
            "split_merge_heads",
            r(&[4, 6]),
            Box::new(move |t: &mut Tape, x| {
                let s = t.split_heads(x, 2, 2, 2)?;
                let sq = t.mul(s, s)?;
                let y = probe(t, sq, &w423)?;
                let m = t.merge_heads(sq, 2, 2, 2)?;
                let z = probe(t, m, &w46)?;
                t.add(y, z)
            }),
        ),
        (
            "causal_mask_softmax",
            r(&[2, 3, 3]),
            Box::new(move |t: &mut Tape, x| {
                let m = t.causal_mask(x)?;
                let s = t.softmax(m)?;
                probe(t, s, &w233_b())
            }),
        ),
        (
            "softmax",
            r(&[3, 5]),
            Box::new(move |t: &mut Tape, x| {
                let s = t.softmax(x)?;
                probe(t, s, &w35b)
            }),
        ),
        (
            "layer_norm_input",
            r(&[3, 6]),
            Box::new(move |t: &mut Tape, x| {
                let (g, b) = (t.constant(gain.clone()), t.constant(bias.clone()));
                let y = t.layer_norm(x, g, b, 1e-5)?;
                probe(t, y, &w36)
            }),
        ),
        (
            "layer_norm_gain_bias",
            r(&[6]),
            Box::new(move |t: &mut Tape, p| {
                let x = t.constant(ln_in.clone());
                let y = t.layer_norm(x, p, p, 1e-5)?;
                probe(t, y, &w36b)
            }),
        ),
        (
            "gelu_tanh",
            r(&[3, 4]),
            Box::new(move |t: &mut Tape, x| {
                let y = t.gelu(x, GeluKind::Tanh);
                probe(t, y, &w34b)
            }),
        ),
        (
            "gelu_erf",
            r(&[3, 4]),
            Box::new(move |t: &mut Tape, x| {
                let y = t.gelu(x, GeluKind::Erf);
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            }),
        ),
        (
            "embedding",
            r(&[5, 3]),
            Box::new(move |t: &mut Tape, table| {
                let e = t.embedding(table, &[4, 0, 4, 2])?;
                probe(t, e, &w43)
            }),
        ),
        (
            "cross_entropy",
            r(&[4, 6]),
            Box::new(|t: &mut Tape, x| {
                t.cross_entropy(x, &[1, 5, 0, 3], &[true, false, true, true])
            }),
        ),
    ]
}

/// Fixed, distinct weights for the masked-softmax probe.
fn w233_b() -> Tensor {
    Tensor::new(
        &[2, 3, 3],
        (0..18).map(|i| (i as f64 * 0.37).sin()).collect(),
    )
    .expect("shape matches")
}

/// Central-difference check of the language-model loss against every
/// parameter of a small model.
fn model_grad_error(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let model = init_params(cfg, seed)?;
    let mut rng = LabRng::new(seed + 1000);
    let (batch, seq) = (2, 7);
    let ids: Vec<usize> = (0..batch * seq)
        .map(|_| rng.below(cfg.vocab_size))
        .collect();
    let targets: Vec<usize> = (0..batch * seq)
        .map(|_| rng.below(cfg.vocab_size))
        .collect();
    let mask: Vec<bool> = (0..batch * seq).map(|i| i % 3 != 0).collect();
    let loss = |m: &TransformerModel| -> Result<f64> {
        let mut t = Tape::new();
        let p = m.forward(&mut t, &ids, batch, seq, false)?;
        let l = t.cross_entropy(p.logits, &targets, &mask)?;
        Ok(t.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &ids, batch, seq, true)?;
    let l = tape.cross_entropy(pass.logits, &targets, &mask)?;
    tape.backward(l)?;
    let mut worst = 0.0_f64;
    for (pi, var) in pass.params.iter().enumerate() {
        let analytic = tape.grad(*var).expect("parameters track gradients");
        for i in 0..analytic.len() {
            let mut plus = model.clone();
            plus.params_mut()[pi].data_mut()[i] += GRAD_STEP;
            let mut minus = model.clone();
            minus.params_mut()[pi].data_mut()[i] -= GRAD_STEP;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * GRAD_STEP);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn criterion_3(_: &mut Lab) -> Result<Outcome> {
    let mut rng = LabRng::new(3);
    let mut worst: (&str, f64) = ("", 0.0);
    let mut n = 0;
    for (name, x, f) in op_checks(&mut rng) {
        let err = grad_check(f, &x, GRAD_STEP)?;
        if err >= worst.1 {
            worst = (name, err);
        }
        n += 1;
    }
    let tiny = |pe, causal, ablated: &[usize], tie, exact| ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 6,
        d_mlp: 10,
        use_positional_encoding: pe,
        causal_attention: causal,
        ablated_layers: ablated.iter().copied().collect::<BTreeSet<_>>(),
        tie_lm_head: tie,
        exact_gelu: exact,
        residual_scale: if ablated.is_empty() { 0.8 } else { 1.0 },
        ..ModelConfig::default()
    };
    let models = [
        tiny(true, true, &[], true, false),
        tiny(false, true, &[], true, true),
        tiny(false, false, &[1], false, false),
        tiny(true, false, &[1, 2], true, false),
    ];
    let mut model_worst = 0.0_f64;
    for (i, cfg) in models.iter().enumerate() {
        model_worst = model_worst.max(model_grad_error(cfg, 10 + i as u64)?);
    }
    outcome(
        worst.1 < GRAD_TOL && model_worst < GRAD_TOL,
        format!(
            "{n} ops, worst {} at {:.3e}; full-model loss over {} configs worst {model_worst:.3e} (tol {GRAD_TOL:e}, h {GRAD_STEP:e})",
            worst.0,
            worst.1,
            models.len()
        ),
    )
}

fn criterion_4(_: &mut Lab) -> Result<Outcome> {
    let mut rng = LabRng::new(4);
    let mut masked_nonzero = 0usize;
    let mut prefix_mismatch = 0usize;
    for trial in 0..100u64 {
        let cfg = ModelConfig {
            n_layers: 1 + rng.below(3),
            n_heads: 2,
            d_model: 16,
            d_mlp: 32,
            use_positional_encoding: rng.below(2) == 0,
            ablated_layers: if rng.below(3) == 0 {
                [1].into()
            } else {
                BTreeSet::new()
            },
            ..ModelConfig::default()
        };
        let model = init_params(&cfg, trial)?;
        let len = 2 + rng.below(cfg.context_len - 1);
        let ids: Vec<usize> = (0..len).map(|_| rng.below(cfg.vocab_size)).collect();
        let k = rng.below(len - 1);
        let mut other = ids.clone();
        other[k + 1] = (ids[k + 1] + 1 + rng.below(cfg.vocab_size - 1)) % cfg.vocab_size;

        let mut ta = Tape::new();
        let a = model.forward(&mut ta, &ids, 1, len, false)?;
        let mut tb = Tape::new();
        let b = model.forward(&mut tb, &other, 1, len, false)?;
        for w in &a.attention {
            let w = ta.value(*w);
            for h in 0..cfg.n_heads {
                for i in 0..len {
                    for j in i + 1..len {
                        if w.data()[(h * len + i) * len + j] != 0.0 {
                            masked_nonzero += 1;
                        }
                    }
                }
            }
        }
        let rows = |t: &Tape, v: nopelab::Var| {
            t.value(v).data()[..(k + 1) * t.value(v).last_dim()].to_vec()
        };
        let mut vars: Vec<(nopelab::Var, nopelab::Var)> = vec![(a.logits, b.logits)];
        vars.extend(
            a.block_outputs
                .iter()
                .copied()
                .zip(b.block_outputs.iter().copied()),
        );
        vars.extend(
            a.normalized_outputs
                .iter()
                .copied()
                .zip(b.normalized_outputs.iter().copied()),
        );
        let identical = vars.iter().all(|&(va, vb)| {
            rows(&ta, va)
                .iter()
                .zip(rows(&tb, vb))
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !identical {
            prefix_mismatch += 1;
        }
    }
    outcome(
        masked_nonzero == 0 && prefix_mismatch == 0,
        format!("100 trials; {masked_nonzero} non-zero masked weights, {prefix_mismatch} trials with a changed prefix activation"),
    )
}

/// Trains seeds 1..=3 until the "at least two of three" question is settled.
fn two_of_three(
    lab: &mut Lab,
    config: &ExperimentConfig,
    target: f64,
) -> Result<(bool, Vec<(f64, f64)>)> {
    let mut results = Vec::new();
    for seed in 1..=3u64 {
        let t = lab.trained(config, seed)?;
        results.push((t.accuracy, t.wall_seconds));
        let hits = results.iter().filter(|(a, _)| *a >= target).count();
        let misses = results.len() - hits;
        if hits >= 2 || misses >= 2 {
            return Ok((hits >= 2, results));
        }
    }
    unreachable!("three seeds always settle two of three")
}

fn list(results: &[(f64, f64)]) -> String {
    let items: Vec<String> = results
        .iter()
        .map(|(a, w)| format!("{a:.2}% in {:.0} min", w / 60.0))
        .collect();
    items.join(", ")
}

fn criterion_5(lab: &mut Lab) -> Result<Outcome> {
    let (pe_ok, pe) = two_of_three(lab, &variant(true, true, &[]), PE_TARGET)?;
    // all three NoPE seeds are needed as baselines for criterion 8
    let nope_cfg = variant(false, true, &[]);
    let mut nope = Vec::new();
    for seed in 1..=3 {
        let t = lab.trained(&nope_cfg, seed)?;
        nope.push((t.accuracy, t.wall_seconds));
    }
    let nope_ok = nope.iter().filter(|(a, _)| *a >= NOPE_TARGET).count() >= 2;
    outcome(
        pe_ok && nope_ok,
        format!(
            "PE [{}] need >= {PE_TARGET}%; NoPE [{}] need >= {NOPE_TARGET}%; on >= 2 of 3 seeds",
            list(&pe),
            list(&nope)
        ),
    )
}

fn criterion_6(lab: &mut Lab) -> Result<Outcome> {
    let n_layers = ExperimentConfig::default().model.n_layers;
    let mut worst = 0.0_f64;
    let mut cells = Vec::new();
    for start in 1..=n_layers.saturating_sub(2) {
        let set: Vec<usize> = (start..start + 3).collect();
        for pe in [true, false] {
            let t = lab.trained(&variant(pe, true, &set), 1)?;
            worst = worst.max(t.accuracy);
            cells.push(format!(
                "{} {:?} {:.2}%",
                if pe { "PE" } else { "NoPE" },
                set,
                t.accuracy
            ));
        }
    }
    let partial_cfg = variant(true, true, &[1, 2]);
    let mut partial = Vec::new();
    for seed in 1..=3u64 {
        let acc = lab.trained(&partial_cfg, seed)?.accuracy;
        partial.push(acc);
        if acc > PARTIAL_ABLATION_TARGET {
            break;
        }
    }
    let best_partial = partial.iter().copied().fold(0.0, f64::max);
    let partial_list: Vec<String> = partial.iter().map(|a| format!("{a:.2}%")).collect();
    outcome(
        worst < ABLATED_CEILING && best_partial > PARTIAL_ABLATION_TARGET,
        format!(
            "3-layer ablations [{}] need < {ABLATED_CEILING}%; PE {{1,2}} seeds [{}] need one > {PARTIAL_ABLATION_TARGET}%",
            cells.join(", "),
            partial_list.join(", ")
        ),
    )
}

fn criterion_7(lab: &mut Lab) -> Result<Outcome> {
    let causal = lab.trained(&variant(false, true, &[]), 1)?.accuracy;
    let split_test = lab.split.test.clone();
    let non_causal = lab.trained(&variant(false, false, &[]), 1)?;
    let sym = decode_symmetry(&non_causal.model, &split_test, 7)?;
    let invariant = sym.n_identical == sym.n_checked;
    outcome(
        invariant && non_causal.accuracy < causal,
        format!(
            "non-causal NoPE: {}/{} decoded answers unchanged by digit shuffles ({} shuffles change the true sum); accuracy {:.2}% vs causal NoPE {causal:.2}%",
            sym.n_identical, sym.n_checked, sym.n_answer_changed, non_causal.accuracy
        ),
    )
}

fn criterion_8(lab: &mut Lab) -> Result<Outcome> {
    let samples = lab.split.test.clone();
    let heatmaps = lab.dir.join("heatmaps");
    std::fs::create_dir_all(&heatmaps).map_err(|e| nopelab::LabError::io(&heatmaps, e))?;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=3u64 {
        let ratio = |lab: &mut Lab, ablated: &[usize], tag: &str| -> Result<f64> {
            let model = &lab.trained(&variant(false, true, ablated), seed)?.model;
            let acts = collect_activations(model, &samples, 1, Tap::BlockOutput, Positions::Full)?;
            let corr = correlation_matrix(&acts)?;
            render_heatmap(
                &corr,
                &heatmaps.join(format!("nope_{tag}_seed{seed}_layer1.pgm")),
            )?;
            Ok(block_structure(&corr).ratio)
        };
        let base = ratio(lab, &[], "ablate-none")?;
        let ablated = ratio(lab, &[1, 2], "ablate-1-2")?;
        if ablated > base {
            wins += 1;
        }
        pairs.push(format!("seed {seed}: {ablated:.4} vs {base:.4}"));
    }
    outcome(
        wins >= 2,
        format!(
            "layer-1 off-block ratio, ablated {{1,2}} vs unablated: {}; {wins}/3 pairs higher; heatmaps in {}",
            pairs.join(", "),
            heatmaps.display()
        ),
    )
}

fn criterion_9(lab: &mut Lab) -> Result<Outcome> {
    let mut config = ExperimentConfig::default();
    config.model.n_layers = 2;
    config.model.d_model = 32;
    config.model.d_mlp = 64;
    config.train.batch_size = 16;
    config.train.max_iters = 30;
    config.train.warmup_iters = 5;
    config.train.eval_interval = 10;
    config.train.eval_samples = 50;
    config.train.seed = 9;
    let split = DatasetSplit {
        train: lab.split.train[..2000].to_vec(),
        test: lab.split.test[..100].to_vec(),
        seed: lab.split.seed,
    };
    let mut quiet = ();
    let run = |config: &ExperimentConfig, quiet: &mut ()| -> Result<(Trainer, Vec<f64>)> {
        let mut t = Trainer::new(config.clone(), 9)?;
        let r = t.run(&split, quiet)?;
        Ok((t, r.loss_trace()))
    };
    let (a, trace_a) = run(&config, &mut quiet)?;
    let (b, trace_b) = run(&config, &mut quiet)?;
    let same_trace = trace_a.len() == 30
        && trace_a
            .iter()
            .zip(&trace_b)
            .all(|(x, y)| x.to_bits() == y.to_bits());
    let same_weights = encode(&a) == encode(&b);

    let dir = tempfile::tempdir()
        .map_err(|e| nopelab::LabError::io(std::path::Path::new("tempdir"), e))?;
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &a)?;
    let bytes = std::fs::read(&path).map_err(|e| nopelab::LabError::io(&path, e))?;
    let reloaded = load_checkpoint(&path)?;
    let round_trip = encode(&reloaded) == bytes && reloaded.model == a.model;

    let mut first = Trainer::new(config.clone(), 9)?;
    for _ in 0..13 {
        first.step(&split.train)?;
    }
    let mut resumed = decode(&encode(&first))?;
    for _ in 13..30 {
        resumed.step(&split.train)?;
    }
    let mut straight = Trainer::new(config, 9)?;
    for _ in 0..30 {
        straight.step(&split.train)?;
    }
    let resume_ok = encode(&resumed) == encode(&straight) && encode(&straight) == encode(&a);
    outcome(
        same_trace && same_weights && round_trip && resume_ok,
        format!(
            "identical traces {same_trace}, identical weights {same_weights}, byte-exact round trip {round_trip} ({} bytes), resume after 13 of 30 steps matches {resume_ok}",
            bytes.len()
        ),
    )
}

type Criterion = fn(&mut Lab) -> Result<Outcome>;

fn main() {
    let criteria: [(u8, &str, Criterion); 9] = [
        (1, "permutation invariance of non-causal NoPE", criterion_1),
        (
            2,
            "symmetry breaking by causal mask or positions",
            criterion_2,
        ),
        (3, "gradient correctness", criterion_3),
        (4, "causality exactness", criterion_4),
        (5, "desk-scale baseline and NoPE accuracy", criterion_5),
        (6, "residual ablation trend", criterion_6),
        (7, "non-causal NoPE behaviour after training", criterion_7),
        (8, "correlation block structure", criterion_8),
        (9, "determinism and persistence", criterion_9),
    ];
    let only: Option<BTreeSet<u8>> = std::env::var("NOPELAB_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut lab = match Lab::new() {
        Ok(lab) => lab,
        Err(e) => {
            println!("acceptance setup failed: {e}");
            std::process::exit(1);
        }
    };
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f(&mut lab) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id} {}: {name} [{:.1} s] {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
