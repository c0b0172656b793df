use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nopelab::analysis::{
    block_structure, check_invariance as run_invariance, collect_activations, correlation_matrix,
    decode_symmetry, render_heatmap, write_csv, Positions, Tap,
};
use nopelab::checkpoint::{load_checkpoint, save_checkpoint};
use nopelab::config::{format_layer_set, parse_layer_set, ExperimentConfig};
use nopelab::experiment::{
    run_grid, write_tables, ExperimentGrid, GridCell, GridObserver, RunRecord,
};
use nopelab::task::{
    evaluate_exact_match, generate_splits, read_samples, write_samples, DatasetSplit,
};
use nopelab::trainer::{EvalRecord, ProgressPrinter, StepRecord, TrainObserver, Trainer};
use nopelab::{init_params, LabError};

use crate::{
    CliError, ConfigArgs, CorrelateArgs, EvalArgs, GenDataArgs, GridArgs, InvarianceArgs,
    PositionsArg, TapArg, TrainArgs,
};

type CliResult = Result<(), CliError>;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// `key: value` lines.
fn report_text(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
}

fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Records the effective config and the command line next to the outputs.
fn log_provenance(out: &Path, config: &ExperimentConfig) -> CliResult {
    write_file(&out.join("config.toml"), &config.to_toml())?;
    let argv: Vec<String> = std::env::args().collect();
    write_file(&out.join("command.txt"), &(argv.join(" ") + "\n"))
}

fn build_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if args.nope {
        config.model.use_positional_encoding = false;
    }
    if args.non_causal {
        config.model.causal_attention = false;
    }
    if let Some(layers) = &args.ablate {
        config.model.ablated_layers = parse_layer_set(layers)?;
    }
    if let Some(iters) = args.iters {
        config.train.max_iters = iters;
        config.train.warmup_iters = config.train.warmup_iters.min(iters);
    }
    if let Some(batch) = args.batch {
        config.train.batch_size = batch;
    }
    config.validate()?;
    Ok(config)
}

fn load_split(data: Option<&Path>, config: &ExperimentConfig) -> Result<DatasetSplit, CliError> {
    match data {
        Some(dir) => {
            let split = DatasetSplit {
                train: read_samples(&dir.join("train.txt"))?,
                test: read_samples(&dir.join("test.txt"))?,
                seed: config.data.seed,
            };
            let overlap = split.overlap();
            if overlap > 0 {
                return Err(CliError::Lab(LabError::Contract(format!(
                    "{overlap} problems appear in both train and test"
                ))));
            }
            Ok(split)
        }
        None => Ok(generate_splits(
            config.data.n_train,
            config.data.n_test,
            config.data.seed,
        )?),
    }
}

pub fn gen_data(a: GenDataArgs) -> CliResult {
    let split = generate_splits(a.train, a.test, a.seed)?;
    create_dir(&a.out)?;
    let (train_path, test_path) = (a.out.join("train.txt"), a.out.join("test.txt"));
    write_samples(&train_path, &split.train)?;
    write_samples(&test_path, &split.test)?;
    let check = DatasetSplit {
        train: read_samples(&train_path)?,
        test: read_samples(&test_path)?,
        seed: a.seed,
    };
    let overlap = check.overlap();
    if overlap > 0 || check.train != split.train || check.test != split.test {
        return Err(CliError::Lab(LabError::Contract(
            "written datasets do not read back".into(),
        )));
    }
    println!(
        "{}",
        report_text(&[
            (
                "train",
                format!("{} problems -> {}", split.train.len(), train_path.display())
            ),
            (
                "test",
                format!("{} problems -> {}", split.test.len(), test_path.display())
            ),
            ("seed", a.seed.to_string()),
            ("overlap", overlap.to_string()),
        ])
        .trim_end()
    );
    Ok(())
}

/// Progress printing plus optional periodic checkpoints.
struct TrainHooks {
    printer: Option<ProgressPrinter>,
    checkpoint: Option<(usize, PathBuf)>,
}

impl TrainObserver for TrainHooks {
    fn on_step(&mut self, r: &StepRecord) {
        if let Some(p) = &mut self.printer {
            p.on_step(r);
        }
    }

    fn on_eval(&mut self, r: &EvalRecord) {
        if let Some(p) = &mut self.printer {
            p.on_eval(r);
        }
    }

    fn after_step(&mut self, trainer: &Trainer) -> nopelab::Result<()> {
        match &self.checkpoint {
            Some((every, path)) if trainer.iter % every == 0 => save_checkpoint(path, trainer),
            _ => Ok(()),
        }
    }
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut trainer = match &a.resume {
        Some(path) => load_checkpoint(path)?,
        None => Trainer::new(
            {
                let mut c = build_config(&a.config)?;
                c.train.seed = a.seed;
                c
            },
            a.seed,
        )?,
    };
    if a.checkpoint_every == Some(0) {
        return Err(CliError::Usage(
            "--checkpoint-every must be positive".into(),
        ));
    }
    let config = trainer.config.clone();
    let split = load_split(a.data.as_deref(), &config)?;
    create_dir(&a.out)?;
    log_provenance(&a.out, &config)?;
    let ckpt = a.out.join("model.ckpt");
    let mut hooks = TrainHooks {
        printer: (!a.quiet).then(|| ProgressPrinter {
            every: config.train.eval_interval.max(1),
            prefix: String::new(),
        }),
        checkpoint: a.checkpoint_every.map(|n| (n, ckpt.clone())),
    };
    let report = trainer.run(&split, &mut hooks)?;
    save_checkpoint(&ckpt, &trainer)?;

    let steps: String = std::iter::once("iter\tloss\tgrad_norm\tlr\n".to_string())
        .chain(report.steps.iter().map(|s| {
            format!(
                "{}\t{:.17e}\t{:.17e}\t{:.17e}\n",
                s.iter, s.loss, s.grad_norm, s.lr
            )
        }))
        .collect();
    write_file(&a.out.join("steps.tsv"), &steps)?;
    let evals: String = std::iter::once("iter\tn_samples\taccuracy\n".to_string())
        .chain(
            report
                .evals
                .iter()
                .map(|e| format!("{}\t{}\t{}\n", e.iter, e.n_samples, percent(e.accuracy))),
        )
        .collect();
    write_file(&a.out.join("evals.tsv"), &evals)?;
    let text = report_text(&[
        ("config", report.label.clone()),
        ("seed", config.train.seed.to_string()),
        ("parameters", trainer.model.n_params().to_string()),
        ("iterations", trainer.iter.to_string()),
        ("final_accuracy", percent(report.final_accuracy)),
        ("best_accuracy", percent(report.best_accuracy)),
        ("converged", (report.final_accuracy >= 0.5).to_string()),
        (
            "failure",
            report.failure.clone().unwrap_or_else(|| "none".into()),
        ),
        ("wall_seconds", format!("{:.1}", report.wall_seconds)),
        ("checkpoint", ckpt.display().to_string()),
    ]);
    write_file(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn parse_layer_sets(spec: &str) -> Result<Vec<BTreeSet<usize>>, CliError> {
    spec.split(';')
        .map(str::trim)
        .map(|s| match s {
            "none" | "" | "{}" => Ok(BTreeSet::new()),
            s => Ok(parse_layer_set(s)?),
        })
        .collect()
}

fn parse_variants(spec: &str) -> Result<Vec<bool>, CliError> {
    spec.split(',')
        .map(str::trim)
        .map(|v| match v {
            "pe" | "original" => Ok(true),
            "nope" => Ok(false),
            other => Err(CliError::Usage(format!(
                "unknown variant {other:?} (expected pe or nope)"
            ))),
        })
        .collect()
}

struct GridProgress {
    quiet: bool,
    total: usize,
    done: usize,
}

impl GridObserver for GridProgress {
    fn run_started(&mut self, cell: &GridCell, seed: u64) -> Box<dyn TrainObserver> {
        if self.quiet {
            return Box::new(());
        }
        Box::new(ProgressPrinter {
            every: 0,
            prefix: format!("[{} seed {seed}] ", cell.id()),
        })
    }

    fn run_finished(&mut self, r: &RunRecord, resumed: bool) {
        self.done += 1;
        if !self.quiet {
            eprintln!(
                "[{}/{}] {} seed {}: {:.2}%{}",
                self.done,
                self.total,
                r.cell,
                r.seed,
                r.final_accuracy,
                if resumed { " (resumed)" } else { "" }
            );
        }
    }
}

pub fn grid(a: GridArgs) -> CliResult {
    let base = build_config(&a.config)?;
    let grid = ExperimentGrid::cross(
        base,
        &parse_variants(&a.variants)?,
        &parse_layer_sets(&a.layer_sets)?,
        a.seeds,
    );
    grid.validate()?;
    let split = load_split(a.data.as_deref(), &grid.base)?;
    create_dir(&a.out)?;
    log_provenance(&a.out, &grid.base)?;
    let mut progress = GridProgress {
        quiet: a.quiet,
        total: grid.n_runs(),
        done: 0,
    };
    let reports = run_grid(&grid, &split, &a.out, a.resume, &mut progress)?;
    write_tables(&reports, &a.out)?;
    let table = std::fs::read_to_string(a.out.join("table.tsv")).map_err(|e| LabError::Io {
        path: a.out.join("table.tsv"),
        source: e,
    })?;
    print!("{table}");
    Ok(())
}

pub fn check_invariance(a: InvarianceArgs) -> CliResult {
    let (model, config) = match &a.ckpt {
        Some(path) => {
            let t = load_checkpoint(path)?;
            (t.model, t.config)
        }
        None => {
            let config = build_config(&a.config)?;
            (init_params(&config.model, a.seed)?, config)
        }
    };
    if a.prompt_len < 3 || a.prompt_len > config.model.context_len {
        return Err(CliError::Usage(format!(
            "--prompt-len must lie in 3..={}",
            config.model.context_len
        )));
    }
    let report = run_invariance(&model, a.prompt_len, a.perms, a.seed)?;
    let mut text = report.to_text();
    if a.decode > 0 {
        let split = load_split(a.data.as_deref(), &config)?;
        let n = a.decode.min(split.test.len());
        let d = decode_symmetry(&model, &split.test[..n], a.seed)?;
        text += &report_text(&[
            ("decode_checked", d.n_checked.to_string()),
            ("decode_identical", d.n_identical.to_string()),
            ("decode_answer_changed", d.n_answer_changed.to_string()),
        ]);
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        log_provenance(out, &config)?;
        write_file(&out.join("invariance.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

pub fn correlate(a: CorrelateArgs) -> CliResult {
    let trainer = load_checkpoint(&a.ckpt)?;
    let n_layers = trainer.config.model.n_layers;
    if a.layer == 0 || a.layer > n_layers {
        return Err(CliError::Usage(format!(
            "--layer must lie in 1..={n_layers}"
        )));
    }
    let split = load_split(a.data.as_deref(), &trainer.config)?;
    let n = a.samples.unwrap_or(split.test.len()).min(split.test.len());
    let tap = match a.tap {
        TapArg::Block => Tap::BlockOutput,
        TapArg::Normalized => Tap::Normalized,
    };
    let positions = match a.positions {
        PositionsArg::Full => Positions::Full,
        PositionsArg::Prompt => Positions::Prompt,
    };
    let acts = collect_activations(&trainer.model, &split.test[..n], a.layer, tap, positions)?;
    let corr = correlation_matrix(&acts)?;
    let metric = block_structure(&corr);
    create_dir(&a.out)?;
    log_provenance(&a.out, &trainer.config)?;
    let stem = format!("corr_layer{}", a.layer);
    let csv = a.out.join(format!("{stem}.csv"));
    let pgm = a.out.join(format!("{stem}.pgm"));
    write_csv(&corr, &csv, a.csv_header)?;
    render_heatmap(&corr, &pgm)?;
    let f = corr.n_features();
    let text = report_text(&[
        ("config", trainer.config.model.label()),
        ("layer", a.layer.to_string()),
        ("tap", format!("{tap:?}")),
        ("positions", acts.n_positions.to_string()),
        ("channels", acts.n_channels.to_string()),
        ("samples", acts.n_samples.to_string()),
        ("matrix", format!("{f}x{f}")),
        ("on_block_mass", format!("{:.17e}", metric.on_block_mass)),
        ("off_block_mass", format!("{:.17e}", metric.off_block_mass)),
        ("off_block_ratio", format!("{:.17e}", metric.ratio)),
        ("csv", csv.display().to_string()),
        ("heatmap", pgm.display().to_string()),
    ]);
    write_file(&a.out.join(format!("{stem}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let trainer = load_checkpoint(&a.ckpt)?;
    let split = load_split(a.data.as_deref(), &trainer.config)?;
    let n = a.samples.unwrap_or(split.test.len()).min(split.test.len());
    let accuracy = evaluate_exact_match(&mut &trainer.model, &split.test[..n])?;
    let text = report_text(&[
        ("config", trainer.config.model.label()),
        (
            "ablated_layers",
            format_layer_set(&trainer.config.model.ablated_layers),
        ),
        ("iterations", trainer.iter.to_string()),
        ("samples", n.to_string()),
        ("accuracy", percent(accuracy)),
    ]);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("eval.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}
