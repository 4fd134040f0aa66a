mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use segnas::checks::{gradient_suite, GRAD_TOLERANCE};
use segnas::cost::{self, DEFAULT_BYTES_PER_ELEM};
use segnas::data::{load_prepared, read_label_png, synth_generate, write_dataset, DatasetConfig};
use segnas::decode::{brute_force_path, decode_cell, decode_path_dp, emit_genotype, DecodeOptions, BRUTE_FORCE_MAX_LAYERS};
use segnas::derived::{evaluate_miou, train_derived, ConfusionMatrix, DerivedNetwork, DerivedNetworkSpec, MiouReport, TrainOptions};
use segnas::search::{run_search, ArchLogits, SearchOptions};
use segnas::search_space::{normalize_alpha, normalize_beta, Genotype};
use segnas::tensor::{load_checkpoint, ParamStore};
use segnas::Error;

use config::RunFile;

/// A bad flag, config file or argument combination (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A numerical check that ran but did not pass (exit code 3).
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser)]
#[command(name = "segnas", version, about = "Architecture search, training and analysis for segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the architecture search and write per-epoch checkpoints.
    Search(SearchArgs),
    /// Decode architecture logits into a genotype and DOT diagrams.
    Decode(DecodeArgs),
    /// Train the network derived from a genotype.
    Train(TrainArgs),
    /// Report per-class IoU and mIoU of a trained network or of saved predictions.
    Eval(EvalArgs),
    /// Parameter, FLOP and memory counts of a derived network.
    Cost(CostArgs),
    /// Write a synthetic segmentation dataset.
    SynthData(SynthArgs),
    /// Finite-difference gradient checks of every building block.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SearchArgs {
    /// Run configuration (TOML with [dataset], [space] and [search] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, history.csv and arch_logits.json.
    #[arg(long, default_value = "runs/search")]
    out: PathBuf,
    /// Continue from the last complete epoch in the output directory.
    #[arg(long)]
    resume: bool,
    /// Overrides search.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides dataset.root.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// arch_logits.json written by `search`.
    #[arg(long)]
    logits: PathBuf,
    /// Directory for genotype.json, cell.dot and trellis.dot.
    #[arg(long, default_value = "runs/genotype")]
    out: PathBuf,
    /// Let the `none` operator compete during decoding.
    #[arg(long)]
    include_null: bool,
    /// Cross-check the path against exhaustive search (at most 12 layers).
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML with [dataset], [train] and [network] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// genotype.json written by `decode`.
    #[arg(long)]
    genotype: PathBuf,
    /// Output directory for weights, metrics.csv and network.json.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.iters.
    #[arg(long)]
    iters: Option<usize>,
    /// Overrides dataset.root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Log the loss every this many iterations.
    #[arg(long, default_value_t = 100)]
    log_interval: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Run configuration; only [dataset] is read.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `train` (network.json and weights).
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>.png` label maps to score instead of a network.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Split to evaluate; defaults to dataset.val_split.
    #[arg(long)]
    split: Option<String>,
    /// Overrides dataset.root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// genotype.json written by `decode`.
    #[arg(long)]
    genotype: PathBuf,
    /// Decoder width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Overrides the genotype's filter multiplier.
    #[arg(long = "F")]
    multiplier: Option<usize>,
    /// Input extent as HxW or a single side.
    #[arg(long, default_value = "1024x1024", value_parser = parse_extent)]
    input: (usize, usize),
    /// Bytes per stored element.
    #[arg(long, default_value_t = DEFAULT_BYTES_PER_ELEM)]
    bytes: u64,
    /// Write the full report, with per-layer rows, as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Print every layer after the summary.
    #[arg(long)]
    layers: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root; `train/` and `val/` are created inside.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// The validation split uses seed + 1.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_extent(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (parse(h)?, parse(w)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if h == 0 || w == 0 {
        return Err("extent must be positive".into());
    }
    Ok((h, w))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Invalid(_)) => 1,
        Some(Error::NonFinite(_) | Error::Shape(_) | Error::NotScalar(_) | Error::ForeignVar) => 3,
        _ => 2,
    }
}

fn with_root(mut ds: DatasetConfig, root: Option<PathBuf>) -> DatasetConfig {
    if let Some(r) = root {
        ds.root = r;
    }
    ds
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_search(args: SearchArgs) -> anyhow::Result<()> {
    let mut file = RunFile::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        file.search.seed = seed;
    }
    let dataset = with_root(file.dataset.clone(), args.data);
    let space = file.search_config();
    let train = load_prepared(&dataset, &dataset.train_split)?;
    println!(
        "searching L={} B={} F={} on {} samples for {} epochs (architecture from epoch {})",
        space.layers,
        space.blocks,
        space.multiplier,
        train.len(),
        file.search.epochs,
        file.search.arch_start_epoch
    );
    let opts = SearchOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume,
    };
    let outcome = run_search(&train, &space, &file.search, &opts, &mut |_| {})?;
    for r in &outcome.history.records {
        let loss_b = r.loss_b.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3}  lossA {:.4}  lossB {loss_b}  H(alpha) {:.4}  H(beta) {:.4}  {:.1}s",
            r.epoch, r.loss_a, r.alpha_entropy, r.beta_entropy, r.seconds
        );
    }
    let logits = ArchLogits {
        config: space,
        epoch: file.search.epochs - 1,
        alpha: outcome.alpha,
        beta: outcome.beta,
    };
    let path = args.out.join("arch_logits.json");
    logits.write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> anyhow::Result<()> {
    let logits = ArchLogits::read(&args.logits)?;
    let config = &logits.config;
    let alpha = normalize_alpha(&logits.alpha)?;
    let beta = normalize_beta(&logits.beta, config)?;
    let cell = decode_cell(
        &alpha,
        config.blocks,
        DecodeOptions {
            include_null: args.include_null,
        },
    )?;
    let decoded = decode_path_dp(&beta, config)?;
    if args.verify {
        if config.layers > BRUTE_FORCE_MAX_LAYERS {
            return Err(UsageError(format!(
                "--verify enumerates every path and supports at most {BRUTE_FORCE_MAX_LAYERS} layers, got {}",
                config.layers
            ))
            .into());
        }
        let brute = brute_force_path(&beta, config)?;
        let gap = (brute.log_prob - decoded.log_prob).abs();
        if brute.path != decoded.path || gap > 1e-9 {
            return Err(CheckFailed(format!(
                "dynamic programming gave {:?} (log p {}), exhaustive search {:?} (log p {})",
                decoded.path.path, decoded.log_prob, brute.path.path, brute.log_prob
            ))
            .into());
        }
        println!("verify: exhaustive search agrees (|delta log p| = {gap:.2e})");
    }
    println!("path: {:?}  log p = {:.6}", decoded.path.path, decoded.log_prob);
    for (i, b) in cell.blocks.iter().enumerate() {
        println!(
            "block {i}: {} <- input {}, {} <- input {}",
            b.op1.name(),
            b.input1,
            b.op2.name(),
            b.input2
        );
    }
    let files = emit_genotype(&cell, &decoded.path, config, &args.out)?;
    for f in [&files.genotype, &files.cell_dot, &files.trellis_dot] {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn read_genotype(path: &Path) -> anyhow::Result<Genotype> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Genotype::from_json(&text).with_context(|| format!("reading {}", path.display()))
}

fn print_report(r: &MiouReport) {
    for (c, iou) in r.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c:>3}  IoU {v:.4}"),
            None => println!("class {c:>3}  IoU   n/a"),
        }
    }
    println!("mIoU {:.4}", r.miou);
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut file = RunFile::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        file.train.seed = seed;
    }
    if let Some(iters) = args.iters {
        file.train.iters = iters;
    }
    let genotype = read_genotype(&args.genotype)?;
    let dataset = with_root(file.dataset.clone(), args.data);
    if genotype.config.num_classes != dataset.num_classes {
        return Err(UsageError(format!(
            "genotype predicts {} classes but the dataset has {}",
            genotype.config.num_classes, dataset.num_classes
        ))
        .into());
    }
    let mut spec = DerivedNetworkSpec::from_genotype(&genotype, file.network.multiplier, file.network.dim);
    spec.combine = file.network.combine;
    let train = load_prepared(&dataset, &dataset.train_split)?;
    let val = load_prepared(&dataset, &dataset.val_split)?;
    println!(
        "training path {:?} with F={} dim={} for {} iterations on {} samples",
        spec.path.path,
        spec.multiplier,
        spec.dim,
        file.train.iters,
        train.len()
    );
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        log_interval: args.log_interval,
    };
    let outcome = train_derived(&spec, &train, Some(&val), &file.train, &opts)?;
    for m in &outcome.metrics {
        let miou = m.miou.map_or_else(String::new, |v| format!("  mIoU {v:.4}"));
        println!("iter {:>7}  loss {:.4}  lr {:.5}{miou}", m.iter, m.loss, m.lr);
    }
    if let Some(r) = &outcome.final_miou {
        print_report(r);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn eval_predictions(dir: &Path, dataset: &DatasetConfig, split: &str) -> anyhow::Result<MiouReport> {
    let ds = load_prepared(dataset, split)?;
    if ds.is_empty() {
        return Err(Error::Data(format!("split `{split}` is empty")).into());
    }
    let mut cm = ConfusionMatrix::new(dataset.num_classes);
    for i in 0..ds.len() {
        let s = ds.get(i)?;
        let path = dir.join(format!("{}.png", s.id));
        let (h, w, pred) = read_label_png(&path)?;
        if (h, w) != (s.height(), s.width()) {
            return Err(Error::Data(format!(
                "{} is {h}x{w} but the mask is {}x{}",
                path.display(),
                s.height(),
                s.width()
            ))
            .into());
        }
        cm.add(&pred, &s.mask, dataset.ignore_index)?;
    }
    Ok(cm.report())
}

fn eval_checkpoint(dir: &Path, dataset: &DatasetConfig, split: &str) -> anyhow::Result<MiouReport> {
    let spec_path = dir.join("network.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::Io {
        path: spec_path.clone(),
        source: e,
    })?;
    let spec = DerivedNetworkSpec::from_json(&text).with_context(|| format!("reading {}", spec_path.display()))?;
    if spec.num_classes != dataset.num_classes {
        return Err(UsageError(format!(
            "network predicts {} classes but the dataset has {}",
            spec.num_classes, dataset.num_classes
        ))
        .into());
    }
    let mut store = ParamStore::<f32>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let net = DerivedNetwork::new(&mut store, &mut rng, &spec)?;
    load_checkpoint(&dir.join("weights"), &mut store)?;
    let ds = load_prepared(dataset, split)?;
    Ok(evaluate_miou(&net, &store, &ds, spec.num_classes, dataset.ignore_index)?)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let file = RunFile::load(args.config.as_deref())?;
    let dataset = with_root(file.dataset, args.data);
    let split = args.split.unwrap_or_else(|| dataset.val_split.clone());
    let report = match (&args.predictions, &args.checkpoint) {
        (Some(p), _) => eval_predictions(p, &dataset, &split)?,
        (None, Some(c)) => eval_checkpoint(c, &dataset, &split)?,
        (None, None) => bail!(UsageError("pass --checkpoint or --predictions".into())),
    };
    print_report(&report);
    if let Some(path) = &args.json {
        write_file(path, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_cost(args: CostArgs) -> anyhow::Result<()> {
    if args.dim == 0 || args.bytes == 0 {
        return Err(UsageError("--dim and --bytes must be positive".into()).into());
    }
    let genotype = read_genotype(&args.genotype)?;
    let spec = DerivedNetworkSpec::from_genotype(&genotype, args.multiplier, args.dim);
    let report = cost::report_with(&spec, args.input, args.bytes)?;
    print!("{}", report.table());
    if args.layers {
        println!();
        println!("{:<48}{:>12}{:>16}{:>14}", "layer", "params", "FLOPs", "memory (B)");
        for l in &report.per_layer {
            println!(
                "{:<48}{:>12}{:>16}{:>14}",
                l.name, l.counts.params, l.counts.flops, l.counts.memory_bytes
            );
        }
    }
    if let Some(path) = &args.json {
        write_file(path, &serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    for (split, n, seed) in [("train", args.train, args.seed), ("val", args.val, args.seed + 1)] {
        let ds = synth_generate(n, args.size, args.classes, seed)?;
        write_dataset(&ds, &args.out, split)?;
        println!("wrote {n} samples to {}", args.out.join(split).display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let cases = gradient_suite(args.seed)?;
    let mut failed = Vec::new();
    for c in &cases {
        let verdict = if c.passed() { "pass" } else { "FAIL" };
        println!(
            "{verdict}  {:<14} max rel {:.3e}  max abs {:.3e}  ({} scalars)",
            c.name, c.report.max_rel_error, c.report.max_abs_error, c.report.checked
        );
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(CheckFailed(format!(
            "{} of {} cases above {GRAD_TOLERANCE:e}: {}",
            failed.len(),
            cases.len(),
            failed.join(", ")
        ))
        .into());
    }
    println!("all {} cases below {GRAD_TOLERANCE:e}", cases.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Search(a) => cmd_search(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cost(a) => cmd_cost(a),
        Command::SynthData(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(parse_extent("1024x512"), Ok((1024, 512)));
        assert_eq!(parse_extent("64"), Ok((64, 64)));
        assert!(parse_extent("0x4").is_err());
        assert!(parse_extent("ax4").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&UsageError("x".into()).into()), 1);
        assert_eq!(exit_code(&Error::Invalid("x".into()).into()), 1);
        assert_eq!(exit_code(&Error::Data("x".into()).into()), 2);
        assert_eq!(exit_code(&Error::NonFinite("x".into()).into()), 3);
        let wrapped = anyhow::Error::from(Error::Data("x".into())).context("outer");
        assert_eq!(exit_code(&wrapped), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
