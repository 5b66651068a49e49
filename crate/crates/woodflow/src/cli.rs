//! The `woodflow` command line.
//!
//! Thin synchronous shell over the library: `train`, `eval`, `sample`,
//! `bench`, `synth`, and `selfcheck`. Exit codes partition failures the way
//! operators need to branch on them: 0 success, 1 usage (bad flags or
//! config), 2 bad data or files, 3 the math broke down (singular matrix,
//! non-finite values).

use crate::bench::{self, BenchCase, LayerKind};
use crate::data::{self, ImageBatchSource, NtfTensor};
use crate::error::{Error, Result};
use crate::layers::{woodbury_identity_check, IdentityCheck};
use crate::model::{build_model, FlowConfig, FlowModel, PermutationKind};
use crate::rng::{self, STREAM_INIT};
use crate::tensor::{max_abs_diff, Tensor};
use crate::train::{Checkpoint, MetricsRow, TrainOptions, Trainer};
use crate::Real;
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Parse `args` (including argv[0]) and run the selected subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // --help / --version land here too; they are not usage errors.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Shape(_) | Error::Contract(_) => 2,
        Error::Singular { .. } | Error::NonFinite(_) => 3,
    }
}

#[derive(Parser)]
#[command(
    name = "woodflow",
    about = "Low-rank invertible flows: train, evaluate, sample, benchmark."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on an NTF image dataset; prints `iter nll_nats bpd gradnorm`
    /// lines and writes checkpoints.
    Train(TrainCmd),
    /// Print a checkpoint's mean bits-per-dimension on a dataset.
    Eval(EvalCmd),
    /// Draw samples from a checkpoint into an NTF file.
    Sample(SampleCmd),
    /// Time layer kinds across sizes; writes a CSV.
    Bench(BenchCmd),
    /// Generate a synthetic 8-bit image dataset as an NTF file.
    Synth(SynthCmd),
    /// Run the built-in identity / round-trip / gradient suites.
    Selfcheck,
}

#[derive(Args)]
struct TrainCmd {
    /// Model config: plain-text key=value lines.
    #[arg(long)]
    config: PathBuf,
    /// Training images: NTF u8 tensor of shape (n, c, h, w).
    #[arg(long)]
    data: PathBuf,
    /// Optimizer steps to run.
    #[arg(long)]
    iters: u64,
    #[arg(long, default_value_t = 0, conflicts_with = "resume")]
    seed: u64,
    /// Checkpoint directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Gradient workers; 1 is bitwise reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Also write a numbered checkpoint every N iterations.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from this checkpoint (seed and model come from it; the
    /// config file must match).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    ckpt: PathBuf,
    /// NTF u8 tensor of shape (n, c, h, w).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SampleCmd {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of samples to draw.
    #[arg(long)]
    num: usize,
    /// Standard-deviation multiplier on the base noise.
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output NTF file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchCmd {
    /// Comma-separated layer kinds to time.
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = [
            LayerKind::Woodbury,
            LayerKind::MeWoodbury,
            LayerKind::Conv1x1,
            LayerKind::Dense,
        ]
    )]
    layers: Vec<LayerKind>,
    /// Comma-separated spatial sizes, each HxW.
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = ["16x16".to_owned(), "32x32".to_owned(), "64x64".to_owned()]
    )]
    sizes: Vec<String>,
    /// Channel count for every case.
    #[arg(long, default_value_t = 16)]
    c: usize,
    /// Low-rank width for every case.
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Recorded in the cases; the harness itself runs sequentially.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output CSV file.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthCmd {
    /// Number of images to generate.
    #[arg(long)]
    num: usize,
    /// Sample shape as c,h,w.
    #[arg(long, default_value = "1,8,8")]
    shape: String,
    /// Mixture modes.
    #[arg(long, default_value_t = 4)]
    modes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output NTF file.
    #[arg(long)]
    out: PathBuf,
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(args) => run_train(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Sample(args) => run_sample(args),
        Cmd::Bench(args) => run_bench(args),
        Cmd::Synth(args) => run_synth(args),
        Cmd::Selfcheck => run_selfcheck(),
    }
}

// ---------------------------------------------------------------------------
// Config files

const CONFIG_KEYS: [&str; 10] = [
    "levels",
    "steps",
    "coupling_channels",
    "permutation",
    "bits",
    "d_c",
    "d_s",
    "d_h",
    "d_w",
    "batch_size",
];

/// Parsed model config file. The input shape is not a config key — it comes
/// from the data file (or the checkpoint on resume).
#[derive(Debug)]
struct FileConfig {
    levels: usize,
    steps: usize,
    coupling_channels: usize,
    permutation: PermutationKind,
    bits: u32,
    d_c: Option<Vec<usize>>,
    d_s: Option<Vec<usize>>,
    d_h: Option<Vec<usize>>,
    d_w: Option<Vec<usize>>,
    batch_size: usize,
}

impl FileConfig {
    fn into_flow_config(self, in_shape: (usize, usize, usize)) -> FlowConfig {
        FlowConfig {
            levels: self.levels,
            steps: self.steps,
            coupling_channels: self.coupling_channels,
            permutation: self.permutation,
            in_shape,
            bits: self.bits,
            d_c: self.d_c,
            d_s: self.d_s,
            d_h: self.d_h,
            d_w: self.d_w,
        }
    }
}

fn parse_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_text(&text)
}

fn parse_config_text(text: &str) -> Result<FileConfig> {
    let mut entries: BTreeMap<&str, &str> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {} is not a key=value pair: {line:?}",
                idx + 1
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "unknown config key {key:?} (line {})",
                idx + 1
            )));
        }
        if entries.insert(key, value).is_some() {
            return Err(Error::Config(format!(
                "config key {key:?} appears more than once"
            )));
        }
    }

    let required = |key: &str| {
        entries
            .get(key)
            .copied()
            .ok_or_else(|| Error::Config(format!("config is missing required key {key:?}")))
    };
    let levels = parse_num::<usize>("levels", required("levels")?)?;
    let steps = parse_num::<usize>("steps", required("steps")?)?;
    let coupling_channels =
        parse_num::<usize>("coupling_channels", required("coupling_channels")?)?;
    let permutation: PermutationKind = required("permutation")?.parse()?;
    let bits = match entries.get("bits") {
        Some(v) => parse_num::<u32>("bits", v)?,
        None => 8,
    };
    let batch_size = match entries.get("batch_size") {
        Some(v) => parse_num::<usize>("batch_size", v)?,
        None => 64,
    };
    let list = |key: &str| -> Result<Option<Vec<usize>>> {
        entries.get(key).map(|v| parse_usize_list(key, v)).transpose()
    };
    Ok(FileConfig {
        levels,
        steps,
        coupling_channels,
        permutation,
        bits,
        d_c: list("d_c")?,
        d_s: list("d_s")?,
        d_h: list("d_h")?,
        d_w: list("d_w")?,
        batch_size,
    })
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key {key:?} has invalid value {value:?}")))
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_num::<usize>(key, part.trim()))
        .collect()
}

fn parse_hw(spec: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size {spec:?} is not HxW (e.g. 16x16)"));
    let (h, w) = spec.split_once('x').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn parse_chw(spec: &str) -> Result<(usize, usize, usize)> {
    let bad = || Error::Config(format!("shape {spec:?} is not c,h,w (e.g. 1,8,8)"));
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| bad())?;
        if *slot == 0 {
            return Err(bad());
        }
    }
    Ok((dims[0], dims[1], dims[2]))
}

// ---------------------------------------------------------------------------
// Subcommands

fn run_train(args: TrainCmd) -> Result<()> {
    let file_cfg = parse_config(&args.config)?;
    let batch_size = file_cfg.batch_size;
    let file = data::ntf_read(&args.data)?;

    let mut trainer = match &args.resume {
        Some(ckpt_path) => {
            let trainer = Checkpoint::load(ckpt_path)?.restore()?;
            check_config_matches(&file_cfg, &trainer.model.cfg)?;
            trainer
        }
        None => {
            let probe = ImageBatchSource::new(&file, file_cfg.bits, args.seed)?;
            let cfg = file_cfg.into_flow_config(probe.sample_shape());
            let seed = args.seed;
            let model = build_model(cfg, &mut rng::stream(seed, STREAM_INIT, 0))?;
            Trainer::new(model, seed)
        }
    };

    let source = ImageBatchSource::new(&file, trainer.model.cfg.bits, trainer.seed())?;
    if source.sample_shape() != trainer.model.cfg.in_shape {
        return Err(Error::Data(format!(
            "model expects {:?} samples, data file holds {:?}",
            trainer.model.cfg.in_shape,
            source.sample_shape()
        )));
    }

    fs::create_dir_all(&args.out)?;
    let opts = TrainOptions {
        iterations: args.iters,
        batch_size,
        threads: args.threads,
        checkpoint_every: args.checkpoint_every,
        out_dir: Some(args.out.clone()),
    };
    let mut log = |row: &MetricsRow| println!("{row}");
    trainer.run(&source, &opts, &mut log)?;
    eprintln!(
        "wrote {} at iteration {}",
        args.out.join("ckpt_final.wfc").display(),
        trainer.iteration()
    );
    Ok(())
}

/// Resuming takes the model from the checkpoint; the config file is still
/// read (for batch_size) and must describe the same model, so a stale or
/// wrong file fails loudly instead of silently training something else.
fn check_config_matches(file: &FileConfig, ckpt: &FlowConfig) -> Result<()> {
    let mut diffs = String::new();
    let mut diff = |key: &str, file_v: &dyn std::fmt::Debug, ckpt_v: &dyn std::fmt::Debug| {
        let _ = write!(diffs, "{sep}{key}: config {file_v:?} vs checkpoint {ckpt_v:?}",
            sep = if diffs.is_empty() { "" } else { "; " });
    };
    if file.levels != ckpt.levels {
        diff("levels", &file.levels, &ckpt.levels);
    }
    if file.steps != ckpt.steps {
        diff("steps", &file.steps, &ckpt.steps);
    }
    if file.coupling_channels != ckpt.coupling_channels {
        diff(
            "coupling_channels",
            &file.coupling_channels,
            &ckpt.coupling_channels,
        );
    }
    if file.permutation != ckpt.permutation {
        diff(
            "permutation",
            &file.permutation.name(),
            &ckpt.permutation.name(),
        );
    }
    if file.bits != ckpt.bits {
        diff("bits", &file.bits, &ckpt.bits);
    }
    if file.d_c != ckpt.d_c {
        diff("d_c", &file.d_c, &ckpt.d_c);
    }
    if file.d_s != ckpt.d_s {
        diff("d_s", &file.d_s, &ckpt.d_s);
    }
    if file.d_h != ckpt.d_h {
        diff("d_h", &file.d_h, &ckpt.d_h);
    }
    if file.d_w != ckpt.d_w {
        diff("d_w", &file.d_w, &ckpt.d_w);
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "config file does not match the checkpoint being resumed: {diffs}"
        )))
    }
}

fn run_eval(args: EvalCmd) -> Result<()> {
    let trainer = Checkpoint::load(&args.ckpt)?.restore()?;
    let model = &trainer.model;
    let file = data::ntf_read(&args.data)?;
    let source = ImageBatchSource::new(&file, model.cfg.bits, 0)?;
    if source.sample_shape() != model.cfg.in_shape {
        return Err(Error::Data(format!(
            "checkpoint expects {:?} samples, data file holds {:?}",
            model.cfg.in_shape,
            source.sample_shape()
        )));
    }
    let bpd = mean_bpd(model, &source, args.threads)?;
    println!("{bpd:.4}");
    Ok(())
}

/// Dequantization noise for evaluation is a fixed draw (seed 0, keyed by row
/// offset), so eval is deterministic.
const EVAL_NOISE_SEED: u64 = 0;
const EVAL_CHUNK: usize = 256;

fn mean_bpd(model: &FlowModel, source: &ImageBatchSource, threads: usize) -> Result<Real> {
    if threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    let n = source.len();
    if n == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_CHUNK)
        .map(|start| (start, EVAL_CHUNK.min(n - start)))
        .collect();

    let chunk_bpd = |&(start, count): &(usize, usize)| -> Result<Real> {
        let x = source.rows(start, count, EVAL_NOISE_SEED)?;
        let (_nll, bpd) = model.log_likelihood(&x)?;
        Ok(bpd.data().iter().sum())
    };

    // Chunk sums are computed in parallel but reduced in chunk order, so the
    // result does not depend on the thread count.
    let workers = threads.min(ranges.len());
    let mut sums: Vec<Real> = vec![0.0; ranges.len()];
    if workers <= 1 {
        for (slot, range) in sums.iter_mut().zip(&ranges) {
            *slot = chunk_bpd(range)?;
        }
    } else {
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|worker| {
                    let ranges = &ranges;
                    let chunk_bpd = &chunk_bpd;
                    scope.spawn(move || -> Result<Vec<(usize, Real)>> {
                        ranges
                            .iter()
                            .enumerate()
                            .skip(worker)
                            .step_by(workers)
                            .map(|(idx, range)| Ok((idx, chunk_bpd(range)?)))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        for part in results {
            for (idx, sum) in part {
                sums[idx] = sum;
            }
        }
    }
    Ok(sums.iter().sum::<Real>() / n as Real)
}

fn run_sample(args: SampleCmd) -> Result<()> {
    if args.num == 0 {
        return Err(Error::Config("--num must be at least 1".into()));
    }
    if !args.temperature.is_finite() || args.temperature < 0.0 {
        return Err(Error::Config(format!(
            "--temperature must be a nonnegative number, got {}",
            args.temperature
        )));
    }
    let trainer = Checkpoint::load(&args.ckpt)?.restore()?;
    let samples = trainer
        .model
        .sample(args.num, args.temperature as Real, args.seed)?;
    data::ntf_write(&args.out, &NtfTensor::from_real(&samples))?;
    eprintln!("wrote {} samples to {}", args.num, args.out.display());
    Ok(())
}

fn run_bench(args: BenchCmd) -> Result<()> {
    let mut cases = Vec::with_capacity(args.layers.len() * args.sizes.len());
    for &layer in &args.layers {
        for spec in &args.sizes {
            let (h, w) = parse_hw(spec)?;
            cases.push(BenchCase {
                layer,
                c: args.c,
                h,
                w,
                d: args.d,
                reps: args.reps,
                warmup: args.warmup,
                threads: args.threads,
            });
        }
    }
    let report = bench::run_bench(&cases)?;
    bench::emit_csv(&report.records, &args.out)?;
    for (case, reason) in &report.skipped {
        eprintln!("skipped {case}: {reason}");
    }
    eprintln!(
        "wrote {} ({} cases timed, {} skipped)",
        args.out.display(),
        report.records.len(),
        report.skipped.len()
    );
    Ok(())
}

fn run_synth(args: SynthCmd) -> Result<()> {
    if args.num == 0 {
        return Err(Error::Config("--num must be at least 1".into()));
    }
    let shape = parse_chw(&args.shape)?;
    let tensor = data::synth_gaussian_mixture(args.num, shape, args.modes, args.seed)?;
    data::ntf_write(&args.out, &tensor)?;
    eprintln!(
        "wrote {} images of shape {},{},{} to {}",
        args.num,
        shape.0,
        shape.1,
        shape.2,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Selfcheck

const SELFCHECK_SEED: u64 = 0x5E1F;

fn run_selfcheck() -> Result<()> {
    let mut failures = Vec::new();

    match identity_suite() {
        Ok(line) => println!("identity: ok ({line})"),
        Err(line) => {
            println!("identity: FAIL ({line})");
            failures.push("identity");
        }
    }
    match round_trip_suite() {
        Ok(line) => println!("round-trip: ok ({line})"),
        Err(line) => {
            println!("round-trip: FAIL ({line})");
            failures.push("round-trip");
        }
    }
    match gradient_suite() {
        Ok(line) => println!("gradients: ok ({line})"),
        Err(line) => {
            println!("gradients: FAIL ({line})");
            failures.push("gradients");
        }
    }

    if failures.is_empty() {
        println!("selfcheck passed");
        Ok(())
    } else {
        println!("selfcheck FAILED");
        Err(Error::NonFinite(format!(
            "selfcheck failed: {}",
            failures.join(", ")
        )))
    }
}

/// 200 random (U, V) pairs: the low-rank inverse and determinant identities
/// checked against dense arithmetic.
fn identity_suite() -> std::result::Result<String, String> {
    let mut rng = rng::stream(SELFCHECK_SEED, STREAM_INIT, 1);
    let (mut max_inv, mut max_ld) = (0.0 as Real, 0.0 as Real);
    let mut singular = 0usize;
    for draw in 0..200 {
        let n = rng.gen_range(1..=32);
        let k = rng.gen_range(1..=8);
        let u = random_tensor(&mut rng, &[n, k]);
        let v = random_tensor(&mut rng, &[k, n]);
        match woodbury_identity_check(&u, &v).map_err(|e| format!("draw {draw}: {e}"))? {
            IdentityCheck::Ok {
                inverse_residual,
                logdet_residual,
            } => {
                max_inv = max_inv.max(inverse_residual);
                max_ld = max_ld.max(logdet_residual);
            }
            IdentityCheck::SingularInner => singular += 1,
        }
    }
    let line = format!(
        "max inverse residual {max_inv:.2e}, max logdet residual {max_ld:.2e}, \
         {singular} singular draws skipped"
    );
    if max_inv < 1e-9 && max_ld < 1e-9 && singular < 20 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Small trained-looking models of every permutation kind: x must survive
/// forward + inverse to 1e-7.
fn round_trip_suite() -> std::result::Result<String, String> {
    let mut worst = 0.0 as Real;
    for (idx, kind) in [
        PermutationKind::Conv1x1,
        PermutationKind::Woodbury,
        PermutationKind::MeWoodbury,
    ]
    .into_iter()
    .enumerate()
    {
        let err = |e: Error| format!("{}: {e}", kind.name());
        let mut r = rng::stream(SELFCHECK_SEED, STREAM_INIT, 2 + idx as u64);
        let cfg = FlowConfig {
            levels: 2,
            steps: 2,
            coupling_channels: 8,
            permutation: kind,
            in_shape: (2, 4, 4),
            bits: 8,
            d_c: Some(vec![2, 2]),
            d_s: Some(vec![4, 1]),
            d_h: Some(vec![2, 1]),
            d_w: Some(vec![2, 1]),
        };
        let mut model = build_model(cfg, &mut r).map_err(err)?;
        let init = random_unit_tensor(&mut r, &[16, 2, 4, 4]);
        model.initialize_actnorms(&init).map_err(err)?;
        model.perturb_params(&mut r, 0.05);
        for _ in 0..10 {
            let x = random_unit_tensor(&mut r, &[4, 2, 4, 4]);
            let latents = model.forward_latents(&x).map_err(err)?;
            let back = model
                .inverse_from_latents(&latents.z_final, &latents.factored)
                .map_err(err)?;
            worst = worst.max(max_abs_diff(&back, &x));
        }
    }
    let line = format!("max round-trip residual {worst:.2e} over all permutation kinds");
    if worst < 1e-7 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Tape gradients of the training loss against central differences on a
/// small model, a few coordinates per parameter tensor.
fn gradient_suite() -> std::result::Result<String, String> {
    let err = |e: Error| e.to_string();
    let mut r = rng::stream(SELFCHECK_SEED, STREAM_INIT, 5);
    let cfg = FlowConfig {
        levels: 1,
        steps: 2,
        coupling_channels: 8,
        permutation: PermutationKind::Woodbury,
        in_shape: (1, 2, 2),
        bits: 8,
        d_c: Some(vec![2]),
        d_s: Some(vec![1]),
        d_h: None,
        d_w: None,
    };
    let mut model = build_model(cfg, &mut r).map_err(err)?;
    let batch = random_unit_tensor(&mut r, &[8, 1, 2, 2]);
    model.initialize_actnorms(&batch).map_err(err)?;
    model.perturb_params(&mut r, 0.05);

    let loss_at = |store: &crate::autodiff::ParamStore| -> Result<Real> {
        let mut tape = crate::autodiff::Tape::new();
        let x = tape.leaf(batch.clone());
        let loss = model.batch_loss_node(store, &mut tape, x)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = crate::autodiff::Tape::new();
    let x = tape.leaf(batch.clone());
    let loss = model.batch_loss_node(&model.store, &mut tape, x).map_err(err)?;
    let grads = tape.backward(loss).map_err(err)?;

    let step = 1e-5 as Real;
    let mut worst = 0.0 as Real;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let value = model.store.get(id).clone();
        let grad = grads
            .get(id)
            .ok_or_else(|| format!("no gradient for {}", model.store.name(id)))?;
        let len = value.len();
        let coords: Vec<usize> = if len <= 6 {
            (0..len).collect()
        } else {
            (0..6).map(|_| r.gen_range(0..len)).collect()
        };
        for coord in coords {
            let mut probe = model.store.clone();
            let mut bumped = value.clone();
            bumped.data_mut()[coord] += step;
            probe.set(id, bumped).map_err(err)?;
            let plus = loss_at(&probe).map_err(err)?;
            let mut bumped = value.clone();
            bumped.data_mut()[coord] -= step;
            probe.set(id, bumped).map_err(err)?;
            let minus = loss_at(&probe).map_err(err)?;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grad.data()[coord];
            let rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    let line = format!("max relative gradient error {worst:.2e}");
    if worst < 1e-4 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

fn random_unit_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}
