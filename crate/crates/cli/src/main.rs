//! `sact`: train, evaluate and inspect adaptive-computation residual
//! networks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sact_core::arch::{config_pairs, parse_num, HaltingMode, NetworkSpec};
use sact_core::flops::{count_flops, count_flops_adaptive, EvalRecord};
use sact_core::gradcheck::{network_gradcheck, toy_problem, FdOptions};
use sact_core::io::{
    generate_synthetic, load_checkpoint, load_dataset, read_fixations_csv, read_pgm, save_dataset,
    save_masks, write_field_csv, write_pgm, Checkpoint, Dataset, SyntheticConfig,
};
use sact_core::network::Network;
use sact_core::saliency::{auc_judd, grid_search, postprocess, total_ponder_map, Field, SaliencyParams};
use sact_core::train::{evaluate, initialize_network, parse_precision, train, InitMode, TrainConfig};
use sact_core::{DType, Scalar, Tensor};

#[derive(Parser)]
#[command(name = "sact", version, about = "Adaptive computation time for residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes model.ckpt and metrics.tsv into --out.
    Train(TrainArgs),
    /// Accuracy, units per block and adaptive FLOPs on a dataset.
    Eval(EvalArgs),
    /// Dense FLOPs breakdown of an architecture.
    Flops(FlopsArgs),
    /// Per-block and total ponder cost maps of one image as PGM and CSV.
    PonderMap(PonderMapArgs),
    /// AUC-Judd of a postprocessed ponder cost map against fixations.
    SaliencyEval(SaliencyArgs),
    /// Finite-difference check of the gradients of a toy network.
    Gradcheck(GradcheckArgs),
    /// Write synthetic train and test splits with object masks into --out.
    MakeData(MakeDataArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Architecture config file.
    #[arg(long)]
    arch: PathBuf,
    /// Override the halting threshold epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override the SACT halting-score tile size.
    #[arg(long)]
    tile: Option<usize>,
    /// single or double.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training dataset (SACTDATA).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Backbone checkpoint for two-stage initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long, default_value_t = 224)]
    resolution: usize,
}

#[derive(Args)]
struct PonderMapArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// A dataset (its first record is used) or a P5 PGM image.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SaliencyArgs {
    /// Architecture config; with --checkpoint, --data is an image to run.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image (dataset or PGM) with --checkpoint, otherwise a ponder map CSV.
    #[arg(long)]
    data: PathBuf,
    /// Fixations CSV with `row,col` lines in output-grid coordinates.
    #[arg(long)]
    fixations: PathBuf,
    /// Output grid side; defaults to the image (or map) size.
    #[arg(long)]
    resolution: Option<usize>,
    /// Blur standard deviation; a comma-separated list runs a grid search.
    #[arg(long, default_value = "10")]
    blur_s: String,
    /// Center baseline weight; a comma-separated list runs a grid search.
    #[arg(long, default_value = "0.005")]
    gamma: String,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "double")]
    precision: String,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    /// Optional config selecting the halting mode of the toy network.
    #[arg(long)]
    arch: Option<PathBuf>,
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Config supplying `classes`, `input_channels` and `data.*` keys.
    #[arg(long)]
    arch: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Flops(a) => cmd_flops(a),
        Command::PonderMap(a) => cmd_ponder_map(a),
        Command::SaliencyEval(a) => cmd_saliency(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::MakeData(a) => cmd_make_data(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", msg.join(": ").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn read_text(path: &Path, flag: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("{flag} {}", path.display()))
}

fn precision(arg: Option<&str>, default: DType) -> Result<DType> {
    match arg {
        None => Ok(default),
        Some(s) => parse_precision(s).ok_or_else(|| anyhow!("--precision must be single or double, got `{s}`")),
    }
}

struct Loaded {
    spec: NetworkSpec,
    text: String,
}

fn load_spec(model: &ModelArgs) -> Result<Loaded> {
    let text = read_text(&model.arch, "--arch")?;
    let mut spec = NetworkSpec::from_config_str(&text).with_context(|| format!("--arch {}", model.arch.display()))?;
    if let Some(e) = model.epsilon {
        spec.epsilon = e;
    }
    if let Some(t) = model.tile {
        spec.tile = t;
    }
    spec.validate().context("network spec")?;
    Ok(Loaded { spec, text })
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("--checkpoint {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("--data {}", path.display()))
}

fn network_from<T: Scalar>(spec: &NetworkSpec, ck: &Checkpoint) -> Result<Network<T>> {
    let mut net = Network::<T>::zeros(spec)?;
    ck.apply_to(&mut net, true).context("--checkpoint does not match --arch")?;
    Ok(net)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let Loaded { mut spec, text } = load_spec(&a.model)?;
    if let Some(t) = a.tau {
        spec.tau = t;
    }
    let mut cfg = TrainConfig::from_config_str(&text, &spec).with_context(|| format!("--arch {}", a.model.arch.display()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.precision = precision(a.model.precision.as_deref(), cfg.precision)?;
    cfg.validate()?;
    let data = read_dataset(&a.data)?;
    let backbone = a.checkpoint.as_deref().map(read_checkpoint).transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("--out {}", a.out.display()))?;
    match cfg.precision {
        DType::Single => run_train::<f32>(&spec, &cfg, &data, backbone.as_ref(), &a.out),
        DType::Double => run_train::<f64>(&spec, &cfg, &data, backbone.as_ref(), &a.out),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn run_train<T: Scalar>(spec: &NetworkSpec, cfg: &TrainConfig, data: &Dataset, backbone: Option<&Checkpoint>, out: &Path) -> Result<()> {
    let mode = match backbone {
        Some(ck) => InitMode::TwoStage(ck),
        None => InitMode::Fresh,
    };
    let (mut net, report) = initialize_network::<T>(spec, mode, cfg.seed).context("--checkpoint")?;
    if let Some(r) = report {
        println!("# two-stage init: {} tensors loaded, {} halting tensors fresh", r.loaded.len(), r.missing.len());
    }
    let log_path = out.join("metrics.tsv");
    let mut log = Vec::new();
    let ckpt = out.join("model.ckpt");
    let result = train(&mut net, data, cfg, &mut log, Some(&ckpt));
    fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
    std::io::stdout().write_all(&log)?;
    result?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let Loaded { spec, .. } = load_spec(&a.model)?;
    let ck = read_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let summary = match precision(a.model.precision.as_deref(), DType::Single)? {
        DType::Single => evaluate(&network_from::<f32>(&spec, &ck)?, &data)?,
        DType::Double => evaluate(&network_from::<f64>(&spec, &ck)?, &data)?,
    };
    println!("images\t{}", summary.count);
    println!("accuracy\t{}", summary.accuracy);
    for (k, (u, p)) in summary.units.iter().zip(&summary.ponder).enumerate() {
        println!("block{}\tunits {u}\tponder {p}\tlast_unit_weight {}", k + 1, summary.last_unit_used[k]);
    }
    println!("flops\t{}", summary.flops);
    let dense = EvalRecord::dense(&spec, data.height, data.width);
    println!("dense_flops\t{}", count_flops_adaptive(&spec, data.height, data.width, &dense)?.total);
    Ok(ExitCode::SUCCESS)
}

fn cmd_flops(a: FlopsArgs) -> Result<ExitCode> {
    let text = read_text(&a.arch, "--arch")?;
    let spec = NetworkSpec::from_config_str(&text).with_context(|| format!("--arch {}", a.arch.display()))?;
    if a.resolution == 0 {
        bail!("--resolution must be positive");
    }
    let b = count_flops(&spec, a.resolution);
    for l in &b.layers {
        println!("{}\t{}", l.name, l.flops);
    }
    for (k, f) in b.blocks.iter().enumerate() {
        println!("block{}\t{f}", k + 1);
    }
    println!("aux\t{}", b.aux);
    println!("total\t{}\t{:.3e}", b.total, b.total as f64);
    Ok(ExitCode::SUCCESS)
}

/// One `(1, H, W, C)` image: the first dataset record, or a PGM replicated
/// over the input channels.
fn load_image<T: Scalar>(path: &Path, channels: usize) -> Result<Tensor<T>> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let f = read_pgm(path).with_context(|| format!("--data {}", path.display()))?;
        return Ok(Tensor::from_fn([1, f.height, f.width, channels], |[_, y, x, _]| {
            T::from_f64_lossy(2.0 * f.get(y, x) - 1.0)
        }));
    }
    let ds = read_dataset(path)?;
    if ds.is_empty() {
        bail!("--data {}: dataset is empty", path.display());
    }
    Ok(ds.batch::<T>(&[0]).0)
}

fn ponder_fields<T: Scalar>(spec: &NetworkSpec, ck: &Checkpoint, image: &Path) -> Result<(Vec<Field>, Field, (usize, usize))> {
    let net = network_from::<T>(spec, ck)?;
    let img = load_image::<T>(image, spec.input_channels)?;
    let out = net.infer_image(&img)?;
    let maps: Vec<_> = out.blocks.iter().map(|b| b.ponder_map.clone()).collect();
    let total = total_ponder_map(&maps)?;
    Ok((maps.iter().map(Field::from_ponder_map).collect(), total, (img.height(), img.width())))
}

fn ponder_for(spec: &NetworkSpec, ck: &Checkpoint, image: &Path, prec: DType) -> Result<(Vec<Field>, Field, (usize, usize))> {
    match prec {
        DType::Single => ponder_fields::<f32>(spec, ck, image),
        DType::Double => ponder_fields::<f64>(spec, ck, image),
    }
}

fn cmd_ponder_map(a: PonderMapArgs) -> Result<ExitCode> {
    let Loaded { spec, .. } = load_spec(&a.model)?;
    if spec.halting != HaltingMode::Sact {
        eprintln!("note: --arch has halting={}; maps are constant per block", spec.halting.as_str());
    }
    let ck = read_checkpoint(&a.checkpoint)?;
    let (blocks, total, _) = ponder_for(&spec, &ck, &a.data, precision(a.model.precision.as_deref(), DType::Single)?)?;
    fs::create_dir_all(&a.out).with_context(|| format!("--out {}", a.out.display()))?;
    let write = |name: &str, f: &Field| -> Result<()> {
        write_pgm(&a.out.join(format!("{name}.pgm")), f)?;
        write_field_csv(&a.out.join(format!("{name}.csv")), f)?;
        println!("{name}\t{}x{}\tmean {}", f.height, f.width, f.sum() / f.values.len() as f64);
        Ok(())
    };
    for (k, f) in blocks.iter().enumerate() {
        write(&format!("block{}", k + 1), f)?;
    }
    write("total", &total)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_list(s: &str, flag: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| anyhow!("{flag}: cannot parse `{v}`")))
        .collect()
}

fn read_csv_field(path: &Path) -> Result<Field> {
    let text = read_text(path, "--data")?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse::<f64>()).collect::<std::result::Result<_, _>>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!("--data {}: {e}", path.display()))?;
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        bail!("--data {}: rows must be non-empty and of equal length", path.display());
    }
    Ok(Field::new(rows.len(), width, rows.concat())?)
}

fn cmd_saliency(a: SaliencyArgs) -> Result<ExitCode> {
    let (raw, (h, w)) = match (&a.arch, &a.checkpoint) {
        (Some(arch), Some(ck)) => {
            let model = ModelArgs {
                arch: arch.clone(),
                epsilon: a.epsilon,
                tile: a.tile,
                precision: a.precision.clone(),
            };
            let Loaded { spec, .. } = load_spec(&model)?;
            let ck = read_checkpoint(ck)?;
            let (_, total, hw) = ponder_for(&spec, &ck, &a.data, precision(a.precision.as_deref(), DType::Single)?)?;
            (total, hw)
        }
        (None, None) => {
            let f = read_csv_field(&a.data)?;
            let hw = (f.height, f.width);
            (f, hw)
        }
        _ => bail!("--arch and --checkpoint must be given together"),
    };
    let (h, w) = a.resolution.map_or((h, w), |r| (r, r));
    let fixations = read_fixations_csv(&a.fixations).with_context(|| format!("--fixations {}", a.fixations.display()))?;
    let s_grid = parse_list(&a.blur_s, "--blur-s")?;
    let g_grid = parse_list(&a.gamma, "--gamma")?;
    let sigma = SaliencyParams::default().center_sigma_frac;
    if s_grid.len() == 1 && g_grid.len() == 1 {
        let params = SaliencyParams {
            s: s_grid[0],
            gamma: g_grid[0],
            center_sigma_frac: sigma,
        };
        let map = postprocess(&raw, h, w, &params)?;
        println!("auc_judd\t{}", auc_judd(&map, &fixations)?);
    } else {
        let best = grid_search(&[(raw, fixations)], h, w, &s_grid, &g_grid, sigma)?;
        println!("best_s\t{}\nbest_gamma\t{}\nauc_judd\t{}", best.s, best.gamma, best.auc);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if precision(Some(&a.precision), DType::Double)? != DType::Double {
        bail!("--precision single is too coarse for finite differences; use --precision double");
    }
    let halting = match &a.arch {
        Some(p) => NetworkSpec::from_config_str(&read_text(p, "--arch")?)?.halting,
        None => HaltingMode::Sact,
    };
    if halting == HaltingMode::None {
        bail!("--arch must select act or sact halting for gradcheck");
    }
    let (net, x, y) = toy_problem(a.seed, halting)?;
    let opts = FdOptions {
        seed: a.seed,
        ..FdOptions::default()
    };
    let report = network_gradcheck(&net, &x, &y, a.tau, &opts)?;
    print!("{}", report.to_text());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn data_settings(text: &str, cfg: &mut SyntheticConfig) -> Result<(usize, usize)> {
    let (mut train_n, mut test_n) = (2000, 500);
    for (line, key, value) in config_pairs(text)? {
        match key {
            "data.train_count" => train_n = parse_num(value, line)?,
            "data.test_count" => test_n = parse_num(value, line)?,
            "data.noise" => cfg.noise = parse_num(value, line)?,
            "data.period" => cfg.period = parse_num(value, line)?,
            k if k.starts_with("data.") => bail!("config line {line}: unknown key `{k}`"),
            _ => {}
        }
    }
    Ok((train_n, test_n))
}

fn cmd_make_data(a: MakeDataArgs) -> Result<ExitCode> {
    let mut cfg = SyntheticConfig {
        height: a.resolution,
        width: a.resolution,
        ..SyntheticConfig::default()
    };
    let (mut train_n, mut test_n) = (2000, 500);
    if let Some(p) = &a.arch {
        let text = read_text(p, "--arch")?;
        let spec = NetworkSpec::from_config_str(&text).with_context(|| format!("--arch {}", p.display()))?;
        cfg.classes = spec.classes;
        cfg.channels = spec.input_channels;
        (train_n, test_n) = data_settings(&text, &mut cfg).with_context(|| format!("--arch {}", p.display()))?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("--out {}", a.out.display()))?;
    for (name, count, seed) in [("train", train_n, 2 * a.seed), ("test", test_n, 2 * a.seed + 1)] {
        let (ds, masks) = generate_synthetic(&SyntheticConfig {
            count,
            seed,
            ..cfg.clone()
        })?;
        save_dataset(&a.out.join(format!("{name}.sactdata")), &ds)?;
        save_masks(&a.out.join(format!("{name}.sactmask")), &masks)?;
        println!("{name}\t{count} images\t{}x{}x{}\t{} classes", cfg.height, cfg.width, cfg.channels, cfg.classes);
    }
    Ok(ExitCode::SUCCESS)
}
