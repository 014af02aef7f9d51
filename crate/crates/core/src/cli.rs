//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autocontext::{
    checkpoint_hash, generate_context, predict_autocontext, train_stage2, PipelineManifest, TileParams,
};
use crate::error::Error;
use crate::infer::{argmax_labels, plan_tiles, predict, VoxResNetModel};
use crate::metrics::{evaluate_case, MetricsReport};
use crate::netspec::build_voxresnet;
use crate::phantom::write_phantom_dataset;
use crate::preprocess::{build_input_stack, PreprocessConfig};
use crate::train::{Checkpoint, TrainConfig, Trainer};
use crate::volio::{read_labels, read_volume, read_vvol, write_labels, write_volume, CaseEntry, DatasetManifest, VVolData};
use crate::volume::Volume;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "voxresnet", version, about = "Volumetric residual segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Edge length of each cubic phantom.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Build the two-channels-per-modality input stacks for every case.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        /// CLAHE tiles per slice axis.
        #[arg(long, default_value_t = 8)]
        tiles: usize,
        #[arg(long, default_value_t = 0.01)]
        clip: f64,
        #[arg(long, default_value_t = 256)]
        bins: usize,
    },
    /// Train a network on every case of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Flat key = value training config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Tiled prediction of one case.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        case: CaseArgs,
        #[command(flatten)]
        tiles: TileArgs,
        #[command(flatten)]
        outputs: OutputArgs,
    },
    /// Two-stage auto-context training or prediction.
    #[command(subcommand)]
    Autocontext(AutoContextCommand),
    /// Compare predicted and reference label volumes.
    Evaluate {
        /// Predicted label volumes; paired in order with `--truth`.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true)]
        truth: Vec<PathBuf>,
        /// Directory for per-case and aggregate key-value reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Save a grid of evenly spaced axial slices as a grayscale PNG.
    Slices {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long, default_value_t = 9)]
        count: usize,
    },
}

#[derive(Subcommand, Debug)]
enum AutoContextCommand {
    /// Generate stage-1 context maps and train the stage-2 network.
    Train {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pipeline directory: context maps, stage-2 checkpoint, pipeline.txt.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tiles: TileArgs,
    },
    /// Predict with both stages of a trained pipeline.
    Predict {
        #[arg(long)]
        pipeline: PathBuf,
        #[command(flatten)]
        case: CaseArgs,
        #[command(flatten)]
        tiles: TileArgs,
        #[command(flatten)]
        outputs: OutputArgs,
    },
}

#[derive(Args, Debug)]
struct CaseArgs {
    /// Input volume (.vvol).
    #[arg(long, conflicts_with = "manifest")]
    input: Option<PathBuf>,
    #[arg(long, requires = "case")]
    manifest: Option<PathBuf>,
    /// Case id within `--manifest`.
    #[arg(long, requires = "manifest")]
    case: Option<String>,
}

#[derive(Args, Debug)]
struct TileArgs {
    #[arg(long, default_value_t = 80)]
    tile: usize,
    /// Defaults to half the tile.
    #[arg(long)]
    stride: Option<usize>,
}

impl TileArgs {
    fn params(&self) -> TileParams {
        TileParams {
            tile: self.tile,
            stride: self.stride.unwrap_or((self.tile / 2).max(1)),
        }
    }
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Probability volume (.vvol, one f32 channel per class).
    #[arg(long)]
    out_prob: Option<PathBuf>,
    /// Label volume (.vvol, u8).
    #[arg(long)]
    out_labels: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(Error::NonFinite(_)) => EXIT_NUMERIC,
            CliError::Lib(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn existing(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Lib(Error::Io { context, source: e })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Phantom { out, cases, seed, size } => {
            if cases == 0 {
                return Err(CliError::Usage("--cases must be >= 1".into()));
            }
            let m = write_phantom_dataset(&out, cases, seed, [size; 3])?;
            println!("wrote {} phantom cases to {}", m.cases.len(), out.display());
            Ok(())
        }
        Command::Preprocess {
            manifest,
            out,
            sigma,
            tiles,
            clip,
            bins,
        } => {
            existing(&manifest, "manifest")?;
            let config = PreprocessConfig {
                sigma_vox: sigma,
                tiles: (tiles, tiles),
                clip_fraction: clip,
                bins,
                ..PreprocessConfig::default()
            };
            preprocess_dataset(&manifest, &out, &config)
        }
        Command::Train {
            manifest,
            config,
            out,
            resume,
        } => {
            existing(&manifest, "manifest")?;
            if let Some(c) = &config {
                existing(c, "config")?;
            }
            train_command(&manifest, config.as_deref(), &out, resume)
        }
        Command::Predict {
            checkpoint,
            case,
            tiles,
            outputs,
        } => {
            existing(&checkpoint, "checkpoint")?;
            let input = load_case_input(&case)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = VoxResNetModel::from_checkpoint(&ckpt)?;
            let t = tiles.params();
            let plan = plan_tiles(input.extents(), t.tile, t.stride)?;
            let probs = predict(&model, &input, &plan)?;
            write_outputs(&probs, &outputs)
        }
        Command::Autocontext(AutoContextCommand::Train {
            stage1,
            manifest,
            config,
            out,
            tiles,
        }) => {
            existing(&stage1, "stage-1 checkpoint")?;
            existing(&manifest, "manifest")?;
            if let Some(c) = &config {
                existing(c, "config")?;
            }
            autocontext_train(&stage1, &manifest, config.as_deref(), &out, tiles.params())
        }
        Command::Autocontext(AutoContextCommand::Predict {
            pipeline,
            case,
            tiles,
            outputs,
        }) => {
            existing(&pipeline, "pipeline directory")?;
            let input = load_case_input(&case)?;
            let (s1, s2) = PipelineManifest::read(&pipeline.join("pipeline.txt"))?.load(&pipeline)?;
            let probs = predict_autocontext(&s1, &s2, &input, tiles.params())?;
            write_outputs(&probs, &outputs)
        }
        Command::Evaluate { pred, truth, out } => {
            if pred.len() != truth.len() {
                return Err(CliError::Usage(format!(
                    "{} --pred volumes but {} --truth volumes",
                    pred.len(),
                    truth.len()
                )));
            }
            for p in pred.iter().chain(&truth) {
                existing(p, "label volume")?;
            }
            evaluate_command(&pred, &truth, out.as_deref())
        }
        Command::Slices {
            input,
            out,
            channel,
            count,
        } => {
            existing(&input, "input volume")?;
            if count == 0 {
                return Err(CliError::Usage("--count must be >= 1".into()));
            }
            slices_command(&input, &out, channel, count)
        }
    }
}

fn load_case_input(case: &CaseArgs) -> CliResult<Volume> {
    match (&case.input, &case.manifest, &case.case) {
        (Some(p), _, _) => {
            existing(p, "input volume")?;
            Ok(read_volume(p)?)
        }
        (None, Some(m), Some(id)) => {
            existing(m, "manifest")?;
            let manifest = DatasetManifest::read(m)?;
            let entry = manifest.case(id)?;
            Ok(manifest.load_input(entry)?)
        }
        _ => Err(CliError::Usage("give either --input or --manifest with --case".into())),
    }
}

fn write_outputs(probs: &Volume, outputs: &OutputArgs) -> CliResult {
    if outputs.out_prob.is_none() && outputs.out_labels.is_none() {
        return Err(CliError::Usage("give --out-prob and/or --out-labels".into()));
    }
    if let Some(p) = &outputs.out_prob {
        write_volume(probs, p)?;
    }
    if let Some(p) = &outputs.out_labels {
        write_labels(&argmax_labels(probs)?, p)?;
    }
    Ok(())
}

fn preprocess_dataset(manifest: &Path, out: &Path, config: &PreprocessConfig) -> CliResult {
    let m = DatasetManifest::read(manifest)?;
    m.validate()?;
    let mut cases = Vec::with_capacity(m.cases.len());
    for case in &m.cases {
        let stack = build_input_stack(&m.load_modalities(case)?, config)?;
        let stack_name = format!("{}_stack.vvol", case.id);
        write_volume(&stack, &out.join(&stack_name))?;
        let label = match &case.label {
            Some(_) => {
                let name = format!("{}_label.vvol", case.id);
                write_labels(&m.load_labels(case)?, &out.join(&name))?;
                Some(PathBuf::from(name))
            }
            None => None,
        };
        cases.push(CaseEntry {
            id: case.id.clone(),
            spacing_mm: case.spacing_mm,
            label,
            modalities: vec![("stack".to_string(), PathBuf::from(stack_name))],
        });
        println!("{}: {} channels", case.id, stack.channels());
    }
    let new = DatasetManifest {
        dir: out.to_path_buf(),
        cases,
    };
    new.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn load_config(config: Option<&Path>) -> CliResult<TrainConfig> {
    Ok(match config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    })
}

fn train_command(manifest: &Path, config: Option<&Path>, out: &Path, resume: bool) -> CliResult {
    let config = load_config(config)?;
    let dataset = DatasetManifest::read(manifest)?.load_training_set()?;
    let channels = dataset[0].0.channels();
    let net = build_voxresnet(channels, config.num_classes, config.width_scale)?;
    let mut trainer = if resume {
        Trainer::resume(&net, &dataset, config.clone(), &Checkpoint::load(out)?)?
    } else {
        Trainer::new(&net, &dataset, config.clone())?
    };
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    let log_path = out.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(io_err(format!("opening {}", log_path.display())))?;
    let every = config.checkpoint_every;
    trainer.run(|entry, t| {
        println!("{entry}");
        writeln!(log, "{entry}").map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
        if every > 0 && t.iteration() % every == 0 && !t.is_done() {
            t.checkpoint().save(out)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(out)?;
    Ok(())
}

fn autocontext_train(stage1: &Path, manifest: &Path, config: Option<&Path>, out: &Path, tiles: TileParams) -> CliResult {
    let config = load_config(config)?;
    let m = DatasetManifest::read(manifest)?;
    let dataset = m.load_training_set()?;
    let s1 = Checkpoint::load(stage1)?;
    let inputs: Vec<Volume> = dataset.iter().map(|(v, _)| v.clone()).collect();
    let contexts = generate_context(&s1, &inputs, tiles)?;
    for (case, ctx) in m.cases.iter().zip(&contexts) {
        write_volume(ctx, &out.join("context").join(format!("{}_ctx.vvol", case.id)))?;
    }
    let (ckpt, logs) = train_stage2(&dataset, &contexts, &config)?;
    for entry in &logs {
        println!("{entry}");
    }
    let stage2_dir = out.join("stage2");
    ckpt.save(&stage2_dir)?;
    let stage1_abs = fs::canonicalize(stage1).map_err(io_err(format!("resolving {}", stage1.display())))?;
    let pipeline = PipelineManifest {
        stage1: stage1_abs.display().to_string(),
        stage1_hash: checkpoint_hash(stage1)?,
        stage2: "stage2".to_string(),
        stage2_hash: checkpoint_hash(&stage2_dir)?,
        refinements: 1,
    };
    let p = out.join("pipeline.txt");
    fs::write(&p, pipeline.to_text()).map_err(io_err(format!("writing {}", p.display())))?;
    Ok(())
}

fn evaluate_command(pred: &[PathBuf], truth: &[PathBuf], out: Option<&Path>) -> CliResult {
    let mut reports: Vec<MetricsReport> = Vec::with_capacity(pred.len());
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        let p = read_labels(p)?;
        let t = read_labels(t)?;
        let report = evaluate_case(&p, &t, t.spacing())?;
        println!("case {i}\n{}", report.to_table());
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
            let path = dir.join(format!("case_{i:02}.txt"));
            fs::write(&path, report.to_kv()).map_err(io_err(format!("writing {}", path.display())))?;
        }
        reports.push(report);
    }
    let aggregate = aggregate_reports(&reports);
    println!("aggregate\n{}", aggregate.to_table());
    if let Some(dir) = out {
        let path = dir.join("aggregate.txt");
        fs::write(&path, aggregate.to_kv()).map_err(io_err(format!("writing {}", path.display())))?;
    }
    Ok(())
}

/// Per-class means over cases (undefined entries skipped).
pub fn aggregate_reports(reports: &[MetricsReport]) -> MetricsReport {
    use crate::metrics::ClassMetrics;
    let mut classes: Vec<ClassMetrics> = Vec::new();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let ids: Vec<u8> = reports
        .iter()
        .flat_map(|r| r.classes.iter().map(|c| c.class))
        .fold(Vec::new(), |mut acc, c| {
            if !acc.contains(&c) {
                acc.push(c);
            }
            acc
        });
    for id in ids {
        let rows: Vec<&ClassMetrics> = reports.iter().filter_map(|r| r.get(id)).collect();
        classes.push(ClassMetrics {
            class: id,
            name: rows[0].name.clone(),
            dc_percent: mean(rows.iter().map(|c| c.dc_percent).collect()).unwrap_or(0.0),
            hd95_mm: mean(rows.iter().filter_map(|c| c.hd95_mm).collect()),
            avd_percent: mean(rows.iter().filter_map(|c| c.avd_percent).collect()),
        });
    }
    MetricsReport { classes }
}

fn slices_command(input: &Path, out: &Path, channel: usize, count: usize) -> CliResult {
    let (extents, values): ([usize; 3], Vec<f32>) = match read_vvol(input)? {
        VVolData::Image(v) => {
            if channel >= v.channels() {
                return Err(CliError::Usage(format!(
                    "channel {channel} out of range for {} channels",
                    v.channels()
                )));
            }
            (v.extents(), v.channel(channel).to_vec())
        }
        VVolData::Labels(l) => (l.extents(), l.data().iter().map(|&c| c as f32).collect()),
    };
    let [d, h, w] = extents;
    let count = count.min(d);
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut img = image::GrayImage::new((cols * w) as u32, (rows * h) as u32);
    for k in 0..count {
        let z = if count == 1 { d / 2 } else { k * (d - 1) / (count - 1) };
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for y in 0..h {
            for x in 0..w {
                let v = values[(z * h + y) * w + x];
                let g = ((v - lo) * scale).round().clamp(0.0, 255.0) as u8;
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Luma([g]));
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    img.save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| CliError::Lib(Error::invalid(format!("writing {}: {e}", out.display()))))?;
    Ok(())
}
