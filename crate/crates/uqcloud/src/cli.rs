//! The `uqcloud` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use uqcloud_core::arch::Regime;
use uqcloud_core::inference::{predict, SampleStack};
use uqcloud_core::trainer::{evaluate_stack, TrainEvent};
use uqcloud_core::uncertainty::{report, Measure, DEFAULT_SIGMAS};
use uqcloud_core::RngStream;

use crate::checkpoint;
use crate::cloud_io::{load_cloud, write_file, write_ply, PlyFormat};
use crate::dataset::{load_scenes, write_synthetic, SynthPlan, TEST_DIR, TRAIN_DIR};
use crate::export;
use crate::pipeline::{configure_threads, infer_classes, predict_scene, train_network};
use crate::settings::{read_pairs, Settings};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "uqcloud",
    version,
    about = "Point-cloud segmentation with per-point uncertainty"
)]
pub struct Cli {
    /// Worker threads (default: $UQCLOUD_THREADS, else all CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labelled synthetic rooms into DIR/train and DIR/test.
    Synth(SynthArgs),
    /// Train a network on the scenes of a directory.
    Train(TrainArgs),
    /// Score a checkpoint on test scenes, with uncertainty filtering.
    Evaluate(EvaluateArgs),
    /// Write a cloud labelled with predicted classes.
    Predict(PredictArgs),
    /// Write a red/black map of uncertain points.
    Uncertainty(UncertaintyArgs),
    /// Per-class sample quantiles of one point of a dumped sample stack.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// `key = value` scene settings.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: Option<Regime>,
    /// Directory of labelled clouds (its `train/` subdirectory if present).
    #[arg(long)]
    data: PathBuf,
    /// `key = value` training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    block_size: Option<f64>,
    #[arg(long)]
    kl_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the `epoch,step,loss,lr` log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Monte-Carlo forward passes (1 for frequentist models).
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    mc: McArgs,
    /// Directory of labelled clouds (its `test/` subdirectory if present).
    #[arg(long)]
    data: PathBuf,
    /// A measure name or `all` (every measure the sample count supports).
    #[arg(long, default_value = "all")]
    measure: String,
    #[arg(long, default_value_t = DEFAULT_SIGMAS)]
    threshold_sigma: f64,
    #[arg(long)]
    csv: PathBuf,
    /// Write `<scene>_<measure>.ply` uncertainty maps here.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Write `<scene>.stack` sample dumps here.
    #[arg(long)]
    stacks: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    mc: McArgs,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct UncertaintyArgs {
    #[command(flatten)]
    mc: McArgs,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    measure: Measure,
    #[arg(long, default_value_t = DEFAULT_SIGMAS)]
    threshold_sigma: f64,
    #[arg(long)]
    out: PathBuf,
    /// Per-point `x,y,z,label,pred,measure,value,certain` rows.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Raw sample-stack dump for `export`.
    #[arg(long)]
    stack: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    point: usize,
    #[arg(long)]
    quantiles: PathBuf,
}

/// Runs one invocation: 0 on success, 1 on a runtime error, 2 on a usage
/// error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Uncertainty(a) => uncertainty(a),
        Command::Export(a) => export_cmd(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut plan = match &a.spec {
        Some(p) => SynthPlan::from_file(p)?,
        None => SynthPlan::default(),
    };
    if let Some(seed) = a.seed {
        plan.spec.seed = seed;
    }
    let (train, test) = write_synthetic(&plan, &a.out)?;
    println!(
        "wrote {train} scenes to {} and {test} to {}",
        a.out.join(TRAIN_DIR).display(),
        a.out.join(TEST_DIR).display()
    );
    Ok(())
}

fn train_settings(a: &TrainArgs) -> Result<Settings> {
    let pairs = match &a.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let mut s = Settings::from_pairs(&pairs, a.model)?;
    let t = &mut s.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.micro_batch {
        t.micro_batch = v;
    }
    if let Some(v) = a.lr {
        t.lr0 = v;
    }
    if let Some(v) = a.kl_scale {
        t.kl_scale = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.block_size {
        let follows = s.stride == s.block_size;
        s.block_size = v;
        if follows {
            s.stride = v;
        }
    }
    s.validate()?;
    Ok(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let settings = train_settings(&a)?;
    let scenes = load_scenes(&a.data, TRAIN_DIR)?;
    let classes = infer_classes(&scenes)?;
    let mut log = String::from("epoch,step,loss,lr\n");
    print!("{log}");
    let mut io_error = None;
    let mut observer = |event: TrainEvent<'_, f32>| {
        match event {
            TrainEvent::Epoch(l) => {
                let line = format!("{},{},{:.6},{}\n", l.epoch, l.step, l.loss, l.lr);
                print!("{line}");
                let _ = std::io::stdout().flush();
                log.push_str(&line);
            }
            TrainEvent::Checkpoint { net, .. } => {
                if let Err(e) = checkpoint::save(&a.out, &settings, net) {
                    io_error = Some(e);
                    return Err(uqcloud_core::Error::Contract("could not write checkpoint".into()));
                }
            }
        }
        Ok(())
    };
    let trained = train_network(&settings, &scenes, classes, &mut observer);
    if let Some(e) = io_error {
        return Err(e);
    }
    let (net, _) = trained?;
    checkpoint::save(&a.out, &settings, &net)?;
    if let Some(p) = &a.log {
        write_file(p, log.as_bytes())?;
    }
    Ok(())
}

/// Samples actually drawn: one for deterministic models.
fn effective_k(regime: Regime, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(uqcloud_core::Error::Config("--k must be positive".into()).into());
    }
    Ok(if regime.is_stochastic() { k } else { 1 })
}

fn measures_for(name: &str, k: usize) -> Result<Vec<Measure>> {
    if name == "all" {
        return Ok(Measure::ALL.into_iter().filter(|m| m.min_samples() <= k).collect());
    }
    let m: Measure = name.parse()?;
    check_samples(m, k)?;
    Ok(vec![m])
}

fn check_samples(m: Measure, k: usize) -> Result<()> {
    if m.min_samples() > k {
        return Err(uqcloud_core::Error::TooFewSamples {
            what: m.as_str(),
            required: m.min_samples(),
            got: k,
        }
        .into());
    }
    Ok(())
}

fn scene_stack(
    ckpt: &checkpoint::Checkpoint,
    cloud: &uqcloud_core::datapipe::PointCloud,
    k: usize,
    rng: &RngStream,
) -> Result<SampleStack> {
    cloud.validate(None)?;
    predict_scene(&ckpt.net, cloud, ckpt.settings.block_size, k, rng)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.mc.ckpt)?;
    let k = effective_k(ckpt.net.regime(), a.mc.k)?;
    let measures = measures_for(&a.measure, k)?;
    let scenes = load_scenes(&a.data, TEST_DIR)?;
    for dir in [&a.maps, &a.stacks].into_iter().flatten() {
        ensure_dir(dir)?;
    }
    let model = ckpt.net.regime().as_str();
    let mut rows = Vec::new();
    let root = RngStream::new(a.mc.seed);
    for (i, scene) in scenes.iter().enumerate() {
        let labels = scene
            .labels_usize()
            .ok_or_else(|| Error::format(&scene.source, "evaluation needs labelled scenes"))?;
        let stack = scene_stack(&ckpt, scene, k, &root.split(i as u64))?;
        let eval = evaluate_stack(&stack, &labels, &measures, a.threshold_sigma)?;
        rows.extend(export::metrics_rows(&scene.source, model, &eval));
        if let Some(dir) = &a.maps {
            for m in &eval.measures {
                let p = dir.join(format!("{}_{}.ply", scene.source, m.report.measure));
                export::write_uncertainty_map(&p, scene, &m.report.certain)?;
            }
        }
        if let Some(dir) = &a.stacks {
            export::write_stack(&dir.join(format!("{}.stack", scene.source)), &stack)?;
        }
        println!("{}", rows[rows.len() - eval.measures.len() - 1]);
    }
    write_file(&a.csv, export::metrics_csv(&rows).as_bytes())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.mc.ckpt)?;
    let k = effective_k(ckpt.net.regime(), a.mc.k)?;
    let mut cloud = load_cloud(&a.cloud)?;
    let stack = scene_stack(&ckpt, &cloud, k, &RngStream::new(a.mc.seed))?;
    cloud.labels = Some(predict(&stack).into_iter().map(|c| c as u32).collect());
    write_ply(&a.out, &cloud, PlyFormat::BinaryLittleEndian)
}

fn uncertainty(a: UncertaintyArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.mc.ckpt)?;
    let k = effective_k(ckpt.net.regime(), a.mc.k)?;
    check_samples(a.measure, k)?;
    let cloud = load_cloud(&a.cloud)?;
    let stack = scene_stack(&ckpt, &cloud, k, &RngStream::new(a.mc.seed))?;
    let rep = report(&stack, a.measure, a.threshold_sigma)?;
    export::write_uncertainty_map(&a.out, &cloud, &rep.certain)?;
    if let Some(p) = &a.csv {
        write_file(p, export::points_csv(&cloud, &predict(&stack), &rep).as_bytes())?;
    }
    if let Some(p) = &a.stack {
        export::write_stack(p, &stack)?;
    }
    println!("{}: {:.4} of points uncertain", rep.measure, rep.drop_rate());
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let stack = export::read_stack(&a.stack)?;
    write_file(&a.quantiles, export::quantile_csv(&stack, a.point)?.as_bytes())
}
