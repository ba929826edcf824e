use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand};
use hybridwarp::io::{self, Dtype, HvolData};
use hybridwarp::loss::LossWeights;
use hybridwarp::metrics::{compare_reports, dice, endpoint_error, kappa, repro_epsilon, EvalReport};
use hybridwarp::model::NetConfig;
use hybridwarp::ops::{warp_tensor, Interp};
use hybridwarp::synth::{make_dataset, Direction, PhantomConfig, Split, SplitSpec, MANIFEST_FILE};
use hybridwarp::train::{evaluate, run, ExternalFields, Mode, RunOptions, TrainConfig, Trainer};
use hybridwarp::Error;
use serde_json::json;

/// Maps the first library error in the chain to an exit code.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 5,
                Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::Shape(_) => 3,
                Error::Numeric(_) | Error::EmptyRegion(_) => 3,
                Error::Divergence { .. } => 4,
                Error::Manifest(_) => 5,
                Error::Contract(_) => 2,
            };
        }
    }
    2
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

const DEFAULT_WIDTHS: &str = "4,8,16,32,64,32,16,8,4";

#[derive(Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Pairs in the main split; each pair yields two ordered samples.
    #[arg(long)]
    pairs: usize,
    /// Split of the main pairs.
    #[arg(long, default_value = "train", value_parser = ["train", "vali", "test", "repro"])]
    split: String,
    #[arg(long, default_value_t = 0)]
    vali_pairs: usize,
    #[arg(long, default_value_t = 0)]
    test_pairs: usize,
    /// Extra rescan pairs (always zero deformation).
    #[arg(long, default_value_t = 0)]
    repro_pairs: usize,
    /// Cubic extent of every volume.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero deformation between the time-points of the main pairs.
    #[arg(long)]
    short_interval: bool,
    /// Largest displacement component, in voxels.
    #[arg(long, default_value_t = 3.0)]
    magnitude: f64,
    /// Deformation smoothing radius, in voxels.
    #[arg(long, default_value_t = 8)]
    smoothness: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Per-scan multiplicative drift range.
    #[arg(long, default_value_t = 0.05)]
    drift: f64,
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = PhantomConfig {
        size: [a.size; 3],
        deform_magnitude: a.magnitude,
        deform_smoothness: a.smoothness,
        noise_sd: a.noise,
        intensity_drift: a.drift,
        seed: a.seed,
    };
    let main: Split = a.split.parse()?;
    let mut specs = vec![SplitSpec::new(main, a.pairs)];
    if a.short_interval {
        specs[0].interval = hybridwarp::synth::Interval::Short;
    }
    for (split, n) in [
        (Split::Vali, a.vali_pairs),
        (Split::Test, a.test_pairs),
        (Split::Repro, a.repro_pairs),
    ] {
        if n > 0 {
            if split == main {
                bail!(Error::Contract(format!("split {split} given twice")));
            }
            specs.push(SplitSpec::new(split, n));
        }
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let manifest = make_dataset(&a.out, &cfg, &specs)?;
    print_json(&json!({
        "manifest": a.out.join(MANIFEST_FILE),
        "samples": manifest.samples.len(),
    }))
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest; samples of the train split are optimized, the vali
    /// split is only logged.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "hybrid", value_parser = ["hybrid", "segnet", "regnet"])]
    mode: String,
    /// Total iterations (also the target when resuming).
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Image-similarity weight [default: 10]
    #[arg(long)]
    alpha: Option<f64>,
    /// Smoothness weight [default: 0.1]
    #[arg(long)]
    beta: Option<f64>,
    /// Consistency weight [default: 1]
    #[arg(long)]
    gamma: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_WIDTHS)]
    seg_widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_WIDTHS)]
    reg_widths: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: u64,
    /// Foreground weight in the overlap terms; 1 is uniform.
    #[arg(long, default_value_t = 1.0)]
    foreground_weight: f64,
    /// Validation loss every N iterations (0 disables).
    #[arg(long, default_value_t = 50)]
    vali_every: u64,
    /// Training log [default: <out>.log.jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from the checkpoint at --out; its stored config wins.
    #[arg(long)]
    resume: bool,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(BufWriter::new(f))
}

/// Copies each line to stdout as it is written.
struct Tee<W: Write>(W);

impl<W: Write> Write for Tee<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        std::io::stdout().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()?;
        std::io::stdout().flush()
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mode: Mode = a.mode.parse()?;
    let defaults = LossWeights::default();
    let given = [("alpha", a.alpha), ("beta", a.beta), ("gamma", a.gamma)];
    let ignored: &[&str] = match mode {
        Mode::Segnet => &["alpha", "beta", "gamma"],
        Mode::Regnet => &["gamma"],
        Mode::Hybrid => &[],
    };
    for (name, v) in given {
        if v.is_some() && ignored.contains(&name) {
            eprintln!("warning: --{name} has no effect in {mode} mode");
        }
    }
    let weights = LossWeights {
        alpha: a.alpha.unwrap_or(defaults.alpha),
        beta: a.beta.unwrap_or(defaults.beta),
        gamma: a.gamma.unwrap_or(defaults.gamma),
    };
    let (_, samples) = io::load_dataset(&a.data, |e| e.split == Split::Train)?;
    if samples.is_empty() {
        bail!(Error::Manifest(format!("{} lists no train samples", a.data.display())));
    }
    let (_, vali) = io::load_dataset(&a.data, |e| e.split == Split::Vali)?;

    let mut trainer = if a.resume {
        let ck = io::load_checkpoint(&a.out).context("loading checkpoint to resume")?;
        if a.alpha.is_some() || a.beta.is_some() || a.gamma.is_some() {
            eprintln!("warning: loss weights are taken from the checkpoint when resuming");
        }
        eprintln!("resuming {} run at iteration {}", ck.config.mode, ck.iteration);
        let mut t = Trainer::resume(ck, samples)?;
        t.set_iterations(a.iters);
        t
    } else {
        let cfg = TrainConfig {
            mode,
            weights,
            lr: a.lr,
            iterations: a.iters,
            seed: a.seed,
            checkpoint_every: a.checkpoint_every,
            seg_net: NetConfig::segmentation(a.seed).with_widths(&a.seg_widths),
            reg_net: NetConfig::registration(a.seed.wrapping_add(1)).with_widths(&a.reg_widths),
            foreground_weight: a.foreground_weight,
            ..TrainConfig::default()
        };
        Trainer::new(&cfg, samples)?
    };
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let mut log = Tee(open_log(&log_path, a.resume)?);
    let mut vali_log = if vali.is_empty() || a.vali_every == 0 {
        None
    } else {
        Some(open_log(&with_suffix(&a.out, ".vali.jsonl"), a.resume)?)
    };
    run(
        &mut trainer,
        RunOptions {
            checkpoint: &a.out,
            log: &mut log,
            vali: &vali,
            vali_log: vali_log.as_mut().map(|w| w as &mut dyn Write),
            vali_every: a.vali_every,
        },
    )?;
    if let Some(w) = vali_log.as_mut() {
        w.flush()?;
    }
    eprintln!("wrote {} after {} iterations", a.out.display(), trainer.iteration());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory of `<sample_id>.hvol` fields (T_{t,s}) replacing the
    /// checkpoint's registration.
    #[arg(long)]
    external_disp: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    /// Only samples of this split [default: all]
    #[arg(long, value_parser = ["train", "vali", "test", "repro"])]
    split: Option<String>,
    /// Only samples of this ordering [default: both]
    #[arg(long, value_parser = ["forward", "backward"])]
    direction: Option<String>,
}

fn print_table(report: &EvalReport) {
    eprintln!("{} ({} samples)", report.method, report.records.len());
    eprintln!("{:<20} {:>22} {:>5}", "metric", "mean ± sd", "n");
    for (name, a) in &report.aggregates {
        eprintln!("{name:<20} {:>22} {:>5}", format!("{:.4} ± {:.4}", a.mean, a.sd), a.n);
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = io::load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let split: Option<Split> = a.split.as_deref().map(str::parse).transpose()?;
    let direction = a.direction.as_deref().map(|d| match d {
        "forward" => Direction::Forward,
        _ => Direction::Backward,
    });
    let (manifest, samples) = io::load_dataset(&a.data, |e| {
        split.is_none_or(|s| e.split == s) && direction.is_none_or(|d| e.direction == d)
    })?;
    if samples.is_empty() {
        bail!(Error::Manifest("no samples match the selection".into()));
    }
    let external = match &a.external_disp {
        Some(dir) => {
            if !dir.is_dir() {
                bail!(Error::Manifest(format!(
                    "external field directory {} does not exist",
                    dir.display()
                )));
            }
            let mut fields = ExternalFields::new();
            for e in &manifest.samples {
                let p = dir.join(format!("{}.hvol", e.id));
                if p.exists() {
                    fields.insert(e.id.clone(), io::read_field(&p)?);
                }
            }
            Some(fields)
        }
        None => None,
    };
    let report = evaluate(&ck, &samples, external.as_ref())?;
    io::write_json(&a.report, &report)?;
    print_table(&report);
    print_json(&json!({ "report": a.report, "method": report.method, "aggregates": report.aggregates }))
}

#[derive(Args)]
pub struct WarpArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    disp: PathBuf,
    #[arg(long, default_value = "trilinear", value_parser = ["trilinear", "nearest"])]
    interp: String,
    #[arg(long)]
    out: PathBuf,
}

pub fn warp(a: WarpArgs) -> Result<()> {
    let interp: Interp = a.interp.parse()?;
    let img = io::read_hvol(&a.image)?;
    let disp = io::read_field(&a.disp)?;
    let out = warp_tensor(&img.to_tensor(), &disp, interp)?;
    let dtype = match (&img.data, interp) {
        (HvolData::U8(_), Interp::Nearest) => Dtype::U8,
        (HvolData::F32(_), _) => Dtype::F32,
        _ => Dtype::F64,
    };
    io::write_volume(&a.out, &out, dtype)?;
    print_json(&json!({ "out": a.out, "dims": out.dims() }))
}

#[derive(Subcommand)]
pub enum MetricsCommand {
    /// Dice overlap of two masks.
    Dice { a: PathBuf, b: PathBuf },
    /// Cohen's kappa of two masks.
    Kappa { a: PathBuf, b: PathBuf },
    /// Reproducibility error (percent) of two tract-median FA values.
    Epsilon {
        #[arg(allow_negative_numbers = true)]
        fa1: f64,
        #[arg(allow_negative_numbers = true)]
        fa2: f64,
    },
    /// Mean endpoint error between two displacement fields.
    Epe {
        est: PathBuf,
        gt: PathBuf,
        /// Restrict to this mask.
        #[arg(long)]
        roi: Option<PathBuf>,
    },
}

pub fn metrics(m: MetricsCommand) -> Result<()> {
    let v = match m {
        MetricsCommand::Dice { a, b } => json!({ "dice": dice(&io::read_mask(a)?, &io::read_mask(b)?)? }),
        MetricsCommand::Kappa { a, b } => json!({ "kappa": kappa(&io::read_mask(a)?, &io::read_mask(b)?)? }),
        MetricsCommand::Epsilon { fa1, fa2 } => json!({ "epsilon_percent": repro_epsilon(fa1, fa2)? }),
        MetricsCommand::Epe { est, gt, roi } => {
            let roi = roi.map(io::read_mask).transpose()?;
            json!({ "endpoint_error": endpoint_error(&io::read_field(est)?, &io::read_field(gt)?, roi.as_ref())? })
        }
    };
    print_json(&v)
}

#[derive(Args)]
pub struct CompareArgs {
    /// Exactly two reports.
    #[arg(long = "report", num_args = 1, required = true)]
    reports: Vec<PathBuf>,
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let [ra, rb] = a.reports.as_slice() else {
        return Err(anyhow!(Error::Contract(format!(
            "compare takes two --report files, got {}",
            a.reports.len()
        ))));
    };
    let load = |p: &PathBuf| -> Result<EvalReport> {
        io::read_json(p).with_context(|| format!("reading report {}", p.display()))
    };
    let cmp = compare_reports(&load(ra)?, &load(rb)?)?;
    let mut v = serde_json::to_value(&cmp)?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("reports".into(), json!([ra, rb]));
    }
    print_json(&v)
}

/// Chain of causes, skipping any already quoted by the message above it.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}
