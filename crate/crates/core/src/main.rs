use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use defect_eval::decision::parse_tau_range;
use defect_eval::gradcheck::{self, GradCheckConfig, GradCheckReport};
use defect_eval::io::{self, collect_phi, load_weights, write_dataset, write_simulation_log};
use defect_eval::metrics::{naive_sample_miou, EmptyPolicy};
use defect_eval::report::summary_csv_path;
use defect_eval::synth::{dilution_scenario, gen_dataset, simulate_predictions};
use defect_eval::{
    emit_report, evaluate_dataset, evaluate_masks, threshold_sweep, DatasetLayout, DecisionRule,
    DetectorProfile, LoadOptions, MetricReport, Prediction, ReportFormat, Statistic,
    SynthConfig,
};

#[derive(Parser, Debug)]
#[command(name = "defect-eval", version, about = "Sample-centric metrics for binary defect segmentation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress progress and summary messages.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute pooled mIoU, Sample_mIoU, Seg_Accuracy and Seg_Recall.
    Evaluate(EvaluateArgs),
    /// Seg_Accuracy and Seg_Recall over a grid of decision thresholds.
    Sweep(SweepArgs),
    /// Generate a synthetic dataset, optionally with simulated predictions.
    Synth(SynthArgs),
    /// Show how pixel pooling hides a missed small defect.
    DemoDilution,
    /// Compare analytic loss gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Directory of ground-truth masks.
    #[arg(long, requires = "pred", conflicts_with = "manifest")]
    gt: Option<PathBuf>,

    /// Directory of predicted masks or probability maps.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,

    /// CSV manifest with columns id,gt_path,pred_path.
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Decision statistic: count, fraction, max-component or max-prob.
    #[arg(long, default_value = "count")]
    phi: Statistic,

    /// Binarization threshold for probability maps.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,

    /// 8-bit pixels at or above this value are defects.
    #[arg(long, default_value_t = io::DEFAULT_BINARY_THRESHOLD)]
    binary_threshold: u8,
}

impl InputArgs {
    fn layout(&self) -> Result<DatasetLayout, Failure> {
        match (&self.gt, &self.pred, &self.manifest) {
            (Some(gt), Some(pred), None) => Ok(DatasetLayout::directories(gt, pred)),
            (None, None, Some(m)) => Ok(DatasetLayout::Manifest(m.clone())),
            _ => Err(Failure::Usage(anyhow!(
                "give either --gt and --pred, or --manifest"
            ))),
        }
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            binary_threshold: self.binary_threshold,
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    input: InputArgs,

    /// Decision threshold on the statistic.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,

    /// CSV with columns id,weight for a weighted Sample_mIoU.
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Report path (default: JSON on stdout).
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,

    /// Inclusive grid as start:stop:step.
    #[arg(long, conflicts_with = "tau_list", required_unless_present = "tau_list")]
    tau_grid: Option<String>,

    /// Comma-separated ascending thresholds.
    #[arg(long, value_delimiter = ',')]
    tau_list: Option<Vec<f64>>,

    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML file with the dataset configuration.
    #[arg(long)]
    config: PathBuf,

    #[arg(long)]
    out_dir: PathBuf,

    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,

    /// TOML detector profile; writes simulated predictions to <out-dir>/pred.
    #[arg(long)]
    simulate_profile: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,

    /// Probability clamp epsilon.
    #[arg(long, default_value_t = defect_eval::loss::DEFAULT_EPS)]
    eps: f64,

    /// Relative tolerance for map and joint gradients.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,

    /// Relative tolerance for the sample-level gradient.
    #[arg(long, default_value_t = 1e-7)]
    cls_tolerance: f64,

    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,

    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Evaluate(args) => run_evaluate(args, cli.quiet),
        Command::Sweep(args) => run_sweep(args),
        Command::Synth(args) => run_synth(args, cli.quiet),
        Command::DemoDilution => run_demo(),
        Command::GradCheck(args) => run_grad_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) | Failure::Data(e) => eprintln!("error: {e:#}"),
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn run_evaluate(args: EvaluateArgs, quiet: bool) -> Result<(), Failure> {
    let rule = DecisionRule::new(args.input.phi, args.tau, args.input.theta).map_err(usage)?;
    let layout = args.input.layout()?;
    let weights = args
        .weights
        .as_deref()
        .map(load_weights)
        .transpose()
        .map_err(data)?;
    let report = evaluate_dataset(&layout, &rule, weights.as_ref(), &args.input.load_options())
        .map_err(data)?;
    match &args.out {
        Some(path) => {
            emit_report(&report, args.format, path).map_err(data)?;
            if !quiet {
                print_summary(&report);
                if args.format == ReportFormat::Csv {
                    eprintln!("summary written to {}", summary_csv_path(path).display());
                }
            }
        }
        None => {
            let text = match args.format {
                ReportFormat::Json => report.to_json(),
                ReportFormat::Csv => report
                    .per_sample_csv()
                    .and_then(|a| Ok(format!("{a}\n{}", report.summary_csv()?))),
            }
            .map_err(data)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
}

fn print_summary(report: &MetricReport) {
    let s = &report.summary;
    eprintln!(
        "{} samples ({} relevant, TN ratio {:.6})",
        s.m_total, s.m_eff, s.tn_ratio
    );
    eprintln!(
        "mIoU {}  Sample_mIoU {}  Seg_Accuracy {:.6}  Seg_Recall {}",
        fmt_opt(s.pooled_miou),
        fmt_opt(s.sample_miou),
        s.seg_accuracy,
        fmt_opt(s.seg_recall)
    );
}

fn run_sweep(args: SweepArgs) -> Result<(), Failure> {
    let grid = match (&args.tau_grid, &args.tau_list) {
        (Some(range), None) => parse_tau_range(range).map_err(|e| usage(anyhow!(e)))?,
        (None, Some(list)) => list.clone(),
        _ => return Err(usage(anyhow!("give exactly one of --tau-grid or --tau-list"))),
    };
    // τ only matters per grid point; the rule supplies Φ and θ.
    let rule = DecisionRule::new(args.input.phi, 0.0, args.input.theta).map_err(usage)?;
    let layout = args.input.layout()?;
    let phis = collect_phi(&layout, &rule, &args.input.load_options()).map_err(data)?;
    let samples: Vec<(bool, f64)> = phis.iter().map(|(_, y, v)| (*y, *v)).collect();
    let rows = threshold_sweep(&samples, &grid).map_err(usage)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let write = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
        w.write_record(["tau", "tp", "fp", "fn", "tn", "seg_accuracy", "seg_recall"])?;
        for r in &rows {
            w.write_record([
                format!("{:.6}", r.tau),
                r.confusion.tp.to_string(),
                r.confusion.fp.to_string(),
                r.confusion.fn_.to_string(),
                r.confusion.tn.to_string(),
                format!("{:.6}", r.seg_accuracy),
                r.seg_recall.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ])?;
        }
        Ok(())
    };
    write(&mut w).map_err(data)?;
    let bytes = w.into_inner().map_err(|e| data(anyhow!(e.to_string())))?;
    match &args.out {
        Some(path) => std::fs::write(path, &bytes)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(data)?,
        None => std::io::stdout().write_all(&bytes).map_err(data)?,
    }
    Ok(())
}

fn run_synth(args: SynthArgs, quiet: bool) -> Result<(), Failure> {
    let mut cfg: SynthConfig = io::load_toml(&args.config).map_err(usage)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    let profile: Option<DetectorProfile> = args
        .simulate_profile
        .as_deref()
        .map(io::load_toml)
        .transpose()
        .map_err(usage)?;
    if let Some(p) = &profile {
        p.validate().map_err(usage)?;
    }

    let gt = gen_dataset(&cfg).map_err(data)?;
    write_dataset(&args.out_dir.join("gt"), &gt).map_err(data)?;
    let positives = gt.iter().filter(|s| s.mask.any()).count();
    if let Some(profile) = profile {
        let sim = simulate_predictions(&gt, &profile, cfg.seed).map_err(data)?;
        write_dataset(&args.out_dir.join("pred"), &sim.predictions).map_err(data)?;
        write_simulation_log(&args.out_dir.join("simulation_log.csv"), &sim.log).map_err(data)?;
    }
    if !quiet {
        eprintln!(
            "wrote {} samples ({positives} positive) to {}",
            gt.len(),
            args.out_dir.display()
        );
    }
    Ok(())
}

fn run_demo() -> Result<(), Failure> {
    let scenario = dilution_scenario();
    let preds: Vec<(String, Prediction)> = scenario
        .pred
        .iter()
        .map(|p| (p.id.clone(), Prediction::Mask(p.mask.clone())))
        .collect();
    let report =
        evaluate_masks(&scenario.gt, &preds, &DecisionRule::default(), None).map_err(data)?;
    let s = &report.summary;
    let records: Vec<_> = report
        .per_sample
        .iter()
        .map(|r| defect_eval::SampleRecord::new(r.id.clone(), r.confusion()))
        .collect();

    println!("Pixel dilution: a 1000-px defect segmented exactly, a 50-px defect missed");
    println!();
    println!("{:<10} {:>8} {:>8} {:>8} {:>10}", "sample", "gt_px", "pred_px", "tp", "iou");
    for r in &report.per_sample {
        println!(
            "{:<10} {:>8} {:>8} {:>8} {:>10}",
            r.id,
            r.tp + r.fn_,
            r.tp + r.fp,
            r.tp,
            fmt_opt(r.iou)
        );
    }
    println!();
    println!("{:<22} {:>16}", "metric", "value");
    let row = |name: &str, v: Option<f64>| match v {
        Some(v) => println!("{name:<22} {v:>16.12}"),
        None => println!("{name:<22} {:>16}", "n/a"),
    };
    row("pooled_mIoU", s.pooled_miou);
    row("Sample_mIoU", s.sample_miou);
    row("Seg_Accuracy", Some(s.seg_accuracy));
    row("Seg_Recall", s.seg_recall);
    println!("{:<22} {:>16}", "M_eff", s.m_eff);
    let naive = naive_sample_miou(&records, EmptyPolicy::ScoreOne).map_err(data)?;
    row("naive_mIoU(score_one)", Some(naive));
    if let (Some(p), Some(m)) = (s.pooled_miou, s.sample_miou) {
        println!();
        println!("pooled - sample gap: {:.6}", p - m);
    }
    Ok(())
}

fn print_grad_report(r: &GradCheckReport) {
    println!("{:<12} {:>8} {:>9} {:>14}", "check", "count", "failures", "max_rel_err");
    for (name, s) in [
        ("seg_bce", &r.seg),
        ("cls_bce", &r.cls),
        ("joint", &r.joint),
        ("linearity", &r.linearity),
        ("routing", &r.routing),
        ("clamped", &r.clamped),
    ] {
        println!(
            "{name:<12} {:>8} {:>9} {:>14.3e}",
            s.checks, s.failures, s.max_rel_error
        );
    }
}

fn run_grad_check(args: GradCheckArgs) -> Result<(), Failure> {
    if !(args.step > 0.0) || !(args.tolerance > 0.0) || !(args.cls_tolerance > 0.0) {
        return Err(usage(anyhow!("step and tolerances must be positive")));
    }
    let cfg = GradCheckConfig {
        trials: args.trials,
        eps: args.eps,
        step: args.step,
        seg_tolerance: args.tolerance,
        cls_tolerance: args.cls_tolerance,
        seed: args.seed,
    };
    let report = gradcheck::run(&cfg).map_err(usage)?;
    print_grad_report(&report);
    if report.passed() {
        println!("all gradient checks passed ({} trials)", report.trials);
        Ok(())
    } else {
        Err(Failure::Check("gradient mismatch; see table above".into()))
    }
}
