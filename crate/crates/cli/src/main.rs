use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use wsod_core::data::{mined_records, Split};
use wsod_core::eval::{CorLocReport, MapReport};
use wsod_core::mining::{mine_source, mine_target};
use wsod_core::synth::hidden_truth;
use wsod_core::{
    evaluate_corloc, evaluate_map, generate_world, load_dataset, load_detections, run, run_ablation,
    AblationAxis, Annotation, ApMethod, Dataset, Error, LoopConfig, MetricsReport, MiningConfig, RunReport,
    WorldConfig,
};

#[derive(Parser)]
#[command(name = "wsod", version, about = "Weakly supervised detection with progressive transfer on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three dataset splits of a synthetic world.
    GenWorld { config: PathBuf, outdir: PathBuf },
    /// Run the full loop and write the run report.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One run per value along an ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        config: PathBuf,
        /// Write the full reports as a JSON array.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score detections against a dataset's hidden ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = TableFormat::Json)]
        format: TableFormat,
        #[arg(long, default_value = "eleven_point")]
        ap_method: String,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Mine pseudo boxes from detections on a source or target training set.
    Mine {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        ds: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long, default_value_t = 0.1)]
        o: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a run report as a table.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Md)]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Md,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        _ => 2,
    }
}

fn invalid(msg: String) -> anyhow::Error {
    Error::InvalidConfig(msg).into()
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenWorld { config, outdir } => {
            let cfg = WorldConfig::load(&config)?;
            let world = generate_world(&cfg)?;
            fs::create_dir_all(&outdir).with_context(|| format!("creating {}", outdir.display()))?;
            world.write_datasets(&outdir)?;
            println!(
                "wrote {} source, {} target-train, {} target-test images to {}",
                world.source_train.images.len(),
                world.target_train.images.len(),
                world.target_test.images.len(),
                outdir.display()
            );
        }
        Command::Run { config, out } => {
            let cfg = LoopConfig::load(&config)?;
            let report = run(&cfg)?;
            fs::write(&out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", report.to_markdown());
        }
        Command::Ablate { axis, values, config, out } => {
            let axis: AblationAxis = axis.parse().map_err(invalid)?;
            let cfg = LoopConfig::load(&config)?;
            let refs: Vec<&str> = values.iter().map(String::as_str).collect();
            let reports = run_ablation(&cfg, axis, &refs)?;
            println!("value,final_map,final_corloc");
            for (v, r) in values.iter().zip(&reports) {
                let last = r.iterations.last().expect("iteration 0 always present");
                println!("{v},{:.6},{:.6}", last.map, last.corloc);
            }
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&reports)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Eval { dets, gt, format, ap_method, iou } => {
            let method: ApMethod = ap_method.parse().map_err(invalid)?;
            if !(0.0..=1.0).contains(&iou) {
                return Err(invalid(format!("iou {iou} outside [0, 1]")));
            }
            let dets = load_detections(&dets)?;
            let ds = load_dataset(&gt)?;
            let report = metrics(&dets, &ds, iou, method);
            let text = match format {
                TableFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
                TableFormat::Csv => report.to_csv(),
            };
            print!("{text}");
        }
        Command::Mine { dets, ds, tau, o, out } => {
            let cfg = MiningConfig { tau, o };
            cfg.validate()?;
            let dets = load_detections(&dets)?;
            let ds = load_dataset(&ds)?;
            let views = ds.views();
            let lookup = |img: &wsod_core::TrainImage<'_>| Ok(dets.get(img.id).cloned().unwrap_or_default());
            let mined = match ds.split {
                Split::SourceTrain => mine_source(&views, lookup, &cfg)?,
                Split::TargetTrain => mine_target(&views, lookup, &cfg)?,
                Split::TargetTest => {
                    return Err(invalid("mining needs a source_train or target_train dataset".into()))
                }
            };
            let text = serde_json::to_string_pretty(&mined_records(&mined))? + "\n";
            write_output(out.as_deref(), &text)?;
        }
        Command::Report { report, format } => {
            let text = fs::read_to_string(&report).map_err(|e| Error::Io {
                path: report.clone(),
                source: e,
            })?;
            let parsed: RunReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: report.clone(),
                source: e,
            })?;
            match format {
                ReportFormat::Csv => print!("{}", parsed.to_csv()),
                ReportFormat::Md => print!("{}", parsed.to_markdown()),
            }
        }
    }
    Ok(())
}

/// mAP and CorLoc against hidden ground truth, falling back to the visible
/// annotations when a dataset carries no hidden boxes.
fn metrics(
    dets: &BTreeMap<String, Vec<wsod_core::Detection>>,
    ds: &Dataset,
    iou: f64,
    method: ApMethod,
) -> MetricsReport {
    let has_hidden = ds.images.iter().any(|i| !i.hidden_gt.is_empty());
    let truth: BTreeMap<String, Vec<Annotation>> = if has_hidden {
        hidden_truth(ds)
    } else {
        ds.images.iter().map(|i| (i.id.clone(), i.annotations.clone())).collect()
    };
    let categories: Vec<u32> = (0..ds.categories.len() as u32).collect();
    let map: MapReport = evaluate_map(dets, &truth, &categories, iou, method);
    let corloc: CorLocReport = evaluate_corloc(dets, &truth, &categories);
    MetricsReport {
        map,
        corloc,
        category_names: Some(ds.categories.clone()),
    }
}
