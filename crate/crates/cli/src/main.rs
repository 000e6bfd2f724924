//! `cellprompt`: synthesize data, train, evaluate, run inference, ablate and
//! summarize runs.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical
//! failure. Errors are reported as one `error: ...` line on stderr.

mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cellprompt::data::{load_png, read_records, save_png, synth_generate, Manifest, SynthSpec};
use cellprompt::metrics::EvalReport;
use cellprompt::train::{
    ablate, evaluate_checkpoint, load_checkpoint, rows_to_csv, rows_to_markdown, train, AblationAxis, LogRecord,
    RunConfig,
};
use cellprompt::{AnnotatedSample, CategoryRegistry, Error, ErrorKind, Result};
use clap::{Args, Parser, Subcommand};
use image::Rgb;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "cellprompt", version, about = "Multi-dataset nucleus detection and classification")]
#[command(after_help = config_keys_help())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.num_queries=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the seed of the run (or of the synthetic spec).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is available in this build.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-dataset corpus and its manifest.
    Synth {
        /// Synthetic dataset spec (TOML).
        spec: PathBuf,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Train on the manifests listed under `data.train`.
    #[command(after_help = config_keys_help())]
    Train {
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Predict nuclei on one image with the heads of one dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Dataset whose label set and heads are used.
        #[arg(long)]
        dataset: String,
        /// Confidence threshold; defaults to the checkpoint's.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write `overlay.png` with class-coloured dots.
        #[arg(long)]
        overlay: bool,
        #[arg(long, default_value = "infer")]
        out: PathBuf,
    },
    /// Train every variant along one ablation axis and tabulate the scores.
    #[command(after_help = config_keys_help())]
    Ablate {
        /// dpm, memory_bank, dataset_prompt, enhance_mode or L_sweep
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Summarize a training run directory: loss table, curve and final scores.
    Report {
        /// Directory holding `metrics.jsonl`.
        run: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Draw annotation or prediction points over an image.
    Plot {
        #[arg(long)]
        image: PathBuf,
        /// Annotation file or `predictions.json` from `infer`.
        #[arg(long)]
        points: PathBuf,
        /// Registry used to name annotation labels (colours follow class names).
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value = "plot.png")]
        out: PathBuf,
    },
}

fn config_keys_help() -> String {
    let mut s = String::from("Config keys (defaults; set in --config or with --set):\n");
    for k in RunConfig::describe_keys() {
        s.push_str("  ");
        s.push_str(&k);
        s.push('\n');
    }
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {line}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if !g.device.eq_ignore_ascii_case("cpu") {
        return Err(Error::Config(format!("device {:?} is not available; this build runs on cpu only", g.device)));
    }
    let wd = &g.workdir;
    match &cli.command {
        Command::Synth { spec, out } => cmd_synth(g, &wd.join(spec), &wd.join(out)),
        Command::Train { out } => cmd_train(g, &wd.join(out)),
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => cmd_eval(&wd.join(checkpoint), &wd.join(manifest), &wd.join(out)),
        Command::Infer {
            checkpoint,
            image,
            dataset,
            threshold,
            overlay,
            out,
        } => cmd_infer(&wd.join(checkpoint), &wd.join(image), dataset, *threshold, *overlay, &wd.join(out)),
        Command::Ablate { axis, out } => cmd_ablate(g, axis, &wd.join(out)),
        Command::Report { run, out } => cmd_report(&wd.join(run), &wd.join(out)),
        Command::Plot {
            image,
            points,
            registry,
            out,
        } => cmd_plot(&wd.join(image), &wd.join(points), registry.as_ref().map(|r| wd.join(r)), &wd.join(out)),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    match &g.config {
        Some(p) => RunConfig::load(&g.workdir.join(p), &overrides),
        None => RunConfig::from_toml("", &overrides),
    }
}

/// Samples of all manifests, which must share one registry.
fn load_manifests(paths: &[String], wd: &Path, key: &str) -> Result<(CategoryRegistry, Vec<AnnotatedSample>)> {
    if paths.is_empty() {
        return Err(Error::Config(format!("{key} lists no manifest")));
    }
    let mut registry: Option<CategoryRegistry> = None;
    let mut samples = Vec::new();
    for p in paths {
        let path = wd.join(p);
        let (m, base) = Manifest::load(&path)?;
        match &registry {
            Some(r) if *r != m.registry => {
                return Err(Error::Data(format!(
                    "{}: registry differs from the first manifest's",
                    path.display()
                )))
            }
            Some(_) => {}
            None => registry = Some(m.registry.clone()),
        }
        samples.extend(m.samples(&base)?);
    }
    Ok((registry.expect("at least one manifest"), samples))
}

fn training_data(
    cfg: &RunConfig,
    wd: &Path,
) -> Result<(CategoryRegistry, Vec<AnnotatedSample>, Vec<AnnotatedSample>)> {
    let (registry, train_samples) = load_manifests(&cfg.data.train, wd, "data.train")?;
    let eval_samples = if cfg.data.eval.is_empty() {
        train_samples.clone()
    } else {
        let (r, s) = load_manifests(&cfg.data.eval, wd, "data.eval")?;
        if r != registry {
            return Err(Error::Data("data.eval registry differs from data.train".into()));
        }
        s
    };
    Ok((registry, train_samples, eval_samples))
}

fn reports_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}

fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        let csv = r.to_csv();
        // keep the header once
        let body = if i == 0 { csv.as_str() } else { csv.split_once('\n').map_or("", |x| x.1) };
        out.push_str(body);
    }
    out
}

fn cmd_synth(g: &Global, spec_path: &Path, out: &Path) -> Result<()> {
    let text = read(spec_path)?;
    let mut spec: SynthSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", spec_path.display(), e.message())))?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let manifest = synth_generate(&spec, out)?;
    println!("{} images written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn cmd_train(g: &Global, out: &Path) -> Result<()> {
    let cfg = run_config(g)?;
    let (registry, train_samples, eval_samples) = training_data(&cfg, &g.workdir)?;
    create_dir(out)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let outcome = train(&cfg, &registry, train_samples, &eval_samples, Some(out))?;
    write(&out.join("report.json"), &reports_json(&outcome.reports))?;
    for r in &outcome.reports {
        println!("{}: F_d {:.4}  mean F_c {:.4}", r.dataset, r.f_d, r.mean_f_c);
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let (m, base) = Manifest::load(manifest)?;
    let samples = m.samples(&base)?;
    let reports = evaluate_checkpoint(checkpoint, &m.registry, &samples)?;
    create_dir(out)?;
    write(&out.join("report.json"), &reports_json(&reports))?;
    write(&out.join("report.csv"), &reports_csv(&reports))?;
    for r in &reports {
        println!("{}: F_d {:.4}  mean F_c {:.4}", r.dataset, r.f_d, r.mean_f_c);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionFile {
    dataset: String,
    image: String,
    threshold: f64,
    predictions: Vec<NamedPrediction>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedPrediction {
    u: f64,
    v: f64,
    class: usize,
    class_name: String,
    confidence: f64,
}

fn cmd_infer(
    checkpoint: &Path,
    image_path: &Path,
    dataset: &str,
    threshold: Option<f64>,
    with_overlay: bool,
    out: &Path,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let registry = ck.model.registry();
    let d = registry.dataset_id(dataset)?;
    let desc = registry.dataset(d)?;
    let threshold = threshold.unwrap_or(ck.config.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} not in [0, 1]")));
    }
    let image = load_png(image_path)?;
    let preds = cellprompt::data::sliding_window_infer(&ck.model, &image, d, &ck.config.slice, desc.radius_px, threshold)?;
    let file = PredictionFile {
        dataset: desc.name.clone(),
        image: image_path.display().to_string(),
        threshold,
        predictions: preds
            .iter()
            .map(|p| NamedPrediction {
                u: p.u,
                v: p.v,
                class: p.class,
                class_name: desc.category_names[p.class].clone(),
                confidence: p.confidence,
            })
            .collect(),
    };
    create_dir(out)?;
    write(
        &out.join("predictions.json"),
        &(serde_json::to_string_pretty(&file).expect("predictions serialize") + "\n"),
    )?;
    if with_overlay {
        let pts: Vec<_> = file
            .predictions
            .iter()
            .map(|p| (p.u, p.v, render::class_color(&p.class_name)))
            .collect();
        save_png(&out.join("overlay.png"), &render::overlay(&image, &pts, 2.5))?;
    }
    println!("{} nuclei predicted", file.predictions.len());
    Ok(())
}

fn cmd_ablate(g: &Global, axis: &str, out: &Path) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let cfg = run_config(g)?;
    let (registry, train_samples, eval_samples) = training_data(&cfg, &g.workdir)?;
    let rows = ablate(&cfg, axis, &registry, &train_samples, &eval_samples)?;
    create_dir(out)?;
    write(&out.join("ablation.csv"), &rows_to_csv(&rows))?;
    let md = rows_to_markdown(&rows);
    write(&out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_report(run: &Path, out: &Path) -> Result<()> {
    let log = read_log(&run.join("metrics.jsonl"))?;
    let mut csv = String::from("iteration,total,hungarian_cls,hungarian_l1,cdn_pos_l1,cdn_pos_cls,cdn_neg_cls,grad_norm\n");
    let mut total = Vec::new();
    let mut cls = Vec::new();
    let mut l1 = Vec::new();
    let mut reports = Vec::new();
    for rec in &log {
        match rec {
            LogRecord::Step {
                iteration,
                loss,
                grad_norm,
            } => {
                csv.push_str(&format!(
                    "{iteration},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{grad_norm:.6}\n",
                    loss.total, loss.hungarian_cls, loss.hungarian_l1, loss.cdn_pos_l1, loss.cdn_pos_cls, loss.cdn_neg_cls
                ));
                let x = *iteration as f64;
                total.push((x, loss.total));
                cls.push((x, loss.hungarian_cls));
                l1.push((x, loss.hungarian_l1));
            }
            LogRecord::Eval { report, .. } => reports.push(report.clone()),
        }
    }
    let mut md = String::from("# Run summary\n\n");
    if let (Some(first), Some(last)) = (total.first(), total.last()) {
        md.push_str(&format!(
            "Loss {:.4} at iteration {} to {:.4} at iteration {} ({} logged steps).\n\n",
            first.1,
            first.0,
            last.1,
            last.0,
            total.len()
        ));
    }
    if !reports.is_empty() {
        md.push_str("| dataset | F_d | mean F_c | TP | FP | FN |\n|---|---|---|---|---|---|\n");
        for r in &reports {
            md.push_str(&format!(
                "| {} | {:.4} | {:.4} | {} | {} | {} |\n",
                r.dataset, r.f_d, r.mean_f_c, r.detection.tp, r.detection.fp, r.detection.fn_
            ));
        }
        md.push_str("\nPer-class F_c:\n\n| dataset | class | F_c |\n|---|---|---|\n");
        for r in &reports {
            for c in &r.classes {
                md.push_str(&format!("| {} | {} | {:.4} |\n", r.dataset, c.name, c.f_c));
            }
        }
    }
    create_dir(out)?;
    write(&out.join("loss.csv"), &csv)?;
    write(&out.join("summary.md"), &md)?;
    let plot = render::curve_plot(
        &[
            (&total, Rgb([0, 0, 0])),
            (&cls, Rgb([230, 25, 75])),
            (&l1, Rgb([0, 130, 200])),
        ],
        640,
        360,
    );
    save_png(&out.join("loss_curve.png"), &plot)?;
    print!("{md}");
    Ok(())
}

fn cmd_plot(image_path: &Path, points: &Path, registry: Option<PathBuf>, out: &Path) -> Result<()> {
    let image = load_png(image_path)?;
    let text = read(points)?;
    let pts: Vec<(f64, f64, Rgb<u8>)> = if let Ok(file) = serde_json::from_str::<PredictionFile>(&text) {
        file.predictions
            .iter()
            .map(|p| (p.u, p.v, render::class_color(&p.class_name)))
            .collect()
    } else {
        let registry = registry.map(|p| CategoryRegistry::load(&p)).transpose()?;
        let mut pts = Vec::new();
        for r in read_records(points)? {
            for (p, &label) in r.points.iter().zip(&r.labels) {
                let key = match &registry {
                    Some(reg) => {
                        let d = reg.dataset_id(&r.dataset)?;
                        let desc = reg.dataset(d)?;
                        desc.category_names
                            .get(label)
                            .cloned()
                            .ok_or_else(|| Error::Data(format!("{}: label {label} out of range", points.display())))?
                    }
                    None => label.to_string(),
                };
                pts.push((p[0], p[1], render::class_color(&key)));
            }
        }
        pts
    };
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    save_png(out, &render::overlay(&image, &pts, 2.5))?;
    println!("{} points drawn to {}", pts.len(), out.display());
    Ok(())
}
