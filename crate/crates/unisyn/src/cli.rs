//! Command-line entry point: dataset generation, training, matrix
//! evaluation, single-condition synthesis, ablation sweeps and SVG reports.

use crate::checkpoint::{checkpoint_digest, load_checkpoint};
use crate::conditioning::AvailabilityCondition;
use crate::data::{
    generate_phantom_dataset, assemble_batch, save_volume, Dataset, MultiModalVolume,
    PhantomSpec, Split,
};
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::metrics::{evaluate_matrix, two_sample_ttest, SsimConstants};
use crate::training::{load_eval_subjects, train, ExperimentConfig};
use clap::{Args, Parser, Subcommand};
use ndarray::Axis;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Environment variable naming the directory that relative run paths are
/// resolved against.
pub const RUN_ROOT_ENV: &str = "UNISYN_RUN_ROOT";

#[derive(Debug, Clone)]
pub struct CommandResult {
    /// 0 success, 1 runtime failure, 2 usage error.
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(
    name = "unisyn",
    version,
    about = "Unified multi-modal image synthesis toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-modal phantom dataset.
    PhantomGen(PhantomGenArgs),
    /// Train a model (optionally resuming from a checkpoint).
    Train(TrainArgs),
    /// Score a checkpoint on every availability configuration.
    Evaluate(EvaluateArgs),
    /// Impute the missing modalities of one subject under one condition.
    Synthesize(SynthesizeArgs),
    /// Sweep encoder/fusion variants and aggregate a comparison CSV.
    Ablate(AblateArgs),
    /// Render PSNR/SSIM bar charts from a report CSV as static SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct PhantomGenArgs {
    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    /// Number of modalities (2-4).
    #[arg(long, default_value_t = 4)]
    modalities: usize,
    /// In-plane height and width of each volume.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 12)]
    depth: usize,
    #[arg(long, default_value_t = 0.03)]
    noise_std: f64,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to resume from (its embedded config is authoritative).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

/// Flags that take precedence over config-file values.
#[derive(Args, Debug, Clone)]
struct ConfigOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.dataset_dir {
            cfg.dataset_dir = v.clone();
        }
        if let Some(v) = &self.run_dir {
            cfg.run_dir = v.clone();
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; overrides the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report CSV path.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    subject: String,
    /// Availability condition, e.g. 1011 (modality 2 missing).
    #[arg(long)]
    ac: String,
    /// Directory receiving the imputed volume.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds per variant (base seed, base+1, ...).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Comparison CSV path.
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Report CSV produced by `evaluate`.
    #[arg(long)]
    report: PathBuf,
    /// Directory receiving psnr.svg and ssim.svg.
    #[arg(long)]
    out: PathBuf,
}

pub fn dispatch<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            if code == 0 {
                print!("{e}");
            } else {
                eprint!("{e}");
            }
            return CommandResult {
                exit_code: code,
                artifacts: Vec::new(),
            };
        }
    };
    match run(cli.command) {
        Ok(artifacts) => CommandResult {
            exit_code: 0,
            artifacts,
        },
        Err(e) => {
            eprintln!("error: {e}");
            CommandResult {
                exit_code: 1,
                artifacts: Vec::new(),
            }
        }
    }
}

fn run(command: Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn resolve_run_dir(cfg: &mut ExperimentConfig) {
    if cfg.run_dir.is_relative() {
        if let Some(root) = std::env::var_os(RUN_ROOT_ENV) {
            cfg.run_dir = PathBuf::from(root).join(&cfg.run_dir);
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    resolve_run_dir(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn phantom_gen(a: PhantomGenArgs) -> Result<Vec<PathBuf>> {
    let base = PhantomSpec::default();
    if a.modalities < 2 || a.modalities > base.contrast.len() {
        return Err(Error::Config(format!(
            "modality count {} outside 2-{}",
            a.modalities,
            base.contrast.len()
        )));
    }
    let spec = PhantomSpec {
        modality_names: base.modality_names[..a.modalities].to_vec(),
        depth: a.depth,
        height: a.size,
        width: a.size,
        contrast: base.contrast[..a.modalities].to_vec(),
        noise_std: a.noise_std,
        ..base
    };
    let n = a.train + a.val + a.test;
    let volumes = generate_phantom_dataset(a.seed, &spec, n)?;
    let mut splits = Vec::with_capacity(n);
    splits.extend(std::iter::repeat(Split::Train).take(a.train));
    splits.extend(std::iter::repeat(Split::Val).take(a.val));
    splits.extend(std::iter::repeat(Split::Test).take(a.test));
    Dataset::write(&a.out, &volumes, &splits)?;
    println!(
        "wrote {n} phantom subjects ({} train / {} val / {} test) to {}",
        a.train,
        a.val,
        a.test,
        a.out.display()
    );
    Ok(vec![a.out])
}

fn train_cmd(a: TrainArgs) -> Result<Vec<PathBuf>> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let out = train::<f32>(cfg, a.resume.as_deref())?;
    if let Some(rec) = &out.last_record {
        println!(
            "final losses: syn {:.4} rec {:.4} adv {:.4} gen {:.4} dis {:.4}",
            rec.l_syn, rec.l_rec, rec.l_adv, rec.l_gen_total, rec.l_dis
        );
    }
    println!("checkpoint: {}", out.final_checkpoint.display());
    Ok(vec![out.run_dir, out.final_checkpoint, out.log_path])
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<Vec<PathBuf>> {
    let split: Split = a.split.parse()?;
    let state = load_checkpoint::<f32>(&a.checkpoint)?;
    let mut cfg = state.cfg.clone();
    if let Some(data) = &a.data {
        cfg.dataset_dir = data.clone();
    }
    let subjects = load_eval_subjects(&cfg, split)?;
    let constants = SsimConstants::from_range(cfg.decoder.out_clamp.unwrap_or(1.0))?;
    let report = evaluate_matrix(
        &state.generator,
        &subjects,
        &cfg.modality_names,
        &constants,
        &checkpoint_digest(&a.checkpoint)?,
        &cfg.dataset_dir.display().to_string(),
    )?;
    std::fs::write(&a.out, report.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    print!("{}", report.to_table());
    Ok(vec![a.out])
}

fn synthesize_cmd(a: SynthesizeArgs) -> Result<Vec<PathBuf>> {
    // degenerate conditions are rejected before any model load
    let ac = AvailabilityCondition::parse(&a.ac)?;
    ac.check_training()?;

    let state = load_checkpoint::<f32>(&a.checkpoint)?;
    let mut cfg = state.cfg.clone();
    if let Some(data) = &a.data {
        cfg.dataset_dir = data.clone();
    }
    if ac.len() != cfg.modalities() {
        return Err(Error::InvalidCondition(format!(
            "condition {} has {} digits, model expects {}",
            a.ac,
            ac.len(),
            cfg.modalities()
        )));
    }
    let ds = Dataset::open(&cfg.dataset_dir)?;
    let vol = crate::data::mean_normalize(&ds.load(&a.subject)?, cfg.normalization)?;
    let slices = crate::data::extract_center_slices(
        &vol,
        cfg.n_slices,
        (cfg.image_size, cfg.image_size),
    )?;
    let batch = assemble_batch::<f32>(&slices, &ac)?;
    let (out, _) = state.generator.forward(&batch.pixels.view(), &ac)?;

    // available modalities pass through; missing ones come from the model
    let (b, m, h, w) = out.images.dim();
    let mut voxels = ndarray::Array4::<f32>::zeros((m, b, h, w));
    for z in 0..b {
        for i in 0..m {
            let plane = if ac.is_available(i) {
                batch.targets.index_axis(Axis(0), z).index_axis(Axis(0), i).to_owned()
            } else {
                out.images.index_axis(Axis(0), z).index_axis(Axis(0), i).to_owned()
            };
            voxels.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), z).assign(&plane);
        }
    }
    let imputed = MultiModalVolume {
        voxels,
        modality_names: cfg.modality_names.clone(),
        subject_id: format!("{}_{}", a.subject, a.ac),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join(format!("{}_{}.mmv", a.subject, a.ac));
    save_volume(&imputed, &path)?;
    println!("wrote {}", path.display());
    Ok(vec![path])
}

/// Encoder/fusion variants swept by `ablate`.
fn ablation_variants() -> Vec<(&'static str, EncoderVariant, FusionStrategy)> {
    vec![
        ("cds-dfum", EncoderVariant::Cds, FusionStrategy::Dfum),
        ("cds-max", EncoderVariant::Cds, FusionStrategy::Max),
        ("cds-hemis", EncoderVariant::Cds, FusionStrategy::Hemis),
        ("mms-dfum", EncoderVariant::Mms, FusionStrategy::Dfum),
        ("c-dfum", EncoderVariant::C, FusionStrategy::Dfum),
    ]
}

fn ablate_cmd(a: AblateArgs) -> Result<Vec<PathBuf>> {
    let base = load_config(a.config.as_deref(), &a.overrides)?;
    if a.seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut csv = String::from("variant,encoder,fusion,seed,psnr_mean,ssim_mean\n");
    // per variant: per-seed mean PSNRs, for cross-variant t-tests
    let mut seed_means: Vec<(&'static str, Vec<f64>)> = Vec::new();
    for (name, encoder, fusion) in ablation_variants() {
        let mut psnrs = Vec::new();
        for s in 0..a.seeds {
            let mut cfg = base.clone();
            cfg.encoder.variant = encoder;
            cfg.fusion.strategy = fusion;
            cfg.seed = base.seed + s;
            cfg.run_dir = base.run_dir.join(format!("{name}-seed{}", cfg.seed));
            let out = train::<f32>(cfg.clone(), None)?;
            let state = load_checkpoint::<f32>(&out.final_checkpoint)?;
            let subjects = load_eval_subjects(&cfg, Split::Test)?;
            let constants =
                SsimConstants::from_range(cfg.decoder.out_clamp.unwrap_or(1.0))?;
            let report = evaluate_matrix(
                &state.generator,
                &subjects,
                &cfg.modality_names,
                &constants,
                &checkpoint_digest(&out.final_checkpoint)?,
                &cfg.dataset_dir.display().to_string(),
            )?;
            let (p, ss) = report_means(&report);
            writeln!(
                csv,
                "{name},{encoder:?},{fusion:?},{},{p:.6},{ss:.6}",
                cfg.seed
            )
            .unwrap();
            psnrs.push(p);
        }
        seed_means.push((name, psnrs));
    }
    std::fs::write(&a.out, &csv).map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {}", a.out.display());
    if a.seeds >= 2 {
        let lookup = |n: &str| {
            seed_means
                .iter()
                .find(|(name, _)| *name == n)
                .map(|(_, v)| v.clone())
        };
        for (label, x, y) in [
            ("dfum-vs-max", lookup("cds-dfum"), lookup("cds-max")),
            ("cds-vs-c", lookup("cds-dfum"), lookup("c-dfum")),
        ] {
            if let (Some(x), Some(y)) = (x, y) {
                let p = two_sample_ttest(&x, &y)?;
                println!("{label}: p = {p:.4}");
            }
        }
    }
    Ok(vec![a.out])
}

/// Mean PSNR/SSIM across every populated cell of a report.
fn report_means(report: &crate::metrics::MetricsReport) -> (f64, f64) {
    let cells: Vec<&crate::metrics::MetricCell> = report
        .rows
        .iter()
        .flat_map(|r| r.cells.iter().flatten())
        .collect();
    let n = cells.len().max(1) as f64;
    (
        cells.iter().map(|c| c.psnr_mean).sum::<f64>() / n,
        cells.iter().map(|c| c.ssim_mean).sum::<f64>() / n,
    )
}

struct ReportBar {
    label: String,
    value: f64,
    std: f64,
}

fn parse_report_csv(path: &Path) -> Result<(Vec<ReportBar>, Vec<ReportBar>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with("ac,modality,psnr_mean") {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "not a metrics report CSV".into(),
        });
    }
    let mut psnr = Vec::new();
    let mut ssim = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 7 {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("row {} has {} fields, expected 7", ln + 2, fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("row {}: bad number '{}'", ln + 2, fields[i]),
            })
        };
        let label = format!("{} {}", fields[0], fields[1]);
        psnr.push(ReportBar {
            label: label.clone(),
            value: num(2)?,
            std: num(3)?,
        });
        ssim.push(ReportBar {
            label,
            value: num(4)?,
            std: num(5)?,
        });
    }
    Ok((psnr, ssim))
}

/// Static grouped bar chart; deterministic output for identical input.
fn render_bar_svg(title: &str, bars: &[ReportBar]) -> String {
    let bar_w = 28.0;
    let gap = 14.0;
    let chart_h = 220.0;
    let margin_l = 50.0;
    let margin_top = 30.0;
    let label_h = 90.0;
    let width = margin_l + bars.len() as f64 * (bar_w + gap) + gap;
    let height = margin_top + chart_h + label_h;
    let max = bars
        .iter()
        .map(|b| b.value + b.std)
        .fold(1e-12_f64, f64::max);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="monospace" font-size="11">"#
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{margin_l}" y="18" font-size="14">{title}</text>"#
    )
    .unwrap();
    // axis with min/max ticks
    writeln!(
        svg,
        r#"<line x1="{margin_l}" y1="{margin_top}" x2="{margin_l}" y2="{:.1}" stroke="black"/>"#,
        margin_top + chart_h
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="4" y="{:.1}">{max:.2}</text><text x="4" y="{:.1}">0</text>"#,
        margin_top + 10.0,
        margin_top + chart_h
    )
    .unwrap();
    for (i, bar) in bars.iter().enumerate() {
        let x = margin_l + gap + i as f64 * (bar_w + gap);
        let h = (bar.value.max(0.0) / max) * chart_h;
        let y = margin_top + chart_h - h;
        writeln!(
            svg,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{bar_w}" height="{h:.1}" fill="#4878a8"/>"##
        )
        .unwrap();
        if bar.std > 0.0 {
            let cx = x + bar_w / 2.0;
            let e = (bar.std / max) * chart_h;
            writeln!(
                svg,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                (y - e).max(margin_top),
                (y + e).min(margin_top + chart_h)
            )
            .unwrap();
        }
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" transform="rotate(60 {:.1} {:.1})">{}</text>"#,
            x,
            margin_top + chart_h + 14.0,
            x,
            margin_top + chart_h + 14.0,
            bar.label
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn plot_cmd(a: PlotArgs) -> Result<Vec<PathBuf>> {
    let (psnr, ssim) = parse_report_csv(&a.report)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let psnr_path = a.out.join("psnr.svg");
    let ssim_path = a.out.join("ssim.svg");
    std::fs::write(&psnr_path, render_bar_svg("PSNR (dB)", &psnr))
        .map_err(|e| Error::io(&psnr_path, e))?;
    std::fs::write(&ssim_path, render_bar_svg("SSIM", &ssim))
        .map_err(|e| Error::io(&ssim_path, e))?;
    println!("wrote {} and {}", psnr_path.display(), ssim_path.display());
    Ok(vec![psnr_path, ssim_path])
}
