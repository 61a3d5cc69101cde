//! `astra`: command-line driver for synthetic cohorts, the three training
//! stages, evaluation, localization and routing maps.
//!
//! Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use astra_core::archive::{cohort_slides, read_cohort, CohortWriter};
use astra_core::eval::{localize, stratified_summary, LocalizationResult};
use astra_core::float::Real;
use astra_core::model::Network;
use astra_core::render::{archetype_legend, exemplar_table, expert_map_image, legend_table, localization_figure};
use astra_core::routing::{adjusted_rand_index, expert_map, top_tiles_per_expert};
use astra_core::synth::cohort_iter;
use astra_core::text::text_encoder_from_name;
use astra_core::train::align::{align, retrieval_top1, slide_bags, slide_embeddings};
use astra_core::train::checkpoint::Checkpoint;
use astra_core::train::classify::{raw_mean_embedding, train_classifier, Task};
use astra_core::train::config::{AstraConfig, Precision};
use astra_core::train::pretrain::{pretrain, reconstruction_cosine};
use astra_core::{AstraError, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const IMAGE_SCALE: usize = 4;
const RECON_EVAL_CROPS: usize = 64;

#[derive(Parser, Debug)]
#[command(name = "astra", version, about = "Multi-model slide representation pipeline on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed for every random stream of the command.
    #[arg(long)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Cohort directory written by `synth-data`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint file from an earlier stage.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort archive.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Masked multi-target pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Contrastive alignment of the slide head to structured prompts.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Linear-probe classification over the configured downstream seeds.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Aligned checkpoint; required unless `--features raw`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `category` or `cancer-type`.
        #[arg(long, default_value = "category")]
        task: String,
        /// `astra`, `raw` or `both`.
        #[arg(long, default_value = "both")]
        features: String,
    },
    /// Reconstruction cosine per target space and, after alignment, retrieval top-1.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Prompt-guided tumor localization with Dice scoring.
    Localize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Final-block expert maps and per-expert exemplar tiles.
    RoutingMap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common }
            | Command::Pretrain { common, .. }
            | Command::Align { common, .. }
            | Command::TrainClassifier { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Localize { common, .. }
            | Command::RoutingMap { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let text = fs::read_to_string(&common.config)
        .map_err(|e| AstraError::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let cfg = AstraConfig::from_toml_str(&text)?;
    fs::create_dir_all(&common.out)?;
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(cmd, &cfg),
        Precision::F64 => dispatch::<f64>(cmd, &cfg),
    }
}

fn dispatch<T: Real>(cmd: &Command, cfg: &AstraConfig) -> Result<()> {
    let common = cmd.common();
    let (seed, out) = (common.seed, common.out.as_path());
    match cmd {
        Command::SynthData { .. } => synth_data(cfg, seed, out),
        Command::Pretrain { data, .. } => run_pretrain::<T>(cfg, seed, out, &data.data),
        Command::Align { data, checkpoint, .. } => run_align::<T>(cfg, seed, out, &data.data, &checkpoint.checkpoint),
        Command::TrainClassifier { data, checkpoint, task, features, .. } => {
            run_classifier::<T>(cfg, out, &data.data, checkpoint.as_deref(), task, features)
        }
        Command::Evaluate { data, checkpoint, .. } => run_evaluate::<T>(cfg, seed, out, &data.data, &checkpoint.checkpoint),
        Command::Localize { data, checkpoint, .. } => run_localize::<T>(cfg, out, &data.data, &checkpoint.checkpoint),
        Command::RoutingMap { data, checkpoint, .. } => run_routing::<T>(cfg, out, &data.data, &checkpoint.checkpoint),
    }
}

/// Creates (truncating) a newline-delimited record file; callers append one
/// flushed record at a time.
fn record_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn load_model<T: Real>(cfg: &AstraConfig, path: &Path) -> Result<(Checkpoint<T>, Network)> {
    if !path.is_file() {
        return Err(AstraError::Missing(format!("checkpoint {}", path.display())));
    }
    let ckpt = Checkpoint::<T>::load(path)?;
    let net = Network::bind(&ckpt.params, &cfg.encoder, &cfg.decoder, &cfg.registry(), cfg.align.dropout)?;
    Ok((ckpt, net))
}

fn check_cohort(path: &Path) -> Result<()> {
    if path.join("cohort.toml").is_file() {
        Ok(())
    } else {
        Err(AstraError::Missing(format!("cohort index under {}", path.display())))
    }
}

fn synth_data(cfg: &AstraConfig, seed: u64, out: &Path) -> Result<()> {
    let plan = cfg.data.plan()?;
    let mut w = CohortWriter::create(out, &cfg.registry())?;
    for grid in cohort_iter(&cfg.data.synth, &plan, seed) {
        w.push(&grid?)?;
    }
    let ids = w.finish()?;
    println!("wrote {} slides to {}", ids.len(), out.display());
    Ok(())
}

fn run_pretrain<T: Real>(cfg: &AstraConfig, seed: u64, out: &Path, data: &Path) -> Result<()> {
    check_cohort(data)?;
    let slides = read_cohort(data)?;
    let mut trace = record_file(&out.join("pretrain_trace.jsonl"))?;
    let run = pretrain::<T>(&slides, cfg, seed, Some(&mut trace))?;
    trace.flush()?;
    run.checkpoint.save(&out.join("pretrain.ckpt"))?;
    let cos = reconstruction_cosine(&run.store, &run.net, &slides, RECON_EVAL_CROPS, seed)?;
    let mut kv = String::new();
    for (k, c) in cos.iter().enumerate() {
        kv.push_str(&format!("recon_cosine.model{k}={c:.6}\n"));
    }
    fs::write(out.join("pretrain_summary.kv"), &kv)?;
    println!("pretrained {} steps; {}", run.trace.len(), kv.trim().replace('\n', "; "));
    Ok(())
}

fn run_align<T: Real>(cfg: &AstraConfig, seed: u64, out: &Path, data: &Path, ckpt: &Path) -> Result<()> {
    check_cohort(data)?;
    let (ckpt, net) = load_model::<T>(cfg, ckpt)?;
    let slides = read_cohort(data)?;
    let mut trace = record_file(&out.join("align_trace.jsonl"))?;
    let run = align(&slides, ckpt.params, net, cfg, seed, Some(&mut trace))?;
    trace.flush()?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    run.checkpoint.save(&out.join("align.ckpt"))?;
    let bags = slide_bags(&run.store, &run.net, &slides, cfg.input_model())?;
    let text = text_encoder_from_name(&cfg.align.text_encoder, cfg.align.text_seed)?;
    let top1 = retrieval_top1(&run.store, &run.net, &bags, text.as_ref())?;
    fs::write(out.join("align_summary.kv"), format!("steps={}\nretrieval_top1={top1:.6}\n", run.losses.len()))?;
    println!("aligned {} steps; retrieval top-1 {top1:.4}", run.losses.len());
    Ok(())
}

fn run_classifier<T: Real>(
    cfg: &AstraConfig,
    out: &Path,
    data: &Path,
    ckpt: Option<&Path>,
    task: &str,
    features: &str,
) -> Result<()> {
    check_cohort(data)?;
    let task = Task::parse(task)?;
    let (want_astra, want_raw) = match features {
        "astra" => (true, false),
        "raw" => (false, true),
        "both" => (true, true),
        other => return Err(AstraError::invalid(format!("unknown feature set {other:?} (expected astra, raw or both)"))),
    };
    let model = match (want_astra, ckpt) {
        (true, Some(p)) => {
            let (c, net) = load_model::<T>(cfg, p)?;
            net.slide_head()?;
            Some((c.params, net))
        }
        (true, None) => return Err(AstraError::Missing("--checkpoint (aligned) for ASTRA features".into())),
        (false, _) => None,
    };
    let input_model = cfg.input_model();
    let (mut astra_x, mut raw_x, mut classes) = (Vec::new(), Vec::new(), Vec::new());
    for grid in cohort_slides(data)? {
        let grid = grid?;
        let Some(class) = grid.record.as_ref().and_then(|r| task.class_of(r)) else { continue };
        if let Some((store, net)) = &model {
            let bags = slide_bags(store, net, std::slice::from_ref(&grid), input_model)?;
            astra_x.extend(slide_embeddings(store, net, &bags)?);
        }
        if want_raw {
            raw_x.push(raw_mean_embedding(&grid, input_model)?);
        }
        classes.push(class);
    }
    if classes.is_empty() {
        return Err(AstraError::invalid(format!("no slides in the cohort belong to task {}", task.as_str())));
    }
    let (labels, names) = task.encode(&classes);
    let mut runs = Vec::new();
    if want_astra {
        runs.push(("astra", astra_x));
    }
    if want_raw {
        runs.push(("raw", raw_x));
    }
    for (name, x) in runs {
        let (report, _) = train_classifier(&x, &labels, &names, &cfg.downstream, task.as_str(), name)?;
        append(&out.join("classification.txt"), &report.to_text())?;
        append(&out.join("classification.kv"), &report.to_kv())?;
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run_evaluate<T: Real>(cfg: &AstraConfig, seed: u64, out: &Path, data: &Path, ckpt: &Path) -> Result<()> {
    check_cohort(data)?;
    let (ckpt, net) = load_model::<T>(cfg, ckpt)?;
    let slides = read_cohort(data)?;
    let cos = reconstruction_cosine(&ckpt.params, &net, &slides, RECON_EVAL_CROPS, seed)?;
    let mut kv = format!("stage={}\n", ckpt.stage.as_str());
    for (k, c) in cos.iter().enumerate() {
        kv.push_str(&format!("recon_cosine.model{k}={c:.6}\n"));
    }
    if net.abmil.is_some() {
        let bags = slide_bags(&ckpt.params, &net, &slides, cfg.input_model())?;
        let text = text_encoder_from_name(&cfg.align.text_encoder, cfg.align.text_seed)?;
        kv.push_str(&format!("retrieval_top1={:.6}\n", retrieval_top1(&ckpt.params, &net, &bags, text.as_ref())?));
    }
    fs::write(out.join("evaluation.kv"), &kv)?;
    print!("{kv}");
    Ok(())
}

/// Stratum of a slide for Dice summaries: cancer type when present, else category.
fn stratum(grid: &astra_core::grid::SlideGrid) -> String {
    grid.record
        .as_ref()
        .map(|r| r.cancer_type.clone().unwrap_or_else(|| r.classification_category.as_str().to_string()))
        .unwrap_or_else(|| "unlabeled".into())
}

fn run_localize<T: Real>(cfg: &AstraConfig, out: &Path, data: &Path, ckpt: &Path) -> Result<()> {
    check_cohort(data)?;
    let (ckpt, net) = load_model::<T>(cfg, ckpt)?;
    net.slide_head()?;
    let text = text_encoder_from_name(&cfg.align.text_encoder, cfg.align.text_seed)?;
    let l = &cfg.localize;
    let heatmaps = out.join("heatmaps");
    if l.heatmaps {
        fs::create_dir_all(&heatmaps)?;
        fs::write(heatmaps.join("archetypes.tsv"), archetype_legend())?;
    }
    let mut table = record_file(&out.join("localization_slides.tsv"))?;
    writeln!(table, "slide_id\tstratum\treference_coverage\tdice\texcluded")?;
    let (mut results, mut strata): (Vec<LocalizationResult>, Vec<String>) = (Vec::new(), Vec::new());
    for grid in cohort_slides(data)? {
        let grid = grid?;
        let record = grid.record.as_ref().ok_or_else(|| AstraError::Missing(format!("record of slide {}", grid.slide_id)))?;
        let prompt = text.encode(&record.prompt);
        let mut r = localize(&grid, &net, &ckpt.params, cfg.input_model(), &prompt, l.tau_loc, l.exclusion_floor)?;
        let s = stratum(&grid);
        let dice = r.dice.map_or("-".to_string(), |d| format!("{d:.6}"));
        writeln!(table, "{}\t{s}\t{:.6}\t{dice}\t{}", r.slide_id, r.reference_coverage, r.excluded.as_deref().unwrap_or("-"))?;
        table.flush()?;
        if l.heatmaps {
            localization_figure(&grid, &r, IMAGE_SCALE)?.save_ppm(&heatmaps.join(format!("{}.ppm", grid.slide_id)))?;
        }
        r.similarity = Vec::new();
        r.cells = Vec::new();
        results.push(r);
        strata.push(s);
    }
    let report = stratified_summary(&results, &strata, l.exclusion_floor)?;
    fs::write(out.join("localization.txt"), report.to_text())?;
    fs::write(out.join("localization.kv"), report.to_kv())?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_routing<T: Real>(cfg: &AstraConfig, out: &Path, data: &Path, ckpt: &Path) -> Result<()> {
    check_cohort(data)?;
    let (ckpt, net) = load_model::<T>(cfg, ckpt)?;
    let dir = out.join("expert_maps");
    fs::create_dir_all(&dir)?;
    let mut maps = Vec::new();
    let mut kv = String::new();
    let mut aris = Vec::new();
    for grid in cohort_slides(data)? {
        let grid = grid?;
        let map = expert_map(&grid, &net, &ckpt.params, cfg.input_model())?;
        expert_map_image(&map, IMAGE_SCALE)?.save_ppm(&dir.join(format!("{}.ppm", grid.slide_id)))?;
        if grid.planted_labels.is_some() {
            let planted: Vec<usize> = map.cells.iter().map(|&c| grid.label(c).map_or(usize::MAX, |a| a as usize)).collect();
            let ari = adjusted_rand_index(&map.smoothed, &planted)?;
            kv.push_str(&format!("ari.{}={ari:.6}\n", grid.slide_id));
            aris.push(ari);
        }
        maps.push(map);
    }
    if !aris.is_empty() {
        kv.push_str(&format!("ari.mean={:.6}\n", aris.iter().sum::<f64>() / aris.len() as f64));
    }
    let r = &cfg.routing;
    let exemplars = top_tiles_per_expert(&maps, r.exemplars_per_expert, r.margin_floor);
    let e = maps.iter().map(|m| m.num_experts).max().unwrap_or(0);
    fs::write(dir.join("legend.tsv"), legend_table(e))?;
    fs::write(out.join("exemplars.tsv"), exemplar_table(&exemplars))?;
    fs::write(out.join("routing.kv"), &kv)?;
    println!("wrote {} expert maps", maps.len());
    Ok(())
}
