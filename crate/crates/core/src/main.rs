use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use untrack::autodiff::utt1::write_atomic;
use untrack::autodiff::{grad_check_params_piecewise, Tape, Tensor};
use untrack::backbone::{AuxInput, UnTrack};
use untrack::config::{parse_config, RunConfig};
use untrack::harness::ablation::comparison_csv;
use untrack::harness::metrics::{confidence_thresholds, success_thresholds};
use untrack::harness::{
    ablation_grid, evaluate_model, finetune_model, load_checkpoint, pretrain_backbone,
    save_checkpoint, train, MetricsReport, RunMeta, TrainConfig,
};
use untrack::lora::{trainable_params, Projection};
use untrack::synth::{default_mix, generate_all, read_dataset, write_dataset};
use untrack::{Error, Modality, Result};

/// Any-modality RGB-X tracking on synthetic data.
///
/// Every subcommand accepts `--config FILE` followed by `--key value`
/// overrides for any configuration key.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a mixed synthetic dataset to `--dataset`.
    GenData(RunArgs),
    /// Pretrain an RGB backbone, fine-tune the fusion modules, save to `--output`.
    Train(RunArgs),
    /// Score `--checkpoint` on `--dataset`; `--dummy-mode` blanks the auxiliary stream.
    Eval(RunArgs),
    /// Train and score one run per value of `--ablation-axis`.
    Ablate(RunArgs),
    /// Finite-difference check of the full model gradients.
    GradCheck(RunArgs),
    /// Turn the artifacts in `--output` into plot-ready CSVs.
    Report(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData(_) => "gen-data",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
            Self::Ablate(_) => "ablate",
            Self::GradCheck(_) => "grad-check",
            Self::Report(_) => "report",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Self::GenData(a)
            | Self::Train(a)
            | Self::Eval(a)
            | Self::Ablate(a)
            | Self::GradCheck(a)
            | Self::Report(a) => a,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides applied after the file.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_COORDS: usize = 3;
/// Token partitions are piecewise constant in the weights, so the check
/// tolerates a step that crosses a selection boundary on one side.
const GRAD_STEP: f64 = 1e-6;

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: Versions,
    unix_seconds: u64,
    wall_seconds: f64,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct Versions {
    untrack: &'static str,
    utt1: u32,
    checkpoint: u32,
    dataset: u32,
}

fn write_run_json(dir: &Path, cfg: &RunConfig, command: &str, start: Instant) -> Result<()> {
    fs::create_dir_all(dir)?;
    let record = RunRecord {
        command,
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        versions: Versions {
            untrack: env!("CARGO_PKG_VERSION"),
            utt1: 1,
            checkpoint: 1,
            dataset: 1,
        },
        unix_seconds: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        wall_seconds: start.elapsed().as_secs_f64(),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&record).expect("run record serializes");
    write_atomic(&dir.join("run.json"), json.as_bytes())?;
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())
}

fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

fn load_data(
    cfg: &RunConfig,
    key: &str,
    path: &Option<PathBuf>,
) -> Result<Vec<untrack::synth::ModalSequence>> {
    let dir = cfg.require(key, path)?;
    if !dir.join("manifest.txt").is_file() {
        return Err(Error::Usage(format!(
            "key '{key}': no dataset at {}",
            dir.display()
        )));
    }
    let data = read_dataset(dir)?;
    if data.is_empty() {
        return Err(Error::Usage(format!("key '{key}': dataset is empty")));
    }
    Ok(data)
}

fn pretrained(
    cfg: &RunConfig,
    data: &[untrack::synth::ModalSequence],
) -> Result<Option<(UnTrack<f64>, Vec<f64>)>> {
    if cfg.pretrain_steps == 0 {
        return Ok(None);
    }
    let pcfg = TrainConfig {
        steps: cfg.pretrain_steps,
        ..cfg.train.clone()
    };
    let (model, report) = pretrain_backbone::<f64>(&cfg.tracker, data, &pcfg)?;
    Ok(Some((model, report.curve)))
}

fn gen_data(cfg: &RunConfig, start: Instant) -> Result<()> {
    let dir = cfg.require("dataset", &cfg.dataset)?;
    let mut scenes = default_mix(cfg.sequences, cfg.corner_sequences, cfg.train.seed);
    for s in &mut scenes {
        s.frames = cfg.frames;
        s.image_size = cfg.tracker.image_size;
    }
    let seqs = generate_all(&scenes)?;
    write_dataset(&seqs, dir)?;
    write_run_json(dir, cfg, "gen-data", start)?;
    println!("wrote {} sequences to {}", seqs.len(), dir.display());
    Ok(())
}

fn run_train(cfg: &RunConfig, start: Instant) -> Result<()> {
    let data = load_data(cfg, "dataset", &cfg.dataset)?;
    let out = cfg.require("output", &cfg.output)?;
    fs::create_dir_all(out)?;
    let pre = pretrained(cfg, &data)?;
    if let Some((_, curve)) = &pre {
        write_atomic(&out.join("pretrain_curve.csv"), curve_csv(curve).as_bytes())?;
    }
    let mut model = finetune_model(&cfg.tracker, pre.as_ref().map(|p| &p.0), cfg.train.seed)?;
    let (trainable, total, ratio) = trainable_params(&model);
    println!("trainable {trainable} of {total} parameters ({ratio:.4})");
    let report = train(&mut model, &data, &cfg.train)?;
    write_atomic(
        &out.join("train_curve.csv"),
        curve_csv(&report.curve).as_bytes(),
    )?;
    save_checkpoint(&model, &out.join("checkpoint"))?;
    write_run_json(out, cfg, "train", start)?;
    if let (Some(first), Some(last)) = (report.curve.first(), report.curve.last()) {
        println!(
            "loss {first:.4} -> {last:.4} over {} steps",
            report.curve.len()
        );
    }
    Ok(())
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    write_atomic(path, report.to_json().as_bytes())
}

fn run_eval(cfg: &RunConfig, start: Instant) -> Result<()> {
    let data = load_data(cfg, "dataset", &cfg.dataset)?;
    let ckpt = cfg.require("checkpoint", &cfg.checkpoint)?;
    let out = cfg.require("output", &cfg.output)?;
    let model = load_checkpoint::<f64>(ckpt)?;
    let meta = RunMeta {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
    };
    let report = evaluate_model(&model, &data, cfg.dummy_mode, &meta)?;
    fs::create_dir_all(out)?;
    write_report(&out.join("metrics.json"), &report)?;
    write_run_json(out, cfg, "eval", start)?;
    let a = &report.aggregate;
    println!(
        "{} sequences: mean IoU {:.4}, PR {:.4}, SR {:.4}, F {:.4} (Pr {:.4}, Re {:.4})",
        a.sequences, a.mean_iou, a.pr, a.sr, a.f_score, a.precision, a.recall
    );
    Ok(())
}

fn run_ablate(cfg: &RunConfig, start: Instant) -> Result<()> {
    let data = load_data(cfg, "dataset", &cfg.dataset)?;
    let eval_data = match &cfg.eval_dataset {
        Some(_) => load_data(cfg, "eval_dataset", &cfg.eval_dataset)?,
        None => data.clone(),
    };
    let out = cfg.require("output", &cfg.output)?;
    let values = if cfg.ablation_values.is_empty() {
        cfg.ablation_axis.reference_values()
    } else {
        cfg.ablation_values.clone()
    };
    let pre = pretrained(cfg, &data)?;
    let runs = ablation_grid(
        &cfg.tracker,
        cfg.ablation_axis,
        &values,
        &cfg.train,
        pre.as_ref().map(|p| &p.0),
        &data,
        &eval_data,
    )?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("ablation.csv"), comparison_csv(&runs).as_bytes())?;
    let json = serde_json::to_string_pretty(&runs).expect("runs serialize");
    write_atomic(&out.join("ablation.json"), json.as_bytes())?;
    write_run_json(out, cfg, "ablate", start)?;
    for r in &runs {
        println!(
            "{} = {}: final loss {:.4}, mean IoU {:.4}, F {:.4}",
            r.axis, r.value, r.final_loss, r.report.aggregate.mean_iou, r.report.aggregate.f_score
        );
    }
    Ok(())
}

/// Worst relative error over sampled coordinates of every trainable tensor,
/// once with all tensors trainable and once in fine-tuning form.
fn run_grad_check(cfg: &RunConfig, start: Instant) -> Result<()> {
    let tc = &cfg.tracker;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (t, s) = (tc.template_size, tc.image_size);
    let template = Tensor::<f64>::uniform(&[3, t, t], 1.0, &mut rng);
    let search = Tensor::<f64>::uniform(&[3, s, s], 1.0, &mut rng);
    let aux = Tensor::<f64>::uniform(&[3, s, s], 1.0, &mut rng);
    let n = tc.search_tokens();
    let ws = Tensor::<f64>::uniform(&[n, 1], 1.0, &mut rng);
    let wb = Tensor::<f64>::uniform(&[n, 4], 1.0, &mut rng);

    let mut worst: f64 = 0.0;
    for (pass, modality) in [("full", Modality::Depth), ("finetune", Modality::Thermal)] {
        let mut model = UnTrack::<f64>::new(tc.clone(), &mut rng)?;
        if pass == "finetune" {
            model.prepare_finetune(&mut rng)?;
            for b in &mut model.blocks {
                for p in b.attn.projections_mut() {
                    if let Projection::Lora(l) = p {
                        l.b = Tensor::uniform(l.b.dims(), 0.5, &mut rng).with_requires_grad(true);
                    }
                }
            }
        }
        let err = grad_check_params_piecewise(
            &mut model,
            |tape: &Tape<f64>, m: &UnTrack<f64>| {
                let out = m.forward(
                    tape,
                    &template,
                    &search,
                    Some(AuxInput {
                        frame: &aux,
                        modality,
                    }),
                )?;
                out.scores
                    .mul(tape.constant(&ws))?
                    .sum()
                    .add(out.boxes.mul(tape.constant(&wb))?.sum())
            },
            GRAD_STEP,
            Some(GRAD_COORDS),
            &mut rng,
        )?;
        println!("{pass}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    println!("max relative error {worst:.3e}");
    if let Some(out) = &cfg.output {
        write_run_json(out, cfg, "grad-check", start)?;
    }
    if worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:e}"
        )))
    }
}

fn run_report(cfg: &RunConfig, start: Instant) -> Result<()> {
    let dir = cfg.require("output", &cfg.output)?;
    let dest = dir.join("report");
    fs::create_dir_all(&dest)?;
    let mut written = Vec::new();

    let metrics = dir.join("metrics.json");
    if metrics.exists() {
        let text = fs::read_to_string(&metrics)?;
        let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("{}: {e}", metrics.display()),
        })?;
        let mut sc = String::from("threshold,all");
        for m in report.per_modality.keys() {
            sc.push_str(&format!(",{m}"));
        }
        sc.push('\n');
        for (i, th) in success_thresholds().iter().enumerate() {
            sc.push_str(&format!("{th},{}", report.aggregate.success_curve[i]));
            for a in report.per_modality.values() {
                sc.push_str(&format!(",{}", a.success_curve[i]));
            }
            sc.push('\n');
        }
        write_atomic(&dest.join("success_curve.csv"), sc.as_bytes())?;

        let taus = confidence_thresholds();
        let n = report.sequences.len().max(1) as f64;
        let mut pr = String::from("threshold,precision,recall\n");
        for (i, tau) in taus.iter().enumerate() {
            let p: f64 = report
                .sequences
                .iter()
                .map(|s| s.precision_curve[i])
                .sum::<f64>()
                / n;
            let r: f64 = report
                .sequences
                .iter()
                .map(|s| s.recall_curve[i])
                .sum::<f64>()
                / n;
            pr.push_str(&format!("{tau},{p},{r}\n"));
        }
        write_atomic(&dest.join("precision_recall.csv"), pr.as_bytes())?;

        let mut seqs = String::from("id,modality,frames,mean_iou,pr,sr,f_score,precision,recall\n");
        for s in &report.sequences {
            seqs.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                s.id,
                s.modality,
                s.frames,
                s.mean_iou,
                s.pr_at_threshold,
                s.success_auc,
                s.f_score,
                s.precision,
                s.recall
            ));
        }
        write_atomic(&dest.join("sequences.csv"), seqs.as_bytes())?;
        written.extend(["success_curve.csv", "precision_recall.csv", "sequences.csv"]);
    }
    for name in ["train_curve.csv", "pretrain_curve.csv", "ablation.csv"] {
        let src = dir.join(name);
        if src.exists() {
            write_atomic(&dest.join(name), &fs::read(&src)?)?;
            written.push(name);
        }
    }
    if written.is_empty() {
        return Err(Error::Usage(format!(
            "key 'output': no metrics.json, curves or ablation.csv in {}",
            dir.display()
        )));
    }
    write_run_json(&dest, cfg, "report", start)?;
    println!("wrote {} to {}", written.join(", "), dest.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("UNTRACK_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Usage(format!(
                "UNTRACK_THREADS must be a positive integer, got '{v}'"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    configure_threads()?;
    let args = cli.command.args();
    let text = match &args.config {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| Error::Usage(format!("key 'config': {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut cfg = parse_config(text.as_deref(), &args.overrides)?;
    cfg.command = Some(cli.command.name().to_string());
    match cli.command {
        Command::GenData(_) => gen_data(&cfg, start),
        Command::Train(_) => run_train(&cfg, start),
        Command::Eval(_) => run_eval(&cfg, start),
        Command::Ablate(_) => run_ablate(&cfg, start),
        Command::GradCheck(_) => run_grad_check(&cfg, start),
        Command::Report(_) => run_report(&cfg, start),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
