//! Regenerates the recorded reference runs under `tests/data`.
//!
//! `cargo run --release --example record_oracles [training|fusion]`

use std::fs;
use std::path::Path;

use untrack::backbone::TrackerConfig;
use untrack::harness::study::run_fusion_study;
use untrack::harness::train::probe_loss;
use untrack::harness::{finetune_model, train, FusionStudy, TrainConfig};
use untrack::synth::{default_mix, generate_all};

fn data_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data"))
}

/// 200 fine-tuning steps of the default tracker on the default mix, seed 0.
fn training() {
    let cfg = TrackerConfig::default();
    let data = generate_all(&default_mix(18, 18, 0)).unwrap();
    let tc = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let mut model = finetune_model::<f64>(&cfg, None, 0).unwrap();
    let before = probe_loss(&mut model, &data, &tc, 2).unwrap();
    let report = train(&mut model, &data, &tc).unwrap();
    let after = probe_loss(&mut model, &data, &tc, 2).unwrap();
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l:e}\n"));
    }
    fs::write(data_dir().join("training_curve.csv"), csv).unwrap();
    fs::write(
        data_dir().join("training_probe.txt"),
        format!("step0 {before:e}\nstep200 {after:e}\n"),
    )
    .unwrap();
    println!("probe loss {before:.4} -> {after:.4}");
}

fn fusion() {
    let out = run_fusion_study(&FusionStudy::default()).unwrap();
    let json = serde_json::to_string_pretty(&out).unwrap();
    fs::write(data_dir().join("fusion_oracle.json"), json).unwrap();
    for s in &out.seeds {
        println!(
            "seed {}: fused {:.4} dummy {:.4} margin {:.4}",
            s.seed, s.fused_iou, s.dummy_iou, s.margin
        );
    }
    println!(
        "mean margin {:.4} in {:.0}s",
        out.mean_margin(),
        out.wall_seconds
    );
}

fn main() {
    let which = std::env::args().nth(1);
    fs::create_dir_all(data_dir()).unwrap();
    if which.as_deref() != Some("fusion") {
        training();
    }
    if which.as_deref() != Some("training") {
        fusion();
    }
}
