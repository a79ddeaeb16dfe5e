//! One-off convergence harness used to pick epoch counts for the test suite.
//!
//! Usage: `calib <follower|speaker> <sup_epochs> <fid_epochs> <lr> [hidden]`
//! Trains supervised for `sup_epochs`, prints diagnostics, then continues
//! the same model with student-forced (fidelity) epochs.
use std::time::Instant;

use navgen::dataset::{build_dataset, DataConfig, Flavor, Split};
use navgen::learn::{train_from, ModelKind, Supervision, TrainConfig, TrainedModel};
use navgen::metrics::{
    precision_curve, rollout_and_evaluate, CurveMode, DEFAULT_SUCCESS_RADIUS,
};
use navgen::models::ModelConfig;
use navgen::policies::{DiscSelector, GenSelector};

fn full_eval(label: &str, model: &TrainedModel, dataset: &navgen::dataset::Dataset) {
    let val: Vec<_> = dataset
        .select(Flavor::R2r, Split::ValSeen)
        .into_iter()
        .cloned()
        .collect();
    let t = Instant::now();
    let report = match model {
        TrainedModel::Follower(f) => {
            rollout_and_evaluate(
                || DiscSelector { follower: f },
                dataset,
                &val,
                20,
                DEFAULT_SUCCESS_RADIUS,
            )
            .unwrap()
            .1
        }
        TrainedModel::Speaker(s) => {
            rollout_and_evaluate(
                || GenSelector { speaker: s },
                dataset,
                &val,
                20,
                DEFAULT_SUCCESS_RADIUS,
            )
            .unwrap()
            .1
        }
    };
    println!(
        "[{label}] full val_seen ({} episodes, {:?}): SR {:.3} SPL {:.3} nDTW {:.3}",
        val.len(),
        t.elapsed(),
        report.mean.sr,
        report.mean.spl,
        report.mean.ndtw
    );

    // Teacher-forced per-step precision on val_seen: separates "misranks
    // even on gold prefixes" (generalization gap) from "derails once it
    // strays" (exposure bias).
    let diag: Vec<_> = val.iter().take(60).cloned().collect();
    let curve = match model {
        TrainedModel::Follower(f) => precision_curve(
            || DiscSelector { follower: f },
            dataset,
            &diag,
            CurveMode::OnReference,
            20,
        )
        .unwrap(),
        TrainedModel::Speaker(s) => precision_curve(
            || GenSelector { speaker: s },
            dataset,
            &diag,
            CurveMode::OnReference,
            20,
        )
        .unwrap(),
    };
    let total: usize = curve.iter().map(|p| p.count).sum();
    let hits: f64 = curve.iter().map(|p| p.value * p.count as f64).sum();
    println!(
        "[{label}] on-reference precision (60 val episodes): {:.3} over {} states",
        hits / total as f64,
        total
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(|s| s.as_str()) {
        Some("speaker") => ModelKind::Speaker,
        _ => ModelKind::Follower,
    };
    let sup_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let fid_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let hidden: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(64);

    let data_cfg = DataConfig::default();
    let dataset = build_dataset(&data_cfg, 0).unwrap();
    println!(
        "vocab {}, r2r train {}, val_seen {}",
        navgen::instructions::build_vocab().len(),
        dataset.select(Flavor::R2r, Split::Train).len(),
        dataset.select(Flavor::R2r, Split::ValSeen).len()
    );

    let base = TrainConfig {
        model: kind,
        lr,
        batch_size: 16,
        val_cap: 60,
        model_cfg: ModelConfig {
            hidden,
            token_embed: (hidden / 2).max(8),
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };

    let sup_cfg = TrainConfig { epochs: sup_epochs, ..base.clone() };
    let t = Instant::now();
    let outcome = train_from(&sup_cfg, &dataset, None).unwrap();
    println!("supervised {sup_epochs} epochs in {:?}", t.elapsed());
    for rec in &outcome.log {
        println!(
            "  sup epoch {} loss {:.4} val_sr {:?}",
            rec.epoch, rec.mean_loss, rec.val_sr
        );
    }
    full_eval("after-supervised", &outcome.model, &dataset);

    if fid_epochs == 0 {
        return;
    }
    let fid_cfg = TrainConfig {
        epochs: fid_epochs,
        supervision: Supervision::Fidelity,
        ..base.clone()
    };
    let t = Instant::now();
    let outcome2 = train_from(&fid_cfg, &dataset, Some(outcome.model)).unwrap();
    println!("fidelity {fid_epochs} epochs in {:?}", t.elapsed());
    for rec in &outcome2.log {
        println!(
            "  fid epoch {} loss {:.4} val_sr {:?}",
            rec.epoch, rec.mean_loss, rec.val_sr
        );
    }
    full_eval("after-fidelity", &outcome2.model, &dataset);
}
