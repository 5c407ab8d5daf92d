use std::path::Path;

use unixkd::config::LrSchedule;
use unixkd::dataset::{load_dataset, write_synthetic, Dataset, SyntheticSpec};
use unixkd::presets::desk_config;
use unixkd::train::{obtain_teacher, run_distillation};
use unixkd::{Method, TrainConfig};

fn toy(root: &Path) -> Dataset {
    let path = root.join("toy");
    write_synthetic(&path, &SyntheticSpec::new(4, 48, 11)).unwrap();
    load_dataset(&path).unwrap()
}

fn config(root: &Path, method: Method, seed: u64) -> TrainConfig {
    let mut cfg = desk_config(root.join("toy"), method, seed);
    cfg.teacher_spec = unixkd::presets::desk_teacher(1, 8, 8, 4, 0);
    cfg.student_spec = unixkd::presets::desk_student(1, 8, 8, 4, seed);
    cfg.n = 32;
    cfg.k = 24;
    cfg.epochs = 2;
    cfg.lr_schedule = LrSchedule::constant(0.05);
    cfg.teacher_training.epochs = 2;
    cfg.teacher_training.lr_schedule = LrSchedule::constant(0.05);
    cfg.teacher_cache = Some(root.join("cache"));
    cfg
}

#[test]
fn full_width_unmixed_selection_matches_kd() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let kd_cfg = config(dir.path(), Method::Kd, 3);
    let teacher = obtain_teacher(&kd_cfg, &data).unwrap();
    let kd = run_distillation(&kd_cfg, &data, Some(&teacher)).unwrap();

    let mut u_cfg = config(dir.path(), Method::UncertaintyOnly, 3);
    u_cfg.k = u_cfg.n;
    u_cfg.w = 1000.0;
    let unix = run_distillation(&u_cfg, &data, Some(&teacher)).unwrap();

    for (a, b) in kd.report.epochs.iter().zip(&unix.report.epochs) {
        assert!((a.train_loss - b.train_loss).abs() < 1e-10, "{} vs {}", a.train_loss, b.train_loss);
    }
    for (a, b) in kd.student.params().iter().zip(unix.student.params()) {
        assert!((a - b).abs() < 1e-10);
    }
    assert_eq!(kd.report.final_top1, unix.report.final_top1);
}

#[test]
fn seed_changes_data_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let a = run_distillation(&config(dir.path(), Method::Scratch, 1), &data, None).unwrap();
    let b = run_distillation(&config(dir.path(), Method::Scratch, 2), &data, None).unwrap();
    let again = run_distillation(&config(dir.path(), Method::Scratch, 1), &data, None).unwrap();
    assert_ne!(a.trace.records[0].batch, b.trace.records[0].batch);
    assert_eq!(a.trace, again.trace);
    assert_eq!(a.report, again.report);
}

#[test]
fn kd_costs_exactly_one_hundred_percent() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let cfg = config(dir.path(), Method::Kd, 0);
    let teacher = obtain_teacher(&cfg, &data).unwrap();
    let r = run_distillation(&cfg, &data, Some(&teacher)).unwrap().report;
    assert_eq!(r.energy_flops, r.kd_baseline_energy_flops);
    assert_eq!(r.relative_cost_reported, "100.00");
    assert_eq!(r.epochs.last().unwrap().cumulative_relative_cost, r.relative_cost);
}

#[test]
fn teacher_cache_reuses_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let cfg = config(dir.path(), Method::Kd, 0);
    let first = obtain_teacher(&cfg, &data).unwrap();
    let second = obtain_teacher(&cfg, &data).unwrap();
    assert!(!first.cache_hit);
    assert!(second.cache_hit);
    assert_eq!(first.model.params(), second.model.params());
}
