//! End-to-end runs on shortened load cases and the files they leave behind.

use std::fs;

use sprc_core::harness::{self, ControllerKind, LoadCase, Timeline};
use sprc_core::BLADES;

fn short(id: &str, controller: ControllerKind) -> LoadCase {
    let mut case = harness::find_case(&harness::presets(), id).unwrap().with_controller(controller);
    case.timeline = Timeline { identification: 100.0, constrained_from: 250.0, end: 300.0 };
    case
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("sprc-runs-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

#[test]
fn run_directory_has_all_three_files() {
    let rec = harness::run_case(&short("LC3", ControllerKind::Sprc)).unwrap();
    let root = scratch("files");
    let dir = harness::write_run(&rec, &root).unwrap();
    assert!(dir.ends_with("LC3-seed1/sprc"));

    let series = fs::read_to_string(dir.join("series.csv")).unwrap();
    let mut lines = series.lines();
    assert_eq!(lines.next().unwrap(), harness::series_header());
    assert_eq!(lines.count(), rec.series.len());

    let rotations = fs::read_to_string(dir.join("rotations.csv")).unwrap();
    assert_eq!(rotations.lines().count(), rec.rotations.len() + 1);
    assert!(rotations.lines().skip(1).any(|l| l.contains(",optimal,")));

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["case_id"], "LC3");
    assert_eq!(metrics["controller"], "sprc");
    assert_eq!(metrics["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(metrics["metrics"]["one_p_constrained"].as_array().unwrap().len(), BLADES);
    fs::remove_dir_all(&root).unwrap();
}

#[test]
fn config_hash_tracks_the_case() {
    let a = short("LC3", ControllerKind::Sprc);
    let mut b = a.clone();
    assert_eq!(a.config_hash(), b.config_hash());
    b.seed = 2;
    assert_ne!(a.config_hash(), b.config_hash());
}

#[test]
fn comparison_table_pairs_controllers() {
    let records: Vec<_> = ControllerKind::ALL.iter().map(|&k| harness::run_case(&short("LC4", k)).unwrap()).collect();
    let refs: Vec<_> = records.iter().collect();
    let table = harness::compare(&refs);
    assert_eq!(table.rows.len(), 1);
    let row = &table.rows[0];
    assert!(row.adc_ratio.is_some() && row.psd_3p_ratio.is_some());
    assert!(row.one_p_reduction_sprc.unwrap() > row.one_p_reduction_mbc.unwrap() - 1.0);

    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("LC4,1,"));
}

#[test]
fn sprc_stays_inside_tight_rate_limit() {
    let rec = harness::run_case(&short("LC4", ControllerKind::Sprc)).unwrap();
    assert!(rec.metrics.audit.is_clean(), "{:?}", rec.metrics.audit);
    assert_eq!(rec.metrics.qp.held_infeasible + rec.metrics.qp.held_max_iterations, 0);
}

#[test]
fn mbc_clips_at_the_angle_limit() {
    let rec = harness::run_case(&short("LC3", ControllerKind::Mbc)).unwrap();
    // The rate clip lets MBC approach the box gradually once limits switch on.
    let start = 42 * rec.samples_per_period;
    for pitch in &rec.series.pitch {
        assert!(pitch[start..].iter().all(|&v| v <= rec.case.u_max + 1e-12));
    }
}
