use std::fs;

use equigrid::data::{generate_synthetic_city, SyntheticCity, SyntheticCityConfig};
use equigrid::loss::Variant;
use equigrid::model::load_checkpoint;
use equigrid::report::{
    export_metrics_table, parse_matrix_csv, parse_residual_csv, read_record_summary, write_run_record,
    TableRow, ADJACENCY_FILE, ATTENTION_FILE, CHECKPOINT_FILE, RESIDUALS_FILE,
};
use equigrid::trainer::{summarize, train, AblationCell, RunRecord, TrainConfig};
use equigrid::{Forecaster64, ForecastWindow};

fn city() -> SyntheticCity<f64> {
    generate_synthetic_city(&SyntheticCityConfig {
        n_regions: 16,
        n_steps: 240,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn run(city: &SyntheticCity<f64>, variant: Variant) -> RunRecord<f64> {
    let cfg = TrainConfig {
        epochs: 3,
        hidden_channels: 4,
        seed: 1,
        variant,
        ..Default::default()
    };
    train(
        &city.graph,
        &city.demand,
        Some(&city.demographics),
        ForecastWindow::new(6, 2).unwrap(),
        &cfg,
        &variant.loss_config(),
    )
    .unwrap()
}

#[test]
fn record_directory_round_trip() {
    let city = city();
    let record = run(&city, Variant::RaaDsGei);
    let dir = tempfile::tempdir().unwrap();
    write_run_record(&record, dir.path()).unwrap();

    let (ids, r) = parse_residual_csv(fs::File::open(dir.path().join(RESIDUALS_FILE)).unwrap()).unwrap();
    assert_eq!(ids, city.graph.region_ids());
    for (a, b) in r.iter().zip(record.test_residual.values()) {
        assert!((a - b).abs() <= 1e-12);
    }

    let (_, h) = parse_matrix_csv(fs::File::open(dir.path().join(ATTENTION_FILE)).unwrap()).unwrap();
    assert_eq!(&h, record.h_last().unwrap());
    let (_, adj) = parse_matrix_csv(fs::File::open(dir.path().join(ADJACENCY_FILE)).unwrap()).unwrap();
    assert_eq!(adj, city.graph.adjacency() * &h);

    let summary = read_record_summary(dir.path()).unwrap();
    assert_eq!(summary.variant, Variant::RaaDsGei);
    assert_eq!(summary.metrics, record.metrics);

    let model: Forecaster64 = load_checkpoint(fs::File::open(dir.path().join(CHECKPOINT_FILE)).unwrap()).unwrap();
    assert_eq!(model.params(), record.model.params());
    assert_eq!(model.raa().unwrap().a_adapted, *record.a_adapted().unwrap());
}

#[test]
fn original_record_has_empty_attention_files() {
    let city = city();
    let dir = tempfile::tempdir().unwrap();
    write_run_record(&run(&city, Variant::Original), dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join(ATTENTION_FILE)).unwrap().len(), 0);
    assert_eq!(fs::read(dir.path().join(ADJACENCY_FILE)).unwrap().len(), 0);
}

#[test]
fn failed_cells_are_recorded_not_fatal() {
    let city = city();
    let ok = run(&city, Variant::Original);
    let cells = vec![
        AblationCell { variant: Variant::Original, seed: 1, outcome: Ok(ok.clone()) },
        AblationCell { variant: Variant::Original, seed: 2, outcome: Err("diverged".into()) },
        AblationCell { variant: Variant::Raa, seed: 1, outcome: Err("diverged".into()) },
    ];
    let original = summarize(Variant::Original, &cells);
    assert_eq!((original.completed, original.failed), (1, 1));
    assert_eq!(original.mae, Some(ok.metrics.mae));
    let raa = summarize(Variant::Raa, &cells);
    assert_eq!((raa.completed, raa.failed), (0, 1));
    assert_eq!(raa.mae, None);

    let rows = [TableRow::from_ablation(&original), TableRow::from_ablation(&raa)];
    let (csv, _) = export_metrics_table(&rows).unwrap();
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("raa,failed,failed,failed,failed,failed,"), "{last}");
    assert!(last.ends_with(",failed"));
}

#[test]
fn metrics_table_deltas_match_records() {
    let city = city();
    let base = run(&city, Variant::Original);
    let other = run(&city, Variant::RaaDs);
    let rows = [
        TableRow::from_metrics("original", &base.metrics),
        TableRow::from_metrics("raa_ds", &other.metrics),
    ];
    let (_, summary) = export_metrics_table(&rows).unwrap();
    let want = (other.metrics.mae - base.metrics.mae) / base.metrics.mae.abs() * 100.0;
    let got = summary.rows[1].delta_pct["mae"].unwrap();
    assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0));
}
