//! Export of residual maps, attention maps, metric tables and run records.
//!
//! Vectors and matrices that are meant to be re-read (residuals, attention,
//! adapted adjacency, loss curves) are written with shortest round-trip
//! formatting. Summary tables use 9 significant digits.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::loss::{LossConfig, Variant};
use crate::metrics::MetricsReport;
use crate::model::save_checkpoint;
use crate::raa::AttentionState;
use crate::scalar::Scalar;
use crate::trainer::{AblationCell, AblationRow, EpochLog, RunRecord};

pub const RESIDUAL_SIGN_NOTE: &str =
    "# mean_residual = observed - predicted; positive values are under-prediction";

pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const SCORES_FILE: &str = "attention_scores.csv";
pub const ADJACENCY_FILE: &str = "adjacency_adapted.csv";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const CHECKPOINT_FILE: &str = "model.json";

/// `%.9g`-style formatting.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// `region_id,mean_residual` with the sign convention as a leading comment.
pub fn export_residual_map<T: Scalar>(residual: &[T], region_ids: &[String]) -> Result<String> {
    if residual.len() != region_ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} residuals for {} regions",
            residual.len(),
            region_ids.len()
        )));
    }
    let mut out = format!("{RESIDUAL_SIGN_NOTE}\nregion_id,mean_residual\n");
    for (id, r) in region_ids.iter().zip(residual) {
        writeln!(out, "{id},{}", r.as_f64()).unwrap();
    }
    Ok(out)
}

pub fn parse_residual_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["region_id", "mean_residual"] {
        return Err(Error::Parse {
            line: 1,
            message: "expected header region_id,mean_residual".into(),
        });
    }
    let (mut ids, mut vals) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let v: f64 = rec[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("`{}` is not a number", &rec[1]),
        })?;
        ids.push(rec[0].to_string());
        vals.push(v);
    }
    Ok((ids, vals))
}

/// Adds a `mean_residual` property to every feature of a feature collection.
/// Each region needs exactly one feature keyed by its `region_id`.
pub fn enrich_geometry<T: Scalar>(geometry: &Value, residual: &[T], region_ids: &[String]) -> Result<Value> {
    let features = geometry
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidArgument("geometry is not a feature collection".into()))?;
    let index: HashMap<&str, usize> = region_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut seen = vec![false; region_ids.len()];
    let mut unknown = Vec::new();
    let mut enriched = Vec::with_capacity(features.len());
    for f in features {
        let id = f
            .pointer("/properties/region_id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::InvalidArgument("feature without a string region_id property".into()))?;
        let mut f = f.clone();
        match index.get(id) {
            Some(&i) => {
                seen[i] = true;
                f["properties"]["mean_residual"] = serde_json::json!(residual[i].as_f64());
            }
            None => unknown.push(id.to_string()),
        }
        enriched.push(f);
    }
    let missing: Vec<String> = region_ids
        .iter()
        .zip(&seen)
        .filter(|(_, &s)| !s)
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(Error::GeometryMismatch { missing, unknown });
    }
    let mut out = geometry.clone();
    out["features"] = Value::Array(enriched);
    Ok(out)
}

/// Square matrix with region ids as the header row and first column.
pub fn matrix_csv<T: Scalar>(m: &Array2<T>, region_ids: &[String]) -> Result<String> {
    if m.dim() != (region_ids.len(), region_ids.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} matrix for {} regions",
            m.dim(),
            region_ids.len()
        )));
    }
    let mut out = String::from("region_id");
    for id in region_ids {
        write!(out, ",{id}").unwrap();
    }
    out.push('\n');
    for (id, row) in region_ids.iter().zip(m.rows()) {
        out.push_str(id);
        for v in row {
            write!(out, ",{}", v.as_f64()).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_matrix_csv<R: Read>(input: R) -> Result<(Vec<String>, Array2<f64>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = ids.len();
    let mut values = Vec::with_capacity(n * n);
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n + 1 || rec[0] != ids[rows.min(n.saturating_sub(1))] {
            return Err(Error::Parse {
                line,
                message: "row does not follow the header's region order".into(),
            });
        }
        for cell in rec.iter().skip(1) {
            values.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("`{cell}` is not a number"),
            })?);
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::ShapeMismatch(format!("{rows} rows for {n} columns")));
    }
    Ok((ids, Array2::from_shape_vec((n, n), values).unwrap()))
}

/// Full attention weights `H_last` as a labelled matrix.
pub fn export_attention<T: Scalar>(state: &AttentionState<T>, region_ids: &[String]) -> Result<String> {
    let h = state.h_last.as_ref().ok_or(Error::NoAttention)?;
    matrix_csv(h, region_ids)
}

/// One region's pre-softmax score row and attention weight row.
pub fn export_attention_focus<T: Scalar>(
    state: &AttentionState<T>,
    region_ids: &[String],
    focus: &str,
) -> Result<String> {
    let h = state.h_last.as_ref().ok_or(Error::NoAttention)?;
    let s = state.scores_last.as_ref().ok_or(Error::NoAttention)?;
    focus_extract(s, h, region_ids, focus)
}

pub fn focus_extract<T: Scalar>(
    scores: &Array2<T>,
    weights: &Array2<T>,
    region_ids: &[String],
    focus: &str,
) -> Result<String> {
    let f = region_ids
        .iter()
        .position(|id| id == focus)
        .ok_or_else(|| Error::UnknownRegion(focus.to_string()))?;
    let mut out = String::from("region_id,score,weight\n");
    for (j, id) in region_ids.iter().enumerate() {
        writeln!(out, "{id},{},{}", scores[[f, j]].as_f64(), weights[[f, j]].as_f64()).unwrap();
    }
    Ok(out)
}

/// One line of a comparison table. `None` metrics are degenerate, or absent
/// entirely when `failed` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub mae: Option<f64>,
    pub smape: Option<f64>,
    pub gei: Option<f64>,
    pub sdi: Option<f64>,
    pub morans_i: Option<f64>,
    pub failed: bool,
}

impl TableRow {
    pub fn from_metrics(label: impl Into<String>, m: &MetricsReport<f64>) -> Self {
        Self {
            label: label.into(),
            mae: Some(m.mae),
            smape: Some(m.smape),
            gei: Some(m.gei),
            sdi: m.sdi,
            morans_i: m.morans_i,
            failed: false,
        }
    }

    pub fn from_ablation(row: &AblationRow) -> Self {
        Self {
            label: row.variant.name().to_string(),
            mae: row.mae,
            smape: row.smape,
            gei: row.gei,
            sdi: row.sdi,
            morans_i: row.morans_i,
            failed: row.completed == 0,
        }
    }

    fn values(&self) -> [Option<f64>; 5] {
        [self.mae, self.smape, self.gei, self.sdi, self.morans_i]
    }
}

pub const METRIC_COLUMNS: [&str; 5] = ["mae", "smape", "gei", "sdi", "morans_i"];
pub const BASELINE_LABEL: &str = "original";

/// `(variant − original) / |original|`, in percent.
pub fn percent_delta(value: Option<f64>, baseline: Option<f64>) -> Option<f64> {
    match (value, baseline) {
        (Some(v), Some(b)) if b != 0.0 => Some((v - b) / b.abs() * 100.0),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub status: String,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub delta_pct: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub baseline: String,
    pub rows: Vec<SummaryRow>,
}

fn round9(v: Option<f64>) -> Option<f64> {
    v.map(|x| format_sig9(x).parse().unwrap_or(x))
}

/// Metric table CSV plus a structured summary with percentage deltas
/// against the `original` row.
pub fn export_metrics_table(rows: &[TableRow]) -> Result<(String, TableSummary)> {
    let base = rows
        .iter()
        .find(|r| r.label == BASELINE_LABEL)
        .ok_or(Error::MissingBaseline)?
        .values();
    let mut csv = String::from("variant");
    for c in METRIC_COLUMNS {
        write!(csv, ",{c}").unwrap();
    }
    for c in METRIC_COLUMNS {
        write!(csv, ",{c}_delta_pct").unwrap();
    }
    csv.push_str(",status\n");
    let mut summary = Vec::with_capacity(rows.len());
    for row in rows {
        let status = if row.failed { "failed" } else { "ok" };
        let missing = if row.failed { "failed" } else { "degenerate" };
        let vals = row.values();
        let deltas: Vec<Option<f64>> = vals.iter().zip(&base).map(|(&v, &b)| percent_delta(v, b)).collect();
        csv.push_str(&row.label);
        for v in vals {
            csv.push(',');
            csv.push_str(&v.map_or_else(|| missing.to_string(), format_sig9));
        }
        for d in &deltas {
            csv.push(',');
            if let Some(d) = d {
                csv.push_str(&format_sig9(*d));
            }
        }
        writeln!(csv, ",{status}").unwrap();
        summary.push(SummaryRow {
            label: row.label.clone(),
            status: status.into(),
            metrics: METRIC_COLUMNS.iter().map(|c| c.to_string()).zip(vals.map(round9)).collect(),
            delta_pct: METRIC_COLUMNS
                .iter()
                .map(|c| c.to_string())
                .zip(deltas.into_iter().map(round9))
                .collect(),
        });
    }
    Ok((
        csv,
        TableSummary {
            baseline: BASELINE_LABEL.into(),
            rows: summary,
        },
    ))
}

/// Per-cell status listing for an ablation run.
pub fn ablation_cells_csv<T: Scalar>(cells: &[AblationCell<T>]) -> String {
    let mut out = String::from("variant,seed,status,mae,smape,gei,sdi,morans_i,error\n");
    for c in cells {
        match &c.outcome {
            Ok(r) => {
                let m = r.metrics.to_f64();
                let row = TableRow::from_metrics("", &m);
                write!(out, "{},{},ok", c.variant, c.seed).unwrap();
                for v in row.values() {
                    out.push(',');
                    out.push_str(&v.map_or_else(|| "degenerate".into(), format_sig9));
                }
                out.push_str(",\n");
            }
            Err(e) => {
                let msg = e.replace(['"', '\n'], " ");
                writeln!(out, "{},{},failed,,,,,,\"{msg}\"", c.variant, c.seed).unwrap();
            }
        }
    }
    out
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub variant: Variant,
    pub seed: u64,
    pub loss_config: LossConfig,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: MetricsReport<f64>,
    pub wall_seconds: f64,
}

fn loss_curve_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mse,ds_term,dd_term,total,val_mse\n");
    for e in epochs {
        writeln!(out, "{},{},{},{},{},{}", e.epoch, e.mse, e.ds_term, e.dd_term, e.total, e.val_mse).unwrap();
    }
    out
}

/// Writes a run record directory. The `original` variant gets empty
/// attention and adapted-adjacency files.
pub fn write_run_record<T: Scalar>(record: &RunRecord<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let summary = RecordSummary {
        variant: record.variant,
        seed: record.seed,
        loss_config: record.loss_config,
        best_epoch: record.best_epoch,
        epochs_run: record.epochs.len(),
        metrics: record.metrics.to_f64(),
        wall_seconds: record.wall_seconds,
    };
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(dir.join(LOSS_CURVE_FILE), loss_curve_csv(&record.epochs))?;
    let ids = &record.region_ids;
    let (att, scores, adj) = match &record.attention {
        Some(state) if state.h_last.is_some() => (
            export_attention(state, ids)?,
            matrix_csv(state.scores_last.as_ref().ok_or(Error::NoAttention)?, ids)?,
            matrix_csv(&state.a_adapted, ids)?,
        ),
        _ => (String::new(), String::new(), String::new()),
    };
    fs::write(dir.join(ATTENTION_FILE), att)?;
    fs::write(dir.join(SCORES_FILE), scores)?;
    fs::write(dir.join(ADJACENCY_FILE), adj)?;
    fs::write(
        dir.join(RESIDUALS_FILE),
        export_residual_map(record.test_residual.values().as_slice().unwrap(), ids)?,
    )?;
    save_checkpoint(&record.model, fs::File::create(dir.join(CHECKPOINT_FILE))?)?;
    Ok(())
}

/// Reads `metrics.json`; the error names the record directory.
pub fn read_record_summary(dir: &Path) -> Result<RecordSummary> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("R{i}")).collect()
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-10.0), "-10");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(format_sig9(0.0001), "0.0001");
        assert_eq!(format_sig9(f64::NAN), "nan");
    }

    #[test]
    fn residual_rows() {
        let csv = export_residual_map(&[0.5, -0.5], &ids(2)).unwrap();
        assert!(csv.starts_with('#'));
        assert!(csv.ends_with("region_id,mean_residual\nR0,0.5\nR1,-0.5\n"));
        let (back_ids, vals) = parse_residual_csv(csv.as_bytes()).unwrap();
        assert_eq!(back_ids, ids(2));
        assert_eq!(vals, vec![0.5, -0.5]);
    }

    #[test]
    fn residual_round_trip_is_exact() {
        let r: Vec<f64> = (0..50).map(|i| ((i as f64) * 1.7).sin() * 1e3 / 7.0).collect();
        let (_, back) = parse_residual_csv(export_residual_map(&r, &ids(50)).unwrap().as_bytes()).unwrap();
        assert_eq!(back, r);
    }

    fn collection(ids: &[&str]) -> Value {
        let feats: Vec<Value> = ids
            .iter()
            .map(|id| serde_json::json!({"type": "Feature", "geometry": null, "properties": {"region_id": id}}))
            .collect();
        serde_json::json!({"type": "FeatureCollection", "features": feats})
    }

    #[test]
    fn geometry_enrichment() {
        let out = enrich_geometry(&collection(&["R1", "R0"]), &[1.0, 2.0], &ids(2)).unwrap();
        assert_eq!(out["features"][0]["properties"]["mean_residual"], 2.0);
        assert_eq!(out["features"][1]["properties"]["mean_residual"], 1.0);
    }

    #[test]
    fn geometry_missing_region_is_named() {
        let err = enrich_geometry(&collection(&["R0"]), &[1.0, 2.0], &ids(2)).unwrap_err();
        assert!(err.to_string().contains("R1"), "{err}");
        let err = enrich_geometry(&collection(&["R0", "R1", "X9"]), &[1.0, 2.0], &ids(2)).unwrap_err();
        assert!(err.to_string().contains("X9"), "{err}");
    }

    #[test]
    fn attention_export_and_focus() {
        let a = Array2::from_elem((3, 3), 1.0);
        let mut state = AttentionState::with_weights(&a, array![0.5], array![1.0], array![1.0]).unwrap();
        assert!(matches!(export_attention(&state, &ids(3)), Err(Error::NoAttention)));
        let r = crate::domain::ResidualVector::new(array![1.0, -2.0, 0.5]).unwrap();
        crate::raa::epoch_update(&mut state, &r, &a).unwrap();
        let full = export_attention(&state, &ids(3)).unwrap();
        let (_, h) = parse_matrix_csv(full.as_bytes()).unwrap();
        for row in h.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let focus = export_attention_focus(&state, &ids(3), "R1").unwrap();
        let weights: Vec<f64> = focus
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(weights, h.row(1).to_vec());
        assert!(export_attention_focus(&state, &ids(3), "nope").is_err());
    }

    #[test]
    fn zero_residual_gives_uniform_export() {
        let a = Array2::from_elem((4, 4), 1.0);
        let mut rng = crate::rng::stream_rng(0, crate::rng::SeedStream::AttentionInit);
        let mut state = AttentionState::init(&a, 8, &mut rng).unwrap();
        let r = crate::domain::ResidualVector::new(ndarray::Array1::zeros(4)).unwrap();
        crate::raa::epoch_update(&mut state, &r, &a).unwrap();
        let (_, h) = parse_matrix_csv(export_attention(&state, &ids(4)).unwrap().as_bytes()).unwrap();
        assert!(h.iter().all(|&v| v == 0.25));
    }

    fn row(label: &str, mae: f64) -> TableRow {
        TableRow {
            label: label.into(),
            mae: Some(mae),
            smape: Some(0.5),
            gei: Some(0.1),
            sdi: None,
            morans_i: Some(0.2),
            failed: false,
        }
    }

    #[test]
    fn deltas_against_original() {
        let (csv, summary) = export_metrics_table(&[row("original", 8.0), row("raa", 7.2)]).unwrap();
        let d = summary.rows[1].delta_pct["mae"].unwrap();
        assert!((d + 10.0).abs() < 1e-9);
        assert_eq!(summary.rows[1].delta_pct["sdi"], None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("raa,7.2,0.5,0.1,degenerate,0.2,-10,0,0,,0,ok"), "{}", lines[2]);
    }

    #[test]
    fn missing_original_is_rejected() {
        assert!(matches!(export_metrics_table(&[row("raa", 1.0)]), Err(Error::MissingBaseline)));
    }

    #[test]
    fn percent_delta_cases() {
        assert_eq!(percent_delta(Some(2.0), Some(-1.0)), Some(300.0));
        assert_eq!(percent_delta(Some(2.0), Some(0.0)), None);
        assert_eq!(percent_delta(None, Some(1.0)), None);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = array![[0.1, 0.9], [1.0 / 3.0, 2.0 / 3.0]];
        let (back_ids, back) = parse_matrix_csv(matrix_csv(&m, &ids(2)).unwrap().as_bytes()).unwrap();
        assert_eq!(back_ids, ids(2));
        assert_eq!(back, m);
    }
}
