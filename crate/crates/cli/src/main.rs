mod config;
mod dataset;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use equigrid::data::{generate_synthetic_city, SyntheticCity, SyntheticCityConfig};
use equigrid::loss::Variant;
use equigrid::report::{
    self, enrich_geometry, export_metrics_table, focus_extract, parse_matrix_csv, parse_residual_csv,
    read_record_summary, write_run_record, TableRow,
};
use equigrid::trainer::{run_ablation, train, AblationRow};

use crate::config::{env_seed, resolve, FileConfig};
use crate::dataset::{load_dataset, write_dataset};

const AFTER_HELP: &str = "Settings are resolved as: command-line flag, then --config-file, \
then the EQUIGRID_SEED environment variable (seed only), then built-in defaults.";

#[derive(Parser)]
#[command(name = "equigrid", version, about = "Fairness-aware spatiotemporal demand forecasting", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic segregated city dataset.
    Generate {
        #[arg(long, default_value_t = 64)]
        n_regions: usize,
        #[arg(long, default_value_t = 2000)]
        n_steps: usize,
        #[arg(long, default_value_t = 0.8)]
        segregation: f64,
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        /// Defaults to $EQUIGRID_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one variant and write a run record directory.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        /// TOML run configuration.
        #[arg(long)]
        config_file: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run all seven variants for every seed and write the ablation table.
    Ablate {
        #[arg(long)]
        data_dir: PathBuf,
        /// Comma-separated list, e.g. 1,2,3.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        config_file: Option<PathBuf>,
        /// Worker threads for independent (variant, seed) runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare run records and export residual and attention maps.
    Report {
        /// Comma-separated run record directories.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        record_dirs: Vec<PathBuf>,
        /// GeoJSON feature collection keyed by a `region_id` property.
        #[arg(long)]
        geometry: Option<PathBuf>,
        /// Region for the attention score/weight extract; defaults to the
        /// region with the largest absolute residual.
        #[arg(long)]
        focus_region: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            bail!("output path {} is not a directory", dir.display());
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            bail!("output directory {} is not empty (pass --force to write into it)", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn parse_variant(name: &str) -> Result<Variant> {
    Ok(name.parse::<Variant>()?)
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().with_context(|| format!("invalid seed `{s}`")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("--seeds must list at least one seed");
    }
    Ok(seeds)
}

fn cmd_generate(
    n_regions: usize,
    n_steps: usize,
    segregation: f64,
    noise: f64,
    seed: Option<u64>,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let seed = config::resolve_seed(seed, &FileConfig::default(), env_seed().as_deref())?;
    let cfg = SyntheticCityConfig {
        n_regions,
        n_steps,
        segregation_strength: segregation,
        noise_scale: noise,
        seed,
        ..Default::default()
    };
    cfg.validate()?;
    let city: SyntheticCity<f64> = generate_synthetic_city(&cfg)?;
    prepare_out_dir(out_dir, force)?;
    write_dataset(&city, &cfg, out_dir)?;
    eprintln!("wrote {n_regions} regions x {n_steps} steps to {}", out_dir.display());
    Ok(())
}

fn cmd_train(
    data_dir: &Path,
    config_file: Option<&Path>,
    variant: Option<&str>,
    seed: Option<u64>,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let variant = variant.map(parse_variant).transpose()?;
    let file = FileConfig::load(config_file)?;
    let run = resolve(&file, variant, seed, env_seed().as_deref())?;
    let data = load_dataset(data_dir)?;
    prepare_out_dir(out_dir, force)?;
    let record = train(
        &data.graph,
        &data.demand,
        data.demographics.as_ref(),
        run.window,
        &run.train,
        &run.loss,
    )?;
    write_run_record(&record, out_dir)?;
    let m = &record.metrics;
    eprintln!(
        "{} seed {}: {} epochs (best {}), test MAE {} SMAPE {} in {:.1}s",
        record.variant,
        record.seed,
        record.epochs.len(),
        record.best_epoch,
        report::format_sig9(m.mae),
        report::format_sig9(m.smape),
        record.wall_seconds
    );
    Ok(())
}

fn cmd_ablate(
    data_dir: &Path,
    seeds: &str,
    config_file: Option<&Path>,
    jobs: usize,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let seeds = parse_seeds(seeds)?;
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let file = FileConfig::load(config_file)?;
    let run = resolve(&file, None, None, env_seed().as_deref())?;
    let data = load_dataset(data_dir)?;
    prepare_out_dir(out_dir, force)?;
    let table = run_ablation(
        &data.graph,
        &data.demand,
        data.demographics.as_ref(),
        run.window,
        &run.train,
        &run.loss,
        &seeds,
        jobs,
    )?;
    let runs_dir = out_dir.join("runs");
    for cell in &table.cells {
        match &cell.outcome {
            Ok(record) => write_run_record(record, &runs_dir.join(format!("{}_seed{}", cell.variant, cell.seed)))?,
            Err(e) => eprintln!("{} seed {} failed: {e}", cell.variant, cell.seed),
        }
    }
    let rows: Vec<TableRow> = table.rows.iter().map(TableRow::from_ablation).collect();
    let (csv, summary) = export_metrics_table(&rows)?;
    fs::write(out_dir.join("ablation.csv"), csv)?;
    let counts: Vec<_> = table
        .rows
        .iter()
        .map(|r: &AblationRow| serde_json::json!({"variant": r.variant, "completed": r.completed, "failed": r.failed}))
        .collect();
    let doc = serde_json::json!({"seeds": seeds, "table": summary, "runs": counts});
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    fs::write(out_dir.join("cells.csv"), report::ablation_cells_csv(&table.cells))?;
    let failed: usize = table.rows.iter().map(|r| r.failed).sum();
    eprintln!(
        "ablation: {} runs, {failed} failed; table in {}",
        table.cells.len(),
        out_dir.join("ablation.csv").display()
    );
    Ok(())
}

fn record_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "record".into())
}

fn cmd_report(
    record_dirs: &[PathBuf],
    geometry: Option<&Path>,
    focus_region: Option<&str>,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for dir in record_dirs {
        let s = read_record_summary(dir).with_context(|| format!("record {}", dir.display()))?;
        rows.push(TableRow::from_metrics(s.variant.name(), &s.metrics));
        summaries.push(s);
    }
    let (csv, summary) = export_metrics_table(&rows)?;
    let geometry = geometry
        .map(|p| -> Result<serde_json::Value> {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid GeoJSON in {}", p.display()))
        })
        .transpose()?;
    prepare_out_dir(out_dir, force)?;
    fs::write(out_dir.join("comparison.csv"), csv)?;
    fs::write(out_dir.join("comparison.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    for dir in record_dirs {
        let label = record_label(dir);
        let residual_path = dir.join(report::RESIDUALS_FILE);
        let text = fs::read_to_string(&residual_path)
            .with_context(|| format!("record {}: cannot read {}", dir.display(), report::RESIDUALS_FILE))?;
        let (ids, r) = parse_residual_csv(text.as_bytes())?;
        fs::write(out_dir.join(format!("{label}_residuals.csv")), report::export_residual_map(&r, &ids)?)?;
        if let Some(g) = &geometry {
            let enriched = enrich_geometry(g, &r, &ids).with_context(|| format!("record {}", dir.display()))?;
            fs::write(
                out_dir.join(format!("{label}_residuals.geojson")),
                serde_json::to_string_pretty(&enriched)? + "\n",
            )?;
        }
        let att = fs::read_to_string(dir.join(report::ATTENTION_FILE)).unwrap_or_default();
        if att.trim().is_empty() {
            continue;
        }
        let (_, h) = parse_matrix_csv(att.as_bytes())?;
        let (_, s) = parse_matrix_csv(fs::read_to_string(dir.join(report::SCORES_FILE))?.as_bytes())?;
        let focus = match focus_region {
            Some(f) => f.to_string(),
            None => {
                let i = (0..r.len()).fold(0, |best, i| if r[i].abs() > r[best].abs() { i } else { best });
                ids[i].clone()
            }
        };
        fs::write(out_dir.join(format!("{label}_attention.csv")), att)?;
        fs::write(
            out_dir.join(format!("{label}_attention_focus_{focus}.csv")),
            focus_extract(&s, &h, &ids, &focus)?,
        )?;
    }
    eprintln!("compared {} records into {}", summaries.len(), out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            n_regions,
            n_steps,
            segregation,
            noise,
            seed,
            out_dir,
            force,
        } => cmd_generate(n_regions, n_steps, segregation, noise, seed, &out_dir, force),
        Command::Train {
            data_dir,
            config_file,
            variant,
            seed,
            out_dir,
            force,
        } => cmd_train(&data_dir, config_file.as_deref(), variant.as_deref(), seed, &out_dir, force),
        Command::Ablate {
            data_dir,
            seeds,
            config_file,
            jobs,
            out_dir,
            force,
        } => cmd_ablate(&data_dir, &seeds, config_file.as_deref(), jobs, &out_dir, force),
        Command::Report {
            record_dirs,
            geometry,
            focus_region,
            out_dir,
            force,
        } => cmd_report(&record_dirs, geometry.as_deref(), focus_region.as_deref(), &out_dir, force),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
