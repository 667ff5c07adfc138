use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use robust_combat::eval::{reference_std, std_mae, CellSummary, EvaluationReport, Study};
use robust_combat::mlp::MlpDetector;
use robust_combat::synth::write_grid;
use robust_combat::{load_cohort, save_cohort, CohortSchema, FilterMethod, FilterSpec, OutlierDetector};
use serde::Serialize;

use crate::config::RunConfig;
use crate::svg::GroupedBars;
use crate::{EvaluateArgs, HarmonizeArgs, ReportArgs, TrainArgs};

/// Written next to every command's outputs.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    master_seed: u64,
    config_hash: &'a str,
    outputs: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn record(config: &RunConfig, hash: &str, command: &str, outputs: &[PathBuf]) -> Result<()> {
    let out = &config.paths.out;
    let outputs = outputs
        .iter()
        .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
        .collect();
    write_json(
        &out.join(format!("{command}.run.json")),
        &RunRecord {
            command,
            master_seed: config.study.seed,
            config_hash: hash,
            outputs,
        },
    )
}

fn build_study(config: &RunConfig) -> Result<Study> {
    let study = Study::build(config.study.clone())?;
    log::info!("config hash {}", study.config_hash);
    Ok(study)
}

pub fn simulate(config: &RunConfig) -> Result<()> {
    let study = build_study(config)?;
    let grid = study.grid()?;
    let out = &config.paths.out;
    let dir = out.join("grid");
    let manifest = write_grid(&grid, &dir, config.study.seed, &study.config_hash)?;
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    let reference_path = out.join("reference.csv");
    save_cohort(&study.reference, &reference_path)?;
    log::info!("wrote {} sites to {}", grid.len(), dir.display());
    println!("{} sites written to {}", grid.len(), dir.display());
    record(config, &study.config_hash, "simulate", &[manifest_path, reference_path])
}

fn load_detector(path: &Path) -> Result<MlpDetector> {
    MlpDetector::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "site".into(), |s| s.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct EffectsFile<'a> {
    config_hash: &'a str,
    site: String,
    filter: String,
    threshold: f64,
    effects: &'a robust_combat::SiteEffects,
}

pub fn harmonize(config: &RunConfig, args: &HarmonizeArgs) -> Result<()> {
    let spec: FilterSpec = args.filter.parse()?;
    let hash = config.study.hash();
    let reference = match args.reference.as_deref().or(config.reference()) {
        Some(path) => load_cohort(path, &CohortSchema::default()).with_context(|| format!("reference {}", path.display()))?,
        None => {
            log::info!("no reference given; using the simulated reference");
            build_study(config)?.reference
        }
    };
    let schema = CohortSchema::with_taxonomy(reference.taxonomy_arc().clone());
    let site = load_cohort(&args.site, &schema).with_context(|| format!("site {}", args.site.display()))?;
    let detector: Option<Arc<MlpDetector>> = if spec.method == FilterMethod::Mlp {
        let path = args
            .model
            .as_deref()
            .or(config.model())
            .expect("checked before dispatch");
        Some(Arc::new(load_detector(path)?))
    } else {
        None
    };
    let combat = robust_combat::PairwiseComBat::fit(&reference, config.study.eb)?;
    let result = combat.harmonize_with(&site, &spec, detector.as_deref().map(|d| d as &dyn OutlierDetector))?;

    let out = &config.paths.out;
    let stem = file_stem(&args.site);
    let harmonized_path = out.join(format!("{stem}_harmonized.csv"));
    let effects_path = out.join(format!("{stem}_effects.json"));
    let mask_path = out.join(format!("{stem}_mask.csv"));
    save_cohort(&result.harmonized, &harmonized_path)?;
    write_json(
        &effects_path,
        &EffectsFile {
            config_hash: &hash,
            site: args.site.display().to_string(),
            filter: spec.label().into(),
            threshold: spec.threshold,
            effects: &result.effects,
        },
    )?;
    result.mask.write_csv(&mask_path, &site.subject_ids(), site.taxonomy())?;
    let n_features = site.n_features();
    let excluded = (0..site.len()).map(|j| result.mask.excluded_fraction(j)).sum::<f64>();
    log::info!(
        "{}: {} subjects, {} features, {excluded:.1} subject equivalents excluded by {}",
        stem,
        site.len(),
        n_features,
        spec.label()
    );
    if let Some(truth_path) = &args.truth {
        let truth = load_cohort(truth_path, &schema).with_context(|| format!("ground truth {}", truth_path.display()))?;
        let err = std_mae(&result.harmonized, &truth, &reference_std(&reference))?;
        log::info!("STD_MAE against ground truth: mean {:.4}", err.mean);
        println!("std_mae {:.6}", err.mean);
    }
    record(config, &hash, "harmonize", &[harmonized_path, effects_path, mask_path])
}

fn model_path(config: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .or(config.model())
        .map_or_else(|| config.paths.out.join("model.json"), Path::to_path_buf)
}

#[derive(Serialize)]
struct TrainingFile<'a> {
    config_hash: &'a str,
    training_seed: u64,
    weight_hash: String,
    log: &'a robust_combat::mlp::TrainingLog,
}

pub fn train_mlp(config: &RunConfig, args: &TrainArgs) -> Result<()> {
    let study = build_study(config)?;
    let seed = args.training_seed.unwrap_or(config.study.network.seed);
    let (detector, log) = study.train_detector(seed)?;
    let path = model_path(config, args.model.as_deref());
    detector.save(&path)?;
    let log_path = config.paths.out.join("training_log.json");
    let weight_hash = detector.weight_hash();
    write_json(
        &log_path,
        &TrainingFile {
            config_hash: &study.config_hash,
            training_seed: seed,
            weight_hash: weight_hash.clone(),
            log: &log,
        },
    )?;
    log::info!(
        "trained for {} epochs, kept epoch {}, model {}",
        log.epochs.len(),
        log.best_epoch,
        path.display()
    );
    println!("model {} weight_hash {weight_hash}", path.display());
    record(config, &study.config_hash, "train-mlp", &[path, log_path])
}

/// Warns when the unfiltered error does not grow with the disease ratio
/// from 0.3 upward.
fn check_trend(report: &EvaluationReport) {
    let nf: Vec<CellSummary> = report
        .summary()
        .into_iter()
        .filter(|c| c.filter == FilterMethod::None.label() && c.ratio >= 0.3 - 1e-9)
        .collect();
    if nf.windows(2).any(|w| w[1].mean_std_mae <= w[0].mean_std_mae) {
        log::warn!("NO_FILTERING error is not increasing with the disease ratio");
    } else if nf.len() > 1 {
        log::info!("NO_FILTERING error increases with the disease ratio from 0.3");
    }
}

fn failed_sites(report: &EvaluationReport) -> usize {
    report.sites.iter().filter(|s| s.error.is_some()).count()
}

pub fn evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let study = build_study(config)?;
    let out = &config.paths.out;
    let needs_mlp = config.study.filter_specs()?.iter().any(|f| f.method == FilterMethod::Mlp);
    let detector = match (needs_mlp, args.model.as_deref().or(config.model())) {
        (false, _) => None,
        (true, Some(path)) => Some(load_detector(path)?),
        (true, None) => {
            log::info!("no model given; training one (seed {})", config.study.network.seed);
            Some(study.train_detector(config.study.network.seed)?.0)
        }
    };
    let det = detector.as_ref().map(|d| d as &dyn OutlierDetector);
    let mut outputs = Vec::new();

    let report = study.evaluate(&study.grid()?, det)?;
    check_trend(&report);
    let (json, csv) = (out.join("evaluation.json"), out.join("evaluation_summary.csv"));
    report.write_json(&json)?;
    report.write_summary_csv(&csv)?;
    println!("grid: {} site runs, {} failed", report.sites.len(), failed_sites(&report));
    outputs.extend([json, csv]);

    if args.size_sweep {
        let sweep = study.run_size_sweep(det)?;
        let (json, csv) = (out.join("size_sweep.json"), out.join("size_sweep_summary.csv"));
        sweep.write_json(&json)?;
        sweep.write_summary_csv(&csv)?;
        println!("size sweep: {} site runs, {} failed", sweep.sites.len(), failed_sites(&sweep));
        outputs.extend([json, csv]);
    }
    if args.bootstrap {
        let boot = study.run_bootstrap()?;
        let (json, csv) = (out.join("bootstrap.json"), out.join("bootstrap_bhattacharyya.csv"));
        boot.write_json(&json)?;
        boot.write_bhattacharyya_csv(&csv)?;
        println!("bootstrap: {} iterations", config.study.bootstrap.iterations);
        outputs.extend([json, csv]);
    }
    record(config, &study.config_hash, "evaluate", &outputs)
}

fn read_report(path: &Path) -> Result<Option<EvaluationReport>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(EvaluationReport::read_json(path).with_context(|| format!("reading {}", path.display()))?))
}

fn ordered_filters(cells: &[CellSummary]) -> Vec<String> {
    let mut filters: Vec<String> = Vec::new();
    for c in cells {
        if !filters.contains(&c.filter) {
            filters.push(c.filter.clone());
        }
    }
    filters
}

fn ratio_label(r: f64) -> String {
    format!("{r:.2}")
}

/// Distinct values in first-seen order after sorting.
fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// `values[ratio][filter]` of one statistic.
fn by_ratio(cells: &[CellSummary], ratios: &[f64], filters: &[String], stat: impl Fn(&CellSummary) -> f64) -> Vec<Vec<f64>> {
    ratios
        .iter()
        .map(|&r| {
            filters
                .iter()
                .map(|f| cells.iter().find(|c| c.ratio == r && &c.filter == f).map_or(f64::NAN, &stat))
                .collect()
        })
        .collect()
}

fn write_svg(path: &Path, chart: &GroupedBars) -> Result<()> {
    std::fs::write(path, chart.render()).with_context(|| format!("writing {}", path.display()))
}

fn grid_report(report: &EvaluationReport, dir: &Path, outputs: &mut Vec<PathBuf>, markdown: &mut String) -> Result<()> {
    let cells = report.summary();
    let filters = ordered_filters(&cells);
    let ratios = sorted_unique(cells.iter().map(|c| c.ratio).collect());
    let groups: Vec<String> = ratios.iter().map(|&r| ratio_label(r)).collect();
    let mut charts = vec![
        ("mean_std_mae".to_string(), "Mean STD_MAE".to_string(), by_ratio(&cells, &ratios, &filters, |c| c.mean_std_mae)),
        (
            "worst_case".to_string(),
            "Top-10% STD_MAE".to_string(),
            by_ratio(&cells, &ratios, &filters, |c| c.worst_case),
        ),
    ];
    for (m, metric) in report.metadata.metrics.iter().enumerate() {
        charts.push((
            format!("std_mae_{metric}"),
            format!("Mean STD_MAE, {metric}"),
            by_ratio(&cells, &ratios, &filters, |c| c.per_metric[m]),
        ));
    }
    for (name, title, values) in charts {
        let path = dir.join(format!("{name}.svg"));
        write_svg(
            &path,
            &GroupedBars {
                title: &title,
                x_label: "disease ratio",
                y_label: "STD_MAE",
                groups: groups.clone(),
                series: filters.clone(),
                values,
            },
        )?;
        outputs.push(path);
    }

    let _ = writeln!(markdown, "## Mean STD_MAE by disease ratio\n");
    let _ = writeln!(markdown, "| filter | {} |", groups.join(" | "));
    let _ = writeln!(markdown, "|---|{}", "---|".repeat(groups.len()));
    let means = by_ratio(&cells, &ratios, &filters, |c| c.mean_std_mae);
    let worst = by_ratio(&cells, &ratios, &filters, |c| c.worst_case);
    for (k, f) in filters.iter().enumerate() {
        let row: Vec<String> = (0..ratios.len()).map(|r| format!("{:.4}", means[r][k])).collect();
        let _ = writeln!(markdown, "| {f} | {} |", row.join(" | "));
    }
    let _ = writeln!(markdown, "\n## Top-10% STD_MAE by disease ratio\n");
    let _ = writeln!(markdown, "| filter | {} |", groups.join(" | "));
    let _ = writeln!(markdown, "|---|{}", "---|".repeat(groups.len()));
    for (k, f) in filters.iter().enumerate() {
        let row: Vec<String> = (0..ratios.len()).map(|r| format!("{:.4}", worst[r][k])).collect();
        let _ = writeln!(markdown, "| {f} | {} |", row.join(" | "));
    }
    let failed: usize = cells.iter().map(|c| c.n_failed).sum();
    let total: usize = cells.iter().map(|c| c.n_sites).sum();
    let _ = writeln!(markdown, "\nFailed site runs: {failed} of {total}.");
    for c in cells.iter().filter(|c| c.n_failed > 0) {
        let _ = writeln!(markdown, "- {} at ratio {}: {} failed", c.filter, ratio_label(c.ratio), c.n_failed);
    }
    Ok(())
}

fn size_sweep_report(report: &EvaluationReport, dir: &Path, outputs: &mut Vec<PathBuf>, markdown: &mut String) -> Result<()> {
    let cells = report.summary();
    let filters = ordered_filters(&cells);
    let ratios = sorted_unique(cells.iter().map(|c| c.ratio).collect());
    let mut sizes: Vec<usize> = cells.iter().map(|c| c.n_subjects).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let _ = writeln!(markdown, "\n## Site-size sweep (mean STD_MAE)\n");
    for &r in &ratios {
        let values: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&n| {
                filters
                    .iter()
                    .map(|f| {
                        cells
                            .iter()
                            .find(|c| c.n_subjects == n && c.ratio == r && &c.filter == f)
                            .map_or(f64::NAN, |c| c.mean_std_mae)
                    })
                    .collect()
            })
            .collect();
        let path = dir.join(format!("size_sweep_r{}.svg", ratio_label(r)));
        write_svg(
            &path,
            &GroupedBars {
                title: &format!("Mean STD_MAE by site size, ratio {}", ratio_label(r)),
                x_label: "subjects per site",
                y_label: "STD_MAE",
                groups: sizes.iter().map(|n| n.to_string()).collect(),
                series: filters.clone(),
                values: values.clone(),
            },
        )?;
        outputs.push(path);
        let _ = writeln!(markdown, "Ratio {}:\n", ratio_label(r));
        let _ = writeln!(markdown, "| filter | {} |", sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(markdown, "|---|{}", "---|".repeat(sizes.len()));
        for (k, f) in filters.iter().enumerate() {
            let row: Vec<String> = values.iter().map(|v| format!("{:.4}", v[k])).collect();
            let _ = writeln!(markdown, "| {f} | {} |", row.join(" | "));
        }
        let _ = writeln!(markdown);
    }
    Ok(())
}

fn bootstrap_report(report: &EvaluationReport, dir: &Path, outputs: &mut Vec<PathBuf>, markdown: &mut String) -> Result<()> {
    let summary = report.bhattacharyya_summary();
    let mut filters: Vec<String> = Vec::new();
    for e in report.raw_bhattacharyya.iter().chain(&report.bhattacharyya) {
        if !filters.contains(&e.filter) {
            filters.push(e.filter.clone());
        }
    }
    let metrics = &report.metadata.metrics;
    let values: Vec<Vec<f64>> = metrics
        .iter()
        .map(|m| {
            filters
                .iter()
                .map(|f| summary.get(&(f.clone(), m.clone())).copied().unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let path = dir.join("bootstrap_bhattacharyya.svg");
    write_svg(
        &path,
        &GroupedBars {
            title: "HC distance to the reference on held-out sites",
            x_label: "metric",
            y_label: "Bhattacharyya distance",
            groups: metrics.clone(),
            series: filters.clone(),
            values: values.clone(),
        },
    )?;
    outputs.push(path);
    let _ = writeln!(markdown, "\n## Held-out sites: mean Bhattacharyya distance\n");
    let _ = writeln!(markdown, "| metric | {} |", filters.join(" | "));
    let _ = writeln!(markdown, "|---|{}", "---|".repeat(filters.len()));
    for (m, metric) in metrics.iter().enumerate() {
        let row: Vec<String> = values[m].iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(markdown, "| {metric} | {} |", row.join(" | "));
    }
    Ok(())
}

pub fn report(config: &RunConfig, args: &ReportArgs) -> Result<()> {
    let input = args.input.clone().unwrap_or_else(|| config.paths.out.clone());
    let grid_path = input.join("evaluation.json");
    let Some(grid) = read_report(&grid_path)? else {
        return Err(crate::CliError::new(
            crate::ExitClass::Data,
            format!("{} not found; run `rcombat evaluate` first", grid_path.display()),
        )
        .into());
    };
    let dir = config.paths.out.join("report");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut outputs = Vec::new();
    let mut markdown = format!(
        "# Harmonization report\n\nMaster seed {}, config hash `{}`.\n\n",
        grid.metadata.master_seed, grid.metadata.config_hash
    );
    grid_report(&grid, &dir, &mut outputs, &mut markdown)?;
    if let Some(sweep) = read_report(&input.join("size_sweep.json"))? {
        size_sweep_report(&sweep, &dir, &mut outputs, &mut markdown)?;
    }
    if let Some(boot) = read_report(&input.join("bootstrap.json"))? {
        bootstrap_report(&boot, &dir, &mut outputs, &mut markdown)?;
    }
    let table_path = dir.join("summary.md");
    std::fs::write(&table_path, &markdown).with_context(|| format!("writing {}", table_path.display()))?;
    let csv_path = dir.join("summary.csv");
    grid.write_summary_csv(&csv_path)?;
    outputs.extend([table_path, csv_path]);
    let hash = grid.metadata.config_hash.clone();
    println!("{} report files in {}", outputs.len(), dir.display());
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for o in &outputs {
        *counts.entry(o.extension().and_then(|e| e.to_str()).unwrap_or("")).or_default() += 1;
    }
    log::info!("report outputs: {counts:?}");
    record(config, &hash, "report", &outputs)
}
