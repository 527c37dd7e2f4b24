use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedrec_core::analysis::{
    empirical_breakdown_fraction, fit_power_law_with_xmin, predicted_breakdown_fraction,
    BreakdownQuery, PowerLawFit,
};
use fedrec_core::dataset::{generate_synthetic, load_movielens, DatasetStats};
use fedrec_core::federation::{AttackAudit, ExperimentResult, Simulation};
use fedrec_core::{AggregatorSpec, EpochReport, InteractionDataset};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub fn load_dataset(config: &ExperimentConfig) -> Result<InteractionDataset> {
    if let Some(spec) = &config.dataset.synthetic {
        return Ok(generate_synthetic(spec)?);
    }
    let path = config.dataset_path().expect("file dataset");
    load_movielens(&path).with_context(|| format!("loading dataset {}", path.display()))
}

pub const EPOCH_CSV_HEADER: &str = "epoch,hr5,ndcg5,hr10,ndcg10,diverged";
const AUDIT_CSV_HEADER: &str = "epoch,malicious_clients,attacked_items,benign_items,outnumbered_items,reversed_items,mean_norm,max_norm,fallback_items";

pub fn epoch_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.hr5, r.ndcg5, r.hr10, r.ndcg10, r.diverged
        );
    }
    out
}

fn audit_csv(audits: &[AttackAudit]) -> String {
    let mut out = String::from(AUDIT_CSV_HEADER);
    out.push('\n');
    for a in audits {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            a.epoch,
            a.malicious_clients,
            a.attacked_items,
            a.benign_items,
            a.outnumbered_items,
            a.reversed_items,
            a.mean_norm,
            a.max_norm,
            a.fallback_items
        );
    }
    out
}

fn plot_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from("epoch,metric,value\n");
    for r in reports {
        for (name, v) in [("hr5", r.hr5), ("ndcg5", r.ndcg5), ("hr10", r.hr10), ("ndcg10", r.ndcg10)] {
            let _ = writeln!(out, "{},{name},{v}", r.epoch);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditTotals {
    pub attacked_rounds: usize,
    pub attacked_items: usize,
    pub outnumbered_items: usize,
    pub reversed_items: usize,
    pub fallback_items: usize,
    pub max_norm: f64,
}

impl AuditTotals {
    fn from_audits(audits: &[AttackAudit]) -> Self {
        let mut t = AuditTotals::default();
        for a in audits {
            t.attacked_rounds += (a.malicious_clients > 0) as usize;
            t.attacked_items += a.attacked_items;
            t.outnumbered_items += a.outnumbered_items;
            t.reversed_items += a.reversed_items;
            t.fallback_items += a.fallback_items;
            t.max_norm = t.max_norm.max(a.max_norm);
        }
        t
    }
}

/// Relative change of each metric against a clean run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDrop {
    pub hr5: f64,
    pub ndcg5: f64,
    pub hr10: f64,
    pub ndcg10: f64,
}

impl MetricDrop {
    pub fn between(attacked: &EpochReport, clean: &EpochReport) -> Self {
        let rel = |a: f64, c: f64| if c == 0.0 { 0.0 } else { (a - c) / c };
        MetricDrop {
            hr5: rel(attacked.hr5, clean.hr5),
            ndcg5: rel(attacked.ndcg5, clean.ndcg5),
            hr10: rel(attacked.hr10, clean.hr10),
            ndcg10: rel(attacked.ndcg10, clean.ndcg10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub dataset: DatasetStats,
    pub malicious_count: usize,
    pub max_poisoned_items: usize,
    pub aggregator: AggregatorSpec,
    #[serde(rename = "final")]
    pub final_report: EpochReport,
    pub diverged: bool,
    pub clean_baseline: Option<EpochReport>,
    pub drop: Option<MetricDrop>,
    pub audit_totals: AuditTotals,
}

pub struct RunOutput {
    pub result: ExperimentResult,
    pub summary: RunSummary,
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Reads the final report of an earlier run's summary JSON.
pub fn read_baseline(path: &Path) -> Result<EpochReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let summary: RunSummary =
        serde_json::from_str(&text).with_context(|| format!("parsing run summary {}", path.display()))?;
    Ok(summary.final_report)
}

pub fn run(config: &ExperimentConfig, clean_baseline: Option<EpochReport>) -> Result<RunOutput> {
    let dataset = load_dataset(config)?;
    let out_dir = &config.output.dir;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let label = &config.output.label;
    let mut files = Vec::new();

    let mut round_log = if config.output.round_log {
        let path = out_dir.join(format!("{label}.rounds.jsonl"));
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        files.push(path);
        Some(BufWriter::new(file))
    } else {
        None
    };
    let mut log_error = None;
    let sim = Simulation::new(&dataset, config.federation_config())?;
    let result = sim.run_with(|outcome, _| {
        if let (Some(w), None) = (round_log.as_mut(), log_error.as_ref()) {
            let line = serde_json::json!({ "epoch": outcome.epoch, "items": outcome.log });
            if let Err(e) = writeln!(w, "{line}") {
                log_error = Some(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        bail!("writing round log: {e}");
    }
    if let Some(mut w) = round_log {
        w.flush()?;
    }

    let final_report = *result.final_report().expect("at least one evaluation");
    let summary = RunSummary {
        config: config.clone(),
        dataset: dataset.stats(),
        malicious_count: result.malicious_count,
        max_poisoned_items: result.max_poisoned_items,
        aggregator: result.aggregator,
        final_report,
        diverged: result.diverged,
        drop: clean_baseline.as_ref().map(|c| MetricDrop::between(&final_report, c)),
        clean_baseline,
        audit_totals: AuditTotals::from_audits(&result.audits),
    };

    let csv = out_dir.join(format!("{label}.csv"));
    write_file(&csv, &epoch_csv(&result.reports))?;
    files.push(csv);
    let audit = out_dir.join(format!("{label}.audit.csv"));
    write_file(&audit, &audit_csv(&result.audits))?;
    files.push(audit);
    if config.output.plot_data {
        let plot = out_dir.join(format!("{label}.plot.csv"));
        write_file(&plot, &plot_csv(&result.reports))?;
        files.push(plot);
    }
    let json = out_dir.join(format!("{label}.summary.json"));
    write_file(&json, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    files.push(json);

    Ok(RunOutput { result, summary, files })
}

pub struct AnalysisTable {
    pub fit: PowerLawFit,
    pub items: usize,
    pub rows: Vec<(f64, usize, f64, f64)>,
}

pub fn analyze(config: &ExperimentConfig) -> Result<AnalysisTable> {
    let dataset = load_dataset(config)?;
    let degrees: Vec<f64> = dataset.degrees.iter().map(|&d| d as f64).collect();
    let fit = fit_power_law_with_xmin(&degrees, config.analysis.x_min)?;
    let mut rows = Vec::new();
    for &alpha in &config.analysis.breakdown_points {
        for &n in &config.analysis.malicious_counts {
            let q = BreakdownQuery::new(alpha, n)?;
            rows.push((
                alpha,
                n,
                predicted_breakdown_fraction(&fit, &q),
                empirical_breakdown_fraction(&degrees, &q),
            ));
        }
    }
    Ok(AnalysisTable {
        fit,
        items: degrees.len(),
        rows,
    })
}

impl AnalysisTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# exponent={} normalization={} x_min={} items={}\nalpha,malicious_count,predicted,empirical\n",
            self.fit.exponent, self.fit.normalization, self.fit.x_min, self.items
        );
        for (a, n, p, e) in &self.rows {
            let _ = writeln!(out, "{a},{n},{p},{e}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    #[serde(flatten)]
    pub stats: DatasetStats,
    pub testable_users: usize,
    pub max_train_len: usize,
    pub max_degree: usize,
    pub zero_degree_items: usize,
}

pub fn stats(config: &ExperimentConfig) -> Result<StatsReport> {
    let dataset = load_dataset(config)?;
    Ok(StatsReport {
        stats: dataset.stats(),
        testable_users: dataset.testable_users().count(),
        max_train_len: dataset.max_train_len(),
        max_degree: dataset.degrees.iter().copied().max().unwrap_or(0),
        zero_degree_items: dataset.degrees.iter().filter(|&&d| d == 0).count(),
    })
}
