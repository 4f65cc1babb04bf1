//! Cross-agent comparison table built from backtest reports.

use std::path::PathBuf;

use lobrl::agents::AgentKind;
use lobrl::metrics::BacktestReport;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pipeline::{read_report, RunDir};

pub const COLUMNS: [&str; 7] = [
    "Ticker",
    "Method",
    "Avg Return",
    "Volatility",
    "Avg P/L",
    "Profitability",
    "Max DD",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub instrument: String,
    pub method: String,
    pub avg_return: f64,
    pub volatility: f64,
    pub avg_pl_ratio: Option<f64>,
    pub profitability_pct: Option<f64>,
    pub max_drawdown: f64,
}

impl From<&BacktestReport> for CompareRow {
    fn from(r: &BacktestReport) -> Self {
        Self {
            instrument: r.instrument.clone(),
            method: r.method.clone(),
            avg_return: r.avg_return,
            volatility: r.volatility,
            avg_pl_ratio: r.avg_pl_ratio,
            profitability_pct: r.profitability_pct,
            max_drawdown: r.max_drawdown,
        }
    }
}

impl CompareRow {
    fn cells(&self) -> [String; 7] {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        [
            self.instrument.clone(),
            self.method.clone(),
            format!("{:.4}", self.avg_return),
            format!("{:.4}", self.volatility),
            opt(self.avg_pl_ratio),
            self.profitability_pct
                .map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}%")),
            format!("{:.4}", self.max_drawdown),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    /// Reports that were requested but not found.
    pub missing: Vec<String>,
}

impl Comparison {
    /// Markdown table, columns padded to equal width.
    pub fn to_markdown(&self) -> String {
        let body: Vec<[String; 7]> = self.rows.iter().map(CompareRow::cells).collect();
        let mut widths = COLUMNS.map(str::len);
        for r in &body {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
        let mut out = line(&header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        for r in &body {
            out.push_str(&line(r));
        }
        if !self.missing.is_empty() {
            out.push('\n');
            for m in &self.missing {
                out.push_str(&format!("absent: {m}\n"));
            }
        }
        out
    }

    /// CSV with full-precision numbers; empty cells for n/a.
    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.instrument,
                r.method,
                r.avg_return,
                r.volatility,
                opt(r.avg_pl_ratio),
                opt(r.profitability_pct),
                r.max_drawdown
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompareOptions {
    /// Fail instead of skipping when a requested report is absent.
    pub strict: bool,
    pub allow_mixed_instruments: bool,
}

/// Collects the reports for `kinds` from each run directory.
pub fn compare_runs(runs: &[PathBuf], kinds: &[AgentKind], opts: &CompareOptions) -> Result<Comparison> {
    let mut cmp = Comparison::default();
    let mut reports = Vec::new();
    for root in runs {
        let run = RunDir::new(root);
        for &kind in kinds {
            let path = run.report(kind);
            if !path.exists() {
                if opts.strict {
                    return Err(CliError::Data(format!("missing report {}", path.display())));
                }
                log::warn!("skipping missing report {}", path.display());
                cmp.missing.push(path.display().to_string());
                continue;
            }
            reports.push(read_report(&path)?.report);
        }
    }
    if reports.len() < 2 {
        return Err(CliError::Data(format!(
            "compare needs at least two backtest reports, found {}",
            reports.len()
        )));
    }
    if !opts.allow_mixed_instruments {
        let first = &reports[0].instrument;
        if let Some(other) = reports.iter().find(|r| &r.instrument != first) {
            return Err(CliError::Data(format!(
                "reports mix instruments {first} and {}; pass --allow-mixed-instruments to compare anyway",
                other.instrument
            )));
        }
    }
    cmp.rows = reports.iter().map(CompareRow::from).collect();
    Ok(cmp)
}
