//! Backtest metrics and plot series from held-out greedy trajectories.
//!
//! A *trade* is any step with a non-zero position; its PnL `g_j` is
//! `c_instr · a_t · (m_{t+k} − m_t)` in price units. Episode returns `R^(e)`
//! sum the per-step PnL of an episode.
//!
//! `max_drawdown` is the minimum running cumulative scaled episode return — a
//! downside proxy that can be positive — while the `drawdown` plot series is
//! the conventional running-peak deficit of the per-step equity curve.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::env::{Action, EpisodeTrajectory};
use crate::error::{Error, Result};

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLedger {
    /// Unscaled per-trade PnL.
    pub trade_pnl: Vec<f64>,
    /// Unscaled per-episode PnL.
    pub episode_pnl: Vec<f64>,
    /// Unscaled per-step PnL including flat steps, in time order.
    pub step_pnl: Vec<f64>,
    pub c_instr: f64,
}

impl TradeLedger {
    pub fn from_trajectories(trajectories: &[EpisodeTrajectory], c_instr: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidInput("no trajectories to evaluate".into()));
        }
        if !c_instr.is_finite() {
            return Err(Error::NonFinite("c_instr".into()));
        }
        let mut ledger = TradeLedger {
            trade_pnl: Vec::new(),
            episode_pnl: Vec::with_capacity(trajectories.len()),
            step_pnl: Vec::new(),
            c_instr,
        };
        for traj in trajectories {
            let mut r = 0.0;
            for s in &traj.steps {
                if !s.pnl.is_finite() {
                    return Err(Error::NonFinite(format!("pnl at event {}", s.t)));
                }
                r += s.pnl;
                ledger.step_pnl.push(s.pnl);
                if s.action != Action::Flat {
                    ledger.trade_pnl.push(s.pnl);
                }
            }
            ledger.episode_pnl.push(r);
        }
        Ok(ledger)
    }

    pub fn trades(&self) -> Vec<f64> {
        self.trade_pnl.iter().map(|g| self.c_instr * g).collect()
    }

    pub fn episode_returns(&self) -> Vec<f64> {
        self.episode_pnl.iter().map(|r| self.c_instr * r).collect()
    }
}

/// Mean and population standard deviation of `c · R^(e)`.
pub fn episode_stats(ledger: &TradeLedger) -> Result<(f64, f64)> {
    let r = ledger.episode_returns();
    if r.is_empty() {
        return Err(Error::InvalidInput("ledger has no episodes".into()));
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `E[g | g > 0] / |E[g | g < 0]|`; `None` without losing trades, `0` without winners.
pub fn pl_ratio(ledger: &TradeLedger) -> Option<f64> {
    let g = ledger.trades();
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for x in g {
        if x > 0.0 {
            pos += x;
            npos += 1;
        } else if x < 0.0 {
            neg += x;
            nneg += 1;
        }
    }
    if nneg == 0 {
        return None;
    }
    if npos == 0 {
        return Some(0.0);
    }
    Some((pos / npos as f64) / (neg / nneg as f64).abs())
}

/// `100 · #{g > 0} / #{g ≠ 0}`; `None` when every trade is zero.
pub fn profitability(ledger: &TradeLedger) -> Option<f64> {
    let g = ledger.trades();
    let nonzero = g.iter().filter(|x| **x != 0.0).count();
    if nonzero == 0 {
        return None;
    }
    let wins = g.iter().filter(|x| **x > 0.0).count();
    Some(100.0 * wins as f64 / nonzero as f64)
}

/// Minimum of the running cumulative sum of scaled episode returns.
pub fn max_drawdown_proxy(ledger: &TradeLedger) -> Result<f64> {
    let r = ledger.episode_returns();
    if r.is_empty() {
        return Err(Error::InvalidInput("ledger has no episodes".into()));
    }
    let mut cum = 0.0;
    let mut min = f64::INFINITY;
    for x in r {
        cum += x;
        min = min.min(cum);
    }
    Ok(min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Equal-width bins over `[−M, M]`, `M = max |x|` (1 when all values are zero).
pub fn symmetric_histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let m = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let m = if m > 0.0 { m } else { 1.0 };
    let width = 2.0 * m / bins as f64;
    let edges = (0..=bins).map(|i| -m + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for v in values {
        let i = (((v + m) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSeries {
    /// Running cumulative scaled PnL per step.
    pub equity: Vec<f64>,
    /// Scaled trade-PnL histogram.
    pub trade_histogram: Histogram,
    pub episode_returns: Vec<f64>,
    /// Equity minus its running peak (peak starts at zero); always ≤ 0.
    pub drawdown: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub instrument: String,
    pub method: String,
    pub avg_return: f64,
    pub volatility: f64,
    /// `None` when undefined (no losing trades).
    pub avg_pl_ratio: Option<f64>,
    /// `None` when undefined (no non-zero trades).
    pub profitability_pct: Option<f64>,
    /// Minimum cumulative scaled episode return.
    pub max_drawdown: f64,
    pub episodes: usize,
    pub trades: usize,
    pub c_instr: f64,
    pub diagnostics: Vec<String>,
    pub series: ReportSeries,
}

pub fn build_report(
    instrument: &str,
    method: &str,
    trajectories: &[EpisodeTrajectory],
    c_instr: f64,
    histogram_bins: usize,
) -> Result<BacktestReport> {
    let ledger = TradeLedger::from_trajectories(trajectories, c_instr)?;
    report_from_ledger(instrument, method, &ledger, histogram_bins)
}

pub fn report_from_ledger(
    instrument: &str,
    method: &str,
    ledger: &TradeLedger,
    histogram_bins: usize,
) -> Result<BacktestReport> {
    let (avg_return, volatility) = episode_stats(ledger)?;
    let avg_pl_ratio = pl_ratio(ledger);
    let profitability_pct = profitability(ledger);
    let mut diagnostics = Vec::new();
    if avg_pl_ratio.is_none() {
        diagnostics.push("avg P/L undefined: no losing trades".to_string());
    }
    if profitability_pct.is_none() {
        diagnostics.push("profitability undefined: no non-zero trades".to_string());
    }

    let mut equity = Vec::with_capacity(ledger.step_pnl.len());
    let mut drawdown = Vec::with_capacity(ledger.step_pnl.len());
    let (mut cum, mut peak) = (0.0f64, 0.0f64);
    for p in &ledger.step_pnl {
        cum += ledger.c_instr * p;
        peak = peak.max(cum);
        equity.push(cum);
        drawdown.push(cum - peak);
    }
    let trades = ledger.trades();
    Ok(BacktestReport {
        instrument: instrument.to_string(),
        method: method.to_string(),
        avg_return,
        volatility,
        avg_pl_ratio,
        profitability_pct,
        max_drawdown: max_drawdown_proxy(ledger)?,
        episodes: ledger.episode_pnl.len(),
        trades: trades.len(),
        c_instr: ledger.c_instr,
        diagnostics,
        series: ReportSeries {
            equity,
            trade_histogram: symmetric_histogram(&trades, histogram_bins),
            episode_returns: ledger.episode_returns(),
            drawdown,
        },
    })
}

impl BacktestReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_equity_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "step,equity")?;
        for (i, v) in self.series.equity.iter().enumerate() {
            writeln!(out, "{i},{v}")?;
        }
        Ok(())
    }

    pub fn write_drawdown_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "step,drawdown")?;
        for (i, v) in self.series.drawdown.iter().enumerate() {
            writeln!(out, "{i},{v}")?;
        }
        Ok(())
    }

    pub fn write_episode_returns_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "episode,return")?;
        for (i, v) in self.series.episode_returns.iter().enumerate() {
            writeln!(out, "{i},{v}")?;
        }
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let h = &self.series.trade_histogram;
        writeln!(out, "bin_lo,bin_hi,count")?;
        for (i, c) in h.counts.iter().enumerate() {
            writeln!(out, "{},{},{c}", h.edges[i], h.edges[i + 1])?;
        }
        Ok(())
    }
}
