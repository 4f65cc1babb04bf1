//! LOBSTER level-10 order-book ingestion and synthetic book generation.
//!
//! Prices follow the LOBSTER convention: integer dollars × 10,000. They stay
//! integers until metrics are reported.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 10;

/// LOBSTER writes these prices for levels that do not exist.
pub const EMPTY_ASK_PRICE: i64 = 9_999_999_999;
pub const EMPTY_BID_PRICE: i64 = -9_999_999_999;

/// Keep at most this many per-row diagnostics; the counters stay exact.
const MAX_DIAGNOSTICS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub ask_price: i64,
    pub ask_volume: u64,
    pub bid_price: i64,
    pub bid_volume: u64,
}

/// One side of one level, the unit the order-flow formulas compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quote {
    pub price: i64,
    pub volume: u64,
}

impl Level {
    pub fn ask(&self) -> Quote {
        Quote {
            price: self.ask_price,
            volume: self.ask_volume,
        }
    }

    pub fn bid(&self) -> Quote {
        Quote {
            price: self.bid_price,
            volume: self.bid_volume,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookSnapshot {
    /// Seconds after midnight; 0 when no message file was supplied.
    pub timestamp: f64,
    pub levels: Vec<Level>,
}

impl BookSnapshot {
    pub fn best(&self) -> &Level {
        &self.levels[0]
    }

    pub fn spread(&self) -> i64 {
        self.levels[0].ask_price - self.levels[0].bid_price
    }

    /// Checks level ordering and the uncrossed-book condition.
    pub fn validate(&self) -> std::result::Result<(), RowError> {
        let first = self.levels.first().ok_or(RowError::ColumnCount {
            expected: 4,
            got: 0,
        })?;
        if first.ask_price <= first.bid_price {
            return Err(RowError::Crossed {
                ask: first.ask_price,
                bid: first.bid_price,
            });
        }
        for (i, pair) in self.levels.windows(2).enumerate() {
            if pair[1].ask_price <= pair[0].ask_price || pair[1].bid_price >= pair[0].bid_price {
                return Err(RowError::LevelOrder { level: i + 2 });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamSource {
    File,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub instrument: String,
    pub snapshots: Vec<BookSnapshot>,
    pub source: StreamSource,
}

impl EventStream {
    /// Wraps snapshots, enforcing the minimum length and chronological order.
    pub fn new(
        instrument: impl Into<String>,
        snapshots: Vec<BookSnapshot>,
        source: StreamSource,
    ) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::NoEvents);
        }
        if snapshots.len() < 2 {
            return Err(Error::StreamTooShort {
                len: snapshots.len(),
                needed: 2,
            });
        }
        if snapshots.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::InvalidInput("timestamps decrease".into()));
        }
        Ok(Self {
            instrument: instrument.into(),
            snapshots,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.snapshots[0].levels.len()
    }

    /// Mid-prices in integer price units (may be half-integers).
    pub fn mids(&self) -> Vec<f64> {
        self.snapshots.iter().map(crate::forecaster::mid_price).collect()
    }

    pub fn spreads(&self) -> Vec<i64> {
        self.snapshots.iter().map(BookSnapshot::spread).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowError {
    ColumnCount { expected: usize, got: usize },
    NonNumeric { column: usize, value: String },
    NegativeVolume { column: usize },
    MissingLevel { level: usize },
    Crossed { ask: i64, bid: i64 },
    LevelOrder { level: usize },
    TimestampRegression,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowError::ColumnCount { expected, got } => {
                write!(f, "expected at least {expected} columns, got {got}")
            }
            RowError::NonNumeric { column, value } => {
                write!(f, "non-numeric field {value:?} in column {column}")
            }
            RowError::NegativeVolume { column } => write!(f, "negative volume in column {column}"),
            RowError::MissingLevel { level } => write!(f, "level {level} is unpopulated"),
            RowError::Crossed { ask, bid } => write!(f, "crossed book: ask {ask} <= bid {bid}"),
            RowError::LevelOrder { level } => write!(f, "price ordering violated at level {level}"),
            RowError::TimestampRegression => write!(f, "timestamp earlier than previous row"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowDiagnostic {
    /// 1-based line number in the orderbook file.
    pub line: usize,
    pub error: RowError,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub total_rows: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub padded: usize,
    pub diagnostics: Vec<RowDiagnostic>,
    pub warnings: Vec<String>,
}

impl LoadReport {
    pub fn rejected_fraction(&self) -> f64 {
        if self.total_rows == 0 {
            0.0
        } else {
            self.rejected as f64 / self.total_rows as f64
        }
    }

    fn reject(&mut self, line: usize, error: RowError) {
        self.rejected += 1;
        if self.diagnostics.len() < MAX_DIAGNOSTICS {
            self.diagnostics.push(RowDiagnostic { line, error });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    pub levels: usize,
    /// Fill unpopulated levels instead of rejecting the row.
    pub pad_missing: bool,
    /// Price step used when padding beyond the last populated level.
    pub pad_tick: i64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            pad_missing: false,
            pad_tick: 100,
        }
    }
}

/// One row of a LOBSTER message file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub time: f64,
    pub event_type: u8,
    pub order_id: u64,
    pub size: u64,
    pub price: i64,
    pub direction: i8,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Parses one message row (time, type, order id, size, price, direction).
pub fn parse_message_line(line: &str) -> Result<Message> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 6 {
        return Err(Error::InvalidInput(format!(
            "message row needs 6 columns, got {}: {line:?}",
            fields.len()
        )));
    }
    let bad = |i: usize| Error::InvalidInput(format!("message column {}: {:?}", i + 1, fields[i]));
    Ok(Message {
        time: fields[0].parse().map_err(|_| bad(0))?,
        event_type: fields[1].parse().map_err(|_| bad(1))?,
        order_id: fields[2].parse().map_err(|_| bad(2))?,
        size: fields[3].parse().map_err(|_| bad(3))?,
        price: fields[4].parse().map_err(|_| bad(4))?,
        direction: fields[5].parse().map_err(|_| bad(5))?,
    })
}

pub fn parse_messages_str(text: &str) -> Result<Vec<Message>> {
    data_lines(text)
        .map(|(n, l)| {
            parse_message_line(l).map_err(|e| Error::InvalidInput(format!("line {n}: {e}")))
        })
        .collect()
}

/// Reads a LOBSTER message file. An empty file yields no messages.
pub fn parse_message_file(path: impl AsRef<Path>) -> Result<Vec<Message>> {
    parse_messages_str(&read_to_string(path.as_ref())?)
}

fn parse_int<T: std::str::FromStr>(fields: &[&str], col: usize) -> std::result::Result<T, RowError> {
    let raw = fields[col];
    // LOBSTER sometimes writes integral columns with a trailing ".0".
    let trimmed = raw.strip_suffix(".0").unwrap_or(raw);
    trimmed.parse().map_err(|_| RowError::NonNumeric {
        column: col + 1,
        value: raw.to_string(),
    })
}

fn parse_volume(fields: &[&str], col: usize) -> std::result::Result<u64, RowError> {
    let v: i64 = parse_int(fields, col)?;
    u64::try_from(v).map_err(|_| RowError::NegativeVolume { column: col + 1 })
}

/// Parses one orderbook row into its levels. Rows with unpopulated levels are
/// rejected unless `opts.pad_missing` is set; the returned flag reports padding.
pub fn parse_orderbook_line(
    line: &str,
    opts: &LoadOptions,
) -> std::result::Result<(Vec<Level>, bool), RowError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let expected = 4 * opts.levels;
    if fields.len() < expected {
        return Err(RowError::ColumnCount {
            expected,
            got: fields.len(),
        });
    }

    let mut asks: Vec<Option<Quote>> = Vec::with_capacity(opts.levels);
    let mut bids: Vec<Option<Quote>> = Vec::with_capacity(opts.levels);
    for i in 0..opts.levels {
        let base = 4 * i;
        let ask_price: i64 = parse_int(&fields, base)?;
        let ask_volume = parse_volume(&fields, base + 1)?;
        let bid_price: i64 = parse_int(&fields, base + 2)?;
        let bid_volume = parse_volume(&fields, base + 3)?;
        asks.push((ask_price < EMPTY_ASK_PRICE).then_some(Quote {
            price: ask_price,
            volume: ask_volume,
        }));
        bids.push((bid_price > EMPTY_BID_PRICE).then_some(Quote {
            price: bid_price,
            volume: bid_volume,
        }));
    }

    let mut padded = false;
    for (side, sign) in [(&mut asks, 1i64), (&mut bids, -1i64)] {
        if let Some(missing) = side.iter().position(Option::is_none) {
            if !opts.pad_missing || missing == 0 {
                return Err(RowError::MissingLevel { level: missing + 1 });
            }
            if side[missing..].iter().any(Option::is_some) {
                return Err(RowError::LevelOrder { level: missing + 1 });
            }
            let mut last = side[missing - 1].expect("populated level");
            for slot in side[missing..].iter_mut() {
                last = Quote {
                    price: last.price + sign * opts.pad_tick,
                    volume: 0,
                };
                *slot = Some(last);
            }
            padded = true;
        }
    }

    let levels = asks
        .into_iter()
        .zip(bids)
        .map(|(a, b)| {
            let (a, b) = (a.expect("filled"), b.expect("filled"));
            Level {
                ask_price: a.price,
                ask_volume: a.volume,
                bid_price: b.price,
                bid_volume: b.volume,
            }
        })
        .collect();
    Ok((levels, padded))
}

/// Parses orderbook text, optionally aligning timestamps from messages.
///
/// When both inputs are present and their row counts differ, a warning is
/// recorded and both are truncated to the shorter length.
pub fn parse_orderbook_str(
    instrument: &str,
    orderbook: &str,
    messages: Option<&[Message]>,
    opts: &LoadOptions,
) -> Result<(EventStream, LoadReport)> {
    let mut rows: Vec<(usize, &str)> = data_lines(orderbook).collect();
    let mut report = LoadReport::default();
    let messages = messages.filter(|m| !m.is_empty());
    if let Some(msgs) = messages {
        if msgs.len() != rows.len() {
            let n = msgs.len().min(rows.len());
            let warning = format!(
                "orderbook has {} rows but message file has {}; truncating to {n}",
                rows.len(),
                msgs.len()
            );
            log::warn!("{warning}");
            report.warnings.push(warning);
            rows.truncate(n);
        }
    }
    report.total_rows = rows.len();

    let mut snapshots = Vec::with_capacity(rows.len());
    let mut last_time = f64::NEG_INFINITY;
    for (idx, (line_no, line)) in rows.into_iter().enumerate() {
        let (levels, padded) = match parse_orderbook_line(line, opts) {
            Ok(v) => v,
            Err(e) => {
                report.reject(line_no, e);
                continue;
            }
        };
        let timestamp = messages.map_or(0.0, |m| m[idx].time);
        let snapshot = BookSnapshot { timestamp, levels };
        if let Err(e) = snapshot.validate() {
            report.reject(line_no, e);
            continue;
        }
        if timestamp < last_time {
            report.reject(line_no, RowError::TimestampRegression);
            continue;
        }
        last_time = timestamp;
        if padded {
            report.padded += 1;
        }
        snapshots.push(snapshot);
    }
    report.accepted = snapshots.len();
    for d in &report.diagnostics {
        log::debug!("rejected line {}: {}", d.line, d.error);
    }
    let stream = EventStream::new(instrument, snapshots, StreamSource::File)?;
    Ok((stream, report))
}

/// Reads a LOBSTER orderbook file, with an optional message file for timestamps.
pub fn parse_orderbook_file(
    instrument: &str,
    orderbook: impl AsRef<Path>,
    messages: Option<&Path>,
    opts: &LoadOptions,
) -> Result<(EventStream, LoadReport)> {
    let text = read_to_string(orderbook.as_ref())?;
    let msgs = messages.map(parse_message_file).transpose()?;
    parse_orderbook_str(instrument, &text, msgs.as_deref(), opts)
}

/// Serializes snapshots in LOBSTER orderbook layout.
pub fn write_orderbook<W: Write>(stream: &EventStream, mut out: W) -> io::Result<()> {
    for s in &stream.snapshots {
        let mut first = true;
        for l in &s.levels {
            for v in [
                l.ask_price,
                l.ask_volume as i64,
                l.bid_price,
                l.bid_volume as i64,
            ] {
                if !first {
                    out.write_all(b",")?;
                }
                first = false;
                write!(out, "{v}")?;
            }
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Trend,
    MeanRevert,
    RandomWalk,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trend" => Ok(Regime::Trend),
            "mean-revert" => Ok(Regime::MeanRevert),
            "random-walk" => Ok(Regime::RandomWalk),
            other => Err(Error::InvalidInput(format!("unknown regime {other:?}"))),
        }
    }
}

/// Parameters of the synthetic book generator.
///
/// The book is a latent mid in ticks plus cumulative tick offsets per level,
/// with log-normal volumes. Good enough as a test fixture, not as a
/// microstructure model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub n_events: usize,
    pub seed: u64,
    pub regime: Regime,
    /// Tick size in price units.
    pub tick: i64,
    pub base_price: i64,
    pub levels: usize,
    /// Mean latent move per event (ticks) in the trend regime.
    pub drift_ticks: f64,
    /// Standard deviation of the latent move per event (ticks).
    pub volatility_ticks: f64,
    /// Pull toward the base price per event in the mean-revert regime.
    pub reversion: f64,
    /// Log-space mean and std of level volumes.
    pub volume_log_mean: f64,
    pub volume_log_std: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_events: 10_000,
            seed: 7,
            regime: Regime::Trend,
            tick: 100,
            base_price: 5_000_000,
            levels: DEFAULT_LEVELS,
            drift_ticks: 0.1,
            volatility_ticks: 0.5,
            reversion: 0.05,
            volume_log_mean: 4.0,
            volume_log_std: 0.8,
        }
    }
}

pub fn generate_synthetic_stream(params: &SyntheticParams) -> Result<EventStream> {
    if params.n_events < 2 {
        return Err(Error::StreamTooShort {
            len: params.n_events,
            needed: 2,
        });
    }
    if params.tick <= 0 || params.levels == 0 {
        return Err(Error::InvalidInput("tick and levels must be positive".into()));
    }
    if !(params.volatility_ticks >= 0.0 && params.volume_log_std >= 0.0) {
        return Err(Error::InvalidInput("volatilities must be non-negative".into()));
    }
    let mut rng = crate::rng_from_seed(params.seed);
    let volumes = LogNormal::new(params.volume_log_mean, params.volume_log_std)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let base_ticks = (params.base_price / params.tick) as f64;
    let mut latent = base_ticks;
    let mut snapshots = Vec::with_capacity(params.n_events);

    for i in 0..params.n_events {
        if i > 0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let shock = params.volatility_ticks * z;
            latent += match params.regime {
                Regime::Trend => params.drift_ticks + shock,
                Regime::MeanRevert => -params.reversion * (latent - base_ticks) + shock,
                Regime::RandomWalk => shock,
            };
        }
        let spread_ticks: i64 = match rng.random_range(0..10) {
            0..=5 => 1,
            6..=8 => 2,
            _ => 3,
        };
        let bid_ticks = (latent - spread_ticks as f64 / 2.0).round() as i64;
        let mut ask = (bid_ticks + spread_ticks) * params.tick;
        let mut bid = bid_ticks * params.tick;
        let mut levels = Vec::with_capacity(params.levels);
        for lvl in 0..params.levels {
            if lvl > 0 {
                ask += params.tick * rng.random_range(1..=2);
                bid -= params.tick * rng.random_range(1..=2);
            }
            let mut draw = || (volumes.sample(&mut rng).round() as u64).max(1);
            let ask_volume = draw();
            let bid_volume = draw();
            levels.push(Level {
                ask_price: ask,
                ask_volume,
                bid_price: bid,
                bid_volume,
            });
        }
        snapshots.push(BookSnapshot {
            timestamp: 34_200.0 + i as f64 * 0.01,
            levels,
        });
    }
    EventStream::new("SYNTH", snapshots, StreamSource::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn level_row(levels: &[(i64, u64, i64, u64)]) -> String {
        levels
            .iter()
            .map(|(a, av, b, bv)| format!("{a},{av},{b},{bv}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    fn ten_levels(best_ask: i64, best_bid: i64) -> String {
        let lv: Vec<_> = (0..10)
            .map(|i| (best_ask + 100 * i, 100 + i as u64, best_bid - 100 * i, 50 + i as u64))
            .collect();
        level_row(&lv)
    }

    #[test]
    fn direct_column_mapping() {
        let mut lv = vec![(1_000_001, 100, 999_999, 50), (1_000_101, 80, 999_899, 60)];
        for i in 2..10 {
            lv.push((1_000_101 + 100 * (i - 1), 10, 999_899 - 100 * (i - 1), 10));
        }
        let row = level_row(&lv).replace(",", ", ");
        let (stream_row, padded) = parse_orderbook_line(&row, &LoadOptions::default()).unwrap();
        assert!(!padded);
        assert_eq!(stream_row[0].ask_price, 1_000_001);
        assert_eq!(stream_row[0].ask_volume, 100);
        assert_eq!(stream_row[0].bid_price, 999_999);
        assert_eq!(stream_row[0].bid_volume, 50);
        assert_eq!(stream_row[1].ask_price, 1_000_101);
    }

    #[test]
    fn empty_file_is_no_events() {
        let err = parse_orderbook_str("X", "", None, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoEvents));
        assert_eq!(err.to_string(), "no events");
    }

    #[test]
    fn bad_rows_are_rejected_and_counted() {
        let good = ten_levels(1_000_100, 999_900);
        let crossed = ten_levels(999_900, 999_900);
        let text_field = good.replacen("1000100", "abc", 1);
        let text = format!("{good}\n{crossed}\n{text_field}\n{good}\n1,2,3\n");
        let (stream, report) =
            parse_orderbook_str("X", &text, None, &LoadOptions::default()).unwrap();
        assert_eq!(stream.len(), 2);
        assert_eq!(report.total_rows, 5);
        assert_eq!(report.rejected, 3);
        assert!(matches!(report.diagnostics[0].error, RowError::Crossed { .. }));
        assert!(matches!(report.diagnostics[1].error, RowError::NonNumeric { .. }));
        assert!(matches!(report.diagnostics[2].error, RowError::ColumnCount { .. }));
        assert_eq!(report.diagnostics[0].line, 2);
    }

    #[test]
    fn unpopulated_levels_rejected_or_padded() {
        let mut lv: Vec<_> = (0..8)
            .map(|i| (1_000_100 + 100 * i, 10u64, 999_900 - 100 * i, 10u64))
            .collect();
        lv.push((EMPTY_ASK_PRICE, 0, 999_000, 10));
        lv.push((EMPTY_ASK_PRICE, 0, 998_900, 10));
        let row = level_row(&lv);
        let err = parse_orderbook_line(&row, &LoadOptions::default()).unwrap_err();
        assert_eq!(err, RowError::MissingLevel { level: 9 });

        let opts = LoadOptions {
            pad_missing: true,
            ..LoadOptions::default()
        };
        let (levels, padded) = parse_orderbook_line(&row, &opts).unwrap();
        assert!(padded);
        assert_eq!(levels[8].ask_price, 1_000_900);
        assert_eq!(levels[9].ask_price, 1_001_000);
        assert_eq!(levels[9].ask_volume, 0);
        let snap = BookSnapshot {
            timestamp: 0.0,
            levels,
        };
        snap.validate().unwrap();
    }

    #[test]
    fn message_column_mapping() {
        let m = parse_message_line("34200.1,1,12345,100,1000001,1").unwrap();
        assert_eq!(
            m,
            Message {
                time: 34200.1,
                event_type: 1,
                order_id: 12345,
                size: 100,
                price: 1_000_001,
                direction: 1
            }
        );
    }

    #[test]
    fn mismatched_message_count_truncates() {
        let rows: Vec<String> = (0..100).map(|_| ten_levels(1_000_100, 999_900)).collect();
        let msgs: Vec<Message> = (0..99)
            .map(|i| Message {
                time: 34_200.0 + i as f64,
                event_type: 1,
                order_id: i,
                size: 1,
                price: 1_000_100,
                direction: 1,
            })
            .collect();
        let (stream, report) =
            parse_orderbook_str("X", &rows.join("\n"), Some(&msgs), &LoadOptions::default())
                .unwrap();
        assert_eq!(stream.len(), 99);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(stream.snapshots[5].timestamp, 34_205.0);
    }

    #[test]
    fn empty_message_file_is_ignored() {
        let rows: Vec<String> = (0..3).map(|_| ten_levels(1_000_100, 999_900)).collect();
        let msgs = parse_messages_str("").unwrap();
        let (stream, report) =
            parse_orderbook_str("X", &rows.join("\n"), Some(&msgs), &LoadOptions::default())
                .unwrap();
        assert_eq!(stream.len(), 3);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let p = SyntheticParams {
            n_events: 1000,
            seed: 7,
            ..SyntheticParams::default()
        };
        assert_eq!(
            generate_synthetic_stream(&p).unwrap(),
            generate_synthetic_stream(&p).unwrap()
        );
    }

    #[test]
    fn synthetic_minimum_length() {
        let p = SyntheticParams {
            n_events: 1,
            ..SyntheticParams::default()
        };
        assert!(generate_synthetic_stream(&p).is_err());
        let p = SyntheticParams {
            n_events: 2,
            ..SyntheticParams::default()
        };
        assert_eq!(generate_synthetic_stream(&p).unwrap().len(), 2);
    }

    fn ols_slope(ys: &[f64]) -> f64 {
        let n = ys.len() as f64;
        let mx = (n - 1.0) / 2.0;
        let my = ys.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in ys.iter().enumerate() {
            let dx = i as f64 - mx;
            sxy += dx * (y - my);
            sxx += dx * dx;
        }
        sxy / sxx
    }

    #[test]
    fn trend_regime_has_positive_slope() {
        for seed in 0..5 {
            let p = SyntheticParams {
                n_events: 1000,
                seed,
                regime: Regime::Trend,
                ..SyntheticParams::default()
            };
            let mids = generate_synthetic_stream(&p).unwrap().mids();
            assert!(ols_slope(&mids) > 0.0, "seed {seed}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn synthetic_streams_are_valid_and_round_trip(
            seed in any::<u64>(),
            n in 2usize..300,
            regime in prop_oneof![Just(Regime::Trend), Just(Regime::MeanRevert), Just(Regime::RandomWalk)],
        ) {
            let p = SyntheticParams { n_events: n, seed, regime, ..SyntheticParams::default() };
            let stream = generate_synthetic_stream(&p).unwrap();
            prop_assert_eq!(stream.len(), n);
            for s in &stream.snapshots {
                prop_assert!(s.validate().is_ok());
                prop_assert!(s.spread() >= p.tick);
                prop_assert_eq!(s.levels.len(), DEFAULT_LEVELS);
            }
            let mut buf = Vec::new();
            write_orderbook(&stream, &mut buf).unwrap();
            let text = String::from_utf8(buf).unwrap();
            let (reparsed, report) =
                parse_orderbook_str("SYNTH", &text, None, &LoadOptions::default()).unwrap();
            prop_assert_eq!(report.rejected, 0);
            for (a, b) in stream.snapshots.iter().zip(&reparsed.snapshots) {
                prop_assert_eq!(&a.levels, &b.levels);
            }
        }
    }
}
