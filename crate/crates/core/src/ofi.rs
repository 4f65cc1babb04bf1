//! Per-level order-flow imbalance between consecutive book snapshots.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::market_data::{BookSnapshot, EventStream, Quote};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfiVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl OfiVector {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Ask-side flow at one level: new volume when the ask improves (moves down),
/// volume change when unchanged, removed volume when it retreats.
pub fn ask_order_flow(prev: Quote, cur: Quote) -> f64 {
    use std::cmp::Ordering::*;
    match cur.price.cmp(&prev.price) {
        Less => cur.volume as f64,
        Equal => cur.volume as f64 - prev.volume as f64,
        Greater => -(prev.volume as f64),
    }
}

/// Bid-side flow at one level; the price comparisons mirror the ask side.
pub fn bid_order_flow(prev: Quote, cur: Quote) -> f64 {
    use std::cmp::Ordering::*;
    match cur.price.cmp(&prev.price) {
        Greater => cur.volume as f64,
        Equal => cur.volume as f64 - prev.volume as f64,
        Less => -(prev.volume as f64),
    }
}

/// Bid minus ask flow per level, compared positionally (level i against level i).
pub fn ofi(prev: &BookSnapshot, cur: &BookSnapshot) -> OfiVector {
    let values = prev
        .levels
        .iter()
        .zip(&cur.levels)
        .map(|(p, c)| bid_order_flow(p.bid(), c.bid()) - ask_order_flow(p.ask(), c.ask()))
        .collect();
    OfiVector {
        values,
        normalized: false,
    }
}

/// Divides by `max(1, ‖v‖∞)`, so vectors already inside the unit box pass unchanged.
pub fn normalize_max_abs(v: &OfiVector) -> OfiVector {
    let scale = v.max_abs().max(1.0);
    OfiVector {
        values: v.values.iter().map(|x| x / scale).collect(),
        normalized: true,
    }
}

/// OFI for every consecutive pair; element `j` is anchored at snapshot `j + 1`.
pub fn ofi_series(stream: &EventStream, normalize: bool) -> Vec<OfiVector> {
    stream
        .snapshots
        .windows(2)
        .map(|w| {
            let v = ofi(&w[0], &w[1]);
            if normalize {
                normalize_max_abs(&v)
            } else {
                v
            }
        })
        .collect()
}

/// Writes one vector per row, comma-separated, no header.
pub fn write_feature_matrix<W: Write>(rows: &[OfiVector], mut out: W) -> io::Result<()> {
    for row in rows {
        let line = row
            .values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{line}")?;
    }
    Ok(())
}
