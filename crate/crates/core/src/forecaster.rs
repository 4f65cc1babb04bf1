//! Multi-horizon return targets and the frozen OFI → return forecaster.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{BookSnapshot, EventStream};
use crate::nn::{Activation, AdamConfig, AdamState, Checkpoint, DenseNet, Gradients};
use crate::ofi::{ofi_series, OfiVector};

/// Arithmetic mean of best ask and best bid, in integer price units.
pub fn mid_price(s: &BookSnapshot) -> f64 {
    let best = s.best();
    (best.ask_price as f64 + best.bid_price as f64) / 2.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct HorizonSet {
    horizons: Vec<usize>,
}

impl HorizonSet {
    pub fn new(horizons: Vec<usize>) -> Result<Self> {
        if horizons.is_empty() {
            return Err(Error::InvalidInput("horizon set is empty".into()));
        }
        if horizons[0] < 1 || horizons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "horizons must be strictly increasing and >= 1: {horizons:?}"
            )));
        }
        Ok(Self { horizons })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.horizons
    }

    pub fn len(&self) -> usize {
        self.horizons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.horizons.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.horizons.last().expect("non-empty")
    }
}

impl Default for HorizonSet {
    /// Six event-step horizons.
    fn default() -> Self {
        Self {
            horizons: vec![1, 2, 5, 10, 20, 50],
        }
    }
}

impl TryFrom<Vec<usize>> for HorizonSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<HorizonSet> for Vec<usize> {
    fn from(h: HorizonSet) -> Self {
        h.horizons
    }
}

/// Contiguous chronological train/validation/test row ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
        }
    }
}

impl Split {
    pub fn chronological(n: usize, fractions: SplitFractions) -> Result<Self> {
        let SplitFractions { train, val } = fractions;
        if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "invalid split fractions train={train} val={val}"
            )));
        }
        // The epsilon keeps 0.8 * 1000 from landing on 799.999...
        let cut = |f: f64| (((n as f64) * f + 1e-9).floor() as usize).min(n);
        let train_end = cut(train);
        let val_end = cut(train + val).max(train_end);
        Ok(Self {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedDataset {
    /// One OFI row per sample.
    pub features: Vec<Vec<f64>>,
    /// One row of `H` returns per sample.
    pub targets: Vec<Vec<f64>>,
    /// Event index each row is anchored at.
    pub anchors: Vec<usize>,
    pub horizons: HorizonSet,
    pub normalized: bool,
    pub split: Split,
}

impl SupervisedDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Builds `(x_t, y_t)` rows for every event with an OFI vector and full lookahead.
///
/// Row `r` is anchored at event `t = r + 1`; its targets are
/// `(m_{t+h} − m_t)/m_t` per horizon. The last `max(horizons)` events have no
/// complete target and are dropped.
pub fn build_targets(
    stream: &EventStream,
    horizons: &HorizonSet,
    normalize: bool,
    fractions: SplitFractions,
) -> Result<SupervisedDataset> {
    let n = stream.len();
    let max_h = horizons.max();
    if n <= max_h + 1 {
        return Err(Error::StreamTooShort {
            len: n,
            needed: max_h + 2,
        });
    }
    let mids = stream.mids();
    let ofis = ofi_series(stream, normalize);
    let rows = n - 1 - max_h;
    let mut features = Vec::with_capacity(rows);
    let mut targets = Vec::with_capacity(rows);
    let mut anchors = Vec::with_capacity(rows);
    for t in 1..=rows {
        let m = mids[t];
        features.push(ofis[t - 1].values.clone());
        targets.push(
            horizons
                .as_slice()
                .iter()
                .map(|h| (mids[t + h] - m) / m)
                .collect(),
        );
        anchors.push(t);
    }
    Ok(SupervisedDataset {
        features,
        targets,
        anchors,
        horizons: horizons.clone(),
        normalized: normalize,
        split: Split::chronological(rows, fractions)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecasterConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Fit the network to targets divided by their train-split RMS.
    /// Predictions are always returned in raw return units.
    pub scale_targets: bool,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64; 4],
            activation: Activation::Relu,
            adam: AdamConfig::default(),
            max_epochs: 100,
            patience: 10,
            batch_size: 256,
            shuffle: true,
            seed: 0,
            scale_targets: true,
        }
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// This epoch is the new best; keep its weights.
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if val_loss >= best => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    /// Hash of the row indices that contributed gradients.
    pub gradient_rows_fingerprint: u64,
    pub test_mse: Option<f64>,
}

impl TrainingReport {
    /// Loss curve as CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.val_mse));
        }
        s
    }
}

/// Hash of a row-index set, order-independent.
pub fn index_set_fingerprint(rows: impl IntoIterator<Item = usize>) -> u64 {
    let mut rows: Vec<usize> = rows.into_iter().collect();
    rows.sort_unstable();
    rows.dedup();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for r in rows {
        for b in (r as u64).to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Summed-over-horizons squared error of `scale · net(x)`, averaged over rows.
pub fn mse(net: &DenseNet, scale: f64, data: &SupervisedDataset, rows: Range<usize>) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let n = rows.len() as f64;
    let mut total = 0.0;
    for r in rows {
        let y_hat = net.forward(&data.features[r])?;
        total += y_hat
            .iter()
            .zip(&data.targets[r])
            .map(|(p, y)| (scale * p - y) * (scale * p - y))
            .sum::<f64>();
    }
    Ok(total / n)
}

/// H-output network mapping an OFI vector to predicted returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub net: DenseNet,
    pub horizons: HorizonSet,
    pub normalize: bool,
    /// Network outputs are multiplied by this to give returns.
    pub target_scale: f64,
    frozen: bool,
}

impl Forecaster {
    pub fn new(net: DenseNet, horizons: HorizonSet, normalize: bool) -> Result<Self> {
        if net.output_dim() != horizons.len() {
            return Err(Error::DimensionMismatch {
                expected: horizons.len(),
                got: net.output_dim(),
            });
        }
        Ok(Self {
            net,
            horizons,
            normalize,
            target_scale: 1.0,
            frozen: false,
        })
    }

    pub fn with_target_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidInput(format!("target scale must be positive, got {scale}")));
        }
        self.target_scale = scale;
        Ok(self)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn predict_alpha(&self, x: &OfiVector) -> Result<Vec<f64>> {
        if !self.frozen {
            return Err(Error::NotFrozen);
        }
        if x.normalized != self.normalize {
            return Err(Error::InvalidInput(format!(
                "forecaster expects normalized={} features",
                self.normalize
            )));
        }
        let mut y = self.net.forward(&x.values)?;
        y.iter_mut().for_each(|v| *v *= self.target_scale);
        Ok(y)
    }

    /// Forecasts for every event of `stream`; index 0 (no OFI) is `None`.
    pub fn predict_stream(&self, stream: &EventStream) -> Result<Vec<Option<Vec<f64>>>> {
        let mut out = Vec::with_capacity(stream.len());
        out.push(None);
        for v in ofi_series(stream, self.normalize) {
            out.push(Some(self.predict_alpha(&v)?));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, config_fingerprint: &str) -> Checkpoint {
        let mut ck = Checkpoint::from_net(&self.net, config_fingerprint);
        let horizons = self
            .horizons
            .as_slice()
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        ck.metadata.insert("horizons".into(), horizons);
        ck.metadata.insert("normalize".into(), self.normalize.to_string());
        ck.metadata.insert("frozen".into(), self.frozen.to_string());
        ck.metadata.insert("target_scale".into(), self.target_scale.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let net = ck.to_net()?;
        let get = |k: &str| {
            ck.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {k:?}")))
        };
        let horizons = get("horizons")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let normalize = get("normalize")? == "true";
        let scale = get("target_scale")?
            .parse::<f64>()
            .map_err(|e| Error::Checkpoint(format!("target_scale: {e}")))?;
        let mut f = Self::new(net, HorizonSet::new(horizons)?, normalize)?.with_target_scale(scale)?;
        f.frozen = get("frozen")? == "true";
        Ok(f)
    }
}

/// Root mean square, falling back to 1 for all-zero or empty input.
fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v * v;
        n += 1;
    }
    let r = (sum / n.max(1) as f64).sqrt();
    if r.is_finite() && r > 0.0 {
        r
    } else {
        1.0
    }
}

/// Trains by mini-batch Adam on the train rows, early-stopping on validation
/// MSE, and returns the frozen arg-min checkpoint.
pub fn train_forecaster(
    data: &SupervisedDataset,
    cfg: &ForecasterConfig,
) -> Result<(Forecaster, TrainingReport)> {
    let split = &data.split;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InvalidInput(
            "forecaster needs non-empty train and validation splits".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::InvalidInput("batch_size and max_epochs must be >= 1".into()));
    }
    let input = data.features[0].len();
    let mut dims = vec![input];
    dims.extend(&cfg.hidden);
    dims.push(data.horizons.len());

    let target_scale = if cfg.scale_targets {
        rms(split.train.clone().flat_map(|r| data.targets[r].iter().copied()))
    } else {
        1.0
    };
    let inv = 1.0 / target_scale;

    let mut rng = crate::rng_from_seed(cfg.seed);
    let mut net = DenseNet::new(&dims, cfg.activation, &mut rng)?;
    let mut adam = AdamState::new(cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut best_net = net.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = split.train.clone().collect();
    let mut touched: Vec<bool> = vec![false; data.len()];

    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Gradients::zeros_like(&net);
            let mut batch_loss = 0.0;
            for &r in batch {
                touched[r] = true;
                let trace = net.forward_trace(&data.features[r])?;
                let upstream: Vec<f64> = trace
                    .output()
                    .iter()
                    .zip(&data.targets[r])
                    .map(|(p, y)| {
                        let e = p - y * inv;
                        batch_loss += e * e;
                        2.0 * e * scale
                    })
                    .collect();
                net.accumulate_backward(&trace, &upstream, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            epoch_loss += batch_loss;
            adam.step_net(&mut net, &grads)?;
        }
        let train_mse = target_scale * target_scale * epoch_loss / order.len() as f64;
        let val_mse = mse(&net, target_scale, data, split.val.clone())?;
        if !val_mse.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {train_mse:.3e} val {val_mse:.3e}");
        epochs.push(EpochLoss {
            epoch,
            train_mse,
            val_mse,
        });
        match stopper.observe(epoch, val_mse) {
            StopDecision::Improved => best_net = net.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_mse) = stopper.best().expect("at least one epoch");
    let test_mse = if split.test.is_empty() {
        None
    } else {
        Some(mse(&best_net, target_scale, data, split.test.clone())?)
    };
    let report = TrainingReport {
        epochs,
        best_epoch,
        best_val_mse,
        stopped_early,
        gradient_rows_fingerprint: index_set_fingerprint(
            touched.iter().enumerate().filter(|(_, t)| **t).map(|(i, _)| i),
        ),
        test_mse,
    };
    let forecaster = Forecaster::new(best_net, data.horizons.clone(), data.normalized)?
        .with_target_scale(target_scale)?
        .freeze();
    Ok((forecaster, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{generate_synthetic_stream, Level, Regime, StreamSource, SyntheticParams};

    fn snapshot(ask: i64, bid: i64) -> BookSnapshot {
        BookSnapshot {
            timestamp: 0.0,
            levels: (0..10)
                .map(|i| Level {
                    ask_price: ask + 100 * i,
                    ask_volume: 10,
                    bid_price: bid - 100 * i,
                    bid_volume: 10,
                })
                .collect(),
        }
    }

    #[test]
    fn mid_price_examples() {
        assert_eq!(mid_price(&snapshot(1_000_100, 999_900)), 1_000_000.0);
        assert_eq!(mid_price(&snapshot(5_000_100, 4_999_900)), 5_000_000.0);
        let s = snapshot(1_234_567, 1_234_000);
        assert_eq!(mid_price(&s), (1_234_567.0 + 1_234_000.0) / 2.0);
    }

    #[test]
    fn horizon_validation() {
        assert!(HorizonSet::new(vec![]).is_err());
        assert!(HorizonSet::new(vec![0, 1]).is_err());
        assert!(HorizonSet::new(vec![2, 2]).is_err());
        assert_eq!(HorizonSet::default().len(), 6);
    }

    #[test]
    fn split_boundaries() {
        let s = Split::chronological(1000, SplitFractions::default()).unwrap();
        assert_eq!(s.train, 0..800);
        assert_eq!(s.val, 800..900);
        assert_eq!(s.test, 900..1000);
    }

    fn stream_from_mids(mids: &[i64]) -> EventStream {
        let snaps = mids.iter().map(|m| snapshot(m + 100, m - 100)).collect();
        EventStream::new("T", snaps, StreamSource::Synthetic).unwrap()
    }

    #[test]
    fn target_formula() {
        let stream = stream_from_mids(&[1_000_000, 1_000_000, 1_010_000, 1_010_000]);
        let h = HorizonSet::new(vec![1]).unwrap();
        let d = build_targets(&stream, &h, true, SplitFractions::default()).unwrap();
        assert_eq!(d.anchors, vec![1, 2]);
        assert!((d.targets[0][0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn constant_mid_gives_zero_targets() {
        let stream = stream_from_mids(&[2_000_000; 30]);
        let d = build_targets(&stream, &HorizonSet::new(vec![1, 5]).unwrap(), true, SplitFractions::default())
            .unwrap();
        assert!(d.targets.iter().flatten().all(|y| *y == 0.0));
    }

    #[test]
    fn usable_row_count() {
        let stream = stream_from_mids(&vec![1_000_000; 100]);
        let h = HorizonSet::new(vec![1, 20]).unwrap();
        let d = build_targets(&stream, &h, true, SplitFractions::default()).unwrap();
        // Enumerate anchors with an OFI vector (t >= 1) and full lookahead.
        let expected = (0..100).filter(|t| *t >= 1 && t + 20 <= 99).count();
        assert_eq!(expected, 79);
        assert_eq!(d.len(), expected);
        assert!(build_targets(
            &stream_from_mids(&[1_000_000; 21]),
            &h,
            true,
            SplitFractions::default()
        )
        .is_err());
    }

    #[test]
    fn drifting_mid_gives_signed_targets() {
        for (drift, sign) in [(100i64, 1.0), (-100, -1.0)] {
            let mids: Vec<i64> = (0..200).map(|i| 5_000_000 + drift * i).collect();
            let d = build_targets(&stream_from_mids(&mids), &HorizonSet::default(), true, SplitFractions::default())
                .unwrap();
            assert!(d.targets.iter().flatten().all(|y| y.signum() == sign));
        }
    }

    #[test]
    fn no_lookahead_in_features() {
        let p = SyntheticParams {
            n_events: 300,
            seed: 3,
            ..SyntheticParams::default()
        };
        let stream = generate_synthetic_stream(&p).unwrap();
        let d = build_targets(&stream, &HorizonSet::default(), true, SplitFractions::default()).unwrap();
        // Truncating the future must not change feature row t.
        let mut short = stream.clone();
        short.snapshots.truncate(d.anchors[40] + 1);
        let ofis = ofi_series(&short, true);
        assert_eq!(ofis[d.anchors[40] - 1].values, d.features[40]);
    }

    #[test]
    fn early_stopping_contract() {
        let losses = [5.0, 4.0, 3.0, 3.5, 3.6, 3.7, 3.8, 3.9, 4.0, 4.1];
        let mut es = EarlyStopping::new(5);
        let mut stopped_at = None;
        for (i, l) in losses.iter().enumerate() {
            if es.observe(i + 1, *l) == StopDecision::Stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(8));
        assert_eq!(es.best(), Some((3, 3.0)));
    }

    fn linear_dataset(n: usize, seed: u64) -> SupervisedDataset {
        use rand::Rng as _;
        let mut rng = crate::rng_from_seed(seed);
        let w: Vec<[f64; 2]> = (0..10).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = (0..2).map(|h| (0..10).map(|i| w[i][h] * x[i]).sum()).collect();
            features.push(x);
            targets.push(y);
        }
        SupervisedDataset {
            features,
            targets,
            anchors: (1..=n).collect(),
            horizons: HorizonSet::new(vec![1, 2]).unwrap(),
            normalized: true,
            split: Split::chronological(n, SplitFractions::default()).unwrap(),
        }
    }

    #[test]
    fn fits_linear_targets() {
        let data = linear_dataset(2000, 1);
        let variance: f64 = {
            let rows = &data.targets[data.split.val.clone()];
            (0..2)
                .map(|h| {
                    let m = rows.iter().map(|r| r[h]).sum::<f64>() / rows.len() as f64;
                    rows.iter().map(|r| (r[h] - m).powi(2)).sum::<f64>() / rows.len() as f64
                })
                .sum()
        };
        let cfg = ForecasterConfig {
            hidden: vec![16, 16],
            max_epochs: 100,
            patience: 10,
            batch_size: 64,
            ..ForecasterConfig::default()
        };
        let (f, report) = train_forecaster(&data, &cfg).unwrap();
        assert!(f.is_frozen());
        assert!(report.best_val_mse < 0.1 * variance, "{} vs {}", report.best_val_mse, variance);
        assert_eq!(
            report.gradient_rows_fingerprint,
            index_set_fingerprint(data.split.train.clone())
        );
    }

    #[test]
    fn zero_targets_learned_quickly() {
        let mut data = linear_dataset(500, 2);
        data.targets.iter_mut().flatten().for_each(|y| *y = 0.0);
        let cfg = ForecasterConfig {
            hidden: vec![8],
            max_epochs: 10,
            batch_size: 8,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            ..ForecasterConfig::default()
        };
        let (_, report) = train_forecaster(&data, &cfg).unwrap();
        assert!(report.best_val_mse < 1e-3, "{}", report.best_val_mse);
    }

    #[test]
    fn return_scale_targets_fit_after_scaling() {
        let mut data = linear_dataset(2000, 4);
        data.targets.iter_mut().flatten().for_each(|y| *y *= 1e-4);
        let rows = &data.targets[data.split.val.clone()];
        let mean_sq: f64 = rows.iter().flatten().map(|y| y * y).sum::<f64>() / rows.len() as f64;
        let cfg = ForecasterConfig {
            hidden: vec![16, 16],
            max_epochs: 100,
            batch_size: 64,
            ..ForecasterConfig::default()
        };
        let (f, report) = train_forecaster(&data, &cfg).unwrap();
        assert!(f.target_scale > 1e-6 && f.target_scale < 1e-3);
        assert!(report.best_val_mse < 0.1 * mean_sq, "{} vs {}", report.best_val_mse, mean_sq);
        let (_, unscaled) = train_forecaster(&data, &ForecasterConfig { scale_targets: false, ..cfg }).unwrap();
        assert!(report.best_val_mse < unscaled.best_val_mse);
    }

    #[test]
    fn returns_best_not_last_checkpoint() {
        let data = linear_dataset(400, 4);
        let cfg = ForecasterConfig {
            hidden: vec![8],
            max_epochs: 15,
            patience: 100,
            batch_size: 16,
            adam: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            ..ForecasterConfig::default()
        };
        let (f, report) = train_forecaster(&data, &cfg).unwrap();
        let val = mse(&f.net, f.target_scale, &data, data.split.val.clone()).unwrap();
        assert_eq!(val, report.best_val_mse);
        let min = report.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(min, report.best_val_mse);
    }

    #[test]
    fn held_out_rows_do_not_affect_gradients() {
        let data = linear_dataset(400, 5);
        let cfg = ForecasterConfig {
            hidden: vec![8],
            max_epochs: 5,
            patience: 100,
            batch_size: 32,
            ..ForecasterConfig::default()
        };
        let mut perturbed = data.clone();
        for r in perturbed.split.val.start..perturbed.len() {
            perturbed.targets[r].iter_mut().for_each(|y| *y += 10.0);
            perturbed.features[r].iter_mut().for_each(|x| *x = -*x);
        }
        let (_, a) = train_forecaster(&data, &cfg).unwrap();
        let (_, b) = train_forecaster(&perturbed, &cfg).unwrap();
        let ta: Vec<f64> = a.epochs.iter().map(|e| e.train_mse).collect();
        let tb: Vec<f64> = b.epochs.iter().map(|e| e.train_mse).collect();
        assert_eq!(ta, tb);
        assert_eq!(a.gradient_rows_fingerprint, b.gradient_rows_fingerprint);
    }

    #[test]
    fn predict_requires_frozen_and_delegates() {
        let mut rng = crate::rng_from_seed(9);
        let net = DenseNet::new(&[10, 4, 6], Activation::Relu, &mut rng).unwrap();
        let f = Forecaster::new(net.clone(), HorizonSet::default(), true).unwrap();
        let x = OfiVector {
            values: (0..10).map(|i| i as f64 / 10.0).collect(),
            normalized: true,
        };
        assert!(matches!(f.predict_alpha(&x), Err(Error::NotFrozen)));
        let f = f.freeze();
        let a = f.predict_alpha(&x).unwrap();
        assert_eq!(a, f.predict_alpha(&x).unwrap());
        assert_eq!(a, net.forward(&x.values).unwrap());

        let zero = Forecaster::new(
            DenseNet::zeros(&[10, 4, 6], Activation::Relu).unwrap(),
            HorizonSet::default(),
            true,
        )
        .unwrap()
        .freeze();
        assert_eq!(zero.predict_alpha(&x).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn checkpoint_preserves_forecaster() {
        let p = SyntheticParams {
            n_events: 50,
            regime: Regime::RandomWalk,
            ..SyntheticParams::default()
        };
        let stream = generate_synthetic_stream(&p).unwrap();
        let mut rng = crate::rng_from_seed(1);
        let net = DenseNet::new(&[10, 4, 2], Activation::Relu, &mut rng).unwrap();
        let f = Forecaster::new(net, HorizonSet::new(vec![1, 3]).unwrap(), false)
            .unwrap()
            .with_target_scale(3.7e-5)
            .unwrap()
            .freeze();
        let back = Forecaster::from_checkpoint(&f.to_checkpoint("fp")).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.predict_stream(&stream).unwrap(), f.predict_stream(&stream).unwrap());
    }
}
