//! Market panels: OHLCV ingestion, features, labels and chronological splits.

mod cache;
pub mod features;
mod ingest;
mod synth;

pub use cache::{read_panel, write_panel};
pub use ingest::{ingest_csv, ingest_reader, IngestReport};
pub use synth::{synth_market, Regime, Segment, SynthSpec};

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Feature channels, in storage order.
pub const FEATURE_NAMES: [&str; 8] = [
    "z_open",
    "z_high",
    "z_low",
    "z_close",
    "z_volume",
    "ma5_ratio",
    "ma10_ratio",
    "ma20_ratio",
];
pub const NUM_FEATURES: usize = 8;
pub const MA5_CHANNEL: usize = 5;
pub const ZSCORE_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

/// Features, labels and next-day returns for `S` stocks over `T_total` days.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketPanel {
    pub symbols: Vec<String>,
    /// ISO `YYYY-MM-DD`, strictly increasing.
    pub dates: Vec<String>,
    /// `[S, T_total, 8]`; rows before the first full z-score window are 0.
    pub features: Tensor,
    /// `[S, T_total]` `horizon_q`-day forward return, NaN where invalid.
    pub labels: Tensor,
    /// `[S, T_total]` one-day forward return, NaN where invalid.
    pub next_day_returns: Tensor,
    /// `[S, T_total, 5]` zero-variance flags of the z-scored channels.
    pub degenerate: Vec<bool>,
    pub horizon_q: usize,
}

impl MarketPanel {
    /// Builds the panel from gap-free bars (`bars[s][t]`).
    pub fn from_bars(
        symbols: Vec<String>,
        dates: Vec<String>,
        bars: &[Vec<Bar>],
        horizon_q: usize,
    ) -> Result<Self> {
        let s = symbols.len();
        let t = dates.len();
        if bars.len() != s || bars.iter().any(|b| b.len() != t) {
            return Err(Error::data("bars do not cover every (symbol, date)"));
        }
        if s == 0 || t == 0 {
            return Err(Error::data("empty panel"));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("dates must be strictly increasing"));
        }
        let per_stock = exec::map(bars, |b| stock_features(b, horizon_q));
        let mut features = vec![0.0; s * t * NUM_FEATURES];
        let mut labels = vec![f64::NAN; s * t];
        let mut next = vec![f64::NAN; s * t];
        let mut degenerate = vec![false; s * t * 5];
        for (si, res) in per_stock.into_iter().enumerate() {
            let sf = res.map_err(|e| match e {
                Error::Data(m) => Error::data(format!("symbol {}: {m}", symbols[si])),
                other => other,
            })?;
            features[si * t * NUM_FEATURES..(si + 1) * t * NUM_FEATURES]
                .copy_from_slice(&sf.features);
            labels[si * t..(si + 1) * t].copy_from_slice(&sf.labels);
            next[si * t..(si + 1) * t].copy_from_slice(&sf.next);
            degenerate[si * t * 5..(si + 1) * t * 5].copy_from_slice(&sf.degenerate);
        }
        Ok(Self {
            symbols,
            dates,
            features: Tensor::new(vec![s, t, NUM_FEATURES], features)?,
            labels: Tensor::new(vec![s, t], labels)?,
            next_day_returns: Tensor::new(vec![s, t], next)?,
            degenerate,
            horizon_q,
        })
    }

    /// Equality that treats identical NaN payloads as equal.
    pub fn bitwise_eq(&self, other: &MarketPanel) -> bool {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        self.symbols == other.symbols
            && self.dates == other.dates
            && self.horizon_q == other.horizon_q
            && self.degenerate == other.degenerate
            && self.features.shape() == other.features.shape()
            && bits(&self.features) == bits(&other.features)
            && bits(&self.labels) == bits(&other.labels)
            && bits(&self.next_day_returns) == bits(&other.next_day_returns)
    }

    pub fn num_stocks(&self) -> usize {
        self.symbols.len()
    }

    pub fn num_days(&self) -> usize {
        self.dates.len()
    }

    pub fn feature_valid(&self, day: usize) -> bool {
        day + 1 >= ZSCORE_WINDOW && day < self.num_days()
    }

    pub fn label_valid(&self, day: usize) -> bool {
        day + self.horizon_q <= self.num_days()
    }

    /// Days carrying both a valid feature row and a valid label.
    pub fn usable_days(&self) -> Vec<usize> {
        (0..self.num_days())
            .filter(|&d| self.feature_valid(d) && self.label_valid(d))
            .collect()
    }

    /// Model input for `day`: `[S, lookback, 8]` covering days
    /// `day - lookback + 1 ..= day`. Steps before the series start are zero.
    pub fn window(&self, day: usize, lookback: usize) -> Tensor {
        let (s, t) = (self.num_stocks(), self.num_days());
        let mut out = vec![0.0; s * lookback * NUM_FEATURES];
        for si in 0..s {
            for k in 0..lookback {
                let Some(src_day) = (day + k + 1).checked_sub(lookback) else {
                    continue;
                };
                let src = (si * t + src_day) * NUM_FEATURES;
                let dst = (si * lookback + k) * NUM_FEATURES;
                out[dst..dst + NUM_FEATURES]
                    .copy_from_slice(&self.features.data()[src..src + NUM_FEATURES]);
            }
        }
        Tensor::new(vec![s, lookback, NUM_FEATURES], out).expect("shape")
    }

    fn column(&self, m: &Tensor, day: usize) -> Vec<f64> {
        let t = self.num_days();
        (0..self.num_stocks())
            .map(|s| m.data()[s * t + day])
            .collect()
    }

    pub fn labels_on(&self, day: usize) -> Vec<f64> {
        self.column(&self.labels, day)
    }

    pub fn next_returns_on(&self, day: usize) -> Vec<f64> {
        self.column(&self.next_day_returns, day)
    }

    /// Feature channel `channel` of stock `s` over the lookback window.
    pub fn channel_window(
        &self,
        s: usize,
        day: usize,
        lookback: usize,
        channel: usize,
    ) -> Vec<f64> {
        let t = self.num_days();
        (0..lookback)
            .map(|k| match (day + k + 1).checked_sub(lookback) {
                Some(d) => self.features.data()[(s * t + d) * NUM_FEATURES + channel],
                None => 0.0,
            })
            .collect()
    }

    /// Precomputed inputs and targets for a list of days.
    pub fn batches(&self, days: &[usize], lookback: usize) -> Vec<DayBatch> {
        exec::map(days, |&d| DayBatch {
            day: d,
            x: Arc::new(self.window(d, lookback)),
            labels: self.labels_on(d),
            next_returns: self.next_returns_on(d),
        })
    }
}

/// One cross-section: every stock on one trading day.
#[derive(Clone, Debug)]
pub struct DayBatch {
    pub day: usize,
    pub x: Arc<Tensor>,
    pub labels: Vec<f64>,
    pub next_returns: Vec<f64>,
}

struct StockFeatures {
    features: Vec<f64>,
    labels: Vec<f64>,
    next: Vec<f64>,
    degenerate: Vec<bool>,
}

fn stock_features(bars: &[Bar], q: usize) -> Result<StockFeatures> {
    let t = bars.len();
    for (i, b) in bars.iter().enumerate() {
        if b.open <= 0.0 || b.high <= 0.0 || b.low <= 0.0 || b.close <= 0.0 {
            return Err(Error::data(format!("non-positive price on day {i}")));
        }
    }
    let chans: [Vec<f64>; 5] = [
        bars.iter().map(|b| b.open).collect(),
        bars.iter().map(|b| b.high).collect(),
        bars.iter().map(|b| b.low).collect(),
        bars.iter().map(|b| b.close).collect(),
        bars.iter().map(|b| b.volume).collect(),
    ];
    let close = &chans[3];
    let mut features = vec![0.0; t * NUM_FEATURES];
    let mut degenerate = vec![false; t * 5];
    for (c, series) in chans.iter().enumerate() {
        let z = features::rolling_zscore(series, ZSCORE_WINDOW);
        for d in 0..t {
            if let Some(v) = z.values[d] {
                features[d * NUM_FEATURES + c] = v;
            }
            degenerate[d * 5 + c] = z.degenerate[d];
        }
    }
    for (j, k) in [5usize, 10, 20].into_iter().enumerate() {
        let ma = features::ma_ratio(close, k)?;
        for d in ZSCORE_WINDOW - 1..t {
            features[d * NUM_FEATURES + 5 + j] = ma[d].unwrap_or(0.0);
        }
    }
    let labels = features::make_label(close, q)?
        .into_iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect();
    let next = features::next_day_returns(close)
        .into_iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect();
    Ok(StockFeatures {
        features,
        labels,
        next,
        degenerate,
    })
}

/// Train / validation / test day ranges (indices into the panel's days).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn new(train: Range<usize>, valid: Range<usize>, test: Range<usize>) -> Result<Self> {
        let s = Self { train, valid, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [&self.train, &self.valid, &self.test];
        if ranges.iter().any(|r| r.is_empty()) {
            return Err(Error::config(
                "train, valid and test ranges must be non-empty",
            ));
        }
        if !(self.train.end <= self.valid.start && self.valid.end <= self.test.start) {
            return Err(Error::config(format!(
                "splits must be disjoint and chronological: {:?} / {:?} / {:?}",
                self.train, self.valid, self.test
            )));
        }
        Ok(())
    }

    /// Splits the usable days whose whole lookback window has valid
    /// features by ratio, leaving a `horizon_q - 1` day gap between parts so
    /// no training label overlaps the following period.
    pub fn by_ratio(panel: &MarketPanel, lookback: usize, train: f64, valid: f64) -> Result<Self> {
        if !(train > 0.0 && valid > 0.0 && train + valid < 1.0) {
            return Err(Error::config(
                "split ratios must be positive and leave room for test",
            ));
        }
        let first = (ZSCORE_WINDOW - 1) + lookback.saturating_sub(1);
        let days: Vec<usize> = panel
            .usable_days()
            .into_iter()
            .filter(|&d| d >= first)
            .collect();
        let gap = panel.horizon_q.saturating_sub(1);
        let n = days.len();
        if n < 3 + 2 * gap {
            return Err(Error::data(format!(
                "only {n} usable days; too few to split"
            )));
        }
        let avail = n - 2 * gap;
        let n_train = ((avail as f64) * train).round() as usize;
        let n_valid = ((avail as f64) * valid).round() as usize;
        let start = days[0];
        let tr = start..start + n_train;
        let va = tr.end + gap..tr.end + gap + n_valid;
        let te = va.end + gap..start + n;
        Self::new(tr, va, te)
    }

    pub fn train_days(&self) -> Vec<usize> {
        self.train.clone().collect()
    }

    pub fn valid_days(&self) -> Vec<usize> {
        self.valid.clone().collect()
    }

    pub fn test_days(&self) -> Vec<usize> {
        self.test.clone().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ramp_bars(days: usize, start: f64) -> Vec<Bar> {
        (0..days)
            .map(|i| {
                let c = start * (1.0 + 0.01 * ((i as f64) * 0.9).sin() + 0.001 * i as f64);
                Bar {
                    open: c * 0.999,
                    high: c * 1.01,
                    low: c * 0.99,
                    close: c,
                    volume: 1000.0 + (i % 7) as f64 * 10.0,
                }
            })
            .collect()
    }

    fn dates(days: usize) -> Vec<String> {
        let d0 = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        (0..days)
            .map(|i| {
                (d0 + chrono::Days::new(i as u64))
                    .format("%Y-%m-%d")
                    .to_string()
            })
            .collect()
    }

    fn panel(days: usize) -> MarketPanel {
        let dates = dates(days);
        MarketPanel::from_bars(
            vec!["A".into(), "B".into()],
            dates,
            &[ramp_bars(days, 10.0), ramp_bars(days, 20.0)],
            5,
        )
        .unwrap()
    }

    #[test]
    fn usable_day_bookkeeping() {
        let p = panel(25);
        assert_eq!(p.usable_days(), vec![19, 20]);
        let p = panel(31);
        assert_eq!(p.usable_days().len(), 31 - 19 - 4);
    }

    #[test]
    fn no_lookahead_in_features() {
        let days = 30;
        let base = ramp_bars(days, 10.0);
        let mut bumped = base.clone();
        bumped[25].close *= 1.5;
        bumped[25].volume *= 3.0;
        let dates = dates(days);
        let a = MarketPanel::from_bars(vec!["A".into()], dates.clone(), &[base], 5).unwrap();
        let b = MarketPanel::from_bars(vec!["A".into()], dates, &[bumped], 5).unwrap();
        let w = 25 * NUM_FEATURES;
        assert_eq!(a.features.data()[..w], b.features.data()[..w]);
        assert_ne!(
            a.features.data()[w..w + NUM_FEATURES],
            b.features.data()[w..w + NUM_FEATURES]
        );
    }

    #[test]
    fn label_alignment() {
        let p = panel(30);
        let bars = ramp_bars(30, 10.0);
        let y = p.labels_on(10)[0];
        assert!((y - (bars[14].close / bars[10].close - 1.0)).abs() < 1e-12);
        assert!(p.labels_on(26)[0].is_nan());
    }

    #[test]
    fn window_layout() {
        let p = panel(30);
        let w = p.window(22, 20);
        assert_eq!(w.shape(), &[2, 20, 8]);
        assert_eq!(w.at(&[1, 19, 3]), p.features.at(&[1, 22, 3]));
        assert_eq!(w.at(&[0, 0, 6]), p.features.at(&[0, 3, 6]));
    }

    #[test]
    fn ratio_split_is_chronological() {
        let p = panel(120);
        let s = SplitSpec::by_ratio(&p, 20, 0.6, 0.2).unwrap();
        assert!(s.train.start >= 38);
        assert!(s.train.end + 4 <= s.valid.start && s.valid.end + 4 <= s.test.start);
        assert!(p.label_valid(s.test.end - 1));
        assert!(SplitSpec::new(10..20, 15..25, 30..40).is_err());
    }
}
