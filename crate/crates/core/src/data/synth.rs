//! Synthetic markets with planted return regimes.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Bar, MarketPanel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "kebab-case")]
pub enum Regime {
    /// AR(1) daily returns with positive coefficient.
    Momentum {
        #[serde(default = "default_momentum")]
        coef: f64,
    },
    /// AR(1) daily returns with negative coefficient.
    MeanRevert {
        #[serde(default = "default_revert")]
        coef: f64,
    },
    /// Sinusoid of the given period (random phase per stock) plus noise.
    Periodic {
        period: usize,
    },
    Noise,
}

fn default_momentum() -> f64 {
    0.3
}

fn default_revert() -> f64 {
    -0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(flatten)]
    pub regime: Regime,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub stocks: usize,
    pub segments: Vec<Segment>,
    /// Idiosyncratic daily return volatility.
    pub noise_vol: f64,
    /// Periodic amplitude as a multiple of `noise_vol`.
    pub snr: f64,
    /// Volatility of the common market factor.
    pub market_vol: f64,
    pub start_date: String,
    pub horizon_q: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            stocks: 30,
            segments: vec![
                Segment {
                    regime: Regime::Momentum { coef: 0.3 },
                    length: 160,
                },
                Segment {
                    regime: Regime::Periodic { period: 5 },
                    length: 160,
                },
                Segment {
                    regime: Regime::MeanRevert { coef: -0.3 },
                    length: 160,
                },
            ],
            noise_vol: 0.02,
            snr: 1.0,
            market_vol: 0.01,
            start_date: "2015-01-05".into(),
            horizon_q: 5,
        }
    }
}

impl SynthSpec {
    pub fn single(regime: Regime, length: usize, stocks: usize) -> Self {
        Self {
            stocks,
            segments: vec![Segment { regime, length }],
            ..Default::default()
        }
    }

    pub fn total_days(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stocks == 0 {
            return Err(Error::config("synthetic market needs at least one stock"));
        }
        if self.segments.is_empty() {
            return Err(Error::config("synthetic market needs at least one segment"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.length == 0 {
                return Err(Error::config(format!(
                    "segment {i} has non-positive length"
                )));
            }
            if let Regime::Periodic { period: 0 } = s.regime {
                return Err(Error::config(format!("segment {i} has period 0")));
            }
        }
        if self.noise_vol < 0.0 || self.market_vol < 0.0 || self.horizon_q == 0 {
            return Err(Error::config(
                "volatilities must be non-negative and horizon positive",
            ));
        }
        Ok(())
    }

    /// Regime label of every generated day.
    pub fn day_regimes(&self) -> Vec<&Regime> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(&s.regime, s.length))
            .collect()
    }
}

fn business_days(start: &str, n: usize) -> Result<Vec<String>> {
    let mut d = NaiveDate::parse_from_str(start, "%Y-%m-%d")
        .map_err(|_| Error::config(format!("bad start date `{start}`")))?;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d.format("%Y-%m-%d").to_string());
        }
        d = d
            .checked_add_days(Days::new(1))
            .ok_or_else(|| Error::config("date overflow"))?;
    }
    Ok(out)
}

/// Daily log-returns `[stock][day]` for the regime plan.
pub fn synth_returns(spec: &SynthSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.total_days();
    let market: Vec<f64> = (0..n)
        .map(|_| {
            spec.market_vol * {
                let n: f64 = StandardNormal.sample(&mut rng);
                n
            }
        })
        .collect::<Vec<f64>>();
    let regimes = spec.day_regimes();
    let mut out = Vec::with_capacity(spec.stocks);
    for _ in 0..spec.stocks {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let beta = rng.random_range(0.5..1.5);
        let mut prev_idio = 0.0;
        let mut series = Vec::with_capacity(n);
        for (t, regime) in regimes.iter().enumerate() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let shock = spec.noise_vol * eps;
            let idio = match regime {
                Regime::Momentum { coef } | Regime::MeanRevert { coef } => coef * prev_idio + shock,
                Regime::Periodic { period } => {
                    let angle = std::f64::consts::TAU * t as f64 / *period as f64 + phase;
                    spec.snr * spec.noise_vol * angle.sin() + shock
                }
                Regime::Noise => shock,
            };
            prev_idio = idio;
            series.push(beta * market[t] + idio);
        }
        out.push(series);
    }
    Ok(out)
}

/// Generates a panel with geometric price paths driven by [`synth_returns`].
pub fn synth_market(spec: &SynthSpec, seed: u64) -> Result<MarketPanel> {
    let returns = synth_returns(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = spec.total_days();
    let mut bars = Vec::with_capacity(spec.stocks);
    for series in &returns {
        let mut close = rng.random_range(10.0..100.0);
        let base_volume: f64 = rng.random_range(1e5..1e6);
        let mut row = Vec::with_capacity(n);
        for &r in series {
            let open = close
                * (0.002 * {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    n
                })
                .exp();
            close *= r.exp();
            let hi_noise: f64 = StandardNormal.sample(&mut rng);
            let lo_noise: f64 = StandardNormal.sample(&mut rng);
            let vol_noise: f64 = StandardNormal.sample(&mut rng);
            row.push(Bar {
                open,
                high: open.max(close) * (0.005 * hi_noise.abs()).exp(),
                low: open.min(close) * (-0.005 * lo_noise.abs()).exp(),
                close,
                volume: base_volume * (0.3 * vol_noise + 10.0 * r.abs()).exp(),
            });
        }
        bars.push(row);
    }
    let symbols = (0..spec.stocks).map(|i| format!("SYN{i:04}")).collect();
    let dates = business_days(&spec.start_date, n)?;
    MarketPanel::from_bars(symbols, dates, &bars, spec.horizon_q)
}
