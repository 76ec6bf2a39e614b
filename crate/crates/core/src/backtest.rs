//! Top-k softmax portfolios over a sliding holding window, and their metrics.

use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::objectives::softmax;
use crate::stats;

pub const PERIODS_PER_YEAR: f64 = 252.0;

/// Indices of the `k` largest predictions (ties keep the lower index first)
/// and their softmax weights.
pub fn select_top_k(pred: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..pred.len()).collect();
    idx.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    idx.truncate(k);
    let w = softmax(&idx.iter().map(|&i| pred[i]).collect::<Vec<_>>());
    (idx, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioRun {
    /// `[W][B]`: row `d mod W` holds the portfolio opened on day `d` for up to
    /// `W` days.
    pub window_returns: Vec<Vec<f64>>,
    pub selected: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    /// Mean of the `W` rows per day.
    pub daily: Vec<f64>,
}

impl PortfolioRun {
    /// Mean over days of the largest selected weight.
    pub fn top1_concentration(&self) -> f64 {
        let tops: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.iter().copied().fold(0.0, f64::max))
            .collect();
        stats::mean(&tops)
    }
}

/// `preds[d]` and `returns[d]` are the day-`d` scores and next-day returns of
/// every stock.
pub fn portfolio_returns(
    preds: &[Vec<f64>],
    returns: &[Vec<f64>],
    k: usize,
    window: usize,
) -> Result<PortfolioRun> {
    let b = preds.len();
    if returns.len() != b {
        return Err(Error::config(format!(
            "{b} prediction days but {} return days",
            returns.len()
        )));
    }
    if k == 0 || window == 0 {
        return Err(Error::config("k and the window must be positive"));
    }
    let mut r = vec![vec![0.0; b]; window];
    let mut selected = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    for d in 0..b {
        let s = preds[d].len();
        if returns[d].len() != s {
            return Err(Error::config(format!(
                "day {d}: {s} predictions but {} returns",
                returns[d].len()
            )));
        }
        if k > s {
            return Err(Error::config(format!(
                "k = {k} exceeds the {s} stocks on day {d}"
            )));
        }
        if preds[d].iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite prediction on day {d}")));
        }
        let (idx, w) = select_top_k(&preds[d], k);
        let hold = window.min(b - d);
        let row = d % window;
        for j in d..d + hold {
            let mut acc = 0.0;
            for (&i, &wi) in idx.iter().zip(&w) {
                let ret = returns[j][i];
                if !ret.is_finite() {
                    return Err(Error::data(format!(
                        "missing return for stock {i} on day {j}"
                    )));
                }
                acc += wi * ret;
            }
            r[row][j] = acc;
        }
        selected.push(idx);
        weights.push(w);
    }
    let daily = (0..b)
        .map(|t| r.iter().map(|row| row[t]).sum::<f64>() / window as f64)
        .collect();
    Ok(PortfolioRun {
        window_returns: r,
        selected,
        weights,
        daily,
    })
}

fn ser_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "+inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn de_ratio<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "+inf" => Ok(f64::INFINITY),
        Raw::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad ratio `{t}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub annual_return: f64,
    /// `None` when the daily series has zero variance.
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
    /// `+inf` when there is no drawdown.
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub calmar: f64,
    pub days: usize,
}

pub fn annual_return(daily: &[f64]) -> f64 {
    stats::mean(daily) * PERIODS_PER_YEAR
}

pub fn sharpe_ratio(daily: &[f64]) -> Result<f64> {
    let sd = stats::sample_std(daily);
    let m = stats::mean(daily);
    // Summation noise of a constant series is not variance.
    if !(sd > 64.0 * f64::EPSILON * m.abs()) {
        return Err(Error::Undefined(
            "Sharpe ratio undefined for a zero-variance series".into(),
        ));
    }
    Ok(m / sd * PERIODS_PER_YEAR.sqrt())
}

/// Largest peak-to-trough fall of the additive equity curve, which starts at 0.
pub fn max_drawdown(daily: &[f64]) -> f64 {
    let (mut equity, mut peak, mut worst) = (0.0f64, 0.0f64, 0.0f64);
    for r in daily {
        equity += r;
        peak = peak.max(equity);
        worst = worst.max(peak - equity);
    }
    worst
}

pub fn metrics(daily: &[f64]) -> Result<MetricReport> {
    if daily.len() < 2 {
        return Err(Error::data(format!(
            "metrics need at least 2 days, got {}",
            daily.len()
        )));
    }
    if daily.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite daily return"));
    }
    let ar = annual_return(daily);
    let mdd = max_drawdown(daily);
    let calmar = if mdd > 0.0 {
        ar / mdd
    } else if ar < 0.0 {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    };
    Ok(MetricReport {
        annual_return: ar,
        sharpe: sharpe_ratio(daily).ok(),
        max_drawdown: mdd,
        calmar,
        days: daily.len(),
    })
}

/// Per-side proportional trading costs paid once per rebalance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub buy: f64,
    pub sell: f64,
    pub rebalance_days: usize,
}

impl CostModel {
    pub fn new(buy: f64, sell: f64, rebalance_days: usize) -> Result<Self> {
        let m = Self {
            buy,
            sell,
            rebalance_days,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.buy >= 0.0 && self.sell >= 0.0) {
            return Err(Error::config("trading cost rates must be non-negative"));
        }
        if self.rebalance_days == 0 {
            return Err(Error::config("rebalance period must be positive"));
        }
        Ok(())
    }

    /// 0.006% buy, 0.056% sell.
    pub fn csi() -> Self {
        Self {
            buy: 0.00006,
            sell: 0.00056,
            rebalance_days: 5,
        }
    }

    /// 0.002% per side.
    pub fn nikkei() -> Self {
        Self {
            buy: 0.00002,
            sell: 0.00002,
            rebalance_days: 5,
        }
    }

    pub fn free() -> Self {
        Self {
            buy: 0.0,
            sell: 0.0,
            rebalance_days: 5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "csi" => Ok(Self::csi()),
            "nikkei" | "ni225" => Ok(Self::nikkei()),
            "none" | "sp500" => Ok(Self::free()),
            other => Err(Error::config(format!(
                "unknown cost preset `{other}` (csi, nikkei, none)"
            ))),
        }
    }

    pub fn daily_cost(&self) -> f64 {
        (self.buy + self.sell) / self.rebalance_days as f64
    }

    pub fn annualized(&self) -> f64 {
        self.daily_cost() * PERIODS_PER_YEAR
    }
}

/// Subtracts the round-trip cost spread evenly over each rebalance period.
pub fn apply_costs(daily: &[f64], model: &CostModel) -> Result<Vec<f64>> {
    model.validate()?;
    let c = model.daily_cost();
    Ok(daily.iter().map(|r| r - c).collect())
}

/// `date,return,cost_adjusted_return` rows.
pub fn write_daily_csv<W: Write>(
    out: W,
    dates: &[String],
    gross: &[f64],
    net: &[f64],
) -> Result<()> {
    if dates.len() != gross.len() || gross.len() != net.len() {
        return Err(Error::config("daily series lengths differ"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "return", "cost_adjusted_return"])
        .map_err(|e| Error::data(e.to_string()))?;
    for ((d, g), n) in dates.iter().zip(gross).zip(net) {
        w.write_record([d.as_str(), &format!("{g:e}"), &format!("{n:e}")])
            .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
