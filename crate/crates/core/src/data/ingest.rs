use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::Serialize;

use super::{Bar, MarketPanel};
use crate::error::{Error, Result};

const HEADER: [&str; 7] = ["date", "symbol", "open", "high", "low", "close", "volume"];

/// Symbols dropped for missing days.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub rows: usize,
    pub dropped: Vec<(String, usize)>,
}

pub fn ingest_csv(path: &Path, horizon_q: usize) -> Result<(MarketPanel, IngestReport)> {
    let f =
        std::fs::File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    ingest_reader(f, horizon_q)
}

/// Parses `date,symbol,open,high,low,close,volume` rows. Symbols missing any
/// date of the union calendar are rejected (no filling) and reported.
pub fn ingest_reader<R: Read>(reader: R, horizon_q: usize) -> Result<(MarketPanel, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::data(format!("line 1: {e}")))?
        .clone();
    let names: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names != HEADER {
        return Err(Error::data(format!(
            "line 1: expected header {}, got {}",
            HEADER.join(","),
            names.join(",")
        )));
    }
    let mut rows: BTreeMap<String, BTreeMap<NaiveDate, Bar>> = BTreeMap::new();
    let mut first_seen: HashMap<(NaiveDate, String), u64> = HashMap::new();
    let mut count = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::data(format!("line {line}: malformed row: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != HEADER.len() {
            return Err(Error::data(format!(
                "line {line}: expected 7 fields, got {}",
                rec.len()
            )));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|_| Error::data(format!("line {line}: bad date `{}`", &rec[0])))?;
        let symbol = rec[1].to_string();
        if symbol.is_empty() {
            return Err(Error::data(format!("line {line}: empty symbol")));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::data(format!("line {line}: bad {} `{}`", HEADER[i], &rec[i])))
        };
        let bar = Bar {
            open: num(2)?,
            high: num(3)?,
            low: num(4)?,
            close: num(5)?,
            volume: num(6)?,
        };
        if bar.open <= 0.0 || bar.high <= 0.0 || bar.low <= 0.0 || bar.close <= 0.0 {
            return Err(Error::data(format!(
                "line {line}: non-positive price for {symbol}"
            )));
        }
        if bar.volume < 0.0 {
            return Err(Error::data(format!(
                "line {line}: negative volume for {symbol}"
            )));
        }
        if let Some(prev) = first_seen.insert((date, symbol.clone()), line) {
            return Err(Error::data(format!(
                "line {line}: duplicate row for ({date}, {symbol}), first at line {prev}"
            )));
        }
        rows.entry(symbol).or_default().insert(date, bar);
        count += 1;
    }
    let calendar: BTreeSet<NaiveDate> = rows.values().flat_map(|m| m.keys().copied()).collect();
    let mut report = IngestReport {
        rows: count,
        dropped: Vec::new(),
    };
    let mut symbols = Vec::new();
    let mut bars = Vec::new();
    for (sym, series) in rows {
        if series.len() < calendar.len() {
            log::warn!(
                "dropping {sym}: {} missing days",
                calendar.len() - series.len()
            );
            report.dropped.push((sym, calendar.len() - series.len()));
            continue;
        }
        symbols.push(sym);
        bars.push(series.into_values().collect::<Vec<_>>());
    }
    if symbols.is_empty() {
        return Err(Error::data("no symbol covers the full calendar"));
    }
    let dates = calendar
        .iter()
        .map(|d| d.format("%Y-%m-%d").to_string())
        .collect();
    let panel = MarketPanel::from_bars(symbols, dates, &bars, horizon_q)?;
    Ok((panel, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Days;

    fn csv_for(symbols: &[&str], days: usize) -> String {
        let mut s = String::from("date,symbol,open,high,low,close,volume\n");
        let d0 = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        for d in 0..days {
            let date = d0.checked_add_days(Days::new(d as u64)).unwrap();
            for (k, sym) in symbols.iter().enumerate() {
                let c = 10.0 + k as f64 + (d as f64 * 0.3).sin();
                s += &format!(
                    "{date},{sym},{},{},{},{c},{}\n",
                    c,
                    c + 0.5,
                    c - 0.5,
                    100 + d
                );
            }
        }
        s
    }

    #[test]
    fn valid_file() {
        let (p, rep) = ingest_reader(csv_for(&["AAA", "BBB"], 30).as_bytes(), 5).unwrap();
        assert_eq!((p.num_stocks(), p.num_days()), (2, 30));
        assert!(rep.dropped.is_empty());
    }

    #[test]
    fn twenty_five_days_give_two_usable_days() {
        let (p, _) = ingest_reader(csv_for(&["AAA"], 25).as_bytes(), 5).unwrap();
        assert_eq!(p.usable_days(), vec![19, 20]);
    }

    #[test]
    fn duplicate_row_is_named() {
        let mut s = csv_for(&["AAA"], 3);
        s += "2021-01-02,AAA,1,1,1,1,1\n";
        let err = ingest_reader(s.as_bytes(), 5).unwrap_err().to_string();
        assert!(err.contains("line 5") && err.contains("duplicate"), "{err}");
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let s = "date,symbol,open,high,low,close,volume\n2021-01-01,A,1,1,1,-2,5\n";
        let err = ingest_reader(s.as_bytes(), 5).unwrap_err().to_string();
        assert!(
            err.contains("line 2") && err.contains("non-positive"),
            "{err}"
        );
        let s = "date,symbol,open,high,low,close,volume\n2021-13-01,A,1,1,1,2,5\n";
        assert!(ingest_reader(s.as_bytes(), 5)
            .unwrap_err()
            .to_string()
            .contains("bad date"));
        let s = "date,symbol,open,high,low,close,volume\n2021-01-01,A,1,1,1,2\n";
        assert!(ingest_reader(s.as_bytes(), 5)
            .unwrap_err()
            .to_string()
            .contains("line 2"));
    }

    #[test]
    fn gapped_symbol_is_dropped() {
        let mut s = csv_for(&["AAA", "BBB"], 30);
        let cut = s
            .lines()
            .filter(|l| !l.starts_with("2021-01-10,BBB"))
            .collect::<Vec<_>>()
            .join("\n");
        s = cut + "\n";
        let (p, rep) = ingest_reader(s.as_bytes(), 5).unwrap();
        assert_eq!(p.symbols, vec!["AAA".to_string()]);
        assert_eq!(rep.dropped, vec![("BBB".to_string(), 1)]);
    }
}
