//! Binary panel cache.
//!
//! `b"TIPSPANL"`, `u32` version, `u64` S, `u64` T, `u64` F, `u64` horizon,
//! symbol table and date table (each entry `u32` length + UTF-8 bytes),
//! then little-endian `f64` blocks for features `[S,T,F]`, labels `[S,T]`,
//! next-day returns `[S,T]`, and one byte per degenerate flag `[S,T,5]`.

use std::io::{Read, Write};
use std::path::Path;

use super::MarketPanel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TIPSPANL";
const VERSION: u32 = 1;

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_panel(path: &Path, panel: &MarketPanel) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let f = panel.features.shape()[2];
    for v in [panel.num_stocks(), panel.num_days(), f, panel.horizon_q] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for s in panel.symbols.iter().chain(&panel.dates) {
        put_str(&mut w, s)?;
    }
    put_f64s(&mut w, panel.features.data())?;
    put_f64s(&mut w, panel.labels.data())?;
    put_f64s(&mut w, panel.next_day_returns.data())?;
    let flags: Vec<u8> = panel.degenerate.iter().map(|&b| b as u8).collect();
    w.write_all(&flags)?;
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::data("panel cache is truncated"))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| Error::data("panel cache string is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .bytes(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect())
    }
}

pub fn read_panel(path: &Path) -> Result<MarketPanel> {
    let f =
        std::fs::File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut c = Cursor {
        r: std::io::BufReader::new(f),
    };
    if c.bytes(8)? != MAGIC {
        return Err(Error::data(format!(
            "{} is not a panel cache",
            path.display()
        )));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "unsupported panel cache version {version}"
        )));
    }
    let (s, t, f, q) = (c.u64()?, c.u64()?, c.u64()?, c.u64()?);
    let symbols = (0..s).map(|_| c.string()).collect::<Result<Vec<_>>>()?;
    let dates = (0..t).map(|_| c.string()).collect::<Result<Vec<_>>>()?;
    let features = Tensor::new(vec![s, t, f], c.f64s(s * t * f)?)?;
    let labels = Tensor::new(vec![s, t], c.f64s(s * t)?)?;
    let next = Tensor::new(vec![s, t], c.f64s(s * t)?)?;
    let degenerate = c.bytes(s * t * 5)?.into_iter().map(|b| b != 0).collect();
    Ok(MarketPanel {
        symbols,
        dates,
        features,
        labels,
        next_day_returns: next,
        degenerate,
        horizon_q: q,
    })
}
