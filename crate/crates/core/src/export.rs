//! Bit-reproducible text artifacts: CSV with 17 significant digits and LF
//! endings, a provenance header line, and JSON with a trailing newline.

use std::fmt::Write as _;

use serde::Serialize;

use crate::bands::BandTable;
use crate::{Error, Result};

pub const BANDS_CSV_SCHEMA: &str = "iwatsuka.bands/1";
pub const RECONSTRUCTION_CSV_SCHEMA: &str = "iwatsuka.reconstruction/1";

/// Provenance written as the first line of every CSV artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub schema: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl ArtifactHeader {
    pub fn line(&self) -> String {
        format!(
            "# iwatsuka {} schema={} config_hash={} seed={}",
            self.version, self.schema, self.config_hash, self.seed
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed artifact header: {line:?}"));
        let rest = line.strip_prefix("# iwatsuka ").ok_or_else(bad)?;
        let mut parts = rest.split(' ');
        let version = parts.next().ok_or_else(bad)?.to_string();
        let mut field = |key: &str| -> Result<String> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(key))
                .and_then(|p| p.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(bad)
        };
        let schema = field("schema")?;
        let config_hash = field("config_hash")?;
        let seed = field("seed")?.parse().map_err(|_| bad())?;
        Ok(Self {
            schema,
            version,
            config_hash,
            seed,
        })
    }
}

/// 17 significant digits, round-trips every finite f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(header: &ArtifactHeader, columns: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    out.push_str(&header.line());
    out.push('\n');
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: ArtifactHeader,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn parse_csv(text: &str) -> Result<CsvTable> {
    let mut lines = text.lines();
    let header = ArtifactHeader::parse(lines.next().unwrap_or(""))?;
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("CSV has no column line".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .enumerate()
        .map(|(i, line)| {
            let row = line
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("CSV row {}: {e}", i + 1)))?;
            if row.len() != columns.len() {
                return Err(Error::InvalidArgument(format!(
                    "CSV row {} has {} entries, expected {}",
                    i + 1,
                    row.len(),
                    columns.len()
                )));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CsvTable {
        header,
        columns,
        rows,
    })
}

/// Column order: `xi, lambda_1, …, lambda_J, vmoment`.
pub fn band_columns(j_max: usize) -> Vec<String> {
    std::iter::once("xi".to_string())
        .chain((1..=j_max).map(|j| format!("lambda_{j}")))
        .chain(std::iter::once("vmoment".to_string()))
        .collect()
}

pub fn bands_csv(table: &BandTable, header: &ArtifactHeader) -> String {
    let columns = band_columns(table.j_max);
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = table
        .xi_grid
        .values
        .iter()
        .zip(&table.lambda)
        .zip(&table.vmoment)
        .map(|((xi, l), v)| {
            let mut row = Vec::with_capacity(l.len() + 2);
            row.push(*xi);
            row.extend_from_slice(l);
            row.push(*v);
            row
        })
        .collect();
    write_csv(header, &cols, &rows)
}

/// Pretty JSON with LF endings and a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> ArtifactHeader {
        ArtifactHeader {
            schema: BANDS_CSV_SCHEMA.into(),
            version: "0.1.0".into(),
            config_hash: "abc123".into(),
            seed: 7,
        }
    }

    #[test]
    fn header_round_trip() {
        let h = header();
        assert_eq!(ArtifactHeader::parse(&h.line()).unwrap(), h);
        assert!(ArtifactHeader::parse("iwatsuka 0.1").is_err());
    }

    #[test]
    fn csv_round_trips_bits() {
        let rows = vec![vec![0.1, -1.0 / 3.0, 1e-300], vec![f64::MAX, 2.0, -0.0]];
        let text = write_csv(&header(), &["a", "b", "c"], &rows);
        assert!(!text.contains('\r'));
        let back = parse_csv(&text).unwrap();
        assert_eq!(back.header, header());
        for (r, s) in back.rows.iter().zip(&rows) {
            for (a, b) in r.iter().zip(s) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn band_column_order() {
        assert_eq!(band_columns(2), ["xi", "lambda_1", "lambda_2", "vmoment"]);
    }
}
