use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use super::InteractionLog;
use crate::error::{Error, Result};

/// Parses a MovieLens `ratings.dat` (`UserID::MovieID::Rating::Timestamp`).
/// Every rating counts as a positive.
pub fn parse_ml1m(path: impl AsRef<Path>) -> Result<InteractionLog> {
    parse_ml1m_reader(BufReader::new(File::open(path)?))
}

pub fn parse_ml1m_reader<R: BufRead>(reader: R) -> Result<InteractionLog> {
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split("::").collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 `::`-separated fields, found {}", fields.len()),
            });
        }
        let num = |idx: usize, what: &str| -> Result<u64> {
            fields[idx].trim().parse::<u64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("{what} `{}` is not a non-negative integer", fields[idx]),
            })
        };
        let user = num(0, "UserID")?;
        let item = num(1, "MovieID")?;
        num(2, "Rating")?;
        let ts = num(3, "Timestamp")?;
        raw.push((user, item, ts as i64));
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset("no ratings found".into()));
    }
    Ok(InteractionLog::from_raw(&raw))
}

/// Parses a KuaiRand log CSV, keeping clicked rows of the main tab
/// (`tab == 1 && is_click == 1`). `time_ms` is converted to seconds.
pub fn parse_kuairand(path: impl AsRef<Path>) -> Result<InteractionLog> {
    parse_kuairand_reader(File::open(path)?)
}

pub fn parse_kuairand_reader<R: Read>(reader: R) -> Result<InteractionLog> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    };
    let (cu, cv, ct, cc, ctab) = (
        column("user_id")?,
        column("video_id")?,
        column("time_ms")?,
        column("is_click")?,
        column("tab")?,
    );
    let mut raw = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let line_no = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let field = |idx: usize, name: &str| -> Result<i64> {
            let s = record.get(idx).unwrap_or("").trim();
            s.parse::<i64>()
                .or_else(|_| s.parse::<f64>().map(|f| f as i64).map_err(|_| ()))
                .map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("{name} `{s}` is not numeric"),
                })
        };
        let tab = field(ctab, "tab")?;
        let click = field(cc, "is_click")?;
        let user = field(cu, "user_id")?;
        let video = field(cv, "video_id")?;
        let time_ms = field(ct, "time_ms")?;
        if user < 0 || video < 0 || time_ms < 0 {
            return Err(Error::Parse {
                line: line_no,
                msg: "identifiers and timestamps must be non-negative".into(),
            });
        }
        if tab == 1 && click == 1 {
            raw.push((user as u64, video as u64, time_ms / 1000));
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset("no clicked tab-1 rows found".into()));
    }
    Ok(InteractionLog::from_raw(&raw))
}
