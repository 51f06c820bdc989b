use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged user-item event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: u64) -> Self {
        Interaction {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// Result of reading an interaction log.
#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    pub header_skipped: bool,
    pub warnings: Vec<String>,
}

fn parse_record(rec: &csv::StringRecord) -> Option<Interaction> {
    if rec.len() < 3 {
        return None;
    }
    let user = rec.get(0)?.trim();
    let item = rec.get(1)?.trim();
    let ts = rec.get(2)?.trim().parse::<u64>().ok()?;
    if user.is_empty() || item.is_empty() {
        return None;
    }
    Some(Interaction::new(user, item, ts))
}

/// Reads `user,item,timestamp` rows. A first row whose timestamp column does
/// not parse is taken as a header. Malformed rows are skipped and counted;
/// more than half malformed is a format error.
pub fn ingest_reader<R: Read>(reader: R) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Ingested::default();
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) if e.is_io_error() => {
                return Err(Error::Format(format!("read failure: {e}")));
            }
            Err(_) => {
                rows += 1;
                out.malformed += 1;
                continue;
            }
        };
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        match parse_record(&rec) {
            Some(x) => {
                rows += 1;
                out.interactions.push(x);
            }
            None if i == 0 && rec.len() >= 3 => out.header_skipped = true,
            None => {
                rows += 1;
                out.malformed += 1;
            }
        }
    }
    if rows == 0 {
        out.warnings.push("input contains no interaction rows".into());
    } else if out.malformed * 2 > rows {
        return Err(Error::Format(format!(
            "{} of {} rows are malformed",
            out.malformed, rows
        )));
    } else if out.malformed > 0 {
        out.warnings
            .push(format!("skipped {} malformed rows", out.malformed));
    }
    Ok(out)
}

pub fn ingest_path(path: &Path) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file)
}
