//! CSV fixtures with one value per row: `stream,time,field,value`.
//! Rows sharing `(stream, time)` form one sample.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

use crate::schema::{StreamId, TelemetrySample};
use crate::time::parse_ts;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
}

#[derive(Deserialize)]
struct Row {
    stream: String,
    time: String,
    field: String,
    value: f64,
}

/// Parses a fixture into unsequenced samples sorted by time. Samples at
/// the same instant keep stream order.
pub fn load_fixture<R: Read>(reader: R) -> Result<Vec<TelemetrySample>, FixtureError> {
    let mut groups: BTreeMap<(i64, StreamId), BTreeMap<String, f64>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let mut records = csv::StringRecord::new();
    let headers = rdr.headers()?.clone();
    while rdr.read_record(&mut records)? {
        let line = records.position().map_or(0, |p| p.line());
        let row: Row = records.deserialize(Some(&headers))?;
        let err = |msg: String| FixtureError::Row { line, msg };
        let stream: StreamId = row.stream.parse().map_err(|e: crate::schema::UnknownStream| err(e.to_string()))?;
        let ts = parse_ts(&row.time).map_err(|e| err(e.to_string()))?;
        let fields = groups.entry((ts, stream)).or_default();
        if fields.insert(row.field.clone(), row.value).is_some() {
            return Err(err(format!("duplicate {} for {stream} at {}", row.field, row.time)));
        }
    }
    groups
        .into_iter()
        .map(|((ts, stream), fields)| {
            TelemetrySample::new(stream, ts, None, fields).map_err(|e| FixtureError::Row { line: 0, msg: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_and_sorts() {
        let csv = "stream,time,field,value\n\
                   industrial_energy,2021-07-11 16:24:01,power_kw,0.95\n\
                   esp32_energy,2021-07-11 16:24:05,voltage,14.8073\n\
                   esp32_energy,2021-07-11 16:24:05,current,0.768049\n\
                   industrial_energy,2021-07-11 16:23:54,power_kw,0.95\n";
        let samples = load_fixture(csv.as_bytes()).unwrap();
        let got: Vec<_> = samples.iter().map(|s| (s.stream, s.ingest_ts)).collect();
        assert_eq!(
            got,
            [
                (StreamId::IndustrialEnergy, 1_626_020_634_000),
                (StreamId::IndustrialEnergy, 1_626_020_641_000),
                (StreamId::Esp32Energy, 1_626_020_645_000),
            ]
        );
        assert_eq!(samples[2].get("current"), Some(0.768049));
    }

    #[test]
    fn rejects_incomplete_and_duplicate() {
        let missing = "stream,time,field,value\nesp32_energy,2021-07-11 16:24:05,voltage,1\n";
        assert!(load_fixture(missing.as_bytes()).is_err());
        let dup = "stream,time,field,value\nindustrial_energy,1000,power_kw,1\nindustrial_energy,1000,power_kw,2\n";
        assert!(load_fixture(dup.as_bytes()).is_err());
        let bad = "stream,time,field,value\nboiler,1000,power_kw,1\n";
        assert!(load_fixture(bad.as_bytes()).is_err());
    }
}
