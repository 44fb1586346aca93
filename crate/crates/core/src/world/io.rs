use std::io::{Read, Write};

use super::{DatasetPair, PreferencePair, Source};
use crate::error::{Error, Result};
use crate::policy::table_parse_field as parse_field;

fn bit(b: Option<bool>) -> &'static str {
    match b {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

fn parse_bit(s: &str) -> Result<Option<bool>> {
    match s.trim() {
        "" => Ok(None),
        "1" => Ok(Some(true)),
        "0" => Ok(Some(false)),
        other => Err(Error::Parse(format!("label must be 0, 1 or empty, got {other:?}"))),
    }
}

/// One record per line with columns `source,x,y1,y2,z,z_hat`; missing labels
/// are empty fields. Human records come first.
pub fn write_dataset<W: Write>(data: &DatasetPair, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "x", "y1", "y2", "z", "z_hat"])?;
    for p in data.human.iter().chain(&data.ai) {
        w.write_record([
            p.source.as_str(),
            &p.x.to_string(),
            &p.y1.to_string(),
            &p.y2.to_string(),
            bit(p.z),
            bit(p.z_hat),
        ])?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<DatasetPair> {
    let mut r = csv::Reader::from_reader(input);
    let mut data = DatasetPair {
        human: Vec::new(),
        ai: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::Parse("expected source,x,y1,y2,z,z_hat".into()));
        }
        let source = match rec[0].trim() {
            "human" => Source::Human,
            "ai" => Source::Ai,
            other => return Err(Error::Parse(format!("unknown source {other:?}"))),
        };
        let p = PreferencePair {
            x: parse_field(&rec[1])?,
            y1: parse_field(&rec[2])?,
            y2: parse_field(&rec[3])?,
            z: parse_bit(&rec[4])?,
            z_hat: parse_bit(&rec[5])?,
            source,
        };
        p.validate()?;
        match source {
            Source::Human => data.human.push(p),
            Source::Ai => data.ai.push(p),
        }
    }
    Ok(data)
}
