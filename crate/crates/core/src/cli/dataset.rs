//! JSONL dataset files: a header line, then one observation per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::Dataset;
use crate::geodesy::GeoPoint;
use crate::synthworld::{Observation, Split};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    #[serde(rename = "C")]
    classes: usize,
    #[serde(rename = "D")]
    dim: usize,
    split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    label: usize,
    lat: f64,
    lon: f64,
    features: Vec<f64>,
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Data(format!("serialising dataset: {e}")))
}

/// Serialises a dataset; floats use shortest round-trip formatting.
pub fn to_jsonl(data: &Dataset) -> Result<String> {
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        classes: data.classes,
        dim: data.dim(),
        split: data.split.as_str().to_string(),
    };
    let mut out = json_line(&header)?;
    out.push('\n');
    for i in 0..data.len() {
        out.push_str(&json_line(&Line {
            label: data.labels[i],
            lat: data.geos[i].lat_deg(),
            lon: data.geos[i].lon_deg(),
            features: data.features.row(i).to_vec(),
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Data("dataset file is empty".into()))?;
    let header: Header = serde_json::from_str(first)
        .map_err(|e| Error::Data(format!("line 1: malformed header: {e}")))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset format_version {}",
            header.format_version
        )));
    }
    if header.classes == 0 || header.dim == 0 {
        return Err(Error::Data("header C and D must be positive".into()));
    }
    let split: Split = header
        .split
        .parse()
        .map_err(|_| Error::Data(format!("line 1: unknown split `{}`", header.split)))?;
    let mut obs = Vec::new();
    for (i, raw) in lines {
        let lineno = i + 1;
        let line: Line =
            serde_json::from_str(raw).map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        if line.label >= header.classes {
            return Err(Error::Data(format!(
                "line {lineno}: label {} outside {} classes",
                line.label, header.classes
            )));
        }
        if line.features.len() != header.dim {
            return Err(Error::Data(format!(
                "line {lineno}: {} features, header says {}",
                line.features.len(),
                header.dim
            )));
        }
        if line.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::Data(format!("line {lineno}: non-finite feature")));
        }
        let geo = GeoPoint::new(line.lat, line.lon)
            .map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        obs.push(Observation {
            label: line.label,
            geo,
            features: line.features,
        });
    }
    if obs.is_empty() {
        return Err(Error::Data("dataset has no observations".into()));
    }
    Dataset::from_observations(header.classes, header.dim, split, &obs)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let text = to_jsonl(data)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let obs = vec![
            Observation {
                label: 1,
                geo: GeoPoint::new(12.345678901234567, -179.99999999999997).unwrap(),
                features: vec![0.1, -2.5e-12],
            },
            Observation {
                label: 0,
                geo: GeoPoint::new(-90.0, 0.0).unwrap(),
                features: vec![1.0 / 3.0, 7.0],
            },
        ];
        Dataset::from_observations(3, 2, Split::Eval, &obs).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let d = sample();
        let text = to_jsonl(&d).unwrap();
        assert!(text.starts_with(r#"{"format_version":1,"C":3,"D":2,"split":"eval"}"#));
        let back = parse_jsonl(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn rejects_bad_lines() {
        let h = r#"{"format_version":1,"C":2,"D":1,"split":"train"}"#;
        let bad = [
            format!("{h}\n{{\"label\":2,\"lat\":0,\"lon\":0,\"features\":[1]}}"),
            format!("{h}\n{{\"label\":0,\"lat\":95,\"lon\":0,\"features\":[1]}}"),
            format!("{h}\n{{\"label\":0,\"lat\":0,\"lon\":0,\"features\":[1,2]}}"),
            format!("{h}\nnot json"),
            h.to_string(),
            String::new(),
            r#"{"format_version":2,"C":2,"D":1,"split":"train"}"#.to_string(),
        ];
        for text in bad {
            let err = parse_jsonl(&text).unwrap_err();
            assert_eq!(err.exit_code(), 3, "{text}: {err}");
        }
    }
}
