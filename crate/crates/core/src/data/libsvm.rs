//! libsvm-style text format and the feature-group sidecar.
//!
//! Instances are one per line: `label idx:val idx:val ...` with 0-based
//! indices. The sidecar lists one group per line as `name start end`,
//! covering `[start, end)`.

use std::io::{BufRead, Write};

use super::{Dataset, FeatureGroup, FeatureSpace, SparseInstance, Task};
use crate::{Error, Result};

pub fn parse_libsvm(reader: impl BufRead, space: &FeatureSpace, task: Task) -> Result<Dataset> {
    let num_features = space.num_features();
    let mut instances = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let err = |message: String| Error::Parse { line: line_no, message };
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(format!("malformed label {label_tok:?}")))?;
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected idx:val, got {tok:?}")))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("malformed index {idx:?}")))?;
            let val: f64 = val.parse().map_err(|_| err(format!("malformed value {val:?}")))?;
            if idx >= num_features {
                return Err(err(format!(
                    "feature index {idx} out of range for {num_features} features"
                )));
            }
            entries.push((idx, val));
        }
        let instance = SparseInstance::new(entries, label).map_err(|e| err(e.to_string()))?;
        instances.push(instance);
    }
    Dataset::new(instances, space.clone(), task)
}

pub fn write_libsvm(dataset: &Dataset, mut out: impl Write) -> Result<()> {
    for x in dataset.instances() {
        write!(out, "{}", x.label)?;
        for (k, v) in x.entries() {
            write!(out, " {k}:{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn parse_groups(reader: impl BufRead) -> Result<FeatureSpace> {
    let mut groups = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<_> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [name, start, end] => start
                .parse()
                .ok()
                .zip(end.parse().ok())
                .map(|(start, end)| FeatureGroup {
                    name: name.to_string(),
                    start,
                    end,
                }),
            _ => None,
        };
        groups.push(parsed.ok_or_else(|| Error::Parse {
            line: n + 1,
            message: format!("expected `name start end`, got {line:?}"),
        })?);
    }
    FeatureSpace::new(groups)
}

pub fn write_groups(space: &FeatureSpace, mut out: impl Write) -> Result<()> {
    for g in space.groups() {
        writeln!(out, "{} {} {}", g.name, g.start, g.end)?;
    }
    Ok(())
}
