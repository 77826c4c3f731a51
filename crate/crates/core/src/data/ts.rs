//! Reader and writer for the UEA/UCR `.ts` text format.
//!
//! ```text
//! # comment
//! @problemName Example
//! @timeStamps false
//! @univariate false
//! @dimensions 2
//! @equalLength true
//! @seriesLength 3
//! @classLabel true up down
//! @data
//! 1,2,3:4,5,6:up
//! ```
//!
//! Only equal-length, timestamp-free files without missing values are
//! accepted.

use std::fmt::Write as _;

use ndarray::Array3;

use super::{Dataset, DatasetMeta};
use crate::error::{Error, Result};

fn format_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        line,
        msg: msg.into(),
    }
}

fn parse_bool(line: usize, key: &str, value: Option<&str>) -> Result<bool> {
    match value.map(str::to_ascii_lowercase).as_deref() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        other => Err(format_err(
            line,
            format!("@{key} expects true or false, got {other:?}"),
        )),
    }
}

fn parse_usize(line: usize, key: &str, value: Option<&str>) -> Result<usize> {
    value
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err(line, format!("@{key} expects a positive integer")))
}

/// Parses the text of a `.ts` file.
pub fn parse_ts(text: &str) -> Result<Dataset> {
    let mut meta = DatasetMeta::default();
    let mut label_names: Vec<String> = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut saw_data = false;

    for (ln, line) in lines.by_ref() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(directive) = line.strip_prefix('@') else {
            return Err(format_err(ln, "record found before @data"));
        };
        let mut parts = directive.split_whitespace();
        let key = parts.next().unwrap_or("").to_ascii_lowercase();
        match key.as_str() {
            "problemname" => meta.problem_name = parts.collect::<Vec<_>>().join(" "),
            "timestamps" => meta.timestamps = parse_bool(ln, "timeStamps", parts.next())?,
            "missing" => meta.missing = parse_bool(ln, "missing", parts.next())?,
            "univariate" => meta.univariate = Some(parse_bool(ln, "univariate", parts.next())?),
            "dimensions" => meta.dimensions = Some(parse_usize(ln, "dimensions", parts.next())?),
            "equallength" => meta.equal_length = parse_bool(ln, "equalLength", parts.next())?,
            "serieslength" => {
                meta.series_length = Some(parse_usize(ln, "seriesLength", parts.next())?)
            }
            "classlabel" => {
                meta.class_label = parse_bool(ln, "classLabel", parts.next())?;
                label_names = parts.map(str::to_string).collect();
                if meta.class_label && label_names.is_empty() {
                    return Err(format_err(ln, "@classLabel true without a class list"));
                }
            }
            "data" => {
                saw_data = true;
                break;
            }
            other => log::debug!("ignoring directive @{other} on line {ln}"),
        }
    }
    if !saw_data {
        return Err(format_err(text.lines().count(), "missing @data section"));
    }
    if meta.timestamps {
        return Err(format_err(0, "timestamped series are not supported"));
    }
    if !meta.equal_length {
        return Err(format_err(
            0,
            "unequal-length datasets are not supported; the period folding needs a fixed series length",
        ));
    }

    let mut values: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut dims = meta.dimensions;
    let mut len = meta.series_length;
    let mut m = 0usize;

    for (ln, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields: Vec<&str> = line.split(':').collect();
        if meta.class_label {
            let unlabeled = match dims {
                Some(d) => fields.len() == d,
                None => fields.len() == 1 || fields.last().is_some_and(|f| f.contains(',')),
            };
            if unlabeled {
                return Err(Error::DataAt {
                    line: ln,
                    msg: "record has no class label".into(),
                });
            }
            let name = fields.pop().unwrap_or("").trim();
            let idx = label_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::DataAt {
                    line: ln,
                    msg: format!("unknown class label {name:?}"),
                })?;
            labels.push(idx);
        }
        let d = *dims.get_or_insert(fields.len());
        if fields.len() != d {
            return Err(format_err(
                ln,
                format!("expected {d} dimensions, found {}", fields.len()),
            ));
        }
        for field in fields {
            let before = values.len();
            for tok in field.split(',') {
                let tok = tok.trim();
                if tok == "?" || tok.eq_ignore_ascii_case("nan") {
                    return Err(Error::DataAt {
                        line: ln,
                        msg: "missing values are not supported".into(),
                    });
                }
                let v: f64 = tok.parse().map_err(|_| Error::DataAt {
                    line: ln,
                    msg: format!("non-numeric value {tok:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::DataAt {
                        line: ln,
                        msg: format!("non-finite value {tok:?}"),
                    });
                }
                values.push(v);
            }
            let n = values.len() - before;
            let l = *len.get_or_insert(n);
            if n != l {
                return Err(format_err(
                    ln,
                    format!("expected series length {l}, found {n} values"),
                ));
            }
        }
        m += 1;
    }
    if m == 0 {
        return Err(format_err(text.lines().count(), "no records after @data"));
    }
    let (d, l) = (dims.unwrap_or(1), len.unwrap_or(0));
    meta.dimensions = Some(d);
    meta.series_length = Some(l);
    let values = Array3::from_shape_vec((m, d, l), values)
        .map_err(|e| Error::Data(format!("inconsistent record sizes: {e}")))?;
    Ok(Dataset {
        values,
        labels,
        label_names,
        meta,
    })
}

/// Renders a dataset as `.ts` text using shortest round-trip float formatting.
pub fn render_ts(ds: &Dataset) -> String {
    let (_, d, l) = ds.values.dim();
    let mut out = String::new();
    let name = if ds.meta.problem_name.is_empty() {
        "unnamed"
    } else {
        &ds.meta.problem_name
    };
    let _ = writeln!(out, "@problemName {name}");
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    let _ = writeln!(out, "@univariate {}", d == 1);
    let _ = writeln!(out, "@dimensions {d}");
    let _ = writeln!(out, "@equalLength true");
    let _ = writeln!(out, "@seriesLength {l}");
    if ds.meta.class_label {
        let _ = writeln!(out, "@classLabel true {}", ds.label_names.join(" "));
    } else {
        let _ = writeln!(out, "@classLabel false");
    }
    let _ = writeln!(out, "@data");
    for (i, sample) in ds.values.outer_iter().enumerate() {
        for (v, row) in sample.outer_iter().enumerate() {
            if v > 0 {
                out.push(':');
            }
            for (t, x) in row.iter().enumerate() {
                if t > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x}");
            }
        }
        if ds.meta.class_label {
            let _ = write!(out, ":{}", ds.label_names[ds.labels[i]]);
        }
        out.push('\n');
    }
    out
}
