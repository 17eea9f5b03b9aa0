//! Line-delimited JSON interchange: one record per (location, view,
//! modality), optionally preceded by a single `{"header": {...}}` record.
//!
//! Tokens are stored in single precision and widened on load.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Header, LocationEntry, View};
use crate::error::{Error, Result};
use crate::image_aggregator::ImageTokenSet;
use crate::numerics::Matrix;
use crate::text_head::TextTokenSequence;

/// Format tag written into the header record.
pub const FORMAT: &str = "placetext-jsonl/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Modality {
    Image,
    Text,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    location_id: String,
    x_m: f64,
    y_m: f64,
    view: usize,
    modality: Modality,
    tokens: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentence_breaks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_token: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: Header,
}

fn narrow(m: &Matrix) -> Vec<Vec<f32>> {
    m.row_iter()
        .map(|r| r.iter().map(|&x| x as f32).collect())
        .collect()
}

fn widen(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect()
}

/// Writes `dataset`, header first.
pub fn write_jsonl<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let io = |e| Error::io("<jsonl output>", e);
    let header = HeaderLine {
        header: dataset.header()?,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    for e in &dataset.entries {
        for v in &e.views {
            let image = Record {
                location_id: e.id.clone(),
                x_m: e.x_m,
                y_m: e.y_m,
                view: v.slot,
                modality: Modality::Image,
                tokens: narrow(v.image.local_tokens()),
                sentence_breaks: None,
                global_token: v
                    .image
                    .global_token()
                    .map(|g| g.iter().map(|&x| x as f32).collect()),
            };
            let text = Record {
                location_id: e.id.clone(),
                x_m: e.x_m,
                y_m: e.y_m,
                view: v.slot,
                modality: Modality::Text,
                tokens: narrow(v.text.tokens()),
                sentence_breaks: Some(v.text.sentence_breaks().to_vec()),
                global_token: None,
            };
            for r in [image, text] {
                serde_json::to_writer(&mut out, &r)?;
                out.write_all(b"\n").map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(dataset, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), path)
}

#[derive(Default)]
struct Partial {
    x_m: f64,
    y_m: f64,
    image: BTreeMap<usize, ImageTokenSet>,
    text: BTreeMap<usize, TextTokenSequence>,
}

/// Parses interchange records; `label` names the source in error messages.
pub fn read_jsonl<R: Read>(input: R, label: impl AsRef<Path>) -> Result<Dataset> {
    let label = label.as_ref();
    let fail = |line: usize, message: String| Error::Record {
        path: label.to_path_buf(),
        line,
        message,
    };
    let mut header: Option<Header> = None;
    let mut order: Vec<String> = Vec::new();
    let mut partial: HashMap<String, Partial> = HashMap::new();
    let mut image_dim: Option<usize> = None;
    let mut text_dim: Option<usize> = None;
    let mut first_record = true;

    for (i, line) in BufReader::new(input).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(label, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| fail(lineno, e.to_string()))?;
        if value.get("header").is_some() {
            if !first_record {
                return Err(fail(lineno, "header record must come first".into()));
            }
            first_record = false;
            let h: HeaderLine =
                serde_json::from_value(value).map_err(|e| fail(lineno, e.to_string()))?;
            header = Some(h.header);
            continue;
        }
        first_record = false;
        let rec: Record =
            serde_json::from_value(value).map_err(|e| fail(lineno, e.to_string()))?;
        if rec.view >= super::MAX_VIEWS {
            return Err(fail(lineno, format!("view {} outside 0..=3", rec.view)));
        }
        let rows = widen(&rec.tokens);
        if rows.is_empty() || rows[0].is_empty() {
            return Err(fail(lineno, "record has no tokens".into()));
        }
        let width = rows[0].len();
        let tokens = Matrix::from_rows(&rows).map_err(|e| fail(lineno, e.to_string()))?;
        let p = match partial.get_mut(&rec.location_id) {
            Some(p) => {
                if p.x_m != rec.x_m || p.y_m != rec.y_m {
                    return Err(fail(
                        lineno,
                        format!("coordinates of {} disagree across records", rec.location_id),
                    ));
                }
                p
            }
            None => {
                order.push(rec.location_id.clone());
                partial.entry(rec.location_id.clone()).or_insert(Partial {
                    x_m: rec.x_m,
                    y_m: rec.y_m,
                    ..Partial::default()
                })
            }
        };
        match rec.modality {
            Modality::Image => {
                if rec.sentence_breaks.is_some() {
                    return Err(fail(lineno, "image record carries sentence_breaks".into()));
                }
                check_width(&mut image_dim, width, "image").map_err(|m| fail(lineno, m))?;
                let global = rec
                    .global_token
                    .map(|g| g.into_iter().map(f64::from).collect());
                let set = ImageTokenSet::new(tokens, global).map_err(|e| fail(lineno, e.to_string()))?;
                if p.image.insert(rec.view, set).is_some() {
                    return Err(fail(lineno, format!("duplicate image for view {}", rec.view)));
                }
            }
            Modality::Text => {
                if rec.global_token.is_some() {
                    return Err(fail(lineno, "text record carries global_token".into()));
                }
                let breaks = rec
                    .sentence_breaks
                    .ok_or_else(|| fail(lineno, "text record lacks sentence_breaks".into()))?;
                check_width(&mut text_dim, width, "text").map_err(|m| fail(lineno, m))?;
                let seq = TextTokenSequence::new(tokens, breaks)
                    .map_err(|e| fail(lineno, e.to_string()))?;
                if p.text.insert(rec.view, seq).is_some() {
                    return Err(fail(lineno, format!("duplicate text for view {}", rec.view)));
                }
            }
        }
    }

    let mut entries = Vec::with_capacity(order.len());
    for id in order {
        let mut p = partial.remove(&id).expect("recorded id");
        let mut views = Vec::new();
        for (slot, image) in std::mem::take(&mut p.image) {
            let text = p.text.remove(&slot).ok_or_else(|| {
                Error::domain(format!("{id} view {slot} has an image but no text"))
            })?;
            views.push(View { slot, image, text });
        }
        if let Some(slot) = p.text.keys().next() {
            return Err(Error::domain(format!("{id} view {slot} has text but no image")));
        }
        entries.push(LocationEntry::new(id, p.x_m, p.y_m, views)?);
    }
    let mut ds = Dataset::new(entries)?;
    if let Some(h) = header {
        ds.generator = h.generator;
        ds.extra = h.extra;
        if let Some(s) = h.splits {
            ds = ds.with_splits(s)?;
        }
    }
    Ok(ds)
}

fn check_width(seen: &mut Option<usize>, width: usize, what: &str) -> Result<(), String> {
    match *seen {
        Some(w) if w != width => Err(format!(
            "{what} token width {width} differs from earlier width {w}"
        )),
        _ => {
            *seen = Some(width);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, split, GenConfig, SplitRatios};

    fn tiny() -> Dataset {
        let cfg = GenConfig {
            grid_rows: 2,
            grid_cols: 4,
            image_tokens: 3,
            image_dim: 4,
            text_tokens: 5,
            text_dim: 3,
            sentence_len: 2,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        split(ds, SplitRatios::default(), 1).unwrap()
    }

    fn to_string(ds: &Dataset) -> String {
        let mut buf = Vec::new();
        write_jsonl(ds, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let ds = tiny();
        let text = to_string(&ds);
        let back = read_jsonl(text.as_bytes(), "mem").unwrap();
        assert_eq!(back, ds);
        assert_eq!(to_string(&back), text);
    }

    #[test]
    fn headerless_files_load() {
        let ds = tiny();
        let text = to_string(&ds);
        let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let back = read_jsonl(body.as_bytes(), "mem").unwrap();
        assert_eq!(back.entries, ds.entries);
        assert!(back.splits.is_none());
    }

    #[test]
    fn missing_view_is_rejected_with_line_number() {
        let line = r#"{"location_id":"a","x_m":0,"y_m":0,"modality":"image","tokens":[[1.0]]}"#;
        let err = read_jsonl(line.as_bytes(), "f.jsonl").unwrap_err();
        match err {
            Error::Record { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("view"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mixed_image_widths_are_rejected() {
        let text = concat!(
            r#"{"location_id":"a","x_m":0,"y_m":0,"view":0,"modality":"image","tokens":[[1.0,2.0]]}"#,
            "\n",
            r#"{"location_id":"b","x_m":6,"y_m":0,"view":0,"modality":"image","tokens":[[1.0,2.0,3.0]]}"#,
            "\n"
        );
        match read_jsonl(text.as_bytes(), "f").unwrap_err() {
            Error::Record { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_fields_and_late_headers_are_rejected() {
        let bad = r#"{"location_id":"a","x_m":0,"y_m":0,"view":0,"modality":"image","tokens":[[1.0]],"colour":1}"#;
        assert!(read_jsonl(bad.as_bytes(), "f").is_err());
        let ds = tiny();
        let text = to_string(&ds);
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 1);
        let swapped = lines.join("\n");
        match read_jsonl(swapped.as_bytes(), "f").unwrap_err() {
            Error::Record { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn exporter_metadata_survives() {
        let text = concat!(
            r#"{"header":{"format":"placetext-jsonl/1","text_backbone":"t5-base"}}"#,
            "\n",
            r#"{"location_id":"a","x_m":0,"y_m":0,"view":0,"modality":"image","tokens":[[1.0,2.0]],"global_token":[0.5,0.5]}"#,
            "\n",
            r#"{"location_id":"a","x_m":0,"y_m":0,"view":0,"modality":"text","tokens":[[1.0],[2.0]],"sentence_breaks":[2]}"#,
            "\n"
        );
        let ds = read_jsonl(text.as_bytes(), "f").unwrap();
        assert_eq!(ds.extra["text_backbone"], "t5-base");
        assert_eq!(ds.entries[0].views[0].image.global_token(), Some(&[0.5, 0.5][..]));
    }

    #[test]
    fn unpaired_modalities_are_rejected() {
        let text = r#"{"location_id":"a","x_m":0,"y_m":0,"view":0,"modality":"image","tokens":[[1.0]]}"#;
        assert!(matches!(read_jsonl(text.as_bytes(), "f"), Err(Error::Domain(_))));
    }
}
