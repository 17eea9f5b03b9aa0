//! Tab-separated report files: `# key<TAB>value` metadata lines, one header
//! row, then data rows.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tsv {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Tsv {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<String>>) -> Self {
        Self {
            meta: Vec::new(),
            columns,
            rows,
        }
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::config(format!("tsv line {line}: {m}"));
        let mut out = Tsv::default();
        let mut have_header = false;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                if have_header {
                    return Err(bad(i + 1, "metadata after the header row"));
                }
                let (k, v) = rest.split_once('\t').ok_or_else(|| bad(i + 1, "metadata needs a tab"))?;
                out.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
            if !have_header {
                out.columns = cells;
                have_header = true;
            } else if cells.len() != out.columns.len() {
                return Err(bad(
                    i + 1,
                    &format!("{} cells, header has {}", cells.len(), out.columns.len()),
                ));
            } else {
                out.rows.push(cells);
            }
        }
        if !have_header {
            return Err(Error::config("tsv has no header row"));
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for Tsv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.meta {
            writeln!(f, "# {k}\t{v}")?;
        }
        writeln!(f, "{}", self.columns.join("\t"))?;
        for r in &self.rows {
            writeln!(f, "{}", r.join("\t"))?;
        }
        Ok(())
    }
}
