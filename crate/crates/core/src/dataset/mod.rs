//! Multi-view cross-modal locations: the synthetic generator, the JSONL
//! interchange format, location-level splits, and the description
//! truncation and view-subset transforms used by the robustness sweeps.

mod generate;
mod jsonl;
mod transform;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_aggregator::ImageTokenSet;
use crate::text_head::TextTokenSequence;

pub use generate::{generate, GenConfig};
pub use jsonl::{load_jsonl, read_jsonl, save_jsonl, write_jsonl, FORMAT};
pub use transform::{split, subset_views, truncate_dataset, truncate_text, SplitRatios};

/// Maximum number of view slots per location.
pub const MAX_VIEWS: usize = 4;

/// One directional observation: an image and its description.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// Ground-truth slot, `0..4`.
    pub slot: usize,
    pub image: ImageTokenSet,
    pub text: TextTokenSequence,
}

/// A location with planar coordinates in meters and 1–4 populated views in
/// ground-truth slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationEntry {
    pub id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub views: Vec<View>,
}

impl LocationEntry {
    pub fn new(id: impl Into<String>, x_m: f64, y_m: f64, mut views: Vec<View>) -> Result<Self> {
        let id = id.into();
        if !x_m.is_finite() || !y_m.is_finite() {
            return Err(Error::domain(format!("location {id} has non-finite coordinates")));
        }
        if views.is_empty() || views.len() > MAX_VIEWS {
            return Err(Error::domain(format!(
                "location {id} has {} views, expected 1..={MAX_VIEWS}",
                views.len()
            )));
        }
        views.sort_by_key(|v| v.slot);
        for w in views.windows(2) {
            if w[0].slot == w[1].slot {
                return Err(Error::domain(format!("location {id} repeats view {}", w[0].slot)));
            }
        }
        if let Some(v) = views.iter().find(|v| v.slot >= MAX_VIEWS) {
            return Err(Error::domain(format!("location {id} has view slot {}", v.slot)));
        }
        Ok(Self { id, x_m, y_m, views })
    }

    pub fn coords(&self) -> (f64, f64) {
        (self.x_m, self.y_m)
    }

    /// Euclidean ground distance in meters.
    pub fn distance_to(&self, other: &LocationEntry) -> f64 {
        (self.x_m - other.x_m).hypot(self.y_m - other.y_m)
    }
}

/// Location ids of the three partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// One partition of a split dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn ids(&self, part: Part) -> &[String] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::domain(format!("location {id} appears in two splits")));
            }
        }
        Ok(())
    }
}

/// Provenance carried in the optional first JSONL record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Splits>,
    /// Free-form metadata, e.g. backbone identifiers written by an exporter.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Locations plus optional split labels and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub entries: Vec<LocationEntry>,
    pub splits: Option<Splits>,
    pub generator: Option<GenConfig>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    pub fn new(entries: Vec<LocationEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::domain(format!("duplicate location id {}", e.id)));
            }
        }
        Ok(Self {
            entries,
            splits: None,
            generator: None,
            extra: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LocationEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Image token width shared by every view.
    pub fn image_dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.views[0].image.token_dim())
    }

    /// Text token width shared by every view.
    pub fn text_dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.views[0].text.token_dim())
    }

    /// Attaches split labels after checking they name existing, disjoint
    /// locations.
    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.check_disjoint()?;
        let known: HashSet<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        for id in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if !known.contains(id.as_str()) {
                return Err(Error::domain(format!("split names unknown location {id}")));
            }
        }
        self.splits = Some(splits);
        Ok(self)
    }

    /// Entries of one partition in dataset order.
    pub fn part(&self, part: Part) -> Result<Vec<LocationEntry>> {
        let splits = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::config("dataset has no split labels"))?;
        let wanted: HashSet<&str> = splits.ids(part).iter().map(String::as_str).collect();
        Ok(self
            .entries
            .iter()
            .filter(|e| wanted.contains(e.id.as_str()))
            .cloned()
            .collect())
    }

    /// Header describing this dataset's provenance.
    pub fn header(&self) -> Result<Header> {
        let config_hash = match &self.generator {
            Some(g) => Some(crate::provenance::config_hash(g)?),
            None => None,
        };
        Ok(Header {
            format: FORMAT.to_string(),
            config_hash,
            generator: self.generator.clone(),
            splits: self.splits.clone(),
            extra: self.extra.clone(),
        })
    }
}
