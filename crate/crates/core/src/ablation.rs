//! One-axis sweeps over training, model and evaluation choices.

use std::fmt;
use std::str::FromStr;

use crate::ccca::CccaVariant;
use crate::dataset::LocationEntry;
use crate::error::{Error, Result};
use crate::image_aggregator::{Aggregation, TemperatureMode};
use crate::model::{ModelConfig, ModelParams};
use crate::pipeline::{encode_locations, evaluate, evaluate_encoded, prepare, EvalOptions};
use crate::report::Tsv;
use crate::retrieval::{AlignMode, RecallTable};
use crate::text_head::TextHeadVariant;
use crate::trainer::{train, Strategy, TrainConfig};

/// The swept dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    TrainingStrategy,
    TextHead,
    Aggregation,
    Temperature,
    CccaVariant,
    Truncation,
    Views,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Self::TrainingStrategy,
        Self::TextHead,
        Self::Aggregation,
        Self::Temperature,
        Self::CccaVariant,
        Self::Truncation,
        Self::Views,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::TrainingStrategy => "training-strategy",
            Self::TextHead => "text-head",
            Self::Aggregation => "aggregation",
            Self::Temperature => "temperature",
            Self::CccaVariant => "ccca-variant",
            Self::Truncation => "truncation",
            Self::Views => "views",
        }
    }

    /// Whether each setting trains its own model; otherwise one trained
    /// model is evaluated under every setting.
    pub fn retrains(self) -> bool {
        matches!(
            self,
            Self::TrainingStrategy | Self::TextHead | Self::Aggregation | Self::Temperature
        )
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.label() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.label()).collect();
            Error::config(format!("unknown ablation axis {s:?}, expected one of {}", names.join(", ")))
        })
    }
}

/// Recall of one setting along an axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub table: RecallTable,
}

/// Train / validation / test partitions used by a sweep.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [LocationEntry],
    pub val: &'a [LocationEntry],
    pub test: &'a [LocationEntry],
}

/// Base configuration of a sweep. `trained` may hold the model already
/// trained under exactly `model` and `train`; it is reused wherever a
/// setting coincides with the base instead of being retrained.
#[derive(Clone, Copy, Debug)]
pub struct Base<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub eval: &'a EvalOptions,
    pub trained: Option<&'a ModelParams>,
}

fn train_or_reuse(
    data: Splits<'_>,
    base: Base<'_>,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<ModelParams> {
    match base.trained {
        Some(p) if model == base.model && config == base.train => Ok(p.clone()),
        _ => Ok(train(data.train, data.val, model, config)?.best),
    }
}

/// Runs every setting of `axis` and reports test recall for each, in a
/// fixed setting order.
pub fn ablate(axis: Axis, data: Splits<'_>, base: Base<'_>) -> Result<Vec<AblationRow>> {
    if data.test.is_empty() {
        return Err(Error::domain("ablation needs a non-empty test split"));
    }
    let retrained = |setting: &str, model: ModelConfig, config: TrainConfig| -> Result<AblationRow> {
        let params = train_or_reuse(data, base, &model, &config)?;
        Ok(AblationRow {
            setting: setting.to_string(),
            table: evaluate(data.test, &params, base.eval)?,
        })
    };
    if axis.retrains() {
        let m = base.model.clone();
        let t = base.train.clone();
        return match axis {
            Axis::TrainingStrategy => [Strategy::Single, Strategy::Group]
                .into_iter()
                .map(|s| retrained(s.label(), m.clone(), TrainConfig { strategy: s, ..t.clone() }))
                .collect(),
            Axis::TextHead => [
                TextHeadVariant::M,
                TextHeadVariant::MT2,
                TextHeadVariant::T1M,
                TextHeadVariant::T1MT2,
            ]
            .into_iter()
            .map(|v| {
                let mut m = m.clone();
                m.text.variant = v;
                retrained(v.label(), m, t.clone())
            })
            .collect(),
            Axis::Aggregation => [
                ("sinkhorn", Aggregation::OptimalTransport),
                ("maxpool", Aggregation::MaxPool),
            ]
            .into_iter()
            .map(|(name, a)| retrained(name, m.clone().with_aggregation(a), t.clone()))
            .collect(),
            Axis::Temperature => [
                ("learnable", TemperatureMode::Learnable),
                ("removed", TemperatureMode::Removed),
            ]
            .into_iter()
            .map(|(name, mode)| {
                let mut m = m.clone();
                m.image.temperature = mode;
                retrained(name, m, t.clone())
            })
            .collect(),
            _ => unreachable!("evaluation-only axis"),
        };
    }
    let params = train_or_reuse(data, base, base.model, base.train)?;
    let eval = base.eval;
    match axis {
        Axis::CccaVariant => {
            let prepared = prepare(data.test, eval.views, eval.truncate)?;
            let encoded = encode_locations(&prepared, &params, eval.threads)?;
            let mut rows = Vec::new();
            let with = |mode: AlignMode, variant: CccaVariant| {
                let mut o = eval.clone();
                o.recall.align_mode = mode;
                o.recall.ccca.variant = variant;
                o
            };
            for variant in [
                CccaVariant::Full,
                CccaVariant::WithoutCascade,
                CccaVariant::WithoutCosine,
            ] {
                rows.push(AblationRow {
                    setting: variant.label().to_string(),
                    table: evaluate_encoded(&encoded, &with(AlignMode::Ccca, variant))?,
                });
            }
            for mode in [AlignMode::None, AlignMode::Oracle] {
                rows.push(AblationRow {
                    setting: mode.label().to_string(),
                    table: evaluate_encoded(&encoded, &with(mode, CccaVariant::Full))?,
                });
            }
            Ok(rows)
        }
        Axis::Truncation => [0.25, 0.5, 0.75, 1.0]
            .into_iter()
            .map(|f| {
                let o = EvalOptions {
                    truncate: Some(f),
                    ..eval.clone()
                };
                Ok(AblationRow {
                    setting: format!("{f}"),
                    table: evaluate(data.test, &params, &o)?,
                })
            })
            .collect(),
        Axis::Views => {
            let max = data.test.iter().map(|e| e.views.len()).min().unwrap_or(0);
            (1..=max)
                .map(|n| {
                    let o = EvalOptions {
                        views: Some(n),
                        ..eval.clone()
                    };
                    Ok(AblationRow {
                        setting: n.to_string(),
                        table: evaluate(data.test, &params, &o)?,
                    })
                })
                .collect()
        }
        _ => unreachable!("retraining axis"),
    }
}

/// Column name for recall at `k` within `eps` meters.
pub fn cell_name(k: usize, eps_m: f64) -> String {
    format!("r@{k}@{eps_m}m")
}

/// One row per setting, one column per `(k, eps)` cell.
pub fn ablation_tsv(axis: Axis, rows: &[AblationRow], meta: &[(&str, String)]) -> Result<Tsv> {
    let first = rows
        .first()
        .ok_or_else(|| Error::domain("ablation produced no rows"))?;
    let mut columns = vec![axis.label().to_string()];
    for &k in &first.table.ks {
        for &e in &first.table.eps_m {
            columns.push(cell_name(k, e));
        }
    }
    let body = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.setting.clone()];
            line.extend(r.table.recall.iter().flatten().map(|x| format!("{x:.6}")));
            line
        })
        .collect();
    let mut tsv = Tsv::new(columns, body);
    tsv.meta = meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    tsv.meta.push(("axis".into(), axis.label().into()));
    Ok(tsv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in Axis::ALL {
            assert_eq!(a.label().parse::<Axis>().unwrap(), a);
        }
        assert!("colour".parse::<Axis>().is_err());
    }

    #[test]
    fn table_has_one_column_per_cell() {
        let table = RecallTable {
            ks: vec![1, 5],
            eps_m: vec![5.0, 10.0],
            recall: vec![vec![0.5, 0.75], vec![1.0, 1.0]],
            queries: 4,
        };
        let rows = vec![AblationRow {
            setting: "1".into(),
            table,
        }];
        let tsv = ablation_tsv(Axis::Views, &rows, &[("config_hash", "00ff".into())]).unwrap();
        assert_eq!(tsv.columns, ["views", "r@1@5m", "r@1@10m", "r@5@5m", "r@5@10m"]);
        assert_eq!(tsv.rows[0], ["1", "0.500000", "0.750000", "1.000000", "1.000000"]);
        assert_eq!(tsv.get_meta("axis"), Some("views"));
        let back = Tsv::parse(&tsv.to_string()).unwrap();
        assert_eq!(back, tsv);
    }
}
