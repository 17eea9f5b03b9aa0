//! Sweeps the evaluation-only axes (alignment variant, view count and
//! description length) for one trained model on a reduced corpus.

use anyhow::Result;
use placetext::ablation::{ablate, ablation_tsv, Axis, Base, Splits};
use placetext::dataset::{generate, split, GenConfig, Part, SplitRatios};
use placetext::model::ModelConfig;
use placetext::pipeline::EvalOptions;
use placetext::trainer::{train, TrainConfig};

fn main() -> Result<()> {
    let ds = split(
        generate(&GenConfig {
            grid_rows: 7,
            grid_cols: 10,
            ..GenConfig::default()
        })?,
        SplitRatios::default(),
        0,
    )?;
    let (tr, va, te) = (ds.part(Part::Train)?, ds.part(Part::Val)?, ds.part(Part::Test)?);
    let model = ModelConfig::default();
    let config = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    let eval = EvalOptions::default();
    let trained = train(&tr, &va, &model, &config)?.best;
    let base = Base {
        model: &model,
        train: &config,
        eval: &eval,
        trained: Some(&trained),
    };
    let data = Splits {
        train: &tr,
        val: &va,
        test: &te,
    };
    for axis in [Axis::CccaVariant, Axis::Views, Axis::Truncation] {
        let rows = ablate(axis, data, base)?;
        print!("{}", ablation_tsv(axis, &rows, &[])?);
        println!();
    }
    Ok(())
}
