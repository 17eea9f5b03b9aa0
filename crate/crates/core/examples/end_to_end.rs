//! Generate the default synthetic corpus, train both heads, and report
//! test recall under each alignment mode.

use std::time::Instant;

use anyhow::Result;
use placetext::dataset::{generate, split, GenConfig, Part, SplitRatios};
use placetext::model::{ModelConfig, ModelParams};
use placetext::pipeline::{evaluate, EvalOptions};
use placetext::retrieval::{AlignMode, RecallOptions};
use placetext::trainer::{train_with, TrainConfig};

fn main() -> Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let gen = GenConfig {
        seed,
        ..GenConfig::default()
    };
    let ds = split(generate(&gen)?, SplitRatios::default(), seed)?;
    let (train_set, val_set, test_set) = (ds.part(Part::Train)?, ds.part(Part::Val)?, ds.part(Part::Test)?);
    println!(
        "{} locations: {} train / {} val / {} test",
        ds.len(),
        train_set.len(),
        val_set.len(),
        test_set.len()
    );

    let model = ModelConfig::default();
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let untrained = ModelParams::init(model.clone(), seed)?;
    let started = Instant::now();
    let outcome = train_with(&train_set, &val_set, &model, &config, &mut |r, _, _| {
        println!(
            "epoch {:>2}  loss {:.4}  val r@1@5m {:.3}  ({:.1}s)",
            r.epoch,
            r.mean_loss,
            r.val_recall.unwrap_or(f64::NAN),
            r.seconds
        );
        Ok(())
    })?;
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());

    for (name, params) in [("untrained", &untrained), ("trained", &outcome.best)] {
        for mode in [AlignMode::Oracle, AlignMode::Ccca, AlignMode::None] {
            let options = EvalOptions {
                recall: RecallOptions {
                    align_mode: mode,
                    ..RecallOptions::default()
                },
                shuffle_seed: seed,
                ..EvalOptions::default()
            };
            let table = evaluate(&test_set, params, &options)?;
            println!("\n{name}, {} alignment", mode.label());
            print!("{}", table.to_text());
        }
    }
    Ok(())
}
