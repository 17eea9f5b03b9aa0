//! Trains briefly, saves a checkpoint with optimizer state, reloads it and
//! checks that the restored model encodes identically.

use anyhow::{ensure, Result};
use placetext::dataset::{generate, GenConfig};
use placetext::layers::Parameters;
use placetext::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};
use placetext::model::ModelConfig;

fn main() -> Result<()> {
    let ds = generate(&GenConfig {
        grid_rows: 2,
        grid_cols: 4,
        image_tokens: 16,
        image_dim: 32,
        text_tokens: 16,
        text_dim: 32,
        ..GenConfig::default()
    })?;
    let model = ModelConfig::default().with_token_dims(32, 32);
    let config = TrainConfig {
        batch_size: 8,
        epochs: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let outcome = train(&ds.entries, &[], &model, &config)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &outcome.last, Some(&outcome.optimizer), "example run")?;
    let bytes = std::fs::metadata(&path)?.len();
    let restored = load_checkpoint(&path)?;
    println!(
        "{} parameters, {bytes} bytes on disk, provenance {:?}, optimizer step {}",
        outcome.last.flatten().len(),
        restored.provenance,
        restored.optimizer.as_ref().map_or(0, |o| o.step)
    );
    ensure!(restored.params == outcome.last, "parameters changed in the round trip");

    let view = &ds.entries[0].views[0];
    let before = outcome.last.encode_image(&view.image)?;
    let after = restored.params.encode_image(&view.image)?;
    println!("image descriptor identical after reload: {}", before == after);
    Ok(())
}
