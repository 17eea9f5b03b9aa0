//! Generates a small corpus, splits it, writes JSONL with a header record
//! and reads it back; then applies the evaluation-time transforms.

use anyhow::{ensure, Result};
use placetext::dataset::{generate, load_jsonl, save_jsonl, split, subset_views, truncate_dataset, GenConfig, Part, SplitRatios};

fn main() -> Result<()> {
    let gen = GenConfig {
        grid_rows: 3,
        grid_cols: 5,
        image_tokens: 8,
        image_dim: 16,
        text_tokens: 12,
        text_dim: 16,
        sentence_len: 4,
        ..GenConfig::default()
    };
    let ds = split(generate(&gen)?, SplitRatios::default(), 3)?;
    for part in [Part::Train, Part::Val, Part::Test] {
        let ids: Vec<String> = ds.part(part)?.into_iter().map(|e| e.id).collect();
        println!("{part:?}: {ids:?}");
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("dataset.jsonl");
    save_jsonl(&ds, &path)?;
    let text = std::fs::read_to_string(&path)?;
    let header = text.lines().next().unwrap_or_default();
    println!("\n{} lines, header record starts: {}...", text.lines().count(), &header[..header.len().min(100)]);
    let back = load_jsonl(&path)?;
    ensure!(back == ds, "round trip changed the dataset");

    let entry = &ds.entries[0];
    let two = subset_views(entry, 2)?;
    let short = truncate_dataset(&ds, 0.25)?;
    println!(
        "\n{}: {} views -> {}; first description {} tokens -> {} at 25%",
        entry.id,
        entry.views.len(),
        two.views.len(),
        entry.views[0].text.token_count(),
        short.entries[0].views[0].text.token_count()
    );
    Ok(())
}
