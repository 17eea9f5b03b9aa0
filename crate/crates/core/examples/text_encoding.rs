//! Encodes one synthetic description with every text-head variant and
//! shows which transforms leave the descriptor unchanged.

use anyhow::Result;
use placetext::dataset::{generate, truncate_text, GenConfig};
use placetext::model::{ModelConfig, ModelParams};
use placetext::text_head::{TextHeadVariant, TextTokenSequence};

fn main() -> Result<()> {
    let ds = generate(&GenConfig {
        grid_rows: 1,
        grid_cols: 2,
        ..GenConfig::default()
    })?;
    let text = &ds.entries[0].views[0].text;
    let other = &ds.entries[1].views[0].text;
    println!(
        "description: {} tokens of width {} in {} sentences",
        text.token_count(),
        text.token_dim(),
        text.sentence_count()
    );

    // Reverse the tokens inside each sentence; sentence max-pooling makes
    // the descriptor blind to this.
    let mut order = Vec::new();
    let mut start = 0;
    for &end in text.sentence_breaks() {
        order.extend((start..end).rev());
        start = end;
    }
    let shuffled = TextTokenSequence::new(text.tokens().select_rows(&order), text.sentence_breaks().to_vec())?;
    let half = truncate_text(text, 0.5)?;

    for variant in TextHeadVariant::ALL {
        let mut config = ModelConfig::default();
        config.text.variant = variant;
        let params = ModelParams::init(config, 0)?;
        let d = params.encode_text(text)?;
        println!(
            "{:<8} dim {:>3}  within-sentence shuffle {:.6}  half text {:.4}  other place {:.4}",
            variant.label(),
            d.dim(),
            d.similarity(&params.encode_text(&shuffled)?),
            d.similarity(&params.encode_text(&half)?),
            d.similarity(&params.encode_text(other)?),
        );
    }
    Ok(())
}
