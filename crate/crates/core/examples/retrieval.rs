//! Builds an index of image groups, queries it with shuffled text groups,
//! and prints recall under each alignment mode.

use anyhow::Result;
use placetext::ccca::{invert, ViewGroup};
use placetext::numerics::{dot, Matrix, Rng};
use placetext::retrieval::{build_index, recall_table, AlignMode, Query, RecallOptions};

fn unit_rows(mut m: Matrix) -> Matrix {
    for r in 0..m.rows() {
        let n = dot(m.row(r), m.row(r)).sqrt();
        m.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    m
}

fn main() -> Result<()> {
    let mut rng = Rng::new(2);
    let (places, views, dim) = (60, 4, 16);
    let mut entries = Vec::new();
    let mut queries = Vec::new();
    for i in 0..places {
        // Places on a 6 m grid; the text side is a noisy copy of the images.
        let (x, y) = ((i % 10) as f64 * 6.0, (i / 10) as f64 * 6.0);
        let image = unit_rows(rng.normal_matrix(views, dim, 1.0));
        let text = unit_rows(image.zip_map(&rng.normal_matrix(views, dim, 0.5), |a, b| a + b));
        let shuffle = rng.permutation(views);
        queries.push(Query {
            x_m: x,
            y_m: y,
            group: ViewGroup::new(text)?.reordered(&shuffle),
            truth: Some(invert(&shuffle)),
        });
        entries.push((format!("place-{i:02}"), (x, y), ViewGroup::new(image)?));
    }
    let index = build_index(entries)?;

    for mode in [AlignMode::Oracle, AlignMode::Ccca, AlignMode::None] {
        let options = RecallOptions {
            align_mode: mode,
            ..RecallOptions::default()
        };
        println!("{} alignment", mode.label());
        print!("{}", recall_table(&queries, &index, &options)?.to_text());
    }
    Ok(())
}
