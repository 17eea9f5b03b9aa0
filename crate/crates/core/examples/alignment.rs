//! Recovers a shuffled view order with cascaded cross-attention cosine
//! alignment and compares the score variants.

use anyhow::Result;
use placetext::ccca::{align, invert, CccaConfig, CccaVariant, ViewGroup};
use placetext::numerics::{dot, Matrix, Rng};

fn unit_rows(mut m: Matrix) -> Matrix {
    for r in 0..m.rows() {
        let n = dot(m.row(r), m.row(r)).sqrt();
        m.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    m
}

fn main() -> Result<()> {
    let mut rng = Rng::new(4);
    let trials = 500;
    for noise in [0.05, 0.2, 0.4] {
        let mut hits = [0usize; 3];
        for _ in 0..trials {
            let text = unit_rows(rng.normal_matrix(4, 32, 1.0));
            let image = unit_rows(text.zip_map(&rng.normal_matrix(4, 32, noise), |a, b| a + b));
            let shuffle = rng.permutation(4);
            let (m, q) = (ViewGroup::new(text)?, ViewGroup::new(image)?.reordered(&shuffle));
            for (h, variant) in hits.iter_mut().zip(CccaVariant::ALL) {
                let config = CccaConfig {
                    variant,
                    ..CccaConfig::default()
                };
                if align(&m, &q, &config)?.permutation == invert(&shuffle) {
                    *h += 1;
                }
            }
        }
        let cells: Vec<String> = CccaVariant::ALL
            .iter()
            .zip(hits)
            .map(|(v, h)| format!("{} {:.3}", v.label(), h as f64 / trials as f64))
            .collect();
        println!("noise {noise:<4} recovery: {}", cells.join("  "));
    }

    let m = ViewGroup::new(unit_rows(rng.normal_matrix(4, 8, 1.0)))?;
    let a = align(&m, &m.reordered(&[2, 0, 3, 1]), &CccaConfig::default())?;
    println!("\nbest order {:?} score {:.4}; top candidates:", a.permutation, a.score);
    let mut ranked = a.candidates.clone();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1));
    for (perm, s) in ranked.iter().take(4) {
        println!("  {perm:?} {s:.4}");
    }
    Ok(())
}
