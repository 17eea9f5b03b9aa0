use serde::{Deserialize, Serialize};

use super::{Dataset, LocationEntry, View, MAX_VIEWS};
use crate::error::{Error, Result};
use crate::image_aggregator::ImageTokenSet;
use crate::numerics::{Matrix, Rng};
use crate::text_head::TextTokenSequence;

/// Synthetic corpus parameters.
///
/// Every location draws a latent `z`; view `v` sees `z_v = R_v z + o_v`
/// with a random rotation `R_v` and offset `o_v` shared by all locations.
/// Image token `k` is `A_img[k] z_v` plus noise. The text side applies
/// `A_txt[k]` to a partially decorrelated copy of `z_v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Distance between grid neighbours in meters.
    pub spacing_m: f64,
    pub latent_dim: usize,
    pub views: usize,
    pub image_tokens: usize,
    pub image_dim: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
    /// Tokens per sentence; the last sentence may be shorter.
    pub sentence_len: usize,
    pub image_noise: f64,
    pub text_noise: f64,
    /// Correlation in `[0, 1]` between the text latent and the view latent.
    pub correlation: f64,
    /// Scale of the per-view offsets `o_v`.
    pub view_offset: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            grid_rows: 14,
            grid_cols: 23,
            spacing_m: 6.0,
            latent_dim: 8,
            views: 4,
            image_tokens: 64,
            image_dim: 128,
            text_tokens: 32,
            text_dim: 128,
            sentence_len: 8,
            image_noise: 0.35,
            text_noise: 0.25,
            correlation: 0.99,
            view_offset: 4.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("latent_dim", self.latent_dim),
            ("image_tokens", self.image_tokens),
            ("image_dim", self.image_dim),
            ("text_tokens", self.text_tokens),
            ("text_dim", self.text_dim),
            ("sentence_len", self.sentence_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.views == 0 || self.views > MAX_VIEWS {
            return Err(Error::config(format!(
                "views must be in 1..={MAX_VIEWS}, got {}",
                self.views
            )));
        }
        if !(self.spacing_m > 0.0) || !self.spacing_m.is_finite() {
            return Err(Error::config("spacing_m must be positive"));
        }
        for (name, x) in [
            ("image_noise", self.image_noise),
            ("text_noise", self.text_noise),
            ("view_offset", self.view_offset),
        ] {
            if !(x >= 0.0) || !x.is_finite() {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::config("correlation must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn location_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Sentence ends for a full-length synthetic description.
    pub fn sentence_breaks(&self) -> Vec<usize> {
        let mut breaks: Vec<usize> = (1..)
            .map(|s| s * self.sentence_len)
            .take_while(|&b| b < self.text_tokens)
            .collect();
        breaks.push(self.text_tokens);
        breaks
    }
}

/// Maps shared by every location.
struct World {
    rotations: Vec<Matrix>,
    offsets: Vec<Vec<f64>>,
    image_maps: Vec<Matrix>,
    text_maps: Vec<Matrix>,
}

/// Stream id reserved for the shared maps; locations use their index.
const WORLD_STREAM: u64 = u64::MAX;

impl World {
    fn draw(config: &GenConfig, root: &Rng) -> Self {
        let mut rng = root.substream(WORLD_STREAM);
        let l = config.latent_dim;
        let rotations = (0..config.views)
            .map(|_| orthogonal(&mut rng, l))
            .collect();
        let offsets = (0..config.views)
            .map(|_| rng.normal_vec(l, config.view_offset))
            .collect();
        let map_std = 1.0 / (l as f64).sqrt();
        let image_maps = (0..config.image_tokens)
            .map(|_| rng.normal_matrix(l, config.image_dim, map_std))
            .collect();
        let text_maps = (0..config.text_tokens)
            .map(|_| rng.normal_matrix(l, config.text_dim, map_std))
            .collect();
        Self {
            rotations,
            offsets,
            image_maps,
            text_maps,
        }
    }
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian rows.
fn orthogonal(rng: &mut Rng, n: usize) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = rng.normal_vec(n, 1.0);
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_rows(&rows).expect("square rows")
}

/// Rounds through single precision so that files round-trip exactly.
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

fn tokens(maps: &[Matrix], latent: &[f64], noise: f64, rng: &mut Rng) -> Matrix {
    let z = Matrix::row_vector(latent);
    let rows: Vec<Vec<f64>> = maps
        .iter()
        .map(|a| {
            let clean = z.matmul(a);
            clean
                .as_slice()
                .iter()
                .map(|&c| f32_exact(c + noise * rng.normal()))
                .collect()
        })
        .collect();
    Matrix::from_rows(&rows).expect("non-empty token rows")
}

/// Builds the synthetic corpus; a pure function of `config`.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let world = World::draw(config, &root);
    let l = config.latent_dim;
    let rho = config.correlation;
    let rho_c = (1.0 - rho * rho).sqrt();
    let breaks = config.sentence_breaks();
    let mut entries = Vec::with_capacity(config.location_count());
    for r in 0..config.grid_rows {
        for c in 0..config.grid_cols {
            let index = (r * config.grid_cols + c) as u64;
            let mut rng = root.substream(index);
            let z = Matrix::row_vector(&rng.normal_vec(l, 1.0));
            let mut views = Vec::with_capacity(config.views);
            for slot in 0..config.views {
                let mut zv = z.matmul_t(&world.rotations[slot]).into_vec();
                zv.iter_mut()
                    .zip(&world.offsets[slot])
                    .for_each(|(a, o)| *a += o);
                let xi = rng.normal_vec(l, 1.0);
                let zt: Vec<f64> = zv.iter().zip(&xi).map(|(a, e)| rho * a + rho_c * e).collect();
                let image_tokens = tokens(&world.image_maps, &zv, config.image_noise, &mut rng);
                let text_tokens = tokens(&world.text_maps, &zt, config.text_noise, &mut rng);
                let global: Vec<f64> = image_tokens
                    .col_sums()
                    .into_iter()
                    .map(|s| f32_exact(s / config.image_tokens as f64))
                    .collect();
                views.push(View {
                    slot,
                    image: ImageTokenSet::new(image_tokens, Some(global))?,
                    text: TextTokenSequence::new(text_tokens, breaks.clone())?,
                });
            }
            entries.push(LocationEntry::new(
                format!("loc-{r:03}-{c:03}"),
                c as f64 * config.spacing_m,
                r as f64 * config.spacing_m,
                views,
            )?);
        }
    }
    let mut ds = Dataset::new(entries)?;
    ds.generator = Some(config.clone());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            grid_rows: 3,
            grid_cols: 4,
            image_tokens: 4,
            text_tokens: 10,
            sentence_len: 4,
            ..GenConfig::default()
        }
    }

    #[test]
    fn rotations_are_orthogonal() {
        let mut rng = Rng::new(3);
        let r = orthogonal(&mut rng, 6);
        let rrt = r.matmul_t(&r);
        assert!(rrt.max_abs_diff(&Matrix::identity(6)) < 1e-12);
    }

    #[test]
    fn grid_layout_and_ids() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.entries[0].id, "loc-000-000");
        assert_eq!(ds.entries[5].id, "loc-001-001");
        assert_eq!(ds.entries[5].coords(), (6.0, 6.0));
        for e in &ds.entries {
            assert_eq!(e.views.len(), 4);
            assert_eq!(e.views[0].text.sentence_breaks(), &[4, 8, 10]);
            assert_eq!(e.views[0].image.token_count(), 4);
        }
    }

    #[test]
    fn noiseless_generation_repeats_bit_for_bit() {
        let cfg = GenConfig {
            image_noise: 0.0,
            text_noise: 0.0,
            ..small()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn seed_changes_the_corpus() {
        let a = generate(&small()).unwrap();
        let b = generate(&GenConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.entries[0].views[0].image, b.entries[0].views[0].image);
    }

    #[test]
    fn degenerate_dims_are_config_errors() {
        let bad = GenConfig {
            latent_dim: 0,
            ..small()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = GenConfig { views: 5, ..small() };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = GenConfig {
            spacing_m: 0.0,
            ..small()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn values_are_single_precision_exact() {
        let ds = generate(&small()).unwrap();
        for x in ds.entries[0].views[1].text.tokens().as_slice() {
            assert_eq!(*x, *x as f32 as f64);
        }
    }
}
