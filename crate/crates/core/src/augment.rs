//! Support-set expansion: pad-crop-flip for image grids, Gaussian jitter for
//! plain vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    ImageGrid,
    VectorJitter,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub mode: AugmentMode,
    /// Zero padding on every border, in pixels.
    pub pad: usize,
    pub flip_prob: f64,
    pub jitter_sigma: f64,
    pub target_total_per_category: usize,
    /// Always crop at the center instead of a random offset.
    pub center_crop: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            mode: AugmentMode::VectorJitter,
            pad: 8,
            flip_prob: 0.5,
            jitter_sigma: 0.05,
            target_total_per_category: 20,
            center_crop: false,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!("jitter_sigma must be nonnegative, got {}", self.jitter_sigma)));
        }
        if self.mode != AugmentMode::None && self.target_total_per_category == 0 {
            return Err(Error::Config("target_total_per_category must be positive".into()));
        }
        Ok(())
    }
}

/// Pads an `h × w` image by `pad` zeros per border, crops an `h × w` window
/// at offset `(dy, dx)` of the padded image and optionally mirrors it.
pub fn pad_crop_flip(img: &[f64], h: usize, w: usize, pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            // position in the padded frame, then back to source coordinates
            let (pr, pc) = (r + dy, c + dx);
            if pr < pad || pc < pad || pr >= pad + h || pc >= pad + w {
                continue;
            }
            let oc = if flip { w - 1 - c } else { c };
            out[r * w + oc] = img[(pr - pad) * w + (pc - pad)];
        }
    }
    out
}

/// Expands each category's support rows to `target_total_per_category`,
/// originals first. `support[c]` is `[k_c × dim]`; `grid` describes the
/// image layout when the data are grids.
pub fn augment(
    support: &[Tensor],
    grid: Option<(usize, usize)>,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    match (cfg.mode, grid) {
        (AugmentMode::None, _) => return Ok(support.to_vec()),
        (AugmentMode::ImageGrid, None) => {
            return Err(Error::Config("image_grid augmentation needs grid-shaped data".into()))
        }
        (AugmentMode::VectorJitter, Some(_)) => {
            return Err(Error::Config("vector_jitter augmentation applies to vector data, not grids".into()))
        }
        _ => {}
    }
    let target = cfg.target_total_per_category;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(support.len());
    for (c, s) in support.iter().enumerate() {
        let (k, dim) = s.expect_matrix("augment")?;
        if k == 0 {
            return Err(Error::Contract(format!("category {c} has no support examples")));
        }
        if target < k {
            return Err(Error::Config(format!(
                "target_total_per_category {target} is below the {k} support examples of category {c}"
            )));
        }
        let mut data = s.data().to_vec();
        for j in k..target {
            let src = s.row((j - k) % k);
            match grid {
                Some((h, w)) => {
                    if h * w != dim {
                        return Err(Error::Config(format!("grid {h}x{w} does not match dimension {dim}")));
                    }
                    let (dy, dx) = if cfg.center_crop {
                        (cfg.pad, cfg.pad)
                    } else {
                        (rng.random_range(0..=2 * cfg.pad), rng.random_range(0..=2 * cfg.pad))
                    };
                    let flip = rng.random::<f64>() < cfg.flip_prob;
                    data.extend(pad_crop_flip(src, h, w, cfg.pad, dy, dx, flip));
                }
                None => data.extend(src.iter().map(|v| v + noise.sample(&mut rng))),
            }
        }
        out.push(Tensor::new(vec![target, dim], data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn support(k: usize, dim: usize, offset: f64) -> Tensor {
        Tensor::new(vec![k, dim], (0..k * dim).map(|i| i as f64 + offset).collect()).unwrap()
    }

    #[test]
    fn expands_to_target_with_originals_first() {
        let s = vec![support(5, 4, 0.0), support(5, 4, 100.0)];
        let out = augment(&s, None, &AugmentationConfig::default(), 1).unwrap();
        for (o, orig) in out.iter().zip(&s) {
            assert_eq!(o.shape(), &[20, 4]);
            assert_eq!(&o.data()[..20], orig.data());
        }
    }

    #[test]
    fn center_crop_without_flip_is_identity() {
        let cfg = AugmentationConfig {
            mode: AugmentMode::ImageGrid,
            flip_prob: 0.0,
            center_crop: true,
            target_total_per_category: 6,
            ..AugmentationConfig::default()
        };
        let s = vec![support(2, 12, 1.0)];
        let out = augment(&s, Some((3, 4)), &cfg, 5).unwrap();
        for j in 2..6 {
            assert_eq!(out[0].row(j), s[0].row(j % 2));
        }
    }

    #[test]
    fn crop_and_flip_geometry() {
        let img = [1.0, 2.0, 3.0, 4.0];
        // shift right by one pixel: left column becomes padding
        assert_eq!(pad_crop_flip(&img, 2, 2, 1, 1, 0, false), vec![0.0, 1.0, 0.0, 3.0]);
        assert_eq!(pad_crop_flip(&img, 2, 2, 1, 1, 1, true), vec![2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn seeded_determinism() {
        let s = vec![support(3, 4, 0.5)];
        let cfg = AugmentationConfig::default();
        assert_eq!(augment(&s, None, &cfg, 9).unwrap(), augment(&s, None, &cfg, 9).unwrap());
        assert_ne!(augment(&s, None, &cfg, 9).unwrap(), augment(&s, None, &cfg, 10).unwrap());
    }

    #[test]
    fn mode_mismatch_and_small_target_fail() {
        let s = vec![support(3, 4, 0.0)];
        let grid_cfg = AugmentationConfig {
            mode: AugmentMode::ImageGrid,
            ..AugmentationConfig::default()
        };
        assert!(matches!(augment(&s, None, &grid_cfg, 0), Err(Error::Config(_))));
        assert!(matches!(
            augment(&s, Some((2, 2)), &AugmentationConfig::default(), 0),
            Err(Error::Config(_))
        ));
        let small = AugmentationConfig {
            target_total_per_category: 2,
            ..AugmentationConfig::default()
        };
        assert!(matches!(augment(&s, None, &small, 0), Err(Error::Config(_))));
    }
}
