//! Random direction/colour batches drawn across a set of environments.

use ndarray::Array2;
use rand::Rng;

use super::EnvironmentImage;
use crate::error::{Error, Result};
use crate::geometry::{direction_to_pixel, pixel_to_direction, sample_direction, Direction};
use crate::rng::seeded;

/// Radiance floor applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-8;

/// Proposals per sample before falling back to a random observed pixel centre.
const MAX_REJECTIONS: usize = 256;

/// `P` sampled directions with their log radiance and source image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub directions: Vec<Direction>,
    pub log_colors: Vec<[f64; 3]>,
    pub image_index: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Directions as a `P x 3` matrix, one sample per row.
    pub fn direction_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 3), |(i, k)| self.directions[i].to_array()[k])
    }

    /// Log colours as a `P x 3` matrix, one sample per row.
    pub fn log_color_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 3), |(i, k)| self.log_colors[i][k])
    }
}

pub(crate) fn log_color(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| c.max(LOG_FLOOR).ln())
}

/// Draws one observed sample from `image`.
pub(crate) fn sample_image<R: Rng + ?Sized>(
    image: &EnvironmentImage,
    observed_pixels: Option<&[usize]>,
    rng: &mut R,
) -> (Direction, [f64; 3]) {
    for _ in 0..MAX_REJECTIONS {
        let d = sample_direction(rng);
        let (row, col) = direction_to_pixel(&d, image.height(), image.width());
        if !image.is_observed(row, col) {
            continue;
        }
        if let Some(c) = image.sample_bilinear(&d) {
            return (d, c);
        }
    }
    // Very sparse masks: pick an observed pixel centre directly.
    let observed = observed_pixels.expect("observed pixel list for masked image");
    let flat = observed[rng.random_range(0..observed.len())];
    let (row, col) = (flat / image.width(), flat % image.width());
    let d = pixel_to_direction(row, col, image.height(), image.width());
    let p = image.pixel(row, col);
    (d, [p[0] as f64, p[1] as f64, p[2] as f64])
}

pub(crate) fn observed_pixel_lists(images: &[EnvironmentImage]) -> Result<Vec<Option<Vec<usize>>>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| match img.mask() {
            None => Ok(None),
            Some(m) => {
                let list: Vec<usize> = (0..m.len()).filter(|&j| m[j]).collect();
                if list.is_empty() {
                    Err(Error::InvalidArgument(format!("image {i} is fully masked")))
                } else {
                    Ok(Some(list))
                }
            }
        })
        .collect()
}

/// Samples `count` (direction, log colour) pairs with image indices drawn
/// uniformly over `images`.
pub fn sample_training_batch(
    images: &[EnvironmentImage],
    count: usize,
    seed: u64,
) -> Result<TrainingBatch> {
    sample_training_batch_with(images, count, &mut seeded(seed))
}

/// Like [`sample_training_batch`] but draws from a caller-owned generator.
pub fn sample_training_batch_with<R: Rng + ?Sized>(
    images: &[EnvironmentImage],
    count: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if images.is_empty() || count == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least one image and one sample, got {} images and {count} samples",
            images.len()
        )));
    }
    let observed = observed_pixel_lists(images)?;
    let mut batch = TrainingBatch {
        directions: Vec::with_capacity(count),
        log_colors: Vec::with_capacity(count),
        image_index: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let i = rng.random_range(0..images.len());
        let (d, c) = sample_image(&images[i], observed[i].as_deref(), rng);
        batch.directions.push(d);
        batch.log_colors.push(log_color(c));
        batch.image_index.push(i);
    }
    Ok(batch)
}
