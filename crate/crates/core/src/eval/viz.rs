use std::path::Path;

use image::{Rgb, RgbImage};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{FeatureCache, Model};
use crate::numerics::Scalar;

const GAP: u32 = 2;
const TINT: [f32; 3] = [1.0, 0.1, 0.1];
const BLANK: Rgb<u8> = Rgb([96, 96, 96]);

fn tinted(img: &RgbImage, mask: &[bool]) -> RgbImage {
    let mut out = img.clone();
    for (p, &m) in out.pixels_mut().zip(mask) {
        if m {
            for c in 0..3 {
                p.0[c] = ((p.0[c] as f32 * 0.4) + TINT[c] * 255.0 * 0.6).round() as u8;
            }
        }
    }
    out
}

/// Nearest-neighbour upscale of a `side×side` grid to `size×size` pixels.
fn grid_panel(grid: &[bool], side: usize, size: usize) -> RgbImage {
    if grid.len() != side * side || side == 0 {
        return RgbImage::from_pixel(size as u32, size as u32, BLANK);
    }
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let gy = y as usize * side / size;
        let gx = x as usize * side / size;
        if grid[gy * side + gx] {
            Rgb([255, 255, 255])
        } else {
            Rgb([0, 0, 0])
        }
    })
}

/// Five panels left to right: first support shot with its mask, query, prediction
/// overlay, general object mask M_g, and the argmax of the general object
/// prediction. Variants without the general branch get blank last panels.
pub fn render_panels<T: Scalar>(model: &Model<T>, episode: &Episode, cache: Option<&FeatureCache<T>>) -> Result<RgbImage> {
    episode.validate()?;
    let pred = model.predict(episode, cache)?;
    let size = pred.prep.image_size;
    let side = pred.prep.feature_size;
    let shot = &episode.support[0];
    let support_mask: Vec<bool> = shot.mask.data.iter().map(|&v| v != 0).collect();
    let query = episode.query_image.to_rgb8();
    let fg: Vec<bool> = pred.mask.iter().map(|&v| v != 0).collect();
    let general_mask = if model.variant().uses_gomm() { pred.prep.general_mask.clone() } else { Vec::new() };
    let panels = [
        tinted(&shot.image.to_rgb8(), &support_mask),
        query.clone(),
        tinted(&query, &fg),
        grid_panel(&general_mask, side, size),
        grid_panel(pred.general_prediction.as_deref().unwrap_or(&[]), side, size),
    ];
    let s = size as u32;
    let n = panels.len() as u32;
    let mut out = RgbImage::from_pixel(n * s + (n - 1) * GAP, s, Rgb([255, 255, 255]));
    for (i, p) in panels.iter().enumerate() {
        image::imageops::replace(&mut out, p, (i as u32 * (s + GAP)) as i64, 0);
    }
    Ok(out)
}

pub fn visualize<T: Scalar>(model: &Model<T>, episode: &Episode, cache: Option<&FeatureCache<T>>, out_path: &Path) -> Result<()> {
    let img = render_panels(model, episode, cache)?;
    img.save(out_path).map_err(|source| Error::Image {
        path: out_path.to_path_buf(),
        source,
    })
}

/// Pixel columns of panel `index` in a composite from [`render_panels`].
pub fn panel(composite: &RgbImage, index: u32) -> RgbImage {
    let s = composite.height();
    image::imageops::crop_imm(composite, index * (s + GAP), 0, s, s).to_image()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tint_changes_exactly_masked_pixels() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30) as u8, (y * 30) as u8, 90]));
        let mask: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        let out = tinted(&img, &mask);
        let changed = img.pixels().zip(out.pixels()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, mask.iter().filter(|&&m| m).count());
    }

    #[test]
    fn grid_upscales_by_blocks() {
        let grid = vec![true, false, false, true];
        let p = grid_panel(&grid, 2, 4);
        assert_eq!(p.get_pixel(0, 0).0, [255; 3]);
        assert_eq!(p.get_pixel(1, 1).0, [255; 3]);
        assert_eq!(p.get_pixel(2, 0).0, [0; 3]);
        assert_eq!(p.get_pixel(3, 3).0, [255; 3]);
        assert_eq!(grid_panel(&[], 2, 4).get_pixel(0, 0), &BLANK);
    }
}
