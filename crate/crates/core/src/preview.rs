//! 8-bit PNG previews. Every preview is normalized by its own maximum and is
//! advisory only; the binary containers hold the actual data.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};

use crate::binio::write_atomic;
use crate::cca::srgb_encode;
use crate::error::Result;

fn max_of<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    values.copied().filter(|v| v.is_finite()).fold(0.0, f64::max)
}

/// Grayscale tone map of a non-negative map, `v / max` with sRGB encoding.
pub fn gray(map: ArrayView2<f64>) -> GrayImage {
    let m = max_of(map.iter());
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        Luma([if m > 0.0 { srgb_encode(v / m) } else { 0 }])
    })
}

/// `[H, W, 3]` linear RGB scaled by its overall maximum.
pub fn rgb(img: &Array3<f64>) -> RgbImage {
    let m = max_of(img.iter());
    let (h, w, _) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb(std::array::from_fn(|c| {
            if m > 0.0 {
                srgb_encode(img[[y, x, c]] / m)
            } else {
                0
            }
        }))
    })
}

/// Viridis rendering of `map` over `[lo, hi]`.
pub fn viridis(map: &Array2<f64>, lo: f64, hi: f64) -> RgbImage {
    let (h, w) = map.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let t = ((map[[y as usize, x as usize]] - lo) / span).clamp(0.0, 1.0);
        let c = colorous::VIRIDIS.eval_continuous(if t.is_finite() { t } else { 0.0 });
        Rgb([c.r, c.g, c.b])
    })
}

/// Tiles equally sized grayscale tiles into a `rows x cols` sheet with a
/// one-pixel gap, each tile normalized on its own.
pub fn contact_sheet(tiles: &[Array2<f64>], cols: usize) -> GrayImage {
    let rows = tiles.len().div_ceil(cols.max(1));
    let (th, tw) = tiles.first().map(|t| t.dim()).unwrap_or((0, 0));
    let (gap, cols) = (1usize, cols.max(1));
    let mut sheet = GrayImage::new(
        (cols * (tw + gap) - gap).max(1) as u32,
        (rows * (th + gap)).saturating_sub(gap).max(1) as u32,
    );
    for (i, tile) in tiles.iter().enumerate() {
        let img = gray(tile.view());
        let (r, c) = (i / cols, i % cols);
        image::imageops::replace(
            &mut sheet,
            &img,
            (c * (tw + gap)) as i64,
            (r * (th + gap)) as i64,
        );
    }
    sheet
}

/// Encodes to PNG in memory (no metadata chunks) and writes atomically.
pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_is_max_normalized() {
        let m = Array2::from_shape_vec((1, 3), vec![0.0, 2.0, 4.0]).unwrap();
        let g = gray(m.view());
        assert_eq!(g.get_pixel(0, 0).0[0], 0);
        assert_eq!(g.get_pixel(2, 0).0[0], 255);
        let zero = gray(Array2::zeros((2, 2)).view());
        assert!(zero.pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn viridis_endpoints() {
        let m = Array2::from_shape_vec((1, 2), vec![0.4, 1.6]).unwrap();
        let img = viridis(&m, 0.4, 1.6);
        assert_eq!(img.get_pixel(0, 0).0, [68, 1, 84]);
        assert_eq!(img.get_pixel(1, 0).0, [253, 231, 37]);
    }

    #[test]
    fn contact_sheet_layout() {
        let tiles = vec![Array2::from_elem((3, 4), 1.0); 5];
        let sheet = contact_sheet(&tiles, 2);
        assert_eq!(sheet.dimensions(), (2 * 5 - 1, 3 * 4 - 1));
        assert_eq!(sheet.get_pixel(4, 0).0[0], 0);
        assert_eq!(sheet.get_pixel(5, 0).0[0], 255);
    }

    #[test]
    fn png_bytes_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((8, 8), |(y, x)| (y * x) as f64);
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_png(&viridis(&m, 0.0, 49.0), &a).unwrap();
        save_png(&viridis(&m, 0.0, 49.0), &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
