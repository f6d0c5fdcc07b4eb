//! Grayscale tile grids written as binary PGM.

use std::fs;
use std::path::Path;

use crate::error::Result;

/// Value used for separators and unused grid cells.
pub const BACKGROUND: u8 = 0;
/// Tile value when a tile has no dynamic range.
pub const FLAT_TILE: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    fn header(&self) -> String {
        format!("P5\n{} {}\n255\n", self.width, self.height)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Columns and rows of a near-square grid holding `count` tiles.
pub fn grid_shape(count: usize) -> (usize, usize) {
    if count == 0 {
        return (0, 0);
    }
    let cols = (count as f64).sqrt().ceil() as usize;
    (cols, count.div_ceil(cols))
}

fn tile_bytes(values: &[f64]) -> Vec<u8> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max.is_nan() || min.is_nan() || max <= min {
        return vec![FLAT_TILE; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
        .collect()
}

/// Tiles row-major `tile_w x tile_h` grids with 1-pixel separators, each tile
/// min-max stretched to `[0, 255]` independently.
pub fn render_grid(tiles: &[&[f64]], tile_w: usize, tile_h: usize) -> GrayImage {
    let (cols, rows) = grid_shape(tiles.len());
    let width = (cols * (tile_w + 1)).saturating_sub(1);
    let height = (rows * (tile_h + 1)).saturating_sub(1);
    let mut pixels = vec![BACKGROUND; width * height];
    for (i, tile) in tiles.iter().enumerate() {
        let (gx, gy) = (i % cols, i / cols);
        let (ox, oy) = (gx * (tile_w + 1), gy * (tile_h + 1));
        let bytes = tile_bytes(tile);
        for r in 0..tile_h {
            let dst = (oy + r) * width + ox;
            pixels[dst..dst + tile_w].copy_from_slice(&bytes[r * tile_w..(r + 1) * tile_w]);
        }
    }
    GrayImage { width, height, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventy_tiles_make_nine_by_eight() {
        assert_eq!(grid_shape(70), (9, 8));
        assert_eq!(grid_shape(118), (11, 11));
        assert_eq!(grid_shape(1), (1, 1));
    }

    #[test]
    fn flat_tile_is_mid_gray() {
        let t = [0.3; 9];
        let img = render_grid(&[&t], 3, 3);
        assert!(img.pixels.iter().all(|&p| p == FLAT_TILE));
    }

    #[test]
    fn byte_size_is_header_plus_pixels() {
        let t: Vec<f64> = (0..25).map(f64::from).collect();
        let tiles: Vec<&[f64]> = (0..70).map(|_| t.as_slice()).collect();
        let img = render_grid(&tiles, 5, 5);
        assert_eq!(img.width, 9 * 6 - 1);
        assert_eq!(img.height, 8 * 6 - 1);
        let header = format!("P5\n{} {}\n255\n", img.width, img.height);
        assert_eq!(img.to_pgm().len(), header.len() + img.width * img.height);
        assert_eq!(img.pixel(0, 0), 0);
        assert_eq!(img.pixel(4, 4), 255);
        // last row holds 7 tiles; the 8th and 9th cells stay blank
        assert_eq!(img.pixel(8 * 6 + 4, 7 * 6 + 4), BACKGROUND);
    }
}
