//! Raster emission: uncompressed PGM (gray) and PPM (color) sample grids.
//!
//! A tile is one sequence rendered as an image: MNIST-shaped rows give a
//! t x d gray tile, CIFAR-shaped rows (d = 3 * pixels) give an RGB tile.
//! Prompt-conditioned tiles carry a dashed marker line across the row
//! where the prompt ends.

use std::path::Path;

use vssm_core::tensor::Tensor;

use crate::{io_config, CmdResult};

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One grid cell: the sequence and, if prompt-conditioned, the cut row.
pub struct GridTile<'a> {
    pub sequence: &'a Tensor<f32>,
    pub cut: Option<usize>,
}

/// Renders tiles into a square-ish grid with 2-pixel gutters. `color`
/// treats each row as interleaved RGB (width = d / 3).
pub fn render_grid(tiles: &[GridTile], color: bool) -> (usize, usize, Vec<u8>) {
    assert!(!tiles.is_empty());
    let t_len = tiles[0].sequence.shape()[0];
    let d = tiles[0].sequence.shape()[1];
    let channels = if color { 3 } else { 1 };
    let tile_w = d / channels;
    let tile_h = t_len;

    let cols = (tiles.len() as f64).sqrt().ceil() as usize;
    let rows = tiles.len().div_ceil(cols);
    let gutter = 2;
    let width = cols * tile_w + (cols + 1) * gutter;
    let height = rows * tile_h + (rows + 1) * gutter;
    // White background.
    let mut pixels = vec![255u8; width * height * channels];

    for (i, tile) in tiles.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        let y0 = gutter + gr * (tile_h + gutter);
        let x0 = gutter + gc * (tile_w + gutter);
        for t in 0..tile_h {
            for x in 0..tile_w {
                for ch in 0..channels {
                    let v = tile.sequence.data()[t * d + x * channels + ch];
                    pixels[((y0 + t) * width + x0 + x) * channels + ch] = to_byte(v);
                }
            }
        }
        // Dashed marker across the prompt boundary.
        if let Some(cut) = tile.cut {
            if cut > 0 && cut < tile_h {
                for x in 0..tile_w {
                    let v = if (x / 2) % 2 == 0 { 255 } else { 0 };
                    for ch in 0..channels {
                        pixels[((y0 + cut) * width + x0 + x) * channels + ch] = v;
                    }
                }
            }
        }
    }
    (width, height, pixels)
}

/// Binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> CmdResult<()> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| io_config(path, e))
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> CmdResult<()> {
    assert_eq!(pixels.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| io_config(path, e))
}
