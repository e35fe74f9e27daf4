//! Reconstruction grids: originals on the top row, reconstructions below.

use std::path::Path;

use anyhow::{ensure, Result};
use image::{GrayImage, Luma};

use crate::mnist::Dataset;
use crate::networks::{PIXELS, SIDE};
use crate::trainer::{stream_rng, Codec, Stream};

/// Pixel scale of each digit tile.
pub const SCALE: u32 = 3;
/// Gap between tiles.
pub const GAP: u32 = 2;

/// Tiles `rows` of images (each `[n, 784]` in `[0, 1]`) into one grayscale picture.
pub fn grid(rows: &[&[f32]], n: usize) -> GrayImage {
    let tile = SIDE as u32 * SCALE;
    let width = n as u32 * (tile + GAP) + GAP;
    let height = rows.len() as u32 * (tile + GAP) + GAP;
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));
    for (r, images) in rows.iter().enumerate() {
        for i in 0..n {
            let (x0, y0) = (GAP + i as u32 * (tile + GAP), GAP + r as u32 * (tile + GAP));
            for y in 0..tile {
                for x in 0..tile {
                    let v = images[i * PIXELS + (y / SCALE) as usize * SIDE + (x / SCALE) as usize];
                    img.put_pixel(x0 + x, y0 + y, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
                }
            }
        }
    }
    img
}

/// Writes the first `n` test images and their reconstructions under dither stream `seed`
/// as a PNG, plus a `.json` sidecar recording the run and seed. The same inputs always
/// produce the same files.
pub fn dump_reconstructions(codec: &mut Codec, run_id: &str, test: &Dataset, n: usize, seed: u64, out: &Path) -> Result<()> {
    ensure!(n > 0 && n <= test.len(), "cannot show {n} of {} test images", test.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = test.gather(&idx);
    let xhat = codec.reconstruct(&x, n, &mut stream_rng(seed, 0, Stream::EvalDither));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    grid(&[&x, &xhat], n).save(out)?;
    let meta = serde_json::json!({"run_id": run_id, "seed": seed, "images": n, "rows": ["original", "reconstruction"]});
    std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
