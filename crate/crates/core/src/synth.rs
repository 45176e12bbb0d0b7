//! Procedural stand-in for natural images: smooth gradients, overlapping
//! anti-aliased shapes and mild periodic texture. Used when no real corpus
//! is available.

use std::path::Path;

use rand::Rng;

use crate::data::{write_cifar_records, CIFAR_PIXELS};
use crate::error::Result;
use crate::noise::stream_rng;

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One `3 × h × w` scene as channel-planar bytes.
pub fn scene<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Vec<u8> {
    let mut img = vec![0.0f64; 3 * h * w];
    let plane = h * w;
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let span = (h.max(w)) as f64;
    for y in 0..h {
        for x in 0..w {
            let t = (((x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy) / span + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * plane + y * w + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let shapes = rng.random_range(2..=6);
    let scale = h.min(w) as f64;
    for _ in 0..shapes {
        let fill = color(rng);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(0.08..0.4) * scale;
        let ry = rng.random_range(0.08..0.4) * scale;
        let rot: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (cr, sr) = (rot.cos(), rot.sin());
        let ellipse = rng.random_bool(0.5);
        let texture = if rng.random_bool(0.4) {
            Some((rng.random_range(0.05..0.15), rng.random_range(0.3..1.5), rng.random_range(0.0..std::f64::consts::TAU)))
        } else {
            None
        };
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = (px * cr + py * sr, -px * sr + py * cr);
                let d = if ellipse {
                    ((u / rx).powi(2) + (v / ry).powi(2)).sqrt().mul_add(rx.min(ry), -rx.min(ry))
                } else {
                    (u.abs() - rx).max(v.abs() - ry)
                };
                let cover = (0.5 - d).clamp(0.0, 1.0);
                if cover == 0.0 {
                    continue;
                }
                let tex = texture.map_or(0.0, |(amp, freq, phase)| amp * (u * freq + phase).sin());
                for c in 0..3 {
                    let i = c * plane + y * w + x;
                    img[i] = img[i] * (1.0 - cover) + (fill[c] + tex) * cover;
                }
            }
        }
    }
    img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// `count` deterministic 32×32 scenes in CIFAR byte layout.
pub fn cifar_like(count: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = stream_rng(seed, 0x5e7);
    (0..count)
        .map(|_| {
            let s = scene(&mut rng, 32, 32);
            debug_assert_eq!(s.len(), CIFAR_PIXELS);
            s
        })
        .collect()
}

/// Writes `count` synthetic scenes to `dir/data_batch_1.bin`.
pub fn write_cifar_like(dir: &Path, count: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_cifar_records(&dir.join("data_batch_1.bin"), &cifar_like(count, seed))
}
