//! Procedural face-like images: a head ellipse with hair, eyes, nose and mouth,
//! jittered in geometry and color from a seed.

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::ImageBatch;

/// Samples per pixel along each axis when rasterizing.
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: f64, spread: f64) -> f64 {
    base + rng.random_range(-spread..=spread)
}

fn color(rng: &mut ChaCha8Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| jitter(rng, c, spread).clamp(0.0, 1.0))
}

/// Layers painted back to front, in unit coordinates.
fn face_layers(rng: &mut ChaCha8Rng) -> (Vec<Ellipse>, [f64; 3], [f64; 3]) {
    let bg_top = color(rng, [0.55, 0.6, 0.7], 0.3);
    let bg_bottom = color(rng, [0.35, 0.4, 0.5], 0.3);
    let cx = jitter(rng, 0.5, 0.05);
    let cy = jitter(rng, 0.53, 0.04);
    let rx = jitter(rng, 0.28, 0.04);
    let ry = jitter(rng, 0.36, 0.04);
    let skin = color(rng, [0.85, 0.65, 0.5], 0.15);
    let hair = color(rng, [0.3, 0.2, 0.12], 0.2);
    let eye = color(rng, [0.15, 0.2, 0.3], 0.1);
    let eye_dx = jitter(rng, 0.11, 0.02);
    let eye_y = cy - jitter(rng, 0.07, 0.02);
    let eye_r = jitter(rng, 0.035, 0.008);
    let mouth_y = cy + jitter(rng, 0.17, 0.03);
    let mut layers = vec![
        Ellipse { cx, cy: cy - ry * 0.25, rx: rx * 1.12, ry: ry * 0.95, color: hair },
        Ellipse { cx, cy, rx, ry, color: skin },
    ];
    for side in [-1.0, 1.0] {
        let ex = cx + side * eye_dx;
        layers.push(Ellipse { cx: ex, cy: eye_y, rx: eye_r * 1.8, ry: eye_r * 1.1, color: [0.95; 3] });
        layers.push(Ellipse { cx: ex, cy: eye_y, rx: eye_r, ry: eye_r, color: eye });
    }
    layers.push(Ellipse {
        cx,
        cy: cy + 0.05,
        rx: 0.025,
        ry: jitter(rng, 0.05, 0.01),
        color: skin.map(|c| c * 0.85),
    });
    layers.push(Ellipse {
        cx: cx + jitter(rng, 0.0, 0.02),
        cy: mouth_y,
        rx: jitter(rng, 0.09, 0.02),
        ry: jitter(rng, 0.025, 0.01),
        color: color(rng, [0.7, 0.25, 0.3], 0.1),
    });
    (layers, bg_top, bg_bottom)
}

/// One `side × side` RGB face, interleaved 8-bit.
pub fn render_face(seed: u64, side: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layers, top, bottom) = face_layers(&mut rng);
    let mut out = Vec::with_capacity(side * side * 3);
    let ss = SUPERSAMPLE;
    for py in 0..side {
        for px in 0..side {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = (px as f64 + (sx as f64 + 0.5) / ss as f64) / side as f64;
                    let y = (py as f64 + (sy as f64 + 0.5) / ss as f64) / side as f64;
                    let mut c = [0.0; 3];
                    for k in 0..3 {
                        c[k] = top[k] * (1.0 - y) + bottom[k] * y;
                    }
                    for e in &layers {
                        if e.contains(x, y) {
                            c = e.color;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for a in acc {
                out.push((a / (ss * ss) as f64 * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Seeded train/eval split of procedural faces, held as 8-bit rasters.
#[derive(Debug, Clone)]
pub struct FaceDataset {
    side: usize,
    train: Vec<Vec<u8>>,
    eval: Vec<Vec<u8>>,
}

impl FaceDataset {
    pub fn generate(seed: u64, n_train: usize, n_eval: usize, side: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::Config("dataset needs at least one training image".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seeds = || rng.random::<u64>();
        let train = (0..n_train).map(|_| render_face(seeds(), side)).collect();
        let eval = (0..n_eval).map(|_| render_face(seeds(), side)).collect();
        Ok(Self { side, train, eval })
    }

    /// The 64 training and 16 evaluation images at 64×64.
    pub fn desk(seed: u64) -> Result<Self> {
        Self::generate(seed, 64, 16, 64)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn train(&self) -> &[Vec<u8>] {
        &self.train
    }

    pub fn eval(&self) -> &[Vec<u8>] {
        &self.eval
    }

    /// Keeps only the first `n` training images.
    pub fn truncate_train(&mut self, n: usize) {
        self.train.truncate(n.max(1));
    }

    /// Indices of the training batch for `step`: each epoch is a seeded
    /// permutation, consumed in consecutive slices.
    pub fn batch_indices(&self, seed: u64, step: u64, batch_size: usize) -> Vec<usize> {
        let n = self.train.len();
        let mut out = Vec::with_capacity(batch_size);
        let mut pos = step as usize * batch_size;
        let mut epoch = usize::MAX;
        let mut order: Vec<usize> = Vec::new();
        while out.len() < batch_size {
            if pos / n != epoch {
                epoch = pos / n;
                order = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            }
            out.push(order[pos % n]);
            pos += 1;
        }
        out
    }

    pub fn train_batch(&self, seed: u64, step: u64, batch_size: usize, dtype: DType, dev: &Device) -> Result<ImageBatch> {
        let idx = self.batch_indices(seed, step, batch_size);
        let imgs: Vec<&[u8]> = idx.iter().map(|&i| self.train[i].as_slice()).collect();
        ImageBatch::from_rgb8(&imgs, self.side, dtype, dev)
    }

    pub fn images(images: &[Vec<u8>], side: usize, dtype: DType, dev: &Device) -> Result<ImageBatch> {
        let refs: Vec<&[u8]> = images.iter().map(|v| v.as_slice()).collect();
        ImageBatch::from_rgb8(&refs, side, dtype, dev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() -> Result<()> {
        let a = FaceDataset::generate(7, 4, 2, 32)?;
        let b = FaceDataset::generate(7, 4, 2, 32)?;
        assert_eq!(a.train(), b.train());
        assert_ne!(a.train()[0], a.train()[1]);
        assert_ne!(FaceDataset::generate(8, 4, 2, 32)?.train()[0], a.train()[0]);
        assert_eq!(a.train()[0].len(), 32 * 32 * 3);
        Ok(())
    }

    #[test]
    fn epochs_cover_every_image_once() -> Result<()> {
        let d = FaceDataset::generate(1, 10, 0, 16)?;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| d.batch_indices(3, s, 2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(d.batch_indices(3, 7, 4), d.batch_indices(3, 7, 4));
        Ok(())
    }

    #[test]
    fn batch_is_in_range() -> Result<()> {
        let d = FaceDataset::generate(1, 3, 0, 16)?;
        let b = d.train_batch(0, 0, 4, DType::F32, &Device::Cpu)?;
        assert_eq!(b.tensor().dims(), &[4, 3, 16, 16]);
        let v = b.tensor().flatten_all()?.to_vec1::<f32>()?;
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        Ok(())
    }
}
