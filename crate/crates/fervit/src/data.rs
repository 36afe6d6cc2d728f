//! Synthetic labeled face-pattern data and train-time augmentation.
//!
//! The generator draws crude geometric "faces" whose mouth curvature, mouth
//! opening, eye size and brow tilt are class-conditional, with seeded
//! per-sample jitter and pixel noise. The classes are linearly separable
//! enough that a pixel-mean nearest-centroid classifier beats chance, which
//! is the learnability bar the training harness is tested against.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub struct Sample {
    /// [3, H, W] image with values in [0, 1].
    pub image: Tensor,
    pub label: usize,
}

pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub image_size: usize,
}

/// Per-class drawing style.
struct FaceStyle {
    /// Mouth curvature: positive bends up (smile), negative down.
    mouth_curve: f64,
    /// Mouth half-width as a fraction of the face radius.
    mouth_width: f64,
    /// Mouth vertical opening in pixels (0 = closed line).
    mouth_open: f64,
    /// Eye radius in pixels.
    eye_radius: f64,
    /// Brow tilt: positive slants inward-down (frown).
    brow_tilt: f64,
    /// Horizontal mouth asymmetry: shifts curvature to one side.
    mouth_skew: f64,
}

fn style_for(class: usize) -> FaceStyle {
    match class {
        // neutral
        0 => FaceStyle { mouth_curve: 0.0, mouth_width: 0.55, mouth_open: 0.0, eye_radius: 1.6, brow_tilt: 0.0, mouth_skew: 0.0 },
        // happy
        1 => FaceStyle { mouth_curve: 0.9, mouth_width: 0.75, mouth_open: 1.5, eye_radius: 1.6, brow_tilt: 0.0, mouth_skew: 0.0 },
        // sad
        2 => FaceStyle { mouth_curve: -0.9, mouth_width: 0.6, mouth_open: 0.0, eye_radius: 1.6, brow_tilt: -0.5, mouth_skew: 0.0 },
        // surprise
        3 => FaceStyle { mouth_curve: 0.0, mouth_width: 0.3, mouth_open: 5.0, eye_radius: 2.6, brow_tilt: 0.0, mouth_skew: 0.0 },
        // fear
        4 => FaceStyle { mouth_curve: -0.4, mouth_width: 0.45, mouth_open: 3.0, eye_radius: 2.4, brow_tilt: -0.8, mouth_skew: 0.0 },
        // disgust
        5 => FaceStyle { mouth_curve: -0.5, mouth_width: 0.4, mouth_open: 0.0, eye_radius: 1.0, brow_tilt: 0.4, mouth_skew: 0.0 },
        // anger
        6 => FaceStyle { mouth_curve: 0.0, mouth_width: 0.5, mouth_open: 0.0, eye_radius: 1.2, brow_tilt: 0.9, mouth_skew: 0.0 },
        // contempt
        _ => FaceStyle { mouth_curve: 0.45, mouth_width: 0.5, mouth_open: 0.0, eye_radius: 1.4, brow_tilt: 0.0, mouth_skew: 0.8 },
    }
}

/// Deterministic class-conditional dataset: `classes * n_per_class` samples,
/// balanced, in class-major order.
pub fn synth_dataset(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    image_size: usize,
) -> Result<Dataset> {
    if classes != 7 && classes != 8 {
        return Err(Error::config(format!("classes {classes} must be 7 or 8")));
    }
    if n_per_class == 0 || image_size < 16 {
        return Err(Error::config(
            "need n_per_class >= 1 and image_size >= 16",
        ));
    }
    let mut master = Rng::new(seed);
    let mut samples = Vec::with_capacity(classes * n_per_class);
    for class in 0..classes {
        for _ in 0..n_per_class {
            let mut rng = master.split();
            samples.push(Sample {
                image: render_face(class, image_size, &mut rng)?,
                label: class,
            });
        }
    }
    Ok(Dataset {
        samples,
        classes,
        image_size,
    })
}

fn render_face(class: usize, size: usize, rng: &mut Rng) -> Result<Tensor> {
    let style = style_for(class);
    let s = size as f64;
    let mut canvas = vec![0.15; size * size];

    let jitter = |rng: &mut Rng, amt: f64| rng.uniform_in(-amt, amt);
    let cy = s * 0.5 + jitter(rng, s * 0.03);
    let cx = s * 0.5 + jitter(rng, s * 0.03);
    let face_r = s * 0.38 + jitter(rng, s * 0.02);

    // Face outline: a bright ring.
    draw_ring(&mut canvas, size, cy, cx, face_r, 1.2, 0.85);

    // Eyes.
    let eye_dy = face_r * 0.35;
    let eye_dx = face_r * 0.42;
    let eye_r = style.eye_radius * s / 64.0 + jitter(rng, 0.3);
    draw_disk(&mut canvas, size, cy - eye_dy, cx - eye_dx, eye_r.max(0.8), 1.0);
    draw_disk(&mut canvas, size, cy - eye_dy, cx + eye_dx, eye_r.max(0.8), 1.0);

    // Brows: short segments above the eyes, tilted per class.
    let brow_len = face_r * 0.3;
    let brow_y = cy - eye_dy - eye_r - s * 0.04;
    for side in [-1.0, 1.0] {
        let bx = cx + side * eye_dx;
        let steps = brow_len as usize + 2;
        for t in 0..steps {
            let f = t as f64 / (steps - 1) as f64 - 0.5;
            let x = bx + f * brow_len;
            // Inward-down tilt for anger, outward-down for sad/fear.
            let y = brow_y + style.brow_tilt * f * side * brow_len * 0.5;
            draw_disk(&mut canvas, size, y, x, 0.7, 0.95);
        }
    }

    // Mouth: a curved band, optionally open (drawn as a filled lens).
    let mouth_y = cy + face_r * 0.45;
    let half_w = style.mouth_width * face_r + jitter(rng, 0.8);
    let steps = (2.0 * half_w) as usize + 3;
    for t in 0..steps {
        let f = t as f64 / (steps - 1) as f64 - 0.5; // -0.5..0.5
        let x = cx + 2.0 * f * half_w;
        let skewed = f + style.mouth_skew * 0.25;
        let bend = -style.mouth_curve * (0.25 - skewed * skewed) * face_r * 0.8;
        let y = mouth_y + bend;
        let open = style.mouth_open * s / 64.0 * (0.25 - f * f) * 4.0;
        if open > 0.5 {
            for dy in 0..=(open as usize) {
                draw_disk(&mut canvas, size, y + dy as f64, x, 0.8, 0.9);
            }
        } else {
            draw_disk(&mut canvas, size, y, x, 0.9, 0.9);
        }
    }

    // Per-pixel noise, clamped to [0, 1].
    for v in canvas.iter_mut() {
        *v = (*v + rng.uniform_in(-0.06, 0.06)).clamp(0.0, 1.0);
    }

    // Three channels with fixed gains and independent mild noise.
    let mut values = Vec::with_capacity(3 * size * size);
    for gain in [1.0, 0.85, 0.7] {
        for &v in &canvas {
            values.push((v * gain + rng.uniform_in(-0.02, 0.02)).clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(values, &[3, size, size])
}

fn draw_disk(canvas: &mut [f64], size: usize, cy: f64, cx: f64, r: f64, value: f64) {
    let lo_y = (cy - r).floor().max(0.0) as usize;
    let hi_y = ((cy + r).ceil() as usize).min(size.saturating_sub(1));
    let lo_x = (cx - r).floor().max(0.0) as usize;
    let hi_x = ((cx + r).ceil() as usize).min(size.saturating_sub(1));
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                canvas[y * size + x] = canvas[y * size + x].max(value);
            }
        }
    }
}

fn draw_ring(canvas: &mut [f64], size: usize, cy: f64, cx: f64, r: f64, thickness: f64, value: f64) {
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let d = (dy * dy + dx * dx).sqrt();
            if (d - r).abs() <= thickness {
                canvas[y * size + x] = canvas[y * size + x].max(value);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased-area fraction range (lo, hi), both in (0, 1).
    pub erase_scale: (f64, f64),
}

impl AugmentConfig {
    pub fn disabled() -> AugmentConfig {
        AugmentConfig {
            flip_prob: 0.0,
            erase_prob: 0.0,
            erase_scale: (0.02, 0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.erase_scale;
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(Error::config("augment probabilities must lie in [0, 1]"));
        }
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!(
                "erase_scale ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
            )));
        }
        Ok(())
    }
}

/// Mirror an image horizontally. Involution: applying it twice restores the
/// input bit-exactly.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape("flip_horizontal", x.shape(), &[3, 0, 0]));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.numel()];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[ci * h * w + y * w + xx] = x.values()[ci * h * w + y * w + (w - 1 - xx)];
            }
        }
    }
    Tensor::from_vec(out, x.shape())
}

/// Pick an erase rectangle (top, left, height, width) whose area fraction
/// lies in `scale` whenever an integer rectangle in that band exists for
/// the drawn height; otherwise the nearest achievable area is used.
pub fn erase_rect(
    img_h: usize,
    img_w: usize,
    scale: (f64, f64),
    rng: &mut Rng,
) -> (usize, usize, usize, usize) {
    let (lo, hi) = scale;
    let total = (img_h * img_w) as f64;
    let target = rng.uniform_in(lo, hi) * total;
    let h_min = ((target / 2.0).sqrt().floor() as usize).clamp(1, img_h);
    let h_max = (((target * 2.0).sqrt().ceil()) as usize).clamp(h_min, img_h);
    let h = h_min + rng.below(h_max - h_min + 1);
    let mut w = ((target / h as f64).round() as usize).clamp(1, img_w);
    // Snap the width into the feasible band for this height, if any.
    let w_lo = ((lo * total) / h as f64).ceil() as usize;
    let w_hi = ((hi * total) / h as f64).floor() as usize;
    if w_lo <= w_hi {
        w = w.clamp(w_lo.max(1), w_hi.min(img_w).max(1));
    }
    let top = rng.below(img_h - h + 1);
    let left = rng.below(img_w - w + 1);
    (top, left, h, w)
}

/// Train-time augmentation: horizontal flip, then rectangle erasure filled
/// with uniform noise.
pub fn augment(x: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    cfg.validate()?;
    let mut img = if cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob) {
        flip_horizontal(x)?
    } else {
        x.clone()
    };
    if cfg.erase_prob > 0.0 && rng.bernoulli(cfg.erase_prob) {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let (top, left, eh, ew) = erase_rect(h, w, cfg.erase_scale, rng);
        let mut vals = img.values().to_vec();
        for ci in 0..c {
            for y in top..top + eh {
                for xx in left..left + ew {
                    vals[ci * h * w + y * w + xx] = rng.uniform();
                }
            }
        }
        img = Tensor::from_vec(vals, img.shape())?;
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset_bit_exact() {
        let a = synth_dataset(99, 3, 7, 32).unwrap();
        let b = synth_dataset(99, 3, 7, 32).unwrap();
        assert_eq!(a.samples.len(), 21);
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.label, sb.label);
            assert_eq!(sa.image.values(), sb.image.values());
        }
    }

    #[test]
    fn sample_counts_and_balance() {
        let ds = synth_dataset(1, 10, 7, 32).unwrap();
        assert_eq!(ds.samples.len(), 70);
        for c in 0..7 {
            assert_eq!(ds.samples.iter().filter(|s| s.label == c).count(), 10);
        }
        assert!(synth_dataset(1, 10, 5, 32).is_err());
    }

    #[test]
    fn centroid_classifier_beats_chance_on_held_out_split() {
        // Nearest pixel-mean centroid as an independent separability oracle.
        let classes = 7;
        let train = synth_dataset(7, 24, classes, 32).unwrap();
        let test = synth_dataset(8, 8, classes, 32).unwrap();

        let dim = 3 * 32 * 32;
        let mut centroids = vec![vec![0.0f64; dim]; classes];
        let mut counts = vec![0usize; classes];
        for s in &train.samples {
            counts[s.label] += 1;
            for (acc, v) in centroids[s.label].iter_mut().zip(s.image.values()) {
                *acc += v;
            }
        }
        for (c, count) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *count as f64;
            }
        }
        let mut correct = 0;
        for s in &test.samples {
            let mut best = (f64::INFINITY, 0usize);
            for (ci, c) in centroids.iter().enumerate() {
                let d: f64 = c
                    .iter()
                    .zip(s.image.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, ci);
                }
            }
            if best.1 == s.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.samples.len() as f64;
        assert!(
            acc > 1.5 / classes as f64,
            "centroid accuracy {acc} does not beat chance"
        );
    }

    #[test]
    fn flip_is_an_involution() {
        let ds = synth_dataset(3, 1, 7, 32).unwrap();
        let img = &ds.samples[0].image;
        let back = flip_horizontal(&flip_horizontal(img).unwrap()).unwrap();
        assert_eq!(back.values(), img.values());
    }

    #[test]
    fn disabled_augment_is_identity() {
        let ds = synth_dataset(4, 1, 7, 32).unwrap();
        let img = &ds.samples[0].image;
        let mut rng = Rng::new(5);
        let out = augment(img, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out.values(), img.values());
    }

    #[test]
    fn erased_area_fraction_stays_in_band() {
        let mut rng = Rng::new(6);
        let (lo, hi) = (0.02, 0.10);
        for _ in 0..1000 {
            let (_, _, h, w) = erase_rect(64, 64, (lo, hi), &mut rng);
            let frac = (h * w) as f64 / (64.0 * 64.0);
            assert!(
                (lo..=hi).contains(&frac),
                "erased fraction {frac} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn degenerate_erase_band_stays_close() {
        // The fixed-scale presets use (0.05, 0.05); integer rectangles can
        // only approximate it.
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let (_, _, h, w) = erase_rect(64, 64, (0.05, 0.05), &mut rng);
            let frac = (h * w) as f64 / 4096.0;
            assert!((frac - 0.05).abs() < 0.01, "fraction {frac} too far from 0.05");
        }
    }

    #[test]
    fn augment_erase_changes_expected_region_only() {
        let ds = synth_dataset(9, 1, 7, 64).unwrap();
        let img = &ds.samples[0].image;
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            erase_prob: 1.0,
            erase_scale: (0.02, 0.1),
        };
        let mut rng = Rng::new(11);
        let out = augment(img, &cfg, &mut rng).unwrap();
        let changed = out
            .values()
            .iter()
            .zip(img.values())
            .filter(|(a, b)| a != b)
            .count();
        // Changed pixels are the erased rectangle across three channels.
        let frac = changed as f64 / (3.0 * 4096.0);
        assert!((0.015..=0.11).contains(&frac), "changed fraction {frac}");
    }
}
