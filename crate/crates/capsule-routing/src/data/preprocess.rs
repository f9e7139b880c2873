//! Preprocessing pipelines.
//!
//! MNIST-shaped inputs are zero-padded to 32x32 then standardized per image.
//! smallNORB inputs are standardized per image, bilinearly downsampled to
//! 48x48, then cropped to 32x32 — randomly with brightness/contrast jitter
//! in training mode, center crop in eval mode. Augmentation draws come from
//! a per-(seed, epoch, sample) stream, so results do not depend on how a
//! batch is sharded across workers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetKind, ImageBatch, Split};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const TARGET_HW: usize = 32;
pub const NORB_DOWNSAMPLE_HW: usize = 48;
pub const BRIGHTNESS_DELTA: f64 = 0.125;
pub const CONTRAST_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Deterministic per-sample augmentation stream.
pub fn sample_rng(seed: u64, epoch: u64, sample: u64) -> ChaCha8Rng {
    // splitmix-style mixing keeps streams distinct across all three inputs
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch.wrapping_add(1)))
        .wrapping_add(0xBF58_476D_1CE4_E5B9u64.wrapping_mul(sample.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Standardize to zero mean, unit deviation (per image).
pub fn standardize(pixels: &mut [f64]) {
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    let var = pixels.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let dev = var.sqrt().max(1e-6);
    for p in pixels.iter_mut() {
        *p = (*p - mean) / dev;
    }
}

/// Bilinear resize of a single-channel image (half-pixel centers).
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[y * dw + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

fn crop(src: &[f64], sw: usize, oy: usize, ox: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let base = (oy + y) * sw + ox;
        out.extend_from_slice(&src[base..base + size]);
    }
    out
}

/// Center-crop offset for a `from` -> `to` crop: ((from - to)/2, (from - to)/2).
pub fn center_offset(from: usize, to: usize) -> usize {
    (from - to) / 2
}

fn preprocess_mnist(image: &[u8], h: usize, w: usize) -> Vec<f64> {
    // zero-pad into the 32x32 frame, then standardize the padded image
    let mut padded = vec![0.0f64; TARGET_HW * TARGET_HW];
    let oy = center_offset(TARGET_HW, h);
    let ox = center_offset(TARGET_HW, w);
    for y in 0..h {
        for x in 0..w {
            padded[(y + oy) * TARGET_HW + (x + ox)] = image[y * w + x] as f64 / 255.0;
        }
    }
    standardize(&mut padded);
    padded
}

fn preprocess_norb(image: &[u8], h: usize, w: usize, mode: Mode, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut pixels: Vec<f64> = image.iter().map(|&p| p as f64 / 255.0).collect();
    standardize(&mut pixels);
    let down = bilinear_resize(&pixels, h, w, NORB_DOWNSAMPLE_HW, NORB_DOWNSAMPLE_HW);
    let max_off = NORB_DOWNSAMPLE_HW - TARGET_HW;
    match mode {
        Mode::Eval => {
            let off = center_offset(NORB_DOWNSAMPLE_HW, TARGET_HW);
            crop(&down, NORB_DOWNSAMPLE_HW, off, off, TARGET_HW)
        }
        Mode::Train => {
            let oy = rng.gen_range(0..=max_off);
            let ox = rng.gen_range(0..=max_off);
            let mut out = crop(&down, NORB_DOWNSAMPLE_HW, oy, ox, TARGET_HW);
            let contrast = rng.gen_range(CONTRAST_RANGE.0..CONTRAST_RANGE.1);
            let brightness = rng.gen_range(-BRIGHTNESS_DELTA..BRIGHTNESS_DELTA);
            for p in out.iter_mut() {
                *p = *p * contrast + brightness;
            }
            out
        }
    }
}

/// Preprocess the listed samples of a split into a network-ready batch.
pub fn make_batch<T: Scalar>(
    kind: DatasetKind,
    split: &Split,
    indices: &[usize],
    mode: Mode,
    seed: u64,
    epoch: u64,
) -> Result<ImageBatch<T>> {
    let b = indices.len();
    let mut data = Vec::with_capacity(b * TARGET_HW * TARGET_HW);
    let mut labels = Vec::with_capacity(b);
    for &idx in indices {
        let image = split.image(idx);
        let processed = match kind {
            DatasetKind::Mnist => preprocess_mnist(image, split.height, split.width),
            DatasetKind::SmallNorb => {
                let mut rng = sample_rng(seed, epoch, idx as u64);
                preprocess_norb(image, split.height, split.width, mode, &mut rng)
            }
        };
        data.extend(processed.into_iter().map(T::of));
        labels.push(split.labels[idx] as usize);
    }
    Ok(ImageBatch {
        images: Tensor::from_vec(vec![b, TARGET_HW, TARGET_HW, 1], data)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_split(n: usize, h: usize, w: usize, seed: u64) -> Split {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Split {
            images: (0..n * h * w).map(|_| r.gen_range(0..=255u8) ).collect(),
            height: h,
            width: w,
            labels: (0..n).map(|i| (i % 5) as u8).collect(),
        }
    }

    #[test]
    fn standardization_hits_zero_mean_unit_deviation() {
        let split = fake_split(4, 28, 28, 1);
        let batch =
            make_batch::<f64>(DatasetKind::Mnist, &split, &[0, 1, 2, 3], Mode::Eval, 7, 0)
                .unwrap();
        let px = TARGET_HW * TARGET_HW;
        for i in 0..4 {
            let img = &batch.images.data()[i * px..(i + 1) * px];
            let mean: f64 = img.iter().sum::<f64>() / px as f64;
            let var: f64 = img.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / px as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mnist_pads_to_32() {
        let split = fake_split(1, 28, 28, 2);
        let batch =
            make_batch::<f64>(DatasetKind::Mnist, &split, &[0], Mode::Train, 7, 0).unwrap();
        assert_eq!(batch.images.shape(), &[1, 32, 32, 1]);
        // padded border is constant (the standardized zero level)
        let img = batch.images.data();
        let corner = img[0];
        assert_eq!(img[31], corner);
        assert_eq!(img[31 * 32], corner);
    }

    #[test]
    fn eval_crop_is_centered_and_deterministic() {
        assert_eq!(center_offset(48, 32), 8);
        let split = fake_split(2, 96, 96, 3);
        let a = make_batch::<f64>(DatasetKind::SmallNorb, &split, &[0, 1], Mode::Eval, 7, 0)
            .unwrap();
        let b = make_batch::<f64>(DatasetKind::SmallNorb, &split, &[0, 1], Mode::Eval, 99, 5)
            .unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.images.shape(), &[2, 32, 32, 1]);
    }

    #[test]
    fn train_crops_vary_across_epochs_but_not_shards() {
        let split = fake_split(1, 96, 96, 4);
        let e0 = make_batch::<f64>(DatasetKind::SmallNorb, &split, &[0], Mode::Train, 7, 0)
            .unwrap();
        let e1 = make_batch::<f64>(DatasetKind::SmallNorb, &split, &[0], Mode::Train, 7, 1)
            .unwrap();
        assert_ne!(e0.images.data(), e1.images.data());
        // same (seed, epoch, sample) stream regardless of batch grouping
        let grouped =
            make_batch::<f64>(DatasetKind::SmallNorb, &split, &[0], Mode::Train, 7, 0).unwrap();
        assert_eq!(e0.images.data(), grouped.images.data());
        // labels never change under augmentation
        assert_eq!(e0.labels, e1.labels);
    }

    #[test]
    fn bilinear_factor_two_averages_blocks() {
        // with half-pixel centers an exact 2x downsample lands between the
        // four source pixels, averaging them
        let src = vec![0.0, 1.0, 2.0, 3.0];
        let out = bilinear_resize(&src, 2, 2, 1, 1);
        assert!((out[0] - 1.5).abs() < 1e-12);
    }
}
