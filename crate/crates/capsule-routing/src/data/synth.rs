//! Procedurally generated digit corpus in MNIST IDX format.
//!
//! For environments without the real MNIST files: renders the ten digits
//! from a 5x7 seed font at 28x28 with per-sample jitter (shift, shear,
//! thickness, intensity, noise), then writes standard IDX files so the
//! exact same parser and preprocessing path runs as for the real dataset.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::mnist::{
    write_idx_images, write_idx_labels, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
};
use crate::error::Result;

/// 5x7 bitmaps, one row string per scanline.
const GLYPHS: [[&str; 7]; 10] = [
    [
        "01110", "10001", "10011", "10101", "11001", "10001", "01110",
    ],
    [
        "00100", "01100", "00100", "00100", "00100", "00100", "01110",
    ],
    [
        "01110", "10001", "00001", "00110", "01000", "10000", "11111",
    ],
    [
        "11110", "00001", "00001", "01110", "00001", "00001", "11110",
    ],
    [
        "00010", "00110", "01010", "10010", "11111", "00010", "00010",
    ],
    [
        "11111", "10000", "11110", "00001", "00001", "10001", "01110",
    ],
    [
        "00110", "01000", "10000", "11110", "10001", "10001", "01110",
    ],
    [
        "11111", "00001", "00010", "00100", "01000", "01000", "01000",
    ],
    [
        "01110", "10001", "10001", "01110", "10001", "10001", "01110",
    ],
    [
        "01110", "10001", "10001", "01111", "00001", "00010", "01100",
    ],
];

const HW: usize = 28;

/// Render one jittered digit.
fn render(digit: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let glyph = &GLYPHS[digit];
    let scale = 3usize;
    let (gw, gh) = (5 * scale, 7 * scale);
    let intensity = rng.gen_range(0.65..1.0);
    let shift_y = rng.gen_range(-3i32..=3);
    let shift_x = rng.gen_range(-3i32..=3);
    // shear moves rows horizontally by up to +-2 pixels top-to-bottom
    let shear = rng.gen_range(-2.0f64..2.0);
    let thick = rng.gen_range(0..3u8); // 0: thin, 1: dilate x, 2: dilate x+y
    let base_y = (HW - gh) / 2;
    let base_x = (HW - gw) / 2;
    let mut canvas = vec![0.0f64; HW * HW];
    for (ry, row) in glyph.iter().enumerate() {
        for (rx, ch) in row.bytes().enumerate() {
            if ch != b'1' {
                continue;
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    let y = base_y + ry * scale + dy;
                    let row_frac = (ry * scale + dy) as f64 / gh as f64;
                    let sheared_x =
                        base_x as i32 + (rx * scale + dx) as i32 + (shear * row_frac) as i32;
                    let y = y as i32 + shift_y;
                    let x = sheared_x + shift_x;
                    let mut put = |yy: i32, xx: i32, v: f64| {
                        if (0..HW as i32).contains(&yy) && (0..HW as i32).contains(&xx) {
                            let idx = yy as usize * HW + xx as usize;
                            if canvas[idx] < v {
                                canvas[idx] = v;
                            }
                        }
                    };
                    put(y, x, intensity);
                    if thick >= 1 {
                        put(y, x + 1, intensity * 0.9);
                    }
                    if thick == 2 {
                        put(y + 1, x, intensity * 0.9);
                    }
                }
            }
        }
    }
    canvas
        .iter()
        .map(|&v| {
            let noise = rng.gen_range(-0.04f64..0.04);
            ((v + noise).clamp(0.0, 1.0) * 255.0) as u8
        })
        .collect()
}

/// Generate `n` labeled images with a balanced class cycle.
pub fn generate(n: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(n * HW * HW);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        images.extend(render(digit, rng));
        labels.push(digit as u8);
    }
    (images, labels)
}

/// Write a synthetic digit corpus as standard IDX files, unless the four
/// files already exist in `dir`.
pub fn ensure_digit_corpus(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    use rand_chacha::rand_core::SeedableRng;
    let all_present = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .iter()
        .all(|f| dir.join(f).exists());
    if all_present {
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_images, train_labels) = generate(train_n, &mut rng);
    let (test_images, test_labels) = generate(test_n, &mut rng);
    fs::write(
        dir.join(TRAIN_IMAGES),
        write_idx_images(train_n, HW, HW, &train_images),
    )?;
    fs::write(dir.join(TRAIN_LABELS), write_idx_labels(&train_labels))?;
    fs::write(
        dir.join(TEST_IMAGES),
        write_idx_images(test_n, HW, HW, &test_images),
    )?;
    fs::write(dir.join(TEST_LABELS), write_idx_labels(&test_labels))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mnist;

    #[test]
    fn corpus_loads_through_the_idx_parser() {
        let dir = tempfile::tempdir().unwrap();
        ensure_digit_corpus(dir.path(), 50, 20, 3).unwrap();
        let ds = mnist::load(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 50);
        assert_eq!(ds.test.len(), 20);
        assert_eq!(ds.train.height, 28);
        // balanced cycle covers all ten digits
        let mut seen = [false; 10];
        for &l in &ds.train.labels {
            seen[l as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn digits_of_a_class_vary_but_stay_recognizable() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = render(3, &mut rng);
        let b = render(3, &mut rng);
        assert_ne!(a, b);
        // some ink in both
        assert!(a.iter().filter(|&&p| p > 100).count() > 30);
        assert!(b.iter().filter(|&&p| p > 100).count() > 30);
    }

    #[test]
    fn existing_files_are_not_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        ensure_digit_corpus(dir.path(), 10, 10, 1).unwrap();
        let before = std::fs::read(dir.path().join(TRAIN_IMAGES)).unwrap();
        ensure_digit_corpus(dir.path(), 99, 99, 2).unwrap();
        let after = std::fs::read(dir.path().join(TRAIN_IMAGES)).unwrap();
        assert_eq!(before, after);
    }
}
