use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFlags {
    /// Mirror left-right with probability 0.5.
    #[serde(default)]
    pub hflip: bool,
    /// Translate by a uniform integer in `±floor(shift_frac * side)` per
    /// axis, zero filled. Must lie in `[0, 1)`.
    #[serde(default)]
    pub shift_frac: f64,
}

impl AugmentFlags {
    pub fn is_identity(&self) -> bool {
        !self.hflip && self.shift_frac == 0.0
    }
}

/// Mirror every `H x W` plane of a `C x H x W` image in place.
pub fn flip_horizontal(image: &mut [f32], h: usize, w: usize) {
    debug_assert_eq!(image.len() % (h * w).max(1), 0);
    for row in image.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Translate a `C x H x W` image by `(dx, dy)` pixels: positive `dx` moves
/// content right, positive `dy` moves it down. Uncovered pixels become 0.
pub fn shift_image(image: &mut [f32], h: usize, w: usize, dx: i64, dy: i64) {
    if dx == 0 && dy == 0 {
        return;
    }
    for plane in image.chunks_exact_mut(h * w) {
        let src = plane.to_vec();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y - dy, x - dx);
                plane[(y * w as i64 + x) as usize] = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    src[(sy * w as i64 + sx) as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Augment a raw `N x C x H x W` batch in place, each image independently.
pub fn augment(batch: &mut Tensor<f32>, rng: &mut Rng, flags: AugmentFlags) {
    assert!(
        (0.0..1.0).contains(&flags.shift_frac),
        "shift fraction must lie in [0, 1), got {}",
        flags.shift_frac
    );
    if flags.is_identity() {
        return;
    }
    let s = batch.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let per = s[1] * h * w;
    let max_dy = (flags.shift_frac * h as f64).floor() as i64;
    let max_dx = (flags.shift_frac * w as f64).floor() as i64;
    for image in batch.data_mut().chunks_exact_mut(per.max(1)) {
        if flags.hflip && rng.coin(0.5) {
            flip_horizontal(image, h, w);
        }
        if max_dx > 0 || max_dy > 0 {
            let dx = rng.int_inclusive(-max_dx, max_dx);
            let dy = rng.int_inclusive(-max_dy, max_dy);
            shift_image(image, h, w, dx, dy);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Vec<f32> {
        (0..c * h * w).map(|v| (v % 251) as f32 / 250.0).collect()
    }

    #[test]
    fn flags_off_is_identity() {
        let mut t = Tensor::new(&[2, 3, 4, 4], ramp(6, 4, 4)).unwrap();
        let before = t.clone();
        augment(&mut t, &mut Rng::new(1), AugmentFlags::default());
        assert_eq!(t, before);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut img = ramp(3, 5, 7);
        let orig = img.clone();
        flip_horizontal(&mut img, 5, 7);
        assert_ne!(img, orig);
        flip_horizontal(&mut img, 5, 7);
        assert_eq!(img, orig);
    }

    #[test]
    fn shift_right_by_three_zero_fills_left_columns() {
        let (h, w) = (32, 32);
        let orig: Vec<f32> = (0..h * w).map(|v| 0.5 + (v % 7) as f32 * 0.01).collect();
        let mut img = orig.clone();
        shift_image(&mut img, h, w, 3, 0);
        for y in 0..h {
            for x in 0..w {
                let v = img[y * w + x];
                if x < 3 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, orig[y * w + x - 3]);
                }
            }
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_range() {
        let mut t = Tensor::new(&[8, 3, 32, 32], ramp(24, 32, 32)).unwrap();
        let flags = AugmentFlags {
            hflip: true,
            shift_frac: 0.1,
        };
        augment(&mut t, &mut Rng::new(4), flags);
        assert_eq!(t.shape(), &[8, 3, 32, 32]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn augmentation_deterministic_per_seed() {
        let flags = AugmentFlags {
            hflip: true,
            shift_frac: 0.1,
        };
        let mut a = Tensor::new(&[4, 1, 10, 10], ramp(4, 10, 10)).unwrap();
        let mut b = a.clone();
        augment(&mut a, &mut Rng::new(5), flags);
        augment(&mut b, &mut Rng::new(5), flags);
        assert_eq!(a, b);
    }

    #[test]
    fn shift_stays_within_ten_percent() {
        // a single bright pixel in the centre can move at most 3 px on 32x32
        let flags = AugmentFlags {
            hflip: false,
            shift_frac: 0.1,
        };
        let mut rng = Rng::new(8);
        for _ in 0..200 {
            let mut img = vec![0f32; 32 * 32];
            img[16 * 32 + 16] = 1.0;
            let mut t = Tensor::new(&[1, 1, 32, 32], img).unwrap();
            augment(&mut t, &mut rng, flags);
            let pos = t.data().iter().position(|&v| v == 1.0).unwrap();
            let (y, x) = ((pos / 32) as i64, (pos % 32) as i64);
            assert!((y - 16).abs() <= 3 && (x - 16).abs() <= 3);
        }
    }
}
