//! Training-time augmentation that leaves photo-consistency intact.
//!
//! Every image of one training item (the reference and each warped plane)
//! gets the same mirror flips and the same colour-channel shuffle and
//! inversion, and the targets get the same flips. A pixel's warped colour
//! then matches its reference colour at the same planes as before, so the
//! supervision stays exact while the appearance of the few training scenes
//! keeps changing.

use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::geometry::ImageBuffer;
use crate::masks::{DepthMap, MultiplaneMask};

/// Keeps the augmentation stream apart from the batch-order stream of the same seed.
const AUGMENT_SALT: u64 = 0xA06_3E47;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Output channel `c` takes input channel `channel_order[c]`.
    pub channel_order: [usize; 3],
    /// Applied after reordering: `v -> offset + gain * v`. A negative gain
    /// inverts the channel.
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl Augmentation {
    pub const IDENTITY: Self =
        Self { flip_x: false, flip_y: false, channel_order: [0, 1, 2], gain: [1.0; 3], offset: [0.0; 3] };

    /// Gains have magnitude in [0.4, 1] and either sign; offsets keep a
    /// [0, 1] input inside [0, 1].
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut channel_order = [0, 1, 2];
        channel_order.shuffle(rng);
        let mut gain = [1.0; 3];
        let mut offset = [0.0; 3];
        for c in 0..3 {
            let g: f64 = rng.gen_range(0.4..=1.0);
            let slack = (1.0 - g) * rng.gen::<f64>();
            if rng.gen() {
                gain[c] = -g;
                offset[c] = g + slack;
            } else {
                gain[c] = g;
                offset[c] = slack;
            }
        }
        Self { flip_x: rng.gen(), flip_y: rng.gen(), channel_order, gain, offset }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> usize {
        let sy = if self.flip_y { h - 1 - y } else { y };
        let sx = if self.flip_x { w - 1 - x } else { x };
        sy * w + sx
    }

    /// Mirror every `h x w` plane of a channel-major block.
    pub fn flip<T: Copy>(&self, data: &[T], h: usize, w: usize) -> Vec<T> {
        let n = h * w;
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks_exact(n) {
            for y in 0..h {
                for x in 0..w {
                    out.push(plane[self.source(y, x, h, w)]);
                }
            }
        }
        out
    }

    /// Flip, then shuffle and invert colours within each consecutive RGB
    /// triple of planes (a warp volume or a single image).
    pub fn apply_rgb(&self, data: &[f64], h: usize, w: usize) -> Vec<f64> {
        let n = h * w;
        let flipped = self.flip(data, h, w);
        if self.channel_order == [0, 1, 2] && self.gain == [1.0; 3] && self.offset == [0.0; 3] {
            return flipped;
        }
        let mut out = Vec::with_capacity(flipped.len());
        for triple in flipped.chunks_exact(3 * n) {
            for c in 0..3 {
                let src = &triple[self.channel_order[c] * n..(self.channel_order[c] + 1) * n];
                let (g, o) = (self.gain[c], self.offset[c]);
                out.extend(src.iter().map(|v| o + g * v));
            }
        }
        out
    }

    pub fn apply_image(&self, img: &ImageBuffer) -> ImageBuffer {
        let (h, w) = (img.height, img.width);
        ImageBuffer {
            data: if img.channels == 3 { self.apply_rgb(&img.data, h, w) } else { self.flip(&img.data, h, w) },
            validity_mask: img.validity_mask.as_ref().map(|m| self.flip(m, h, w)),
            ..img.clone()
        }
    }

    pub fn apply_masks(&self, m: &MultiplaneMask) -> MultiplaneMask {
        let (h, w) = (m.height, m.width);
        MultiplaneMask {
            values: self.flip(&m.values, h, w),
            validity: m.validity.as_ref().map(|v| self.flip(v, h, w)),
            ..*m
        }
    }

    pub fn apply_depth(&self, d: &DepthMap) -> DepthMap {
        let (h, w) = (d.height, d.width);
        DepthMap { height: h, width: w, values: self.flip(&d.values, h, w), validity: self.flip(&d.validity, h, w) }
    }
}

/// One augmentation per batch item for iteration `it`.
pub fn batch_augmentations(seed: u64, batch: usize, it: u64) -> Vec<Augmentation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream(it);
    (0..batch).map(|_| Augmentation::random(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_and_colours() {
        let a = Augmentation {
            flip_x: true,
            flip_y: false,
            channel_order: [2, 0, 1],
            gain: [1.0, -1.0, 0.5],
            offset: [0.0, 1.0, 0.25],
        };
        // 3 channels of 1x2.
        let img = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let out = a.apply_rgb(&img, 1, 2);
        let expect = [0.6, 0.5, 1.0 - 0.2, 1.0 - 0.1, 0.25 + 0.2, 0.25 + 0.15];
        assert!(out.iter().zip(expect).all(|(x, y)| (x - y).abs() < 1e-15), "{out:?}");
        assert_eq!(Augmentation::IDENTITY.apply_rgb(&img, 1, 2), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let a = Augmentation { flip_x: true, flip_y: true, ..Augmentation::IDENTITY };
        let d: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(a.flip(&a.flip(&d, 3, 4), 3, 4), d);
        assert_eq!(a.flip(&d, 3, 4)[0], 11.0);
    }

    #[test]
    fn draws_are_seeded() {
        assert_eq!(batch_augmentations(3, 4, 7), batch_augmentations(3, 4, 7));
        let many: Vec<_> = (0..50).flat_map(|it| batch_augmentations(3, 4, it)).collect();
        assert!(many.iter().any(|a| !a.is_identity()) && many.iter().any(|a| a.flip_x) && many.iter().any(|a| !a.flip_x));
    }

    #[test]
    fn colours_stay_in_range() {
        for a in (0..200).flat_map(|it| batch_augmentations(9, 4, it)) {
            for c in 0..3 {
                let ends = [a.offset[c], a.offset[c] + a.gain[c]];
                assert!(ends.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)), "{a:?}");
            }
        }
    }
}
