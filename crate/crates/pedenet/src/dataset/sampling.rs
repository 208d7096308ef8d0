//! Random patch draws and jittered neighbor pairs for the location task.

use crate::dataset::{Image, IMAGE_SIZE};
use crate::error::{Error, Result};
use rand::Rng;

/// Relative grid offsets (dy,dx) per direction label: row-major scan of the
/// 3x3 neighborhood without its center.
pub const NEIGHBOR_OFFSETS: [(i32, i32); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Default positional jitter applied to the neighbor patch, in pixels.
pub const DEFAULT_JITTER: usize = 8;

pub struct PatchPair {
    pub patch_a: Vec<f32>,
    pub patch_b: Vec<f32>,
    /// Direction index into [`NEIGHBOR_OFFSETS`].
    pub label: usize,
    pub a_top_left: (usize, usize),
    pub b_top_left: (usize, usize),
}

impl PatchPair {
    pub fn one_hot(&self) -> [f32; 8] {
        let mut v = [0.0; 8];
        v[self.label] = 1.0;
        v
    }
}

/// Uniformly draw one `size`-square patch fully inside the image.
pub fn sample_patch(
    image: &Image,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, (usize, usize))> {
    if size == 0 || size > IMAGE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} does not fit a {IMAGE_SIZE}x{IMAGE_SIZE} image"
        )));
    }
    let max = IMAGE_SIZE - size;
    let y = rng.gen_range(0..=max);
    let x = rng.gen_range(0..=max);
    Ok((image.extract_patch(y, x, size), (y, x)))
}

/// Draw an anchor patch and one of its eight grid neighbors, the neighbor
/// displaced by `(dy*size + jy, dx*size + jx)` with `jy, jx` uniform in
/// `[-jitter, jitter]`. Draw order: direction, jitter, anchor.
pub fn sample_neighbor_pair(
    image: &Image,
    size: usize,
    jitter: usize,
    rng: &mut impl Rng,
) -> Result<PatchPair> {
    if size == 0 || size > IMAGE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} does not fit a {IMAGE_SIZE}x{IMAGE_SIZE} image"
        )));
    }
    let label = rng.gen_range(0..NEIGHBOR_OFFSETS.len());
    let (dy, dx) = NEIGHBOR_OFFSETS[label];
    let j = jitter as i64;
    let jy = rng.gen_range(-j..=j);
    let jx = rng.gen_range(-j..=j);
    let off_y = dy as i64 * size as i64 + jy;
    let off_x = dx as i64 * size as i64 + jx;
    let hi = (IMAGE_SIZE - size) as i64;
    let (ay_lo, ay_hi) = (0.max(-off_y), hi.min(hi - off_y));
    let (ax_lo, ax_hi) = (0.max(-off_x), hi.min(hi - off_x));
    if ay_lo > ay_hi || ax_lo > ax_hi {
        return Err(Error::InvalidArgument(format!(
            "no anchor position admits a neighbor at offset ({off_y},{off_x}) \
             for patch size {size}"
        )));
    }
    let ay = rng.gen_range(ay_lo..=ay_hi) as usize;
    let ax = rng.gen_range(ax_lo..=ax_hi) as usize;
    let by = (ay as i64 + off_y) as usize;
    let bx = (ax as i64 + off_x) as usize;
    Ok(PatchPair {
        patch_a: image.extract_patch(ay, ax, size),
        patch_b: image.extract_patch(by, bx, size),
        label,
        a_top_left: (ay, ax),
        b_top_left: (by, bx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image() -> Image {
        let data: Vec<f32> = (0..3 * IMAGE_SIZE * IMAGE_SIZE)
            .map(|i| (i % 251) as f32 / 250.0)
            .collect();
        Image::from_channels_first(data)
    }

    #[test]
    fn patches_stay_in_bounds_over_many_draws() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for i in 0..100_000 {
            if i % 2 == 0 {
                let (_, (y, x)) = sample_patch(&img, 64, &mut rng).unwrap();
                assert!(y + 64 <= IMAGE_SIZE && x + 64 <= IMAGE_SIZE);
            } else {
                let p = sample_neighbor_pair(&img, 64, 8, &mut rng).unwrap();
                assert!(p.a_top_left.0 + 64 <= IMAGE_SIZE && p.a_top_left.1 + 64 <= IMAGE_SIZE);
                assert!(p.b_top_left.0 + 64 <= IMAGE_SIZE && p.b_top_left.1 + 64 <= IMAGE_SIZE);
            }
        }
    }

    #[test]
    fn coordinates_are_uniform_over_valid_positions() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (mut sy, mut sx) = (0f64, 0f64);
        let n = 10_000;
        for _ in 0..n {
            let (_, (y, x)) = sample_patch(&img, 64, &mut rng).unwrap();
            sy += y as f64;
            sx += x as f64;
        }
        assert!((sy / n as f64 - 96.0).abs() < 5.0);
        assert!((sx / n as f64 - 96.0).abs() < 5.0);
    }

    #[test]
    fn full_size_patch_pins_to_origin() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let (_, coords) = sample_patch(&img, IMAGE_SIZE, &mut rng).unwrap();
        assert_eq!(coords, (0, 0));
        assert!(sample_patch(&img, IMAGE_SIZE + 1, &mut rng).is_err());
    }

    #[test]
    fn neighbor_labels_are_roughly_uniform() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut counts = [0usize; 8];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_neighbor_pair(&img, 64, 8, &mut rng).unwrap().label] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.125).abs() < 0.02, "label frequency {f}");
        }
    }

    #[test]
    fn zero_jitter_offsets_decode_back_to_the_label() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for _ in 0..500 {
            let p = sample_neighbor_pair(&img, 64, 0, &mut rng).unwrap();
            let (dy, dx) = NEIGHBOR_OFFSETS[p.label];
            assert_eq!(
                p.b_top_left.0 as i64 - p.a_top_left.0 as i64,
                dy as i64 * 64
            );
            assert_eq!(
                p.b_top_left.1 as i64 - p.a_top_left.1 as i64,
                dx as i64 * 64
            );
        }
    }

    #[test]
    fn corner_and_side_neighbor_examples() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (mut saw0, mut saw4) = (false, false);
        for _ in 0..2_000 {
            let p = sample_neighbor_pair(&img, 64, 0, &mut rng).unwrap();
            if p.label == 0 {
                assert_eq!(p.b_top_left.0 as i64 - p.a_top_left.0 as i64, -64);
                assert_eq!(p.b_top_left.1 as i64 - p.a_top_left.1 as i64, -64);
                saw0 = true;
            }
            if p.label == 4 {
                assert_eq!(p.b_top_left.0, p.a_top_left.0);
                assert_eq!(p.b_top_left.1 as i64 - p.a_top_left.1 as i64, 64);
                saw4 = true;
            }
        }
        assert!(saw0 && saw4);
    }

    #[test]
    fn oversized_neighbor_geometry_is_rejected() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        // A 200px patch leaves no room for any grid neighbor.
        assert!(sample_neighbor_pair(&img, 200, 0, &mut rng).is_err());
    }

    #[test]
    fn one_hot_label_has_a_single_one() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let p = sample_neighbor_pair(&img, 64, 8, &mut rng).unwrap();
        let oh = p.one_hot();
        assert_eq!(oh.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(oh[p.label], 1.0);
    }

    #[test]
    fn patch_content_matches_reported_coordinates() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let p = sample_neighbor_pair(&img, 64, 8, &mut rng).unwrap();
        assert_eq!(p.patch_a, img.extract_patch(p.a_top_left.0, p.a_top_left.1, 64));
        assert_eq!(p.patch_b, img.extract_patch(p.b_top_left.0, p.b_top_left.1, 64));
    }
}
