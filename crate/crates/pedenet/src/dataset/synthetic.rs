//! Deterministic synthetic texture class in the MVTec directory layout.
//!
//! Normal images share one quasi-periodic texture (a sum of 2-3 sinusoidal
//! gratings with seed-fixed wavelengths, orientations, phases, and channel
//! tints) and differ only by per-image gaussian pixel noise. Defective test
//! images additionally carry one rectangular or elliptical region whose
//! pixels are either locally shuffled or contrast-inverted, with an exact
//! ground-truth mask.

use crate::dataset::{ClassDataset, Image, TestImage, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fs;
use std::path::Path;

const NOISE_STD: f64 = 0.02;
/// Accepted defect area as a fraction of the image, endpoints inclusive.
const AREA_BAND: (f64, f64) = (0.006, 0.055);

struct Grating {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
    tint: [f64; 3],
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// The shared noise-free texture, channels-first.
fn base_texture(gratings: &[Grating]) -> Vec<f64> {
    let mut base = vec![0.5f64; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
    for gr in gratings {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let s =
                    (2.0 * std::f64::consts::PI * (gr.fy * y as f64 + gr.fx * x as f64)
                        + gr.phase)
                        .sin();
                for c in 0..CHANNELS {
                    base[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x] += gr.amp * gr.tint[c] * s;
                }
            }
        }
    }
    base
}

fn noisy_image(base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f32> {
    base.iter()
        .map(|&v| clamp01(v + NOISE_STD * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Draw one defect mask whose pixel count lands inside the area band.
fn draw_mask(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let lo = (AREA_BAND.0 * (IMAGE_SIZE * IMAGE_SIZE) as f64) as usize;
    let hi = (AREA_BAND.1 * (IMAGE_SIZE * IMAGE_SIZE) as f64) as usize;
    loop {
        let mut mask = vec![0u8; IMAGE_SIZE * IMAGE_SIZE];
        let area;
        if rng.gen_bool(0.5) {
            let h = rng.gen_range(20..=60usize);
            let w = rng.gen_range(20..=60usize);
            let y0 = rng.gen_range(0..=IMAGE_SIZE - h);
            let x0 = rng.gen_range(0..=IMAGE_SIZE - w);
            for y in y0..y0 + h {
                mask[y * IMAGE_SIZE + x0..y * IMAGE_SIZE + x0 + w].fill(1);
            }
            area = h * w;
        } else {
            let a = rng.gen_range(10..=30usize);
            let b = rng.gen_range(10..=30usize);
            let cy = rng.gen_range(a..IMAGE_SIZE - a);
            let cx = rng.gen_range(b..IMAGE_SIZE - b);
            let mut count = 0;
            for y in cy - a..=cy + a {
                for x in cx - b..=cx + b {
                    let ny = (y as f64 - cy as f64) / a as f64;
                    let nx = (x as f64 - cx as f64) / b as f64;
                    if ny * ny + nx * nx <= 1.0 {
                        mask[y * IMAGE_SIZE + x] = 1;
                        count += 1;
                    }
                }
            }
            area = count;
        }
        if (lo..=hi).contains(&area) {
            return mask;
        }
    }
}

/// Corrupt the masked region: shuffle its pixels in place or invert them.
fn apply_defect(pixels: &mut [f32], mask: &[u8], rng: &mut ChaCha8Rng) {
    let coords: Vec<usize> = (0..IMAGE_SIZE * IMAGE_SIZE).filter(|&i| mask[i] == 1).collect();
    if rng.gen_bool(0.5) {
        let mut perm = coords.clone();
        perm.shuffle(rng);
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let orig = pixels.to_vec();
        for (dst, src) in coords.iter().zip(&perm) {
            for c in 0..CHANNELS {
                pixels[c * plane + dst] = orig[c * plane + src];
            }
        }
    } else {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for &i in &coords {
            for c in 0..CHANNELS {
                pixels[c * plane + i] = 1.0 - pixels[c * plane + i];
            }
        }
    }
}

fn save_rgb(path: &Path, pixels: &[f32]) -> Result<()> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let img = image::RgbImage::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |x, y| {
        let i = y as usize * IMAGE_SIZE + x as usize;
        image::Rgb([
            (pixels[i] * 255.0).round() as u8,
            (pixels[plane + i] * 255.0).round() as u8,
            (pixels[2 * plane + i] * 255.0).round() as u8,
        ])
    });
    img.save(path)?;
    Ok(())
}

fn save_mask(path: &Path, mask: &[u8]) -> Result<()> {
    let img = image::GrayImage::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |x, y| {
        image::Luma([mask[y as usize * IMAGE_SIZE + x as usize] * 255])
    });
    img.save(path)?;
    Ok(())
}

/// Write `<root>/<class_name>` and return the generated data. The first
/// `n_test/2` test images are defect-free, the rest defective; on disk they
/// land in `test/good` and `test/defect` respectively.
pub fn generate_synthetic_class(
    root: &Path,
    class_name: &str,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<ClassDataset> {
    if n_train < 10 || n_test < 10 {
        return Err(Error::InvalidArgument(format!(
            "synthetic class needs at least 10 train and 10 test images, \
             got {n_train}/{n_test}"
        )));
    }
    let class_dir = root.join(class_name);
    let train_dir = class_dir.join("train").join("good");
    let good_dir = class_dir.join("test").join("good");
    let defect_dir = class_dir.join("test").join("defect");
    let mask_dir = class_dir.join("ground_truth").join("defect");
    for d in [&train_dir, &good_dir, &defect_dir, &mask_dir] {
        fs::create_dir_all(d)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_gratings = rng.gen_range(2..=3usize);
    let gratings: Vec<Grating> = (0..n_gratings)
        .map(|_| {
            let wavelength = rng.gen_range(16.0..96.0);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            Grating {
                fy: theta.sin() / wavelength,
                fx: theta.cos() / wavelength,
                phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                amp: rng.gen_range(0.10..0.18),
                tint: [
                    rng.gen_range(0.6..1.0),
                    rng.gen_range(0.6..1.0),
                    rng.gen_range(0.6..1.0),
                ],
            }
        })
        .collect();
    let base = base_texture(&gratings);

    let mut train = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let pixels = noisy_image(&base, &mut rng);
        save_rgb(&train_dir.join(format!("{i:03}.png")), &pixels)?;
        train.push(Image::from_channels_first(pixels));
    }

    let n_good = n_test / 2;
    let mut good_tests = Vec::with_capacity(n_good);
    for i in 0..n_good {
        let pixels = noisy_image(&base, &mut rng);
        save_rgb(&good_dir.join(format!("{i:03}.png")), &pixels)?;
        good_tests.push(TestImage {
            image: Image::from_channels_first(pixels),
            mask: vec![0u8; IMAGE_SIZE * IMAGE_SIZE],
            label: 0,
            kind: "good".into(),
        });
    }

    let mut defect_tests = Vec::with_capacity(n_test - n_good);
    for i in 0..n_test - n_good {
        let mut pixels = noisy_image(&base, &mut rng);
        let mask = draw_mask(&mut rng);
        apply_defect(&mut pixels, &mask, &mut rng);
        save_rgb(&defect_dir.join(format!("{i:03}.png")), &pixels)?;
        save_mask(&mask_dir.join(format!("{i:03}_mask.png")), &mask)?;
        defect_tests.push(TestImage {
            image: Image::from_channels_first(pixels),
            mask,
            label: 1,
            kind: "defect".into(),
        });
    }

    // Test order matches load_class: type directories lexicographically,
    // "defect" before "good".
    let mut test = defect_tests;
    test.extend(good_tests);
    Ok(ClassDataset { class_name: class_name.to_string(), train, test })
}
