//! Class datasets in the MVTec directory layout, plus patch sampling and a
//! synthetic texture generator for self-contained runs.
//!
//! Layout: `<root>/<class>/train/good/*.png`, `<root>/<class>/test/<type>/*.png`,
//! `<root>/<class>/ground_truth/<type>/*_mask.png`. Everything is resized to
//! 256x256 on load: bilinear for images, nearest plus a 0.5 threshold for
//! masks so they stay binary.

pub mod sampling;
pub mod synthetic;

use crate::error::{Error, Result};
use image::imageops::FilterType;
use std::fs;
use std::path::{Path, PathBuf};

pub const IMAGE_SIZE: usize = 256;
pub const CHANNELS: usize = 3;

/// One RGB image, channels-first `[3,256,256]`, values in [0,1].
#[derive(Clone)]
pub struct Image {
    data: Vec<f32>,
}

impl Image {
    pub fn from_channels_first(data: Vec<f32>) -> Self {
        assert_eq!(data.len(), CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
        Image { data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x]
    }

    /// Copy the `[3,size,size]` patch whose top-left corner is `(y,x)`.
    pub fn extract_patch(&self, y: usize, x: usize, size: usize) -> Vec<f32> {
        assert!(y + size <= IMAGE_SIZE && x + size <= IMAGE_SIZE);
        let mut out = Vec::with_capacity(CHANNELS * size * size);
        for c in 0..CHANNELS {
            for row in y..y + size {
                let base = (c * IMAGE_SIZE + row) * IMAGE_SIZE + x;
                out.extend_from_slice(&self.data[base..base + size]);
            }
        }
        out
    }
}

/// A test image with its pixel-level ground truth.
pub struct TestImage {
    pub image: Image,
    /// `[256*256]` of {0,1}; all zeros for defect-free images.
    pub mask: Vec<u8>,
    /// 1 iff the mask contains at least one 1.
    pub label: u8,
    /// Defect-type directory the image came from.
    pub kind: String,
}

pub struct ClassDataset {
    pub class_name: String,
    pub train: Vec<Image>,
    pub test: Vec<TestImage>,
}

fn sorted_entries(dir: &Path, dirs_only: bool) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| if dirs_only { p.is_dir() } else { p.is_file() })
        .collect();
    out.sort();
    Ok(out)
}

fn decode_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let resized = img.resize_exact(IMAGE_SIZE as u32, IMAGE_SIZE as u32, FilterType::Triangle);
    let rgb = resized.to_rgb8();
    let mut data = vec![0f32; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..CHANNELS {
            data[(c * IMAGE_SIZE + y as usize) * IMAGE_SIZE + x as usize] =
                p.0[c] as f32 / 255.0;
        }
    }
    Ok(Image { data })
}

fn decode_mask(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path)?;
    let resized = img.resize_exact(IMAGE_SIZE as u32, IMAGE_SIZE as u32, FilterType::Nearest);
    let gray = resized.to_luma8();
    Ok(gray.pixels().map(|p| u8::from(p.0[0] as f32 / 255.0 >= 0.5)).collect())
}

/// Load a single image file with the standard resize to 256x256.
pub fn load_image(path: &Path) -> Result<Image> {
    decode_image(path)
}

/// Load one class. Train images come from `train/good`; test images from
/// every `test/<type>` directory in lexicographic order with masks joined
/// from `ground_truth/<type>` (`good` images get all-zero masks).
pub fn load_class(root: &Path, class_name: &str) -> Result<ClassDataset> {
    let class_dir = root.join(class_name);
    let train_dir = class_dir.join("train").join("good");
    let test_dir = class_dir.join("test");
    if !train_dir.is_dir() || !test_dir.is_dir() {
        return Err(Error::DatasetNotFound(class_dir));
    }

    let mut train = Vec::new();
    for path in sorted_entries(&train_dir, false)? {
        train.push(decode_image(&path)?);
    }
    if train.is_empty() {
        return Err(Error::CorruptDataset(format!("no train images in {train_dir:?}")));
    }

    let mut test = Vec::new();
    for type_dir in sorted_entries(&test_dir, true)? {
        let kind = type_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        for path in sorted_entries(&type_dir, false)? {
            let image = decode_image(&path)?;
            let (mask, label) = if kind == "good" {
                (vec![0u8; IMAGE_SIZE * IMAGE_SIZE], 0)
            } else {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::CorruptDataset(format!("bad file name {path:?}")))?;
                let mask_path = class_dir
                    .join("ground_truth")
                    .join(&kind)
                    .join(format!("{stem}_mask.png"));
                if !mask_path.is_file() {
                    return Err(Error::CorruptDataset(format!(
                        "missing mask {mask_path:?} for {path:?}"
                    )));
                }
                let mask = decode_mask(&mask_path)?;
                let label = u8::from(mask.iter().any(|&v| v == 1));
                (mask, label)
            };
            test.push(TestImage { image, mask, label, kind: kind.clone() });
        }
    }
    if test.is_empty() {
        return Err(Error::CorruptDataset(format!("no test images in {test_dir:?}")));
    }

    Ok(ClassDataset { class_name: class_name.to_string(), train, test })
}
