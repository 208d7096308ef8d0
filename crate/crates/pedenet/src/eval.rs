//! Pixel- and image-level AUROC, per-class reports, and heatmap rendering.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::dataset::{ClassDataset, Image, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::pe::PeNetwork;
use crate::scoring::{anomaly_map, AnomalyMap, GalleryIndex, PixelAggregation};

/// Area under the ROC curve via the rank-sum statistic.
///
/// Tied scores get their midrank, so the result equals
/// P(s⁺ > s⁻) + ½P(s⁺ = s⁻) over positive/negative pairs. Labels are
/// treated as positive when nonzero.
pub fn auroc(scores: &[f32], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {bad}")));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share a midrank; half-integers sum exactly in f64.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] != 0 {
                pos_rank_sum += midrank;
            }
        }
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_name: String,
    pub pixel_auroc: f64,
    pub image_auroc: f64,
    pub n_test_images: usize,
    pub n_anomalous: usize,
    pub runtime_seconds: f64,
}

/// Score every test image of a class and fold the results into a report.
///
/// Pixel AUROC pools the per-pixel (score, mask) pairs of all test images;
/// image AUROC ranks per-image max scores against the defect labels. The
/// anomaly maps come back alongside the report so heatmaps can be written
/// without rescoring.
pub fn evaluate_class<S: Scalar>(
    pe: &PeNetwork<S>,
    index: &GalleryIndex,
    dataset: &ClassDataset,
    aggregation: PixelAggregation,
) -> Result<(EvalReport, Vec<AnomalyMap>)> {
    let start = Instant::now();
    let mut maps = Vec::with_capacity(dataset.test.len());
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    let mut image_scores = Vec::new();
    let mut image_labels = Vec::new();
    for t in &dataset.test {
        let map = anomaly_map(pe, index, &t.image, aggregation)?;
        pixel_scores.extend_from_slice(&map.pixel_scores);
        pixel_labels.extend_from_slice(&t.mask);
        image_scores.push(map.image_score);
        image_labels.push(t.label);
        maps.push(map);
    }
    let report = EvalReport {
        class_name: dataset.class_name.clone(),
        pixel_auroc: auroc(&pixel_scores, &pixel_labels)?,
        image_auroc: auroc(&image_scores, &image_labels)?,
        n_test_images: dataset.test.len(),
        n_anomalous: image_labels.iter().filter(|&&l| l != 0).count(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, maps))
}

/// Write the anomaly map over its image as a red overlay PNG.
///
/// Scores are min-max normalized per image to an alpha channel: the minimum
/// pixel stays untouched, the maximum turns pure red. Degenerate maps fall
/// back to alpha 0 (all-zero map) or alpha 1 (constant positive map).
/// Output bytes are deterministic for fixed inputs.
pub fn render_heatmap(image: &Image, map: &AnomalyMap, out_path: &Path) -> Result<()> {
    if map.pixel_scores.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "anomaly map of {} pixels for a {IMAGE_SIZE}x{IMAGE_SIZE} image",
            map.pixel_scores.len()
        )));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &s in &map.pixel_scores {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let alpha = |s: f32| {
        if hi > lo {
            (s - lo) / (hi - lo)
        } else if hi > 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let px = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = image::RgbImage::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |x, y| {
        let (xu, yu) = (x as usize, y as usize);
        let a = alpha(map.pixel_scores[yu * IMAGE_SIZE + xu]);
        let r = image.pixel(0, yu, xu);
        let g = image.pixel(1, yu, xu);
        let b = image.pixel(2, yu, xu);
        image::Rgb([px(r + a * (1.0 - r)), px(g * (1.0 - a)), px(b * (1.0 - a))])
    });
    out.save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(())
}

/// Binary dilation of a `[256*256]` mask by a `(2r+1)²` square element,
/// for checking whether a detection lands on or near the ground truth.
pub fn dilate_mask(mask: &[u8], radius: usize) -> Vec<u8> {
    assert_eq!(mask.len(), IMAGE_SIZE * IMAGE_SIZE);
    let n = IMAGE_SIZE;
    let mut horiz = vec![0u8; mask.len()];
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] != 0 {
                for xx in x.saturating_sub(radius)..=(x + radius).min(n - 1) {
                    horiz[y * n + xx] = 1;
                }
            }
        }
    }
    let mut out = vec![0u8; mask.len()];
    for y in 0..n {
        for x in 0..n {
            if horiz[y * n + x] != 0 {
                for yy in y.saturating_sub(radius)..=(y + radius).min(n - 1) {
                    out[yy * n + x] = 1;
                }
            }
        }
    }
    out
}

/// Plain-text table over one or more class reports.
pub fn report_table(reports: &[EvalReport]) -> String {
    let name_w = reports
        .iter()
        .map(|r| r.class_name.len())
        .chain(["class".len()])
        .max()
        .unwrap();
    let mut out = format!(
        "{:<name_w$}  pixel_auroc  image_auroc  images  anomalous  seconds\n",
        "class"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>11.4}  {:>11.4}  {:>6}  {:>9}  {:>7.1}",
            r.class_name,
            r.pixel_auroc,
            r.image_auroc,
            r.n_test_images,
            r.n_anomalous,
            r.runtime_seconds
        );
    }
    out
}

/// Line-delimited key=value form of a report. Floats use shortest
/// round-trip formatting so [`parse_records`] recovers them exactly.
pub fn report_records(r: &EvalReport) -> String {
    format!(
        "class_name={}\npixel_auroc={}\nimage_auroc={}\nn_test_images={}\nn_anomalous={}\nruntime_seconds={}\n",
        r.class_name, r.pixel_auroc, r.image_auroc, r.n_test_images, r.n_anomalous, r.runtime_seconds
    )
}

pub fn parse_records(text: &str) -> Result<EvalReport> {
    let mut class_name = None;
    let mut pixel_auroc = None;
    let mut image_auroc = None;
    let mut n_test_images = None;
    let mut n_anomalous = None;
    let mut runtime_seconds = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("record line without '=': {line:?}")))?;
        let bad = |what: &str| Error::InvalidArgument(format!("bad {what} in record: {value:?}"));
        match key {
            "class_name" => class_name = Some(value.to_string()),
            "pixel_auroc" => pixel_auroc = Some(value.parse().map_err(|_| bad(key))?),
            "image_auroc" => image_auroc = Some(value.parse().map_err(|_| bad(key))?),
            "n_test_images" => n_test_images = Some(value.parse().map_err(|_| bad(key))?),
            "n_anomalous" => n_anomalous = Some(value.parse().map_err(|_| bad(key))?),
            "runtime_seconds" => runtime_seconds = Some(value.parse().map_err(|_| bad(key))?),
            other => {
                return Err(Error::InvalidArgument(format!("unknown record key {other:?}")))
            }
        }
    }
    let miss = |what: &str| Error::InvalidArgument(format!("record missing {what}"));
    Ok(EvalReport {
        class_name: class_name.ok_or_else(|| miss("class_name"))?,
        pixel_auroc: pixel_auroc.ok_or_else(|| miss("pixel_auroc"))?,
        image_auroc: image_auroc.ok_or_else(|| miss("image_auroc"))?,
        n_test_images: n_test_images.ok_or_else(|| miss("n_test_images"))?,
        n_anomalous: n_anomalous.ok_or_else(|| miss("n_anomalous"))?,
        runtime_seconds: runtime_seconds.ok_or_else(|| miss("runtime_seconds"))?,
    })
}
