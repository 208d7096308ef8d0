//! Anomaly scoring: a gallery of training-patch embeddings, nearest-neighbor
//! distances against it, and their aggregation into pixel-level maps.

pub mod ann;

use std::path::Path;

use crate::checkpoint::{read_container, write_container};
use crate::dataset::{Image, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::graph::Graph;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::pe::{PeNetwork, PATCH_SIZE};

/// Grid spacing between patch top-left corners, in pixels.
pub const DEFAULT_STRIDE: usize = 16;

/// Patches per embedding batch while building galleries and maps.
const EMBED_CHUNK: usize = 64;

/// Which nearest-neighbor search backs the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Linear scan; the reference answer.
    Exact,
    /// Randomized projection forest with exact re-ranking of candidates.
    Approx,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Exact => "exact",
            Backend::Approx => "approx",
        }
    }

    pub fn parse(s: &str) -> Option<Backend> {
        match s {
            "exact" => Some(Backend::Exact),
            "approx" => Some(Backend::Approx),
            _ => None,
        }
    }
}

/// How pixel scores combine the patches covering them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelAggregation {
    Mean,
    Max,
}

impl PixelAggregation {
    pub fn name(self) -> &'static str {
        match self {
            PixelAggregation::Mean => "mean",
            PixelAggregation::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<PixelAggregation> {
        match s {
            "mean" => Some(PixelAggregation::Mean),
            "max" => Some(PixelAggregation::Max),
            _ => None,
        }
    }
}

/// Top-left grid coordinates along one axis for the given stride.
///
/// The stride must divide the span `IMAGE_SIZE - patch_size` so that the
/// grid reaches the far edge and every pixel is covered by at least one
/// patch.
pub fn grid_positions(stride: usize, patch_size: usize) -> Result<Vec<usize>> {
    if patch_size == 0 || patch_size > IMAGE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} does not fit a {IMAGE_SIZE}-pixel image"
        )));
    }
    let span = IMAGE_SIZE - patch_size;
    if span == 0 {
        return Ok(vec![0]);
    }
    if stride == 0 || stride > span || span % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} must divide the {span}-pixel grid span"
        )));
    }
    Ok((0..=span).step_by(stride).collect())
}

/// Embeddings of every grid patch of the training images, one row per patch.
pub struct EmbeddingGallery {
    rows: Vec<f32>,
    zdim: usize,
    stride: usize,
    patch_size: usize,
}

impl EmbeddingGallery {
    pub fn new(rows: Vec<f32>, zdim: usize, stride: usize, patch_size: usize) -> Result<Self> {
        grid_positions(stride, patch_size)?;
        if zdim == 0 || rows.len() % zdim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} row values do not split into width-{zdim} rows",
                rows.len()
            )));
        }
        Ok(EmbeddingGallery { rows, zdim, stride, patch_size })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.zdim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn zdim(&self) -> usize {
        self.zdim
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.zdim..(i + 1) * self.zdim]
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.zdim {
            return Err(Error::InvalidArgument(format!(
                "row of width {} pushed into a width-{} gallery",
                row.len(),
                self.zdim
            )));
        }
        self.rows.extend_from_slice(row);
        Ok(())
    }

    /// Persist as a container file: one `gallery` tensor plus the grid keys.
    pub fn save(&self, path: &Path) -> Result<()> {
        let t = Tensor::<f32>::raw(vec![self.len(), self.zdim], self.rows.clone());
        let config = vec![
            ("stride".to_string(), self.stride.to_string()),
            ("patch_size".to_string(), self.patch_size.to_string()),
        ];
        write_container(path, &config, &[("gallery", &t)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container::<f32>(path)?;
        let need = |key: &str| {
            c.get(key)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing key {key}")))?
                .parse::<usize>()
                .map_err(|_| Error::IncompatibleCheckpoint(format!("bad value for {key}")))
        };
        let (stride, patch_size) = (need("stride")?, need("patch_size")?);
        let rows = c
            .tensors
            .into_iter()
            .find(|(n, _)| n == "gallery")
            .ok_or_else(|| Error::IncompatibleCheckpoint("missing gallery tensor".into()))?
            .1;
        if rows.shape().len() != 2 {
            return Err(Error::IncompatibleCheckpoint(format!(
                "gallery tensor has shape {:?}, expected [M,Z]",
                rows.shape()
            )));
        }
        let zdim = rows.shape()[1];
        EmbeddingGallery::new(rows.data().to_vec(), zdim, stride, patch_size)
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))
    }
}

/// Embed every grid patch of `image`, rows in y-major grid order.
pub fn embed_grid<S: Scalar>(
    pe: &PeNetwork<S>,
    image: &Image,
    stride: usize,
) -> Result<Vec<f32>> {
    let positions = grid_positions(stride, PATCH_SIZE)?;
    let coords: Vec<(usize, usize)> = positions
        .iter()
        .flat_map(|&y| positions.iter().map(move |&x| (y, x)))
        .collect();
    let plen = CHANNELS * PATCH_SIZE * PATCH_SIZE;
    let mut out = Vec::with_capacity(coords.len() * crate::pe::EMBED_DIM);
    for chunk in coords.chunks(EMBED_CHUNK) {
        let mut data = vec![S::zero(); chunk.len() * plen];
        for (slot, &(y, x)) in chunk.iter().enumerate() {
            let patch = image.extract_patch(y, x, PATCH_SIZE);
            for (d, &s) in data[slot * plen..(slot + 1) * plen].iter_mut().zip(&patch) {
                *d = S::from_f64(s as f64);
            }
        }
        let mut g = Graph::new();
        let ids = pe.insert(&mut g, false);
        let x = g.constant(Tensor::raw(
            vec![chunk.len(), CHANNELS, PATCH_SIZE, PATCH_SIZE],
            data,
        ));
        let z = ids.embed(&mut g, x)?;
        out.extend(g.value(z).data().iter().map(|&v| v.as_f64() as f32));
    }
    Ok(out)
}

/// Gallery over all grid patches of `images`, in image order then grid order.
pub fn build_gallery<S: Scalar>(
    pe: &PeNetwork<S>,
    images: &[Image],
    stride: usize,
) -> Result<EmbeddingGallery> {
    let mut gallery =
        EmbeddingGallery::new(Vec::new(), crate::pe::EMBED_DIM, stride, PATCH_SIZE)?;
    for image in images {
        gallery.rows.extend(embed_grid(pe, image, stride)?);
    }
    Ok(gallery)
}

/// Squared L2 distance, accumulated left to right in f64.
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Exact nearest-neighbor distance: a linear scan, first minimum wins.
pub fn nearest_distance(gallery: &EmbeddingGallery, query: &[f32]) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("gallery holds no embeddings".into()));
    }
    if query.len() != gallery.zdim() {
        return Err(Error::InvalidArgument(format!(
            "query of width {} against a width-{} gallery",
            query.len(),
            gallery.zdim()
        )));
    }
    let mut best = f64::INFINITY;
    for i in 0..gallery.len() {
        let d = sq_dist(gallery.row(i), query);
        if d < best {
            best = d;
        }
    }
    Ok(best.sqrt())
}

/// A gallery plus whichever search structure the chosen backend needs.
pub struct GalleryIndex {
    gallery: EmbeddingGallery,
    forest: Option<ann::AnnIndex>,
}

impl GalleryIndex {
    pub fn new(gallery: EmbeddingGallery, backend: Backend) -> GalleryIndex {
        let forest = match backend {
            Backend::Exact => None,
            Backend::Approx => Some(ann::AnnIndex::build(&gallery, 0)),
        };
        GalleryIndex { gallery, forest }
    }

    pub fn gallery(&self) -> &EmbeddingGallery {
        &self.gallery
    }

    pub fn distance(&self, query: &[f32]) -> Result<f64> {
        match &self.forest {
            None => nearest_distance(&self.gallery, query),
            Some(forest) => forest.nearest_distance(&self.gallery, query),
        }
    }
}

/// Per-pixel anomaly scores of one image and their maximum.
pub struct AnomalyMap {
    /// `[256*256]` row-major.
    pub pixel_scores: Vec<f32>,
    pub image_score: f32,
}

/// Fold per-patch scores (y-major grid order) into per-pixel scores over the
/// patch footprints, plus the map maximum as the image score.
fn aggregate_patch_scores(
    scores: &[f64],
    positions: &[usize],
    patch_size: usize,
    aggregation: PixelAggregation,
) -> AnomalyMap {
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut pixel_scores = vec![0.0f32; n];
    match aggregation {
        PixelAggregation::Mean => {
            let mut sum = vec![0.0f64; n];
            let mut count = vec![0u32; n];
            for (gy, &y) in positions.iter().enumerate() {
                for (gx, &x) in positions.iter().enumerate() {
                    let s = scores[gy * positions.len() + gx];
                    for py in y..y + patch_size {
                        let base = py * IMAGE_SIZE;
                        for px in x..x + patch_size {
                            sum[base + px] += s;
                            count[base + px] += 1;
                        }
                    }
                }
            }
            for i in 0..n {
                if count[i] > 0 {
                    pixel_scores[i] = (sum[i] / count[i] as f64) as f32;
                }
            }
        }
        PixelAggregation::Max => {
            for (gy, &y) in positions.iter().enumerate() {
                for (gx, &x) in positions.iter().enumerate() {
                    let s = scores[gy * positions.len() + gx] as f32;
                    for py in y..y + patch_size {
                        let base = py * IMAGE_SIZE;
                        for px in x..x + patch_size {
                            pixel_scores[base + px] = pixel_scores[base + px].max(s);
                        }
                    }
                }
            }
        }
    }
    let image_score = pixel_scores.iter().cloned().fold(0.0f32, f32::max);
    AnomalyMap { pixel_scores, image_score }
}

/// Score one image against the gallery: embed its grid patches, take each
/// patch's nearest-gallery distance, and spread those over the pixels the
/// patches cover.
pub fn anomaly_map<S: Scalar>(
    pe: &PeNetwork<S>,
    index: &GalleryIndex,
    image: &Image,
    aggregation: PixelAggregation,
) -> Result<AnomalyMap> {
    let gallery = index.gallery();
    let positions = grid_positions(gallery.stride(), gallery.patch_size())?;
    let zdim = gallery.zdim();
    let embeddings = embed_grid(pe, image, gallery.stride())?;
    let scores = embeddings
        .chunks_exact(zdim)
        .map(|q| index.distance(q))
        .collect::<Result<Vec<f64>>>()?;
    debug_assert_eq!(scores.len(), positions.len() * positions.len());
    Ok(aggregate_patch_scores(&scores, &positions, gallery.patch_size(), aggregation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_image(v: f32) -> Image {
        Image::from_channels_first(vec![v; CHANNELS * IMAGE_SIZE * IMAGE_SIZE])
    }

    fn noise_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_channels_first(
            (0..CHANNELS * IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.gen()).collect(),
        )
    }

    #[test]
    fn grid_counts_follow_the_span_formula() {
        assert_eq!(grid_positions(64, PATCH_SIZE).unwrap(), vec![0, 64, 128, 192]);
        assert_eq!(grid_positions(16, PATCH_SIZE).unwrap().len(), 13);
        // 20 training images at the default stride.
        assert_eq!(20 * 13 * 13, 3380);
        assert!(grid_positions(0, PATCH_SIZE).is_err());
        assert!(grid_positions(13, PATCH_SIZE).is_err());
        assert!(grid_positions(200, PATCH_SIZE).is_err());
    }

    #[test]
    fn gallery_build_covers_every_grid_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pe = PeNetwork::<f32>::init(&mut rng);
        let images = [noise_image(2), noise_image(3)];
        let g = build_gallery(&pe, &images, 64).unwrap();
        assert_eq!(g.len(), 2 * 16);
        assert_eq!(g.zdim(), crate::pe::EMBED_DIM);
        // Grid order: the first row is the (0,0) patch of the first image.
        let direct = embed_grid(&pe, &images[0], 64).unwrap();
        assert_eq!(g.row(0), &direct[..64]);
    }

    #[test]
    fn nearest_distance_matches_the_worked_example() {
        let g = EmbeddingGallery::new(vec![0.0, 0.0, 3.0, 4.0], 2, 16, PATCH_SIZE).unwrap();
        assert_eq!(nearest_distance(&g, &[0.0, 0.5]).unwrap(), 0.5);
        assert_eq!(nearest_distance(&g, &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(nearest_distance(&g, &[6.0, 8.0]).unwrap(), 5.0);
    }

    #[test]
    fn empty_gallery_and_bad_query_are_errors() {
        let empty = EmbeddingGallery::new(Vec::new(), 2, 16, PATCH_SIZE).unwrap();
        assert!(nearest_distance(&empty, &[0.0, 0.0]).is_err());
        let g = EmbeddingGallery::new(vec![0.0, 0.0], 2, 16, PATCH_SIZE).unwrap();
        assert!(nearest_distance(&g, &[1.0]).is_err());
    }

    #[test]
    fn adding_rows_never_increases_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zdim = 8;
        let rows: Vec<f32> = (0..50 * zdim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let small =
            EmbeddingGallery::new(rows[..30 * zdim].to_vec(), zdim, 16, PATCH_SIZE).unwrap();
        let full = EmbeddingGallery::new(rows, zdim, 16, PATCH_SIZE).unwrap();
        for _ in 0..20 {
            let q: Vec<f32> = (0..zdim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (ds, df) = (
                nearest_distance(&small, &q).unwrap(),
                nearest_distance(&full, &q).unwrap(),
            );
            assert!(df <= ds, "distance grew from {ds} to {df}");
        }
    }

    #[test]
    fn training_image_scores_zero_against_its_own_gallery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pe = PeNetwork::<f32>::init(&mut rng);
        let img = noise_image(6);
        let gallery = build_gallery(&pe, std::slice::from_ref(&img), 64).unwrap();
        let index = GalleryIndex::new(gallery, Backend::Exact);
        let map = anomaly_map(&pe, &index, &img, PixelAggregation::Mean).unwrap();
        assert_eq!(map.image_score, 0.0);
        assert!(map.pixel_scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn interior_pixels_average_their_four_covering_patches() {
        let positions = grid_positions(32, PATCH_SIZE).unwrap();
        let n_side = positions.len();
        let scores: Vec<f64> = (0..n_side * n_side).map(|i| i as f64).collect();
        let map =
            aggregate_patch_scores(&scores, &positions, PATCH_SIZE, PixelAggregation::Mean);
        // Pixel (32,32) sits in the patches anchored at {0,32} x {0,32}.
        let expect = (0.0 + 1.0 + n_side as f64 + n_side as f64 + 1.0) / 4.0;
        assert_eq!(map.pixel_scores[32 * IMAGE_SIZE + 32], expect as f32);
        // A corner pixel sees only the (0,0) patch.
        assert_eq!(map.pixel_scores[0], 0.0);
        let top_right = map.pixel_scores[IMAGE_SIZE - 1];
        assert_eq!(top_right, (n_side - 1) as f32);
        // The image score is the maximum pixel score.
        let max = map.pixel_scores.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(map.image_score, max);
    }

    #[test]
    fn max_aggregation_keeps_the_largest_covering_score() {
        let positions = grid_positions(32, PATCH_SIZE).unwrap();
        let n_side = positions.len();
        let mut scores = vec![0.0f64; n_side * n_side];
        scores[0] = 3.0;
        let map = aggregate_patch_scores(&scores, &positions, PATCH_SIZE, PixelAggregation::Max);
        assert_eq!(map.pixel_scores[32 * IMAGE_SIZE + 32], 3.0);
        assert_eq!(map.pixel_scores[(200) * IMAGE_SIZE + 200], 0.0);
        assert_eq!(map.image_score, 3.0);
    }

    #[test]
    fn constant_image_yields_a_constant_interior() {
        // Identical patches everywhere: every patch score is the same, so
        // every pixel mean equals it too.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pe = PeNetwork::<f32>::init(&mut rng);
        let train = flat_image(0.25);
        let test = flat_image(0.75);
        let gallery = build_gallery(&pe, std::slice::from_ref(&train), 64).unwrap();
        let index = GalleryIndex::new(gallery, Backend::Exact);
        let map = anomaly_map(&pe, &index, &test, PixelAggregation::Mean).unwrap();
        let first = map.pixel_scores[0];
        assert!(first > 0.0);
        assert!(map.pixel_scores.iter().all(|&s| (s - first).abs() < 1e-6));
    }

    #[test]
    fn gallery_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gallery.bin");
        let g = EmbeddingGallery::new(vec![0.5, -1.0, 2.0, 0.25], 2, 32, PATCH_SIZE).unwrap();
        g.save(&path).unwrap();
        let loaded = EmbeddingGallery::load(&path).unwrap();
        assert_eq!(loaded.rows, g.rows);
        assert_eq!(loaded.zdim(), 2);
        assert_eq!(loaded.stride(), 32);
        assert_eq!(loaded.patch_size(), PATCH_SIZE);
    }
}
