//! Patch encoder: maps a 64x64 image patch to a 64-dim embedding in [-1,1].
//!
//! Each patch is cut into 2x2 sub-patches of 32x32. A small conv stack encodes
//! every sub-patch to a 4x4 feature map; the four maps are placed back into
//! their original quadrants to form an 8x8 grid, which a second conv stack
//! reduces to 1x1. A final 1x1 conv plus tanh yields the embedding.

use crate::error::{Error, Result};
use crate::nn::{fan_in_std, gaussian_tensor, LEAKY_SLOPE};
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use rand::Rng;

pub const PATCH_SIZE: usize = 64;
pub const EMBED_DIM: usize = 64;

/// (cin, cout, kernel, stride, pad) per conv layer. Layers 1-5 run on 32x32
/// sub-patches (strides 2,2,1,2,1 -> 4x4), layers 6-8 on the assembled 8x8
/// grid (stride 2 each -> 1x1), layer 9 is the 1x1 output projection.
const LAYER_SPECS: [(usize, usize, usize, usize, usize); 9] = [
    (3, 32, 3, 2, 1),
    (32, 64, 3, 2, 1),
    (64, 128, 3, 1, 1),
    (128, 128, 3, 2, 1),
    (128, 64, 3, 1, 1),
    (64, 64, 3, 2, 1),
    (64, 32, 3, 2, 1),
    (32, 32, 3, 2, 1),
    (32, EMBED_DIM, 1, 1, 0),
];

/// Index of the first layer that runs after sub-patch assembly.
const ASSEMBLE_AT: usize = 5;

pub struct ConvLayer<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

pub struct PeNetwork<S: Scalar> {
    pub convs: Vec<ConvLayer<S>>,
}

impl<S: Scalar> PeNetwork<S> {
    pub fn init(rng: &mut impl Rng) -> Self {
        let convs = LAYER_SPECS
            .iter()
            .map(|&(cin, cout, k, stride, pad)| ConvLayer {
                w: gaussian_tensor(rng, &[cout, cin, k, k], fan_in_std(cin * k * k)),
                b: Tensor::zeros(&[cout]),
                stride,
                pad,
            })
            .collect();
        PeNetwork { convs }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.w.numel() + c.b.numel()).sum()
    }

    pub fn insert(&self, g: &mut Graph<S>, trainable: bool) -> PeIds {
        let layers = self
            .convs
            .iter()
            .map(|c| {
                let (w, b) = (c.w.clone(), c.b.clone());
                let (w, b) = if trainable {
                    (g.input(w), g.input(b))
                } else {
                    (g.constant(w), g.constant(b))
                };
                ConvIds { w, b, stride: c.stride, pad: c.pad }
            })
            .collect();
        PeIds { layers }
    }

    /// Pair externally inserted parameter ids (w then b per layer, in layer
    /// order) with this network's geometry.
    pub fn ids_from(&self, ids: &[TensorId]) -> PeIds {
        assert_eq!(ids.len(), self.convs.len() * 2);
        PeIds {
            layers: ids
                .chunks(2)
                .zip(&self.convs)
                .map(|(pair, c)| ConvIds { w: pair[0], b: pair[1], stride: c.stride, pad: c.pad })
                .collect(),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.conv{}.w", i + 1), &c.w));
            out.push((format!("{prefix}.conv{}.b", i + 1), &c.b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("{prefix}.conv{}.w", i + 1), &mut c.w));
            out.push((format!("{prefix}.conv{}.b", i + 1), &mut c.b));
        }
        out
    }
}

#[derive(Clone, Copy)]
struct ConvIds {
    w: TensorId,
    b: TensorId,
    stride: usize,
    pad: usize,
}

pub struct PeIds {
    layers: Vec<ConvIds>,
}

impl PeIds {
    /// Parameter ids in the same order as [`PeNetwork::named_tensors`].
    pub fn tensor_ids(&self) -> Vec<TensorId> {
        self.layers.iter().flat_map(|c| [c.w, c.b]).collect()
    }

    /// `[N,3,64,64] -> [N,64]`, every coordinate in [-1,1].
    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, patches: TensorId) -> Result<TensorId> {
        let sh = g.shape(patches);
        if sh.len() != 4 || sh[1] != 3 || sh[2] != PATCH_SIZE || sh[3] != PATCH_SIZE {
            return Err(Error::InvalidArgument(format!(
                "embed expects [N,3,{PATCH_SIZE},{PATCH_SIZE}], got {sh:?}"
            )));
        }
        let n = sh[0];
        let mut x = g.split2x2(patches)?;
        for (i, c) in self.layers.iter().enumerate() {
            if i == ASSEMBLE_AT {
                x = g.assemble2x2(x)?;
            }
            x = g.conv2d(x, c.w, c.b, c.stride, c.pad)?;
            if i + 1 < self.layers.len() {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        let x = g.tanh(x);
        g.reshape(x, &[n, EMBED_DIM])
    }
}
