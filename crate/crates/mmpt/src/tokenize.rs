//! Image-to-token plumbing: square patches of an RGB frame are flattened
//! row-major and linearly embedded, one token per patch.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Patch-grid geometry for one image size / patch size combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!(
                "patch size {patch} must evenly divide image {height}x{width}"
            )));
        }
        Ok(Self {
            rows: height / patch,
            cols: width / patch,
            patch,
        })
    }

    /// Token count N.
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// Flattened values per token: patch * patch * 3 channels.
    pub fn token_width(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// (grid row, grid col) of token n, row-major.
    pub fn token_pos(&self, n: usize) -> (usize, usize) {
        (n / self.cols, n % self.cols)
    }
}

/// One RGB frame with its absolute index in the source sequence. Pixels are
/// [height, width, 3] with channels interleaved.
#[derive(Clone, Debug)]
pub struct Frame<S: Scalar> {
    pub index: usize,
    pub pixels: Tensor<S>,
}

impl<S: Scalar> Frame<S> {
    pub fn new(index: usize, pixels: Tensor<S>) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[2] != 3 {
            return Err(Error::BadShape {
                op: "frame",
                shape: pixels.shape().to_vec(),
                why: "expected [height, width, 3]".into(),
            });
        }
        Ok(Self { index, pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Flat source index of each patch value, token-major: for token n the
/// patch is read row by row, each pixel contributing its 3 channels.
pub fn patch_gather_indices(grid: &Grid) -> Vec<usize> {
    let p = grid.patch;
    let width = grid.cols * p;
    let mut idx = Vec::with_capacity(grid.tokens() * grid.token_width());
    for n in 0..grid.tokens() {
        let (gr, gc) = grid.token_pos(n);
        for pr in 0..p {
            for pc in 0..p {
                let row = gr * p + pr;
                let col = gc * p + pc;
                for ch in 0..3 {
                    idx.push((row * width + col) * 3 + ch);
                }
            }
        }
    }
    idx
}

/// Inverse permutation: for each flat pixel value, its position in the
/// patchified layout.
pub fn unpatch_gather_indices(grid: &Grid) -> Vec<usize> {
    let fwd = patch_gather_indices(grid);
    let mut inv = vec![0usize; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Rearranges [H, W, 3] pixels into [N, patch*patch*3] rows, one per token.
pub fn patchify<S: Scalar>(grid: &Grid, pixels: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = (grid.rows * grid.patch, grid.cols * grid.patch);
    if pixels.shape() != [h, w, 3] {
        return Err(Error::BadShape {
            op: "patchify",
            shape: pixels.shape().to_vec(),
            why: format!("grid expects [{h}, {w}, 3]"),
        });
    }
    let src = pixels.data();
    let data: Vec<S> = patch_gather_indices(grid).iter().map(|&i| src[i]).collect();
    Tensor::new(vec![grid.tokens(), grid.token_width()], data)
}

/// Exact inverse of `patchify`.
pub fn unpatchify<S: Scalar>(grid: &Grid, tokens: &Tensor<S>) -> Result<Tensor<S>> {
    if tokens.shape() != [grid.tokens(), grid.token_width()] {
        return Err(Error::BadShape {
            op: "unpatchify",
            shape: tokens.shape().to_vec(),
            why: format!("grid expects [{}, {}]", grid.tokens(), grid.token_width()),
        });
    }
    let src = tokens.data();
    let data: Vec<S> = unpatch_gather_indices(grid).iter().map(|&i| src[i]).collect();
    Tensor::new(vec![grid.rows * grid.patch, grid.cols * grid.patch, 3], data)
}

/// Linear patch embedding: weight [patch*patch*3, dim] and bias [dim].
#[derive(Clone, Debug)]
pub struct PatchEmbed<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> PatchEmbed<S> {
    /// Token matrix [N, dim] for one frame, without a graph.
    pub fn tokenize(&self, grid: &Grid, pixels: &Tensor<S>) -> Result<Tensor<S>> {
        let patches = patchify(grid, pixels)?;
        let proj = crate::kernels::matmul(&patches, &self.weight)?;
        crate::kernels::add_row_bias(&proj, &self.bias)
    }
}

/// Registered embed weights on a graph.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedNode {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Graph version of `PatchEmbed::tokenize`; gradients flow to the weights.
pub fn tokenize_graph<S: Scalar>(
    g: &mut Graph<S>,
    embed: PatchEmbedNode,
    grid: &Grid,
    pixels: &Tensor<S>,
) -> Result<NodeId> {
    let flat = g.constant(pixels.clone().reshaped(&[pixels.len(), 1])?)?;
    let idx = Rc::new(patch_gather_indices(grid));
    let patches = g.gather_elems(flat, idx, vec![grid.tokens(), grid.token_width()])?;
    let proj = g.matmul(patches, embed.weight)?;
    g.add_row_bias(proj, embed.bias)
}
