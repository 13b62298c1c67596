use serde::{Deserialize, Serialize};

use crate::error::{CssError, Result};

/// Shape hyper-parameters of the Conformer mask estimator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Model width; `head_dim * num_heads`.
    pub attn_dim: usize,
    pub ffn_dim: usize,
    /// Depthwise convolution kernel size (odd).
    pub conv_kernel: usize,
    /// Longest chunk, in frames, a single forward call may process.
    pub max_chunk_len: usize,
    /// Speaker masks plus one noise mask.
    pub num_output_masks: usize,
    pub feature_dim: usize,
    pub num_bins: usize,
    /// Number of previous chunks whose keys/values are attended to (0 disables the cache).
    pub cache_chunks: usize,
}

pub const DEFAULT_CONV_KERNEL: usize = 33;
pub const DEFAULT_MAX_CHUNK_LEN: usize = 150;
pub const DEFAULT_NUM_MASKS: usize = 3;
pub const DEFAULT_NUM_BINS: usize = 257;

impl ConformerConfig {
    /// 16 layers, 4 heads, width 256, FFN 1024.
    pub fn base(feature_dim: usize) -> Self {
        Self::sized(16, 4, 256, 1024, feature_dim)
    }

    /// 18 layers, 8 heads, width 512, FFN 1024.
    pub fn large(feature_dim: usize) -> Self {
        Self::sized(18, 8, 512, 1024, feature_dim)
    }

    /// The desk-scale model used for toy training: 2 layers, width 64.
    pub fn tiny(feature_dim: usize) -> Self {
        Self {
            conv_kernel: 15,
            ..Self::sized(2, 4, 64, 256, feature_dim)
        }
    }

    fn sized(layers: usize, heads: usize, width: usize, ffn: usize, feature_dim: usize) -> Self {
        Self {
            num_layers: layers,
            num_heads: heads,
            attn_dim: width,
            ffn_dim: ffn,
            conv_kernel: DEFAULT_CONV_KERNEL,
            max_chunk_len: DEFAULT_MAX_CHUNK_LEN,
            num_output_masks: DEFAULT_NUM_MASKS,
            feature_dim,
            num_bins: DEFAULT_NUM_BINS,
            cache_chunks: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CssError::Config(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.attn_dim == 0 || self.ffn_dim == 0 {
            return fail("layer count, head count and widths must be positive".into());
        }
        if self.attn_dim % self.num_heads != 0 {
            return fail(format!(
                "attention width {} is not divisible by {} heads",
                self.attn_dim, self.num_heads
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        if self.max_chunk_len == 0 {
            return fail("max chunk length must be at least one frame".into());
        }
        if self.num_output_masks == 0 || self.feature_dim == 0 || self.num_bins == 0 {
            return fail("mask count, feature dim and bin count must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim / self.num_heads
    }

    /// Entries per head in the relative-position table: offsets −(M−1)..(M−1).
    pub fn pos_len(&self) -> usize {
        2 * self.max_chunk_len - 1
    }

    /// Frames the attention cache may hold per layer.
    pub fn cache_capacity(&self) -> usize {
        self.cache_chunks * self.max_chunk_len
    }

    pub(crate) fn to_block(&self) -> [u32; 10] {
        [
            self.num_layers,
            self.num_heads,
            self.attn_dim,
            self.ffn_dim,
            self.conv_kernel,
            self.max_chunk_len,
            self.num_output_masks,
            self.feature_dim,
            self.num_bins,
            self.cache_chunks,
        ]
        .map(|v| v as u32)
    }

    pub(crate) fn from_block(b: [u32; 10]) -> Self {
        let b = b.map(|v| v as usize);
        Self {
            num_layers: b[0],
            num_heads: b[1],
            attn_dim: b[2],
            ffn_dim: b[3],
            conv_kernel: b[4],
            max_chunk_len: b[5],
            num_output_masks: b[6],
            feature_dim: b[7],
            num_bins: b[8],
            cache_chunks: b[9],
        }
    }
}
