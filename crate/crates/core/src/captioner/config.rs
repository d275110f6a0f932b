use crate::error::{Error, Result};

/// Shape of the toy ViT encoder / causal decoder captioner.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub max_caption_len: usize,
    pub vocab_size: usize,
}

/// MLP hidden width as a multiple of `d_model`.
pub const MLP_RATIO: usize = 4;

impl ModelConfig {
    /// Default geometry for a vocabulary of `vocab_size` tokens.
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 6,
            n_decoder_layers: 3,
            max_caption_len: 12,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.channels == 0 {
            problems.push("channels must be positive".into());
        }
        if self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            problems.push("encoder and decoder need at least one layer each".into());
        }
        if self.max_caption_len < 2 {
            problems.push("max_caption_len must allow [BOS] and [EOS]".into());
        }
        if self.vocab_size < 5 {
            problems.push(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image patches, excluding CLS.
    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Encoder sequence length including CLS.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Flat `[C, H, W]` indices of each patch's pixels, patches in row-major
    /// order and each patch flattened as `[c, y, x]`.
    pub fn patch_index(&self) -> Vec<usize> {
        let (s, p, side) = (self.image_size, self.patch_size, self.patches_per_side());
        let mut index = Vec::with_capacity(self.image_numel());
        for py in 0..side {
            for px in 0..side {
                for c in 0..self.channels {
                    for y in 0..p {
                        for x in 0..p {
                            index.push(c * s * s + (py * p + y) * s + px * p + x);
                        }
                    }
                }
            }
        }
        index
    }

    /// Patch (0-based, CLS excluded) covering pixel `(y, x)`.
    pub fn patch_of_pixel(&self, y: usize, x: usize) -> usize {
        (y / self.patch_size) * self.patches_per_side() + x / self.patch_size
    }
}
