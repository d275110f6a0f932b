use std::path::Path;

use crate::binio::{checksum64, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

use super::config::AttackMode;
use super::mask::Mask;

const MAGIC: [u8; 4] = *b"CFA1";
const VERSION: u16 = 1;

/// A universal perturbation together with its support and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackArtifact {
    /// `[C, H, W]`, zero outside `mask`.
    pub delta: Tensor,
    pub mask: Mask,
    pub target_term: String,
    pub target_tokens: Vec<usize>,
    pub config_hash: u64,
    pub seed: u64,
    pub best_validation_asr: f64,
    pub iterations_run: usize,
}

impl AttackArtifact {
    pub fn mode(&self) -> AttackMode {
        match self.mask {
            Mask::Patches { .. } => AttackMode::Patch,
            Mask::Pixels { .. } => AttackMode::Sparse,
        }
    }

    pub fn channels(&self) -> usize {
        self.delta.shape()[0]
    }

    /// Pixel-space mask `[C, H, W]`.
    pub fn mask_tensor(&self) -> Tensor {
        self.mask.expand(self.channels())
    }

    /// `clip(x + delta * M, 0, 1)` for any image of the artifact's shape.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        super::loss::apply_perturbation(image, &self.delta, &self.mask_tensor())
    }

    /// Largest `|delta|` outside the mask; zero for a well-formed artifact.
    pub fn off_support_magnitude(&self) -> f64 {
        let m = self.mask_tensor();
        self.delta
            .data()
            .iter()
            .zip(m.data())
            .map(|(d, m)| if *m == 0.0 { d.abs() } else { 0.0 })
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u16(VERSION);
        let (patch_size, mode) = match &self.mask {
            Mask::Patches { patch_size, .. } => (*patch_size, 0u8),
            Mask::Pixels { .. } => (0, 1u8),
        };
        w.u8(mode);
        for &d in self.delta.shape() {
            w.usize(d);
        }
        w.usize(patch_size);
        let bits = self.mask.selected();
        w.usize(bits.len());
        let mut packed = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.bytes(&packed);
        w.f64s(self.delta.data());
        w.str(&self.target_term);
        w.usize(self.target_tokens.len());
        for &t in &self.target_tokens {
            w.usize(t);
        }
        w.u64(self.config_hash);
        w.u64(self.seed);
        w.f64(self.best_validation_asr);
        w.usize(self.iterations_run);
        let sum = checksum64(&w.buf);
        w.u64(sum);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body_len = bytes
            .len()
            .checked_sub(8)
            .ok_or_else(|| Error::Truncated("attack artifact".into()))?;
        let body = &bytes[..body_len];
        let mut r = Reader::new(body, "attack artifact");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let mode = r.u8()?;
        let (c, h, w) = (r.usize()?, r.usize()?, r.usize()?);
        let patch_size = r.usize()?;
        let n_bits = r.usize()?;
        let packed = r.take(n_bits.div_ceil(8))?;
        let selected: Vec<bool> = (0..n_bits).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        let numel = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Malformed("image shape overflows".into()))?;
        let delta = Tensor::new(&[c, h, w], r.f64s(numel)?)
            .map_err(|_| Error::Malformed(format!("bad delta shape [{c}, {h}, {w}]")))?;
        let target_term = r.str()?;
        let n_tokens = r.usize()?;
        let target_tokens = (0..n_tokens).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let config_hash = r.u64()?;
        let seed = r.u64()?;
        let best_validation_asr = r.f64()?;
        let iterations_run = r.usize()?;
        r.finish()?;
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
        let computed = checksum64(body);
        if stored != computed {
            return Err(Error::ConfigMismatch { stored, computed });
        }
        let mask = match mode {
            0 => {
                if patch_size == 0 || h != w || h % patch_size != 0 || n_bits != (h / patch_size).pow(2) {
                    return Err(Error::Malformed(
                        "patch mask geometry disagrees with image shape".into(),
                    ));
                }
                Mask::Patches {
                    image_size: h,
                    patch_size,
                    selected,
                }
            }
            1 => {
                if n_bits != h * w {
                    return Err(Error::Malformed("pixel mask size disagrees with image shape".into()));
                }
                Mask::Pixels {
                    height: h,
                    width: w,
                    selected,
                }
            }
            m => return Err(Error::Malformed(format!("unknown attack mode byte {m}"))),
        };
        let artifact = AttackArtifact {
            delta,
            mask,
            target_term,
            target_tokens,
            config_hash,
            seed,
            best_validation_asr,
            iterations_run,
        };
        if artifact.off_support_magnitude() != 0.0 {
            return Err(Error::Malformed("delta is non-zero outside its mask".into()));
        }
        Ok(artifact)
    }
}

pub fn save_artifact(artifact: &AttackArtifact, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, artifact.to_bytes())?;
    Ok(())
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<AttackArtifact> {
    AttackArtifact::from_bytes(&std::fs::read(path)?)
}
