use crate::captioner::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Support of a universal perturbation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mask {
    /// One flag per image patch in row-major patch order (CLS excluded).
    Patches {
        image_size: usize,
        patch_size: usize,
        selected: Vec<bool>,
    },
    /// One flag per pixel location `[H, W]`, shared by every channel.
    Pixels {
        height: usize,
        width: usize,
        selected: Vec<bool>,
    },
}

impl Mask {
    pub fn from_patches(config: &ModelConfig, patches: &[usize]) -> Result<Self> {
        let mut selected = vec![false; config.num_patches()];
        for &p in patches {
            let slot = selected
                .get_mut(p)
                .ok_or_else(|| Error::invalid(format!("patch {p} outside 0..{}", config.num_patches())))?;
            *slot = true;
        }
        Ok(Mask::Patches {
            image_size: config.image_size,
            patch_size: config.patch_size,
            selected,
        })
    }

    /// Every pixel selected.
    pub fn full_pixels(height: usize, width: usize) -> Self {
        Mask::Pixels {
            height,
            width,
            selected: vec![true; height * width],
        }
    }

    pub fn selected(&self) -> &[bool] {
        match self {
            Mask::Patches { selected, .. } | Mask::Pixels { selected, .. } => selected,
        }
    }

    pub fn popcount(&self) -> usize {
        self.selected().iter().filter(|&&b| b).count()
    }

    pub fn height(&self) -> usize {
        match self {
            Mask::Patches { image_size, .. } => *image_size,
            Mask::Pixels { height, .. } => *height,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Mask::Patches { image_size, .. } => *image_size,
            Mask::Pixels { width, .. } => *width,
        }
    }

    /// Whether pixel location `(y, x)` is inside the support.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        match self {
            Mask::Patches {
                image_size,
                patch_size,
                selected,
            } => selected[(y / patch_size) * (image_size / patch_size) + x / patch_size],
            Mask::Pixels { width, selected, .. } => selected[y * width + x],
        }
    }

    /// `{0, 1}` expansion to `[channels, H, W]`.
    pub fn expand(&self, channels: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::from_fn(&[channels, h, w], |i| {
            let p = i % (h * w);
            if self.covers(p / w, p % w) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Sorted indices of patches holding at least one selected pixel.
    pub fn covering_patches(&self, patch_size: usize) -> Vec<usize> {
        match self {
            Mask::Patches { selected, .. } => (0..selected.len()).filter(|&p| selected[p]).collect(),
            Mask::Pixels { height, width, .. } => {
                let side = width / patch_size;
                let mut hit = vec![false; (height / patch_size) * side];
                for y in 0..*height {
                    for x in 0..*width {
                        if self.covers(y, x) {
                            hit[(y / patch_size) * side + x / patch_size] = true;
                        }
                    }
                }
                (0..hit.len()).filter(|&p| hit[p]).collect()
            }
        }
    }
}

/// Keeps the `k` pixel locations of `delta` (`[C, H, W]`) with the largest
/// cross-channel L2 norm, ties toward the lower row-major index, and zeroes
/// the rest.
pub fn sparse_project_topk(delta: &Tensor, k: usize) -> Result<(Tensor, Mask)> {
    let shape = delta.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("delta must be [C, H, W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    if k > plane {
        return Err(Error::invalid(format!("sparse k {k} exceeds {plane} pixel locations")));
    }
    let d = delta.data();
    let norms: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|ch| d[ch * plane + p] * d[ch * plane + p]).sum::<f64>())
        .collect();
    let mut order: Vec<usize> = (0..plane).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut selected = vec![false; plane];
    for &p in &order[..k] {
        selected[p] = true;
    }
    let projected = Tensor::from_fn(shape, |i| if selected[i % plane] { d[i] } else { 0.0 });
    let mask = Mask::Pixels {
        height: h,
        width: w,
        selected,
    };
    Ok((projected, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_mask_expands_to_whole_patches() {
        let cfg = ModelConfig::with_vocab(10);
        let m = Mask::from_patches(&cfg, &[0, 9]).unwrap();
        assert_eq!(m.popcount(), 2);
        let e = m.expand(3);
        assert_eq!(e.shape(), &[3, 64, 64]);
        assert_eq!(e.data().iter().sum::<f64>(), 3.0 * 2.0 * 64.0);
        assert_eq!(e.at(&[2, 7, 7]), 1.0);
        assert_eq!(e.at(&[2, 0, 8]), 0.0);
        assert_eq!(e.at(&[2, 8, 8]), 1.0);
        assert_eq!(e.at(&[1, 15, 15]), 1.0);
        assert_eq!(e.at(&[1, 8, 16]), 0.0);
        assert_eq!(m.covering_patches(8), vec![0, 9]);
        assert!(Mask::from_patches(&cfg, &[64]).is_err());
    }

    #[test]
    fn pixel_mask_maps_to_covering_patches() {
        let mut selected = vec![false; 64 * 64];
        selected[0] = true;
        selected[8 * 64 + 63] = true;
        let m = Mask::Pixels {
            height: 64,
            width: 64,
            selected,
        };
        assert_eq!(m.covering_patches(8), vec![0, 15]);
    }

    #[test]
    fn full_k_keeps_delta() {
        let d = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).sin());
        let (p, m) = sparse_project_topk(&d, 16).unwrap();
        assert_eq!(p, d);
        assert_eq!(m.popcount(), 16);
    }

    #[test]
    fn single_nonzero_pixel_is_kept() {
        let d = Tensor::from_fn(&[3, 4, 4], |i| if i == 16 + 5 { -0.3 } else { 0.0 });
        let (p, m) = sparse_project_topk(&d, 1).unwrap();
        assert_eq!(p, d);
        assert_eq!(m.selected().iter().position(|&b| b), Some(5));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let d = Tensor::full(&[2, 2, 2], 0.5);
        let (_, m) = sparse_project_topk(&d, 2).unwrap();
        assert_eq!(m.selected(), &[true, true, false, false]);
        assert!(sparse_project_topk(&d, 5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn projection_keeps_exactly_the_largest(
            data in proptest::collection::vec(-3i8..=3, 2 * 5 * 4),
            k in 0usize..=20,
        ) {
            let delta = Tensor::new(&[2, 5, 4], data.iter().map(|&v| v as f64 / 3.0).collect()).unwrap();
            let (projected, mask) = sparse_project_topk(&delta, k).unwrap();
            proptest::prop_assert_eq!(mask.popcount(), k);
            let plane = 20;
            let norm = |p: usize| (0..2).map(|c| delta.data()[c * plane + p].powi(2)).sum::<f64>();
            let sel = mask.selected();
            for p in 0..plane {
                for c in 0..2 {
                    let i = c * plane + p;
                    let expected = if sel[p] { delta.data()[i] } else { 0.0 };
                    proptest::prop_assert_eq!(projected.data()[i], expected);
                }
                for q in 0..plane {
                    if sel[p] && !sel[q] {
                        proptest::prop_assert!(norm(p) > norm(q) || (norm(p) == norm(q) && p < q));
                    }
                }
            }
        }
    }
}
