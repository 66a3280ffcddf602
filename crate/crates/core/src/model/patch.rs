//! Image patch sequences for the encoder.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::RasterImage;

/// Flattened RGB patches with their `(row, col)` grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSeq {
    pub patch_size: usize,
    pub data: Tensor,
    pub positions: Vec<(usize, usize)>,
    /// Patches replaced by the learned mask embedding.
    pub masked: Vec<bool>,
}

impl PatchSeq {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps the patches at `idx` (in the given order).
    pub fn select(&self, idx: &[usize]) -> PatchSeq {
        let mut data = Tensor::zeros(idx.len(), self.data.cols());
        for (o, &i) in idx.iter().enumerate() {
            data.row_mut(o).copy_from_slice(self.data.row(i));
        }
        PatchSeq {
            patch_size: self.patch_size,
            data,
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            masked: idx.iter().map(|&i| self.masked[i]).collect(),
        }
    }
}

/// Row-major `p x p` patches; each row is the patch's pixels in raster order.
pub fn patchify(r: &RasterImage, patch_size: usize) -> Result<PatchSeq> {
    let p = patch_size;
    if p == 0 || r.height() % p != 0 || r.width() % p != 0 {
        return Err(Error::Shape(format!("image {}x{} is not divisible into {p}x{p} patches", r.height(), r.width())));
    }
    let r = if r.channels() == 3 { r.clone() } else { r.to_rgb() };
    let (gh, gw) = (r.height() / p, r.width() / p);
    let mut data = Tensor::zeros(gh * gw, 3 * p * p);
    let mut positions = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = data.row_mut(gy * gw + gx);
            for dy in 0..p {
                for dx in 0..p {
                    let o = (dy * p + dx) * 3;
                    row[o..o + 3].copy_from_slice(r.pixel(gy * p + dy, gx * p + dx));
                }
            }
            positions.push((gy, gx));
        }
    }
    Ok(PatchSeq { patch_size: p, data, positions, masked: vec![false; gh * gw] })
}

/// Inverse of [`patchify`] for a complete grid.
pub fn unpatchify(s: &PatchSeq, height: usize, width: usize) -> Result<RasterImage> {
    let p = s.patch_size;
    let mut data = vec![0.0; height * width * 3];
    let mut seen = vec![false; (height / p) * (width / p)];
    for (i, &(gy, gx)) in s.positions.iter().enumerate() {
        if (gy + 1) * p > height || (gx + 1) * p > width {
            return Err(Error::Shape(format!("patch at ({gy},{gx}) outside {height}x{width}")));
        }
        seen[gy * (width / p) + gx] = true;
        let row = s.data.row(i);
        for dy in 0..p {
            for dx in 0..p {
                let o = ((gy * p + dy) * width + gx * p + dx) * 3;
                data[o..o + 3].copy_from_slice(&row[(dy * p + dx) * 3..(dy * p + dx) * 3 + 3]);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Shape("patch sequence does not cover the image".into()));
    }
    RasterImage::new(height, width, 3, data)
}

/// Uniform sample of `k` patches without replacement, original order kept.
pub fn subsample_patches<R: Rng>(s: &PatchSeq, k: usize, rng: &mut R) -> Result<PatchSeq> {
    if k > s.len() {
        return Err(Error::Shape(format!("cannot keep {k} of {} patches", s.len())));
    }
    let mut idx = sample(rng, s.len(), k).into_vec();
    idx.sort_unstable();
    Ok(s.select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize) -> RasterImage {
        let data = (0..h * w * 3).map(|i| (i % 251) as f64 / 250.0).collect();
        RasterImage::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(patchify(&img(384, 384), 16).unwrap().len(), 576);
        let s = patchify(&img(32, 32), 16).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.positions, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(patchify(&img(30, 32), 16).is_err());
    }

    #[test]
    fn reassembly_is_exact() {
        let r = img(24, 40);
        assert_eq!(unpatchify(&patchify(&r, 8).unwrap(), 24, 40).unwrap(), r);
    }

    #[test]
    fn subsampling() {
        let s = patchify(&img(384, 384), 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sub = subsample_patches(&s, 256, &mut rng).unwrap();
        assert_eq!(sub.len(), 256);
        assert!(sub.positions.windows(2).all(|w| w[0] < w[1]));
        let again = subsample_patches(&s, 256, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(sub, again);
        let all = subsample_patches(&s, 576, &mut rng).unwrap();
        assert_eq!(all, s);
        assert!(subsample_patches(&s, 577, &mut rng).is_err());
        for (i, &(r, c)) in sub.positions.iter().enumerate() {
            assert_eq!(sub.data.row(i), s.data.row(r * 24 + c));
        }
    }
}
