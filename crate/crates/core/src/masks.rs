//! Proposal masks and the bilinear resampling shared by every consumer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::numcore::Tensor;

/// `N` spatial maps with values in `[0, 1]`, stored as `[N×H×W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Tensor,
}

impl MaskSet {
    pub fn new(masks: Tensor) -> Result<Self> {
        if masks.rank() != 3 {
            return Err(contract("mask set must be [N×H×W]"));
        }
        if masks.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("mask values must lie in [0, 1]"));
        }
        Ok(Self { masks })
    }

    pub fn count(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.masks.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.masks
    }

    pub fn mask(&self, n: usize) -> &[f64] {
        let hw = self.height() * self.width();
        &self.masks.data()[n * hw..(n + 1) * hw]
    }

    /// `[N × H·W]` view, one flattened mask per row.
    pub fn flat(&self) -> Tensor {
        let hw = self.height() * self.width();
        self.masks
            .clone()
            .reshape([self.count(), hw])
            .expect("flat reshape")
    }

    /// Bilinear resampling to `h×w`.
    pub fn resample(&self, h: usize, w: usize) -> MaskSet {
        if (h, w) == (self.height(), self.width()) {
            return self.clone();
        }
        let masks = resample_bilinear(&self.masks, h, w);
        MaskSet { masks }
    }

    /// Box-filter downsampling by an integer factor (area average).
    pub fn downsample_area(&self, factor: usize) -> Result<MaskSet> {
        let (n, h, w) = (self.count(), self.height(), self.width());
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(contract("downsample factor must divide the mask size"));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; n * oh * ow];
        for k in 0..n {
            let src = self.mask(k);
            for y in 0..h {
                for x in 0..w {
                    out[k * oh * ow + (y / factor) * ow + x / factor] += src[y * w + x] * inv;
                }
            }
        }
        Ok(MaskSet {
            masks: Tensor::new([n, oh, ow], out)?.map(|v| v.clamp(0.0, 1.0)),
        })
    }

    /// Hard masks at threshold 0.5 (values ≥ 0.5 become 1).
    pub fn binarize(&self) -> MaskSet {
        MaskSet {
            masks: self.masks.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Result<MaskSet> {
        if idx.is_empty() {
            return Err(contract("empty mask selection"));
        }
        let hw = self.height() * self.width();
        let mut data = Vec::with_capacity(idx.len() * hw);
        for &i in idx {
            data.extend_from_slice(self.mask(i));
        }
        MaskSet::new(Tensor::new([idx.len(), self.height(), self.width()], data)?)
    }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let x0 = (x as usize).min(src - 1);
            let x1 = (x0 + 1).min(src - 1);
            let t = (x - x0 as f64).clamp(0.0, 1.0);
            (x0, x1, t)
        })
        .collect()
}

/// Half-pixel-centred bilinear resampling of `[N×H×W]` maps.
pub fn resample_bilinear(maps: &Tensor, h: usize, w: usize) -> Tensor {
    let &[n, sh, sw] = maps.shape() else {
        panic!("resample expects [N×H×W]")
    };
    let ty = axis_taps(sh, h);
    let tx = axis_taps(sw, w);
    let mut out = vec![0.0; n * h * w];
    for m in 0..n {
        let src = &maps.data()[m * sh * sw..(m + 1) * sh * sw];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
                let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
                out[(m * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new([n, h, w], out).expect("resample output")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let t = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resample_bilinear(&t, 1, 1);
        assert!((r.data()[0] - 0.5).abs() < 1e-15);
        let t = Tensor::new([1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let r = resample_bilinear(&t, 2, 2);
        assert_eq!(r.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn constant_maps_stay_constant_and_values_stay_in_range() {
        let m = MaskSet::new(Tensor::full([2, 3, 5], 0.25)).unwrap();
        let r = m.resample(7, 4);
        assert!(r.tensor().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(MaskSet::new(Tensor::full([1, 2, 2], 1.5)).is_err());
    }

    #[test]
    fn upsampling_binary_keeps_support_inside_dilation() {
        let mut d = vec![0.0; 16];
        d[5] = 1.0;
        let m = MaskSet::new(Tensor::new([1, 4, 4], d).unwrap()).unwrap();
        let up = m.resample(8, 8);
        assert!(up.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(up.mask(0)[0], 0.0);
    }
}
