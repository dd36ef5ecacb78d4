use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};

/// Binary pixel mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    size: ImageSize,
    bits: Vec<bool>,
}

/// Uncompressed run-length form: alternating runs of 0s and 1s over row-major
/// pixel order, starting with a (possibly empty) run of 0s. `size` is `[h, w]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<u64>,
    pub size: [usize; 2],
}

impl Mask {
    pub fn empty(size: ImageSize) -> Self {
        Self {
            size,
            bits: vec![false; size.pixels()],
        }
    }

    pub fn from_bits(size: ImageSize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != size.pixels() {
            return Err(Error::arg(format!(
                "mask has {} pixels, expected {}",
                bits.len(),
                size.pixels()
            )));
        }
        Ok(Self { size, bits })
    }

    /// Fills the integer pixel rectangle `[x0, x1) × [y0, y1)`, clipped to the mask.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize) {
        let (x1, y1) = (x1.min(self.size.width), y1.min(self.size.height));
        for y in y0..y1 {
            let row = y * self.size.width;
            self.bits[row + x0.min(x1)..row + x1].fill(true);
        }
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.size.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.size.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight pixel bounding box of the set pixels, `None` when empty.
    pub fn bounding_box(&self) -> Option<BBox> {
        let w = self.size.width;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        (x0 != usize::MAX).then(|| BBox::from_xyxy(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    pub fn flipped_horizontally(&self) -> Self {
        let w = self.size.width;
        let mut bits = Vec::with_capacity(self.bits.len());
        for row in self.bits.chunks(w) {
            bits.extend(row.iter().rev());
        }
        Self { size: self.size, bits }
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Rle {
            counts,
            size: [self.size.height, self.size.width],
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let size = ImageSize::new(rle.size[1], rle.size[0]);
        let total: u64 = rle.counts.iter().sum();
        if total != size.pixels() as u64 {
            return Err(Error::arg(format!(
                "run lengths cover {total} pixels, mask is {}x{}",
                size.height, size.width
            )));
        }
        let mut bits = Vec::with_capacity(size.pixels());
        for (i, &c) in rle.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(Self { size, bits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_starts_with_zero_run() {
        let mut m = Mask::empty(ImageSize::new(3, 2));
        m.set(0, 0, true);
        m.set(1, 0, true);
        m.set(2, 1, true);
        assert_eq!(m.to_rle().counts, vec![0, 2, 3, 1]);
        assert_eq!(m.to_rle().size, [2, 3]);
        assert_eq!(m.bounding_box(), Some(BBox::new(0.0, 0.0, 3.0, 2.0)));
    }

    #[test]
    fn rle_length_checked() {
        let bad = Rle {
            counts: vec![1, 2],
            size: [2, 2],
        };
        assert!(Mask::from_rle(&bad).is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(bits in proptest::collection::vec(any::<bool>(), 12)) {
            let m = Mask::from_bits(ImageSize::new(4, 3), bits).unwrap();
            prop_assert_eq!(Mask::from_rle(&m.to_rle()).unwrap(), m.clone());
            prop_assert_eq!(m.flipped_horizontally().flipped_horizontally(), m.clone());
            prop_assert_eq!(m.flipped_horizontally().area(), m.area());
        }
    }
}
