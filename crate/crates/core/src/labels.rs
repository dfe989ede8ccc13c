//! Integer label grids and boolean region masks.

use crate::error::{Error, Result};

/// Label value meaning "not part of any region".
pub const UNLABELED: u8 = 255;

/// Row-major `H × W` grid of region labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(
                "label map",
                format!(
                    "{height}x{width} needs {} labels, got {}",
                    height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn uniform(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixels carrying `label`. [`UNLABELED`] never matches.
    pub fn mask(&self, label: u8) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&l| l == label && l != UNLABELED)
                .collect(),
        }
    }

    pub fn contains(&self, label: u8) -> bool {
        label != UNLABELED && self.data.contains(&label)
    }

    /// Distinct labels present, ascending, excluding [`UNLABELED`].
    pub fn labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..255u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// Row-major boolean region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(
                "mask",
                format!(
                    "{height}x{width} needs {} cells, got {}",
                    height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Flat indices `y * W + x` of set pixels, in raster order.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlabeled_never_masks() {
        let l = LabelMap::uniform(2, 2, UNLABELED);
        assert_eq!(l.mask(UNLABELED).count(), 0);
        assert!(!l.contains(UNLABELED));
        assert!(l.labels().is_empty());
    }

    #[test]
    fn indices_follow_raster_order() {
        let m = Mask::from_fn(2, 3, |y, x| (y + x) % 2 == 0);
        assert_eq!(m.indices(), vec![0, 2, 4]);
    }
}
