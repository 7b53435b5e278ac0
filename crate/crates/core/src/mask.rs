//! Row-major binary masks and grid pooling.

use std::fmt;

/// A binary mask stored row-major, `height * width` cells.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Builds a mask from row-major bits. Returns `None` if the length is not `height * width`.
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == height * width).then_some(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    /// Axis-aligned filled rectangle covering rows `r0..r1` and columns `c0..c1`.
    pub fn rect(height: usize, width: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        Self::from_fn(height, width, |r, c| r >= r0 && r < r1 && c >= c0 && c < c1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    /// Number of foreground cells.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major indices of foreground cells.
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    /// Pixelwise OR. Returns `None` on shape mismatch.
    pub fn or(&self, other: &Mask) -> Option<Mask> {
        if self.shape() != other.shape() {
            return None;
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a || b)
            .collect();
        Some(Mask { bits, ..*self })
    }

    /// Pixelwise AND. Returns `None` on shape mismatch.
    pub fn and(&self, other: &Mask) -> Option<Mask> {
        if self.shape() != other.shape() {
            return None;
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && b)
            .collect();
        Some(Mask { bits, ..*self })
    }

    pub fn complement(&self) -> Mask {
        Mask {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..*self
        }
    }

    /// Max-pools onto a `height x width` grid.
    ///
    /// Output cell `i` along an axis of input length `n` and output length `k`
    /// covers `floor(i*n/k) .. ceil((i+1)*n/k)`, so windows tile the input and
    /// overlap by at most one cell when `k` does not divide `n`.
    pub fn max_pool(&self, height: usize, width: usize) -> Mask {
        let rows = pool_windows(self.height, height);
        let cols = pool_windows(self.width, width);
        Mask::from_fn(height, width, |r, c| {
            let (r0, r1) = rows[r];
            let (c0, c1) = cols[c];
            (r0..r1).any(|y| (c0..c1).any(|x| self.bits[y * self.width + x]))
        })
    }
}

fn pool_windows(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end.max(start + 1).min(input.max(1)))
        })
        .collect()
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mask {}x{} [", self.height, self.width)?;
        for r in 0..self.height {
            let row: String = (0..self.width)
                .map(|c| if self.get(r, c) { '#' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_exact_division() {
        let m = Mask::rect(4, 4, 0, 0, 1, 1);
        let p = m.max_pool(2, 2);
        assert_eq!(p.bits(), &[true, false, false, false]);
    }

    #[test]
    fn pool_uneven_windows_overlap() {
        // 5 -> 2: windows [0,3) and [2,5); pixel row 2 lands in both.
        let m = Mask::rect(5, 1, 2, 0, 3, 1);
        let p = m.max_pool(2, 1);
        assert_eq!(p.bits(), &[true, true]);
        assert_eq!(pool_windows(5, 2), vec![(0, 3), (2, 5)]);
    }

    #[test]
    fn pool_identity_when_same_grid() {
        let m = Mask::from_fn(3, 3, |r, c| (r + c) % 2 == 0);
        assert_eq!(m.max_pool(3, 3), m);
    }

    #[test]
    fn pool_preserves_nonemptiness() {
        for r in 0..7 {
            for c in 0..9 {
                let m = Mask::rect(7, 9, r, c, r + 1, c + 1);
                let p = m.max_pool(3, 4);
                assert!((1..=4).contains(&p.area()), "{r},{c}: {p:?}");
            }
        }
    }

    #[test]
    fn or_and_complement() {
        let a = Mask::rect(2, 2, 0, 0, 1, 2);
        let b = a.complement();
        assert_eq!(a.or(&b).unwrap(), Mask::ones(2, 2));
        assert_eq!(a.and(&b).unwrap().area(), 0);
        assert!(a.or(&Mask::zeros(3, 2)).is_none());
    }
}
