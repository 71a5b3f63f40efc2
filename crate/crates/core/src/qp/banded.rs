//! Banded LU factorization with partial pivoting.

/// Square band matrix with `kl` sub- and `ku` super-diagonals. Each row keeps
/// room for `kl` extra super-diagonals created by row interchanges.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(c + self.kl >= r && c <= r + self.kl + self.ku);
        r * self.width + (c + self.kl - r)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        if c + self.kl < r || c > r + self.kl + self.ku {
            0.0
        } else {
            self.data[self.idx(r, c)]
        }
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let i = self.idx(r, c);
        self.data[i] += v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// In-place factorization. Fails when a pivot is below `tiny`.
    pub fn factor(mut self, tiny: f64) -> Option<BandLu> {
        let n = self.n;
        let mut piv = vec![0usize; n];
        let reach = self.kl + self.ku;
        for j in 0..n {
            let last = (j + self.kl).min(n - 1);
            let mut p = j;
            let mut best = self.get(j, j).abs();
            for r in j + 1..=last {
                let v = self.get(r, j).abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > tiny) {
                return None;
            }
            piv[j] = p;
            let cend = (j + reach).min(n - 1);
            if p != j {
                for c in j..=cend {
                    let a = self.idx(j, c);
                    let b = self.idx(p, c);
                    self.data.swap(a, b);
                }
            }
            let d = self.data[self.idx(j, j)];
            for r in j + 1..=last {
                let ir = self.idx(r, j);
                let l = self.data[ir] / d;
                self.data[ir] = l;
                if l == 0.0 {
                    continue;
                }
                let base_j = self.idx(j, j);
                let base_r = self.idx(r, j);
                for off in 1..=(cend - j) {
                    let v = self.data[base_j + off];
                    if v != 0.0 {
                        self.data[base_r + off] -= l * v;
                    }
                }
            }
        }
        Some(BandLu { m: self, piv })
    }
}

/// Factors produced by [`BandMatrix::factor`].
#[derive(Clone, Debug)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve(&self, b: &mut [f64]) {
        let m = &self.m;
        let n = m.n;
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj == 0.0 {
                continue;
            }
            for r in j + 1..=(j + m.kl).min(n - 1) {
                b[r] -= m.data[m.idx(r, j)] * bj;
            }
        }
        let reach = m.kl + m.ku;
        for j in (0..n).rev() {
            let mut acc = b[j];
            let base = m.idx(j, j);
            for off in 1..=((n - 1 - j).min(reach)) {
                acc -= m.data[base + off] * b[j + off];
            }
            b[j] = acc / m.data[base];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_dense_solve_with_pivoting() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, kl, ku) in &[(1, 0, 0), (6, 1, 2), (12, 3, 3), (20, 5, 2), (9, 8, 8)] {
            let mut band = BandMatrix::zeros(n, kl, ku);
            let mut dense = DMatrix::zeros(n, n);
            for r in 0..n {
                for c in r.saturating_sub(kl)..=(r + ku).min(n - 1) {
                    // weak diagonal forces row interchanges
                    let v: f64 = rng.random_range(-1.0..1.0) * if r == c { 0.01 } else { 1.0 };
                    band.add(r, c, v);
                    dense[(r, c)] = v;
                }
            }
            let rhs = DVector::from_fn(n, |i, _| (i as f64 * 0.7).cos());
            let lu = band.factor(1e-300).unwrap();
            let mut x = rhs.as_slice().to_vec();
            lu.solve(&mut x);
            let x = DVector::from_vec(x);
            let resid = &dense * &x - &rhs;
            assert!(resid.amax() < 1e-10, "n={n} resid {}", resid.amax());
        }
    }

    #[test]
    fn singular_is_reported() {
        let mut band = BandMatrix::zeros(3, 1, 1);
        band.add(0, 0, 1.0);
        band.add(0, 1, 1.0);
        band.add(1, 0, 1.0);
        band.add(1, 1, 1.0);
        band.add(2, 2, 1.0);
        assert!(band.factor(1e-12).is_none());
    }
}
