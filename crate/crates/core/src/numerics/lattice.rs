//! Uniform tensor-product lattices with multilinear interpolation.

use serde::{Deserialize, Serialize};

/// Uniform nodes along one axis, `count ≥ 2` nodes spanning `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Self {
        assert!(count >= 2 && hi > lo, "axis needs two nodes and positive width");
        Self { lo, hi, count }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    /// Cell index and local coordinate in `[0, 1]`, or `None` outside the axis.
    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let slack = 1e-12 * (self.hi - self.lo);
        if x < self.lo - slack || x > self.hi + slack {
            return None;
        }
        let s = ((x - self.lo) / self.step()).clamp(0.0, (self.count - 1) as f64);
        let i = (s.floor() as usize).min(self.count - 2);
        Some((i, s - i as f64))
    }

    /// Composite trapezoid weight of node `i`.
    pub fn trapezoid_weight(&self, i: usize) -> f64 {
        let h = self.step();
        if i == 0 || i + 1 == self.count {
            0.5 * h
        } else {
            h
        }
    }
}

/// Row-major tensor lattice; the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub axes: Vec<Axis>,
}

impl Lattice {
    pub fn new(axes: Vec<Axis>) -> Self {
        assert!(!axes.is_empty());
        Self { axes }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            idx[d] = flat % axis.count;
            flat /= axis.count;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (&i, axis)| acc * axis.count + i)
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.node(i))
            .collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Product trapezoid weight of a node.
    pub fn trapezoid_weight(&self, flat: usize) -> f64 {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.trapezoid_weight(i))
            .product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::step).product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.axes).all(|(&x, a)| a.locate(x).is_some())
    }

    /// Interpolation stencil (node, weight) for `p`; empty outside the box.
    pub fn stencil(&self, p: &[f64]) -> Vec<(usize, f64)> {
        debug_assert_eq!(p.len(), self.dim());
        let mut cells = Vec::with_capacity(self.dim());
        for (&x, axis) in p.iter().zip(&self.axes) {
            match axis.locate(x) {
                Some(c) => cells.push(c),
                None => return Vec::new(),
            }
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(1 << d);
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for k in 0..d {
                let (i, f) = cells[k];
                if corner >> k & 1 == 1 {
                    idx[k] = i + 1;
                    w *= f;
                } else {
                    idx[k] = i;
                    w *= 1.0 - f;
                }
            }
            if w != 0.0 {
                out.push((self.flat_index(&idx), w));
            }
        }
        out
    }

    pub fn interpolate(&self, values: &[f64], p: &[f64]) -> f64 {
        self.stencil(p).iter().map(|&(i, w)| w * values[i]).sum()
    }

    /// Product-trapezoid integral of nodal values (exact for the multilinear
    /// interpolant).
    pub fn integrate(&self, values: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| values[i] * self.trapezoid_weight(i))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_reproduces_multilinear_functions() {
        let lat = Lattice::new(vec![Axis::new(0.0, 1.0, 5), Axis::new(-1.0, 2.0, 4)]);
        let f = |p: &[f64]| 2.0 + p[0] - 3.0 * p[1] + 0.5 * p[0] * p[1];
        let values: Vec<f64> = lat.points().map(|p| f(&p)).collect();
        for p in [[0.13, 0.4], [0.99, -0.7], [0.5, 1.999], [1.0, 2.0]] {
            assert!((lat.interpolate(&values, &p) - f(&p)).abs() < 1e-12);
        }
        assert_eq!(lat.interpolate(&values, &[1.2, 0.0]), 0.0);
    }

    #[test]
    fn trapezoid_integral_is_exact_for_bilinear() {
        let lat = Lattice::new(vec![Axis::new(0.0, 2.0, 3), Axis::new(0.0, 1.0, 7)]);
        let values: Vec<f64> = lat.points().map(|p| p[0] * p[1] + 1.0).collect();
        assert!((lat.integrate(&values) - (2.0 * 0.5 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn flat_and_multi_index_agree() {
        let lat = Lattice::new(vec![Axis::new(0.0, 1.0, 3), Axis::new(0.0, 1.0, 4), Axis::new(0.0, 1.0, 2)]);
        for i in 0..lat.len() {
            assert_eq!(lat.flat_index(&lat.multi_index(i)), i);
        }
    }
}
