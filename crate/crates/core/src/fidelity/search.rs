//! One-dimensional minimisers: golden-section search and a brute-force grid
//! used as its oracle.

use serde::{Deserialize, Serialize};

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub x: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Golden-section search for the minimum of a unimodal `f` on `[lo, hi]`.
/// Stops when the bracket is narrower than `tol` or after `max_iter`
/// iterations, returning the best point seen either way.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64, max_iter: usize) -> SearchResult {
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    let mut it = 0;
    while b - a > tol && it < max_iter {
        it += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    SearchResult {
        x: best.0,
        value: best.1,
        iterations: it,
        converged: b - a <= tol,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub x: f64,
    pub value: f64,
    /// Spacing between grid points.
    pub cell: f64,
}

/// Evaluates `f` at `n` evenly spaced points including both ends.
pub fn grid_search(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, n: usize) -> GridResult {
    assert!(n >= 2);
    let cell = (hi - lo) / (n - 1) as f64;
    let mut best = GridResult {
        x: lo,
        value: f64::INFINITY,
        cell,
    };
    for i in 0..n {
        let x = lo + cell * i as f64;
        let v = f(x);
        if v < best.value {
            best.x = x;
            best.value = v;
        }
    }
    best
}

/// Golden-section result checked against a grid of `grid_points`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckedFit {
    pub golden: SearchResult,
    pub grid: GridResult,
    pub agrees: bool,
}

pub fn checked_minimize(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, grid_points: usize) -> CheckedFit {
    let grid = grid_search(&mut f, lo, hi, grid_points);
    let golden = golden_section(&mut f, lo, hi, grid.cell * 1e-2, 200);
    CheckedFit {
        agrees: (golden.x - grid.x).abs() <= grid.cell,
        golden,
        grid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quadratic_minimum() {
        let r = golden_section(|x| (x - 0.3).powi(2), 0.0, 1.0, 1e-8, 200);
        assert!(r.converged);
        assert!((r.x - 0.3).abs() < 1e-7);
    }

    #[test]
    fn iteration_cap_reports_best_so_far() {
        let r = golden_section(|x| (x - 0.3).abs(), 0.0, 1.0, 1e-12, 5);
        assert!(!r.converged);
        assert_eq!(r.iterations, 5);
        assert!((r.x - 0.3).abs() < 0.1);
    }

    #[test]
    fn grid_endpoints_and_cell() {
        let g = grid_search(|x| -x, 0.0, 1.0, 200);
        assert_eq!(g.x, 1.0);
        assert!((g.cell - 1.0 / 199.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn golden_matches_grid_on_v_shapes(c in 0.05f64..1.0, k1 in 0.1f64..10.0, k2 in 0.1f64..10.0) {
            let f = |x: f64| if x < c { k1 * (c - x) } else { k2 * (x - c) };
            let fit = checked_minimize(f, 0.05, 1.0, 200);
            prop_assert!(fit.agrees, "{fit:?}");
        }
    }
}
