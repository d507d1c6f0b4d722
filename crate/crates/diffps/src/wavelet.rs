//! Single-level orthonormal 2-d Haar transform, per channel.
//!
//! Band convention: LH carries horizontal frequency (variation along the
//! width axis), HL vertical frequency. For the 2x2 block
//! `[[a, b], [c, d]]` (rows = height):
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! The transform is orthonormal, so energy is preserved exactly and the
//! synthesis formulas are the adjoint of the analysis.

use ndarray::Array3;

use crate::error::{Error, Result};

/// The four half-resolution sub-bands of one DWT level.
#[derive(Debug, Clone)]
pub struct SubBandSet {
    pub ll: Array3<f64>,
    pub lh: Array3<f64>,
    pub hl: Array3<f64>,
    pub hh: Array3<f64>,
}

impl SubBandSet {
    pub fn band_energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn high_band_energy(&self) -> f64 {
        [&self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Orthonormal Haar analysis of a [C,H,W] grid with even H and W.
pub fn dwt2(x: &Array3<f64>) -> Result<SubBandSet> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Contract(format!(
            "dwt2 requires even spatial size, got {h}x{w}"
        )));
    }
    let (hh2, ww2) = (h / 2, w / 2);
    let mut ll = Array3::<f64>::zeros((c, hh2, ww2));
    let mut lh = ll.clone();
    let mut hl = ll.clone();
    let mut hh = ll.clone();
    for ci in 0..c {
        for by in 0..hh2 {
            for bx in 0..ww2 {
                let a = x[[ci, 2 * by, 2 * bx]];
                let b = x[[ci, 2 * by, 2 * bx + 1]];
                let cc = x[[ci, 2 * by + 1, 2 * bx]];
                let d = x[[ci, 2 * by + 1, 2 * bx + 1]];
                ll[[ci, by, bx]] = (a + b + cc + d) / 2.0;
                lh[[ci, by, bx]] = (a - b + cc - d) / 2.0;
                hl[[ci, by, bx]] = (a + b - cc - d) / 2.0;
                hh[[ci, by, bx]] = (a - b - cc + d) / 2.0;
            }
        }
    }
    Ok(SubBandSet { ll, lh, hl, hh })
}

/// Orthonormal Haar synthesis; exact inverse of [`dwt2`].
pub fn idwt2(
    ll: &Array3<f64>,
    lh: &Array3<f64>,
    hl: &Array3<f64>,
    hh: &Array3<f64>,
) -> Result<Array3<f64>> {
    let dim = ll.dim();
    if lh.dim() != dim || hl.dim() != dim || hh.dim() != dim {
        return Err(Error::Contract("idwt2 band shape mismatch".into()));
    }
    let (c, hh2, ww2) = dim;
    let mut out = Array3::<f64>::zeros((c, 2 * hh2, 2 * ww2));
    for ci in 0..c {
        for by in 0..hh2 {
            for bx in 0..ww2 {
                let l = ll[[ci, by, bx]];
                let x1 = lh[[ci, by, bx]];
                let x2 = hl[[ci, by, bx]];
                let x3 = hh[[ci, by, bx]];
                out[[ci, 2 * by, 2 * bx]] = (l + x1 + x2 + x3) / 2.0;
                out[[ci, 2 * by, 2 * bx + 1]] = (l - x1 + x2 - x3) / 2.0;
                out[[ci, 2 * by + 1, 2 * bx]] = (l + x1 - x2 - x3) / 2.0;
                out[[ci, 2 * by + 1, 2 * bx + 1]] = (l - x1 - x2 + x3) / 2.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_grid(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn constant_block_goes_to_ll_only() {
        let c = 3.7;
        let x = Array3::from_elem((1, 2, 2), c);
        let b = dwt2(&x).unwrap();
        assert!((b.ll[[0, 0, 0]] - 2.0 * c).abs() < 1e-12);
        assert_eq!(b.lh[[0, 0, 0]], 0.0);
        assert_eq!(b.hl[[0, 0, 0]], 0.0);
        assert_eq!(b.hh[[0, 0, 0]], 0.0);
    }

    #[test]
    fn horizontal_alternation_lands_in_lh() {
        // Hand-evaluated: a=1, b=-1, c=1, d=-1 gives LH = 2, others 0.
        let mut x = Array3::<f64>::zeros((1, 2, 2));
        x.index_axis_mut(ndarray::Axis(0), 0)
            .assign(&arr2(&[[1.0, -1.0], [1.0, -1.0]]));
        let b = dwt2(&x).unwrap();
        assert!((b.lh[[0, 0, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(b.ll[[0, 0, 0]], 0.0);
        assert_eq!(b.hl[[0, 0, 0]], 0.0);
        assert_eq!(b.hh[[0, 0, 0]], 0.0);
    }

    #[test]
    fn energy_is_preserved() {
        let x = rand_grid(3, 8, 8, 42);
        let b = dwt2(&x).unwrap();
        let ex: f64 = x.iter().map(|v| v * v).sum();
        assert!((ex - b.band_energy()).abs() / ex <= 1e-6);
    }

    #[test]
    fn odd_size_is_rejected() {
        let x = Array3::<f64>::zeros((1, 3, 4));
        assert!(dwt2(&x).is_err());
    }

    #[test]
    fn ll_only_reconstruction_is_block_means() {
        let x = rand_grid(2, 6, 6, 7);
        let b = dwt2(&x).unwrap();
        let z = Array3::<f64>::zeros(b.ll.dim());
        let rec = idwt2(&b.ll, &z, &z, &z).unwrap();
        // Pooling oracle: every output 2x2 block equals the block mean.
        for ci in 0..2 {
            for by in 0..3 {
                for bx in 0..3 {
                    let mean = (x[[ci, 2 * by, 2 * bx]]
                        + x[[ci, 2 * by, 2 * bx + 1]]
                        + x[[ci, 2 * by + 1, 2 * bx]]
                        + x[[ci, 2 * by + 1, 2 * bx + 1]])
                        / 4.0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let got = rec[[ci, 2 * by + dy, 2 * bx + dx]];
                        assert!((got - mean).abs() <= 1e-12, "got {got}, mean {mean}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_and_energy(seed in 0u64..500, hw in 1usize..6, c in 1usize..4) {
            let (h, w) = (2 * hw, 2 * hw);
            let x = rand_grid(c, h, w, seed);
            let b = dwt2(&x).unwrap();
            let rec = idwt2(&b.ll, &b.lh, &b.hl, &b.hh).unwrap();
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let err: f64 = (&rec - &x).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(err / norm <= 1e-5);
            let ex: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((ex - b.band_energy()).abs() <= 1e-6 * ex.max(1e-12));
        }
    }
}
