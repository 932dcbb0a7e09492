//! Truncated orthonormal DCT-II bases for joint trajectories.
//!
//! A trajectory matrix `X` has one row per joint channel and one column per
//! frame. Projecting onto the first `M` cosine atoms gives `C = X·T`, and the
//! smoothed reconstruction is `C·Tᵀ`.

use std::f64::consts::PI;

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DctError {
    #[error("invalid basis size: need 1 <= coefficients ({coeffs}) <= frames ({frames})")]
    InvalidSize { frames: usize, coeffs: usize },
    #[error("trajectory has {got} frames, basis expects {expected}")]
    FrameMismatch { expected: usize, got: usize },
    #[error("coefficients have {got} columns, basis expects {expected}")]
    CoeffMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    frames: usize,
    coeffs: usize,
    matrix: Array2<f64>,
}

impl DctBasis {
    /// Builds the `frames x coeffs` basis, columns in ascending frequency.
    pub fn new(frames: usize, coeffs: usize) -> Result<Self, DctError> {
        if coeffs < 1 || coeffs > frames {
            return Err(DctError::InvalidSize { frames, coeffs });
        }
        let h = frames as f64;
        let norm = (2.0 / h).sqrt();
        let matrix = Array2::from_shape_fn((frames, coeffs), |(t, m)| {
            let k = if m == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            norm * k * (PI * (2 * t + 1) as f64 * m as f64 / (2.0 * h)).cos()
        });
        Ok(Self {
            frames,
            coeffs,
            matrix,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coeffs(&self) -> usize {
        self.coeffs
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// `C = X·T`, accumulated frame by frame so that every coefficient is
    /// independent of how many others were requested.
    pub fn forward(&self, traj: &Array2<f64>) -> Result<DctCoeffs, DctError> {
        if traj.ncols() != self.frames {
            return Err(DctError::FrameMismatch {
                expected: self.frames,
                got: traj.ncols(),
            });
        }
        let c = Array2::from_shape_fn((traj.nrows(), self.coeffs), |(p, m)| {
            traj.row(p)
                .iter()
                .zip(self.matrix.column(m))
                .fold(0.0, |acc, (x, t)| acc + x * t)
        });
        Ok(DctCoeffs(c))
    }

    /// `Y = C·Tᵀ`.
    pub fn inverse(&self, coeffs: &DctCoeffs) -> Result<Array2<f64>, DctError> {
        if coeffs.0.ncols() != self.coeffs {
            return Err(DctError::CoeffMismatch {
                expected: self.coeffs,
                got: coeffs.0.ncols(),
            });
        }
        Ok(coeffs.0.dot(&self.matrix.t()))
    }
}

/// One row of DCT coefficients per joint channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DctCoeffs(pub Array2<f64>);

impl DctCoeffs {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.0
    }
}

pub fn make_basis(frames: usize, coeffs: usize) -> Result<DctBasis, DctError> {
    DctBasis::new(frames, coeffs)
}

pub fn dct_forward(traj: &Array2<f64>, basis: &DctBasis) -> Result<DctCoeffs, DctError> {
    basis.forward(traj)
}

pub fn dct_inverse(coeffs: &DctCoeffs, basis: &DctBasis) -> Result<Array2<f64>, DctError> {
    basis.inverse(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    const S2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn two_point_basis() {
        let b = make_basis(2, 2).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = array![[r, r], [r, -r]];
        for (a, e) in b.matrix().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn four_point_basis_is_orthonormal() {
        let b = make_basis(4, 4).unwrap();
        let gram = b.matrix().t().dot(b.matrix());
        for ((i, j), v) in gram.indexed_iter() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn default_scale_basis_shape() {
        assert_eq!(make_basis(64, 10).unwrap().matrix().dim(), (64, 10));
    }

    #[test]
    fn invalid_sizes() {
        assert_eq!(
            make_basis(4, 5),
            Err(DctError::InvalidSize { frames: 4, coeffs: 5 })
        );
        assert!(make_basis(4, 0).is_err());
    }

    #[test]
    fn constant_signal_has_only_dc() {
        let b = make_basis(2, 2).unwrap();
        let c = dct_forward(&array![[1.0, 1.0]], &b).unwrap();
        assert_abs_diff_eq!(c.0[[0, 0]], S2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.0[[0, 1]], 0.0, epsilon = 1e-12);
        let z = dct_forward(&Array2::zeros((3, 2)), &b).unwrap();
        assert!(z.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alternating_signal() {
        let b = make_basis(2, 2).unwrap();
        let c = dct_forward(&array![[1.0, -1.0]], &b).unwrap();
        assert_abs_diff_eq!(c.0[[0, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.0[[0, 1]], S2, epsilon = 1e-12);
    }

    #[test]
    fn frame_mismatch() {
        let b = make_basis(3, 2).unwrap();
        assert_eq!(
            dct_forward(&Array2::zeros((1, 4)), &b),
            Err(DctError::FrameMismatch { expected: 3, got: 4 })
        );
        assert_eq!(
            dct_inverse(&DctCoeffs(Array2::zeros((1, 3))), &b),
            Err(DctError::CoeffMismatch { expected: 2, got: 3 })
        );
    }

    #[test]
    fn inverse_of_dc() {
        let b = make_basis(2, 2).unwrap();
        let y = dct_inverse(&DctCoeffs(array![[S2, 0.0]]), &b).unwrap();
        assert_abs_diff_eq!(y[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[[0, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dc_only_truncation_of_zero_mean() {
        let b = make_basis(2, 1).unwrap();
        let c = dct_forward(&array![[1.0, -1.0]], &b).unwrap();
        let y = dct_inverse(&c, &b).unwrap();
        assert_abs_diff_eq!(y[[0, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn full_round_trip_h8() {
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let b = make_basis(8, 8).unwrap();
        let y = dct_inverse(&dct_forward(&x, &b).unwrap(), &b).unwrap();
        let err = (&y - &x).iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "{err}");
    }

    fn traj() -> impl Strategy<Value = Array2<f64>> {
        (1usize..4, 2usize..20).prop_flat_map(|(p, h)| {
            proptest::collection::vec(-5.0f64..5.0, p * h)
                .prop_map(move |v| Array2::from_shape_vec((p, h), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_when_untruncated(x in traj()) {
            let b = make_basis(x.ncols(), x.ncols()).unwrap();
            let y = dct_inverse(&dct_forward(&x, &b).unwrap(), &b).unwrap();
            for (a, e) in y.iter().zip(x.iter()) {
                prop_assert!((a - e).abs() < 1e-9);
            }
        }

        #[test]
        fn prefix_consistency(x in traj(), frac in 0.0f64..1.0) {
            let h = x.ncols();
            let m = 1 + ((h - 1) as f64 * frac) as usize;
            let full = dct_forward(&x, &make_basis(h, h).unwrap()).unwrap();
            let part = dct_forward(&x, &make_basis(h, m).unwrap()).unwrap();
            for r in 0..x.nrows() {
                for c in 0..m {
                    prop_assert_eq!(part.0[[r, c]].to_bits(), full.0[[r, c]].to_bits());
                }
            }
        }

        #[test]
        fn energy_never_grows(x in traj(), frac in 0.0f64..1.0) {
            let h = x.ncols();
            let m = 1 + ((h - 1) as f64 * frac) as usize;
            let c = dct_forward(&x, &make_basis(h, m).unwrap()).unwrap();
            let ec: f64 = c.0.iter().map(|v| v * v).sum();
            let ex: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!(ec <= ex * (1.0 + 1e-12) + 1e-12);
            if m == h {
                prop_assert!((ec - ex).abs() <= 1e-9 * ex.max(1.0));
            }
        }
    }
}
