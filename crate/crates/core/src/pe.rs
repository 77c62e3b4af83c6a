//! Fixed sinusoidal positional encodings.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// Sinusoidal values for one axis: position `pos`, `width` encoding dims.
/// Even dims carry sin, odd dims cos, on the standard geometric frequency
/// ladder with base 10000.
fn axis_encoding(pos: usize, width: usize, out: &mut Vec<f64>) {
    for k in 0..width {
        let pair = (k / 2) as f64;
        let freq = math::powf(10000.0, -2.0 * pair / width as f64);
        let angle = pos as f64 * freq;
        out.push(if k % 2 == 0 {
            math::sin(angle)
        } else {
            math::cos(angle)
        });
    }
}

/// 2-D table for a `side×side` token grid: the first `dim/2` dims encode the
/// row index, the rest encode the column index. Tokens are row-major, so the
/// result is `[side², dim]`.
pub fn grid_table(side: usize, dim: usize) -> Tensor {
    let row_width = dim / 2;
    let col_width = dim - row_width;
    let mut data = Vec::with_capacity(side * side * dim);
    for r in 0..side {
        for c in 0..side {
            axis_encoding(r, row_width, &mut data);
            axis_encoding(c, col_width, &mut data);
        }
    }
    Tensor::new(alloc::vec![side * side, dim], data).expect("table shape")
}

/// 1-D table for a token sequence: `[len, dim]`.
pub fn sequence_table(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        axis_encoding(pos, dim, &mut data);
    }
    Tensor::new(alloc::vec![len, dim], data).expect("table shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_sines_are_zero() {
        let t = grid_table(4, 8);
        // token (0,0): every sin component is sin(0) = 0, every cos is 1
        let first = &t.data()[..8];
        for (k, v) in first.iter().enumerate() {
            if k % 2 == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn deterministic_across_calls() {
        assert_eq!(grid_table(8, 16).data(), grid_table(8, 16).data());
        assert_eq!(sequence_table(32, 12).data(), sequence_table(32, 12).data());
    }

    #[test]
    fn positions_distinct_up_to_side_64() {
        let side = 64;
        let dim = 8;
        let t = grid_table(side, dim);
        let rows: Vec<&[f64]> = t.data().chunks(dim).collect();
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                assert_ne!(rows[i], rows[j], "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn odd_dim_still_covers_all_entries() {
        let t = grid_table(2, 7); // halves of 3 and 4
        assert_eq!(t.dims(), &[4, 7]);
        assert!(t.data().iter().all(|v| v.is_finite()));
    }
}
