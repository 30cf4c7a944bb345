//! Positional-embedding resizing for resolution changes between stages.

use crate::error::ModelError;
use crate::tensor::Tensor;

/// Resample a square positional grid to `new_grid × new_grid` per channel.
/// Bilinear with corner alignment (so `new_grid == old` is bit-identical);
/// `nearest` switches to nearest-neighbor. A class-token row at index 0 is
/// passed through unchanged when `has_class` is set.
pub fn resize_pos_embed(
    pos: &Tensor,
    new_grid: usize,
    has_class: bool,
    nearest: bool,
) -> Result<Tensor, ModelError> {
    if new_grid == 0 {
        return Err(ModelError::EmptyTargetGrid);
    }
    let shape = pos.shape();
    if shape.len() != 2 {
        return Err(ModelError::NonSquareGrid { count: shape.len() });
    }
    let (rows, d) = (shape[0], shape[1]);
    let cls = usize::from(has_class);
    let grid_rows = rows
        .checked_sub(cls)
        .ok_or(ModelError::NonSquareGrid { count: rows })?;
    let g = (grid_rows as f64).sqrt().round() as usize;
    if g * g != grid_rows || g == 0 {
        return Err(ModelError::NonSquareGrid { count: grid_rows });
    }

    let src = pos.data();
    let mut out = Vec::with_capacity((cls + new_grid * new_grid) * d);
    out.extend_from_slice(&src[..cls * d]);

    // corner-aligned source coordinate for output index i
    let coord = |i: usize| -> f64 {
        if new_grid == 1 {
            (g - 1) as f64 / 2.0
        } else {
            i as f64 * (g - 1) as f64 / (new_grid - 1) as f64
        }
    };
    let at = |y: usize, x: usize, c: usize| src[(cls + y * g + x) * d + c];

    for i in 0..new_grid {
        let sy = coord(i);
        for j in 0..new_grid {
            let sx = coord(j);
            if nearest {
                let y = (sy.round() as usize).min(g - 1);
                let x = (sx.round() as usize).min(g - 1);
                for c in 0..d {
                    out.push(at(y, x, c));
                }
            } else {
                let y0 = (sy.floor() as usize).min(g - 1);
                let x0 = (sx.floor() as usize).min(g - 1);
                let y1 = (y0 + 1).min(g - 1);
                let x1 = (x0 + 1).min(g - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                for c in 0..d {
                    let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
                    let bottom = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![cls + new_grid * new_grid, d], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_grid(g: usize, d: usize, a: f64, b: f64, c: f64) -> Tensor {
        let mut data = Vec::with_capacity(g * g * d);
        for i in 0..g {
            for j in 0..g {
                for ch in 0..d {
                    data.push(a * i as f64 + b * j as f64 + c + ch as f64);
                }
            }
        }
        Tensor::from_vec(vec![g * g, d], data).unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let pos = ramp_grid(4, 3, 0.7, -0.3, 1.1);
        let out = resize_pos_embed(&pos, 4, false, false).unwrap();
        assert_eq!(out.data(), pos.data());
        let out = resize_pos_embed(&pos, 4, false, true).unwrap();
        assert_eq!(out.data(), pos.data());
    }

    #[test]
    fn constant_field_stays_constant() {
        let pos = Tensor::from_vec(vec![9, 2], vec![5.5; 18]).unwrap();
        let out = resize_pos_embed(&pos, 7, false, false).unwrap();
        assert_eq!(out.shape(), &[49, 2]);
        assert!(out.data().iter().all(|&v| (v - 5.5).abs() < 1e-12));
    }

    #[test]
    fn linear_ramp_reproduced_at_interpolated_coords() {
        // bilinear interpolation reproduces affine fields exactly
        let (a, b, c) = (2.0, -1.5, 0.25);
        let pos = ramp_grid(2, 1, a, b, c);
        let out = resize_pos_embed(&pos, 4, false, false).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let sy = i as f64 * 1.0 / 3.0;
                let sx = j as f64 * 1.0 / 3.0;
                let expect = a * sy + b * sx + c;
                let got = out.data()[i * 4 + j];
                assert!((got - expect).abs() < 1e-12, "({i},{j}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn class_row_passes_through() {
        // 1 class row + 2x2 grid, one channel
        let pos = Tensor::from_vec(vec![5, 1], vec![9.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resize_pos_embed(&pos, 3, true, false).unwrap();
        assert_eq!(out.shape(), &[10, 1]);
        assert_eq!(out.data()[0], 9.0);
        // corners preserved
        assert_eq!(out.data()[1], 0.0);
        assert_eq!(out.data()[3], 1.0);
        assert_eq!(out.data()[7], 2.0);
        assert_eq!(out.data()[9], 3.0);
    }

    #[test]
    fn rejects_bad_targets_and_non_square() {
        let pos = Tensor::from_vec(vec![4, 1], vec![0.0; 4]).unwrap();
        assert!(matches!(
            resize_pos_embed(&pos, 0, false, false),
            Err(ModelError::EmptyTargetGrid)
        ));
        let pos = Tensor::from_vec(vec![5, 1], vec![0.0; 5]).unwrap();
        assert!(matches!(
            resize_pos_embed(&pos, 2, false, false),
            Err(ModelError::NonSquareGrid { .. })
        ));
    }
}
