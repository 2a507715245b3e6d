use crate::error::{CopeError, Result};
use crate::tensor::Tensor;

/// Splits an `H x W x 3` frame into non-overlapping `patch x patch` tiles.
///
/// Tiles are ordered row-major over the tile grid; inside a tile the vector
/// is laid out as `(row, col, channel)`, so each row of the result has
/// `patch * patch * 3` entries.
pub fn patchify(frame: &[f32], height: usize, width: usize, patch: usize) -> Result<Tensor> {
    check_shape(frame.len(), height, width, patch)?;
    let (gh, gw) = (height / patch, width / patch);
    let dim = patch * patch * 3;
    let mut out = Tensor::zeros(gh * gw, dim);
    for ty in 0..gh {
        for tx in 0..gw {
            let row = out.row_mut(ty * gw + tx);
            for py in 0..patch {
                let src = ((ty * patch + py) * width + tx * patch) * 3;
                let dst = py * patch * 3;
                for (d, s) in row[dst..dst + patch * 3]
                    .iter_mut()
                    .zip(&frame[src..src + patch * 3])
                {
                    *d = f64::from(*s);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, patch: usize) -> Result<Vec<f32>> {
    check_shape(height * width * 3, height, width, patch)?;
    let (gh, gw) = (height / patch, width / patch);
    if patches.shape() != (gh * gw, patch * patch * 3) {
        return Err(CopeError::Shape(format!(
            "patch matrix {:?} does not tile a {height}x{width} frame with patch {patch}",
            patches.shape()
        )));
    }
    let mut frame = vec![0.0f32; height * width * 3];
    for ty in 0..gh {
        for tx in 0..gw {
            let row = patches.row(ty * gw + tx);
            for py in 0..patch {
                let dst = ((ty * patch + py) * width + tx * patch) * 3;
                let src = py * patch * 3;
                for (d, s) in frame[dst..dst + patch * 3]
                    .iter_mut()
                    .zip(&row[src..src + patch * 3])
                {
                    *d = *s as f32;
                }
            }
        }
    }
    Ok(frame)
}

fn check_shape(len: usize, height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(CopeError::Shape(format!(
            "{height}x{width} frame is not divisible into {patch}x{patch} patches"
        )));
    }
    if len != height * width * 3 {
        return Err(CopeError::Shape(format!(
            "frame buffer holds {len} values, expected {}",
            height * width * 3
        )));
    }
    Ok(())
}
