use crate::registry::{Arch, ModuleVariant};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

use super::{Binder, ModelError};

/// Splits HWC rasters into non-overlapping `patch×patch` tiles. Rows are
/// ordered view, tile row, tile column; each row is the tile in
/// (row, column, channel) order.
pub fn patchify(
    views: &[Vec<f32>],
    h: usize,
    w: usize,
    c: usize,
    patch: usize,
) -> Result<Tensor<f32>, TensorError> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TensorError::Shape {
            op: "patchify",
            lhs: vec![h, w],
            rhs: vec![patch],
        });
    }
    let (fh, fw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Vec::with_capacity(views.len() * fh * fw * dim);
    for img in views {
        if img.len() != h * w * c {
            return Err(TensorError::Shape {
                op: "patchify",
                lhs: vec![h, w, c],
                rhs: vec![img.len()],
            });
        }
        for ty in 0..fh {
            for tx in 0..fw {
                for py in 0..patch {
                    let row = (ty * patch + py) * w + tx * patch;
                    out.extend_from_slice(&img[row * c..(row + patch) * c]);
                }
            }
        }
    }
    Tensor::matrix(views.len() * fh * fw, dim, out)
}

/// Linear patch embedding, pre-norm residual MLP blocks, projection to C.
pub(super) fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<T>,
    v: &ModuleVariant,
    patches: Var,
) -> Result<Var, ModelError> {
    let Arch::Encoder { blocks, .. } = v.arch else {
        unreachable!("encoder arch")
    };
    let (w, bias) = (b.get(tape, v, 0, "embed.w")?, b.get(tape, v, 0, "embed.b")?);
    let mut x = tape.linear(patches, w, Some(bias))?;
    for blk in 1..=blocks {
        let h = tape.layer_norm(x)?;
        let (w1, b1) = (b.get(tape, v, blk, "fc1.w")?, b.get(tape, v, blk, "fc1.b")?);
        let h = tape.linear(h, w1, Some(b1))?;
        let h = tape.relu(h);
        let (w2, b2) = (b.get(tape, v, blk, "fc2.w")?, b.get(tape, v, blk, "fc2.b")?);
        let h = tape.linear(h, w2, Some(b2))?;
        x = tape.add(x, h)?;
    }
    let x = tape.layer_norm(x)?;
    let (pw, pb) = (
        b.get(tape, v, blocks + 1, "proj.w")?,
        b.get(tape, v, blocks + 1, "proj.b")?,
    );
    Ok(tape.linear(x, pw, Some(pb))?)
}
