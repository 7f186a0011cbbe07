//! Temporal fusion of the current BEV with the aligned history state.

use std::sync::Arc;

use crate::geometry::BevGrid;
use crate::registry::ModuleVariant;
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::{Binder, ModelError, Tables};

/// Temporal self attention: queries (the current BEV) attend with
/// deformable sampling into the current BEV and into the aligned history;
/// the two branch outputs are averaged.
#[allow(clippy::too_many_arguments)]
pub(super) fn tsa<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<T>,
    v: &ModuleVariant,
    n_key: usize,
    grid: &BevGrid,
    tables: &Tables,
    current: Var,
    prev: Var,
) -> Result<Var, ModelError> {
    if tape.shape(current) != tape.shape(prev) {
        return Err(crate::tensor::TensorError::Shape {
            op: "tsa",
            lhs: tape.shape(current).to_vec(),
            rhs: tape.shape(prev).to_vec(),
        }
        .into());
    }
    let cells = tape.shape(current)[0];
    let (ow, ob) = (
        b.get(tape, v, 0, "offset.w")?,
        b.get(tape, v, 0, "offset.b")?,
    );
    let (aw, ab) = (b.get(tape, v, 0, "attn.w")?, b.get(tape, v, 0, "attn.b")?);
    let vw = b.get(tape, v, 0, "value.w")?;
    let off = tape.linear(current, ow, Some(ob))?;
    let att = tape.linear(current, aw, Some(ab))?;

    let mut base_xy = Vec::with_capacity(cells * n_key * 2);
    for c in 0..cells {
        let xy = tables.cell_grid.row(c);
        for _ in 0..n_key {
            base_xy.extend_from_slice(xy);
        }
    }
    let base_xy: Tensor<T> = Tensor::matrix(cells * n_key, 2, base_xy)?.cast();
    let zeros = Arc::new(vec![0usize; cells * n_key]);

    let mut branches = Vec::with_capacity(2);
    for (k, src) in [current, prev].into_iter().enumerate() {
        let o = tape.slice_cols(off, k * n_key * 2, (k + 1) * n_key * 2)?;
        let o = tape.reshape(o, vec![cells * n_key, 2])?;
        let coords = tape.add_const(o, &base_xy)?;
        let a = tape.slice_cols(att, k * n_key, (k + 1) * n_key)?;
        let a = tape.softmax(a);
        let val = tape.matmul(src, vw)?;
        let s = tape.bilinear_sample(val, coords, zeros.clone(), grid.h, grid.w)?;
        branches.push(tape.group_weighted_sum(s, a)?);
    }
    let sum = tape.add(branches[0], branches[1])?;
    Ok(tape.scale(sum, T::of(0.5)))
}

/// Recurrent concatenation fusion: `q + W₂·relu(W₁·[q | b] + b₁) + b₂`.
pub(super) fn rcf<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<T>,
    v: &ModuleVariant,
    current: Var,
    prev: Var,
) -> Result<Var, ModelError> {
    if tape.shape(current) != tape.shape(prev) {
        return Err(crate::tensor::TensorError::Shape {
            op: "rcf",
            lhs: tape.shape(current).to_vec(),
            rhs: tape.shape(prev).to_vec(),
        }
        .into());
    }
    let x = tape.concat_cols(current, prev)?;
    let (w1, b1) = (b.get(tape, v, 0, "fc1.w")?, b.get(tape, v, 0, "fc1.b")?);
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.relu(h);
    let (w2, b2) = (b.get(tape, v, 0, "fc2.w")?, b.get(tape, v, 0, "fc2.b")?);
    let h = tape.linear(h, w2, Some(b2))?;
    Ok(tape.add(current, h)?)
}
