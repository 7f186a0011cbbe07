//! DETR-style detection head: learned object queries refined by alternating
//! self attention and cross attention into the BEV map.

use crate::geometry::BevGrid;
use crate::registry::{Arch, ModelDims, ModuleVariant};
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::{Binder, DetectionVars, ModelError, Tables};

/// Fixed 2D sine/cosine position code per BEV cell, `[H·W × c]`. The first
/// half of the channels encodes the column, the second half the row.
pub fn sinusoidal_embedding(grid: &BevGrid, c: usize) -> Tensor<f64> {
    let freqs = c / 4;
    let mut data = vec![0.0; grid.cells() * c];
    for cell in 0..grid.cells() {
        let (x, y) = ((cell % grid.w) as f64, (cell / grid.w) as f64);
        let row = &mut data[cell * c..(cell + 1) * c];
        for i in 0..freqs {
            let w = 10f64.powf(-(i as f64) / freqs as f64);
            row[2 * i] = (x * w).sin();
            row[2 * i + 1] = (x * w).cos();
            row[2 * freqs + 2 * i] = (y * w).sin();
            row[2 * freqs + 2 * i + 1] = (y * w).cos();
        }
    }
    Tensor::matrix(grid.cells(), c, data).expect("embedding shape")
}

fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    scale: T,
) -> Result<(Var, Var), ModelError> {
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, scale);
    let a = tape.softmax(s);
    Ok((tape.matmul(a, v)?, a))
}

pub(super) fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<T>,
    v: &ModuleVariant,
    dims: &ModelDims,
    tables: &Tables,
    bev: Var,
) -> Result<DetectionVars, ModelError> {
    let Arch::DetHead { layers, .. } = v.arch else {
        unreachable!("head arch")
    };
    let scale = T::of(1.0 / (dims.channels as f64).sqrt());
    let keys_in = tape.add_const(bev, &tables.pos_embed.cast())?;
    let mut o = b.get(tape, v, 0, "object-queries")?;
    let mut cross_att = None;
    for l in 1..=layers {
        let q = {
            let w = b.get(tape, v, l, "self.q.w")?;
            tape.matmul(o, w)?
        };
        let k = {
            let w = b.get(tape, v, l, "self.k.w")?;
            tape.matmul(o, w)?
        };
        let val = {
            let w = b.get(tape, v, l, "self.v.w")?;
            tape.matmul(o, w)?
        };
        let (upd, _) = attend(tape, q, k, val, scale)?;
        let r = tape.add(o, upd)?;
        o = tape.layer_norm(r)?;

        let q = {
            let w = b.get(tape, v, l, "cross.q.w")?;
            tape.matmul(o, w)?
        };
        let k = {
            let w = b.get(tape, v, l, "cross.k.w")?;
            tape.matmul(keys_in, w)?
        };
        let val = {
            let w = b.get(tape, v, l, "cross.v.w")?;
            tape.matmul(bev, w)?
        };
        let (upd, a) = attend(tape, q, k, val, scale)?;
        cross_att = Some(a);
        let r = tape.add(o, upd)?;
        o = tape.layer_norm(r)?;
    }
    let out = layers + 1;
    let logits = {
        let (w, bias) = (b.get(tape, v, out, "cls.w")?, b.get(tape, v, out, "cls.b")?);
        tape.linear(o, w, Some(bias))?
    };
    let raw = {
        let (w, bias) = (b.get(tape, v, out, "box.w")?, b.get(tape, v, out, "box.b")?);
        tape.linear(o, w, Some(bias))?
    };
    let velocity = {
        let (w, bias) = (b.get(tape, v, out, "vel.w")?, b.get(tape, v, out, "vel.b")?);
        tape.linear(o, w, Some(bias))?
    };

    // centre = attention-weighted cell position + predicted offset
    let cells = tape.constant(tables.cell_world.cast());
    let delta = tape.slice_cols(raw, 0, 2)?;
    let xy = match cross_att {
        Some(a) => {
            let reference = tape.matmul(a, cells)?;
            tape.add(reference, delta)?
        }
        None => delta,
    };
    let z = tape.slice_cols(raw, 2, 3)?;
    let ext = tape.slice_cols(raw, 3, 6)?;
    let ext = tape.softplus(ext);
    let xyz = tape.concat_cols(xy, z)?;
    let boxes = tape.concat_cols(xyz, ext)?;
    Ok(DetectionVars {
        logits,
        boxes,
        velocity,
    })
}
