//! Perspective-view → BEV transforms: spatial cross attention and
//! geometry-guided kernel attention.

use std::sync::Arc;

use crate::geometry::{KernelTable, ProjectionResult};
use crate::registry::ModuleVariant;
use crate::tensor::{Scalar, SparseRows, Tape, Tensor, Var};

use super::{sparse_cast, Binder, ModelError, Tables};

fn view_mean_rows(
    proj: &ProjectionResult,
    pairs: &[(usize, usize)],
) -> (SparseRows<f64>, Vec<f64>) {
    let mut mix = SparseRows::new(pairs.len());
    let mut start = 0;
    let mut nohit = Vec::with_capacity(proj.n_cells);
    for cell in 0..proj.n_cells {
        let mut end = start;
        while end < pairs.len() && pairs[end].0 == cell {
            end += 1;
        }
        let n_views = proj.hit_views[cell].len();
        let w = if n_views > 0 {
            1.0 / n_views as f64
        } else {
            0.0
        };
        mix.push_row((start..end).map(|e| (e, w)));
        nohit.push(if n_views == 0 { 1.0 } else { 0.0 });
        start = end;
    }
    (mix, nohit)
}

/// Hit (cell, view, anchor) entries with their sampling bases.
#[derive(Debug)]
pub(crate) struct ScaTables {
    pub entries: Vec<(usize, usize, usize)>,
    /// Row of the `[H·W·N_ref × ·]` reshaped query projections per entry.
    gather: Arc<Vec<usize>>,
    /// Projected point per sampling location, `[E·N_key × 2]`.
    uv: Tensor<f64>,
    /// First feature row of the entry's view, per sampling location.
    base: Arc<Vec<usize>>,
    /// `[H·W × E]`: sum over anchors, mean over hit views.
    mix: SparseRows<f64>,
    nohit: Vec<f64>,
}

impl ScaTables {
    pub fn new(proj: &ProjectionResult, n_key: usize) -> Self {
        let mut entries = Vec::new();
        for cell in 0..proj.n_cells {
            for &view in &proj.hit_views[cell] {
                for a in 0..proj.n_ref {
                    if proj.hit[proj.entry(cell, view, a)] {
                        entries.push((cell, view, a));
                    }
                }
            }
        }
        let map = proj.feat_h * proj.feat_w;
        let gather = entries
            .iter()
            .map(|&(c, _, a)| c * proj.n_ref + a)
            .collect();
        let mut uv = Vec::with_capacity(entries.len() * n_key * 2);
        let mut base = Vec::with_capacity(entries.len() * n_key);
        for &(c, v, a) in &entries {
            let [u, w] = proj.uv[proj.entry(c, v, a)];
            for _ in 0..n_key {
                uv.extend([u, w]);
                base.push(v * map);
            }
        }
        let pairs: Vec<(usize, usize)> = entries.iter().map(|&(c, v, _)| (c, v)).collect();
        let (mix, nohit) = view_mean_rows(proj, &pairs);
        Self {
            gather: Arc::new(gather),
            uv: Tensor::matrix(entries.len() * n_key, 2, uv).expect("uv table"),
            base: Arc::new(base),
            entries,
            mix,
            nohit,
        }
    }
}

/// Deformable spatial cross attention. For every hit (view, anchor) the
/// query predicts `N_key` offsets around the projected point and softmax
/// weights over them; samples are summed over anchors, averaged over hit
/// views and projected by the value matrix. Cells seen by no view pass the
/// query through.
pub(super) fn sca<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<T>,
    v: &ModuleVariant,
    n_key: usize,
    t: &ScaTables,
    tables: &Tables,
    feats: Var,
) -> Result<Var, ModelError> {
    let q = b.get(tape, v, 0, "bev-queries")?;
    let cells = tape.shape(q)[0];
    let n_ref = tables.proj.n_ref;
    let e = t.entries.len();

    let (ow, ob) = (
        b.get(tape, v, 1, "offset.w")?,
        b.get(tape, v, 1, "offset.b")?,
    );
    let off = tape.linear(q, ow, Some(ob))?;
    let off = tape.reshape(off, vec![cells * n_ref, n_key * 2])?;
    let off = tape.gather_rows(off, t.gather.clone())?;
    let off = tape.reshape(off, vec![e * n_key, 2])?;
    let coords = tape.add_const(off, &t.uv.cast())?;

    let (aw, ab) = (b.get(tape, v, 1, "attn.w")?, b.get(tape, v, 1, "attn.b")?);
    let att = tape.linear(q, aw, Some(ab))?;
    let att = tape.reshape(att, vec![cells * n_ref, n_key])?;
    let att = tape.gather_rows(att, t.gather.clone())?;
    let att = tape.softmax(att);

    let samples =
        tape.bilinear_sample(feats, coords, t.base.clone(), tables.feat_h, tables.feat_w)?;
    let per_entry = tape.group_weighted_sum(samples, att)?;
    let agg = tape.sparse_mix(per_entry, sparse_cast(&t.mix))?;
    let vw = b.get(tape, v, 1, "value.w")?;
    let out = tape.matmul(agg, vw)?;
    let keep = tape.scale_rows(q, Arc::new(t.nohit.iter().map(|&m| T::of(m)).collect()))?;
    Ok(tape.add(out, keep)?)
}

#[derive(Debug)]
pub(crate) struct GktTables {
    pub table: KernelTable,
    pair_cells: Arc<Vec<usize>>,
    /// Global feature row of every kernel tap.
    taps: Arc<Vec<usize>>,
    mix: SparseRows<f64>,
    nohit: Vec<f64>,
}

impl GktTables {
    pub fn new(proj: &ProjectionResult, table: KernelTable) -> Self {
        let map = proj.feat_h * proj.feat_w;
        let kk = table.kh * table.kw;
        let mut taps = Vec::with_capacity(table.indices.len());
        for (i, &(_, view)) in table.pairs.iter().enumerate() {
            taps.extend(table.kernel(i).iter().map(|&j| view * map + j));
        }
        debug_assert_eq!(taps.len(), table.pairs.len() * kk);
        let (mix, nohit) = view_mean_rows(proj, &table.pairs);
        Self {
            pair_cells: Arc::new(table.pairs.iter().map(|p| p.0).collect()),
            taps: Arc::new(taps),
            mix,
            nohit,
            table,
        }
    }
}

/// Kernel attention: each BEV query attends over the `Kh×Kw` features
/// around its rounded projection in every hit view; views are averaged.
pub(super) fn gkt<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Binder<T>,
    v: &ModuleVariant,
    t: &GktTables,
    _tables: &Tables,
    feats: Var,
    channels: usize,
) -> Result<Var, ModelError> {
    let q = b.get(tape, v, 0, "bev-queries")?;
    let kk = t.table.kh * t.table.kw;
    let (wq, wk, wv) = (
        b.get(tape, v, 1, "query.w")?,
        b.get(tape, v, 1, "key.w")?,
        b.get(tape, v, 1, "value.w")?,
    );
    let qp = tape.matmul(q, wq)?;
    let qp = tape.gather_rows(qp, t.pair_cells.clone())?;
    let keys = tape.matmul(feats, wk)?;
    let keys = tape.gather_rows(keys, t.taps.clone())?;
    let logits = tape.group_dot(qp, keys, kk)?;
    let logits = tape.scale(logits, T::of(1.0 / (channels as f64).sqrt()));
    let att = tape.softmax(logits);
    let vals = tape.matmul(feats, wv)?;
    let vals = tape.gather_rows(vals, t.taps.clone())?;
    let per_pair = tape.group_weighted_sum(vals, att)?;
    let agg = tape.sparse_mix(per_pair, sparse_cast(&t.mix))?;
    let keep = tape.scale_rows(q, Arc::new(t.nohit.iter().map(|&m| T::of(m)).collect()))?;
    Ok(tape.add(agg, keep)?)
}
