//! Buffer-level reverse-mode tape.
//!
//! Forward values are computed eagerly as ops are recorded; `backward`
//! replays the op list in reverse, accumulating adjoints per buffer and
//! shipping parameter gradients to a [`GradSink`]. Buffers are plain f64
//! vectors; parameters are referenced by [`EntryId`] and read from the
//! [`ParamStore`] passed to each call, which must be the same store for
//! the tape's whole lifetime.

use super::params::{EntryId, ParamStore};
use crate::{Error, Result};

/// Index of a value buffer on a tape.
pub type BufId = usize;

const KERNEL: usize = 3; // all convolutions in the crate are 3x3

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Reflect,
    /// Wrap-around padding, used only by the translation-equivariance test
    /// path of the teacher encoder.
    Circular,
}

#[derive(Debug, Clone)]
#[allow(dead_code)]
enum Op {
    Leaf,
    Linear { w: EntryId, b: EntryId, x: BufId, out: BufId, in_dim: usize, out_dim: usize },
    Relu { x: BufId, out: BufId },
    Sigmoid { x: BufId, out: BufId },
    Softplus { x: BufId, out: BufId },
    AddScalar { x: BufId, out: BufId },
    Scale { x: BufId, k: f64, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Dot { a: BufId, b: BufId, out: BufId },
    Sum { x: BufId, out: BufId },
    SqDiffSum { a: BufId, target: Vec<f64>, out: BufId },
    AbsDiffSum { a: BufId, target: Vec<f64>, out: BufId },
    SumScalars { parts: Vec<BufId>, out: BufId },
    ConcatN { parts: Vec<BufId>, out: BufId },
    Slice { x: BufId, offset: usize, len: usize, out: BufId },
    Log1p { x: BufId, out: BufId },
    Softmax { x: BufId, out: BufId },
    StopGrad { x: BufId, out: BufId },
    GridGather { grid: EntryId, corners: [u32; 8], weights: [f64; 8], channels: usize, out: BufId },
    StackRows { rows: Vec<BufId>, out: BufId, dim: usize },
    MatVecRows { mat: BufId, v: BufId, out: BufId, rows: usize, dim: usize },
    WeightedRowSum { mat: BufId, w: BufId, out: BufId, rows: usize, dim: usize },
    Composite {
        sigma: BufId,
        payload: BufId,
        active: Vec<u32>,
        deltas: Vec<f64>,
        bg: Vec<f64>,
        out: BufId,
        dim: usize,
        // saved forward state
        trans: Vec<f64>,     // T_i, length K+1, T_0 = 1 before first sample
        exp_term: Vec<f64>,  // exp(-sigma_i * delta_i), length K
    },
    Pad2d { x: BufId, out: BufId, ch: usize, h: usize, w: usize, mode: PadMode },
    Conv2dValid {
        w: EntryId,
        b: EntryId,
        x: BufId,
        out: BufId,
        in_ch: usize,
        out_ch: usize,
        h: usize, // padded input height
        wd: usize,
    },
    PixelGather { x: BufId, out: BufId, ch: usize, h: usize, w: usize, u: usize, v: usize },
}

/// Destination for parameter gradients produced by `Tape::backward`.
pub trait GradSink {
    fn accumulate(&mut self, entry: EntryId, index: usize, grad: f64);

    fn accumulate_scaled_slice(&mut self, entry: EntryId, offset: usize, grad: &[f64], scale: f64) {
        for (i, g) in grad.iter().enumerate() {
            self.accumulate(entry, offset + i, g * scale);
        }
    }
}

#[derive(Debug, Clone)]
enum EntryGrad {
    Empty,
    Dense(Vec<f64>),
    Sparse(Vec<(u32, f64)>),
}

/// Per-chunk gradient buffer. Small entries accumulate densely, large ones
/// (voxel grids) as index/value pairs in push order. Merging chunks into the
/// store in chunk order gives a fixed floating-point reduction order no
/// matter how the chunks themselves were scheduled.
pub struct ChunkGrads {
    per_entry: Vec<EntryGrad>,
    sizes: Vec<usize>,
    sparse_threshold: usize,
}

impl ChunkGrads {
    pub fn new(store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, e)| e.len()).collect();
        ChunkGrads {
            per_entry: vec![EntryGrad::Empty; sizes.len()],
            sizes,
            sparse_threshold: 65_536,
        }
    }

    pub fn merge_into(self, store: &mut ParamStore) {
        for (i, eg) in self.per_entry.into_iter().enumerate() {
            match eg {
                EntryGrad::Empty => {}
                EntryGrad::Dense(g) => {
                    let dst = &mut store.entry_mut(EntryId(i)).grads;
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                EntryGrad::Sparse(pairs) => {
                    let dst = &mut store.entry_mut(EntryId(i)).grads;
                    for (idx, v) in pairs {
                        dst[idx as usize] += v;
                    }
                }
            }
        }
    }
}

impl GradSink for ChunkGrads {
    fn accumulate(&mut self, entry: EntryId, index: usize, grad: f64) {
        let slot = &mut self.per_entry[entry.0];
        match slot {
            EntryGrad::Dense(g) => g[index] += grad,
            EntryGrad::Sparse(pairs) => pairs.push((index as u32, grad)),
            EntryGrad::Empty => {
                if self.sizes[entry.0] > self.sparse_threshold {
                    *slot = EntryGrad::Sparse(vec![(index as u32, grad)]);
                } else {
                    let mut g = vec![0.0; self.sizes[entry.0]];
                    g[index] += grad;
                    *slot = EntryGrad::Dense(g);
                }
            }
        }
    }
}

/// Ordered record of primitive operations with their activations.
#[derive(Default)]
pub struct Tape {
    bufs: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all ops and buffers, keeping allocations where possible.
    pub fn reset(&mut self) {
        self.bufs.clear();
        self.ops.clear();
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id]
    }

    pub fn scalar(&self, id: BufId) -> f64 {
        debug_assert_eq!(self.bufs[id].len(), 1);
        self.bufs[id][0]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, data: Vec<f64>, op_of: impl FnOnce(BufId) -> Op) -> BufId {
        let out = self.bufs.len();
        self.bufs.push(data);
        let op = op_of(out);
        self.ops.push(op);
        out
    }

    /// A constant input buffer; receives no gradient.
    pub fn leaf(&mut self, data: Vec<f64>) -> BufId {
        self.push(data, |_| Op::Leaf)
    }

    /// Affine layer `out = W x + b` with `W` row-major `[out_dim, in_dim]`.
    pub fn linear(&mut self, store: &ParamStore, w: EntryId, b: EntryId, x: BufId) -> Result<BufId> {
        let we = store.entry(w);
        let be = store.entry(b);
        if we.shape.len() != 2 || we.shape[0] != be.len() {
            return Err(Error::ShapeMismatch {
                name: we.name.clone(),
                detail: format!("weight shape {:?} vs bias length {}", we.shape, be.len()),
            });
        }
        let (out_dim, in_dim) = (we.shape[0], we.shape[1]);
        if self.bufs[x].len() != in_dim {
            return Err(Error::ShapeMismatch {
                name: we.name.clone(),
                detail: format!("input length {} vs weight in_dim {in_dim}", self.bufs[x].len()),
            });
        }
        let xv = &self.bufs[x];
        let mut out = be.values.clone();
        for (o, row) in out.iter_mut().zip(we.values.chunks_exact(in_dim)) {
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(xv) {
                acc += wi * xi;
            }
            *o += acc;
        }
        Ok(self.push(out, |id| Op::Linear { w, b, x, out: id, in_dim, out_dim }))
    }

    pub fn relu(&mut self, x: BufId) -> BufId {
        let out: Vec<f64> = self.bufs[x].iter().map(|&v| v.max(0.0)).collect();
        self.push(out, |id| Op::Relu { x, out: id })
    }

    pub fn sigmoid(&mut self, x: BufId) -> BufId {
        let out: Vec<f64> = self.bufs[x].iter().map(|&v| super::sigmoid(v)).collect();
        self.push(out, |id| Op::Sigmoid { x, out: id })
    }

    pub fn softplus(&mut self, x: BufId) -> BufId {
        let out: Vec<f64> = self.bufs[x].iter().map(|&v| super::softplus(v)).collect();
        self.push(out, |id| Op::Softplus { x, out: id })
    }

    pub fn add_scalar(&mut self, x: BufId, c: f64) -> BufId {
        let out: Vec<f64> = self.bufs[x].iter().map(|&v| v + c).collect();
        self.push(out, |id| Op::AddScalar { x, out: id })
    }

    pub fn scale(&mut self, x: BufId, k: f64) -> BufId {
        let out: Vec<f64> = self.bufs[x].iter().map(|&v| v * k).collect();
        self.push(out, |id| Op::Scale { x, k, out: id })
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        debug_assert_eq!(self.bufs[a].len(), self.bufs[b].len());
        let out: Vec<f64> = self.bufs[a].iter().zip(&self.bufs[b]).map(|(x, y)| x + y).collect();
        self.push(out, |id| Op::Add { a, b, out: id })
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> BufId {
        debug_assert_eq!(self.bufs[a].len(), self.bufs[b].len());
        let out: Vec<f64> = self.bufs[a].iter().zip(&self.bufs[b]).map(|(x, y)| x - y).collect();
        self.push(out, |id| Op::Sub { a, b, out: id })
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> BufId {
        debug_assert_eq!(self.bufs[a].len(), self.bufs[b].len());
        let out: Vec<f64> = self.bufs[a].iter().zip(&self.bufs[b]).map(|(x, y)| x * y).collect();
        self.push(out, |id| Op::Mul { a, b, out: id })
    }

    pub fn dot(&mut self, a: BufId, b: BufId) -> BufId {
        debug_assert_eq!(self.bufs[a].len(), self.bufs[b].len());
        let s: f64 = self.bufs[a].iter().zip(&self.bufs[b]).map(|(x, y)| x * y).sum();
        self.push(vec![s], |id| Op::Dot { a, b, out: id })
    }

    pub fn sum(&mut self, x: BufId) -> BufId {
        let s: f64 = self.bufs[x].iter().sum();
        self.push(vec![s], |id| Op::Sum { x, out: id })
    }

    /// `sum((a - target)^2)` against a constant target.
    pub fn sq_diff_sum(&mut self, a: BufId, target: Vec<f64>) -> BufId {
        debug_assert_eq!(self.bufs[a].len(), target.len());
        let s: f64 = self.bufs[a].iter().zip(&target).map(|(x, t)| (x - t) * (x - t)).sum();
        self.push(vec![s], |id| Op::SqDiffSum { a, target, out: id })
    }

    /// `sum(|a - target|)` against a constant target. Subgradient 0 at ties.
    pub fn abs_diff_sum(&mut self, a: BufId, target: Vec<f64>) -> BufId {
        debug_assert_eq!(self.bufs[a].len(), target.len());
        let s: f64 = self.bufs[a].iter().zip(&target).map(|(x, t)| (x - t).abs()).sum();
        self.push(vec![s], |id| Op::AbsDiffSum { a, target, out: id })
    }

    /// Sum of scalar buffers into one scalar.
    pub fn sum_scalars(&mut self, parts: Vec<BufId>) -> BufId {
        let s: f64 = parts.iter().map(|&p| self.bufs[p][0]).sum();
        self.push(vec![s], |id| Op::SumScalars { parts, out: id })
    }

    pub fn concat(&mut self, parts: Vec<BufId>) -> BufId {
        let mut out = Vec::with_capacity(parts.iter().map(|&p| self.bufs[p].len()).sum());
        for &p in &parts {
            out.extend_from_slice(&self.bufs[p]);
        }
        self.push(out, |id| Op::ConcatN { parts, out: id })
    }

    pub fn slice(&mut self, x: BufId, offset: usize, len: usize) -> BufId {
        let out = self.bufs[x][offset..offset + len].to_vec();
        self.push(out, |id| Op::Slice { x, offset, len, out: id })
    }

    /// Elementwise `ln(1 + x)`; inputs must exceed -1.
    pub fn log1p(&mut self, x: BufId) -> BufId {
        let out: Vec<f64> = self.bufs[x].iter().map(|&v| v.ln_1p()).collect();
        self.push(out, |id| Op::Log1p { x, out: id })
    }

    pub fn softmax(&mut self, x: BufId) -> Result<BufId> {
        let out = super::softmax(&self.bufs[x])?;
        Ok(self.push(out, |id| Op::Softmax { x, out: id }))
    }

    /// Forward identity; backward contributes zero to all ancestors.
    pub fn stop_gradient(&mut self, x: BufId) -> BufId {
        let out = self.bufs[x].clone();
        self.push(out, |id| Op::StopGrad { x, out: id })
    }

    /// Weighted 8-corner read from a grid entry laid out `[voxel][channel]`.
    /// `corners` are flat voxel indices. Backward scatters `weight * adjoint`
    /// into the grid gradient.
    pub fn grid_gather(
        &mut self,
        store: &ParamStore,
        grid: EntryId,
        corners: [u32; 8],
        weights: [f64; 8],
        channels: usize,
    ) -> BufId {
        let data = store.values(grid);
        let mut out = vec![0.0; channels];
        for (idx, w) in corners.iter().zip(&weights) {
            if *w == 0.0 {
                continue;
            }
            let base = *idx as usize * channels;
            for (o, v) in out.iter_mut().zip(&data[base..base + channels]) {
                *o += w * v;
            }
        }
        self.push(out, |id| Op::GridGather { grid, corners, weights, channels, out: id })
    }

    /// Stack same-length buffers into a row-major matrix buffer.
    pub fn stack_rows(&mut self, rows: Vec<BufId>) -> BufId {
        let dim = self.bufs[rows[0]].len();
        let mut out = Vec::with_capacity(rows.len() * dim);
        for &r in &rows {
            debug_assert_eq!(self.bufs[r].len(), dim);
            out.extend_from_slice(&self.bufs[r]);
        }
        self.push(out, |id| Op::StackRows { rows, out: id, dim })
    }

    /// `out_i = <mat_i, v>` for each row of a stacked matrix buffer.
    pub fn mat_vec_rows(&mut self, mat: BufId, v: BufId, rows: usize, dim: usize) -> BufId {
        debug_assert_eq!(self.bufs[mat].len(), rows * dim);
        debug_assert_eq!(self.bufs[v].len(), dim);
        let vv = &self.bufs[v];
        let out: Vec<f64> = self.bufs[mat]
            .chunks_exact(dim)
            .map(|row| row.iter().zip(vv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(out, |id| Op::MatVecRows { mat, v, out: id, rows, dim })
    }

    /// `out = sum_i w_i * mat_i` over rows of a stacked matrix buffer.
    pub fn weighted_row_sum(&mut self, mat: BufId, w: BufId, rows: usize, dim: usize) -> BufId {
        debug_assert_eq!(self.bufs[mat].len(), rows * dim);
        debug_assert_eq!(self.bufs[w].len(), rows);
        let mut out = vec![0.0; dim];
        for (wi, row) in self.bufs[w].iter().zip(self.bufs[mat].chunks_exact(dim)) {
            for (o, m) in out.iter_mut().zip(row) {
                *o += wi * m;
            }
        }
        self.push(out, |id| Op::WeightedRowSum { mat, w, out: id, rows, dim })
    }

    /// Alpha-composite payload rows along a ray.
    ///
    /// `sigma` holds K nonnegative densities, `deltas` the K segment
    /// lengths, `payload` holds one row per **active** sample index in
    /// `active` (ascending). Inactive samples attenuate transmittance but
    /// contribute no payload:
    ///
    /// `out = sum_{i in active} T_i alpha_i payload_i  +  T_{K+1} bg`
    ///
    /// with `alpha_i = 1 - exp(-sigma_i delta_i)` and `T` the running
    /// transmittance product. With all samples active the weights plus the
    /// residual transmittance telescope to exactly 1.
    pub fn composite(
        &mut self,
        sigma: BufId,
        deltas: Vec<f64>,
        payload: BufId,
        active: Vec<u32>,
        bg: Vec<f64>,
    ) -> Result<BufId> {
        let k = self.bufs[sigma].len();
        if deltas.len() != k {
            return Err(Error::ShapeMismatch {
                name: "composite".into(),
                detail: format!("{k} densities vs {} deltas", deltas.len()),
            });
        }
        if let Some(bad) = self.bufs[sigma].iter().find(|&&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("negative or non-finite density {bad}")));
        }
        let dim = bg.len();
        if self.bufs[payload].len() != active.len() * dim {
            return Err(Error::ShapeMismatch {
                name: "composite".into(),
                detail: format!(
                    "payload length {} vs {} active rows of dim {dim}",
                    self.bufs[payload].len(),
                    active.len()
                ),
            });
        }
        let sig = &self.bufs[sigma];
        let mut exp_term = Vec::with_capacity(k);
        let mut trans = Vec::with_capacity(k + 1);
        let mut t = 1.0;
        for i in 0..k {
            trans.push(t);
            let e = (-sig[i] * deltas[i]).exp();
            exp_term.push(e);
            t *= e;
        }
        trans.push(t);

        let mut out: Vec<f64> = bg.iter().map(|b| b * t).collect();
        let pay = &self.bufs[payload];
        for (row, &i) in pay.chunks_exact(dim).zip(&active) {
            let i = i as usize;
            let w = trans[i] * (1.0 - exp_term[i]);
            for (o, p) in out.iter_mut().zip(row) {
                *o += w * p;
            }
        }
        Ok(self.push(out, |id| Op::Composite {
            sigma,
            payload,
            active,
            deltas,
            bg,
            out: id,
            dim,
            trans,
            exp_term,
        }))
    }

    /// Pad a `[ch][h][w]` image buffer by 1 pixel on each side.
    pub fn pad2d(&mut self, x: BufId, ch: usize, h: usize, w: usize, mode: PadMode) -> BufId {
        debug_assert_eq!(self.bufs[x].len(), ch * h * w);
        let (hp, wp) = (h + 2, w + 2);
        let mut out = vec![0.0; ch * hp * wp];
        let src = &self.bufs[x];
        for c in 0..ch {
            for i in 0..hp {
                let si = pad_index(i, h, mode);
                for j in 0..wp {
                    let sj = pad_index(j, w, mode);
                    out[c * hp * wp + i * wp + j] = src[c * h * w + si * w + sj];
                }
            }
        }
        self.push(out, |id| Op::Pad2d { x, out: id, ch, h, w, mode })
    }

    /// Valid (no-padding) 3x3 convolution over a `[in_ch][h][w]` buffer.
    /// Weight entry shape is `[out_ch, in_ch, 3, 3]`, bias `[out_ch]`.
    pub fn conv2d_valid(
        &mut self,
        store: &ParamStore,
        w: EntryId,
        b: EntryId,
        x: BufId,
        in_ch: usize,
        h: usize,
        wd: usize,
    ) -> Result<BufId> {
        let we = store.entry(w);
        let be = store.entry(b);
        if we.shape.len() != 4 || we.shape[1] != in_ch || we.shape[2] != KERNEL || we.shape[3] != KERNEL {
            return Err(Error::ShapeMismatch {
                name: we.name.clone(),
                detail: format!("conv weight shape {:?} vs in_ch {in_ch}", we.shape),
            });
        }
        let out_ch = we.shape[0];
        if be.len() != out_ch || self.bufs[x].len() != in_ch * h * wd {
            return Err(Error::ShapeMismatch {
                name: we.name.clone(),
                detail: "conv bias/input size mismatch".into(),
            });
        }
        let (ho, wo) = (h - 2, wd - 2);
        let src = &self.bufs[x];
        let mut out = vec![0.0; out_ch * ho * wo];
        for o in 0..out_ch {
            let bias = be.values[o];
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.fill(bias);
            for c in 0..in_ch {
                let kbase = (o * in_ch + c) * KERNEL * KERNEL;
                let ker = &we.values[kbase..kbase + 9];
                let sp = &src[c * h * wd..(c + 1) * h * wd];
                for i in 0..ho {
                    let row = &mut plane[i * wo..(i + 1) * wo];
                    for (ka, kr) in ker.chunks_exact(3).enumerate() {
                        let srow = &sp[(i + ka) * wd..(i + ka) * wd + wo + 2];
                        for j in 0..wo {
                            row[j] += kr[0] * srow[j] + kr[1] * srow[j + 1] + kr[2] * srow[j + 2];
                        }
                    }
                }
            }
        }
        Ok(self.push(out, |id| Op::Conv2dValid { w, b, x, out: id, in_ch, out_ch, h, wd }))
    }

    /// Extract the channel vector at pixel `(u, v)` of a `[ch][h][w]` buffer.
    pub fn pixel_gather(&mut self, x: BufId, ch: usize, h: usize, w: usize, u: usize, v: usize) -> BufId {
        let src = &self.bufs[x];
        let out: Vec<f64> = (0..ch).map(|c| src[c * h * w + v * w + u]).collect();
        self.push(out, |id| Op::PixelGather { x, out: id, ch, h, w, u, v })
    }

    /// Replay the tape in reverse from the scalar buffer `loss`, adding
    /// parameter gradients into `sink`. `store` must be the same store the
    /// forward pass read from. Deterministic for a fixed tape.
    pub fn backward(&mut self, store: &ParamStore, loss: BufId, sink: &mut impl GradSink) -> Result<()> {
        if self.bufs[loss].len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward from non-scalar buffer of length {}",
                self.bufs[loss].len()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.bufs.len()];
        adj[loss] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            self.backward_op(op, store, &mut adj, sink);
        }
        Ok(())
    }

    fn backward_op(
        &self,
        op: &Op,
        store: &ParamStore,
        adj: &mut [Option<Vec<f64>>],
        sink: &mut impl GradSink,
    ) {
        fn take(adj: &[Option<Vec<f64>>], id: BufId) -> Option<Vec<f64>> {
            adj[id].clone()
        }
        fn bump(adj: &mut [Option<Vec<f64>>], id: BufId, add: impl FnOnce(&mut Vec<f64>), len: usize) {
            let slot = adj[id].get_or_insert_with(|| vec![0.0; len]);
            add(slot);
        }

        match op {
            Op::Leaf => {}
            Op::Linear { w, b, x, out, in_dim, out_dim } => {
                let Some(d) = take(adj, *out) else { return };
                let we = store.entry(*w);
                let xv = &self.bufs[*x];
                if !we.frozen {
                    for o in 0..*out_dim {
                        let g = d[o];
                        if g != 0.0 {
                            sink.accumulate_scaled_slice(*w, o * in_dim, xv, g);
                        }
                    }
                    if !store.entry(*b).frozen {
                        sink.accumulate_scaled_slice(*b, 0, &d, 1.0);
                    }
                }
                bump(adj, *x, |dx| {
                    for (o, row) in d.iter().zip(we.values.chunks_exact(*in_dim)) {
                        if *o == 0.0 {
                            continue;
                        }
                        for (dxi, wi) in dx.iter_mut().zip(row) {
                            *dxi += o * wi;
                        }
                    }
                }, *in_dim);
            }
            Op::Relu { x, out } => {
                let Some(d) = take(adj, *out) else { return };
                let xv = &self.bufs[*x];
                bump(adj, *x, |dx| {
                    for ((dxi, di), xi) in dx.iter_mut().zip(&d).zip(xv) {
                        if *xi > 0.0 {
                            *dxi += di;
                        }
                    }
                }, xv.len());
            }
            Op::Sigmoid { x, out } => {
                let Some(d) = take(adj, *out) else { return };
                let yv = &self.bufs[*out];
                bump(adj, *x, |dx| {
                    for ((dxi, di), yi) in dx.iter_mut().zip(&d).zip(yv) {
                        *dxi += di * yi * (1.0 - yi);
                    }
                }, yv.len());
            }
            Op::Softplus { x, out } => {
                let Some(d) = take(adj, *out) else { return };
                let xv = &self.bufs[*x];
                bump(adj, *x, |dx| {
                    for ((dxi, di), xi) in dx.iter_mut().zip(&d).zip(xv) {
                        *dxi += di * super::sigmoid(*xi);
                    }
                }, xv.len());
            }
            Op::AddScalar { x, out } => {
                let Some(d) = take(adj, *out) else { return };
                bump(adj, *x, |dx| {
                    for (dxi, di) in dx.iter_mut().zip(&d) {
                        *dxi += di;
                    }
                }, d.len());
            }
            Op::Scale { x, k, out } => {
                let Some(d) = take(adj, *out) else { return };
                bump(adj, *x, |dx| {
                    for (dxi, di) in dx.iter_mut().zip(&d) {
                        *dxi += k * di;
                    }
                }, d.len());
            }
            Op::Add { a, b, out } => {
                let Some(d) = take(adj, *out) else { return };
                let n = d.len();
                bump(adj, *a, |dx| {
                    for (dxi, di) in dx.iter_mut().zip(&d) {
                        *dxi += di;
                    }
                }, n);
                bump(adj, *b, |dx| {
                    for (dxi, di) in dx.iter_mut().zip(&d) {
                        *dxi += di;
                    }
                }, n);
            }
            Op::Sub { a, b, out } => {
                let Some(d) = take(adj, *out) else { return };
                let n = d.len();
                bump(adj, *a, |dx| {
                    for (dxi, di) in dx.iter_mut().zip(&d) {
                        *dxi += di;
                    }
                }, n);
                bump(adj, *b, |dx| {
                    for (dxi, di) in dx.iter_mut().zip(&d) {
                        *dxi -= di;
                    }
                }, n);
            }
            Op::Mul { a, b, out } => {
                let Some(d) = take(adj, *out) else { return };
                let av = &self.bufs[*a];
                let bv = &self.bufs[*b];
                bump(adj, *a, |dx| {
                    for ((dxi, di), bi) in dx.iter_mut().zip(&d).zip(bv) {
                        *dxi += di * bi;
                    }
                }, av.len());
                bump(adj, *b, |dx| {
                    for ((dxi, di), ai) in dx.iter_mut().zip(&d).zip(av) {
                        *dxi += di * ai;
                    }
                }, av.len());
            }
            Op::Dot { a, b, out } => {
                let Some(d) = take(adj, *out) else { return };
                let g = d[0];
                let av = &self.bufs[*a];
                let bv = &self.bufs[*b];
                bump(adj, *a, |dx| {
                    for (dxi, bi) in dx.iter_mut().zip(bv) {
                        *dxi += g * bi;
                    }
                }, av.len());
                bump(adj, *b, |dx| {
                    for (dxi, ai) in dx.iter_mut().zip(av) {
                        *dxi += g * ai;
                    }
                }, av.len());
            }
            Op::Sum { x, out } => {
                let Some(d) = take(adj, *out) else { return };
                let g = d[0];
                let n = self.bufs[*x].len();
                bump(adj, *x, |dx| {
                    for dxi in dx.iter_mut() {
                        *dxi += g;
                    }
                }, n);
            }
            Op::SqDiffSum { a, target, out } => {
                let Some(d) = take(adj, *out) else { return };
                let g = d[0];
                let av = &self.bufs[*a];
                bump(adj, *a, |dx| {
                    for ((dxi, ai), ti) in dx.iter_mut().zip(av).zip(target) {
                        *dxi += g * 2.0 * (ai - ti);
                    }
                }, av.len());
            }
            Op::AbsDiffSum { a, target, out } => {
                let Some(d) = take(adj, *out) else { return };
                let g = d[0];
                let av = &self.bufs[*a];
                bump(adj, *a, |dx| {
                    for ((dxi, ai), ti) in dx.iter_mut().zip(av).zip(target) {
                        let diff = ai - ti;
                        if diff != 0.0 {
                            *dxi += g * diff.signum();
                        }
                    }
                }, av.len());
            }
            Op::SumScalars { parts, out } => {
                let Some(d) = take(adj, *out) else { return };
                let g = d[0];
                for &p in parts {
                    bump(adj, p, |dx| dx[0] += g, 1);
                }
            }
            Op::ConcatN { parts, out } => {
                let Some(d) = take(adj, *out) else { return };
                let mut off = 0;
                for &p in parts {
                    let n = self.bufs[p].len();
                    bump(adj, p, |dx| {
                        for (dxi, di) in dx.iter_mut().zip(&d[off..off + n]) {
                            *dxi += di;
                        }
                    }, n);
                    off += n;
                }
            }
            Op::Slice { x, offset, len, out } => {
                let Some(d) = take(adj, *out) else { return };
                let n = self.bufs[*x].len();
                let (offset, len) = (*offset, *len);
                bump(adj, *x, |dx| {
                    for (dxi, di) in dx[offset..offset + len].iter_mut().zip(&d) {
                        *dxi += di;
                    }
                }, n);
            }
            Op::Log1p { x, out } => {
                let Some(d) = take(adj, *out) else { return };
                let xv = &self.bufs[*x];
                bump(adj, *x, |dx| {
                    for ((dxi, di), xi) in dx.iter_mut().zip(&d).zip(xv) {
                        *dxi += di / (1.0 + xi);
                    }
                }, xv.len());
            }
            Op::Softmax { x, out } => {
                let Some(d) = take(adj, *out) else { return };
                let y = &self.bufs[*out];
                let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
                bump(adj, *x, |dx| {
                    for ((dxi, di), yi) in dx.iter_mut().zip(&d).zip(y) {
                        *dxi += yi * (di - dot);
                    }
                }, y.len());
            }
            Op::StopGrad { .. } => {}
            Op::GridGather { grid, corners, weights, channels, out } => {
                let Some(d) = take(adj, *out) else { return };
                if store.entry(*grid).frozen {
                    return;
                }
                for (idx, w) in corners.iter().zip(weights) {
                    if *w != 0.0 {
                        sink.accumulate_scaled_slice(*grid, *idx as usize * channels, &d, *w);
                    }
                }
            }
            Op::StackRows { rows, out, dim } => {
                let Some(d) = take(adj, *out) else { return };
                for (r, chunk) in rows.iter().zip(d.chunks_exact(*dim)) {
                    bump(adj, *r, |dx| {
                        for (dxi, di) in dx.iter_mut().zip(chunk) {
                            *dxi += di;
                        }
                    }, *dim);
                }
            }
            Op::MatVecRows { mat, v, out, rows, dim } => {
                let Some(d) = take(adj, *out) else { return };
                let vv = &self.bufs[*v];
                let mv = &self.bufs[*mat];
                bump(adj, *mat, |dm| {
                    for (i, di) in d.iter().enumerate() {
                        if *di == 0.0 {
                            continue;
                        }
                        for (dmi, vi) in dm[i * dim..(i + 1) * dim].iter_mut().zip(vv) {
                            *dmi += di * vi;
                        }
                    }
                }, rows * dim);
                bump(adj, *v, |dv| {
                    for (i, di) in d.iter().enumerate() {
                        if *di == 0.0 {
                            continue;
                        }
                        for (dvi, mi) in dv.iter_mut().zip(&mv[i * dim..(i + 1) * dim]) {
                            *dvi += di * mi;
                        }
                    }
                }, vv.len());
            }
            Op::WeightedRowSum { mat, w, out, rows, dim } => {
                let Some(d) = take(adj, *out) else { return };
                let wv = &self.bufs[*w];
                let mv = &self.bufs[*mat];
                bump(adj, *mat, |dm| {
                    for (i, wi) in wv.iter().enumerate() {
                        if *wi == 0.0 {
                            continue;
                        }
                        for (dmi, di) in dm[i * dim..(i + 1) * dim].iter_mut().zip(&d) {
                            *dmi += wi * di;
                        }
                    }
                }, rows * dim);
                bump(adj, *w, |dw| {
                    for (i, dwi) in dw.iter_mut().enumerate() {
                        let row = &mv[i * dim..(i + 1) * dim];
                        *dwi += row.iter().zip(&d).map(|(m, di)| m * di).sum::<f64>();
                    }
                }, *rows);
            }
            Op::Composite { sigma, payload, active, deltas, bg, out, dim, trans, exp_term } => {
                let Some(d) = take(adj, *out) else { return };
                let k = deltas.len();
                let pay = &self.bufs[*payload];

                // payload adjoint: w_i * d for each active row
                bump(adj, *payload, |dp| {
                    for (row, &i) in dp.chunks_exact_mut(*dim).zip(active) {
                        let i = i as usize;
                        let w = trans[i] * (1.0 - exp_term[i]);
                        for (dpi, di) in row.iter_mut().zip(&d) {
                            *dpi += w * di;
                        }
                    }
                }, pay.len());

                // sigma adjoint via reverse sweep with a suffix accumulator:
                // d out / d sigma_k = delta_k * (T_k e_k <p_k, d> - <suffix_k, d>)
                // where suffix_k = sum_{j>k active} w_j p_j + T_{K+1} bg.
                let mut suffix: Vec<f64> = bg.iter().map(|b| b * trans[k]).collect();
                let mut dsig = vec![0.0; k];
                let mut a_pos = active.len();
                for i in (0..k).rev() {
                    let mut own = 0.0;
                    let is_active = a_pos > 0 && active[a_pos - 1] as usize == i;
                    if is_active {
                        a_pos -= 1;
                        let row = &pay[a_pos * dim..(a_pos + 1) * dim];
                        let pd: f64 = row.iter().zip(&d).map(|(p, di)| p * di).sum();
                        own = trans[i] * exp_term[i] * pd;
                    }
                    let sd: f64 = suffix.iter().zip(&d).map(|(s, di)| s * di).sum();
                    dsig[i] = deltas[i] * (own - sd);
                    if is_active {
                        let w = trans[i] * (1.0 - exp_term[i]);
                        let row = &pay[a_pos * dim..(a_pos + 1) * dim];
                        for (s, p) in suffix.iter_mut().zip(row) {
                            *s += w * p;
                        }
                    }
                }
                bump(adj, *sigma, |dx| {
                    for (dxi, g) in dx.iter_mut().zip(&dsig) {
                        *dxi += g;
                    }
                }, k);
            }
            Op::Pad2d { x, out, ch, h, w, mode } => {
                let Some(d) = take(adj, *out) else { return };
                let (hp, wp) = (h + 2, w + 2);
                bump(adj, *x, |dx| {
                    for c in 0..*ch {
                        for i in 0..hp {
                            let si = pad_index(i, *h, *mode);
                            for j in 0..wp {
                                let sj = pad_index(j, *w, *mode);
                                dx[c * h * w + si * w + sj] += d[c * hp * wp + i * wp + j];
                            }
                        }
                    }
                }, ch * h * w);
            }
            Op::Conv2dValid { w, b, x, out, in_ch, out_ch, h, wd } => {
                let Some(d) = take(adj, *out) else { return };
                let (ho, wo) = (h - 2, wd - 2);
                let we = store.entry(*w);
                let frozen = we.frozen;
                let xv = &self.bufs[*x];

                if !frozen {
                    // weight and bias gradients
                    for o in 0..*out_ch {
                        let dplane = &d[o * ho * wo..(o + 1) * ho * wo];
                        let db: f64 = dplane.iter().sum();
                        sink.accumulate(*b, o, db);
                        for c in 0..*in_ch {
                            let sp = &xv[c * h * wd..(c + 1) * h * wd];
                            let kbase = (o * in_ch + c) * KERNEL * KERNEL;
                            for ka in 0..KERNEL {
                                for kb in 0..KERNEL {
                                    let mut acc = 0.0;
                                    for i in 0..ho {
                                        let drow = &dplane[i * wo..(i + 1) * wo];
                                        let srow = &sp[(i + ka) * wd + kb..(i + ka) * wd + kb + wo];
                                        for (dv, sv) in drow.iter().zip(srow) {
                                            acc += dv * sv;
                                        }
                                    }
                                    sink.accumulate(*w, kbase + ka * KERNEL + kb, acc);
                                }
                            }
                        }
                    }
                }

                let wvals = &we.values;
                bump(adj, *x, |dx| {
                    for o in 0..*out_ch {
                        let dplane = &d[o * ho * wo..(o + 1) * ho * wo];
                        for c in 0..*in_ch {
                            let kbase = (o * in_ch + c) * KERNEL * KERNEL;
                            let ker = &wvals[kbase..kbase + 9];
                            let dxp = &mut dx[c * h * wd..(c + 1) * h * wd];
                            for i in 0..ho {
                                let drow = &dplane[i * wo..(i + 1) * wo];
                                for ka in 0..KERNEL {
                                    let base = (i + ka) * wd;
                                    for kb in 0..KERNEL {
                                        let kw = ker[ka * KERNEL + kb];
                                        if kw == 0.0 {
                                            continue;
                                        }
                                        for (j, dv) in drow.iter().enumerate() {
                                            dxp[base + j + kb] += kw * dv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }, in_ch * h * wd);
            }
            Op::PixelGather { x, out, ch, h, w, u, v } => {
                let Some(d) = take(adj, *out) else { return };
                bump(adj, *x, |dx| {
                    for (c, di) in d.iter().enumerate() {
                        dx[c * h * w + v * w + u] += di;
                    }
                }, ch * h * w);
            }
        }
    }
}

fn pad_index(i: usize, n: usize, mode: PadMode) -> usize {
    // i indexes the padded axis [0, n+2); source index for pad width 1.
    match mode {
        PadMode::Reflect => {
            if i == 0 {
                1.min(n - 1)
            } else if i > n {
                n.saturating_sub(2)
            } else {
                i - 1
            }
        }
        PadMode::Circular => (i + n - 1) % n,
    }
}

/// Run forward-and-backward in one call, accumulating gradients into the
/// store's gradient buffers. Convenience for single-threaded callers.
pub fn backward_into_store(tape: &mut Tape, store: &mut ParamStore, loss: BufId) -> Result<()> {
    let mut grads = ChunkGrads::new(store);
    tape.backward(store, loss, &mut grads)?;
    grads.merge_into(store);
    Ok(())
}
