//! Single-use reverse-mode tape (Wengert list) over dense buffers.
//!
//! A `Tape` owns every intermediate buffer of one forward pass. Ops validate
//! shapes, evaluate eagerly, and push a record; `backward` replays the records
//! in reverse, accumulating gradients for every buffer that (transitively)
//! depends on a watched input. Buffers are immutable once produced; a tape is
//! meant to be built, differentiated once, and dropped.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Handle to a buffer on one specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

struct Buf<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    needs_grad: bool,
}

impl<T: Element> Buf<T> {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

enum Op<T> {
    Conv2d { x: usize, w: usize, b: usize, y: usize, dims: ConvDims },
    Relu { x: usize, y: usize },
    Linear { x: usize, w: usize, b: usize, y: usize, m: usize, in_f: usize, out_f: usize },
    /// Contiguous slice [start, start+len) of dimension 1.
    NarrowDim1 { x: usize, y: usize, start: usize },
    Reshape { x: usize, y: usize },
    /// K tensors of shape [N, inner...] stacked into [N, K, inner...].
    StackDim1 { xs: Vec<usize>, y: usize },
    /// (a·W)·bᵀ for a:[Ka,D], b:[Kb,D] → [Ka,Kb].
    PairScores { a: usize, w: usize, b: usize, y: usize },
    /// Time-contrastive score table: row j·N+p holds slot j's scores of pair p
    /// against every candidate next frame q: a[p,j]ᵀ·W·b[q,j]. Shape [K·N, N].
    SaliencyScores { a: usize, w: usize, b: usize, y: usize },
    /// Slot-diversity score table: row p·K+j holds a[p,j]ᵀ·W·b[p,i] over i.
    /// Shape [N·K, K].
    DiversityScores { a: usize, w: usize, b: usize, y: usize },
    /// Per-row softmax cross-entropy against the row's target index.
    NceRows { z: usize, y: usize, targets: Vec<usize> },
    MeanAll { x: usize, y: usize },
    /// Mean squared difference; both operands may carry gradient.
    MseMean { p: usize, t: usize, y: usize },
    Add { a: usize, b: usize, y: usize },
    Scale { x: usize, y: usize, c: T },
}

pub struct Tape<T: Element> {
    bufs: Vec<Buf<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> ValueId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.bufs.push(Buf { data, shape, needs_grad });
        ValueId(self.bufs.len() - 1)
    }

    fn buf(&self, id: ValueId) -> Result<&Buf<T>> {
        self.bufs
            .get(id.0)
            .ok_or_else(|| Error::Argument(format!("value id {} is not on this tape", id.0)))
    }

    /// Records a leaf that will not receive a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> ValueId {
        self.push(t.data().to_vec(), t.shape().to_vec(), false)
    }

    pub fn constant_owned(&mut self, t: Tensor<T>) -> ValueId {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, false)
    }

    /// Records a leaf whose gradient is wanted (a parameter snapshot).
    pub fn watch(&mut self, t: &Tensor<T>) -> ValueId {
        self.push(t.data().to_vec(), t.shape().to_vec(), true)
    }

    pub fn shape(&self, id: ValueId) -> Result<&[usize]> {
        Ok(&self.buf(id)?.shape)
    }

    pub fn value(&self, id: ValueId) -> Result<&[T]> {
        Ok(&self.buf(id)?.data)
    }

    /// Value of a single-element buffer.
    pub fn value_scalar(&self, id: ValueId) -> Result<T> {
        let b = self.buf(id)?;
        if b.numel() != 1 {
            return Err(Error::dimension("value_scalar", "1 element", b.numel().to_string()));
        }
        Ok(b.data[0])
    }

    pub fn to_tensor(&self, id: ValueId) -> Result<Tensor<T>> {
        let b = self.buf(id)?;
        Tensor::new(b.shape.clone(), b.data.clone())
    }

    /// Gradient of the last `backward` pass w.r.t. a leaf, if it received one.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ---- forward ops ----

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId, stride: usize) -> Result<ValueId> {
        let dims = ConvDims::infer(
            &self.buf(x)?.shape,
            &self.buf(w)?.shape,
            &self.buf(b)?.shape,
            stride,
        )?;
        let mut out = vec![T::zero(); dims.n * dims.f * dims.oh * dims.ow];
        kernels::conv2d_forward(&dims, &self.buf(x)?.data, &self.buf(w)?.data, &self.buf(b)?.data, &mut out);
        let needs = self.needs_any(&[x, w, b]);
        let y = self.push(out, dims.out_shape(), needs);
        self.ops.push(Op::Conv2d { x: x.0, w: w.0, b: b.0, y: y.0, dims });
        Ok(y)
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let bx = self.buf(x)?;
        let out: Vec<T> = bx.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = bx.shape.clone();
        let needs = bx.needs_grad;
        let y = self.push(out, shape, needs);
        self.ops.push(Op::Relu { x: x.0, y: y.0 });
        Ok(y)
    }

    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (&self.buf(x)?.shape, &self.buf(w)?.shape, &self.buf(b)?.shape);
        let (m, in_f) = match xs[..] {
            [m, in_f] => (m, in_f),
            _ => return Err(Error::dimension("linear input", "[M,In]", format!("{xs:?}"))),
        };
        let out_f = match ws[..] {
            [wi, wo] if wi == in_f => wo,
            _ => {
                return Err(Error::dimension(
                    "linear weight",
                    format!("[{in_f},Out]"),
                    format!("{ws:?}"),
                ))
            }
        };
        if bs[..] != [out_f] {
            return Err(Error::dimension("linear bias", format!("[{out_f}]"), format!("{bs:?}")));
        }
        let mut out = vec![T::zero(); m * out_f];
        kernels::linear_forward(&self.buf(x)?.data, &self.buf(w)?.data, &self.buf(b)?.data, &mut out, m, in_f, out_f);
        let needs = self.needs_any(&[x, w, b]);
        let y = self.push(out, vec![m, out_f], needs);
        self.ops.push(Op::Linear { x: x.0, w: w.0, b: b.0, y: y.0, m, in_f, out_f });
        Ok(y)
    }

    pub fn narrow_dim1(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let bx = self.buf(x)?;
        if bx.shape.len() < 2 {
            return Err(Error::dimension("narrow_dim1", "rank ≥ 2", format!("{:?}", bx.shape)));
        }
        let (n, dim1) = (bx.shape[0], bx.shape[1]);
        if len == 0 || start + len > dim1 {
            return Err(Error::Argument(format!(
                "narrow_dim1 range {start}..{} out of extent {dim1}",
                start + len
            )));
        }
        let inner: usize = bx.shape[2..].iter().product();
        let mut out = vec![T::zero(); n * len * inner];
        for ni in 0..n {
            let src = &bx.data[(ni * dim1 + start) * inner..(ni * dim1 + start + len) * inner];
            out[ni * len * inner..(ni + 1) * len * inner].copy_from_slice(src);
        }
        let mut shape = bx.shape.clone();
        shape[1] = len;
        let needs = bx.needs_grad;
        let y = self.push(out, shape, needs);
        self.ops.push(Op::NarrowDim1 { x: x.0, y: y.0, start });
        Ok(y)
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let bx = self.buf(x)?;
        let numel: usize = shape.iter().product();
        if numel != bx.numel() {
            return Err(Error::dimension(
                "reshape",
                format!("{} elements", bx.numel()),
                format!("shape {shape:?}"),
            ));
        }
        let data = bx.data.clone();
        let needs = bx.needs_grad;
        let y = self.push(data, shape, needs);
        self.ops.push(Op::Reshape { x: x.0, y: y.0 });
        Ok(y)
    }

    /// Stacks K same-shape tensors [N, inner...] into [N, K, inner...].
    pub fn stack_dim1(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Argument("stack_dim1 needs at least one input".into()));
        }
        let first = self.buf(xs[0])?.shape.clone();
        if first.is_empty() {
            return Err(Error::dimension("stack_dim1", "rank ≥ 1", "rank 0"));
        }
        for &x in &xs[1..] {
            if self.buf(x)?.shape != first {
                return Err(Error::dimension(
                    "stack_dim1",
                    format!("{first:?}"),
                    format!("{:?}", self.buf(x)?.shape),
                ));
            }
        }
        let k = xs.len();
        let n = first[0];
        let inner: usize = first[1..].iter().product();
        let mut out = vec![T::zero(); n * k * inner];
        for (ki, &x) in xs.iter().enumerate() {
            let data = &self.buf(x)?.data;
            for ni in 0..n {
                out[(ni * k + ki) * inner..(ni * k + ki + 1) * inner]
                    .copy_from_slice(&data[ni * inner..(ni + 1) * inner]);
            }
        }
        let mut shape = vec![n, k];
        shape.extend_from_slice(&first[1..]);
        let needs = self.needs_any(xs);
        let y = self.push(out, shape, needs);
        self.ops.push(Op::StackDim1 { xs: xs.iter().map(|v| v.0).collect(), y: y.0 });
        Ok(y)
    }

    /// Score table (a·W)·bᵀ between two slot sets of one frame pair.
    pub fn pair_scores(&mut self, a: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sw, sb) = (&self.buf(a)?.shape, &self.buf(w)?.shape, &self.buf(b)?.shape);
        let (ka, d) = match sa[..] {
            [ka, d] => (ka, d),
            _ => return Err(Error::dimension("pair_scores a", "[Ka,D]", format!("{sa:?}"))),
        };
        if sw[..] != [d, d] {
            return Err(Error::dimension("pair_scores W", format!("[{d},{d}]"), format!("{sw:?}")));
        }
        let kb = match sb[..] {
            [kb, bd] if bd == d => kb,
            _ => return Err(Error::dimension("pair_scores b", format!("[Kb,{d}]"), format!("{sb:?}"))),
        };
        let mut proj = vec![T::zero(); ka * d];
        kernels::mm_nn(&mut proj, &self.buf(a)?.data, &self.buf(w)?.data, ka, d, d);
        let mut out = vec![T::zero(); ka * kb];
        kernels::mm_nt(&mut out, &proj, &self.buf(b)?.data, ka, d, kb);
        let needs = self.needs_any(&[a, w, b]);
        let y = self.push(out, vec![ka, kb], needs);
        self.ops.push(Op::PairScores { a: a.0, w: w.0, b: b.0, y: y.0 });
        Ok(y)
    }

    /// aᵀ·W·b for two vectors.
    pub fn bilinear(&mut self, a: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (da, db) = (self.buf(a)?.shape.clone(), self.buf(b)?.shape.clone());
        let d = match da[..] {
            [d] => d,
            _ => return Err(Error::dimension("bilinear a", "[D]", format!("{da:?}"))),
        };
        if db[..] != [d] {
            return Err(Error::dimension("bilinear b", format!("[{d}]"), format!("{db:?}")));
        }
        let a2 = self.reshape(a, vec![1, d])?;
        let b2 = self.reshape(b, vec![1, d])?;
        let s = self.pair_scores(a2, w, b2)?;
        self.reshape(s, vec![])
    }

    fn slot_shapes(&self, a: ValueId, w: ValueId, b: ValueId, ctx: &str) -> Result<(usize, usize, usize)> {
        let (sa, sw, sb) = (&self.buf(a)?.shape, &self.buf(w)?.shape, &self.buf(b)?.shape);
        let (n, k, d) = match sa[..] {
            [n, k, d] => (n, k, d),
            _ => return Err(Error::dimension(ctx, "[N,K,D]", format!("{sa:?}"))),
        };
        if sb[..] != [n, k, d] {
            return Err(Error::dimension(ctx, format!("[{n},{k},{d}]"), format!("{sb:?}")));
        }
        if sw[..] != [d, d] {
            return Err(Error::dimension(ctx, format!("W [{d},{d}]"), format!("{sw:?}")));
        }
        Ok((n, k, d))
    }

    /// Time-contrastive scores: slots_t [N,K,D] vs every candidate in
    /// slots_next [N,K,D] through W, slotwise. Output [K·N, N]; the row for
    /// (slot j, pair p) is j·N+p and its true class is column p.
    pub fn saliency_scores(&mut self, slots_t: ValueId, w: ValueId, slots_next: ValueId) -> Result<ValueId> {
        let (n, k, d) = self.slot_shapes(slots_t, w, slots_next, "saliency_scores")?;
        let (at, wd, an) = (&self.buf(slots_t)?.data, &self.buf(w)?.data, &self.buf(slots_next)?.data);
        let mut out = vec![T::zero(); k * n * n];
        let mut at_j = vec![T::zero(); n * d];
        let mut an_j = vec![T::zero(); n * d];
        let mut proj = vec![T::zero(); n * d];
        for j in 0..k {
            gather_slot(at, &mut at_j, n, k, d, j);
            gather_slot(an, &mut an_j, n, k, d, j);
            proj.fill(T::zero());
            kernels::mm_nn(&mut proj, &at_j, wd, n, d, d);
            let block = &mut out[j * n * n..(j + 1) * n * n];
            kernels::mm_nt(block, &proj, &an_j, n, d, n);
        }
        let needs = self.needs_any(&[slots_t, w, slots_next]);
        let y = self.push(out, vec![k * n, n], needs);
        self.ops.push(Op::SaliencyScores { a: slots_t.0, w: w.0, b: slots_next.0, y: y.0 });
        Ok(y)
    }

    /// Slot-diversity scores within each pair: row p·K+j holds slot j of the
    /// first frame scored against every slot i of the second frame. Output
    /// [N·K, K]; the true class of row p·K+j is column j.
    pub fn diversity_scores(&mut self, slots_t: ValueId, w: ValueId, slots_next: ValueId) -> Result<ValueId> {
        let (n, k, d) = self.slot_shapes(slots_t, w, slots_next, "diversity_scores")?;
        let (at, wd, an) = (&self.buf(slots_t)?.data, &self.buf(w)?.data, &self.buf(slots_next)?.data);
        let mut out = vec![T::zero(); n * k * k];
        let mut proj = vec![T::zero(); k * d];
        for p in 0..n {
            let at_p = &at[p * k * d..(p + 1) * k * d];
            let an_p = &an[p * k * d..(p + 1) * k * d];
            proj.fill(T::zero());
            kernels::mm_nn(&mut proj, at_p, wd, k, d, d);
            let block = &mut out[p * k * k..(p + 1) * k * k];
            kernels::mm_nt(block, &proj, an_p, k, d, k);
        }
        let needs = self.needs_any(&[slots_t, w, slots_next]);
        let y = self.push(out, vec![n * k, k], needs);
        self.ops.push(Op::DiversityScores { a: slots_t.0, w: w.0, b: slots_next.0, y: y.0 });
        Ok(y)
    }

    /// Per-row −log softmax(z)[target], via max-subtracted log-sum-exp.
    pub fn nce_rows(&mut self, z: ValueId, targets: Vec<usize>) -> Result<ValueId> {
        let bz = self.buf(z)?;
        let (r, c) = match bz.shape[..] {
            [r, c] => (r, c),
            _ => return Err(Error::dimension("nce_rows", "[R,C]", format!("{:?}", bz.shape))),
        };
        if targets.len() != r {
            return Err(Error::dimension("nce_rows targets", r.to_string(), targets.len().to_string()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Argument(format!("nce target {bad} out of range for {c} classes")));
        }
        let mut out = vec![T::zero(); r];
        for ri in 0..r {
            let row = &bz.data[ri * c..(ri + 1) * c];
            out[ri] = lse(row) - row[targets[ri]];
        }
        let needs = bz.needs_grad;
        let y = self.push(out, vec![r], needs);
        self.ops.push(Op::NceRows { z: z.0, y: y.0, targets });
        Ok(y)
    }

    /// Contrastive loss of one score vector against its target index.
    pub fn nce_loss(&mut self, scores: ValueId, target: usize) -> Result<ValueId> {
        let shape = self.buf(scores)?.shape.clone();
        let n = match shape[..] {
            [n] => n,
            _ => return Err(Error::dimension("nce_loss", "[n]", format!("{shape:?}"))),
        };
        if target >= n {
            return Err(Error::Argument(format!("nce target {target} out of range for {n} classes")));
        }
        let z = self.reshape(scores, vec![1, n])?;
        let rows = self.nce_rows(z, vec![target])?;
        self.reshape(rows, vec![])
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let bx = self.buf(x)?;
        let mut acc = T::zero();
        for &v in &bx.data {
            acc = acc + v;
        }
        let mean = acc / T::from_f64(bx.numel() as f64);
        let needs = bx.needs_grad;
        let y = self.push(vec![mean], vec![], needs);
        self.ops.push(Op::MeanAll { x: x.0, y: y.0 });
        Ok(y)
    }

    pub fn mse_mean(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId> {
        let (bp, bt) = (self.buf(pred)?, self.buf(target)?);
        if bp.shape != bt.shape {
            return Err(Error::dimension(
                "mse_mean",
                format!("{:?}", bp.shape),
                format!("{:?}", bt.shape),
            ));
        }
        let mut acc = T::zero();
        for (&p, &t) in bp.data.iter().zip(&bt.data) {
            let diff = p - t;
            acc = acc + diff * diff;
        }
        let mean = acc / T::from_f64(bp.numel() as f64);
        let needs = self.needs_any(&[pred, target]);
        let y = self.push(vec![mean], vec![], needs);
        self.ops.push(Op::MseMean { p: pred.0, t: target.0, y: y.0 });
        Ok(y)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ba, bb) = (self.buf(a)?, self.buf(b)?);
        if ba.shape != bb.shape {
            return Err(Error::dimension("add", format!("{:?}", ba.shape), format!("{:?}", bb.shape)));
        }
        let out: Vec<T> = ba.data.iter().zip(&bb.data).map(|(&x, &y)| x + y).collect();
        let shape = ba.shape.clone();
        let needs = self.needs_any(&[a, b]);
        let y = self.push(out, shape, needs);
        self.ops.push(Op::Add { a: a.0, b: b.0, y: y.0 });
        Ok(y)
    }

    pub fn scale(&mut self, x: ValueId, c: T) -> Result<ValueId> {
        let bx = self.buf(x)?;
        let out: Vec<T> = bx.data.iter().map(|&v| v * c).collect();
        let shape = bx.shape.clone();
        let needs = bx.needs_grad;
        let y = self.push(out, shape, needs);
        self.ops.push(Op::Scale { x: x.0, y: y.0, c });
        Ok(y)
    }

    fn needs_any(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|&id| self.bufs[id.0].needs_grad)
    }

    // ---- backward ----

    /// Reverse replay from a scalar loss. Gradients of watched leaves are
    /// readable through `grad` afterwards.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.buf(loss)?.numel() != 1 {
            return Err(Error::dimension(
                "backward",
                "scalar loss",
                format!("{:?}", self.buf(loss)?.shape),
            ));
        }
        self.grads = vec![None; self.bufs.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        let Tape { bufs, ops, grads } = self;
        for op in ops.iter().rev() {
            match op {
                Op::Conv2d { x, w, b, y, dims } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    let (need_x, need_w, need_b) =
                        (bufs[*x].needs_grad, bufs[*w].needs_grad, bufs[*b].needs_grad);
                    if !(need_x || need_w || need_b) {
                        continue;
                    }
                    let mut dk = vec![T::zero(); bufs[*w].numel()];
                    let mut dbias = vec![T::zero(); bufs[*b].numel()];
                    let mut dx = need_x.then(|| vec![T::zero(); bufs[*x].numel()]);
                    kernels::conv2d_backward(
                        dims,
                        &bufs[*x].data,
                        &bufs[*w].data,
                        &dy,
                        dx.as_deref_mut(),
                        &mut dk,
                        &mut dbias,
                    );
                    if need_w {
                        accumulate(grads, *w, &dk);
                    }
                    if need_b {
                        accumulate(grads, *b, &dbias);
                    }
                    if let Some(dx) = dx {
                        accumulate(grads, *x, &dx);
                    }
                }
                Op::Relu { x, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    if !bufs[*x].needs_grad {
                        continue;
                    }
                    let xd = &bufs[*x].data;
                    let g = grad_buf(grads, *x, xd.len());
                    for i in 0..xd.len() {
                        if xd[i] > T::zero() {
                            g[i] = g[i] + dy[i];
                        }
                    }
                }
                Op::Linear { x, w, b, y, m, in_f, out_f } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    let (need_x, need_w, need_b) =
                        (bufs[*x].needs_grad, bufs[*w].needs_grad, bufs[*b].needs_grad);
                    if !(need_x || need_w || need_b) {
                        continue;
                    }
                    let mut dw = vec![T::zero(); bufs[*w].numel()];
                    let mut db = vec![T::zero(); bufs[*b].numel()];
                    let mut dx = need_x.then(|| vec![T::zero(); bufs[*x].numel()]);
                    kernels::linear_backward(
                        &bufs[*x].data,
                        &bufs[*w].data,
                        &dy,
                        dx.as_deref_mut(),
                        &mut dw,
                        &mut db,
                        *m,
                        *in_f,
                        *out_f,
                    );
                    if need_w {
                        accumulate(grads, *w, &dw);
                    }
                    if need_b {
                        accumulate(grads, *b, &db);
                    }
                    if let Some(dx) = dx {
                        accumulate(grads, *x, &dx);
                    }
                }
                Op::NarrowDim1 { x, y, start } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    if !bufs[*x].needs_grad {
                        continue;
                    }
                    let xshape = &bufs[*x].shape;
                    let (n, dim1) = (xshape[0], xshape[1]);
                    let inner: usize = xshape[2..].iter().product();
                    let len = dy.len() / (n * inner);
                    let g = grad_buf(grads, *x, bufs[*x].numel());
                    for ni in 0..n {
                        let dst = &mut g[(ni * dim1 + start) * inner..(ni * dim1 + start + len) * inner];
                        let src = &dy[ni * len * inner..(ni + 1) * len * inner];
                        for i in 0..dst.len() {
                            dst[i] = dst[i] + src[i];
                        }
                    }
                }
                Op::Reshape { x, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    if !bufs[*x].needs_grad {
                        continue;
                    }
                    accumulate(grads, *x, &dy);
                }
                Op::StackDim1 { xs, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    let k = xs.len();
                    for (ki, &x) in xs.iter().enumerate() {
                        if !bufs[x].needs_grad {
                            continue;
                        }
                        let inner = bufs[x].numel() / bufs[x].shape[0];
                        let n = bufs[x].shape[0];
                        let g = grad_buf(grads, x, bufs[x].numel());
                        for ni in 0..n {
                            let src = &dy[(ni * k + ki) * inner..(ni * k + ki + 1) * inner];
                            let dst = &mut g[ni * inner..(ni + 1) * inner];
                            for i in 0..inner {
                                dst[i] = dst[i] + src[i];
                            }
                        }
                    }
                }
                Op::PairScores { a, w, b, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    let (ka, d) = (bufs[*a].shape[0], bufs[*a].shape[1]);
                    let kb = bufs[*b].shape[0];
                    let (ad, wd, bd) = (&bufs[*a].data, &bufs[*w].data, &bufs[*b].data);
                    // Recompute proj = a·W, then dProj = dY·b.
                    let mut proj = vec![T::zero(); ka * d];
                    kernels::mm_nn(&mut proj, ad, wd, ka, d, d);
                    let mut dproj = vec![T::zero(); ka * d];
                    kernels::mm_nn(&mut dproj, &dy, bd, ka, kb, d);
                    if bufs[*a].needs_grad {
                        let mut da = vec![T::zero(); ka * d];
                        kernels::mm_nt(&mut da, &dproj, wd, ka, d, d);
                        accumulate(grads, *a, &da);
                    }
                    if bufs[*w].needs_grad {
                        let mut dw = vec![T::zero(); d * d];
                        kernels::mm_tn(&mut dw, ad, &dproj, d, ka, d);
                        accumulate(grads, *w, &dw);
                    }
                    if bufs[*b].needs_grad {
                        let mut db = vec![T::zero(); kb * d];
                        kernels::mm_tn(&mut db, &dy, &proj, kb, ka, d);
                        accumulate(grads, *b, &db);
                    }
                }
                Op::SaliencyScores { a, w, b, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    let (n, k, d) = (bufs[*a].shape[0], bufs[*a].shape[1], bufs[*a].shape[2]);
                    let (ad, wd, bd) = (&bufs[*a].data, &bufs[*w].data, &bufs[*b].data);
                    let (need_a, need_w, need_b) =
                        (bufs[*a].needs_grad, bufs[*w].needs_grad, bufs[*b].needs_grad);
                    let mut da = need_a.then(|| vec![T::zero(); ad.len()]);
                    let mut dw = need_w.then(|| vec![T::zero(); d * d]);
                    let mut db = need_b.then(|| vec![T::zero(); bd.len()]);
                    let mut at_j = vec![T::zero(); n * d];
                    let mut an_j = vec![T::zero(); n * d];
                    let mut proj = vec![T::zero(); n * d];
                    let mut dproj = vec![T::zero(); n * d];
                    let mut tmp = vec![T::zero(); n * d];
                    for j in 0..k {
                        gather_slot(ad, &mut at_j, n, k, d, j);
                        gather_slot(bd, &mut an_j, n, k, d, j);
                        let g_j = &dy[j * n * n..(j + 1) * n * n];
                        proj.fill(T::zero());
                        kernels::mm_nn(&mut proj, &at_j, wd, n, d, d);
                        dproj.fill(T::zero());
                        kernels::mm_nn(&mut dproj, g_j, &an_j, n, n, d);
                        if let Some(da) = da.as_deref_mut() {
                            tmp.fill(T::zero());
                            kernels::mm_nt(&mut tmp, &dproj, wd, n, d, d);
                            scatter_slot_add(da, &tmp, n, k, d, j);
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            kernels::mm_tn(dw, &at_j, &dproj, d, n, d);
                        }
                        if let Some(db) = db.as_deref_mut() {
                            tmp.fill(T::zero());
                            kernels::mm_tn(&mut tmp, g_j, &proj, n, n, d);
                            scatter_slot_add(db, &tmp, n, k, d, j);
                        }
                    }
                    if let Some(da) = da {
                        accumulate(grads, *a, &da);
                    }
                    if let Some(dw) = dw {
                        accumulate(grads, *w, &dw);
                    }
                    if let Some(db) = db {
                        accumulate(grads, *b, &db);
                    }
                }
                Op::DiversityScores { a, w, b, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    let (n, k, d) = (bufs[*a].shape[0], bufs[*a].shape[1], bufs[*a].shape[2]);
                    let (ad, wd, bd) = (&bufs[*a].data, &bufs[*w].data, &bufs[*b].data);
                    let (need_a, need_w, need_b) =
                        (bufs[*a].needs_grad, bufs[*w].needs_grad, bufs[*b].needs_grad);
                    let mut da = need_a.then(|| vec![T::zero(); ad.len()]);
                    let mut dw = need_w.then(|| vec![T::zero(); d * d]);
                    let mut db = need_b.then(|| vec![T::zero(); bd.len()]);
                    let mut proj = vec![T::zero(); k * d];
                    let mut dproj = vec![T::zero(); k * d];
                    for p in 0..n {
                        let at_p = &ad[p * k * d..(p + 1) * k * d];
                        let an_p = &bd[p * k * d..(p + 1) * k * d];
                        let g_p = &dy[p * k * k..(p + 1) * k * k];
                        proj.fill(T::zero());
                        kernels::mm_nn(&mut proj, at_p, wd, k, d, d);
                        dproj.fill(T::zero());
                        kernels::mm_nn(&mut dproj, g_p, an_p, k, k, d);
                        if let Some(da) = da.as_deref_mut() {
                            kernels::mm_nt(&mut da[p * k * d..(p + 1) * k * d], &dproj, wd, k, d, d);
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            kernels::mm_tn(dw, at_p, &dproj, d, k, d);
                        }
                        if let Some(db) = db.as_deref_mut() {
                            kernels::mm_tn(&mut db[p * k * d..(p + 1) * k * d], g_p, &proj, k, k, d);
                        }
                    }
                    if let Some(da) = da {
                        accumulate(grads, *a, &da);
                    }
                    if let Some(dw) = dw {
                        accumulate(grads, *w, &dw);
                    }
                    if let Some(db) = db {
                        accumulate(grads, *b, &db);
                    }
                }
                Op::NceRows { z, y, targets } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    if !bufs[*z].needs_grad {
                        continue;
                    }
                    let c = bufs[*z].shape[1];
                    let zd = &bufs[*z].data;
                    let g = grad_buf(grads, *z, zd.len());
                    let mut sm = vec![T::zero(); c];
                    for (ri, (&gy, &t)) in dy.iter().zip(targets).enumerate() {
                        let row = &zd[ri * c..(ri + 1) * c];
                        softmax_into(row, &mut sm);
                        let grow = &mut g[ri * c..(ri + 1) * c];
                        for ci in 0..c {
                            let indicator = if ci == t { T::one() } else { T::zero() };
                            grow[ci] = grow[ci] + gy * (sm[ci] - indicator);
                        }
                    }
                }
                Op::MeanAll { x, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    if !bufs[*x].needs_grad {
                        continue;
                    }
                    let n = bufs[*x].numel();
                    let scale = dy[0] / T::from_f64(n as f64);
                    let g = grad_buf(grads, *x, n);
                    for v in g.iter_mut() {
                        *v = *v + scale;
                    }
                }
                Op::MseMean { p, t, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    let n = bufs[*p].numel();
                    let scale = dy[0] * T::from_f64(2.0 / n as f64);
                    if bufs[*p].needs_grad {
                        let diffs: Vec<T> = bufs[*p]
                            .data
                            .iter()
                            .zip(&bufs[*t].data)
                            .map(|(&a, &b)| scale * (a - b))
                            .collect();
                        accumulate(grads, *p, &diffs);
                    }
                    if bufs[*t].needs_grad {
                        let diffs: Vec<T> = bufs[*p]
                            .data
                            .iter()
                            .zip(&bufs[*t].data)
                            .map(|(&a, &b)| -scale * (a - b))
                            .collect();
                        accumulate(grads, *t, &diffs);
                    }
                }
                Op::Add { a, b, y } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    if bufs[*a].needs_grad {
                        accumulate(grads, *a, &dy);
                    }
                    if bufs[*b].needs_grad {
                        accumulate(grads, *b, &dy);
                    }
                }
                Op::Scale { x, y, c } => {
                    let Some(dy) = grads[*y].take() else { continue };
                    if !bufs[*x].needs_grad {
                        continue;
                    }
                    let scaled: Vec<T> = dy.iter().map(|&v| v * *c).collect();
                    accumulate(grads, *x, &scaled);
                }
            }
        }
        Ok(())
    }
}

/// Extracts slot j from [N,K,D] storage into a contiguous [N,D] matrix.
fn gather_slot<T: Element>(src: &[T], dst: &mut [T], n: usize, k: usize, d: usize, j: usize) {
    for p in 0..n {
        dst[p * d..(p + 1) * d].copy_from_slice(&src[(p * k + j) * d..(p * k + j + 1) * d]);
    }
}

/// Adds a contiguous [N,D] matrix back onto slot j of [N,K,D] storage.
fn scatter_slot_add<T: Element>(dst: &mut [T], src: &[T], n: usize, k: usize, d: usize, j: usize) {
    for p in 0..n {
        let out = &mut dst[(p * k + j) * d..(p * k + j + 1) * d];
        let inp = &src[p * d..(p + 1) * d];
        for i in 0..d {
            out[i] = out[i] + inp[i];
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], idx: usize, add: &[T]) {
    let g = grads[idx].get_or_insert_with(|| vec![T::zero(); add.len()]);
    for i in 0..add.len() {
        g[i] = g[i] + add[i];
    }
}

fn grad_buf<T: Element>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

/// Max-subtracted log-sum-exp of one row.
fn lse<T: Element>(row: &[T]) -> T {
    let mut m = row[0];
    for &v in &row[1..] {
        if v > m {
            m = v;
        }
    }
    let mut acc = T::zero();
    for &v in row {
        acc = acc + (v - m).exp();
    }
    m + acc.ln()
}

fn softmax_into<T: Element>(row: &[T], out: &mut [T]) {
    let mut m = row[0];
    for &v in &row[1..] {
        if v > m {
            m = v;
        }
    }
    let mut acc = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        acc = acc + e;
    }
    for o in out.iter_mut() {
        *o = *o / acc;
    }
}
