//! The forward-recording tape and its reverse sweep.
//!
//! Record methods validate shapes, run the forward kernel, and append an op;
//! [`Tape::backward`] walks the ops once in exact reverse order, accumulating
//! gradients into node buffers and the [`ParamStore`]. Intermediate node
//! buffers are freed as soon as their producing op has been processed, so
//! peak memory stays near the forward-pass footprint; leaf (input) nodes are
//! kept, and their gradients remain readable afterwards.
//!
//! Parameters must not change between recording and the backward sweep: the
//! sweep re-reads them (rather than caching copies) for the axis-equivariant
//! layers.

use super::loss::softmax2_ce;
use super::store::{ParamStore, ParamView};
use crate::channels::{self, Mask, RepChannels};
use crate::geometry::{Mat3, Vec3};
use crate::layers::{self, LayerError};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Handle to a value produced during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Handle to a registered per-event unit-axis buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisId(usize);

/// Handle to a registered slot-validity mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskId(usize);

/// Errors raised while recording or differentiating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeError {
    /// Operand or parameter extents disagree.
    Shape(&'static str),
    /// A registered jet axis is not unit length.
    NonUnitAxis,
    /// A class label outside {0, 1} at the given event index.
    InvalidLabel(usize),
    /// A particle class index out of range at (event, slot).
    InvalidClass(usize, usize),
    /// `backward` was called on an already-consumed tape.
    Consumed,
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::Shape(what) => write!(f, "shape mismatch: {what}"),
            TapeError::NonUnitAxis => write!(f, "jet axis is not unit length"),
            TapeError::InvalidLabel(b) => {
                write!(f, "label out of range at event {b}")
            }
            TapeError::InvalidClass(b, p) => {
                write!(f, "particle class out of range at event {b}, slot {p}")
            }
            TapeError::Consumed => write!(f, "tape already consumed by backward"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TapeError {}

impl From<LayerError> for TapeError {
    fn from(e: LayerError) -> Self {
        match e {
            LayerError::ShapeMismatch(w) => TapeError::Shape(w),
            LayerError::NonUnitAxis => TapeError::NonUnitAxis,
        }
    }
}

/// Parameter views for a per-representation affine layer; use
/// [`ParamView::EMPTY`] for representations the layer does not carry.
#[derive(Debug, Clone, Copy)]
pub struct AffineViews {
    /// Scalar weights `[f_out][f_in]`.
    pub ws: ParamView,
    /// Scalar bias `[f_out]`.
    pub bs: ParamView,
    /// Vector weights `[f_out][f_in]` (no bias exists for vectors).
    pub wv: ParamView,
    /// Tensor weights `[f_out][f_in]`.
    pub wt: ParamView,
    /// Tensor identity-coefficient bias `[f_out]`.
    pub bt: ParamView,
}

/// Parameter views for an axis-equivariant layer: `(a, b, phi)` triples per
/// vector connection and `(a1, b1, phi1, a2, b2, phi2)` per tensor connection.
#[derive(Debug, Clone, Copy)]
pub struct So2Views {
    pub pv: ParamView,
    pub pt: ParamView,
}

struct Node {
    value: Option<RepChannels>,
    grad: Option<RepChannels>,
}

enum Op {
    Affine {
        input: NodeId,
        output: NodeId,
        views: AffineViews,
    },
    So2Linear {
        input: NodeId,
        output: NodeId,
        axis: AxisId,
        views: So2Views,
    },
    Bilinear {
        input: NodeId,
        output: NodeId,
    },
    BilinearSv {
        input: NodeId,
        output: NodeId,
    },
    Activate {
        input: NodeId,
        output: NodeId,
    },
    MaskedPool {
        input: NodeId,
        output: NodeId,
        mask: MaskId,
    },
    Scale {
        input: NodeId,
        output: NodeId,
        factor: f64,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        output: NodeId,
    },
    Embed {
        output: NodeId,
        table: ParamView,
        classes: Vec<u8>,
        mask: MaskId,
        dim: usize,
    },
    Readout {
        input: NodeId,
        output: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        output: NodeId,
        labels: Vec<u8>,
        probs: Vec<f64>,
    },
}

/// The recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    axes: Vec<Vec<Vec3>>,
    masks: Vec<Mask>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), ops: Vec::new(), axes: Vec::new(), masks: Vec::new(), consumed: false }
    }

    fn guard(&self) -> Result<(), TapeError> {
        if self.consumed {
            Err(TapeError::Consumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: RepChannels) -> NodeId {
        self.nodes.push(Node { value: Some(value), grad: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers input features as a leaf node; leaves are never freed by
    /// `backward`, and their gradients are readable afterwards.
    pub fn input(&mut self, value: RepChannels) -> NodeId {
        self.push(value)
    }

    /// Registers one unit axis per event for the axis-equivariant layers.
    pub fn axis(&mut self, axes: Vec<Vec3>) -> Result<AxisId, TapeError> {
        for j in &axes {
            if crate::math::abs(j.norm() - 1.0) > layers::UNIT_AXIS_TOL {
                return Err(TapeError::NonUnitAxis);
            }
        }
        self.axes.push(axes);
        Ok(AxisId(self.axes.len() - 1))
    }

    /// Registers a slot-validity mask.
    pub fn mask(&mut self, m: Mask) -> MaskId {
        self.masks.push(m);
        MaskId(self.masks.len() - 1)
    }

    /// Value of a node; panics if the buffer was freed by `backward`.
    pub fn value(&self, id: NodeId) -> &RepChannels {
        self.nodes[id.0].value.as_ref().expect("node buffer freed by backward")
    }

    /// Gradient accumulated at a node (available for leaves after backward).
    pub fn node_grad(&self, id: NodeId) -> Option<&RepChannels> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Per-representation affine layer producing the given feature counts.
    pub fn affine(
        &mut self,
        store: &ParamStore,
        input: NodeId,
        out_fs: usize,
        out_fv: usize,
        out_ft: usize,
        views: AffineViews,
    ) -> Result<NodeId, TapeError> {
        self.guard()?;
        let x = self.value(input);
        let (fs, fv, ft) = (x.scalar_features(), x.vector_features(), x.tensor_features());
        if views.ws.len != out_fs * fs || views.bs.len != out_fs {
            return Err(TapeError::Shape("scalar affine parameters"));
        }
        if views.wv.len != out_fv * fv {
            return Err(TapeError::Shape("vector weight count"));
        }
        if views.wt.len != out_ft * ft || views.bt.len != out_ft {
            return Err(TapeError::Shape("tensor affine parameters"));
        }
        let mut out = RepChannels::zeros(x.batch(), x.slots(), out_fs, out_fv, out_ft);
        let ws = store.slice(views.ws);
        let bs = store.slice(views.bs);
        let wv = store.slice(views.wv);
        let wt = store.slice(views.wt);
        let bt = store.slice(views.bt);
        for b in 0..x.batch() {
            for p in 0..x.slots() {
                if out_fs > 0 {
                    let src = x.s_base(b, p);
                    let dst = out.s_base(b, p);
                    let (inp, outp) = (&x.scalars()[src..src + fs], dst);
                    let mut tmp = vec![0.0; out_fs];
                    layers::scalar_affine(ws, bs, inp, &mut tmp)?;
                    out.scalars_mut()[outp..outp + out_fs].copy_from_slice(&tmp);
                }
                if out_fv > 0 {
                    let src = x.v_base(b, p, 0);
                    let dst = out.v_base(b, p, 0);
                    let mut tmp = vec![0.0; 3 * out_fv];
                    layers::vector_linear(wv, &x.vectors()[src..src + 3 * fv], &mut tmp)?;
                    out.vectors_mut()[dst..dst + 3 * out_fv].copy_from_slice(&tmp);
                }
                if out_ft > 0 {
                    let src = x.t_base(b, p, 0);
                    let dst = out.t_base(b, p, 0);
                    let mut tmp = vec![0.0; 9 * out_ft];
                    layers::tensor_affine(wt, bt, &x.tensors()[src..src + 9 * ft], &mut tmp)?;
                    out.tensors_mut()[dst..dst + 9 * out_ft].copy_from_slice(&tmp);
                }
            }
        }
        let output = self.push(out);
        self.ops.push(Op::Affine { input, output, views });
        Ok(output)
    }

    /// Axis-equivariant linear layer: scalars pass through unchanged, vectors
    /// and tensors are mixed by per-connection axis-aligned maps built from
    /// the event's jet axis.
    pub fn so2_linear(
        &mut self,
        store: &ParamStore,
        input: NodeId,
        axis: AxisId,
        views: So2Views,
    ) -> Result<NodeId, TapeError> {
        self.guard()?;
        let x = self.value(input);
        let (fv, ft) = (x.vector_features(), x.tensor_features());
        if self.axes[axis.0].len() != x.batch() {
            return Err(TapeError::Shape("axis count vs batch"));
        }
        let out_fv = if fv == 0 {
            if !views.pv.is_empty() {
                return Err(TapeError::Shape("vector axis-layer parameters without vectors"));
            }
            0
        } else {
            if views.pv.len % (3 * fv) != 0 {
                return Err(TapeError::Shape("vector axis-layer parameter count"));
            }
            views.pv.len / (3 * fv)
        };
        let out_ft = if ft == 0 {
            if !views.pt.is_empty() {
                return Err(TapeError::Shape("tensor axis-layer parameters without tensors"));
            }
            0
        } else {
            if views.pt.len % (6 * ft) != 0 {
                return Err(TapeError::Shape("tensor axis-layer parameter count"));
            }
            views.pt.len / (6 * ft)
        };

        let pv = store.slice(views.pv);
        let pt = store.slice(views.pt);
        let trig_v = connection_trig(pv, 3);
        let trig_t = connection_trig(pt, 6);

        let mut out =
            RepChannels::zeros(x.batch(), x.slots(), x.scalar_features(), out_fv, out_ft);
        // Scalars are untouched by the axis layer.
        out.scalars_mut().copy_from_slice(x.scalars());

        let mut av = vec![Mat3::ZERO; out_fv * fv];
        let mut at = vec![Mat3::ZERO; out_ft * ft];
        let mut bt = vec![Mat3::ZERO; out_ft * ft];
        for b in 0..x.batch() {
            let j = self.axes[axis.0][b];
            build_vector_mats(pv, &trig_v, j, &mut av);
            build_tensor_mats(pt, &trig_t, j, &mut at, &mut bt);
            for p in 0..x.slots() {
                for i in 0..out_fv {
                    let mut acc = Vec3::ZERO;
                    for jf in 0..fv {
                        acc = acc + av[i * fv + jf].mul_vec(x.vector(b, p, jf));
                    }
                    out.set_vector(b, p, i, acc);
                }
                for i in 0..out_ft {
                    let mut acc = Mat3::ZERO;
                    for jf in 0..ft {
                        let c = i * ft + jf;
                        acc = acc + at[c] * x.tensor(b, p, jf) * bt[c].transpose();
                    }
                    out.set_tensor(b, p, i, &acc);
                }
            }
        }
        let output = self.push(out);
        self.ops.push(Op::So2Linear { input, output, axis, views });
        Ok(output)
    }

    /// Full bilinear mixing; all three representations must carry the same
    /// even feature count `2F`, and each grows to `3F`.
    pub fn bilinear(&mut self, input: NodeId) -> Result<NodeId, TapeError> {
        self.guard()?;
        let x = self.value(input);
        let fs = x.scalar_features();
        if fs == 0 || fs % 2 != 0 {
            return Err(TapeError::Shape("feature count must be even"));
        }
        if x.vector_features() != fs || x.tensor_features() != fs {
            return Err(TapeError::Shape("representation feature counts differ"));
        }
        let f = fs / 2;
        let mut out = RepChannels::zeros(x.batch(), x.slots(), 3 * f, 3 * f, 3 * f);
        for b in 0..x.batch() {
            for p in 0..x.slots() {
                let (sb, vb, tb) = (x.s_base(b, p), x.v_base(b, p, 0), x.t_base(b, p, 0));
                let (os, ov, ot) =
                    (out.s_base(b, p), out.v_base(b, p, 0), out.t_base(b, p, 0));
                let mut ts = vec![0.0; 3 * f];
                let mut tv = vec![0.0; 9 * f];
                let mut tt = vec![0.0; 27 * f];
                layers::bilinear_mix(
                    &x.scalars()[sb..sb + fs],
                    &x.vectors()[vb..vb + 3 * fs],
                    &x.tensors()[tb..tb + 9 * fs],
                    &mut ts,
                    &mut tv,
                    &mut tt,
                )?;
                out.scalars_mut()[os..os + 3 * f].copy_from_slice(&ts);
                out.vectors_mut()[ov..ov + 9 * f].copy_from_slice(&tv);
                out.tensors_mut()[ot..ot + 27 * f].copy_from_slice(&tt);
            }
        }
        let output = self.push(out);
        self.ops.push(Op::Bilinear { input, output });
        Ok(output)
    }

    /// Bilinear mixing for channels without tensors (scalar and vector
    /// products only); both representations keep their `2F` width.
    pub fn bilinear_sv(&mut self, input: NodeId) -> Result<NodeId, TapeError> {
        self.guard()?;
        let x = self.value(input);
        let fs = x.scalar_features();
        if fs == 0 || fs % 2 != 0 {
            return Err(TapeError::Shape("feature count must be even"));
        }
        if x.vector_features() != fs {
            return Err(TapeError::Shape("representation feature counts differ"));
        }
        if x.tensor_features() != 0 {
            return Err(TapeError::Shape("tensor channels present"));
        }
        let mut out = RepChannels::zeros(x.batch(), x.slots(), fs, fs, 0);
        for b in 0..x.batch() {
            for p in 0..x.slots() {
                let (sb, vb) = (x.s_base(b, p), x.v_base(b, p, 0));
                let (os, ov) = (out.s_base(b, p), out.v_base(b, p, 0));
                let mut ts = vec![0.0; fs];
                let mut tv = vec![0.0; 3 * fs];
                layers::bilinear_mix_sv(
                    &x.scalars()[sb..sb + fs],
                    &x.vectors()[vb..vb + 3 * fs],
                    &mut ts,
                    &mut tv,
                )?;
                out.scalars_mut()[os..os + fs].copy_from_slice(&ts);
                out.vectors_mut()[ov..ov + 3 * fs].copy_from_slice(&tv);
            }
        }
        let output = self.push(out);
        self.ops.push(Op::BilinearSv { input, output });
        Ok(output)
    }

    /// Nonlinearity per representation: ReLU on scalars, unit-ball saturation
    /// on vector and tensor magnitudes.
    pub fn activate(&mut self, input: NodeId) -> Result<NodeId, TapeError> {
        self.guard()?;
        let x = self.value(input);
        let mut out = x.zeros_like();
        layers::scalar_relu(x.scalars(), out.scalars_mut());
        layers::vrelu(x.vectors(), out.vectors_mut());
        layers::trelu(x.tensors(), out.tensors_mut());
        let output = self.push(out);
        self.ops.push(Op::Activate { input, output });
        Ok(output)
    }

    /// Sum over valid particle slots, producing a single-slot batch.
    pub fn masked_pool(&mut self, input: NodeId, mask: MaskId) -> Result<NodeId, TapeError> {
        self.guard()?;
        let x = self.value(input);
        let out = channels::masked_sum_pool(x, &self.masks[mask.0])
            .map_err(|e| TapeError::Shape(e.what))?;
        let output = self.push(out);
        self.ops.push(Op::MaskedPool { input, output, mask });
        Ok(output)
    }

    /// Multiplies every feature in every channel by a fixed constant.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId, TapeError> {
        self.guard()?;
        let mut out = self.value(input).clone();
        for v in out.scalars_mut() {
            *v *= factor;
        }
        for v in out.vectors_mut() {
            *v *= factor;
        }
        for v in out.tensors_mut() {
            *v *= factor;
        }
        let output = self.push(out);
        self.ops.push(Op::Scale { input, output, factor });
        Ok(output)
    }

    /// Feature concatenation per representation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.guard()?;
        let out = channels::concat_features(self.value(a), self.value(b))
            .map_err(|e| TapeError::Shape(e.what))?;
        let output = self.push(out);
        self.ops.push(Op::Concat { a, b, output });
        Ok(output)
    }

    /// Trainable class embedding: scalar features `table[class]` per valid
    /// slot, zeros on padded slots. `classes` is `[batch][slots]` row-major;
    /// `table` holds `n_classes * dim` values.
    pub fn embed(
        &mut self,
        store: &ParamStore,
        table: ParamView,
        classes: &[u8],
        mask: MaskId,
        n_classes: usize,
        dim: usize,
    ) -> Result<NodeId, TapeError> {
        self.guard()?;
        let m = &self.masks[mask.0];
        let (batch, slots) = (m.batch(), m.slots());
        if classes.len() != batch * slots {
            return Err(TapeError::Shape("class array extent"));
        }
        if table.len != n_classes * dim {
            return Err(TapeError::Shape("embedding table extent"));
        }
        let tab = store.slice(table);
        let mut out = RepChannels::zeros(batch, slots, dim, 0, 0);
        for b in 0..batch {
            for p in 0..slots {
                if !m.get(b, p) {
                    continue;
                }
                let class = classes[b * slots + p] as usize;
                if class >= n_classes {
                    return Err(TapeError::InvalidClass(b, p));
                }
                for f in 0..dim {
                    out.set_scalar(b, p, f, tab[class * dim + f]);
                }
            }
        }
        let output = self.push(out);
        self.ops.push(Op::Embed {
            output,
            table,
            classes: classes.to_vec(),
            mask,
            dim,
        });
        Ok(output)
    }

    /// Rotation-invariant readout of pooled channels: raw scalars, `|v|^2`
    /// per vector feature, squared Frobenius norm per tensor feature.
    pub fn invariant_readout(&mut self, input: NodeId) -> Result<NodeId, TapeError> {
        self.guard()?;
        let x = self.value(input);
        if x.slots() != 1 {
            return Err(TapeError::Shape("readout expects pooled (single-slot) channels"));
        }
        let (fs, fv, ft) = (x.scalar_features(), x.vector_features(), x.tensor_features());
        let mut out = RepChannels::zeros(x.batch(), 1, fs + fv + ft, 0, 0);
        for b in 0..x.batch() {
            for f in 0..fs {
                out.set_scalar(b, 0, f, x.scalar(b, 0, f));
            }
            for f in 0..fv {
                out.set_scalar(b, 0, fs + f, x.vector(b, 0, f).norm_squared());
            }
            for f in 0..ft {
                let t = x.tensor(b, 0, f);
                out.set_scalar(b, 0, fs + fv + f, t.frobenius_dot(&t));
            }
        }
        let output = self.push(out);
        self.ops.push(Op::Readout { input, output });
        Ok(output)
    }

    /// Mean two-class cross-entropy over the batch; `logits` must be pooled
    /// scalar channels with exactly two features.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId, TapeError> {
        self.guard()?;
        let x = self.value(logits);
        if x.slots() != 1
            || x.scalar_features() != 2
            || x.vector_features() != 0
            || x.tensor_features() != 0
        {
            return Err(TapeError::Shape("logits must be two pooled scalars"));
        }
        if labels.len() != x.batch() || labels.is_empty() {
            return Err(TapeError::Shape("label count vs batch"));
        }
        let mut probs = vec![0.0; 2 * labels.len()];
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            if label > 1 {
                return Err(TapeError::InvalidLabel(b));
            }
            let (l, p0, p1) = softmax2_ce(x.scalar(b, 0, 0), x.scalar(b, 0, 1), label);
            probs[2 * b] = p0;
            probs[2 * b + 1] = p1;
            total += l;
        }
        let mut out = RepChannels::zeros(1, 1, 1, 0, 0);
        out.set_scalar(0, 0, 0, total / labels.len() as f64);
        let output = self.push(out);
        self.ops.push(Op::CrossEntropy {
            logits,
            output,
            labels: labels.to_vec(),
            probs,
        });
        Ok(output)
    }

    /// Reverse sweep: seeds `d loss = loss_grad` at the given single-scalar
    /// node, then accumulates parameter gradients into `store.grads` and
    /// input gradients into the leaf nodes. Consumes the tape; a second call
    /// fails.
    pub fn backward(
        &mut self,
        store: &mut ParamStore,
        loss: NodeId,
        loss_grad: f64,
    ) -> Result<(), TapeError> {
        self.guard()?;
        self.consumed = true;
        {
            let v = self.value(loss);
            if v.batch() * v.slots() * v.scalar_features() != 1
                || v.vector_features() != 0
                || v.tensor_features() != 0
            {
                return Err(TapeError::Shape("loss node must hold one scalar"));
            }
        }
        let mut seed = RepChannels::zeros(1, 1, 1, 0, 0);
        seed.set_scalar(0, 0, 0, loss_grad);
        self.nodes[loss.0].grad = Some(seed);

        let Tape { nodes, ops, axes, masks, .. } = self;
        for op in ops.iter().rev() {
            match op {
                Op::Affine { input, output, views } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_affine(nodes, store, *input, &g, *views);
                    }
                }
                Op::So2Linear { input, output, axis, views } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_so2(nodes, store, *input, &g, &axes[axis.0], *views);
                    }
                }
                Op::Bilinear { input, output } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_bilinear(nodes, *input, &g);
                    }
                }
                Op::BilinearSv { input, output } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_bilinear_sv(nodes, *input, &g);
                    }
                }
                Op::Activate { input, output } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_activate(nodes, *input, &g);
                    }
                }
                Op::MaskedPool { input, output, mask } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_pool(nodes, *input, &g, &masks[mask.0]);
                    }
                }
                Op::Scale { input, output, factor } => {
                    if let Some(g) = free_output(nodes, *output) {
                        let (_, gx) = value_and_grad(nodes, *input);
                        for (dst, src) in gx.scalars_mut().iter_mut().zip(g.scalars()) {
                            *dst += factor * src;
                        }
                        for (dst, src) in gx.vectors_mut().iter_mut().zip(g.vectors()) {
                            *dst += factor * src;
                        }
                        for (dst, src) in gx.tensors_mut().iter_mut().zip(g.tensors()) {
                            *dst += factor * src;
                        }
                    }
                }
                Op::Concat { a, b, output } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_concat(nodes, *a, *b, &g);
                    }
                }
                Op::Embed { output, table, classes, mask, dim } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_embed(store, &g, *table, classes, &masks[mask.0], *dim);
                    }
                }
                Op::Readout { input, output } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_readout(nodes, *input, &g);
                    }
                }
                Op::CrossEntropy { logits, output, labels, probs } => {
                    if let Some(g) = free_output(nodes, *output) {
                        backward_cross_entropy(nodes, *logits, &g, labels, probs);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Takes the output node's gradient (if any flowed) and frees its value.
fn free_output(nodes: &mut [Node], id: NodeId) -> Option<RepChannels> {
    let node = &mut nodes[id.0];
    node.value = None;
    node.grad.take()
}

/// Input node's value plus its (lazily created) gradient buffer.
fn value_and_grad(nodes: &mut [Node], id: NodeId) -> (&RepChannels, &mut RepChannels) {
    let Node { value, grad, .. } = &mut nodes[id.0];
    let value = value.as_ref().expect("input value retained until producer runs");
    let grad = grad.get_or_insert_with(|| value.zeros_like());
    (value, grad)
}

/// Per-connection `(sin, cos)` of the axial angle; `stride` is the parameter
/// count per connection with the angle in the given position(s).
fn connection_trig(params: &[f64], stride: usize) -> Vec<(f64, f64)> {
    let n = params.len() / stride;
    let per = stride / 3; // 1 for vectors, 2 for tensors
    let mut trig = Vec::with_capacity(n * per);
    for c in 0..n {
        for k in 0..per {
            let phi = params[c * stride + 3 * k + 2];
            trig.push((crate::math::sin(phi), crate::math::cos(phi)));
        }
    }
    trig
}

fn build_vector_mats(params: &[f64], trig: &[(f64, f64)], j: Vec3, out: &mut [Mat3]) {
    for (c, m) in out.iter_mut().enumerate() {
        let p = &params[c * 3..];
        let (s, co) = trig[c];
        *m = layers::so2_matrix_with_trig(p[0], p[1], s, co, j);
    }
}

fn build_tensor_mats(
    params: &[f64],
    trig: &[(f64, f64)],
    j: Vec3,
    out_a: &mut [Mat3],
    out_b: &mut [Mat3],
) {
    for c in 0..out_a.len() {
        let p = &params[c * 6..];
        let (s1, c1) = trig[2 * c];
        let (s2, c2) = trig[2 * c + 1];
        out_a[c] = layers::so2_matrix_with_trig(p[0], p[1], s1, c1, j);
        out_b[c] = layers::so2_matrix_with_trig(p[3], p[4], s2, c2, j);
    }
}

fn backward_affine(
    nodes: &mut [Node],
    store: &mut ParamStore,
    input: NodeId,
    g: &RepChannels,
    views: AffineViews,
) {
    let (x, gx) = value_and_grad(nodes, input);
    let (fs, fv, ft) = (x.scalar_features(), x.vector_features(), x.tensor_features());
    let (out_fs, out_fv, out_ft) =
        (g.scalar_features(), g.vector_features(), g.tensor_features());
    // Copy weights out so parameter gradients can be written while reading.
    let ws: Vec<f64> = store.slice(views.ws).to_vec();
    let wv: Vec<f64> = store.slice(views.wv).to_vec();
    let wt: Vec<f64> = store.slice(views.wt).to_vec();
    for b in 0..x.batch() {
        for p in 0..x.slots() {
            if out_fs > 0 {
                let xs = x.s_base(b, p);
                let gs = g.s_base(b, p);
                for i in 0..out_fs {
                    let gi = g.scalars()[gs + i];
                    store.grad_slice_mut(views.bs)[i] += gi;
                    let gw = &mut store.grad_slice_mut(views.ws)[i * fs..(i + 1) * fs];
                    for jf in 0..fs {
                        gw[jf] += gi * x.scalars()[xs + jf];
                        gx.scalars_mut()[xs + jf] += ws[i * fs + jf] * gi;
                    }
                }
            }
            if out_fv > 0 {
                for i in 0..out_fv {
                    let gv = g.vector(b, p, i);
                    let gwrow = &mut store.grad_slice_mut(views.wv)[i * fv..(i + 1) * fv];
                    for jf in 0..fv {
                        gwrow[jf] += gv.dot(x.vector(b, p, jf));
                        let base = x.v_base(b, p, jf);
                        let w = wv[i * fv + jf];
                        gx.vectors_mut()[base] += w * gv.x;
                        gx.vectors_mut()[base + 1] += w * gv.y;
                        gx.vectors_mut()[base + 2] += w * gv.z;
                    }
                }
            }
            if out_ft > 0 {
                for i in 0..out_ft {
                    let gt = g.tensor(b, p, i);
                    store.grad_slice_mut(views.bt)[i] += gt.trace();
                    let gwrow = &mut store.grad_slice_mut(views.wt)[i * ft..(i + 1) * ft];
                    for jf in 0..ft {
                        gwrow[jf] += gt.frobenius_dot(&x.tensor(b, p, jf));
                        let base = x.t_base(b, p, jf);
                        let w = wt[i * ft + jf];
                        for k in 0..9 {
                            gx.tensors_mut()[base + k] += w * gt.e[k];
                        }
                    }
                }
            }
        }
    }
}

fn backward_so2(
    nodes: &mut [Node],
    store: &mut ParamStore,
    input: NodeId,
    g: &RepChannels,
    axes: &[Vec3],
    views: So2Views,
) {
    let (x, gx) = value_and_grad(nodes, input);
    let (fv, ft) = (x.vector_features(), x.tensor_features());
    let (out_fv, out_ft) = (g.vector_features(), g.tensor_features());

    // Scalars passed through unchanged.
    for (dst, src) in gx.scalars_mut().iter_mut().zip(g.scalars()) {
        *dst += src;
    }

    let pv: Vec<f64> = store.slice(views.pv).to_vec();
    let pt: Vec<f64> = store.slice(views.pt).to_vec();
    let trig_v = connection_trig(&pv, 3);
    let trig_t = connection_trig(&pt, 6);

    let mut av = vec![Mat3::ZERO; out_fv * fv];
    let mut at = vec![Mat3::ZERO; out_ft * ft];
    let mut btm = vec![Mat3::ZERO; out_ft * ft];

    for b in 0..x.batch() {
        let j = axes[b];
        let jj = j.outer(j);
        let k_j = Mat3::cross_matrix(j);
        build_vector_mats(&pv, &trig_v, j, &mut av);
        build_tensor_mats(&pt, &trig_t, j, &mut at, &mut btm);
        for p in 0..x.slots() {
            for i in 0..out_fv {
                let gv = g.vector(b, p, i);
                let g_dot_j = gv.dot(j);
                for jf in 0..fv {
                    let c = i * fv + jf;
                    let prm = &pv[c * 3..];
                    let (sin_phi, cos_phi) = trig_v[c];
                    let v = x.vector(b, p, jf);
                    // Input gradient: A^T g.
                    let a = &av[c];
                    let atg = a.transpose().mul_vec(gv);
                    let base = x.v_base(b, p, jf);
                    gx.vectors_mut()[base] += atg.x;
                    gx.vectors_mut()[base + 1] += atg.y;
                    gx.vectors_mut()[base + 2] += atg.z;
                    // Parameter gradients. With A = M R and M = b I + (a-b) jj^T:
                    // dA/da = jj^T (R fixes j), dA/db = R - jj^T, dA/dphi = M K R.
                    let u = rotate_about(v, j, sin_phi, cos_phi); // R(phi) v
                    let axial = g_dot_j * v.dot(j);
                    let gp = store.grad_slice_mut(views.pv);
                    gp[c * 3] += axial;
                    gp[c * 3 + 1] += gv.dot(u) - axial;
                    let m_ku = j.cross(u) * prm[1] + j * ((prm[0] - prm[1]) * j.dot(j.cross(u)));
                    gp[c * 3 + 2] += gv.dot(m_ku);
                }
            }
            for i in 0..out_ft {
                let gt = g.tensor(b, p, i);
                for jf in 0..ft {
                    let c = i * ft + jf;
                    let prm = &pt[c * 6..];
                    let t = x.tensor(b, p, jf);
                    let a = &at[c];
                    let bb = &btm[c];
                    // Input gradient: A^T G B.
                    let contrib = a.transpose() * gt * *bb;
                    let base = x.t_base(b, p, jf);
                    for k in 0..9 {
                        gx.tensors_mut()[base + k] += contrib.e[k];
                    }
                    // Left-factor parameters (A side), with W = T B^T:
                    // da1 = <G, jj^T W>, db1 = <G, R1 W> - da1,
                    // dphi1 = <G, M1 K R1 W>.
                    let (s1, c1) = trig_t[2 * c];
                    let (s2, c2) = trig_t[2 * c + 1];
                    let r1 = rotation_mat(j, s1, c1);
                    let r2 = rotation_mat(j, s2, c2);
                    let m1 = Mat3::IDENTITY * prm[1] + jj * (prm[0] - prm[1]);
                    let m2 = Mat3::IDENTITY * prm[4] + jj * (prm[3] - prm[4]);
                    let w = t * bb.transpose();
                    let gp = store.grad_slice_mut(views.pt);
                    let da1 = gt.transpose().mul_vec(j).dot(w.transpose().mul_vec(j));
                    gp[c * 6] += da1;
                    gp[c * 6 + 1] += gt.frobenius_dot(&(r1 * w)) - da1;
                    gp[c * 6 + 2] += gt.frobenius_dot(&(m1 * k_j * r1 * w));
                    // Right-factor parameters (B side), with U = A T:
                    // da2 = (U j).(G j), db2 = <G, U R2^T> - da2,
                    // dphi2 = <G (M2 K R2), U>.
                    let u = *a * t;
                    let da2 = u.mul_vec(j).dot(gt.mul_vec(j));
                    gp[c * 6 + 3] += da2;
                    gp[c * 6 + 4] += gt.frobenius_dot(&(u * r2.transpose())) - da2;
                    gp[c * 6 + 5] += (gt * (m2 * k_j * r2)).frobenius_dot(&u);
                }
            }
        }
    }
}

/// Rodrigues rotation of `v` about unit axis `j` with given angle sines.
fn rotate_about(v: Vec3, j: Vec3, sin_phi: f64, cos_phi: f64) -> Vec3 {
    v * cos_phi + j.cross(v) * sin_phi + j * (j.dot(v) * (1.0 - cos_phi))
}

fn rotation_mat(j: Vec3, sin_phi: f64, cos_phi: f64) -> Mat3 {
    let k = Mat3::cross_matrix(j);
    Mat3::IDENTITY + k * sin_phi + (k * k) * (1.0 - cos_phi)
}

fn backward_bilinear(nodes: &mut [Node], input: NodeId, g: &RepChannels) {
    let (x, gx) = value_and_grad(nodes, input);
    let f = x.scalar_features() / 2;
    for b in 0..x.batch() {
        for p in 0..x.slots() {
            for i in 0..f {
                let ia = i;
                let ib = f + i;
                let (sa, sb) = (x.scalar(b, p, ia), x.scalar(b, p, ib));
                let va = x.vector(b, p, ia);
                let vb = x.vector(b, p, ib);
                let ta = x.tensor(b, p, ia);
                let tb = x.tensor(b, p, ib);

                let mut d_sa = 0.0;
                let mut d_sb = 0.0;
                let mut d_va = Vec3::ZERO;
                let mut d_vb = Vec3::ZERO;
                let mut d_ta = Mat3::ZERO;
                let mut d_tb = Mat3::ZERO;

                // Scalar outputs: s_a s_b, v_a . v_b, <T_a, T_b>.
                let gs = g.scalar(b, p, i);
                d_sa += gs * sb;
                d_sb += gs * sa;
                let gs = g.scalar(b, p, f + i);
                d_va = d_va + vb * gs;
                d_vb = d_vb + va * gs;
                let gs = g.scalar(b, p, 2 * f + i);
                d_ta = d_ta + tb * gs;
                d_tb = d_tb + ta * gs;

                // Vector outputs: s_a v_b, v_a x v_b, T_a v_b.
                let gv = g.vector(b, p, i);
                d_sa += gv.dot(vb);
                d_vb = d_vb + gv * sa;
                let gv = g.vector(b, p, f + i);
                d_va = d_va + vb.cross(gv);
                d_vb = d_vb + gv.cross(va);
                let gv = g.vector(b, p, 2 * f + i);
                d_ta = d_ta + gv.outer(vb);
                d_vb = d_vb + ta.transpose().mul_vec(gv);

                // Tensor outputs: s_a T_b, v_a v_b^T, T_a T_b.
                let gt = g.tensor(b, p, i);
                d_sa += gt.frobenius_dot(&tb);
                d_tb = d_tb + gt * sa;
                let gt = g.tensor(b, p, f + i);
                d_va = d_va + gt.mul_vec(vb);
                d_vb = d_vb + gt.transpose().mul_vec(va);
                let gt = g.tensor(b, p, 2 * f + i);
                d_ta = d_ta + gt * tb.transpose();
                d_tb = d_tb + ta.transpose() * gt;

                accumulate_half(gx, b, p, ia, d_sa, d_va, &d_ta);
                accumulate_half(gx, b, p, ib, d_sb, d_vb, &d_tb);
            }
        }
    }
}

fn backward_bilinear_sv(nodes: &mut [Node], input: NodeId, g: &RepChannels) {
    let (x, gx) = value_and_grad(nodes, input);
    let f = x.scalar_features() / 2;
    for b in 0..x.batch() {
        for p in 0..x.slots() {
            for i in 0..f {
                let ia = i;
                let ib = f + i;
                let (sa, sb) = (x.scalar(b, p, ia), x.scalar(b, p, ib));
                let va = x.vector(b, p, ia);
                let vb = x.vector(b, p, ib);

                let mut d_sa = 0.0;
                let mut d_sb = 0.0;
                let mut d_va = Vec3::ZERO;
                let mut d_vb = Vec3::ZERO;

                let gs = g.scalar(b, p, i);
                d_sa += gs * sb;
                d_sb += gs * sa;
                let gs = g.scalar(b, p, f + i);
                d_va = d_va + vb * gs;
                d_vb = d_vb + va * gs;

                let gv = g.vector(b, p, i);
                d_sa += gv.dot(vb);
                d_vb = d_vb + gv * sa;
                let gv = g.vector(b, p, f + i);
                d_va = d_va + vb.cross(gv);
                d_vb = d_vb + gv.cross(va);

                accumulate_half(gx, b, p, ia, d_sa, d_va, &Mat3::ZERO);
                accumulate_half(gx, b, p, ib, d_sb, d_vb, &Mat3::ZERO);
            }
        }
    }
}

fn accumulate_half(
    gx: &mut RepChannels,
    b: usize,
    p: usize,
    feat: usize,
    ds: f64,
    dv: Vec3,
    dt: &Mat3,
) {
    let si = gx.s_base(b, p) + feat;
    gx.scalars_mut()[si] += ds;
    let vi = gx.v_base(b, p, feat);
    gx.vectors_mut()[vi] += dv.x;
    gx.vectors_mut()[vi + 1] += dv.y;
    gx.vectors_mut()[vi + 2] += dv.z;
    if gx.tensor_features() > 0 {
        let ti = gx.t_base(b, p, feat);
        for k in 0..9 {
            gx.tensors_mut()[ti + k] += dt.e[k];
        }
    }
}

fn backward_activate(nodes: &mut [Node], input: NodeId, g: &RepChannels) {
    let (x, gx) = value_and_grad(nodes, input);
    // Scalars: pass gradient on the active side; the kink at exactly zero
    // uses the linear branch.
    for (i, (dst, &src)) in gx.scalars_mut().iter_mut().zip(g.scalars()).enumerate() {
        if x.scalars()[i] >= 0.0 {
            *dst += src;
        }
    }
    for b in 0..x.batch() {
        for p in 0..x.slots() {
            for f in 0..x.vector_features() {
                let v = x.vector(b, p, f);
                let gv = g.vector(b, p, f);
                let r = v.norm();
                let d = if r <= 1.0 {
                    gv
                } else {
                    // d(v/r) applied to g: g/r - v (v.g)/r^3.
                    gv * (1.0 / r) - v * (v.dot(gv) / (r * r * r))
                };
                let base = gx.v_base(b, p, f);
                gx.vectors_mut()[base] += d.x;
                gx.vectors_mut()[base + 1] += d.y;
                gx.vectors_mut()[base + 2] += d.z;
            }
            for f in 0..x.tensor_features() {
                let t = x.tensor(b, p, f);
                let gt = g.tensor(b, p, f);
                let n = t.frobenius_norm();
                let d = if n <= 1.0 {
                    gt
                } else {
                    gt * (1.0 / n) - t * (t.frobenius_dot(&gt) / (n * n * n))
                };
                let base = gx.t_base(b, p, f);
                for k in 0..9 {
                    gx.tensors_mut()[base + k] += d.e[k];
                }
            }
        }
    }
}

fn backward_pool(nodes: &mut [Node], input: NodeId, g: &RepChannels, m: &Mask) {
    let (x, gx) = value_and_grad(nodes, input);
    for b in 0..x.batch() {
        for p in 0..x.slots() {
            if !m.get(b, p) {
                continue;
            }
            let (dst, src) = (gx.s_base(b, p), g.s_base(b, 0));
            for f in 0..x.scalar_features() {
                gx.scalars_mut()[dst + f] += g.scalars()[src + f];
            }
            let (dst, src) = (gx.v_base(b, p, 0), g.v_base(b, 0, 0));
            for k in 0..3 * x.vector_features() {
                gx.vectors_mut()[dst + k] += g.vectors()[src + k];
            }
            let (dst, src) = (gx.t_base(b, p, 0), g.t_base(b, 0, 0));
            for k in 0..9 * x.tensor_features() {
                gx.tensors_mut()[dst + k] += g.tensors()[src + k];
            }
        }
    }
}

fn backward_concat(nodes: &mut [Node], a: NodeId, b: NodeId, g: &RepChannels) {
    for (which, id) in [(0usize, a), (1usize, b)] {
        // Feature offset of this operand inside the concatenated output.
        let (ofs_s, ofs_v, ofs_t) = if which == 0 {
            (0, 0, 0)
        } else {
            let first = nodes[a.0].value.as_ref().expect("value retained");
            (first.scalar_features(), first.vector_features(), first.tensor_features())
        };
        let (x, gx) = value_and_grad(nodes, id);
        for ib in 0..x.batch() {
            for p in 0..x.slots() {
                let dst = gx.s_base(ib, p);
                let src = g.s_base(ib, p) + ofs_s;
                for f in 0..x.scalar_features() {
                    gx.scalars_mut()[dst + f] += g.scalars()[src + f];
                }
                let dst = gx.v_base(ib, p, 0);
                let src = g.v_base(ib, p, ofs_v);
                for k in 0..3 * x.vector_features() {
                    gx.vectors_mut()[dst + k] += g.vectors()[src + k];
                }
                let dst = gx.t_base(ib, p, 0);
                let src = g.t_base(ib, p, ofs_t);
                for k in 0..9 * x.tensor_features() {
                    gx.tensors_mut()[dst + k] += g.tensors()[src + k];
                }
            }
        }
    }
}

fn backward_embed(
    store: &mut ParamStore,
    g: &RepChannels,
    table: ParamView,
    classes: &[u8],
    m: &Mask,
    dim: usize,
) {
    let gt = store.grad_slice_mut(table);
    for b in 0..g.batch() {
        for p in 0..g.slots() {
            if !m.get(b, p) {
                continue;
            }
            let class = classes[b * g.slots() + p] as usize;
            for f in 0..dim {
                gt[class * dim + f] += g.scalar(b, p, f);
            }
        }
    }
}

fn backward_readout(nodes: &mut [Node], input: NodeId, g: &RepChannels) {
    let (x, gx) = value_and_grad(nodes, input);
    let (fs, fv, ft) = (x.scalar_features(), x.vector_features(), x.tensor_features());
    for b in 0..x.batch() {
        for f in 0..fs {
            let i = gx.s_base(b, 0) + f;
            gx.scalars_mut()[i] += g.scalar(b, 0, f);
        }
        for f in 0..fv {
            let gs = g.scalar(b, 0, fs + f);
            let v = x.vector(b, 0, f);
            let base = gx.v_base(b, 0, f);
            gx.vectors_mut()[base] += 2.0 * gs * v.x;
            gx.vectors_mut()[base + 1] += 2.0 * gs * v.y;
            gx.vectors_mut()[base + 2] += 2.0 * gs * v.z;
        }
        for f in 0..ft {
            let gs = g.scalar(b, 0, fs + fv + f);
            let t = x.tensor(b, 0, f);
            let base = gx.t_base(b, 0, f);
            for k in 0..9 {
                gx.tensors_mut()[base + k] += 2.0 * gs * t.e[k];
            }
        }
    }
}

fn backward_cross_entropy(
    nodes: &mut [Node],
    logits: NodeId,
    g: &RepChannels,
    labels: &[u8],
    probs: &[f64],
) {
    let upstream = g.scalar(0, 0, 0);
    let scale = upstream / labels.len() as f64;
    let (_, gx) = value_and_grad(nodes, logits);
    for (b, &label) in labels.iter().enumerate() {
        for k in 0..2 {
            let onehot = if usize::from(label) == k { 1.0 } else { 0.0 };
            let i = gx.s_base(b, 0) + k;
            gx.scalars_mut()[i] += scale * (probs[2 * b + k] - onehot);
        }
    }
}
