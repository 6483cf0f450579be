//! Particle-cloud classifier architectures over the representation channels.
//!
//! Two families share one permutation-invariant skeleton `F(sum_k Phi(x_k))`:
//! a scalar-only baseline operating on detector-style features, and an
//! equivariant family whose per-track features live in scalar / vector /
//! tensor channels, processed by affine, axis-equivariant, bilinear, and
//! norm-saturating layers, pooled, and collapsed to rotation invariants
//! before a scalar head. Parameters live in a flat [`ParamStore`] and every
//! forward pass records onto a [`Tape`] so the same code path serves
//! inference and training.

use crate::autodiff::{
    AffineViews, NodeId, ParamStore, ParamView, So2Views, Tape, TapeError,
};
use crate::channels::{Mask, RepChannels};
use crate::datagen::{JetEvent, MAX_TRACKS, N_PTYPES};
use crate::geometry::{Mat3, Vec3};
use crate::math;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Momenta are divided by this (GeV) before entering the network.
pub const MOMENTUM_SCALE_GEV: f64 = 100.0;
/// Impact vectors are divided by this (mm) before entering the network,
/// keeping products of input features well conditioned.
pub const IMPACT_SCALE_MM: f64 = 5.0;
/// Output dimension of the particle-class embedding.
pub const EMBED_DIM: usize = 3;
/// Scalar feature count of the baseline input (before the embedding).
const BASELINE_RAW_FEATURES: usize = 9;
/// Total baseline input features including the class embedding.
pub const BASELINE_INPUT_FEATURES: usize = BASELINE_RAW_FEATURES + EMBED_DIM;

/// Which architecture family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelClass {
    /// Scalar-only network on detector-style features.
    BaselinePfn,
    /// Scalar + vector channels.
    Vector,
    /// Scalar + vector + order-2 tensor channels.
    Tensor,
}

/// Architecture hyperparameters; `enable_bilinear` / `enable_so2` are
/// ignored by the baseline class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub class: ModelClass,
    pub enable_bilinear: bool,
    pub enable_so2: bool,
    /// Latent width of the pooled per-track summary.
    pub latent: usize,
    /// Width of scalar hidden layers.
    pub hidden: usize,
    /// Per-representation hidden width (must be even when bilinear mixing
    /// is enabled).
    pub rep_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            class: ModelClass::Tensor,
            enable_bilinear: true,
            enable_so2: true,
            latent: 64,
            hidden: 128,
            rep_width: 128,
            seed: 0,
        }
    }
}

/// Errors from model construction or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelError {
    /// Invalid configuration.
    Config(&'static str),
    /// Malformed event input.
    Event(&'static str),
    /// Failure inside the recording engine.
    Tape(TapeError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(w) => write!(f, "invalid model config: {w}"),
            ModelError::Event(w) => write!(f, "invalid event: {w}"),
            ModelError::Tape(e) => write!(f, "recording failed: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

impl From<TapeError> for ModelError {
    fn from(e: TapeError) -> Self {
        ModelError::Tape(e)
    }
}

impl ModelConfig {
    /// True when the architecture consumes the per-event jet axis.
    pub fn uses_axis(&self) -> bool {
        self.class != ModelClass::BaselinePfn && self.enable_so2
    }

    fn uses_bilinear(&self) -> bool {
        self.class != ModelClass::BaselinePfn && self.enable_bilinear
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent == 0 {
            return Err(ModelError::Config("latent width must be positive"));
        }
        if self.hidden == 0 {
            return Err(ModelError::Config("hidden width must be positive"));
        }
        if self.class != ModelClass::BaselinePfn {
            if self.rep_width == 0 {
                return Err(ModelError::Config("rep width must be positive"));
            }
            if self.enable_bilinear && self.rep_width % 2 != 0 {
                return Err(ModelError::Config("bilinear mixing needs an even rep width"));
            }
        }
        Ok(())
    }
}

/// Outer products of every ordered pair of the three seed vectors, row-major
/// in the pair index.
pub fn seed_tensors(v: &[Vec3; 3]) -> [Mat3; 9] {
    let mut out = [Mat3::ZERO; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = v[i].outer(v[j]);
        }
    }
    out
}

/// Kind of bilinear mixing applied in a hidden layer.
#[derive(Debug, Clone, Copy)]
enum BilKind {
    /// All three representations, growing 2F to 3F.
    Full,
    /// Scalar and vector products only, width preserved.
    ScalarVector,
}

/// One affine stage: parameter views plus output feature counts.
#[derive(Debug, Clone, Copy)]
struct AffineSpec {
    views: AffineViews,
    out: (usize, usize, usize),
}

/// One hidden layer: affine, then optionally the axis layer and bilinear
/// mixing, then the nonlinearity.
#[derive(Debug, Clone, Copy)]
struct LayerViews {
    affine: AffineSpec,
    so2: Option<So2Views>,
    bil: Option<BilKind>,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamView,
    phi_hidden: Vec<LayerViews>,
    phi_out: AffineSpec,
    f_hidden: Vec<LayerViews>,
    /// Scalar hidden layers after the invariant readout (empty for the
    /// baseline, whose pooled features are already scalars).
    head_hidden: Vec<LayerViews>,
    out: AffineSpec,
    uses_readout: bool,
}

/// How a parameter view is filled at initialization.
enum Init {
    /// Uniform in `(-w, w)`.
    Uniform(f64),
    /// Every entry set to the same constant.
    Const(f64),
    /// Near-identity axis-layer map over `features` channels: the diagonal
    /// feature pair gets gains `1 + eps` and angle `eps`, off-diagonal pairs
    /// get everything `eps`, so the whole stage starts as a slightly
    /// perturbed identity.  Initializing every pair at unit gain instead
    /// would make each output the sum of all inputs, collapsing the channels
    /// onto one direction and zeroing the cross products downstream.
    So2 { stride: usize, features: usize },
}

/// A built model: configuration, parameters, and the layer layout.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

/// Registers one affine stage, queueing fan-in-scaled uniform init for each
/// nonempty weight block.  The uniform bound `sqrt(3/fan)`
/// keeps per-channel signal energy roughly constant through a stack of layers;
/// smaller bounds let the squared-norm readout features collapse toward zero,
/// which flattens their gradients and strands training at the class prior.
/// Vector and tensor weights start at twice that bound: product layers map a
/// channel magnitude `m` to `m^2`, which is only stable near `m = 1`, and the
/// boosted gain parks typical norms at the saturating activation's knee where
/// that fixed point lives.  Scalars have no saturation, so they keep the
/// energy-preserving bound and are replenished each layer by dot products of
/// the unit-scale vector and tensor channels.
fn reg_affine(
    b: &mut crate::autodiff::ParamStoreBuilder,
    jobs: &mut Vec<(ParamView, Init)>,
    name: &str,
    fin: (usize, usize, usize),
    fout: (usize, usize, usize),
) -> AffineSpec {
    let weight = |b: &mut crate::autodiff::ParamStoreBuilder,
                      jobs: &mut Vec<(ParamView, Init)>,
                      suffix: &str,
                      rows: usize,
                      cols: usize,
                      gain: f64| {
        if rows * cols == 0 {
            return ParamView::EMPTY;
        }
        let v = b.register(&format!("{name}.{suffix}"), rows * cols);
        jobs.push((v, Init::Uniform(gain * math::sqrt(3.0 / cols as f64))));
        v
    };
    let ws = weight(b, jobs, "ws", fout.0, fin.0, 1.0);
    let wv = weight(b, jobs, "wv", fout.1, fin.1, 2.0);
    let wt = weight(b, jobs, "wt", fout.2, fin.2, 2.0);
    let bs = if fout.0 > 0 {
        let v = b.register(&format!("{name}.bs"), fout.0);
        // A small positive floor keeps rectified scalar units alive at
        // initialization.  In product layers the scalar half multiplies the
        // vector and tensor halves, so live scalars preserve a linear path
        // through every layer: even when the quadratic terms decay, the
        // network keeps a trainable gradient highway instead of cutting off
        // double-exponentially.
        jobs.push((v, Init::Const(0.2)));
        v
    } else {
        ParamView::EMPTY
    };
    let bt = if fout.2 > 0 { b.register(&format!("{name}.bt"), fout.2) } else { ParamView::EMPTY };
    AffineSpec { views: AffineViews { ws, bs, wv, wt, bt }, out: fout }
}

fn reg_so2(
    b: &mut crate::autodiff::ParamStoreBuilder,
    jobs: &mut Vec<(ParamView, Init)>,
    name: &str,
    fv: usize,
    ft: usize,
) -> So2Views {
    let pv = if fv > 0 {
        let v = b.register(&format!("{name}.axis_v"), fv * fv * 3);
        jobs.push((v, Init::So2 { stride: 3, features: fv }));
        v
    } else {
        ParamView::EMPTY
    };
    let pt = if ft > 0 {
        let v = b.register(&format!("{name}.axis_t"), ft * ft * 6);
        jobs.push((v, Init::So2 { stride: 6, features: ft }));
        v
    } else {
        ParamView::EMPTY
    };
    So2Views { pv, pt }
}

/// Builds the model for `cfg` with seed-deterministic initialization.
pub fn build_model(cfg: &ModelConfig) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut b = ParamStore::builder();
    let mut jobs: Vec<(ParamView, Init)> = Vec::new();

    let embed = b.register("embed", N_PTYPES * EMBED_DIM);
    jobs.push((embed, Init::Uniform(1.0)));

    let layout = match cfg.class {
        ModelClass::BaselinePfn => {
            let h = cfg.hidden;
            let scalar_layer = |b: &mut crate::autodiff::ParamStoreBuilder,
                                jobs: &mut Vec<(ParamView, Init)>,
                                name: &str,
                                fin: usize,
                                fout: usize| LayerViews {
                affine: reg_affine(b, jobs, name, (fin, 0, 0), (fout, 0, 0)),
                so2: None,
                bil: None,
            };
            let phi_hidden = vec![
                scalar_layer(&mut b, &mut jobs, "phi1", BASELINE_INPUT_FEATURES, h),
                scalar_layer(&mut b, &mut jobs, "phi2", h, h),
            ];
            let phi_out = reg_affine(&mut b, &mut jobs, "phi_out", (h, 0, 0), (cfg.latent, 0, 0));
            let f_hidden = vec![
                scalar_layer(&mut b, &mut jobs, "f1", cfg.latent, h),
                scalar_layer(&mut b, &mut jobs, "f2", h, h),
                scalar_layer(&mut b, &mut jobs, "f3", h, h),
            ];
            let out = reg_affine(&mut b, &mut jobs, "out", (h, 0, 0), (2, 0, 0));
            Layout {
                embed,
                phi_hidden,
                phi_out,
                f_hidden,
                head_hidden: Vec::new(),
                out,
                uses_readout: false,
            }
        }
        ModelClass::Vector | ModelClass::Tensor => {
            let tensors = cfg.class == ModelClass::Tensor;
            let w = cfg.rep_width;
            // Width per representation after a full hidden layer.
            let pb = if cfg.uses_bilinear() && tensors { 3 * w / 2 } else { w };
            let fin0 = if tensors { (1 + EMBED_DIM, 3, 9) } else { (1 + EMBED_DIM, 3, 0) };
            let wt = |n: usize| if tensors { n } else { 0 };

            let rep_layer = |b: &mut crate::autodiff::ParamStoreBuilder,
                                 jobs: &mut Vec<(ParamView, Init)>,
                                 name: &str,
                                 fin: (usize, usize, usize)|
             -> LayerViews {
                let affine = reg_affine(b, jobs, name, fin, (w, w, wt(w)));
                let so2 = if cfg.uses_axis() {
                    Some(reg_so2(b, jobs, name, w, wt(w)))
                } else {
                    None
                };
                let bil = if cfg.uses_bilinear() {
                    Some(if tensors { BilKind::Full } else { BilKind::ScalarVector })
                } else {
                    None
                };
                LayerViews { affine, so2, bil }
            };

            let l = cfg.latent;
            let phi_hidden = vec![
                rep_layer(&mut b, &mut jobs, "phi1", fin0),
                rep_layer(&mut b, &mut jobs, "phi2", (pb, pb, wt(pb))),
            ];
            let phi_out =
                reg_affine(&mut b, &mut jobs, "phi_out", (pb, pb, wt(pb)), (l, l, wt(l)));
            let f_hidden = vec![
                rep_layer(&mut b, &mut jobs, "f1", (l, l, wt(l))),
                rep_layer(&mut b, &mut jobs, "f2", (pb, pb, wt(pb))),
                rep_layer(&mut b, &mut jobs, "f3", (pb, pb, wt(pb))),
            ];
            // Invariant readout produces one scalar per feature of every
            // representation present.
            let readout_len = pb * if tensors { 3 } else { 2 };
            let h = cfg.hidden;
            let scalar_layer = |b: &mut crate::autodiff::ParamStoreBuilder,
                                    jobs: &mut Vec<(ParamView, Init)>,
                                    name: &str,
                                    fin: usize,
                                    fout: usize| LayerViews {
                affine: reg_affine(b, jobs, name, (fin, 0, 0), (fout, 0, 0)),
                so2: None,
                bil: None,
            };
            let head_hidden = vec![
                scalar_layer(&mut b, &mut jobs, "head1", readout_len, h),
                scalar_layer(&mut b, &mut jobs, "head2", h, h),
            ];
            let out = reg_affine(&mut b, &mut jobs, "out", (h, 0, 0), (2, 0, 0));
            Layout {
                embed,
                phi_hidden,
                phi_out,
                f_hidden,
                head_hidden,
                out,
                uses_readout: true,
            }
        }
    };

    let mut store = b.build();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (view, init) in &jobs {
        let slot = store.slice_mut(*view);
        match init {
            Init::Uniform(w) => {
                for v in slot {
                    *v = rng.random_range(-*w..*w);
                }
            }
            Init::Const(c) => {
                for v in slot {
                    *v = *c;
                }
            }
            Init::So2 { stride, features } => {
                for (c, chunk) in slot.chunks_mut(*stride).enumerate() {
                    let diagonal = c / features == c % features;
                    for (k, v) in chunk.iter_mut().enumerate() {
                        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * 0.01;
                        *v = if diagonal && k % 3 != 2 { 1.0 + eps } else { eps };
                    }
                }
            }
        }
    }

    Ok(Model { cfg: *cfg, store, layout })
}

/// Preassembled network inputs for a batch of events.
pub(crate) struct Assembled {
    pub channels: RepChannels,
    pub mask: Mask,
    pub classes: Vec<u8>,
    pub axes: Vec<Vec3>,
}

fn wrap_angle(delta: f64) -> f64 {
    math::atan2(math::sin(delta), math::cos(delta))
}

fn pseudorapidity(p: Vec3) -> f64 {
    let pt = math::sqrt(p.x * p.x + p.y * p.y).max(1e-12);
    math::asinh(p.z / pt)
}

/// Unit-ball saturation: identity inside, rescaled to unit norm outside.
fn saturate(v: Vec3) -> Vec3 {
    let n = v.norm();
    if n > 1.0 {
        v * (1.0 / n)
    } else {
        v
    }
}

/// Builds padded per-track channels for a batch. Padded slots stay zero and
/// are masked out of pooling.
pub(crate) fn assemble_inputs(
    class: ModelClass,
    events: &[JetEvent],
) -> Result<Assembled, ModelError> {
    if events.is_empty() {
        return Err(ModelError::Event("empty batch"));
    }
    let batch = events.len();
    let slots = MAX_TRACKS;
    let (fs, fv, ft) = match class {
        ModelClass::BaselinePfn => (BASELINE_RAW_FEATURES, 0, 0),
        ModelClass::Vector => (1, 3, 0),
        ModelClass::Tensor => (1, 3, 9),
    };
    let mut channels = RepChannels::zeros(batch, slots, fs, fv, ft);
    let mut classes = vec![0u8; batch * slots];
    let mut axes = Vec::with_capacity(batch);
    let mut counts = Vec::with_capacity(batch);

    for (b, e) in events.iter().enumerate() {
        if e.tracks.is_empty() {
            return Err(ModelError::Event("event has no tracks"));
        }
        if e.tracks.len() > slots {
            return Err(ModelError::Event("event exceeds the track capacity"));
        }
        if e.jet_p.norm() == 0.0 {
            return Err(ModelError::Event("jet momentum is zero"));
        }
        counts.push(e.tracks.len());
        axes.push(e.axis());
        let jet_scaled = e.jet_p * (1.0 / MOMENTUM_SCALE_GEV);
        let jet_pt = math::sqrt(e.jet_p.x * e.jet_p.x + e.jet_p.y * e.jet_p.y);
        let jet_eta = pseudorapidity(e.jet_p);
        let jet_phi = math::atan2(e.jet_p.y, e.jet_p.x);
        for (p, t) in e.tracks.iter().enumerate() {
            classes[b * slots + p] = t.ptype;
            match class {
                ModelClass::BaselinePfn => {
                    let pt = math::sqrt(t.p.x * t.p.x + t.p.y * t.p.y);
                    let feats = [
                        jet_pt / MOMENTUM_SCALE_GEV,
                        jet_eta,
                        jet_phi,
                        pt / MOMENTUM_SCALE_GEV,
                        pseudorapidity(t.p) - jet_eta,
                        wrap_angle(math::atan2(t.p.y, t.p.x) - jet_phi),
                        math::sqrt(t.a.x * t.a.x + t.a.y * t.a.y) / IMPACT_SCALE_MM,
                        t.a.z / IMPACT_SCALE_MM,
                        t.q as f64,
                    ];
                    for (f, v) in feats.iter().enumerate() {
                        channels.set_scalar(b, p, f, *v);
                    }
                }
                ModelClass::Vector | ModelClass::Tensor => {
                    channels.set_scalar(b, p, 0, t.q as f64);
                    // Unit-ball saturation on the scaled inputs: rare
                    // large-impact tracks would otherwise enter product
                    // layers at magnitude several, and repeated squaring
                    // turns a single such track into overflow-scale
                    // activations.  Direction is untouched.
                    let vecs = [
                        saturate(jet_scaled),
                        saturate(t.p * (1.0 / MOMENTUM_SCALE_GEV)),
                        saturate(t.a * (1.0 / IMPACT_SCALE_MM)),
                    ];
                    for (f, v) in vecs.iter().enumerate() {
                        channels.set_vector(b, p, f, *v);
                    }
                    if class == ModelClass::Tensor {
                        for (f, m) in seed_tensors(&vecs).iter().enumerate() {
                            channels.set_tensor(b, p, f, m);
                        }
                    }
                }
            }
        }
    }

    let mask = Mask::from_counts(&counts, slots);
    Ok(Assembled { channels, mask, classes, axes })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    fn record_hidden(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        node: NodeId,
        axis: Option<crate::autodiff::AxisId>,
        lv: &LayerViews,
    ) -> Result<NodeId, TapeError> {
        let (fs, fv, ft) = lv.affine.out;
        let mut node = tape.affine(store, node, fs, fv, ft, lv.affine.views)?;
        if let Some(so2) = lv.so2 {
            let axis = axis.expect("axis registered for axis-equivariant layers");
            node = tape.so2_linear(store, node, axis, so2)?;
        }
        match lv.bil {
            Some(BilKind::Full) => node = tape.bilinear(node)?,
            Some(BilKind::ScalarVector) => node = tape.bilinear_sv(node)?,
            None => {}
        }
        tape.activate(node)
    }

    /// Records the full forward pass for preassembled inputs and returns the
    /// two-logit node.
    fn record_from(&self, tape: &mut Tape, asm: &Assembled) -> Result<NodeId, ModelError> {
        self.record_from_store(&self.store, tape, asm)
    }

    /// Same as [`Model::record_from`] but reading parameters from an external
    /// store with this model's layout (for perturbation studies).
    fn record_from_store(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        asm: &Assembled,
    ) -> Result<NodeId, ModelError> {
        let x = tape.input(asm.channels.clone());
        let mask = tape.mask(asm.mask.clone());
        let emb = tape.embed(
            store,
            self.layout.embed,
            &asm.classes,
            mask,
            N_PTYPES,
            EMBED_DIM,
        )?;
        let mut node = tape.concat(x, emb)?;
        let axis = if self.cfg.uses_axis() {
            Some(tape.axis(asm.axes.clone())?)
        } else {
            None
        };

        for lv in &self.layout.phi_hidden {
            node = self.record_hidden(store, tape, node, axis, lv)?;
        }
        let (fs, fv, ft) = self.layout.phi_out.out;
        node = tape.affine(store, node, fs, fv, ft, self.layout.phi_out.views)?;

        node = tape.masked_pool(node, mask)?;
        // Fixed post-pool normalization (absorbable into the next affine):
        // raw sums over up to MAX_TRACKS slots feed O(30) magnitudes into
        // product layers whose repeated squaring overflows the unbounded
        // scalar channel, while heavier scaling shrinks the squared-norm
        // readout until its gradient stalls at the class prior.  The
        // square-root denominator keeps pooled features near unit scale.
        node = tape.scale(node, 1.0 / math::sqrt(MAX_TRACKS as f64))?;

        for lv in &self.layout.f_hidden {
            node = self.record_hidden(store, tape, node, axis, lv)?;
        }
        if self.layout.uses_readout {
            node = tape.invariant_readout(node)?;
        }
        for lv in &self.layout.head_hidden {
            node = self.record_hidden(store, tape, node, axis, lv)?;
        }
        let (fs, fv, ft) = self.layout.out.out;
        node = tape.affine(store, node, fs, fv, ft, self.layout.out.views)?;
        Ok(node)
    }

    /// Records logits for a batch of events.
    pub fn record_logits(&self, tape: &mut Tape, events: &[JetEvent]) -> Result<NodeId, ModelError> {
        let asm = assemble_inputs(self.cfg.class, events)?;
        self.record_from(tape, &asm)
    }

    /// Records logits plus the mean cross-entropy loss node.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        events: &[JetEvent],
        labels: &[u8],
    ) -> Result<(NodeId, NodeId), ModelError> {
        let logits = self.record_logits(tape, events)?;
        let loss = tape.cross_entropy(logits, labels)?;
        Ok((logits, loss))
    }

    /// Evaluates the mean cross-entropy loss using parameter values from an
    /// external store laid out like this model's own.
    pub fn loss_value_with(
        &self,
        store: &ParamStore,
        events: &[JetEvent],
        labels: &[u8],
    ) -> Result<f64, ModelError> {
        let asm = assemble_inputs(self.cfg.class, events)?;
        let mut tape = Tape::new();
        let logits = self.record_from_store(store, &mut tape, &asm)?;
        let loss = tape.cross_entropy(logits, labels)?;
        Ok(tape.value(loss).scalar(0, 0, 0))
    }

    /// Inference: two logits per event.
    pub fn logits(&self, events: &[JetEvent]) -> Result<Vec<[f64; 2]>, ModelError> {
        let mut tape = Tape::new();
        let node = self.record_logits(&mut tape, events)?;
        let v = tape.value(node);
        Ok((0..v.batch()).map(|b| [v.scalar(b, 0, 0), v.scalar(b, 0, 1)]).collect())
    }

    /// Inference: signal score (logit margin) per event.
    pub fn scores(&self, events: &[JetEvent]) -> Result<Vec<f64>, ModelError> {
        Ok(self.logits(events)?.iter().map(|z| z[1] - z[0]).collect())
    }

    /// Named parameter segments with their extents, for reporting.
    pub fn segment_summary(&self) -> Vec<(String, usize)> {
        self.store
            .segments()
            .iter()
            .map(|s| (s.name.clone(), s.view.len))
            .collect()
    }
}

/// Errors from checkpoint decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointError {
    /// Fewer bytes than the fixed header needs.
    TooShort,
    /// Magic bytes do not match.
    BadMagic,
    /// Unknown format version.
    BadVersion(u32),
    /// Unknown model-class code.
    BadClass(u8),
    /// Flag byte other than 0 or 1.
    BadFlag,
    /// Parameter count in the file does not match the rebuilt model.
    CountMismatch { expected: usize, found: usize },
    /// Payload shorter or longer than the declared parameter count.
    BadLength,
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::TooShort => write!(f, "checkpoint truncated inside the header"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint (bad magic)"),
            CheckpointError::BadVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            CheckpointError::BadClass(c) => write!(f, "unknown model class code {c}"),
            CheckpointError::BadFlag => write!(f, "corrupt architecture flag"),
            CheckpointError::CountMismatch { expected, found } => write!(
                f,
                "parameter count {found} does not match the architecture ({expected})"
            ),
            CheckpointError::BadLength => {
                write!(f, "payload length does not match the declared count")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CheckpointError {}

/// First bytes of every checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EQJTCKPT";
const CHECKPOINT_VERSION: u32 = 1;
/// Magic + version + config (3 flag bytes, pad, 3 u32, u64) + count u64.
const HEADER_LEN: usize = 8 + 4 + 4 + 12 + 8 + 8;

fn class_code(c: ModelClass) -> u8 {
    match c {
        ModelClass::BaselinePfn => 0,
        ModelClass::Vector => 1,
        ModelClass::Tensor => 2,
    }
}

fn class_from_code(c: u8) -> Result<ModelClass, CheckpointError> {
    match c {
        0 => Ok(ModelClass::BaselinePfn),
        1 => Ok(ModelClass::Vector),
        2 => Ok(ModelClass::Tensor),
        other => Err(CheckpointError::BadClass(other)),
    }
}

/// Serializes a model (config + parameters) to a self-describing byte blob.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(class_code(cfg.class));
    out.push(u8::from(cfg.enable_bilinear));
    out.push(u8::from(cfg.enable_so2));
    out.push(0);
    out.extend_from_slice(&(cfg.latent as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.rep_width as u32).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for v in model.store().values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("bounds checked"))
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("bounds checked"))
}

fn flag(byte: u8) -> Result<bool, CheckpointError> {
    match byte {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(CheckpointError::BadFlag),
    }
}

/// Rebuilds a model from checkpoint bytes, validating structure against the
/// recorded configuration.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::TooShort);
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(bytes, 8);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let cfg = ModelConfig {
        class: class_from_code(bytes[12])?,
        enable_bilinear: flag(bytes[13])?,
        enable_so2: flag(bytes[14])?,
        latent: read_u32(bytes, 16) as usize,
        hidden: read_u32(bytes, 20) as usize,
        rep_width: read_u32(bytes, 24) as usize,
        seed: read_u64(bytes, 28),
    };
    let count = read_u64(bytes, 36) as usize;
    let mut model = build_model(&cfg).map_err(|_| CheckpointError::BadFlag)?;
    if count != model.param_count() {
        return Err(CheckpointError::CountMismatch {
            expected: model.param_count(),
            found: count,
        });
    }
    if bytes.len() != HEADER_LEN + 8 * count {
        return Err(CheckpointError::BadLength);
    }
    for (i, v) in model.store_mut().values_mut().iter_mut().enumerate() {
        let at = HEADER_LEN + 8 * i;
        *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("bounds checked"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_events, GenConfig};
    use crate::geometry::{random_rotation, rotation_from_axis_angle};

    fn small_cfg(class: ModelClass, bilinear: bool, so2: bool) -> ModelConfig {
        ModelConfig {
            class,
            enable_bilinear: bilinear,
            enable_so2: so2,
            latent: 3,
            hidden: 6,
            rep_width: 4,
            seed: 11,
        }
    }

    fn sample_events(n: usize) -> Vec<JetEvent> {
        let cfg = GenConfig::default();
        generate_events(&cfg, n)
    }

    fn all_btn_configs() -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for class in [ModelClass::Vector, ModelClass::Tensor] {
            for bilinear in [false, true] {
                for so2 in [false, true] {
                    out.push(small_cfg(class, bilinear, so2));
                }
            }
        }
        out
    }

    #[test]
    fn seed_tensor_examples() {
        let axes = [Vec3::X, Vec3::Y, Vec3::Z];
        let t = seed_tensors(&axes);
        for i in 0..3 {
            for j in 0..3 {
                let m = t[3 * i + j];
                for r in 0..3 {
                    for c in 0..3 {
                        let expect = if r == i && c == j { 1.0 } else { 0.0 };
                        assert_eq!(m[(r, c)], expect);
                    }
                }
            }
        }

        let zeros = seed_tensors(&[Vec3::ZERO; 3]);
        for m in zeros {
            assert_eq!(m, Mat3::ZERO);
        }

        // Covariance: seeding rotated vectors equals rotating the seeds.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = [
            Vec3::new(0.3, -1.0, 0.4),
            Vec3::new(1.2, 0.1, -0.6),
            Vec3::new(-0.2, 0.5, 0.9),
        ];
        let r = random_rotation(&mut rng);
        let rotated_first = seed_tensors(&[
            r.apply_to_vector(v[0]),
            r.apply_to_vector(v[1]),
            r.apply_to_vector(v[2]),
        ]);
        let seeded_first = seed_tensors(&v);
        for k in 0..9 {
            let diff = rotated_first[k] - r.apply_to_tensor(&seeded_first[k]);
            assert!(diff.frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn build_is_seed_deterministic() {
        let cfg = small_cfg(ModelClass::Tensor, true, true);
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        assert_eq!(a.store().values(), b.store().values());
        let mut cfg2 = cfg;
        cfg2.seed = 99;
        let c = build_model(&cfg2).unwrap();
        assert_ne!(a.store().values(), c.store().values());
    }

    #[test]
    fn config_validation_rejects_bad_widths() {
        let mut cfg = small_cfg(ModelClass::Tensor, true, false);
        cfg.rep_width = 5;
        assert!(matches!(build_model(&cfg), Err(ModelError::Config(_))));
        cfg.rep_width = 5;
        cfg.enable_bilinear = false;
        assert!(build_model(&cfg).is_ok(), "odd widths fine without bilinear");
        let mut cfg = small_cfg(ModelClass::BaselinePfn, false, false);
        cfg.latent = 0;
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn baseline_input_width_is_twelve() {
        assert_eq!(BASELINE_INPUT_FEATURES, 12);
        let model = build_model(&small_cfg(ModelClass::BaselinePfn, false, false)).unwrap();
        let phi1_ws = model
            .segment_summary()
            .into_iter()
            .find(|(n, _)| n == "phi1.ws")
            .unwrap();
        assert_eq!(phi1_ws.1, 6 * 12);
    }

    #[test]
    fn richer_models_have_more_parameters() {
        let vector = build_model(&small_cfg(ModelClass::Vector, false, false)).unwrap();
        let tensor_bil = build_model(&small_cfg(ModelClass::Tensor, true, false)).unwrap();
        let tensor_bil_so2 = build_model(&small_cfg(ModelClass::Tensor, true, true)).unwrap();
        assert!(tensor_bil.param_count() > vector.param_count());
        assert!(tensor_bil_so2.param_count() > tensor_bil.param_count());
    }

    #[test]
    fn logits_are_finite_and_batch_consistent() {
        let events = sample_events(6);
        for cfg in all_btn_configs() {
            let model = build_model(&cfg).unwrap();
            let logits = model.logits(&events).unwrap();
            assert_eq!(logits.len(), events.len());
            for z in &logits {
                assert!(z[0].is_finite() && z[1].is_finite());
            }
            // A single event evaluated alone matches its in-batch value.
            let solo = model.logits(&events[2..3]).unwrap();
            assert!((solo[0][0] - logits[2][0]).abs() < 1e-12);
            assert!((solo[0][1] - logits[2][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let events = sample_events(4);
        let mut permuted = events.clone();
        for e in &mut permuted {
            e.tracks.reverse();
        }
        for class in [ModelClass::BaselinePfn, ModelClass::Vector, ModelClass::Tensor] {
            let model = build_model(&small_cfg(class, true, true)).unwrap();
            let a = model.logits(&events).unwrap();
            let b = model.logits(&permuted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn padded_slot_content_is_ignored() {
        let events = sample_events(3);
        let model = build_model(&small_cfg(ModelClass::Tensor, true, true)).unwrap();
        let mut asm = assemble_inputs(ModelClass::Tensor, &events).unwrap();
        let mut tape = Tape::new();
        let clean = model.record_from(&mut tape, &asm).unwrap();
        let clean = tape.value(clean).clone();
        // Poison every invalid slot with garbage, leaving the mask alone.
        for b in 0..asm.mask.batch() {
            for p in 0..asm.mask.slots() {
                if !asm.mask.get(b, p) {
                    asm.classes[b * asm.mask.slots() + p] = 2;
                    asm.channels.set_scalar(b, p, 0, 37.0);
                    asm.channels.set_vector(b, p, 1, Vec3::new(5.0, -4.0, 3.0));
                    let mut junk = Mat3::ZERO;
                    junk.e[4] = 9.0;
                    asm.channels.set_tensor(b, p, 7, &junk);
                }
            }
        }
        let mut tape = Tape::new();
        let poisoned = model.record_from(&mut tape, &asm).unwrap();
        let poisoned = tape.value(poisoned).clone();
        assert_eq!(clean.max_abs_diff(&poisoned), 0.0);
    }

    #[test]
    fn equivariant_models_are_rotation_invariant() {
        let events = sample_events(5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for cfg in all_btn_configs() {
            let model = build_model(&cfg).unwrap();
            let base = model.logits(&events).unwrap();
            for _ in 0..8 {
                let r = random_rotation(&mut rng);
                let rotated: Vec<JetEvent> = events.iter().map(|e| e.rotated(&r)).collect();
                let moved = model.logits(&rotated).unwrap();
                for (x, y) in base.iter().zip(&moved) {
                    let d = (x[0] - y[0]).abs().max((x[1] - y[1]).abs());
                    assert!(d < 1e-6, "class {:?} drifted {d:e}", cfg.class);
                }
            }
        }
    }

    #[test]
    fn axis_rotations_preserve_axis_aware_logits() {
        let events = sample_events(5);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for class in [ModelClass::Vector, ModelClass::Tensor] {
            let model = build_model(&small_cfg(class, true, true)).unwrap();
            let base = model.logits(&events).unwrap();
            for _ in 0..8 {
                let angle = rng.random_range(0.0..core::f64::consts::TAU);
                let rotated: Vec<JetEvent> = events
                    .iter()
                    .map(|e| {
                        let r = rotation_from_axis_angle(e.axis(), angle).unwrap();
                        e.rotated(&r)
                    })
                    .collect();
                let moved = model.logits(&rotated).unwrap();
                for (x, y) in base.iter().zip(&moved) {
                    let d = (x[0] - y[0]).abs().max((x[1] - y[1]).abs());
                    assert!(d < 1e-6, "axis rotation drifted {d:e}");
                }
            }
        }
    }

    #[test]
    fn baseline_is_not_rotation_invariant() {
        let events = sample_events(3);
        let model = build_model(&small_cfg(ModelClass::BaselinePfn, false, false)).unwrap();
        let base = model.logits(&events).unwrap();
        let r = rotation_from_axis_angle(Vec3::X, core::f64::consts::FRAC_PI_2).unwrap();
        let rotated: Vec<JetEvent> = events.iter().map(|e| e.rotated(&r)).collect();
        let moved = model.logits(&rotated).unwrap();
        let mut max_d = 0.0f64;
        for (x, y) in base.iter().zip(&moved) {
            max_d = max_d.max((x[0] - y[0]).abs()).max((x[1] - y[1]).abs());
        }
        assert!(max_d > 1e-3, "baseline unexpectedly invariant ({max_d:e})");
    }

    #[test]
    fn training_step_reduces_loss_on_tiny_batch() {
        use crate::autodiff::{AdamConfig, AdamState};
        let events = sample_events(8);
        let labels: Vec<u8> = events.iter().map(|e| e.label).collect();
        let mut model = build_model(&small_cfg(ModelClass::Tensor, true, true)).unwrap();
        let mut adam = AdamState::new(model.param_count(), AdamConfig { lr: 3e-3, ..AdamConfig::default() });
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..30 {
            let mut tape = Tape::new();
            let (_, loss) = model.record_loss(&mut tape, &events, &labels).unwrap();
            let value = tape.value(loss).scalar(0, 0, 0);
            if step == 0 {
                first = value;
            }
            last = value;
            tape.backward(model.store_mut(), loss, 1.0).unwrap();
            adam.adam_step(model.store_mut());
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(last.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut model = build_model(&small_cfg(ModelClass::Vector, true, false)).unwrap();
        model.store_mut().values_mut()[3] = 0.123456789;
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.store().values(), model.store().values());

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert_eq!(decode_checkpoint(&bad).unwrap_err(), CheckpointError::BadMagic);

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            decode_checkpoint(&bad).unwrap_err(),
            CheckpointError::BadVersion(_)
        ));

        let mut bad = bytes.clone();
        bad[36] = bad[36].wrapping_add(1);
        assert!(matches!(
            decode_checkpoint(&bad).unwrap_err(),
            CheckpointError::CountMismatch { .. }
        ));

        let bad = &bytes[..bytes.len() - 5];
        assert_eq!(decode_checkpoint(bad).unwrap_err(), CheckpointError::BadLength);
        assert_eq!(decode_checkpoint(&bytes[..10]).unwrap_err(), CheckpointError::TooShort);
    }
}
