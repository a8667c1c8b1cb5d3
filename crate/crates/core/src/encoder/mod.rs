//! Frozen multi-layer backbone with trainable shift adapters.
//!
//! A backbone layer applies a fixed square linear map (optionally followed
//! by a rectifier). At configured layers a shift adapter computes a
//! two-layer rectified bottleneck of the layer output and the two are
//! blended by `lambda`:
//!
//! ```text
//! a = relu(W2 relu(W1 h))        h: frozen layer output
//! v = lambda * h + (1 - lambda) * a
//! ```
//!
//! The final layer output is L2-normalized. `encode` records a tape of
//! every intermediate needed by `encode_backward`, which returns exact
//! reverse-mode gradients for adapter weights only; frozen weights never
//! receive gradients.

pub(crate) mod checkpoint;

pub use checkpoint::{checkpoint_bytes, read_checkpoint, write_checkpoint};

use crate::error::{Error, Result};
use crate::numeric::{dot_slices, norm_slice, sample_gaussian, FeatureVector, LinearMap, RngState};

/// Which encoder a model stands in for. Purely a label carried through
/// checkpoints and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Image,
    Text,
}

/// One immutable backbone layer: a square map plus an optional rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    map: LinearMap,
    apply_activation: bool,
}

impl FrozenLayer {
    pub fn new(map: LinearMap, apply_activation: bool) -> Result<Self> {
        if map.rows() != map.cols() {
            return Err(Error::InvalidModel(format!(
                "frozen layer map must be square, got {}x{}",
                map.rows(),
                map.cols()
            )));
        }
        Ok(Self {
            map,
            apply_activation,
        })
    }

    pub fn dim(&self) -> usize {
        self.map.rows()
    }

    pub fn map(&self) -> &LinearMap {
        &self.map
    }

    pub fn apply_activation(&self) -> bool {
        self.apply_activation
    }
}

/// Trainable two-layer bottleneck attached at one backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftAdapter {
    layer_index: usize,
    w1: LinearMap,
    w2: LinearMap,
}

impl ShiftAdapter {
    pub fn new(layer_index: usize, w1: LinearMap, w2: LinearMap) -> Result<Self> {
        if w1.rows() != w2.cols() || w1.cols() != w2.rows() {
            return Err(Error::InvalidModel(format!(
                "adapter weights must chain as (hidden x dim, dim x hidden), \
                 got w1 {}x{} and w2 {}x{}",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols()
            )));
        }
        Ok(Self {
            layer_index,
            w1,
            w2,
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn w1(&self) -> &LinearMap {
        &self.w1
    }

    pub fn w2(&self) -> &LinearMap {
        &self.w2
    }
}

/// Applies the adapter bottleneck `relu(W2 relu(W1 f_in))`.
pub fn adapter_forward(adapter: &ShiftAdapter, f_in: &FeatureVector) -> Result<FeatureVector> {
    if f_in.dim() != adapter.dim() {
        return Err(Error::DimMismatch {
            expected: adapter.dim(),
            actual: f_in.dim(),
        });
    }
    let mut u1 = vec![0.0; adapter.hidden_dim()];
    adapter.w1.matvec_slice(f_in.values(), &mut u1);
    let m: Vec<f64> = u1.iter().map(|&x| x.max(0.0)).collect();
    let mut u2 = vec![0.0; adapter.dim()];
    adapter.w2.matvec_slice(&m, &mut u2);
    Ok(FeatureVector::from_raw(
        u2.iter().map(|&x| x.max(0.0)).collect(),
    ))
}

/// Convex combination `lambda * f_frozen + (1 - lambda) * f_ada`.
pub fn blend(f_frozen: &FeatureVector, f_ada: &FeatureVector, lambda: f64) -> Result<FeatureVector> {
    if f_frozen.dim() != f_ada.dim() {
        return Err(Error::DimMismatch {
            expected: f_frozen.dim(),
            actual: f_ada.dim(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidLambda(lambda));
    }
    Ok(FeatureVector::from_raw(
        f_frozen
            .values()
            .iter()
            .zip(f_ada.values())
            .map(|(h, a)| lambda * h + (1.0 - lambda) * a)
            .collect(),
    ))
}

/// A frozen backbone with adapters at distinct layers, blended by `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    backbone: Vec<FrozenLayer>,
    adapters: Vec<ShiftAdapter>,
    lambda: f64,
    branch: Branch,
    /// Bumped on every weight mutation so stale tapes are detectable.
    version: u64,
}

impl EncoderModel {
    pub fn new(
        backbone: Vec<FrozenLayer>,
        adapters: Vec<ShiftAdapter>,
        lambda: f64,
        branch: Branch,
    ) -> Result<Self> {
        if backbone.is_empty() {
            return Err(Error::InvalidModel("backbone depth must be >= 1".into()));
        }
        let dim = backbone[0].dim();
        if backbone.iter().any(|l| l.dim() != dim) {
            return Err(Error::InvalidModel(
                "all backbone layers must share one dim".into(),
            ));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidLambda(lambda));
        }
        let mut seen = vec![false; backbone.len()];
        for adapter in &adapters {
            if adapter.layer_index() >= backbone.len() {
                return Err(Error::InvalidModel(format!(
                    "adapter layer index {} exceeds backbone depth {}",
                    adapter.layer_index(),
                    backbone.len()
                )));
            }
            if seen[adapter.layer_index()] {
                return Err(Error::InvalidModel(format!(
                    "duplicate adapter at layer {}",
                    adapter.layer_index()
                )));
            }
            seen[adapter.layer_index()] = true;
            if adapter.dim() != dim {
                return Err(Error::InvalidModel(format!(
                    "adapter at layer {} has dim {}, backbone has {}",
                    adapter.layer_index(),
                    adapter.dim(),
                    dim
                )));
            }
        }
        Ok(Self {
            backbone,
            adapters,
            lambda,
            branch,
            version: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.backbone[0].dim()
    }

    pub fn depth(&self) -> usize {
        self.backbone.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn backbone(&self) -> &[FrozenLayer] {
        &self.backbone
    }

    pub fn adapters(&self) -> &[ShiftAdapter] {
        &self.adapters
    }

    fn adapter_at_layer(&self, layer: usize) -> Option<usize> {
        self.adapters.iter().position(|a| a.layer_index() == layer)
    }

    /// Runs the backbone in order, applying adapter-and-blend at adapter
    /// sites, and L2-normalizes the last layer's output. The returned tape
    /// holds every intermediate `encode_backward` needs.
    pub fn encode(&self, input: &FeatureVector) -> Result<(FeatureVector, ForwardTape)> {
        if input.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: input.dim(),
            });
        }
        let dim = self.dim();
        let mut cur = input.values().to_vec();
        let mut layers = Vec::with_capacity(self.depth());
        for (i, layer) in self.backbone.iter().enumerate() {
            let mut preact = vec![0.0; dim];
            layer.map.matvec_slice(&cur, &mut preact);
            let frozen_out: Vec<f64> = if layer.apply_activation {
                preact.iter().map(|&x| x.max(0.0)).collect()
            } else {
                preact.clone()
            };
            let mut adapter_tape = None;
            cur = match self.adapter_at_layer(i) {
                Some(ai) => {
                    let adapter = &self.adapters[ai];
                    let mut u1 = vec![0.0; adapter.hidden_dim()];
                    adapter.w1.matvec_slice(&frozen_out, &mut u1);
                    let m: Vec<f64> = u1.iter().map(|&x| x.max(0.0)).collect();
                    let mut u2 = vec![0.0; dim];
                    adapter.w2.matvec_slice(&m, &mut u2);
                    let out = frozen_out
                        .iter()
                        .zip(&u2)
                        .map(|(&h, &z)| self.lambda * h + (1.0 - self.lambda) * z.max(0.0))
                        .collect();
                    adapter_tape = Some(AdapterTape { u1, m, u2 });
                    out
                }
                None => frozen_out.clone(),
            };
            layers.push(LayerTape {
                preact,
                frozen_out,
                adapter: adapter_tape,
            });
        }
        let norm = norm_slice(&cur);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "encoder output".into(),
            });
        }
        if norm == 0.0 {
            return Err(Error::ZeroNorm { op: "encode" });
        }
        let output = FeatureVector::from_raw(cur.iter().map(|&x| x / norm).collect());
        let tape = ForwardTape {
            model_version: self.version,
            input: input.clone(),
            layers,
            prenorm_norm: norm,
            output: output.clone(),
        };
        Ok((output, tape))
    }

    /// Gradients of `grad_out . encode(input)` with respect to every
    /// adapter's weights. Frozen layers pass gradients through but receive
    /// none; rectifiers use subgradient 0 at the kink.
    pub fn encode_backward(
        &self,
        tape: &ForwardTape,
        grad_out: &FeatureVector,
    ) -> Result<AdapterGradients> {
        if tape.model_version != self.version {
            return Err(Error::StaleTape);
        }
        if tape.layers.len() != self.depth() {
            return Err(Error::StaleTape);
        }
        if grad_out.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: grad_out.dim(),
            });
        }
        let mut grads = AdapterGradients::zeros_like(self);
        // Backward through y = v / ||v||: dv = (g - y (g . y)) / ||v||.
        let y = tape.output.values();
        let gy = dot_slices(grad_out.values(), y);
        let mut dcur: Vec<f64> = grad_out
            .values()
            .iter()
            .zip(y)
            .map(|(g, yi)| (g - yi * gy) / tape.prenorm_norm)
            .collect();
        for (i, layer) in self.backbone.iter().enumerate().rev() {
            let lt = &tape.layers[i];
            let dh = match self.adapter_at_layer(i) {
                Some(ai) => {
                    let adapter = &self.adapters[ai];
                    let at = lt.adapter.as_ref().ok_or(Error::StaleTape)?;
                    // v = lambda h + (1 - lambda) relu(u2)
                    let du2: Vec<f64> = dcur
                        .iter()
                        .zip(&at.u2)
                        .map(|(d, &u)| if u > 0.0 { (1.0 - self.lambda) * d } else { 0.0 })
                        .collect();
                    grads.grads[ai].w2.add_outer(&du2, &at.m, 1.0);
                    let mut dm = vec![0.0; adapter.hidden_dim()];
                    adapter.w2.matvec_t_slice(&du2, &mut dm);
                    let du1: Vec<f64> = dm
                        .iter()
                        .zip(&at.u1)
                        .map(|(d, &u)| if u > 0.0 { *d } else { 0.0 })
                        .collect();
                    grads.grads[ai].w1.add_outer(&du1, &lt.frozen_out, 1.0);
                    let mut dh = vec![0.0; self.dim()];
                    adapter.w1.matvec_t_slice(&du1, &mut dh);
                    for (d, g) in dh.iter_mut().zip(&dcur) {
                        *d += self.lambda * g;
                    }
                    dh
                }
                None => dcur,
            };
            let dz: Vec<f64> = if layer.apply_activation {
                dh.iter()
                    .zip(&lt.preact)
                    .map(|(d, &z)| if z > 0.0 { *d } else { 0.0 })
                    .collect()
            } else {
                dh
            };
            let mut dx = vec![0.0; self.dim()];
            layer.map.matvec_t_slice(&dz, &mut dx);
            dcur = dx;
        }
        Ok(grads)
    }

    /// `w <- w - lr * g` on every adapter weight; frozen layers untouched.
    pub fn apply_adapter_update(&mut self, update: &AdapterGradients, lr: f64) -> Result<()> {
        if update.grads.len() != self.adapters.len() {
            return Err(Error::ShapeMismatch(format!(
                "update covers {} adapters, model has {}",
                update.grads.len(),
                self.adapters.len()
            )));
        }
        for (adapter, g) in self.adapters.iter().zip(&update.grads) {
            if adapter.layer_index() != g.layer_index
                || adapter.w1.rows() != g.w1.rows()
                || adapter.w1.cols() != g.w1.cols()
            {
                return Err(Error::ShapeMismatch(
                    "update does not match the model's adapter layout".into(),
                ));
            }
        }
        for (adapter, g) in self.adapters.iter_mut().zip(&update.grads) {
            adapter.w1.axpy(-lr, &g.w1);
            adapter.w2.axpy(-lr, &g.w2);
        }
        self.version += 1;
        Ok(())
    }

    pub(crate) fn snapshot_adapters(&self) -> Vec<(LinearMap, LinearMap)> {
        self.adapters
            .iter()
            .map(|a| (a.w1.clone(), a.w2.clone()))
            .collect()
    }

    pub(crate) fn restore_adapters(&mut self, snapshot: &[(LinearMap, LinearMap)]) {
        debug_assert_eq!(snapshot.len(), self.adapters.len());
        for (adapter, (w1, w2)) in self.adapters.iter_mut().zip(snapshot) {
            adapter.w1 = w1.clone();
            adapter.w2 = w2.clone();
        }
        self.version += 1;
    }
}

/// Cached intermediates from one `encode` call.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    model_version: u64,
    input: FeatureVector,
    layers: Vec<LayerTape>,
    prenorm_norm: f64,
    output: FeatureVector,
}

impl ForwardTape {
    pub fn output(&self) -> &FeatureVector {
        &self.output
    }

    pub fn input(&self) -> &FeatureVector {
        &self.input
    }
}

#[derive(Debug, Clone)]
struct LayerTape {
    preact: Vec<f64>,
    frozen_out: Vec<f64>,
    adapter: Option<AdapterTape>,
}

#[derive(Debug, Clone)]
struct AdapterTape {
    u1: Vec<f64>,
    m: Vec<f64>,
    u2: Vec<f64>,
}

/// Per-adapter weight gradients, aligned with `EncoderModel::adapters`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    grads: Vec<AdapterGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradient {
    pub layer_index: usize,
    pub w1: LinearMap,
    pub w2: LinearMap,
}

impl AdapterGradients {
    pub fn from_parts(grads: Vec<AdapterGradient>) -> Self {
        Self { grads }
    }

    #[cfg(test)]
    pub(crate) fn poison_for_test(&mut self) {
        self.grads[0].w1.values_mut()[0] = f64::NAN;
    }

    pub fn zeros_like(model: &EncoderModel) -> Self {
        Self {
            grads: model
                .adapters()
                .iter()
                .map(|a| AdapterGradient {
                    layer_index: a.layer_index(),
                    w1: LinearMap::zeros(a.w1.rows(), a.w1.cols()),
                    w2: LinearMap::zeros(a.w2.rows(), a.w2.cols()),
                })
                .collect(),
        }
    }

    pub fn grads(&self) -> &[AdapterGradient] {
        &self.grads
    }

    /// self += other (shapes must match).
    pub fn accumulate(&mut self, other: &AdapterGradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::ShapeMismatch(
                "adapter gradient sets differ in length".into(),
            ));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.w1.axpy(1.0, &b.w1);
            a.w2.axpy(1.0, &b.w2);
        }
        Ok(())
    }

    /// self = momentum * self + other.
    pub(crate) fn momentum_update(&mut self, momentum: f64, other: &AdapterGradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.w1.scale(momentum);
            a.w1.axpy(1.0, &b.w1);
            a.w2.scale(momentum);
            a.w2.axpy(1.0, &b.w2);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| {
            g.w1.values().iter().all(|v| v.is_finite())
                && g.w2.values().iter().all(|v| v.is_finite())
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.w1.values().iter().chain(g.w2.values()))
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Construction recipe for the desk-scale encoder stand-ins.
///
/// Frozen layers are identity plus `frozen_jitter / sqrt(dim)` Gaussian
/// entries with no activation, so the backbone preserves the cosine
/// geometry a pretrained encoder would. Adapter weights start at
/// N(0, adapter_init^2), keeping the initial model close to the frozen
/// prior. The image branch carries an adapter on every layer; the text
/// branch only on the last.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub branch: Branch,
    pub dim: usize,
    pub depth: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub adapter_layers: Vec<usize>,
    pub adapter_init: f64,
    pub frozen_jitter: f64,
}

pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_ADAPTER_INIT: f64 = 0.01;
pub const DEFAULT_FROZEN_JITTER: f64 = 0.05;

pub fn default_hidden(dim: usize) -> usize {
    dim.div_ceil(4)
}

impl ModelSpec {
    pub fn image(dim: usize, lambda: f64) -> Self {
        Self {
            branch: Branch::Image,
            dim,
            depth: DEFAULT_DEPTH,
            hidden: default_hidden(dim),
            lambda,
            adapter_layers: (0..DEFAULT_DEPTH).collect(),
            adapter_init: DEFAULT_ADAPTER_INIT,
            frozen_jitter: DEFAULT_FROZEN_JITTER,
        }
    }

    pub fn text(dim: usize, lambda: f64) -> Self {
        Self {
            branch: Branch::Text,
            adapter_layers: vec![DEFAULT_DEPTH - 1],
            ..Self::image(dim, lambda)
        }
    }

    /// Draws frozen and adapter weights from `rng` in a documented order:
    /// backbone layers first (row-major), then each adapter's w1 then w2.
    pub fn build(&self, rng: &mut RngState) -> Result<EncoderModel> {
        if self.dim == 0 || self.depth == 0 || self.hidden == 0 {
            return Err(Error::InvalidModel(
                "dim, depth, and hidden must be positive".into(),
            ));
        }
        let scale = self.frozen_jitter / (self.dim as f64).sqrt();
        let mut backbone = Vec::with_capacity(self.depth);
        for _ in 0..self.depth {
            let noise = sample_gaussian(rng, self.dim * self.dim, 1.0)?;
            let mut map = LinearMap::identity(self.dim);
            for (v, g) in map.values_mut().iter_mut().zip(noise.values()) {
                *v += scale * g;
            }
            backbone.push(FrozenLayer::new(map, false)?);
        }
        let mut adapters = Vec::with_capacity(self.adapter_layers.len());
        for &layer in &self.adapter_layers {
            let w1 = gaussian_map(rng, self.hidden, self.dim, self.adapter_init)?;
            let w2 = gaussian_map(rng, self.dim, self.hidden, self.adapter_init)?;
            adapters.push(ShiftAdapter::new(layer, w1, w2)?);
        }
        EncoderModel::new(backbone, adapters, self.lambda, self.branch)
    }
}

fn gaussian_map(rng: &mut RngState, rows: usize, cols: usize, sigma: f64) -> Result<LinearMap> {
    let values = sample_gaussian(rng, rows * cols, sigma)?.into_values();
    LinearMap::new(rows, cols, values)
}
