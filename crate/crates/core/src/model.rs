//! Learned conditional velocity field: an MLP on `[x, t, embed(cond)]`.
//!
//! All parameters live in one flat `Vec<f64>` in declaration order:
//!
//! 1. condition embedding table, `(K + 1) × e`, row-major; row `K` is the
//!    null condition,
//! 2. for every dense layer: weights `out × in` row-major, then `out` biases.
//!
//! Hidden layers use SiLU; the output layer is linear. The same order is
//! used by the checkpoint format and by the optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Condition, VelocityField};
use crate::numerics::RngStream;

/// Stream id used for parameter initialisation.
const INIT_STREAM: u64 = 0x1A17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

fn default_embed_dim() -> usize {
    8
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            embed_dim: default_embed_dim(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseSlot {
    inputs: usize,
    outputs: usize,
    /// offset of the weight block; biases follow immediately
    offset: usize,
}

impl DenseSlot {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Pre-activations and activations of one forward pass.
struct Tape {
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// One item for [`MlpVelocityField::backward`].
#[derive(Debug, Clone)]
pub struct BackwardItem {
    pub x: Vec<f64>,
    pub t: f64,
    pub cond: Condition,
    /// `forward(x, t, cond) − target`
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpVelocityField {
    dim: usize,
    num_labels: usize,
    embed_dim: usize,
    hidden: Vec<usize>,
    layers: Vec<DenseSlot>,
    params: Vec<f64>,
}

impl MlpVelocityField {
    /// All-zero parameters.
    pub fn zeros(dim: usize, num_labels: usize, spec: &ModelSpec) -> Result<Self> {
        if dim == 0 || num_labels == 0 || spec.embed_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::Config(
                "model needs dim, labels, embed_dim and every hidden width >= 1".into(),
            ));
        }
        let mut offset = (num_labels + 1) * spec.embed_dim;
        let mut inputs = dim + 1 + spec.embed_dim;
        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        for &outputs in spec.hidden.iter().chain(std::iter::once(&dim)) {
            layers.push(DenseSlot {
                inputs,
                outputs,
                offset,
            });
            offset += inputs * outputs + outputs;
            inputs = outputs;
        }
        Ok(Self {
            dim,
            num_labels,
            embed_dim: spec.embed_dim,
            hidden: spec.hidden.clone(),
            layers,
            params: vec![0.0; offset],
        })
    }

    /// Seeded initialisation: weights and biases uniform in
    /// `±1/sqrt(fan_in)`, embedding rows uniform in `±1`.
    pub fn new(dim: usize, num_labels: usize, spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut field = Self::zeros(dim, num_labels, spec)?;
        let mut rng = RngStream::new(seed, INIT_STREAM);
        let embed_len = (num_labels + 1) * spec.embed_dim;
        for p in &mut field.params[..embed_len] {
            *p = rng.uniform_range(-1.0, 1.0);
        }
        for slot in field.layers.clone() {
            let bound = 1.0 / (slot.inputs as f64).sqrt();
            for p in &mut field.params[slot.weights().start..slot.biases().end] {
                *p = rng.uniform_range(-bound, bound);
            }
        }
        Ok(field)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter range of the embedding row used for `cond`.
    pub fn embedding_range(&self, cond: Condition) -> Result<std::ops::Range<usize>> {
        let row = self.embedding_row(cond)?;
        Ok(row * self.embed_dim..(row + 1) * self.embed_dim)
    }

    fn embedding_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Label(y) if y < self.num_labels => Ok(y),
            Condition::Label(y) => Err(Error::Label {
                label: y,
                num_labels: self.num_labels,
            }),
            Condition::Null => Ok(self.num_labels),
        }
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: x.len(),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Range {
                what: "t",
                value: t,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(())
    }

    fn run(&self, x: &[f64], t: f64, cond: Condition) -> Result<Tape> {
        self.check_input(x, t)?;
        let emb = self.embedding_range(cond)?;
        let mut input = Vec::with_capacity(self.dim + 1 + self.embed_dim);
        input.extend_from_slice(x);
        input.push(t);
        input.extend_from_slice(&self.params[emb]);

        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(input);
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            let w = &self.params[slot.weights()];
            let b = &self.params[slot.biases()];
            let a = &activations[l];
            let z: Vec<f64> = (0..slot.outputs)
                .map(|o| {
                    let row = &w[o * slot.inputs..(o + 1) * slot.inputs];
                    let mut s = b[o];
                    for (wi, ai) in row.iter().zip(a) {
                        s += wi * ai;
                    }
                    s
                })
                .collect();
            let out = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| silu(v)).collect()
            };
            pre.push(z);
            activations.push(out);
        }
        Ok(Tape { activations, pre })
    }

    pub fn forward(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        let mut tape = self.run(x, t, cond)?;
        Ok(tape.activations.pop().expect("at least one layer"))
    }

    pub fn forward_batch(&self, items: &[(Vec<f64>, f64, Condition)]) -> Result<Vec<Vec<f64>>> {
        items.iter().map(|(x, t, c)| self.forward(x, *t, *c)).collect()
    }

    /// Accumulate `∂(½‖r‖²)/∂θ` for a residual `r` into `grad`, reusing a tape.
    fn accumulate(&self, tape: &Tape, cond: Condition, residual: &[f64], grad: &mut [f64]) -> Result<()> {
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = residual.to_vec();
        for l in (0..self.layers.len()).rev() {
            let slot = self.layers[l];
            if l != last {
                for (d, z) in delta.iter_mut().zip(&tape.pre[l]) {
                    *d *= silu_grad(*z);
                }
            }
            let a = &tape.activations[l];
            let (wr, br) = (slot.weights(), slot.biases());
            {
                let gw = &mut grad[wr.clone()];
                for o in 0..slot.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * slot.inputs..(o + 1) * slot.inputs];
                    for (g, ai) in row.iter_mut().zip(a) {
                        *g += d * ai;
                    }
                }
            }
            for (g, d) in grad[br].iter_mut().zip(&delta) {
                *g += d;
            }
            let w = &self.params[wr];
            let mut prev = vec![0.0; slot.inputs];
            for o in 0..slot.outputs {
                let d = delta[o];
                let row = &w[o * slot.inputs..(o + 1) * slot.inputs];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += d * wi;
                }
            }
            delta = prev;
        }
        // delta now holds ∂/∂input; the tail belongs to the embedding row
        let emb = self.embedding_range(cond)?;
        for (g, d) in grad[emb].iter_mut().zip(&delta[self.dim + 1..]) {
            *g += d;
        }
        Ok(())
    }

    /// Exact gradient of `½ Σ ‖residual‖²` over the batch.
    pub fn backward(&self, batch: &[BackwardItem]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        for item in batch {
            if item.residual.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    actual: item.residual.len(),
                });
            }
            let tape = self.run(&item.x, item.t, item.cond)?;
            self.accumulate(&tape, item.cond, &item.residual, &mut grad)?;
        }
        Ok(grad)
    }

    /// Forward, residual against `target`, and gradient accumulation in one
    /// pass. Returns `‖output − target‖²`.
    pub(crate) fn forward_backward(
        &self,
        x: &[f64],
        t: f64,
        cond: Condition,
        target: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        let tape = self.run(x, t, cond)?;
        let out = tape.activations.last().expect("output layer");
        let residual: Vec<f64> = out.iter().zip(target).map(|(o, y)| o - y).collect();
        let sq = residual.iter().map(|r| r * r).sum();
        self.accumulate(&tape, cond, &residual, grad)?;
        Ok(sq)
    }
}

impl VelocityField for MlpVelocityField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn velocity(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        self.forward(x, t, cond)
    }
}

/// Training metadata stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: u64,
    pub final_loss: f64,
    pub seed: u64,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGV1";

/// Serialize to the little-endian checkpoint layout:
///
/// ```text
/// "FGV1"
/// u32 d, u32 K, u32 e, u32 n_hidden, u32 × n_hidden widths
/// u64 epochs, f64 final_loss, u64 seed
/// u64 n_params, f64 × n_params
/// ```
pub fn save(field: &MlpVelocityField, meta: &TrainingMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * field.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [field.dim, field.num_labels, field.embed_dim, field.hidden.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &w in &field.hidden {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&meta.epochs.to_le_bytes());
    out.extend_from_slice(&meta.final_loss.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&(field.params.len() as u64).to_le_bytes());
    for p in &field.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint. Nothing is returned unless the whole file validates.
pub fn load(bytes: &[u8]) -> Result<(MlpVelocityField, TrainingMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if &magic[..3] != b"FGV" {
        return Err(Error::Format("bad magic".into()));
    }
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let d = r.u32("dim")? as usize;
    let k = r.u32("labels")? as usize;
    let e = r.u32("embed_dim")? as usize;
    let n_hidden = r.u32("layer count")? as usize;
    if n_hidden > 1024 {
        return Err(Error::Format(format!("implausible layer count {n_hidden}")));
    }
    let hidden = (0..n_hidden)
        .map(|_| r.u32("width").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let meta = TrainingMeta {
        epochs: r.u64("epochs")?,
        final_loss: r.f64("final loss")?,
        seed: r.u64("seed")?,
    };
    let n_params = r.u64("parameter count")? as usize;
    let spec = ModelSpec { hidden, embed_dim: e };
    let mut field = MlpVelocityField::zeros(d, k, &spec).map_err(|e| Error::Format(e.to_string()))?;
    if n_params != field.params.len() {
        return Err(Error::Format(format!(
            "header implies {} parameters, file declares {n_params}",
            field.params.len()
        )));
    }
    for p in field.params.iter_mut() {
        *p = r.f64("parameters")?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if field.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Format("non-finite parameter".into()));
    }
    Ok((field, meta))
}
