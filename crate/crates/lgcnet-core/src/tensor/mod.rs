//! Dense `f64` tensors, the autodiff tape, and the candidate operations.
//!
//! The ten operation kinds in [`PrimitiveKind`] are the full candidate set
//! used by the backbone cells, the fusion cell, and the fusion up-edges.
//! Parametric kinds apply `ReLU -> convolution -> per-channel normalization`
//! (global-pooling kinds use a biased 1×1 convolution instead of the
//! normalization, whose statistics would be degenerate on a pooled map).

pub mod gradcheck;
#[cfg(test)]
mod tests;
mod kernels;
mod tape;

pub use kernels::{bilinear_fwd as kernels_bilinear, matmul as kernels_matmul, softmax_rows as kernels_softmax_rows};
pub use tape::{BnBatchStats, Gradients, Tape, Var};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u16 = 255;

// ─── value type ─────────────────────────────────────────────────────────────

/// A dense row-major tensor. `grad` is present iff the tensor participates
/// in differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} does not describe {} elements",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Attach a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row- or column-wise softmax of a rank-2 tensor, max-subtracted.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if x.shape().len() != 2 || axis > 1 {
        return Err(Error::ShapeMismatch("softmax expects a matrix and axis 0|1".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let (r, c) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; r * c];
    if axis == 1 {
        kernels::softmax_rows(x.data(), r, c, &mut out);
    } else {
        // transpose, softmax rows, transpose back
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x.data[i * c + j];
            }
        }
        let mut st = vec![0.0; r * c];
        kernels::softmax_rows(&t, c, r, &mut st);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = st[j * r + i];
            }
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Mean negative log-likelihood over non-ignored pixels of `(K, H, W)` logits.
/// All pixels ignored yields 0.
pub fn cross_entropy(logits: &Tensor, labels: &[u16], ignore: u16) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 3 || labels.len() != s[1] * s[2] {
        return Err(Error::ShapeMismatch("cross_entropy expects (K,H,W) logits".into()));
    }
    let k = s[0];
    for &y in labels {
        if y != ignore && y as usize >= k {
            return Err(Error::ShapeMismatch(format!("label {y} out of range for {k} classes")));
        }
    }
    let (sum, count) = kernels::ce_sum_fwd(logits.data(), k, s[1] * s[2], labels, ignore);
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

// ─── parameter store ────────────────────────────────────────────────────────

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(u32);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

struct ParamEntry {
    data: Vec<f64>,
    shape: Vec<usize>,
    trainable: bool,
}

/// Flat storage for network parameters and persistent state (running
/// statistics). Allocation order is deterministic and ids are dense.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ParamId(self.entries.len() as u32);
        self.entries.push(ParamEntry {
            data,
            shape,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.index()].data
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.index()].data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.index()].shape
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.index()].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.trainable(*id))
    }

    /// Count of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|x| x.is_finite()))
    }
}

// ─── candidate operations ───────────────────────────────────────────────────

/// Every operation kind searchable on some edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    MaxPool3x3,
    Skip,
    Conv3x3,
    Zero,
    SepConv3x3,
    DilSepConv3x3 { dilation: usize },
    Conv1x1,
    GlobalPool { k: usize },
    BilinearUpsampleX2,
    TransposedConvX2,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::MaxPool3x3 => "max_pool3x3",
            PrimitiveKind::Skip => "skip",
            PrimitiveKind::Conv3x3 => "conv3x3",
            PrimitiveKind::Zero => "zero",
            PrimitiveKind::SepConv3x3 => "sep_conv3x3",
            PrimitiveKind::DilSepConv3x3 { dilation: 2 } => "dil_sep_conv3x3_d2",
            PrimitiveKind::DilSepConv3x3 { dilation: 4 } => "dil_sep_conv3x3_d4",
            PrimitiveKind::DilSepConv3x3 { dilation: 8 } => "dil_sep_conv3x3_d8",
            PrimitiveKind::DilSepConv3x3 { dilation: 12 } => "dil_sep_conv3x3_d12",
            PrimitiveKind::DilSepConv3x3 { .. } => "dil_sep_conv3x3_invalid",
            PrimitiveKind::Conv1x1 => "conv1x1",
            PrimitiveKind::GlobalPool { k: 1 } => "global_pool_1",
            PrimitiveKind::GlobalPool { k: 2 } => "global_pool_2",
            PrimitiveKind::GlobalPool { k: 5 } => "global_pool_5",
            PrimitiveKind::GlobalPool { .. } => "global_pool_invalid",
            PrimitiveKind::BilinearUpsampleX2 => "bilinear_upsample_x2",
            PrimitiveKind::TransposedConvX2 => "transposed_conv_x2",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "max_pool3x3" => PrimitiveKind::MaxPool3x3,
            "skip" => PrimitiveKind::Skip,
            "conv3x3" => PrimitiveKind::Conv3x3,
            "zero" => PrimitiveKind::Zero,
            "sep_conv3x3" => PrimitiveKind::SepConv3x3,
            "dil_sep_conv3x3_d2" => PrimitiveKind::DilSepConv3x3 { dilation: 2 },
            "dil_sep_conv3x3_d4" => PrimitiveKind::DilSepConv3x3 { dilation: 4 },
            "dil_sep_conv3x3_d8" => PrimitiveKind::DilSepConv3x3 { dilation: 8 },
            "dil_sep_conv3x3_d12" => PrimitiveKind::DilSepConv3x3 { dilation: 12 },
            "conv1x1" => PrimitiveKind::Conv1x1,
            "global_pool_1" => PrimitiveKind::GlobalPool { k: 1 },
            "global_pool_2" => PrimitiveKind::GlobalPool { k: 2 },
            "global_pool_5" => PrimitiveKind::GlobalPool { k: 5 },
            "bilinear_upsample_x2" => PrimitiveKind::BilinearUpsampleX2,
            "transposed_conv_x2" => PrimitiveKind::TransposedConvX2,
            _ => return None,
        })
    }

    /// Whether the kind carries weights at the given stride. `skip` at
    /// stride 2 must be remapped by the caller before weights are allocated.
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            PrimitiveKind::Conv3x3
                | PrimitiveKind::Conv1x1
                | PrimitiveKind::SepConv3x3
                | PrimitiveKind::DilSepConv3x3 { .. }
                | PrimitiveKind::GlobalPool { .. }
                | PrimitiveKind::TransposedConvX2
        )
    }

    /// Drawn dashed in graph renderings: no learned transform of content.
    pub fn is_lightweight(self) -> bool {
        matches!(
            self,
            PrimitiveKind::Zero | PrimitiveKind::Skip | PrimitiveKind::MaxPool3x3
        )
    }

    pub fn dilation(self) -> usize {
        match self {
            PrimitiveKind::DilSepConv3x3 { dilation } => dilation,
            _ => 1,
        }
    }
}

/// Per-channel normalization parameter set.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

impl BnParams {
    pub fn alloc(store: &mut ParamStore, c: usize) -> Self {
        BnParams {
            gamma: store.add(vec![c], vec![1.0; c], true),
            beta: store.add(vec![c], vec![0.0; c], true),
            run_mean: store.add(vec![c], vec![0.0; c], false),
            run_var: store.add(vec![c], vec![1.0; c], false),
        }
    }
}

/// Weights owned by one parametric operation instance.
#[derive(Debug, Clone)]
pub enum PrimitiveWeights {
    /// Dense convolution (3×3 or 1×1; also the stride-2 realization of skip).
    Conv { w: ParamId, bn: BnParams },
    /// Depthwise 3×3 (possibly dilated) followed by pointwise 1×1.
    SepConv {
        dw: ParamId,
        pw: ParamId,
        bn: BnParams,
    },
    /// Adaptive pool to k×k, biased 1×1 convolution, bilinear restore.
    GlobalPool { w: ParamId, b: ParamId },
    /// Transposed 2×2 stride-2 convolution.
    TConv { w: ParamId, bn: BnParams },
}

/// Applies one candidate operation as a tape subgraph.
///
/// `c_out` is the configured output channel count; `weights` must be present
/// exactly for parametric kinds. Stride 2 is only valid for kinds that can
/// reduce (`skip` must be remapped to a 1×1 convolution by the caller).
pub fn apply_primitive(
    tape: &mut Tape,
    kind: PrimitiveKind,
    input: Var,
    weights: Option<&PrimitiveWeights>,
    stride: usize,
    c_out: usize,
) -> Result<Var> {
    let in_shape = tape.shape(input).to_vec();
    if in_shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "primitive input must be (C,H,W), got {in_shape:?}"
        )));
    }
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    if !(stride == 1 || stride == 2) || (h % stride != 0 || w % stride != 0) {
        return Err(Error::InvalidStride {
            op: kind.name().into(),
            stride,
        });
    }
    if kind.is_parametric() && weights.is_none() {
        return Err(Error::MissingWeights(kind.name().into()));
    }
    let channel_preserving = |c_in: usize, c_out: usize, what: &str| -> Result<()> {
        if c_in != c_out {
            return Err(Error::ShapeMismatch(format!(
                "{what} preserves channels but {c_in} != {c_out}"
            )));
        }
        Ok(())
    };

    match kind {
        PrimitiveKind::Zero => Ok(tape.zeros(vec![c_out, h / stride, w / stride])),
        PrimitiveKind::Skip => {
            if stride != 1 {
                return Err(Error::InvalidStride {
                    op: "skip (remap to 1x1 conv for reductions)".into(),
                    stride,
                });
            }
            channel_preserving(c_in, c_out, "skip")?;
            Ok(input)
        }
        PrimitiveKind::MaxPool3x3 => {
            channel_preserving(c_in, c_out, "max_pool3x3")?;
            Ok(tape.maxpool3(input, stride))
        }
        PrimitiveKind::BilinearUpsampleX2 => {
            if stride != 1 {
                return Err(Error::InvalidStride {
                    op: kind.name().into(),
                    stride,
                });
            }
            channel_preserving(c_in, c_out, "bilinear_upsample_x2")?;
            Ok(tape.bilinear(input, 2 * h, 2 * w))
        }
        PrimitiveKind::Conv3x3 | PrimitiveKind::Conv1x1 => {
            let Some(PrimitiveWeights::Conv { w: wid, bn }) = weights else {
                return Err(Error::MissingWeights(kind.name().into()));
            };
            apply_conv_block(tape, input, *wid, *bn, stride, 1)
        }
        PrimitiveKind::SepConv3x3 | PrimitiveKind::DilSepConv3x3 { .. } => {
            let Some(PrimitiveWeights::SepConv { dw, pw, bn }) = weights else {
                return Err(Error::MissingWeights(kind.name().into()));
            };
            let x = tape.relu(input);
            let dwv = tape.param(*dw);
            let x = tape.dwconv3(x, dwv, stride, kind.dilation());
            let pwv = tape.param(*pw);
            let x = tape.conv2d(x, pwv, None, 1, 1);
            let g = tape.param(bn.gamma);
            let b = tape.param(bn.beta);
            Ok(tape.batchnorm(x, g, b, Some((bn.run_mean, bn.run_var))))
        }
        PrimitiveKind::GlobalPool { k } => {
            if stride != 1 {
                return Err(Error::InvalidStride {
                    op: kind.name().into(),
                    stride,
                });
            }
            let Some(PrimitiveWeights::GlobalPool { w: wid, b: bid }) = weights else {
                return Err(Error::MissingWeights(kind.name().into()));
            };
            let x = tape.relu(input);
            let x = tape.adaptive_avg(x, k, k);
            let wv = tape.param(*wid);
            let bv = tape.param(*bid);
            let x = tape.conv2d(x, wv, Some(bv), 1, 1);
            Ok(tape.bilinear(x, h, w))
        }
        PrimitiveKind::TransposedConvX2 => {
            if stride != 1 {
                return Err(Error::InvalidStride {
                    op: kind.name().into(),
                    stride,
                });
            }
            let Some(PrimitiveWeights::TConv { w: wid, bn }) = weights else {
                return Err(Error::MissingWeights(kind.name().into()));
            };
            let x = tape.relu(input);
            let wv = tape.param(*wid);
            let x = tape.tconv2(x, wv);
            let g = tape.param(bn.gamma);
            let b = tape.param(bn.beta);
            Ok(tape.batchnorm(x, g, b, Some((bn.run_mean, bn.run_var))))
        }
    }
}

/// `ReLU -> dense conv -> normalization`, the shared parametric block.
pub fn apply_conv_block(
    tape: &mut Tape,
    input: Var,
    w: ParamId,
    bn: BnParams,
    stride: usize,
    dilation: usize,
) -> Result<Var> {
    let x = tape.relu(input);
    let wv = tape.param(w);
    let x = tape.conv2d(x, wv, None, stride, dilation);
    let g = tape.param(bn.gamma);
    let b = tape.param(bn.beta);
    Ok(tape.batchnorm(x, g, b, Some((bn.run_mean, bn.run_var))))
}
