//! The search space: cell DAG, network topology, dense fusion template, the
//! over-parameterized supernet, discrete networks, and genotypes.

mod discrete;
mod genotype;
mod supernet;

pub use discrete::{count_params, DiscreteNet};
pub use genotype::{decode, genotype_hash, genotype_parse, genotype_serialize, random_genotype, Genotype, GENOTYPE_VERSION};
pub use supernet::{cell_forward, fusion_forward, ConvBn, MaskVars, OpInstance, Supernet};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::PrimitiveKind;
use crate::{Error, Result};

/// Candidate set searched on every backbone cell edge, in id order.
pub const BACKBONE_OPS: [PrimitiveKind; 8] = [
    PrimitiveKind::MaxPool3x3,
    PrimitiveKind::Skip,
    PrimitiveKind::Conv3x3,
    PrimitiveKind::Zero,
    PrimitiveKind::SepConv3x3,
    PrimitiveKind::DilSepConv3x3 { dilation: 2 },
    PrimitiveKind::DilSepConv3x3 { dilation: 4 },
    PrimitiveKind::DilSepConv3x3 { dilation: 8 },
];

/// Candidate set searched on fusion edges, in id order.
pub const FUSION_OPS: [PrimitiveKind; 10] = [
    PrimitiveKind::Conv1x1,
    PrimitiveKind::Conv3x3,
    PrimitiveKind::SepConv3x3,
    PrimitiveKind::DilSepConv3x3 { dilation: 2 },
    PrimitiveKind::DilSepConv3x3 { dilation: 4 },
    PrimitiveKind::DilSepConv3x3 { dilation: 8 },
    PrimitiveKind::DilSepConv3x3 { dilation: 12 },
    PrimitiveKind::GlobalPool { k: 1 },
    PrimitiveKind::GlobalPool { k: 2 },
    PrimitiveKind::GlobalPool { k: 5 },
];

/// Candidates on the fusion cell's ×2 upsampling edges, in id order.
pub const UP_OPS: [PrimitiveKind; 2] = [PrimitiveKind::TransposedConvX2, PrimitiveKind::BilinearUpsampleX2];

// ─── cell template ──────────────────────────────────────────────────────────

/// The backbone cell DAG. Nodes 0 and 1 are the two inputs, nodes 2..2+N the
/// intermediates; the output concatenates the intermediates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellTemplate {
    pub num_inputs: usize,
    pub num_nodes: usize,
    /// `(from, to)` pairs; every intermediate node takes all earlier nodes.
    pub edges: Vec<(usize, usize)>,
    pub is_reduction: bool,
}

impl CellTemplate {
    pub fn new(is_reduction: bool) -> Self {
        // N = 2: x1 <- {i1, i2}, x2 <- {i1, i2, x1}
        CellTemplate {
            num_inputs: 2,
            num_nodes: 2,
            edges: vec![(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)],
            is_reduction,
        }
    }

    /// Edge count `p`.
    pub fn p(&self) -> usize {
        self.edges.len()
    }

    /// Candidate count `q`.
    pub fn q(&self) -> usize {
        BACKBONE_OPS.len()
    }

    /// In a reduction cell, exactly the edges leaving an input node stride.
    pub fn edge_stride(&self, edge: usize) -> usize {
        if self.is_reduction && self.edges[edge].0 < self.num_inputs {
            2
        } else {
            1
        }
    }
}

// ─── network topology ───────────────────────────────────────────────────────

/// Static configuration of the supernet.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTopology {
    /// Number of backbone cells.
    pub k: usize,
    /// Cell width of the first stage (also the stem width).
    pub initial_channels: usize,
    /// Width factor applied at each reduction stage.
    pub channel_multiplier: usize,
    /// Cells whose input-adjacent edges stride.
    pub reduction_indices: Vec<usize>,
    /// Cells feeding the fusion cell (must sit at strides 4, 8, 16);
    /// `None` disables multi-scale aggregation.
    pub fusion_taps: Option<[usize; 3]>,
    /// Branch width inside the fusion cell.
    pub fusion_channels: usize,
    pub num_classes: usize,
}

impl Default for NetworkTopology {
    fn default() -> Self {
        NetworkTopology {
            k: 14,
            initial_channels: 8,
            channel_multiplier: 2,
            reduction_indices: vec![1, 8],
            fusion_taps: Some([0, 7, 13]),
            fusion_channels: 48,
            num_classes: 19,
        }
    }
}

/// Shape//stride bookkeeping for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellPlan {
    /// Operating width of the cell's nodes.
    pub channels: usize,
    /// Channels of the two inputs (cell k-2 / k-1 outputs, or the stem).
    pub in_channels: [usize; 2],
    /// The k-2 input needs a stride-2 preprocess when the k-1 input already
    /// sits one reduction deeper.
    pub in0_strides: bool,
    pub is_reduction: bool,
    /// Stride of the cell's output relative to the network input.
    pub out_stride: usize,
}

impl NetworkTopology {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidTopology("need at least one cell".into()));
        }
        if self.initial_channels == 0 || self.channel_multiplier == 0 || self.fusion_channels == 0 {
            return Err(Error::InvalidTopology("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidTopology("need at least two classes".into()));
        }
        let mut prev = None;
        for &r in &self.reduction_indices {
            if r >= self.k {
                return Err(Error::InvalidTopology(format!("reduction index {r} out of range")));
            }
            if prev.is_some_and(|p| p >= r) {
                return Err(Error::InvalidTopology("reduction indices must be strictly increasing".into()));
            }
            prev = Some(r);
        }
        if let Some(taps) = self.fusion_taps {
            let plans = self.cell_plans();
            let mut want = 4usize;
            for &t in &taps {
                if t >= self.k {
                    return Err(Error::InvalidTopology(format!("fusion tap {t} out of range")));
                }
                if plans[t].out_stride != want {
                    return Err(Error::InvalidTopology(format!(
                        "fusion tap {t} sits at stride {}, expected {want}",
                        plans[t].out_stride
                    )));
                }
                want *= 2;
            }
        }
        Ok(())
    }

    /// Cell width / stride plan, derived from the reduction indices.
    pub fn cell_plans(&self) -> Vec<CellPlan> {
        let mut plans = Vec::with_capacity(self.k);
        let stem = (self.initial_channels, 4usize);
        let mut outs: Vec<(usize, usize)> = Vec::with_capacity(self.k); // (channels, stride)
        let mut c = self.initial_channels;
        for k in 0..self.k {
            let is_reduction = self.reduction_indices.contains(&k);
            if is_reduction {
                c *= self.channel_multiplier;
            }
            let in1 = if k >= 1 { outs[k - 1] } else { stem };
            let in0 = if k >= 2 { outs[k - 2] } else { stem };
            let out_stride = in1.1 * if is_reduction { 2 } else { 1 };
            plans.push(CellPlan {
                channels: c,
                in_channels: [in0.0, in1.0],
                in0_strides: in0.1 < in1.1,
                is_reduction,
                out_stride,
            });
            outs.push((2 * c, out_stride));
        }
        plans
    }

    pub fn template_for(&self, k: usize) -> CellTemplate {
        CellTemplate::new(self.reduction_indices.contains(&k))
    }

    /// p and q of the backbone cells.
    pub fn pq(&self) -> (usize, usize) {
        let t = CellTemplate::new(false);
        (t.p(), t.q())
    }

    pub fn fusion_template(&self) -> Option<FusionTemplate> {
        self.fusion_taps.map(|_| FusionTemplate::standard())
    }

    /// Candidate-row widths of the fusion edges (empty when fusion is off).
    pub fn fusion_widths(&self) -> Vec<usize> {
        self.fusion_template()
            .map(|t| t.edges.iter().map(|e| e.candidates().len()).collect())
            .unwrap_or_default()
    }
}

// ─── fusion template ────────────────────────────────────────────────────────

/// Source feeding a fusion edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionSrc {
    /// One of the three reduced tap inputs (0 = stride 4, 1 = 8, 2 = 16).
    Input(usize),
    /// An internal node.
    Node(usize),
    /// Channel concatenation of two internal nodes.
    Concat(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionEdge {
    pub src: FusionSrc,
    pub dst: usize,
    /// Restricted to the two ×2 upsampling candidates.
    pub is_up: bool,
}

impl FusionEdge {
    pub fn candidates(&self) -> &'static [PrimitiveKind] {
        if self.is_up {
            &UP_OPS
        } else {
            &FUSION_OPS
        }
    }
}

/// The dense-connected aggregation cell: three 3-node branch chains rooted
/// at the stride-4/8/16 taps, upsampling edges exactly at the stride
/// transitions, and four dense cross-branch edges (two of them from the
/// earlier branches' mid feature maps, one concatenated).
///
/// Nodes 0-2 belong to the stride-4 branch, 3-5 to the stride-8 branch
/// (strides 8, 4, 4), 6-8 to the stride-16 branch (strides 16, 8, 4).
/// The output is the element-wise sum of nodes 2, 5 and 8.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionTemplate {
    pub num_nodes: usize,
    pub edges: Vec<FusionEdge>,
    pub out_nodes: [usize; 3],
    /// Stride of every node relative to the network input.
    pub node_strides: Vec<usize>,
}

impl FusionTemplate {
    pub fn standard() -> Self {
        use FusionSrc::*;
        let e = |src, dst, is_up| FusionEdge { src, dst, is_up };
        FusionTemplate {
            num_nodes: 9,
            edges: vec![
                e(Input(0), 0, false), // stride-4 chain
                e(Node(0), 1, false),
                e(Node(1), 2, false),
                e(Input(1), 3, false), // stride-8 chain
                e(Node(3), 4, true),   // 8 -> 4
                e(Node(4), 5, false),
                e(Input(2), 6, false), // stride-16 chain
                e(Node(6), 7, true),   // 16 -> 8
                e(Node(7), 8, true),   // 8 -> 4
                e(Node(0), 4, false),  // dense: early stride-4 feature into branch 1
                e(Node(3), 7, false),  // dense: early stride-8 feature into branch 2
                e(Node(1), 5, false),  // dense: branch-0 mid into branch 1
                e(Concat(1, 4), 8, false), // dense: branch-0 and branch-1 mids into branch 2
            ],
            out_nodes: [2, 5, 8],
            node_strides: vec![4, 4, 4, 8, 4, 4, 16, 8, 4],
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Stride at which an edge's source features live.
    pub fn src_stride(&self, edge: usize) -> usize {
        match self.edges[edge].src {
            FusionSrc::Input(0) => 4,
            FusionSrc::Input(1) => 8,
            FusionSrc::Input(_) => 16,
            FusionSrc::Node(n) => self.node_strides[n],
            FusionSrc::Concat(a, b) => {
                debug_assert_eq!(self.node_strides[a], self.node_strides[b]);
                self.node_strides[a]
            }
        }
    }
}

/// Key naming one searchable slot; used by latency tables and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SlotKey {
    Cell { cell: usize, edge: usize, op: usize },
    Fusion { edge: usize, op: usize },
}

impl SlotKey {
    pub fn format(&self, topo_kind: KeyOps) -> String {
        match (self, topo_kind) {
            (SlotKey::Cell { cell, edge, op }, KeyOps::Backbone) => {
                format!("c{cell}.e{edge}.{}", BACKBONE_OPS[*op].name())
            }
            (SlotKey::Fusion { edge, op }, KeyOps::Fusion(true)) => {
                format!("fusion.e{edge}.{}", UP_OPS[*op].name())
            }
            (SlotKey::Fusion { edge, op }, KeyOps::Fusion(false)) => {
                format!("fusion.e{edge}.{}", FUSION_OPS[*op].name())
            }
            _ => unreachable!("key kind mismatch"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum KeyOps {
    Backbone,
    Fusion(bool),
}

#[cfg(test)]
mod tests;
