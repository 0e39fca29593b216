//! The over-parameterized network: every candidate operation on every edge,
//! with independent weights per cell (no cell sharing of weights).

use alloc::vec;
use alloc::vec::Vec;

use super::{CellPlan, CellTemplate, FusionSrc, FusionTemplate, NetworkTopology, BACKBONE_OPS};
use crate::rng::{self, Rng};
use crate::tensor::{
    apply_conv_block, apply_primitive, BnParams, ParamId, ParamStore, PrimitiveKind, PrimitiveWeights, Tape, Var,
};
use crate::{Error, Result};

/// `ReLU -> conv(k) -> normalization` unit with fixed geometry.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub w: ParamId,
    pub bn: BnParams,
    pub stride: usize,
    pub leading_relu: bool,
}

impl ConvBn {
    pub fn alloc(
        store: &mut ParamStore,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        leading_relu: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(
            vec![c_out, c_in, k, k],
            init_uniform(rng, c_out * c_in * k * k, c_in * k * k),
            true,
        );
        let bn = BnParams::alloc(store, c_out);
        ConvBn {
            w,
            bn,
            stride,
            leading_relu,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.leading_relu {
            apply_conv_block(tape, x, self.w, self.bn, self.stride, 1)
        } else {
            let wv = tape.param(self.w);
            let y = tape.conv2d(x, wv, None, self.stride, 1);
            let g = tape.param(self.bn.gamma);
            let b = tape.param(self.bn.beta);
            Ok(tape.batchnorm(y, g, b, Some((self.bn.run_mean, self.bn.run_var))))
        }
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.w, self.bn.gamma, self.bn.beta, self.bn.run_mean, self.bn.run_var]
    }
}

fn init_uniform(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / crate::math::sqrt(fan_in as f64);
    (0..n).map(|_| rng::uniform(rng, -bound, bound)).collect()
}

/// One candidate operation bound to an edge, with its weights (if any).
/// `skip` on a striding edge is realized as a stride-2 1×1 convolution.
#[derive(Debug, Clone)]
pub struct OpInstance {
    pub kind: PrimitiveKind,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Option<PrimitiveWeights>,
}

impl OpInstance {
    pub fn alloc(
        store: &mut ParamStore,
        kind: PrimitiveKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let weights = match kind {
            PrimitiveKind::Conv3x3 => Some(PrimitiveWeights::Conv {
                w: store.add(vec![c_out, c_in, 3, 3], init_uniform(rng, c_out * c_in * 9, c_in * 9), true),
                bn: BnParams::alloc(store, c_out),
            }),
            PrimitiveKind::Conv1x1 => Some(PrimitiveWeights::Conv {
                w: store.add(vec![c_out, c_in, 1, 1], init_uniform(rng, c_out * c_in, c_in), true),
                bn: BnParams::alloc(store, c_out),
            }),
            PrimitiveKind::SepConv3x3 | PrimitiveKind::DilSepConv3x3 { .. } => Some(PrimitiveWeights::SepConv {
                dw: store.add(vec![c_in, 3, 3], init_uniform(rng, c_in * 9, 9), true),
                pw: store.add(vec![c_out, c_in, 1, 1], init_uniform(rng, c_out * c_in, c_in), true),
                bn: BnParams::alloc(store, c_out),
            }),
            PrimitiveKind::GlobalPool { .. } => Some(PrimitiveWeights::GlobalPool {
                w: store.add(vec![c_out, c_in, 1, 1], init_uniform(rng, c_out * c_in, c_in), true),
                b: store.add(vec![c_out], vec![0.0; c_out], true),
            }),
            PrimitiveKind::TransposedConvX2 => Some(PrimitiveWeights::TConv {
                w: store.add(vec![c_in, c_out, 2, 2], init_uniform(rng, c_in * c_out * 4, c_in), true),
                bn: BnParams::alloc(store, c_out),
            }),
            // identity on a striding edge becomes a 1x1 stride-2 convolution
            PrimitiveKind::Skip if stride == 2 => Some(PrimitiveWeights::Conv {
                w: store.add(vec![c_out, c_in, 1, 1], init_uniform(rng, c_out * c_in, c_in), true),
                bn: BnParams::alloc(store, c_out),
            }),
            _ => None,
        };
        OpInstance {
            kind,
            stride,
            c_in,
            c_out,
            weights,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.kind == PrimitiveKind::Skip && self.stride == 2 {
            let Some(PrimitiveWeights::Conv { w, bn }) = &self.weights else {
                return Err(Error::MissingWeights("skip@2".into()));
            };
            return apply_conv_block(tape, x, *w, *bn, 2, 1);
        }
        apply_primitive(tape, self.kind, x, self.weights.as_ref(), self.stride, self.c_out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.weights {
            None => vec![],
            Some(PrimitiveWeights::Conv { w, bn }) | Some(PrimitiveWeights::TConv { w, bn }) => {
                vec![*w, bn.gamma, bn.beta, bn.run_mean, bn.run_var]
            }
            Some(PrimitiveWeights::SepConv { dw, pw, bn }) => {
                vec![*dw, *pw, bn.gamma, bn.beta, bn.run_mean, bn.run_var]
            }
            Some(PrimitiveWeights::GlobalPool { w, b }) => vec![*w, *b],
        }
    }
}

/// One cell of the supernet: input preprocessing plus `p × q` operations.
pub struct SuperCell {
    pub template: CellTemplate,
    pub plan: CellPlan,
    pub pre0: ConvBn,
    pub pre1: ConvBn,
    /// `edges[e][m]`: candidate `m` on edge `e`.
    pub edges: Vec<Vec<OpInstance>>,
}

/// The fusion cell: per-branch channel reduction plus searchable edges.
pub struct SuperFusion {
    pub template: FusionTemplate,
    pub channels: usize,
    pub reduces: Vec<ConvBn>,
    pub edges: Vec<Vec<OpInstance>>,
}

pub struct Classifier {
    pub w: ParamId,
    pub b: ParamId,
}

impl Classifier {
    pub fn alloc(store: &mut ParamStore, c_in: usize, classes: usize, rng: &mut Rng) -> Self {
        Classifier {
            w: store.add(vec![classes, c_in, 1, 1], init_uniform(rng, classes * c_in, c_in), true),
            b: store.add(vec![classes], vec![0.0; classes], true),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Var {
        let x = tape.relu(x);
        let wv = tape.param(self.w);
        let bv = tape.param(self.b);
        let y = tape.conv2d(x, wv, Some(bv), 1, 1);
        tape.bilinear(y, out_h, out_w)
    }
}

/// Mask variables for one forward pass: a `p×q` matrix per cell and one row
/// per fusion edge (rows are ragged: 10-wide, or 2-wide on up-edges).
pub struct MaskVars {
    pub cells: Vec<Var>,
    pub fusion: Vec<Var>,
}

/// The full supernet.
pub struct Supernet {
    pub topology: NetworkTopology,
    pub plans: Vec<CellPlan>,
    pub stem: Vec<ConvBn>,
    pub cells: Vec<SuperCell>,
    pub fusion: Option<SuperFusion>,
    pub classifier: Classifier,
}

impl Supernet {
    /// Allocates independent weights for every candidate on every edge of
    /// every cell.
    pub fn build(topology: &NetworkTopology, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        topology.validate()?;
        let plans = topology.cell_plans();
        let c0 = topology.initial_channels;

        let stem = vec![
            ConvBn::alloc(store, 3, c0, 3, 2, false, rng),
            ConvBn::alloc(store, c0, c0, 3, 2, true, rng),
            ConvBn::alloc(store, c0, c0, 3, 1, true, rng),
        ];

        let mut cells = Vec::with_capacity(topology.k);
        for k in 0..topology.k {
            let template = topology.template_for(k);
            let plan = plans[k];
            let c = plan.channels;
            let pre0 = ConvBn::alloc(
                store,
                plan.in_channels[0],
                c,
                1,
                if plan.in0_strides { 2 } else { 1 },
                true,
                rng,
            );
            let pre1 = ConvBn::alloc(store, plan.in_channels[1], c, 1, 1, true, rng);
            let mut edges = Vec::with_capacity(template.p());
            for e in 0..template.p() {
                let stride = template.edge_stride(e);
                let ops = BACKBONE_OPS
                    .iter()
                    .map(|&kind| OpInstance::alloc(store, kind, c, c, stride, rng))
                    .collect();
                edges.push(ops);
            }
            cells.push(SuperCell {
                template,
                plan,
                pre0,
                pre1,
                edges,
            });
        }

        let fusion = if let Some(taps) = topology.fusion_taps {
            let template = FusionTemplate::standard();
            let f = topology.fusion_channels;
            let reduces = taps
                .iter()
                .map(|&t| ConvBn::alloc(store, 2 * plans[t].channels, f, 1, 1, true, rng))
                .collect();
            let mut edges = Vec::with_capacity(template.num_edges());
            for edge in &template.edges {
                let c_in = match edge.src {
                    FusionSrc::Concat(_, _) => 2 * f,
                    _ => f,
                };
                let ops = edge
                    .candidates()
                    .iter()
                    .map(|&kind| OpInstance::alloc(store, kind, c_in, f, 1, rng))
                    .collect();
                edges.push(ops);
            }
            Some(SuperFusion {
                template,
                channels: f,
                reduces,
                edges,
            })
        } else {
            None
        };

        let head_in = if fusion.is_some() {
            topology.fusion_channels
        } else {
            2 * plans[topology.k - 1].channels
        };
        let classifier = Classifier::alloc(store, head_in, topology.num_classes, rng);

        Ok(Supernet {
            topology: topology.clone(),
            plans,
            stem,
            cells,
            fusion,
            classifier,
        })
    }

    /// Mixed forward under the given masks. Terms whose coefficient is
    /// exactly zero are never built, so a one-hot mask computes precisely
    /// the discrete network.
    pub fn forward(&self, tape: &mut Tape, input: Var, masks: &MaskVars) -> Result<Var> {
        let in_shape = tape.shape(input).to_vec();
        if in_shape.len() != 3 || in_shape[0] != 3 {
            return Err(Error::ShapeMismatch("supernet input must be (3,H,W)".into()));
        }
        let (h, w) = (in_shape[1], in_shape[2]);
        let max_stride = 4 * (1 << self.topology.reduction_indices.len());
        if h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "input {h}x{w} not divisible by the network stride {max_stride}"
            )));
        }
        if masks.cells.len() != self.cells.len() {
            return Err(Error::ShapeMismatch("mask count != cell count".into()));
        }

        let mut x = input;
        for s in &self.stem {
            x = s.apply(tape, x)?;
        }

        let mut outs: Vec<Var> = Vec::with_capacity(self.cells.len());
        let (mut s0, mut s1) = (x, x);
        for (k, cell) in self.cells.iter().enumerate() {
            let out = cell_forward(tape, cell, s0, s1, masks.cells[k])?;
            s0 = s1;
            s1 = out;
            outs.push(out);
        }

        let features = if let Some(fusion) = &self.fusion {
            let taps = self.topology.fusion_taps.expect("fusion implies taps");
            let tap_vars = [outs[taps[0]], outs[taps[1]], outs[taps[2]]];
            fusion_forward(tape, fusion, tap_vars, &masks.fusion)?
        } else {
            *outs.last().expect("at least one cell")
        };

        Ok(self.classifier.apply(tape, features, h, w))
    }

    /// One-hot mask constants for a genotype, on the given tape.
    pub fn one_hot_masks(&self, tape: &mut Tape, genotype: &super::Genotype) -> MaskVars {
        let (p, q) = self.topology.pq();
        let cells = genotype
            .cells
            .iter()
            .map(|choices| {
                let mut m = vec![0.0; p * q];
                for (e, &op) in choices.iter().enumerate() {
                    m[e * q + op as usize] = 1.0;
                }
                tape.constant(vec![p, q], m)
            })
            .collect();
        let fusion = if let Some(f) = &self.fusion {
            f.template
                .edges
                .iter()
                .enumerate()
                .map(|(e, edge)| {
                    let wdt = edge.candidates().len();
                    let mut m = vec![0.0; wdt];
                    m[genotype.fusion[e] as usize] = 1.0;
                    tape.constant(vec![1, wdt], m)
                })
                .collect()
        } else {
            Vec::new()
        };
        MaskVars { cells, fusion }
    }
}

/// Eq.-style mixed cell computation: every intermediate node sums the
/// mask-weighted candidate outputs of its incoming edges; the output
/// concatenates the intermediates.
pub fn cell_forward(tape: &mut Tape, cell: &SuperCell, s0: Var, s1: Var, z: Var) -> Result<Var> {
    let (p, q) = (cell.template.p(), cell.template.q());
    if tape.shape(z) != [p, q] {
        return Err(Error::ShapeMismatch(alloc::format!(
            "cell mask must be {p}x{q}, got {:?}",
            tape.shape(z)
        )));
    }
    let x0 = cell.pre0.apply(tape, s0)?;
    let x1 = cell.pre1.apply(tape, s1)?;
    let node_h = tape.shape(x1)[1] / if cell.template.is_reduction { 2 } else { 1 };
    let node_w = tape.shape(x1)[2] / if cell.template.is_reduction { 2 } else { 1 };
    let c = cell.plan.channels;

    let mut nodes: Vec<Var> = vec![x0, x1];
    for node in cell.template.num_inputs..cell.template.num_inputs + cell.template.num_nodes {
        let mut contribs: Vec<Var> = Vec::new();
        for (e, &(from, to)) in cell.template.edges.iter().enumerate() {
            if to != node {
                continue;
            }
            let src = nodes[from];
            let zrow: Vec<f64> = tape.value(z)[e * q..(e + 1) * q].to_vec();
            let mut terms: Vec<Option<Var>> = vec![None; q];
            for (m, op) in cell.edges[e].iter().enumerate() {
                if op.kind == PrimitiveKind::Zero || zrow[m] == 0.0 {
                    continue;
                }
                terms[m] = Some(op.apply(tape, src)?);
            }
            if terms.iter().any(|t| t.is_some()) {
                contribs.push(tape.mix(z, e * q, &terms));
            }
        }
        let val = match contribs.len() {
            0 => tape.zeros(vec![c, node_h, node_w]),
            1 => contribs[0],
            _ => tape.add_n(&contribs),
        };
        nodes.push(val);
    }
    Ok(tape.concat(&nodes[cell.template.num_inputs..]))
}

/// Mixed fusion-cell computation: three branch chains over the reduced taps,
/// dense cross-branch edges, element-wise sum of the final maps.
pub fn fusion_forward(tape: &mut Tape, fusion: &SuperFusion, taps: [Var; 3], zf: &[Var]) -> Result<Var> {
    if zf.len() != fusion.template.num_edges() {
        return Err(Error::ShapeMismatch("fusion mask count".into()));
    }
    let s4 = tape.shape(taps[0]).to_vec();
    let s8 = tape.shape(taps[1]).to_vec();
    let s16 = tape.shape(taps[2]).to_vec();
    if s4[1] != 2 * s8[1] || s8[1] != 2 * s16[1] || s4[2] != 2 * s8[2] || s8[2] != 2 * s16[2] {
        return Err(Error::ShapeMismatch(
            "fusion taps must sit at strides 4/8/16".into(),
        ));
    }
    let mut reduced = Vec::with_capacity(3);
    for (i, &t) in taps.iter().enumerate() {
        reduced.push(fusion.reduces[i].apply(tape, t)?);
    }

    let mut nodes: Vec<Option<Var>> = vec![None; fusion.template.num_nodes];
    for node in 0..fusion.template.num_nodes {
        let mut contribs: Vec<Var> = Vec::new();
        for (e, edge) in fusion.template.edges.iter().enumerate() {
            if edge.dst != node {
                continue;
            }
            let src = match edge.src {
                FusionSrc::Input(i) => reduced[i],
                FusionSrc::Node(n) => nodes[n].expect("template is topologically ordered"),
                FusionSrc::Concat(a, b) => {
                    let (va, vb) = (
                        nodes[a].expect("template is topologically ordered"),
                        nodes[b].expect("template is topologically ordered"),
                    );
                    tape.concat(&[va, vb])
                }
            };
            let zrow: Vec<f64> = tape.value(zf[e]).to_vec();
            let mut terms: Vec<Option<Var>> = vec![None; zrow.len()];
            for (m, op) in fusion.edges[e].iter().enumerate() {
                if zrow[m] == 0.0 {
                    continue;
                }
                terms[m] = Some(op.apply(tape, src)?);
            }
            if terms.iter().any(|t| t.is_some()) {
                contribs.push(tape.mix(zf[e], 0, &terms));
            }
        }
        nodes[node] = Some(match contribs.len() {
            1 => contribs[0],
            _ => tape.add_n(&contribs),
        });
    }
    let outs: Vec<Var> = fusion
        .template
        .out_nodes
        .iter()
        .map(|&n| nodes[n].expect("output nodes computed"))
        .collect();
    Ok(tape.add_n(&outs))
}
