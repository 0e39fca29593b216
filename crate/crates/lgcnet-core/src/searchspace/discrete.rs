//! The decoded network: only the chosen operation on each edge, pruned
//! (zero) edges dropped, with its own parameter store.

use alloc::vec;
use alloc::vec::Vec;

use super::supernet::{Classifier as SuperClassifier, ConvBn, OpInstance, Supernet};
use super::{FusionSrc, FusionTemplate, Genotype, NetworkTopology, BACKBONE_OPS};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{ParamId, ParamStore, PrimitiveKind, Tape, Var};
use crate::{Error, Result};

struct DiscreteCell {
    plan: super::CellPlan,
    template: super::CellTemplate,
    pre0: ConvBn,
    pre1: ConvBn,
    /// `(edge index, op)` for every non-pruned edge, edge order preserved.
    ops: Vec<(usize, OpInstance)>,
}

struct DiscreteFusion {
    template: FusionTemplate,
    reduces: Vec<ConvBn>,
    ops: Vec<OpInstance>,
}

/// A discrete architecture with independent weights, used for finetuning
/// and for latency/parameter accounting.
pub struct DiscreteNet {
    pub topology: NetworkTopology,
    pub genotype: Genotype,
    pub store: ParamStore,
    stem: Vec<ConvBn>,
    cells: Vec<DiscreteCell>,
    fusion: Option<DiscreteFusion>,
    classifier: SuperClassifier,
}

impl DiscreteNet {
    /// Fresh random initialization (the finetuning entry point).
    pub fn new_random(genotype: &Genotype, seed: u64) -> Result<Self> {
        let mut rng = rng::substream(seed, Stream::Finetune, 0);
        Self::build(genotype, &mut rng)
    }

    fn build(genotype: &Genotype, rng: &mut Rng) -> Result<Self> {
        let topology = genotype.topology.clone();
        topology.validate()?;
        genotype.validate()?;
        let plans = topology.cell_plans();
        let mut store = ParamStore::new();
        let c0 = topology.initial_channels;

        let stem = vec![
            ConvBn::alloc(&mut store, 3, c0, 3, 2, false, rng),
            ConvBn::alloc(&mut store, c0, c0, 3, 2, true, rng),
            ConvBn::alloc(&mut store, c0, c0, 3, 1, true, rng),
        ];

        let mut cells = Vec::with_capacity(topology.k);
        for k in 0..topology.k {
            let template = topology.template_for(k);
            let plan = plans[k];
            let c = plan.channels;
            let pre0 = ConvBn::alloc(
                &mut store,
                plan.in_channels[0],
                c,
                1,
                if plan.in0_strides { 2 } else { 1 },
                true,
                rng,
            );
            let pre1 = ConvBn::alloc(&mut store, plan.in_channels[1], c, 1, 1, true, rng);
            let mut ops = Vec::new();
            for (e, &op_id) in genotype.cells[k].iter().enumerate() {
                let kind = BACKBONE_OPS[op_id as usize];
                if kind == PrimitiveKind::Zero {
                    continue; // pruned
                }
                let stride = template.edge_stride(e);
                ops.push((e, OpInstance::alloc(&mut store, kind, c, c, stride, rng)));
            }
            cells.push(DiscreteCell {
                plan,
                template,
                pre0,
                pre1,
                ops,
            });
        }

        let fusion = if let Some(taps) = topology.fusion_taps {
            let template = FusionTemplate::standard();
            let f = topology.fusion_channels;
            let reduces = taps
                .iter()
                .map(|&t| ConvBn::alloc(&mut store, 2 * plans[t].channels, f, 1, 1, true, rng))
                .collect();
            let mut ops = Vec::with_capacity(template.num_edges());
            for (e, edge) in template.edges.iter().enumerate() {
                let kind = edge.candidates()[genotype.fusion[e] as usize];
                let c_in = match edge.src {
                    FusionSrc::Concat(_, _) => 2 * f,
                    _ => f,
                };
                ops.push(OpInstance::alloc(&mut store, kind, c_in, f, 1, rng));
            }
            Some(DiscreteFusion {
                template,
                reduces,
                ops,
            })
        } else {
            None
        };

        let head_in = if fusion.is_some() {
            topology.fusion_channels
        } else {
            2 * plans[topology.k - 1].channels
        };
        let classifier = SuperClassifier::alloc(&mut store, head_in, topology.num_classes, rng);

        Ok(DiscreteNet {
            topology,
            genotype: genotype.clone(),
            store,
            stem,
            cells,
            fusion,
            classifier,
        })
    }

    /// Same structure, but weights copied from the matching supernet slots
    /// (selected candidates only). Running statistics are copied as well.
    pub fn from_supernet(supernet: &Supernet, super_store: &ParamStore, genotype: &Genotype) -> Result<Self> {
        let mut net = Self::new_random(genotype, 0)?;
        let mut copies: Vec<(ParamId, ParamId)> = Vec::new();
        for (a, b) in supernet.stem.iter().zip(net.stem.iter()) {
            copies.extend(a.param_ids().iter().zip(b.param_ids().iter()).map(|(x, y)| (*x, *y)));
        }
        for (k, (sc, dc)) in supernet.cells.iter().zip(net.cells.iter()).enumerate() {
            copies.extend(sc.pre0.param_ids().iter().zip(dc.pre0.param_ids()).map(|(x, y)| (*x, y)));
            copies.extend(sc.pre1.param_ids().iter().zip(dc.pre1.param_ids()).map(|(x, y)| (*x, y)));
            for (e, op) in &dc.ops {
                let sel = genotype.cells[k][*e] as usize;
                let src_op = &sc.edges[*e][sel];
                copies.extend(src_op.param_ids().into_iter().zip(op.param_ids()));
            }
        }
        if let (Some(sf), Some(df)) = (&supernet.fusion, &net.fusion) {
            for (a, b) in sf.reduces.iter().zip(df.reduces.iter()) {
                copies.extend(a.param_ids().iter().zip(b.param_ids()).map(|(x, y)| (*x, y)));
            }
            for (e, op) in df.ops.iter().enumerate() {
                let sel = genotype.fusion[e] as usize;
                copies.extend(sf.edges[e][sel].param_ids().into_iter().zip(op.param_ids()));
            }
        }
        copies.push((supernet.classifier.w, net.classifier.w));
        copies.push((supernet.classifier.b, net.classifier.b));
        for (src, dst) in copies {
            let v = super_store.value(src).to_vec();
            net.store.value_mut(dst).copy_from_slice(&v);
        }
        Ok(net)
    }

    /// Forward pass on a caller-provided tape over `self.store`.
    ///
    /// Matches the supernet's one-hot mixed forward bit for bit: intermediate
    /// nodes sum their surviving incoming edges in edge order, nodes with no
    /// surviving edge are explicit zeros.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let in_shape = tape.shape(input).to_vec();
        if in_shape.len() != 3 || in_shape[0] != 3 {
            return Err(Error::ShapeMismatch("input must be (3,H,W)".into()));
        }
        let (h, w) = (in_shape[1], in_shape[2]);

        let mut x = input;
        for s in &self.stem {
            x = s.apply(tape, x)?;
        }

        let mut outs: Vec<Var> = Vec::with_capacity(self.cells.len());
        let (mut s0, mut s1) = (x, x);
        for cell in &self.cells {
            let x0 = cell.pre0.apply(tape, s0)?;
            let x1 = cell.pre1.apply(tape, s1)?;
            let red = cell.template.is_reduction;
            let node_h = tape.shape(x1)[1] / if red { 2 } else { 1 };
            let node_w = tape.shape(x1)[2] / if red { 2 } else { 1 };
            let mut nodes: Vec<Var> = vec![x0, x1];
            for node in cell.template.num_inputs..cell.template.num_inputs + cell.template.num_nodes {
                let mut contribs: Vec<Var> = Vec::new();
                for (e, op) in &cell.ops {
                    if cell.template.edges[*e].1 != node {
                        continue;
                    }
                    let src = nodes[cell.template.edges[*e].0];
                    contribs.push(op.apply(tape, src)?);
                }
                let val = match contribs.len() {
                    0 => tape.zeros(vec![cell.plan.channels, node_h, node_w]),
                    1 => contribs[0],
                    _ => tape.add_n(&contribs),
                };
                nodes.push(val);
            }
            let out = tape.concat(&nodes[cell.template.num_inputs..]);
            s0 = s1;
            s1 = out;
            outs.push(out);
        }

        let features = if let Some(fusion) = &self.fusion {
            let taps = self.topology.fusion_taps.expect("fusion implies taps");
            let mut reduced = Vec::with_capacity(3);
            for (i, &t) in taps.iter().enumerate() {
                reduced.push(fusion.reduces[i].apply(tape, outs[t])?);
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
                        FusionSrc::Node(n) => nodes[n].expect("topological order"),
                        FusionSrc::Concat(a, b) => {
                            let (va, vb) = (nodes[a].expect("order"), nodes[b].expect("order"));
                            tape.concat(&[va, vb])
                        }
                    };
                    contribs.push(fusion.ops[e].apply(tape, src)?);
                }
                nodes[node] = Some(match contribs.len() {
                    1 => contribs[0],
                    _ => tape.add_n(&contribs),
                });
            }
            let outs3: Vec<Var> = fusion
                .template
                .out_nodes
                .iter()
                .map(|&n| nodes[n].expect("outputs"))
                .collect();
            tape.add_n(&outs3)
        } else {
            *outs.last().expect("cells")
        };

        Ok(self.classifier.apply(tape, features, h, w))
    }

    /// Exact count of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }
}


/// Exact trainable-parameter count of a genotype's discrete network.
pub fn count_params(genotype: &Genotype) -> Result<usize> {
    Ok(DiscreteNet::new_random(genotype, 0)?.param_count())
}
