//! Latency lookup tables and the differentiable expected-latency loss.
//!
//! Every searchable slot `(cell, edge, op)` (and each fusion slot) carries a
//! cost in microseconds. The expected latency of a sampled architecture is
//! the mask-weighted sum of those constants, so it is linear in the mask and
//! differentiable in the architecture parameters. Tables are built either by
//! timing each operation (measured mode) or from a deterministic
//! multiply-accumulate proxy (analytic mode, used by tests and CI).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde_json::{json, Value};

use crate::rng::{self, Stream};
use crate::searchspace::{FusionSrc, Genotype, MaskVars, NetworkTopology, BACKBONE_OPS};
use crate::tensor::{ParamStore, PrimitiveKind, Tape, Tensor, Var};
use crate::{Error, Result};

/// Analytic proxy: cost_us = macs * US_PER_MAC + OVERHEAD_US (zero op:
/// overhead only).
pub const US_PER_MAC: f64 = 2e-5;
pub const OVERHEAD_US: f64 = 1.0;
/// Timer granularity acceptable for measured mode.
pub const MAX_TIMER_GRANULARITY_US: f64 = 1.0;

/// Monotonic clock abstraction so measured mode stays host-agnostic.
pub trait Clock {
    fn now_us(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutMeta {
    pub mode: String,
    pub input_h: usize,
    pub input_w: usize,
    pub timing_policy: String,
    pub host: String,
    pub channel_widths: Vec<usize>,
}

/// Cost table covering every searchable slot of one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTable {
    pub topology: NetworkTopology,
    /// `cells[k][e][m]` in microseconds.
    pub cells: Vec<Vec<Vec<f64>>>,
    /// `fusion[e][m]`, ragged (10-wide, 2 on up-edges).
    pub fusion: Vec<Vec<f64>>,
    /// Cost of the non-searchable structure (stem, preprocessing, fusion
    /// input reduction, classifier head).
    pub fixed_us: f64,
    pub meta: LutMeta,
}

// ─── analytic cost model ────────────────────────────────────────────────────

/// Multiply-accumulate proxy counts. Copies and comparisons count one per
/// element so cheap ops order sensibly; `zero` performs no work at all.
pub fn analytic_macs(kind: PrimitiveKind, c_in: usize, c_out: usize, h_in: usize, w_in: usize, stride: usize) -> u64 {
    let (ho, wo) = (h_in / stride, w_in / stride);
    let opx = (ho * wo) as u64;
    let ipx = (h_in * w_in) as u64;
    let (ci, co) = (c_in as u64, c_out as u64);
    match kind {
        PrimitiveKind::Zero => 0,
        PrimitiveKind::Skip => {
            if stride == 2 {
                ci * co * opx // realized as a 1x1 stride-2 convolution
            } else {
                ci * ipx
            }
        }
        PrimitiveKind::MaxPool3x3 => 9 * ci * opx,
        PrimitiveKind::Conv3x3 => 9 * ci * co * opx,
        PrimitiveKind::Conv1x1 => ci * co * opx,
        PrimitiveKind::SepConv3x3 | PrimitiveKind::DilSepConv3x3 { .. } => 9 * ci * opx + ci * co * opx,
        PrimitiveKind::GlobalPool { k } => ci * ipx + ci * co * (k * k) as u64 + 4 * co * ipx,
        PrimitiveKind::BilinearUpsampleX2 => 4 * ci * 4 * ipx,
        PrimitiveKind::TransposedConvX2 => ci * co * 4 * ipx,
    }
}

fn analytic_cost(kind: PrimitiveKind, c_in: usize, c_out: usize, h_in: usize, w_in: usize, stride: usize) -> f64 {
    if kind == PrimitiveKind::Zero {
        return OVERHEAD_US;
    }
    analytic_macs(kind, c_in, c_out, h_in, w_in, stride) as f64 * US_PER_MAC + OVERHEAD_US
}

/// MACs of one dense `k×k` convolution (used for the fixed structure).
fn conv_macs(c_in: usize, c_out: usize, k: usize, out_px: usize) -> u64 {
    (c_in * c_out * k * k * out_px) as u64
}

// ─── building ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LutMode {
    Measured,
    Analytic,
}

impl LutMode {
    pub fn name(self) -> &'static str {
        match self {
            LutMode::Measured => "measured",
            LutMode::Analytic => "analytic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "measured" => Some(LutMode::Measured),
            "analytic" => Some(LutMode::Analytic),
            _ => None,
        }
    }
}

/// Geometry of one searchable slot.
struct SlotShape {
    kind: PrimitiveKind,
    c_in: usize,
    c_out: usize,
    h_in: usize,
    w_in: usize,
    stride: usize,
}

fn slot_shapes(topology: &NetworkTopology, input_h: usize, input_w: usize) -> (Vec<Vec<Vec<SlotShape>>>, Vec<Vec<SlotShape>>) {
    let plans = topology.cell_plans();
    let mut cells = Vec::with_capacity(topology.k);
    for (k, plan) in plans.iter().enumerate() {
        let template = topology.template_for(k);
        let node_h = input_h / plan.out_stride;
        let node_w = input_w / plan.out_stride;
        let mut edges = Vec::with_capacity(template.p());
        for e in 0..template.p() {
            let stride = template.edge_stride(e);
            let ops = BACKBONE_OPS
                .iter()
                .map(|&kind| SlotShape {
                    kind,
                    c_in: plan.channels,
                    c_out: plan.channels,
                    h_in: node_h * stride,
                    w_in: node_w * stride,
                    stride,
                })
                .collect();
            edges.push(ops);
        }
        cells.push(edges);
    }
    let mut fusion = Vec::new();
    if let Some(template) = topology.fusion_template() {
        let f = topology.fusion_channels;
        for (e, edge) in template.edges.iter().enumerate() {
            let src_stride = template.src_stride(e);
            let c_in = match edge.src {
                FusionSrc::Concat(_, _) => 2 * f,
                _ => f,
            };
            fusion.push(
                edge.candidates()
                    .iter()
                    .map(|&kind| SlotShape {
                        kind,
                        c_in,
                        c_out: f,
                        h_in: input_h / src_stride,
                        w_in: input_w / src_stride,
                        stride: 1,
                    })
                    .collect(),
            );
        }
    }
    (cells, fusion)
}

/// Cost of the fixed (non-searchable) structure under the analytic model.
fn fixed_cost(topology: &NetworkTopology, input_h: usize, input_w: usize) -> f64 {
    let plans = topology.cell_plans();
    let mut macs: u64 = 0;
    let mut blocks: u64 = 0;
    let c0 = topology.initial_channels;
    // stem: strides 2, 2, 1
    macs += conv_macs(3, c0, 3, (input_h / 2) * (input_w / 2));
    macs += conv_macs(c0, c0, 3, (input_h / 4) * (input_w / 4));
    macs += conv_macs(c0, c0, 3, (input_h / 4) * (input_w / 4));
    blocks += 3;
    for plan in &plans {
        let s_in = plan.out_stride / if plan.is_reduction { 2 } else { 1 };
        let px = (input_h / s_in) * (input_w / s_in);
        macs += conv_macs(plan.in_channels[0], plan.channels, 1, px);
        macs += conv_macs(plan.in_channels[1], plan.channels, 1, px);
        blocks += 2;
    }
    if let Some(taps) = topology.fusion_taps {
        let f = topology.fusion_channels;
        let mut stride = 4;
        for &t in &taps {
            let px = (input_h / stride) * (input_w / stride);
            macs += conv_macs(2 * plans[t].channels, f, 1, px);
            blocks += 1;
            stride *= 2;
        }
    }
    let head_in = if topology.fusion_taps.is_some() {
        topology.fusion_channels
    } else {
        2 * plans[topology.k - 1].channels
    };
    let head_stride = if topology.fusion_taps.is_some() {
        4
    } else {
        plans[topology.k - 1].out_stride
    };
    let head_px = (input_h / head_stride) * (input_w / head_stride);
    macs += conv_macs(head_in, topology.num_classes, 1, head_px);
    macs += (4 * topology.num_classes * input_h * input_w) as u64; // bilinear restore
    blocks += 2;
    macs as f64 * US_PER_MAC + blocks as f64 * OVERHEAD_US
}

/// Deterministic analytic table.
pub fn build_lut_analytic(topology: &NetworkTopology, input_h: usize, input_w: usize) -> Result<LatencyTable> {
    topology.validate()?;
    let (cell_shapes, fusion_shapes) = slot_shapes(topology, input_h, input_w);
    let cells = cell_shapes
        .iter()
        .map(|edges| {
            edges
                .iter()
                .map(|ops| {
                    ops.iter()
                        .map(|s| analytic_cost(s.kind, s.c_in, s.c_out, s.h_in, s.w_in, s.stride))
                        .collect()
                })
                .collect()
        })
        .collect();
    let fusion = fusion_shapes
        .iter()
        .map(|ops| {
            ops.iter()
                .map(|s| analytic_cost(s.kind, s.c_in, s.c_out, s.h_in, s.w_in, s.stride))
                .collect()
        })
        .collect();
    Ok(LatencyTable {
        topology: topology.clone(),
        cells,
        fusion,
        fixed_us: fixed_cost(topology, input_h, input_w),
        meta: LutMeta {
            mode: LutMode::Analytic.name().into(),
            input_h,
            input_w,
            timing_policy: "mac_proxy_v1".into(),
            host: "analytic".into(),
            channel_widths: topology.cell_plans().iter().map(|p| p.channels).collect(),
        },
    })
}

/// Timed table: per distinct operation shape, 10 warmup runs then the
/// median of 50 timed forward executions on one thread.
pub fn build_lut_measured(
    topology: &NetworkTopology,
    input_h: usize,
    input_w: usize,
    clock: &dyn Clock,
    host: String,
) -> Result<LatencyTable> {
    topology.validate()?;
    check_timer(clock)?;
    let (cell_shapes, fusion_shapes) = slot_shapes(topology, input_h, input_w);

    // shape cache: identical geometry is timed once
    let mut cache: Vec<((PrimitiveKind, usize, usize, usize, usize, usize), f64)> = Vec::new();
    let mut measure = |s: &SlotShape| -> f64 {
        let key = (s.kind, s.c_in, s.c_out, s.h_in, s.w_in, s.stride);
        if let Some((_, v)) = cache.iter().find(|(k, _)| *k == key) {
            return *v;
        }
        let v = time_op(s, clock);
        cache.push((key, v));
        v
    };

    let cells = cell_shapes
        .iter()
        .map(|edges| edges.iter().map(|ops| ops.iter().map(&mut measure).collect()).collect())
        .collect();
    let fusion = fusion_shapes
        .iter()
        .map(|ops| ops.iter().map(&mut measure).collect())
        .collect();
    Ok(LatencyTable {
        topology: topology.clone(),
        cells,
        fusion,
        // the fixed structure keeps the analytic estimate: it is constant in
        // the mask, so only searchable slots need real timings
        fixed_us: fixed_cost(topology, input_h, input_w),
        meta: LutMeta {
            mode: LutMode::Measured.name().into(),
            input_h,
            input_w,
            timing_policy: "warmup10_median50".into(),
            host,
            channel_widths: topology.cell_plans().iter().map(|p| p.channels).collect(),
        },
    })
}

fn check_timer(clock: &dyn Clock) -> Result<()> {
    let mut granularity = f64::INFINITY;
    let mut last = clock.now_us();
    for _ in 0..10_000 {
        let t = clock.now_us();
        if t > last {
            granularity = granularity.min(t - last);
            if granularity <= MAX_TIMER_GRANULARITY_US {
                return Ok(());
            }
        }
        last = t;
    }
    Err(Error::TimerTooCoarse {
        granularity_us: granularity,
    })
}

fn time_op(s: &SlotShape, clock: &dyn Clock) -> f64 {
    let mut rng = rng::stream(0xbe9c, Stream::NetInit);
    let mut store = ParamStore::new();
    let op = crate::searchspace::OpInstance::alloc(&mut store, s.kind, s.c_in, s.c_out, s.stride, &mut rng);
    let input: Vec<f64> = (0..s.c_in * s.h_in * s.w_in)
        .map(|_| rng::uniform(&mut rng, -1.0, 1.0))
        .collect();
    let run = || {
        let mut tape = Tape::new(&store, true);
        let x = tape.constant(vec![s.c_in, s.h_in, s.w_in], input.clone());
        let y = op.apply(&mut tape, x).expect("op applies");
        core::hint::black_box(tape.value(y)[0]);
    };
    for _ in 0..10 {
        run();
    }
    let mut times = Vec::with_capacity(50);
    for _ in 0..50 {
        let t0 = clock.now_us();
        run();
        let t1 = clock.now_us();
        times.push(t1 - t0);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let median = (times[24] + times[25]) / 2.0;
    median.max(1e-3) // entries must stay positive
}

// ─── lookups & expected latency ─────────────────────────────────────────────

impl LatencyTable {
    pub fn validate_against(&self, topology: &NetworkTopology) -> Result<()> {
        if &self.topology != topology {
            return Err(Error::LutTopologyMismatch(
                "table was built for a different topology".into(),
            ));
        }
        Ok(())
    }

    /// All entries strictly positive and complete for the topology.
    pub fn validate(&self) -> Result<()> {
        let (p, q) = self.topology.pq();
        if self.cells.len() != self.topology.k {
            return Err(Error::LutMissingEntry(format!(
                "{} cells covered, topology has {}",
                self.cells.len(),
                self.topology.k
            )));
        }
        for (k, edges) in self.cells.iter().enumerate() {
            if edges.len() != p {
                return Err(Error::LutMissingEntry(format!("cell {k}")));
            }
            for (e, ops) in edges.iter().enumerate() {
                if ops.len() != q {
                    return Err(Error::LutMissingEntry(format!("cell {k} edge {e}")));
                }
                if ops.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::LutMissingEntry(format!("cell {k} edge {e}: non-positive entry")));
                }
            }
        }
        let widths = self.topology.fusion_widths();
        if self.fusion.len() != widths.len() {
            return Err(Error::LutMissingEntry("fusion edge count".into()));
        }
        for (e, (ops, &w)) in self.fusion.iter().zip(widths.iter()).enumerate() {
            if ops.len() != w || ops.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::LutMissingEntry(format!("fusion edge {e}")));
            }
        }
        if !(self.fixed_us > 0.0) {
            return Err(Error::LutMissingEntry("fixed structure cost".into()));
        }
        Ok(())
    }

    /// Flat cost row for one cell, matching a `p×q` mask.
    pub fn cell_costs_flat(&self, k: usize) -> Vec<f64> {
        self.cells[k].iter().flatten().copied().collect()
    }
}

/// Expected latency of one cell under a row-stochastic mask (pure form).
pub fn expected_cell_latency(z: &Tensor, lut: &LatencyTable, k: usize) -> Result<f64> {
    let (p, q) = lut.topology.pq();
    if z.shape() != [p, q] {
        return Err(Error::LutMissingEntry(format!("mask shape {:?} for cell {k}", z.shape())));
    }
    let costs = lut.cell_costs_flat(k);
    Ok(z.data().iter().zip(costs.iter()).map(|(&a, &b)| a * b).sum())
}

/// Expected latency of the whole sampled architecture (pure form):
/// sum over cells and fusion edges plus the fixed structure.
pub fn expected_total_latency(cell_masks: &[Tensor], fusion_masks: &[Vec<f64>], lut: &LatencyTable) -> Result<f64> {
    if cell_masks.len() != lut.cells.len() || fusion_masks.len() != lut.fusion.len() {
        return Err(Error::LutMissingEntry("mask count".into()));
    }
    let mut total = lut.fixed_us;
    for (k, z) in cell_masks.iter().enumerate() {
        total += expected_cell_latency(z, lut, k)?;
    }
    for (e, z) in fusion_masks.iter().enumerate() {
        if z.len() != lut.fusion[e].len() {
            return Err(Error::LutMissingEntry(format!("fusion edge {e}")));
        }
        total += z.iter().zip(lut.fusion[e].iter()).map(|(&a, &b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// Tape form: a scalar node, differentiable in every mask.
pub fn expected_total_latency_on_tape(tape: &mut Tape, masks: &MaskVars, lut: &LatencyTable) -> Result<Var> {
    if masks.cells.len() != lut.cells.len() || masks.fusion.len() != lut.fusion.len() {
        return Err(Error::LutMissingEntry("mask count".into()));
    }
    let mut parts: Vec<Var> = Vec::with_capacity(masks.cells.len() + masks.fusion.len() + 1);
    for (k, &z) in masks.cells.iter().enumerate() {
        let costs = lut.cell_costs_flat(k);
        if tape.numel(z) != costs.len() {
            return Err(Error::LutMissingEntry(format!("cell {k} mask width")));
        }
        parts.push(tape.dot_const(z, costs));
    }
    for (e, &z) in masks.fusion.iter().enumerate() {
        let costs = lut.fusion[e].clone();
        if tape.numel(z) != costs.len() {
            return Err(Error::LutMissingEntry(format!("fusion edge {e} mask width")));
        }
        parts.push(tape.dot_const(z, costs));
    }
    parts.push(tape.constant(vec![1], vec![lut.fixed_us]));
    Ok(tape.add_n(&parts))
}

/// Latency of a discrete genotype: selected entries summed (pruned edges
/// contribute the zero op's overhead) plus the fixed structure.
pub fn genotype_latency(g: &Genotype, lut: &LatencyTable) -> Result<f64> {
    lut.validate_against(&g.topology)?;
    let mut total = lut.fixed_us;
    for (k, row) in g.cells.iter().enumerate() {
        for (e, &op) in row.iter().enumerate() {
            total += lut.cells[k][e][op as usize];
        }
    }
    for (e, &op) in g.fusion.iter().enumerate() {
        total += lut.fusion[e][op as usize];
    }
    Ok(total)
}

/// Loss decomposition per step: `total = ce + beta * ln(lat_us)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub lat_us: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(ce: f64, lat_us: f64, beta: f64) -> Result<Self> {
        Ok(LossTerms {
            ce,
            lat_us,
            beta,
            total: total_loss(ce, lat_us, beta)?,
        })
    }
}

/// `ce + beta * ln(lat_us)`, `lat_us` in microseconds.
pub fn total_loss(ce: f64, lat_us: f64, beta: f64) -> Result<f64> {
    if !(lat_us > 0.0) {
        return Err(Error::InvalidConfig(format!("latency must be positive, got {lat_us}")));
    }
    Ok(ce + beta * crate::math::ln(lat_us))
}

// ─── canonical serialization ────────────────────────────────────────────────

/// Canonical text form: compact JSON, sorted keys, entries in microseconds
/// as decimal literals, trailing LF.
pub fn lut_serialize(lut: &LatencyTable) -> String {
    let mut entries = serde_json::Map::new();
    for (k, edges) in lut.cells.iter().enumerate() {
        for (e, ops) in edges.iter().enumerate() {
            for (m, &v) in ops.iter().enumerate() {
                entries.insert(format!("c{k:02}.e{e}.{}", BACKBONE_OPS[m].name()), json!(v));
            }
        }
    }
    if let Some(template) = lut.topology.fusion_template() {
        for (e, ops) in lut.fusion.iter().enumerate() {
            for (m, &v) in ops.iter().enumerate() {
                entries.insert(
                    format!("fusion.e{e:02}.{}", template.edges[e].candidates()[m].name()),
                    json!(v),
                );
            }
        }
    }
    let v = json!({
        "entries": Value::Object(entries),
        "metadata": {
            "mode": lut.meta.mode,
            "input_height": lut.meta.input_h,
            "input_width": lut.meta.input_w,
            "timing_policy": lut.meta.timing_policy,
            "host": lut.meta.host,
            "channel_widths": lut.meta.channel_widths,
            "fixed_us": lut.fixed_us,
            "topology": serde_json::to_value(&lut.topology).expect("topology serializes"),
        },
    });
    let mut s = serde_json::to_string(&v).expect("lut serializes");
    s.push('\n');
    s
}

pub fn lut_parse(text: &str) -> Result<LatencyTable> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("invalid JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| Error::Parse("expected a JSON object".into()))?;
    let meta_v = obj
        .get("metadata")
        .and_then(|m| m.as_object())
        .ok_or_else(|| Error::Parse("missing metadata".into()))?;
    let topology: NetworkTopology = serde_json::from_value(
        meta_v
            .get("topology")
            .cloned()
            .ok_or_else(|| Error::Parse("metadata.topology missing".into()))?,
    )
    .map_err(|e| Error::Parse(format!("bad topology: {e}")))?;
    let fixed_us = meta_v
        .get("fixed_us")
        .and_then(|x| x.as_f64())
        .ok_or_else(|| Error::Parse("metadata.fixed_us missing".into()))?;
    let get_str = |key: &str| -> Result<String> {
        meta_v
            .get(key)
            .and_then(|x| x.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Parse(format!("metadata.{key} missing")))
    };
    let get_usize = |key: &str| -> Result<usize> {
        meta_v
            .get(key)
            .and_then(|x| x.as_u64())
            .map(|x| x as usize)
            .ok_or_else(|| Error::Parse(format!("metadata.{key} missing")))
    };
    let meta = LutMeta {
        mode: get_str("mode")?,
        input_h: get_usize("input_height")?,
        input_w: get_usize("input_width")?,
        timing_policy: get_str("timing_policy")?,
        host: get_str("host")?,
        channel_widths: meta_v
            .get("channel_widths")
            .and_then(|x| x.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_u64()).map(|x| x as usize).collect())
            .ok_or_else(|| Error::Parse("metadata.channel_widths missing".into()))?,
    };

    let entries = obj
        .get("entries")
        .and_then(|e| e.as_object())
        .ok_or_else(|| Error::Parse("missing entries".into()))?;
    let lookup = |key: String| -> Result<f64> {
        entries
            .get(&key)
            .and_then(|x| x.as_f64())
            .ok_or_else(|| Error::LutMissingEntry(key.clone()))
    };

    let (p, q) = topology.pq();
    let mut cells = Vec::with_capacity(topology.k);
    for k in 0..topology.k {
        let mut edges = Vec::with_capacity(p);
        for e in 0..p {
            let mut ops = Vec::with_capacity(q);
            for m in 0..q {
                ops.push(lookup(format!("c{k:02}.e{e}.{}", BACKBONE_OPS[m].name()))?);
            }
            edges.push(ops);
        }
        cells.push(edges);
    }
    let mut fusion = Vec::new();
    if let Some(template) = topology.fusion_template() {
        for (e, edge) in template.edges.iter().enumerate() {
            let mut ops = Vec::with_capacity(edge.candidates().len());
            for kind in edge.candidates() {
                ops.push(lookup(format!("fusion.e{e:02}.{}", kind.name()))?);
            }
            fusion.push(ops);
        }
    }

    let lut = LatencyTable {
        topology,
        cells,
        fusion,
        fixed_us,
        meta,
    };
    lut.validate()?;
    Ok(lut)
}
