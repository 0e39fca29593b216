//! Discrete architectures and their canonical text form.
//!
//! The canonical form is compact JSON with lexicographically sorted keys,
//! LF line endings and a trailing newline; serializing the same genotype
//! twice yields identical bytes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde_json::{json, Value};

use super::{FusionTemplate, NetworkTopology, BACKBONE_OPS};
use crate::ggm::{ggm_update_on_tape, GgmMode, GgmWeights};
use crate::relax::ArchParams;
use crate::tensor::{ParamStore, PrimitiveKind, Tape};
use crate::{Error, Result};

pub const GENOTYPE_VERSION: &str = "1";

/// Index of `zero` / `skip` in the backbone candidate list.
const ZERO_ID: u8 = 3;
const SKIP_ID: u8 = 1;

/// A decoded architecture: one chosen operation per edge. Edges whose
/// choice is `zero` are recorded here and dropped ("pruned") when the
/// discrete network is built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    pub version: String,
    pub topology: NetworkTopology,
    /// `cells[k][e]` indexes [`BACKBONE_OPS`].
    pub cells: Vec<Vec<u8>>,
    /// `fusion[e]` indexes the edge's candidate list (empty iff fusion off).
    pub fusion: Vec<u8>,
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let (p, q) = self.topology.pq();
        if self.version != GENOTYPE_VERSION {
            return Err(Error::Parse(format!("unsupported genotype version {:?}", self.version)));
        }
        if self.cells.len() != self.topology.k {
            return Err(Error::Parse(format!(
                "genotype has {} cells, topology wants {}",
                self.cells.len(),
                self.topology.k
            )));
        }
        for (k, row) in self.cells.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Parse(format!("cell {k} has {} edges, expected {p}", row.len())));
            }
            for (e, &op) in row.iter().enumerate() {
                if op as usize >= q {
                    return Err(Error::Parse(format!("cell {k} edge {e}: op id {op} out of range")));
                }
            }
        }
        let widths = self.topology.fusion_widths();
        if self.fusion.len() != widths.len() {
            return Err(Error::Parse(format!(
                "genotype has {} fusion edges, topology wants {}",
                self.fusion.len(),
                widths.len()
            )));
        }
        for (e, (&op, &w)) in self.fusion.iter().zip(widths.iter()).enumerate() {
            if op as usize >= w {
                return Err(Error::Parse(format!("fusion edge {e}: op id {op} out of range")));
            }
        }
        Ok(())
    }

    /// Zero-chosen edges are recorded but pruned from the discrete network.
    pub fn is_pruned(&self, cell: usize, edge: usize) -> bool {
        self.cells[cell][edge] == ZERO_ID
    }

    pub fn cell_op(&self, cell: usize, edge: usize) -> PrimitiveKind {
        BACKBONE_OPS[self.cells[cell][edge] as usize]
    }

    pub fn fusion_op(&self, template: &FusionTemplate, edge: usize) -> PrimitiveKind {
        template.edges[edge].candidates()[self.fusion[edge] as usize]
    }
}

// ─── canonical serialization ────────────────────────────────────────────────

/// Canonical UTF-8 text: compact JSON, sorted keys, trailing LF.
pub fn genotype_serialize(g: &Genotype) -> String {
    let template = g.topology.fusion_template();
    let cells: Vec<Value> = g
        .cells
        .iter()
        .map(|row| {
            Value::Array(
                row.iter()
                    .map(|&op| Value::String(BACKBONE_OPS[op as usize].name().to_string()))
                    .collect(),
            )
        })
        .collect();
    let fusion: Vec<Value> = match &template {
        Some(t) => g
            .fusion
            .iter()
            .enumerate()
            .map(|(e, &op)| Value::String(t.edges[e].candidates()[op as usize].name().to_string()))
            .collect(),
        None => vec![],
    };
    let v = json!({
        "version": g.version,
        "topology": serde_json::to_value(&g.topology).expect("topology serializes"),
        "cells": cells,
        "fusion": fusion,
    });
    // serde_json's default map is ordered, so dumping is canonical
    let mut s = serde_json::to_string(&v).expect("genotype serializes");
    s.push('\n');
    s
}

/// Parse and fully validate the canonical text form.
pub fn genotype_parse(text: &str) -> Result<Genotype> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("invalid JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| Error::Parse("expected a JSON object".into()))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "version" | "topology" | "cells" | "fusion") {
            return Err(Error::Parse(format!("unknown key {key:?}")));
        }
    }
    let version = obj
        .get("version")
        .and_then(|x| x.as_str())
        .ok_or_else(|| Error::Parse("missing version".into()))?
        .to_string();
    if version != GENOTYPE_VERSION {
        return Err(Error::Parse(format!("unsupported genotype version {version:?}")));
    }
    let topology: NetworkTopology = serde_json::from_value(
        obj.get("topology")
            .cloned()
            .ok_or_else(|| Error::Parse("missing topology".into()))?,
    )
    .map_err(|e| Error::Parse(format!("bad topology: {e}")))?;

    let cells_v = obj
        .get("cells")
        .and_then(|x| x.as_array())
        .ok_or_else(|| Error::Parse("missing cells".into()))?;
    let mut cells = Vec::with_capacity(cells_v.len());
    for (k, row_v) in cells_v.iter().enumerate() {
        let row_v = row_v
            .as_array()
            .ok_or_else(|| Error::Parse(format!("cell {k} is not a list")))?;
        let mut row = Vec::with_capacity(row_v.len());
        for (e, op_v) in row_v.iter().enumerate() {
            let name = op_v
                .as_str()
                .ok_or_else(|| Error::Parse(format!("cell {k} edge {e}: op must be a string")))?;
            let id = BACKBONE_OPS
                .iter()
                .position(|k2| k2.name() == name)
                .ok_or_else(|| Error::Parse(format!("cell {k} edge {e}: unknown op {name:?}")))?;
            row.push(id as u8);
        }
        cells.push(row);
    }

    let fusion_v = obj
        .get("fusion")
        .and_then(|x| x.as_array())
        .ok_or_else(|| Error::Parse("missing fusion".into()))?;
    let template = topology.fusion_template();
    let mut fusion = Vec::with_capacity(fusion_v.len());
    match &template {
        Some(t) => {
            if fusion_v.len() != t.num_edges() {
                return Err(Error::Parse(format!(
                    "fusion has {} edges, template wants {}",
                    fusion_v.len(),
                    t.num_edges()
                )));
            }
            for (e, op_v) in fusion_v.iter().enumerate() {
                let name = op_v
                    .as_str()
                    .ok_or_else(|| Error::Parse(format!("fusion edge {e}: op must be a string")))?;
                let id = t.edges[e]
                    .candidates()
                    .iter()
                    .position(|k2| k2.name() == name)
                    .ok_or_else(|| Error::Parse(format!("fusion edge {e}: unknown op {name:?}")))?;
                fusion.push(id as u8);
            }
        }
        None => {
            if !fusion_v.is_empty() {
                return Err(Error::Parse("topology has no fusion cell but fusion ops given".into()));
            }
        }
    }

    let g = Genotype {
        version,
        topology,
        cells,
        fusion,
    };
    g.validate()?;
    Ok(g)
}

/// Stable 64-bit FNV-1a hash of the canonical form, as 16 hex digits.
/// Used to give reports an order-independent sort key.
pub fn genotype_hash(g: &Genotype) -> String {
    let bytes = genotype_serialize(g);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ─── decoding ───────────────────────────────────────────────────────────────

/// Decodes the search state into a genotype.
///
/// One guided pass updates each cell's parameters from its predecessor
/// (mirroring training), then every edge takes the arg-max operation, ties
/// broken toward the lowest op id. A cell whose every edge chose `zero`
/// gets `skip` on its strongest zero edge so the network stays connected.
pub fn decode(
    store: &ParamStore,
    arch: &ArchParams,
    ggm: Option<&GgmWeights>,
    topology: &NetworkTopology,
    cascade: bool,
) -> Result<Genotype> {
    let (p, q) = topology.pq();
    debug_assert_eq!((p, q), (arch.p, arch.q));

    // alpha' per cell: raw alpha, plus one guided pass when enabled
    let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(topology.k);
    let use_ggm = ggm.is_some_and(|g| g.mode != GgmMode::None && g.gamma != 0.0) && !arch.shared;
    if use_ggm {
        let weights = ggm.expect("checked");
        let mut tape = Tape::new(store, false);
        let mut prev_raw = None;
        for k in 0..topology.k {
            let alpha = arch.alpha_for(store, k, topology.reduction_indices.contains(&k));
            let cur = tape.constant_from(&alpha);
            let updated = match prev_raw {
                None => cur,
                Some(prev) => ggm_update_on_tape(&mut tape, cur, prev, weights, k - 1)?,
            };
            alphas.push(tape.value(updated).to_vec());
            prev_raw = Some(if cascade { updated } else { cur });
        }
    } else {
        for k in 0..topology.k {
            alphas.push(
                arch.alpha_for(store, k, topology.reduction_indices.contains(&k))
                    .data()
                    .to_vec(),
            );
        }
    }

    let mut cells = Vec::with_capacity(topology.k);
    for alpha in &alphas {
        let mut row = Vec::with_capacity(p);
        for e in 0..p {
            row.push(argmax_lowest(&alpha[e * q..(e + 1) * q]) as u8);
        }
        // disconnected cell: revive the strongest zero edge as skip
        if row.iter().all(|&op| op == ZERO_ID) {
            let mut best_e = 0;
            let mut best_v = f64::NEG_INFINITY;
            for e in 0..p {
                let v = alpha[e * q + ZERO_ID as usize];
                if v > best_v {
                    best_v = v;
                    best_e = e;
                }
            }
            row[best_e] = SKIP_ID;
        }
        cells.push(row);
    }

    let fusion = (0..arch.fusion.len())
        .map(|e| argmax_lowest(&arch.fusion_alpha(store, e)) as u8)
        .collect();

    let g = Genotype {
        version: GENOTYPE_VERSION.to_string(),
        topology: topology.clone(),
        cells,
        fusion,
    };
    g.validate()?;
    Ok(g)
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Uniformly random genotype (one op per edge, all candidates equally
/// likely, including `zero`).
pub fn random_genotype(topology: &NetworkTopology, rng: &mut crate::rng::Rng) -> Genotype {
    let (p, q) = topology.pq();
    let cells = (0..topology.k)
        .map(|_| (0..p).map(|_| crate::rng::below(rng, q) as u8).collect())
        .collect();
    let fusion = topology
        .fusion_widths()
        .iter()
        .map(|&w| crate::rng::below(rng, w) as u8)
        .collect();
    Genotype {
        version: GENOTYPE_VERSION.to_string(),
        topology: topology.clone(),
        cells,
        fusion,
    }
}
