//! Graph-guided communication of architecture parameters between adjacent
//! cells.
//!
//! Each cell's `p×q` parameter matrix is updated from its predecessor's:
//!
//! ```text
//! alpha'_k = alpha_k + gamma * Phi2( A * Phi1(alpha_{k-1}) * W + Phi1(alpha_{k-1}) )
//! A        = row_softmax( (alpha_k w1) (alpha_{k-1} w2)^T )
//! ```
//!
//! `A` is the row-stochastic similarity graph between the cells' edges, `W`
//! is the per-pair graph weight, and `Phi1`/`Phi2` are affine embeddings
//! into and out of a `d`-dimensional space. The module exists only during
//! search; decoded genotypes carry none of it.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{self, Rng};
use crate::tensor::{kernels_softmax_rows, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// How (and whether) adjacent cells exchange parameter information.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgmMode {
    /// Reasoning graph over edges, built from edge similarity (the default).
    EdgeSimilarity,
    /// Reasoning graph with one node per (edge, op) entry.
    OperationIdentity,
    /// Plain affine communication: the graph term is dropped.
    Fc,
    /// No communication.
    None,
}

impl GgmMode {
    pub fn name(self) -> &'static str {
        match self {
            GgmMode::EdgeSimilarity => "edge_similarity",
            GgmMode::OperationIdentity => "operation_identity",
            GgmMode::Fc => "fc",
            GgmMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "edge_similarity" => GgmMode::EdgeSimilarity,
            "operation_identity" => GgmMode::OperationIdentity,
            "fc" => GgmMode::Fc,
            "none" => GgmMode::None,
            _ => return None,
        })
    }
}

/// Trainable state of the guided module. Exists only during search.
#[derive(Debug, Clone)]
pub struct GgmWeights {
    pub mode: GgmMode,
    /// Fusion coefficient between the cell's own parameters and the message.
    pub gamma: f64,
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Edge-similarity transforms, `q×q` each.
    pub w1: Option<ParamId>,
    pub w2: Option<ParamId>,
    /// Affine embedding `in -> d` (`in` = q, or 1 in operation-identity mode).
    pub phi1_w: ParamId,
    pub phi1_b: ParamId,
    /// Affine readout `d -> out`, zero-initialized so the first update is a
    /// no-op and the residual branch grows from zero.
    pub phi2_w: ParamId,
    pub phi2_b: ParamId,
    /// One graph weight `d×d` per adjacent cell pair (empty in `Fc` mode).
    pub w_gcn: Vec<ParamId>,
}

impl GgmWeights {
    /// Allocates weights for `num_pairs` adjacent pairs of cells whose
    /// parameter matrices are `p×q`. Returns `None` for [`GgmMode::None`].
    pub fn alloc(
        store: &mut ParamStore,
        mode: GgmMode,
        q: usize,
        dim: usize,
        gamma: f64,
        num_pairs: usize,
        rng: &mut Rng,
    ) -> Option<Self> {
        if mode == GgmMode::None {
            return None;
        }
        let emb_in = if mode == GgmMode::OperationIdentity { 1 } else { q };
        let mut uni = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| rng::uniform(rng, -bound, bound)).collect()
        };
        let (w1, w2) = if mode == GgmMode::EdgeSimilarity {
            let b = 1.0 / crate::math::sqrt(q as f64);
            (
                Some(store.add(vec![q, q], uni(q * q, b), true)),
                Some(store.add(vec![q, q], uni(q * q, b), true)),
            )
        } else {
            (None, None)
        };
        let b1 = 1.0 / crate::math::sqrt(emb_in as f64);
        let phi1_w = store.add(vec![emb_in, dim], uni(emb_in * dim, b1), true);
        let phi1_b = store.add(vec![dim], vec![0.0; dim], true);
        let phi2_w = store.add(vec![dim, emb_in], vec![0.0; dim * emb_in], true);
        let phi2_b = store.add(vec![emb_in], vec![0.0; emb_in], true);
        let w_gcn = if mode == GgmMode::Fc {
            Vec::new()
        } else {
            let bd = 1.0 / crate::math::sqrt(dim as f64);
            (0..num_pairs)
                .map(|_| store.add(vec![dim, dim], uni(dim * dim, bd), true))
                .collect()
        };
        Some(GgmWeights {
            mode,
            gamma,
            dim,
            w1,
            w2,
            phi1_w,
            phi1_b,
            phi2_w,
            phi2_b,
            w_gcn,
        })
    }

    /// Every trainable id owned by the module, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(w) = self.w1 {
            ids.push(w);
        }
        if let Some(w) = self.w2 {
            ids.push(w);
        }
        ids.extend([self.phi1_w, self.phi1_b, self.phi2_w, self.phi2_b]);
        ids.extend(self.w_gcn.iter().copied());
        ids
    }
}

fn expect_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch(String::from(what)));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

// ─── pure (off-tape) forms ──────────────────────────────────────────────────

/// `A = row_softmax((alpha_k w1)(alpha_{k-1} w2)^T)`; `p×p`, row-stochastic.
pub fn adjacency(alpha_k: &Tensor, alpha_prev: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let (p, q) = expect_matrix(alpha_k, "adjacency alpha_k")?;
    let (p2, q2) = expect_matrix(alpha_prev, "adjacency alpha_prev")?;
    let (qa, qb) = expect_matrix(w1, "adjacency w1")?;
    let (qc, qd) = expect_matrix(w2, "adjacency w2")?;
    if p != p2 || q != q2 || qa != q || qb != q || qc != q || qd != q {
        return Err(Error::ShapeMismatch("adjacency dimensions".into()));
    }
    let mut f1 = vec![0.0; p * q];
    let mut f2 = vec![0.0; p * q];
    crate::tensor::kernels_matmul(alpha_k.data(), w1.data(), p, q, q, &mut f1);
    crate::tensor::kernels_matmul(alpha_prev.data(), w2.data(), p, q, q, &mut f2);
    let mut scores = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for t in 0..q {
                acc += f1[i * q + t] * f2[j * q + t];
            }
            scores[i * p + j] = acc;
        }
    }
    let mut out = vec![0.0; p * p];
    kernels_softmax_rows(&scores, p, p, &mut out);
    Tensor::new(vec![p, p], out)
}

/// Graph propagation with residual: `A·X·W + X`.
pub fn gcn_propagate(x: &Tensor, a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (p, d) = expect_matrix(x, "gcn x")?;
    let (pa, pb) = expect_matrix(a, "gcn a")?;
    let (da, db) = expect_matrix(w, "gcn w")?;
    if pa != p || pb != p || da != d || db != d {
        return Err(Error::ShapeMismatch("gcn dimensions".into()));
    }
    let mut ax = vec![0.0; p * d];
    crate::tensor::kernels_matmul(a.data(), x.data(), p, p, d, &mut ax);
    let mut axw = vec![0.0; p * d];
    crate::tensor::kernels_matmul(&ax, w.data(), p, d, d, &mut axw);
    for (o, &xv) in axw.iter_mut().zip(x.data().iter()) {
        *o += xv;
    }
    Tensor::new(vec![p, d], axw)
}

/// Operation-identity reasoning graph: both matrices flattened to length
/// `p·q`, outer product, row softmax. `(p·q)×(p·q)`.
pub fn operation_identity_adjacency(alpha_k: &Tensor, alpha_prev: &Tensor) -> Result<Tensor> {
    let (p, q) = expect_matrix(alpha_k, "op-identity alpha_k")?;
    let (p2, q2) = expect_matrix(alpha_prev, "op-identity alpha_prev")?;
    if p != p2 || q != q2 {
        return Err(Error::ShapeMismatch("op-identity dimensions".into()));
    }
    let n = p * q;
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            scores[i * n + j] = alpha_k.data()[i] * alpha_prev.data()[j];
        }
    }
    let mut out = vec![0.0; n * n];
    kernels_softmax_rows(&scores, n, n, &mut out);
    Tensor::new(vec![n, n], out)
}

// ─── tape form used by the search loop ──────────────────────────────────────

/// One guided update `alpha'_k` on the tape; gradients flow to both alphas
/// and to every module weight. `pair` selects the per-pair graph weight.
pub fn ggm_update_on_tape(
    tape: &mut Tape,
    alpha_k: Var,
    alpha_prev: Var,
    weights: &GgmWeights,
    pair: usize,
) -> Result<Var> {
    if weights.gamma == 0.0 || weights.mode == GgmMode::None {
        return Ok(alpha_k);
    }
    let (p, q) = {
        let s = tape.shape(alpha_k);
        (s[0], s[1])
    };
    {
        let s = tape.shape(alpha_prev);
        if s != [p, q] {
            return Err(Error::ShapeMismatch("ggm alpha shapes differ".into()));
        }
    }
    let delta = match weights.mode {
        GgmMode::None => unreachable!(),
        GgmMode::Fc => {
            let x = affine(tape, alpha_prev, weights.phi1_w, weights.phi1_b);
            affine(tape, x, weights.phi2_w, weights.phi2_b)
        }
        GgmMode::EdgeSimilarity => {
            let w1 = tape.param(weights.w1.expect("edge mode has w1"));
            let w2 = tape.param(weights.w2.expect("edge mode has w2"));
            let f1 = tape.matmul(alpha_k, w1);
            let f2 = tape.matmul(alpha_prev, w2);
            let scores = tape.matmul_bt(f1, f2);
            let a = tape.softmax_rows(scores);
            let x = affine(tape, alpha_prev, weights.phi1_w, weights.phi1_b);
            let wg = tape.param(weights.w_gcn[pair]);
            let ax = tape.matmul(a, x);
            let axw = tape.matmul(ax, wg);
            let g = tape.add_n(&[axw, x]);
            affine(tape, g, weights.phi2_w, weights.phi2_b)
        }
        GgmMode::OperationIdentity => {
            let flat_k = tape.reshape(alpha_k, vec![p * q, 1]);
            let flat_prev = tape.reshape(alpha_prev, vec![p * q, 1]);
            let scores = tape.matmul_bt(flat_k, flat_prev);
            let a = tape.softmax_rows(scores);
            let x = affine(tape, flat_prev, weights.phi1_w, weights.phi1_b);
            let wg = tape.param(weights.w_gcn[pair]);
            let ax = tape.matmul(a, x);
            let axw = tape.matmul(ax, wg);
            let g = tape.add_n(&[axw, x]);
            let y = affine(tape, g, weights.phi2_w, weights.phi2_b);
            tape.reshape(y, vec![p, q])
        }
    };
    let scaled = tape.scale(delta, weights.gamma);
    Ok(tape.add_n(&[alpha_k, scaled]))
}

fn affine(tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Var {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let y = tape.matmul(x, wv);
    tape.add_row(y, bv)
}
