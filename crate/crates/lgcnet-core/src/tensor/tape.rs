//! Reverse-mode tape.
//!
//! Ops execute eagerly and record themselves; `backward` replays the record
//! in exact reverse order and consumes the tape, so a cleared tape is
//! enforced by construction. Parameters live outside the tape in a
//! [`ParamStore`](super::ParamStore); their gradients are returned densely
//! indexed by parameter id so several tapes can be reduced in a fixed order.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels as k;
use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Storage {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        ksize: usize,
        stride: usize,
        dilation: usize,
        pad: usize,
    },
    DwConv3 {
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
    },
    TConv2 {
        x: Var,
        w: Var,
    },
    MaxPool3 {
        x: Var,
        argmax: Vec<u32>,
    },
    AdaptiveAvg {
        x: Var,
    },
    Bilinear {
        x: Var,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(ParamId, ParamId)>,
        mean: Vec<f64>,
        var: Vec<f64>,
        invstd: Vec<f64>,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        run_mean: Vec<f64>,
        run_var: Vec<f64>,
    },
    Concat {
        xs: Vec<Var>,
    },
    AddN {
        xs: Vec<Var>,
    },
    /// `out = sum_m coeffs[offset + m] * terms[m]` with exact one-hot
    /// collapse: zero coefficients contribute nothing (not even a signed
    /// zero) and unit coefficients are copied without a multiply.
    Mix {
        coeffs: Var,
        offset: usize,
        terms: Vec<Option<Var>>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    /// `out (n,m) = a (n,k) * b (m,k)^T`.
    MatMulBT {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    Ln {
        x: Var,
        clamp_min: f64,
    },
    Exp {
        x: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Mul {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    DotConst {
        x: Var,
        c: Vec<f64>,
    },
    CeSum {
        logits: Var,
        labels: Vec<u16>,
        ignore: u16,
    },
}

struct Node {
    storage: Storage,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    /// Dense by parameter id; `None` for parameters the sweep never reached.
    pub params: Vec<Option<Vec<f64>>>,
    leaves: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf created with [`Tape::leaf`].
    pub fn leaf(&self, v: Var) -> Option<&[f64]> {
        self.leaves
            .iter()
            .find(|(lv, _)| *lv == v)
            .map(|(_, g)| g.as_slice())
    }
}

/// Per-channel statistics observed by one training-mode normalization node.
pub struct BnBatchStats {
    pub running: (ParamId, ParamId),
    pub mean: Vec<f64>,
    /// Biased (1/N) variance of the observed activations.
    pub var: Vec<f64>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    /// Training mode selects batch statistics in normalization ops.
    pub train: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore, train: bool) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
            train,
        }
    }

    fn push(&mut self, storage: Storage, shape: Vec<usize>, needs_grad: bool, op: Op) -> Var {
        let v = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            storage,
            shape,
            needs_grad,
            op,
        });
        v
    }

    #[inline]
    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.idx()].storage {
            Storage::Owned(d) => d,
            Storage::Param(id) => self.params.value(*id),
        }
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx()].shape
    }

    #[inline]
    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.idx()].shape.iter().product()
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// True if every value on the tape is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| match &n.storage {
                Storage::Owned(d) => d.iter().all(|x| x.is_finite()),
                Storage::Param(_) => true,
            })
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Storage::Owned(data), shape, false, Op::Leaf)
    }

    /// Gradient-tracked input leaf.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Storage::Owned(data), shape, true, Op::Leaf)
    }

    pub fn constant_from(&mut self, t: &Tensor) -> Var {
        self.constant(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn leaf_from(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec())
    }

    /// All-zero constant of the given shape.
    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.constant(shape, vec![0.0; n])
    }

    /// Parameter leaf; cached so each parameter appears once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let shape = self.params.shape(id).to_vec();
        let needs = self.params.trainable(id);
        let v = self.push(Storage::Param(id), shape, needs, Op::Leaf);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ── elementwise & shape ops ─────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.needs(x));
        self.push(Storage::Owned(out), shape, needs, Op::Relu { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| c * v).collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.needs(x));
        self.push(Storage::Owned(out), shape, needs, Op::Scale { x, c })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Storage::Owned(out), shape, needs, Op::Mul { a, b })
    }

    /// Natural log with a positivity clamp: `ln(max(x, clamp_min))`.
    pub fn ln_clamped(&mut self, x: Var, clamp_min: f64) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| crate::math::ln(if v > clamp_min { v } else { clamp_min }))
            .collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.needs(x));
        self.push(Storage::Owned(out), shape, needs, Op::Ln { x, clamp_min })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| crate::math::exp(v)).collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.needs(x));
        self.push(Storage::Owned(out), shape, needs, Op::Exp { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(Storage::Owned(vec![s]), vec![1], needs, Op::SumAll { x })
    }

    /// Elementwise sum of same-shaped inputs. The first input is copied, the
    /// rest accumulate, so a single-input sum is a bitwise copy.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        debug_assert!(!xs.is_empty());
        let shape = self.shape(xs[0]).to_vec();
        let mut out = self.value(xs[0]).to_vec();
        for &v in &xs[1..] {
            debug_assert_eq!(self.shape(v), shape.as_slice());
            for (o, &x) in out.iter_mut().zip(self.value(v).iter()) {
                *o += x;
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(Storage::Owned(out), shape, needs, Op::AddN { xs: xs.to_vec() })
    }

    /// Channel concatenation of `(C_i, H, W)` maps.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        debug_assert!(!xs.is_empty());
        let (h, w) = (self.shape(xs[0])[1], self.shape(xs[0])[2]);
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            debug_assert_eq!((s[1], s[2]), (h, w));
            c_total += s[0];
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for &v in xs {
            out.extend_from_slice(self.value(v));
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(
            Storage::Owned(out),
            vec![c_total, h, w],
            needs,
            Op::Concat { xs: xs.to_vec() },
        )
    }

    /// Weighted sum of same-shaped terms with coefficients taken from a row
    /// of `coeffs` starting at flat `offset`. `None` terms are identically
    /// zero operations and contribute nothing.
    pub fn mix(&mut self, coeffs: Var, offset: usize, terms: &[Option<Var>]) -> Var {
        let first = terms
            .iter()
            .flatten()
            .next()
            .expect("mix needs at least one non-zero term");
        let shape = self.shape(*first).to_vec();
        let n = shape.iter().product();
        let mut out: Option<Vec<f64>> = None;
        {
            let cvals = self.value(coeffs);
            let cvals: Vec<f64> = cvals[offset..offset + terms.len()].to_vec();
            for (m, term) in terms.iter().enumerate() {
                let Some(src) = term else { continue };
                let z = cvals[m];
                if z == 0.0 {
                    continue;
                }
                let sv = self.value(*src);
                match out.as_mut() {
                    None => {
                        out = Some(if z == 1.0 {
                            sv.to_vec()
                        } else {
                            sv.iter().map(|&v| z * v).collect()
                        });
                    }
                    Some(acc) => {
                        if z == 1.0 {
                            for (o, &v) in acc.iter_mut().zip(sv.iter()) {
                                *o += v;
                            }
                        } else {
                            for (o, &v) in acc.iter_mut().zip(sv.iter()) {
                                *o += z * v;
                            }
                        }
                    }
                }
            }
        }
        let out = out.unwrap_or_else(|| vec![0.0; n]);
        let needs = self.needs(coeffs) || terms.iter().flatten().any(|&v| self.needs(v));
        self.push(
            Storage::Owned(out),
            shape,
            needs,
            Op::Mix {
                coeffs,
                offset,
                terms: terms.to_vec(),
            },
        )
    }

    // ── neural ops ──────────────────────────────────────────────────────

    /// Dense convolution; `w` is `(cout, cin, k, k)`, padding fixed to
    /// `dilation * (k - 1) / 2` so stride-1 output extents match the input.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, dilation: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, ksize) = (ws[0], ws[2]);
        debug_assert_eq!(ws[1], cin);
        let pad = dilation * (ksize - 1) / 2;
        let oh = k::conv_out_extent(h, ksize, stride, dilation, pad);
        let ow = k::conv_out_extent(wd, ksize, stride, dilation, pad);
        let mut out = vec![0.0; cout * oh * ow];
        k::conv2d_fwd(
            self.value(x),
            cin,
            h,
            wd,
            self.value(w),
            cout,
            ksize,
            stride,
            dilation,
            pad,
            bias.map(|b| self.value(b)),
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            Storage::Owned(out),
            vec![cout, oh, ow],
            needs,
            Op::Conv2d {
                x,
                w,
                bias,
                ksize,
                stride,
                dilation,
                pad,
            },
        )
    }

    /// Depthwise 3×3 convolution; `w` is `(c, 3, 3)`, padding = dilation.
    pub fn dwconv3(&mut self, x: Var, w: Var, stride: usize, dilation: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let pad = dilation;
        let oh = k::conv_out_extent(h, 3, stride, dilation, pad);
        let ow = k::conv_out_extent(wd, 3, stride, dilation, pad);
        let mut out = vec![0.0; c * oh * ow];
        k::dwconv3_fwd(self.value(x), c, h, wd, self.value(w), stride, dilation, &mut out);
        let needs = self.needs(x) || self.needs(w);
        self.push(
            Storage::Owned(out),
            vec![c, oh, ow],
            needs,
            Op::DwConv3 { x, w, stride, dilation },
        )
    }

    /// Transposed 2×2 stride-2 convolution; `w` is `(cin, cout, 2, 2)`.
    pub fn tconv2(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let cout = ws[1];
        debug_assert_eq!(ws[0], cin);
        let mut out = vec![0.0; cout * 4 * h * wd];
        k::tconv2_fwd(self.value(x), cin, h, wd, self.value(w), cout, &mut out);
        let needs = self.needs(x) || self.needs(w);
        self.push(
            Storage::Owned(out),
            vec![cout, 2 * h, 2 * wd],
            needs,
            Op::TConv2 { x, w },
        )
    }

    /// 3×3 max pooling with padding 1.
    pub fn maxpool3(&mut self, x: Var, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let oh = k::conv_out_extent(h, 3, stride, 1, 1);
        let ow = k::conv_out_extent(wd, 3, stride, 1, 1);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = Vec::new();
        k::maxpool3_fwd(self.value(x), c, h, wd, stride, &mut out, &mut argmax);
        let needs = self.needs(x);
        self.push(
            Storage::Owned(out),
            vec![c, oh, ow],
            needs,
            Op::MaxPool3 { x, argmax },
        )
    }

    /// Adaptive average pooling to `(oh, ow)`.
    pub fn adaptive_avg(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * oh * ow];
        k::adaptive_avg_fwd(self.value(x), c, h, wd, oh, ow, &mut out);
        let needs = self.needs(x);
        self.push(Storage::Owned(out), vec![c, oh, ow], needs, Op::AdaptiveAvg { x })
    }

    /// Bilinear resampling to `(oh, ow)` (half-pixel convention).
    pub fn bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * oh * ow];
        k::bilinear_fwd(self.value(x), c, h, wd, oh, ow, &mut out);
        let needs = self.needs(x);
        self.push(Storage::Owned(out), vec![c, oh, ow], needs, Op::Bilinear { x })
    }

    /// Per-channel normalization with affine parameters. In training mode
    /// batch statistics are used and exported for running-average updates;
    /// in eval mode the running statistics stored in `running` apply.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(ParamId, ParamId)>) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let hw = h * wd;
        let mut out = vec![0.0; c * hw];
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        if self.train {
            let mut mean = Vec::new();
            let mut invstd = Vec::new();
            k::bn_train_fwd(
                self.value(x),
                c,
                hw,
                self.value(gamma),
                self.value(beta),
                &mut out,
                &mut mean,
                &mut invstd,
            );
            let var: Vec<f64> = invstd
                .iter()
                .map(|&istd| 1.0 / (istd * istd) - k::BN_EPS)
                .collect();
            self.push(
                Storage::Owned(out),
                xs,
                needs,
                Op::BnTrain {
                    x,
                    gamma,
                    beta,
                    running,
                    mean,
                    var,
                    invstd,
                },
            )
        } else {
            let (rm_id, rv_id) = running.expect("eval-mode normalization needs running statistics");
            let run_mean = self.params.value(rm_id).to_vec();
            let run_var = self.params.value(rv_id).to_vec();
            k::bn_eval_fwd(
                self.value(x),
                c,
                hw,
                self.value(gamma),
                self.value(beta),
                &run_mean,
                &run_var,
                &mut out,
            );
            self.push(
                Storage::Owned(out),
                xs,
                needs,
                Op::BnEval {
                    x,
                    gamma,
                    beta,
                    run_mean,
                    run_var,
                },
            )
        }
    }

    // ── dense algebra ───────────────────────────────────────────────────

    /// `(n,k) × (k,m)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let asn = self.shape(a).to_vec();
        let bsn = self.shape(b).to_vec();
        debug_assert_eq!(asn[1], bsn[0]);
        let (n, kk, m) = (asn[0], asn[1], bsn[1]);
        let mut out = vec![0.0; n * m];
        k::matmul(self.value(a), self.value(b), n, kk, m, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Storage::Owned(out), vec![n, m], needs, Op::MatMul { a, b })
    }

    /// `(n,k) × (m,k)ᵀ` product.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let asn = self.shape(a).to_vec();
        let bsn = self.shape(b).to_vec();
        debug_assert_eq!(asn[1], bsn[1]);
        let (n, kk, m) = (asn[0], asn[1], bsn[0]);
        let mut out = vec![0.0; n * m];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..n {
                let a_row = &av[i * kk..(i + 1) * kk];
                for j in 0..m {
                    let b_row = &bv[j * kk..(j + 1) * kk];
                    let mut acc = 0.0;
                    for t in 0..kk {
                        acc += a_row[t] * b_row[t];
                    }
                    out[i * m + j] = acc;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Storage::Owned(out), vec![n, m], needs, Op::MatMulBT { a, b })
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        debug_assert_eq!(self.numel(x), shape.iter().product::<usize>());
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        self.push(Storage::Owned(out), shape, needs, Op::Reshape { x })
    }

    /// Broadcast-add a length-`m` row vector to every row of `(n,m)`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, m) = (xs[0], xs[1]);
        debug_assert_eq!(self.numel(row), m);
        let rv = self.value(row).to_vec();
        let mut out = self.value(x).to_vec();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += rv[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(Storage::Owned(out), xs, needs, Op::AddRow { x, row })
    }

    /// Row-wise softmax of a matrix (any trailing rank-2 shape).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (rows, cols) = (xs[0], xs[1]);
        let mut out = vec![0.0; rows * cols];
        k::softmax_rows(self.value(x), rows, cols, &mut out);
        let needs = self.needs(x);
        self.push(Storage::Owned(out), xs, needs, Op::SoftmaxRows { x })
    }

    /// Dot product against a constant vector of the same length.
    pub fn dot_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        debug_assert_eq!(self.numel(x), c.len());
        let s: f64 = self.value(x).iter().zip(c.iter()).map(|(&a, &b)| a * b).sum();
        let needs = self.needs(x);
        self.push(Storage::Owned(vec![s]), vec![1], needs, Op::DotConst { x, c })
    }

    /// Sum of per-pixel negative log-likelihoods over non-ignored pixels.
    /// `logits` is `(classes, h, w)`. Returns the scalar sum node and the
    /// contributing pixel count.
    pub fn ce_sum(&mut self, logits: Var, labels: Vec<u16>, ignore: u16) -> Result<(Var, usize)> {
        let ls = self.shape(logits).to_vec();
        let (kcls, h, w) = (ls[0], ls[1], ls[2]);
        if labels.len() != h * w {
            return Err(Error::ShapeMismatch(alloc::format!(
                "labels {} vs logits {}x{}",
                labels.len(),
                h,
                w
            )));
        }
        for &y in &labels {
            if y != ignore && y as usize >= kcls {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "label {y} out of range for {kcls} classes"
                )));
            }
        }
        let (sum, count) = k::ce_sum_fwd(self.value(logits), kcls, h * w, &labels, ignore);
        let needs = self.needs(logits);
        let v = self.push(
            Storage::Owned(vec![sum]),
            vec![1],
            needs,
            Op::CeSum { logits, labels, ignore },
        );
        Ok((v, count))
    }

    // ── statistics export ───────────────────────────────────────────────

    /// Batch statistics of every training-mode normalization recorded on
    /// this tape, in recording order.
    pub fn bn_stats(&self) -> Vec<BnBatchStats> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BnTrain {
                    running: Some(r),
                    mean,
                    var,
                    ..
                } => Some(BnBatchStats {
                    running: *r,
                    mean: mean.clone(),
                    var: var.clone(),
                }),
                _ => None,
            })
            .collect()
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss (seed 1.0), consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.idx() >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        if self.numel(loss) != 1 {
            return Err(Error::ShapeMismatch("backward needs a scalar loss".into()));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep with explicit output seeds, consuming the tape.
    pub fn backward_seeded(self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        for (v, seed) in seeds {
            if v.idx() >= n {
                return Err(Error::NotOnTape);
            }
            debug_assert_eq!(seed.len(), self.numel(*v));
            match &mut grads[v.idx()] {
                slot @ None => *slot = Some(seed.clone()),
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(seed.iter()) {
                        *a += b;
                    }
                }
            }
        }

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf grads for extraction
            }
            let Some(gout) = grads[i].take() else { continue };
            self.step_back(i, &gout, &mut grads);
        }

        let mut param_grads: Vec<Option<Vec<f64>>> = (0..self.params.len()).map(|_| None).collect();
        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.storage {
                Storage::Param(id) => param_grads[id.index()] = Some(g),
                Storage::Owned(_) => leaves.push((Var(i as u32), g)),
            }
        }
        Ok(Gradients {
            params: param_grads,
            leaves,
        })
    }

    /// Ensure a gradient buffer exists for node `v` and return it.
    fn gbuf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let slot = &mut grads[v.idx()];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.numel(v)]);
        }
        slot.as_mut().unwrap()
    }

    fn step_back(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let gx = self.gbuf(grads, *x);
                    for (j, &g) in gout.iter().enumerate() {
                        if xv[j] > 0.0 {
                            gx[j] += g;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                ksize,
                stride,
                dilation,
                pad,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let cout = ws[0];
                if self.needs(*x) {
                    let wval = self.value(*w).to_vec();
                    let gx = self.gbuf(grads, *x);
                    k::conv2d_bwd_x(gout, cin, h, wd, &wval, cout, *ksize, *stride, *dilation, *pad, gx);
                }
                if self.needs(*w) {
                    let xval = self.value(*x).to_vec();
                    let gw = self.gbuf(grads, *w);
                    k::conv2d_bwd_w(gout, &xval, cin, h, wd, cout, *ksize, *stride, *dilation, *pad, gw);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let ohw = node.shape[1] * node.shape[2];
                        let gb = self.gbuf(grads, *b);
                        k::conv2d_bwd_b(gout, cout, ohw, gb);
                    }
                }
            }
            Op::DwConv3 { x, w, stride, dilation } => {
                let xs = self.shape(*x);
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                if self.needs(*x) {
                    let wval = self.value(*w).to_vec();
                    let gx = self.gbuf(grads, *x);
                    k::dwconv3_bwd_x(gout, c, h, wd, &wval, *stride, *dilation, gx);
                }
                if self.needs(*w) {
                    let xval = self.value(*x).to_vec();
                    let gw = self.gbuf(grads, *w);
                    k::dwconv3_bwd_w(gout, &xval, c, h, wd, *stride, *dilation, gw);
                }
            }
            Op::TConv2 { x, w } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let cout = ws[1];
                if self.needs(*x) {
                    let wval = self.value(*w).to_vec();
                    let gx = self.gbuf(grads, *x);
                    k::tconv2_bwd_x(gout, cin, h, wd, &wval, cout, gx);
                }
                if self.needs(*w) {
                    let xval = self.value(*x).to_vec();
                    let gw = self.gbuf(grads, *w);
                    k::tconv2_bwd_w(gout, &xval, cin, h, wd, cout, gw);
                }
            }
            Op::MaxPool3 { x, argmax } => {
                if self.needs(*x) {
                    let gx = self.gbuf(grads, *x);
                    k::maxpool3_bwd(gout, argmax, gx);
                }
            }
            Op::AdaptiveAvg { x } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let (c, h, wd) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    let gx = self.gbuf(grads, *x);
                    k::adaptive_avg_bwd(gout, c, h, wd, oh, ow, gx);
                }
            }
            Op::Bilinear { x } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let (c, h, wd) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    let gx = self.gbuf(grads, *x);
                    k::bilinear_bwd(gout, c, h, wd, oh, ow, gx);
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
                ..
            } => {
                let xs = self.shape(*x);
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let xval = self.value(*x).to_vec();
                let gval = self.value(*gamma).to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                if self.needs(*x) {
                    let gx = self.gbuf(grads, *x);
                    k::bn_train_bwd(gout, &xval, c, hw, &gval, mean, invstd, gx, &mut dgamma, &mut dbeta);
                } else {
                    let mut scratch = vec![0.0; xval.len()];
                    k::bn_train_bwd(
                        gout, &xval, c, hw, &gval, mean, invstd, &mut scratch, &mut dgamma, &mut dbeta,
                    );
                }
                if self.needs(*gamma) {
                    let gg = self.gbuf(grads, *gamma);
                    for (a, b) in gg.iter_mut().zip(dgamma.iter()) {
                        *a += b;
                    }
                }
                if self.needs(*beta) {
                    let gb = self.gbuf(grads, *beta);
                    for (a, b) in gb.iter_mut().zip(dbeta.iter()) {
                        *a += b;
                    }
                }
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                run_mean,
                run_var,
            } => {
                let xs = self.shape(*x);
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let xval = self.value(*x).to_vec();
                let gval = self.value(*gamma).to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                if self.needs(*x) {
                    let gx = self.gbuf(grads, *x);
                    k::bn_eval_bwd(gout, &xval, c, hw, &gval, run_mean, run_var, gx, &mut dgamma, &mut dbeta);
                } else {
                    let mut scratch = vec![0.0; xval.len()];
                    k::bn_eval_bwd(
                        gout, &xval, c, hw, &gval, run_mean, run_var, &mut scratch, &mut dgamma, &mut dbeta,
                    );
                }
                if self.needs(*gamma) {
                    let gg = self.gbuf(grads, *gamma);
                    for (a, b) in gg.iter_mut().zip(dgamma.iter()) {
                        *a += b;
                    }
                }
                if self.needs(*beta) {
                    let gb = self.gbuf(grads, *beta);
                    for (a, b) in gb.iter_mut().zip(dbeta.iter()) {
                        *a += b;
                    }
                }
            }
            Op::Concat { xs } => {
                let mut off = 0usize;
                for &v in xs {
                    let n = self.numel(v);
                    if self.needs(v) {
                        let gx = self.gbuf(grads, v);
                        for (a, b) in gx.iter_mut().zip(gout[off..off + n].iter()) {
                            *a += b;
                        }
                    }
                    off += n;
                }
            }
            Op::AddN { xs } => {
                for &v in xs {
                    if self.needs(v) {
                        let gx = self.gbuf(grads, v);
                        for (a, b) in gx.iter_mut().zip(gout.iter()) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Mix { coeffs, offset, terms } => {
                let cvals: Vec<f64> = {
                    let c = self.value(*coeffs);
                    c[*offset..*offset + terms.len()].to_vec()
                };
                if self.needs(*coeffs) {
                    let mut dz = vec![0.0; terms.len()];
                    for (m, term) in terms.iter().enumerate() {
                        let Some(src) = term else { continue };
                        let sv = self.value(*src);
                        let mut dot = 0.0;
                        for (&s, &g) in sv.iter().zip(gout.iter()) {
                            dot += s * g;
                        }
                        dz[m] = dot;
                    }
                    let gz = self.gbuf(grads, *coeffs);
                    for (m, d) in dz.iter().enumerate() {
                        gz[*offset + m] += d;
                    }
                }
                for (m, term) in terms.iter().enumerate() {
                    let Some(src) = term else { continue };
                    let z = cvals[m];
                    if z == 0.0 || !self.needs(*src) {
                        continue;
                    }
                    let gx = self.gbuf(grads, *src);
                    for (a, &g) in gx.iter_mut().zip(gout.iter()) {
                        *a += z * g;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let asn = self.shape(*a);
                let bsn = self.shape(*b);
                let (n, kk, m) = (asn[0], asn[1], bsn[1]);
                if self.needs(*a) {
                    // dA = dOut * B^T
                    let bval = self.value(*b).to_vec();
                    let ga = self.gbuf(grads, *a);
                    for i in 0..n {
                        for j in 0..kk {
                            let mut acc = 0.0;
                            for t in 0..m {
                                acc += gout[i * m + t] * bval[j * m + t];
                            }
                            ga[i * kk + j] += acc;
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = A^T * dOut
                    let aval = self.value(*a).to_vec();
                    let gb = self.gbuf(grads, *b);
                    for j in 0..kk {
                        for t in 0..m {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += aval[i * kk + j] * gout[i * m + t];
                            }
                            gb[j * m + t] += acc;
                        }
                    }
                }
            }
            Op::MatMulBT { a, b } => {
                let asn = self.shape(*a);
                let bsn = self.shape(*b);
                let (n, kk, m) = (asn[0], asn[1], bsn[0]);
                if self.needs(*a) {
                    // dA = dOut * B
                    let bval = self.value(*b).to_vec();
                    let ga = self.gbuf(grads, *a);
                    for i in 0..n {
                        for j in 0..m {
                            let g = gout[i * m + j];
                            if g == 0.0 {
                                continue;
                            }
                            for t in 0..kk {
                                ga[i * kk + t] += g * bval[j * kk + t];
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = dOut^T * A
                    let aval = self.value(*a).to_vec();
                    let gb = self.gbuf(grads, *b);
                    for i in 0..n {
                        for j in 0..m {
                            let g = gout[i * m + j];
                            if g == 0.0 {
                                continue;
                            }
                            for t in 0..kk {
                                gb[j * kk + t] += g * aval[i * kk + t];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let gx = self.gbuf(grads, *x);
                    for (a, b) in gx.iter_mut().zip(gout.iter()) {
                        *a += b;
                    }
                }
            }
            Op::AddRow { x, row } => {
                let xs = self.shape(*x);
                let (n, m) = (xs[0], xs[1]);
                if self.needs(*x) {
                    let gx = self.gbuf(grads, *x);
                    for (a, b) in gx.iter_mut().zip(gout.iter()) {
                        *a += b;
                    }
                }
                if self.needs(*row) {
                    let gr = self.gbuf(grads, *row);
                    for i in 0..n {
                        for j in 0..m {
                            gr[j] += gout[i * m + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(*x) {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    let sval = match &node.storage {
                        Storage::Owned(d) => d.clone(),
                        Storage::Param(_) => unreachable!("softmax output is owned"),
                    };
                    let gx = self.gbuf(grads, *x);
                    k::softmax_rows_bwd(gout, &sval, rows, cols, gx);
                }
            }
            Op::Ln { x, clamp_min } => {
                if self.needs(*x) {
                    let xv = self.value(*x).to_vec();
                    let gx = self.gbuf(grads, *x);
                    for (j, &g) in gout.iter().enumerate() {
                        if xv[j] > *clamp_min {
                            gx[j] += g / xv[j];
                        }
                    }
                }
            }
            Op::Exp { x } => {
                if self.needs(*x) {
                    let out = match &node.storage {
                        Storage::Owned(d) => d.clone(),
                        Storage::Param(_) => unreachable!(),
                    };
                    let gx = self.gbuf(grads, *x);
                    for (j, &g) in gout.iter().enumerate() {
                        gx[j] += g * out[j];
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let c = *c;
                    let gx = self.gbuf(grads, *x);
                    for (a, &g) in gx.iter_mut().zip(gout.iter()) {
                        *a += c * g;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).to_vec();
                    let ga = self.gbuf(grads, *a);
                    for (j, &g) in gout.iter().enumerate() {
                        ga[j] += g * bv[j];
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).to_vec();
                    let gb = self.gbuf(grads, *b);
                    for (j, &g) in gout.iter().enumerate() {
                        gb[j] += g * av[j];
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let g = gout[0];
                    let gx = self.gbuf(grads, *x);
                    for a in gx.iter_mut() {
                        *a += g;
                    }
                }
            }
            Op::DotConst { x, c } => {
                if self.needs(*x) {
                    let g = gout[0];
                    let gx = self.gbuf(grads, *x);
                    for (a, &cv) in gx.iter_mut().zip(c.iter()) {
                        *a += g * cv;
                    }
                }
            }
            Op::CeSum { logits, labels, ignore } => {
                if self.needs(*logits) {
                    let ls = self.shape(*logits);
                    let (kcls, hw) = (ls[0], ls[1] * ls[2]);
                    let lval = self.value(*logits).to_vec();
                    let gl = self.gbuf(grads, *logits);
                    k::ce_sum_bwd(&lval, kcls, hw, labels, *ignore, gout[0], gl);
                }
            }
        }
    }
}
