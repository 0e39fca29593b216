//! Deterministic synthetic segmentation tasks, augmentation, and metrics.
//!
//! Images contain textured shapes on a noisy, unevenly lit background. The
//! class of a shape is defined by its *texture*, not its outline: class 1 is
//! a solid patch with its own palette, classes 2 and 3 share one palette and
//! differ only in stripe orientation (horizontal vs vertical). Telling 2
//! from 3 therefore needs spatial context, which is what makes operation
//! choice matter on this task.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{self, stream, Rng, Stream};
use crate::tensor::{Tensor, IGNORE_LABEL};
use crate::{Error, Result};

/// One image/label pair. Labels are per-pixel class ids or [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `(3, H, W)`, values in `[0, 1]`.
    pub image: Tensor,
    /// `H*W` row-major.
    pub label: Vec<u16>,
}

impl SegSample {
    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub train: usize,
    pub val: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            train: 64,
            val: 16,
            height: 64,
            width: 128,
            classes: 4,
            noise: 0.08,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

// ─── synthesis ──────────────────────────────────────────────────────────────

/// Pure function of `(spec, seed)`: identical arguments give bitwise
/// identical datasets.
pub fn generate_synthetic(spec: &DataSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if spec.classes > 4 {
        return Err(Error::InvalidConfig("the synthetic task defines at most 4 classes".into()));
    }
    let mut rng = stream(seed, Stream::Data);
    let train = (0..spec.train).map(|_| synth_sample(spec, &mut rng)).collect();
    let val = (0..spec.val).map(|_| synth_sample(spec, &mut rng)).collect();
    Ok(Dataset {
        train,
        val,
        classes: spec.classes,
        height: spec.height,
        width: spec.width,
    })
}

fn synth_sample(spec: &DataSpec, rng: &mut Rng) -> SegSample {
    let (h, w) = (spec.height, spec.width);
    let mut img = vec![0.0f64; 3 * h * w];
    let mut lbl = vec![0u16; h * w];

    // background: dim base + horizontal illumination ramp
    let base = [
        rng::uniform(rng, 0.12, 0.3),
        rng::uniform(rng, 0.12, 0.3),
        rng::uniform(rng, 0.12, 0.3),
    ];
    let slope = rng::uniform(rng, -0.12, 0.12);
    for y in 0..h {
        for x in 0..w {
            let ramp = slope * (x as f64 / w as f64 - 0.5);
            for c in 0..3 {
                img[c * h * w + y * w + x] = (base[c] + ramp).clamp(0.0, 1.0);
            }
        }
    }

    // per-image palettes: class 1 solid; classes 2 and 3 share the stripes
    let solid = [
        rng::uniform(rng, 0.6, 0.9),
        rng::uniform(rng, 0.15, 0.35),
        rng::uniform(rng, 0.1, 0.3),
    ];
    let stripe_a = [
        rng::uniform(rng, 0.1, 0.3),
        rng::uniform(rng, 0.55, 0.85),
        rng::uniform(rng, 0.5, 0.8),
    ];
    let stripe_b = [
        rng::uniform(rng, 0.3, 0.5),
        rng::uniform(rng, 0.2, 0.4),
        rng::uniform(rng, 0.6, 0.9),
    ];
    let period = 12 + 4 * rng::below(rng, 3); // stripe period in pixels: survives stride-4 pooling

    // one shape per foreground class, drawn in random order
    let mut order: Vec<u16> = (1..spec.classes as u16).collect();
    for i in (1..order.len()).rev() {
        let j = rng::below(rng, i + 1);
        order.swap(i, j);
    }
    for &class in &order {
        let sh = rng::below(rng, h / 4) + h * 3 / 10; // 0.3..0.55 of H
        let sw = rng::below(rng, w / 4) + w / 5; // 0.2..0.45 of W
        let y0 = rng::below(rng, h - sh);
        let x0 = rng::below(rng, w - sw);
        let ellipse = rng::below(rng, 2) == 1;
        let phase = rng::below(rng, period);
        for y in y0..y0 + sh {
            for x in x0..x0 + sw {
                if ellipse {
                    let cy = y0 as f64 + sh as f64 / 2.0;
                    let cx = x0 as f64 + sw as f64 / 2.0;
                    let dy = (y as f64 - cy) / (sh as f64 / 2.0);
                    let dx = (x as f64 - cx) / (sw as f64 / 2.0);
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                let color = match class {
                    1 => solid,
                    2 => {
                        if ((y + phase) / (period / 2)) % 2 == 0 {
                            stripe_a
                        } else {
                            stripe_b
                        }
                    }
                    _ => {
                        if ((x + phase) / (period / 2)) % 2 == 0 {
                            stripe_a
                        } else {
                            stripe_b
                        }
                    }
                };
                for c in 0..3 {
                    img[c * h * w + y * w + x] = color[c];
                }
                lbl[y * w + x] = class;
            }
        }
    }

    if spec.noise > 0.0 {
        for v in img.iter_mut() {
            *v = (*v + rng::uniform(rng, -spec.noise, spec.noise)).clamp(0.0, 1.0);
        }
    }

    SegSample {
        image: Tensor::new(vec![3, h, w], img).expect("image shape"),
        label: lbl,
    }
}

// ─── metrics ────────────────────────────────────────────────────────────────

/// `K×K` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, truth: &[u16], pred: &[u16]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch("confusion inputs differ in length".into()));
        }
        for (&t, &p) in truth.iter().zip(pred.iter()) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= self.classes || p as usize >= self.classes {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "label {t}/{p} out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn set(&mut self, truth: usize, pred: usize, v: u64) {
        self.counts[truth * self.classes + pred] = v;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Mean class-wise intersection over union. Classes with zero support and
/// zero predictions are left out of the mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::InvalidConfig("empty confusion matrix".into()));
    }
    let k = cm.classes;
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..k {
        let tp = cm.count(c, c);
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for o in 0..k {
            if o != c {
                fp += cm.count(o, c);
                fn_ += cm.count(c, o);
            }
        }
        let denom = tp + fp + fn_;
        if denom == 0 {
            continue; // absent and never predicted
        }
        sum += tp as f64 / denom as f64;
        used += 1;
    }
    Ok(sum / used as f64)
}

// ─── augmentation ───────────────────────────────────────────────────────────

/// Deterministic core of the augmentation pipeline: optional horizontal
/// flip, uniform rescale (bilinear image / nearest labels), crop or
/// ignore-padded placement back to the original extent.
pub fn augment_with(sample: &SegSample, flip: bool, scale: f64, off_y: usize, off_x: usize) -> SegSample {
    let (h, w) = sample.hw();
    let mut cur = sample.clone();
    if flip {
        cur = flip_horizontal(&cur);
    }
    let nh = ((h as f64 * scale) as usize).max(1);
    let nw = ((w as f64 * scale) as usize).max(1);
    if (nh, nw) != (h, w) {
        cur = resize(&cur, nh, nw);
    }
    place(&cur, h, w, off_y, off_x)
}

/// Random flip (p = 0.5), scale in `[0.5, 2.0]`, random crop.
pub fn augment(sample: &SegSample, rng: &mut Rng) -> SegSample {
    let flip = rng::below(rng, 2) == 1;
    let scale = rng::uniform(rng, 0.5, 2.0);
    let (h, w) = sample.hw();
    let nh = ((h as f64 * scale) as usize).max(1);
    let nw = ((w as f64 * scale) as usize).max(1);
    let off_y = rng::below(rng, nh.abs_diff(h) + 1);
    let off_x = rng::below(rng, nw.abs_diff(w) + 1);
    augment_with(sample, flip, scale, off_y, off_x)
}

pub fn flip_horizontal(sample: &SegSample) -> SegSample {
    let (h, w) = sample.hw();
    let src = sample.image.data();
    let mut img = vec![0.0; 3 * h * w];
    let mut lbl = vec![0u16; h * w];
    for y in 0..h {
        for x in 0..w {
            let xs = w - 1 - x;
            for c in 0..3 {
                img[c * h * w + y * w + x] = src[c * h * w + y * w + xs];
            }
            lbl[y * w + x] = sample.label[y * w + xs];
        }
    }
    SegSample {
        image: Tensor::new(vec![3, h, w], img).expect("shape"),
        label: lbl,
    }
}

fn resize(sample: &SegSample, nh: usize, nw: usize) -> SegSample {
    let (h, w) = sample.hw();
    let mut img = vec![0.0; 3 * nh * nw];
    crate::tensor::kernels_bilinear(sample.image.data(), 3, h, w, nh, nw, &mut img);
    let mut lbl = vec![0u16; nh * nw];
    for y in 0..nh {
        let sy = (((y as f64 + 0.5) * h as f64 / nh as f64) as usize).min(h - 1);
        for x in 0..nw {
            let sx = (((x as f64 + 0.5) * w as f64 / nw as f64) as usize).min(w - 1);
            lbl[y * nw + x] = sample.label[sy * w + sx];
        }
    }
    SegSample {
        image: Tensor::new(vec![3, nh, nw], img).expect("shape"),
        label: lbl,
    }
}

/// Crop (when larger) or ignore-pad (when smaller) to `(h, w)`.
fn place(sample: &SegSample, h: usize, w: usize, off_y: usize, off_x: usize) -> SegSample {
    let (sh, sw) = sample.hw();
    let src = sample.image.data();
    let mut img = vec![0.0; 3 * h * w];
    let mut lbl = vec![IGNORE_LABEL; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if sh >= h {
                (y + off_y.min(sh - h), x + off_x.min(sw.saturating_sub(w)))
            } else {
                let oy = off_y.min(h - sh);
                let ox = off_x.min(w.saturating_sub(sw));
                if y < oy || y >= oy + sh || x < ox || x >= ox + sw {
                    continue;
                }
                (y - oy, x - ox)
            };
            if sh >= h && (sx >= sw || sy >= sh) {
                continue;
            }
            for c in 0..3 {
                img[c * h * w + y * w + x] = src[c * sh * sw + sy * sw + sx];
            }
            lbl[y * w + x] = sample.label[sy * sw + sx];
        }
    }
    SegSample {
        image: Tensor::new(vec![3, h, w], img).expect("shape"),
        label: lbl,
    }
}
