//! Gumbel-softmax relaxation of the per-edge operation choice.
//!
//! Sampling a soft mask `Z = softmax((log alpha + G) / lambda)` with Gumbel
//! noise `G = -log(-log U)` makes the discrete choice differentiable in the
//! architecture parameters; the temperature anneals from 1.0 to 0.03 over
//! the run.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{self, Rng};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Clamp applied to uniform draws so `-log(-log U)` stays finite.
pub const U_CLAMP: f64 = 1e-12;
/// Positivity clamp for `log alpha` when guided updates push entries near 0.
pub const ALPHA_FLOOR: f64 = 1e-12;

/// Fresh Gumbel noise matrix, `G = -log(-log U)`, `U ~ Uniform(0,1)` clamped
/// to `[1e-12, 1 - 1e-12]`.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let u = rng::uniform(rng, 0.0, 1.0).clamp(U_CLAMP, 1.0 - U_CLAMP);
        data.push(-crate::math::ln(-crate::math::ln(u)));
    }
    Tensor::new(alloc::vec![rows, cols], data).expect("gumbel shape")
}

/// Pure (off-tape) Gumbel softmax: row-wise softmax of `(log alpha + G) / lambda`.
pub fn gumbel_softmax(alpha: &Tensor, gumbel: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "temperature must be positive, got {lambda}"
        )));
    }
    if alpha.shape() != gumbel.shape() {
        return Err(Error::ShapeMismatch("alpha vs gumbel noise".into()));
    }
    if alpha.data().iter().any(|&a| a <= 0.0) {
        return Err(Error::InvalidConfig("alpha entries must be positive".into()));
    }
    let logits: Vec<f64> = alpha
        .data()
        .iter()
        .zip(gumbel.data().iter())
        .map(|(&a, &g)| (crate::math::ln(a) + g) / lambda)
        .collect();
    let t = Tensor::new(alpha.shape().to_vec(), logits)?;
    crate::tensor::softmax(&t, 1)
}

/// Tape version used inside the search loop: differentiable w.r.t. `alpha`.
pub fn gumbel_softmax_on_tape(tape: &mut Tape, alpha: Var, gumbel: &Tensor, lambda: f64) -> Result<Var> {
    if lambda <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "temperature must be positive, got {lambda}"
        )));
    }
    let log_a = tape.ln_clamped(alpha, ALPHA_FLOOR);
    let g = tape.constant_from(gumbel);
    let sum = tape.add_n(&[log_a, g]);
    let scaled = tape.scale(sum, 1.0 / lambda);
    Ok(tape.softmax_rows(scaled))
}

/// The continuous search state: per-cell `p×q` parameter matrices plus one
/// row per fusion edge.
///
/// Positivity is enforced structurally: the store holds logits and
/// `alpha = exp(logits)`, so `log alpha` is always finite. Zero-initialized
/// logits give the uniform `alpha = 1`.
#[derive(Debug, Clone)]
pub struct ArchParams {
    /// Per-cell logits (`k` entries), or `[normal, reduction]` when shared.
    pub cells: Vec<ParamId>,
    /// Per-fusion-edge logit rows (ragged widths).
    pub fusion: Vec<ParamId>,
    /// Cell-sharing mode: one normal and one reduction matrix reused.
    pub shared: bool,
    pub p: usize,
    pub q: usize,
}

impl ArchParams {
    pub fn alloc(
        store: &mut ParamStore,
        p: usize,
        q: usize,
        num_cells: usize,
        fusion_widths: &[usize],
        shared: bool,
    ) -> Self {
        let matrices = if shared { 2 } else { num_cells };
        let cells = (0..matrices)
            .map(|_| store.add(vec![p, q], vec![0.0; p * q], true))
            .collect();
        let fusion = fusion_widths
            .iter()
            .map(|&w| store.add(vec![1, w], vec![0.0; w], true))
            .collect();
        ArchParams {
            cells,
            fusion,
            shared,
            p,
            q,
        }
    }

    /// Logits for cell `k` (respects sharing).
    pub fn logits_for(&self, k: usize, is_reduction: bool) -> ParamId {
        if self.shared {
            self.cells[usize::from(is_reduction)]
        } else {
            self.cells[k]
        }
    }

    /// `alpha = exp(logits)` for cell `k`, off-tape.
    pub fn alpha_for(&self, store: &ParamStore, k: usize, is_reduction: bool) -> Tensor {
        let id = self.logits_for(k, is_reduction);
        let data = store.value(id).iter().map(|&t| crate::math::exp(t)).collect();
        Tensor::new(vec![self.p, self.q], data).expect("alpha shape")
    }

    /// `alpha` row for fusion edge `e`, off-tape.
    pub fn fusion_alpha(&self, store: &ParamStore, e: usize) -> Vec<f64> {
        store.value(self.fusion[e]).iter().map(|&t| crate::math::exp(t)).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.cells.iter().chain(self.fusion.iter()).copied().collect()
    }
}

/// Exponential decay between the two endpoint temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureSchedule {
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub total_steps: usize,
}

impl TemperatureSchedule {
    pub fn new(lambda_init: f64, lambda_min: f64, total_steps: usize) -> Result<Self> {
        if lambda_init <= 0.0 || lambda_min <= 0.0 || lambda_min > lambda_init {
            return Err(Error::InvalidConfig(
                "temperature schedule needs 0 < lambda_min <= lambda_init".into(),
            ));
        }
        Ok(TemperatureSchedule {
            lambda_init,
            lambda_min,
            total_steps,
        })
    }

    /// `lambda(t) = lambda_init * (lambda_min / lambda_init)^(t/T)`, clamped
    /// at `lambda_min`; constant schedules (T = 0) stay at `lambda_init`.
    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lambda_init;
        }
        let t = (step as f64 / self.total_steps as f64).min(1.0);
        let v = self.lambda_init * crate::math::powf(self.lambda_min / self.lambda_init, t);
        v.max(self.lambda_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::ParamStore;

    #[test]
    fn gumbel_analytic_points() {
        // U = e^-1 -> G = 0;  U = e^-e -> G = -1
        let g0 = -crate::math::ln(-crate::math::ln(crate::math::exp(-1.0)));
        assert!(g0.abs() < 1e-12);
        let g1 = -crate::math::ln(-crate::math::ln(crate::math::exp(-core::f64::consts::E)));
        assert!((g1 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gumbel_mean_matches_euler_gamma() {
        let mut rng = stream(7, Stream::Gumbel);
        let n = 1_000_000usize;
        let g = sample_gumbel(1000, 1000, &mut rng);
        let mean: f64 = g.data().iter().sum::<f64>() / n as f64;
        assert!(
            (mean - crate::math::EULER_GAMMA).abs() < 0.005,
            "mean {mean} vs {}",
            crate::math::EULER_GAMMA
        );
    }

    #[test]
    fn gumbel_softmax_uniform_on_equal_alpha() {
        let alpha = Tensor::new(alloc::vec![1, 4], alloc::vec![3.0; 4]).unwrap();
        let g = Tensor::zeros(alloc::vec![1, 4]);
        let z = gumbel_softmax(&alpha, &g, 0.7).unwrap();
        for &v in z.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_softmax_saturates_at_low_temperature() {
        let alpha = Tensor::new(alloc::vec![1, 3], alloc::vec![2.0, 1.0, 1.0]).unwrap();
        let g = Tensor::zeros(alloc::vec![1, 3]);
        let z = gumbel_softmax(&alpha, &g, 1e-4).unwrap();
        assert!((z.data()[0] - 1.0).abs() < 1e-6);
        assert!(z.data()[1] < 1e-6 && z.data()[2] < 1e-6);
    }

    #[test]
    fn rejects_bad_temperature() {
        let alpha = Tensor::new(alloc::vec![1, 2], alloc::vec![1.0, 1.0]).unwrap();
        let g = Tensor::zeros(alloc::vec![1, 2]);
        assert!(gumbel_softmax(&alpha, &g, 0.0).is_err());
        assert!(gumbel_softmax(&alpha, &g, -1.0).is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = TemperatureSchedule::new(1.0, 0.03, 1000).unwrap();
        assert!((s.at(0) - 1.0).abs() < 1e-12);
        assert!((s.at(1000) - 0.03).abs() < 1e-12);
        assert!((s.at(1500) - 0.03).abs() < 1e-12); // clamped past T
        let mid = s.at(500);
        assert!((mid - crate::math::sqrt(0.03)).abs() < 1e-12, "mid {mid}");
        // monotone non-increasing
        let mut prev = f64::INFINITY;
        for t in 0..=1000 {
            let v = s.at(t);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn rows_are_stochastic_at_all_temperatures() {
        let mut rng = stream(3, Stream::Gumbel);
        for &lambda in &[1.0, 0.3, 0.05, 0.01] {
            let alpha_data: Vec<f64> = (0..40).map(|_| crate::rng::uniform(&mut rng, 0.05, 3.0)).collect();
            let alpha = Tensor::new(alloc::vec![5, 8], alpha_data).unwrap();
            let g = sample_gumbel(5, 8, &mut rng);
            let z = gumbel_softmax(&alpha, &g, lambda).unwrap();
            for r in 0..5 {
                let row = &z.data()[r * 8..(r + 1) * 8];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| (0.0..1.0).contains(&v) || v == 1.0));
            }
        }
    }

    #[test]
    fn lower_temperature_sharpens_rows() {
        let mut rng = stream(11, Stream::Gumbel);
        let alpha_data: Vec<f64> = (0..24).map(|_| crate::rng::uniform(&mut rng, 0.1, 2.0)).collect();
        let alpha = Tensor::new(alloc::vec![3, 8], alpha_data).unwrap();
        let g = sample_gumbel(3, 8, &mut rng);
        let hot = gumbel_softmax(&alpha, &g, 1.0).unwrap();
        let cold = gumbel_softmax(&alpha, &g, 0.05).unwrap();
        for r in 0..3 {
            let mx = |t: &Tensor| {
                t.data()[r * 8..(r + 1) * 8]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            assert!(mx(&cold) >= mx(&hot));
        }
    }

    #[test]
    fn tape_gumbel_softmax_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck;
        let mut rng = stream(5, Stream::Gumbel);
        let alpha0: Vec<f64> = (0..40).map(|_| crate::rng::uniform(&mut rng, 0.2, 2.0)).collect();
        let g = sample_gumbel(5, 8, &mut rng);
        // random projection keeps the check sensitive to every entry
        let proj: Vec<f64> = (0..40).map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let store = ParamStore::new();
        let eval = |a: &[f64]| -> f64 {
            let mut tape = Tape::new(&store, true);
            let av = tape.leaf(alloc::vec![5, 8], a.to_vec());
            let z = gumbel_softmax_on_tape(&mut tape, av, &g, 0.7).unwrap();
            let s = tape.dot_const(z, proj.clone());
            tape.scalar(s)
        };
        let mut tape = Tape::new(&store, true);
        let av = tape.leaf(alloc::vec![5, 8], alpha0.clone());
        let z = gumbel_softmax_on_tape(&mut tape, av, &g, 0.7).unwrap();
        let s = tape.dot_const(z, proj.clone());
        let grads = tape.backward(s).unwrap();
        let analytic = grads.leaf(av).unwrap();
        let worst = gradcheck::check(eval, &alpha0, analytic);
        assert!(worst < gradcheck::FD_REL_TOL, "rel err {worst}");
    }
}
