//! The nonlinear system whose roots are the training pairs behind a trace.
//!
//! Unknowns are laid out as `z = (x₀, …, xₙ₋₁, y₀, …, yₙ₋₁)`. For every
//! transition `j → j+1` of the trace, with `T = tanh(w⁽ʲ⁾x + b⁽ʲ⁾)` and
//! `Z_j(x, y) = (T − y)(1 − T²)`, two residuals are emitted in this order:
//!
//! ```text
//! r_w(j) = Σᵢ xᵢ·Z_j(xᵢ, yᵢ) − n/(2η)·(w⁽ʲ⁾ − w⁽ʲ⁺¹⁾)
//! r_b(j) = Σᵢ    Z_j(xᵢ, yᵢ) − n/(2η)·(b⁽ʲ⁾ − b⁽ʲ⁺¹⁾)
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Dataset, Params};
use crate::trace::ParamTrace;

/// One epoch transition: the parameters of epoch `j` and the two scaled
/// parameter deltas the gradient sums must equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub params: Params,
    pub target_w: f64,
    pub target_b: f64,
}

#[derive(Debug, Clone)]
pub struct ReconstructionProblem {
    trace: ParamTrace,
    transitions: Vec<Transition>,
}

impl ReconstructionProblem {
    pub fn new(trace: ParamTrace) -> Result<Self> {
        if trace.epochs() < 2 {
            return Err(Error::InsufficientTrace {
                epochs: trace.epochs(),
                required: 2,
            });
        }
        let scale = trace.n() as f64 / (2.0 * trace.eta());
        let transitions = trace
            .entries()
            .windows(2)
            .map(|pair| Transition {
                params: pair[0],
                target_w: scale * (pair[0].w - pair[1].w),
                target_b: scale * (pair[0].b - pair[1].b),
            })
            .collect();
        Ok(Self {
            trace: trace.without_debug(),
            transitions,
        })
    }

    pub fn trace(&self) -> &ParamTrace {
        &self.trace
    }

    pub fn n(&self) -> usize {
        self.trace.n()
    }

    /// Number of unknowns, `2n`.
    pub fn unknowns(&self) -> usize {
        2 * self.n()
    }

    /// Number of residuals, `m = 2(E − 1)`.
    pub fn residual_count(&self) -> usize {
        2 * self.transitions.len()
    }

    /// `m ≥ 2n`, i.e. at least `n + 1` recorded epochs.
    pub fn is_determined(&self) -> bool {
        self.residual_count() >= self.unknowns()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.unknowns() {
            return Err(Error::InvalidArgument(format!(
                "unknown vector has length {}, expected 2n = {}",
                z.len(),
                self.unknowns()
            )));
        }
        Ok(())
    }

    pub fn residuals(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        let mut out = vec![0.0; self.residual_count()];
        self.residuals_into(z, &mut out);
        Ok(out)
    }

    pub(crate) fn residuals_into(&self, z: &[f64], out: &mut [f64]) {
        let (xs, ys) = z.split_at(self.n());
        for (t, r) in self.transitions.iter().zip(out.chunks_exact_mut(2)) {
            let mut sum_w = 0.0;
            let mut sum_b = 0.0;
            for (&x, &y) in xs.iter().zip(ys) {
                let k = kernel(t.params, x, y);
                sum_w += x * k.z;
                sum_b += k.z;
            }
            r[0] = sum_w - t.target_w;
            r[1] = sum_b - t.target_b;
        }
    }

    /// Analytic `m × 2n` Jacobian of [`residuals`](Self::residuals).
    pub fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(z)?;
        let mut jac = DMatrix::zeros(self.residual_count(), self.unknowns());
        self.jacobian_into(z, &mut jac);
        Ok(jac)
    }

    pub(crate) fn jacobian_into(&self, z: &[f64], jac: &mut DMatrix<f64>) {
        let n = self.n();
        let (xs, ys) = z.split_at(n);
        for (j, t) in self.transitions.iter().enumerate() {
            let (rw, rb) = (2 * j, 2 * j + 1);
            for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
                let k = kernel(t.params, x, y);
                // d(x·Z)/dx = Z + x·dZ/dx
                jac[(rw, i)] = k.z + x * k.dz_dx;
                jac[(rw, n + i)] = x * k.dz_dy;
                jac[(rb, i)] = k.dz_dx;
                jac[(rb, n + i)] = k.dz_dy;
            }
        }
    }

    pub fn residuals_at(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.residuals(&pack(data))
    }
}

struct Kernel {
    z: f64,
    dz_dx: f64,
    dz_dy: f64,
}

fn kernel(p: Params, x: f64, y: f64) -> Kernel {
    let t = (p.w * x + p.b).tanh();
    let sech2 = 1.0 - t * t;
    Kernel {
        z: (t - y) * sech2,
        dz_dx: p.w * sech2 * (sech2 - 2.0 * t * (t - y)),
        dz_dy: -sech2,
    }
}

/// Lays a dataset out as `(x₀, …, xₙ₋₁, y₀, …, yₙ₋₁)`.
pub fn pack(data: &Dataset) -> Vec<f64> {
    data.xs().iter().chain(data.ys()).copied().collect()
}

pub fn unpack(z: &[f64]) -> Result<Dataset> {
    if z.is_empty() || !z.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "unknown vector length {} is not 2n",
            z.len()
        )));
    }
    let (xs, ys) = z.split_at(z.len() / 2);
    Dataset::new(xs.to_vec(), ys.to_vec())
}

pub fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, r| m.max(r.abs()))
}

/// A fully connected network of `layers` layers, each `width` nodes wide,
/// trained on `instances` instances for `epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkShape {
    pub width: u64,
    pub layers: u64,
    pub instances: u64,
    pub epochs: u64,
}

impl NetworkShape {
    pub fn new(width: u64, layers: u64, instances: u64, epochs: u64) -> Result<Self> {
        if width == 0 || instances == 0 || epochs == 0 {
            return Err(Error::InvalidArgument(
                "width, instances and epochs must be positive".into(),
            ));
        }
        if layers < 2 {
            return Err(Error::InvalidArgument(format!(
                "a network needs at least 2 layers, got {layers}"
            )));
        }
        Ok(Self {
            width,
            layers,
            instances,
            epochs,
        })
    }

    pub fn nodes(&self) -> u128 {
        self.width as u128 * self.layers as u128
    }

    pub fn connections(&self) -> u128 {
        let w = self.width as u128;
        w * w * (self.layers as u128 - 1)
    }
}

/// Equation/unknown counting. Necessary for a unique solution, not sufficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub unknowns: u128,
    pub equations: u128,
    pub feasible: bool,
    pub min_epochs: u128,
    /// The rough `I/ℓ` epoch bound.
    pub rough_epoch_bound: f64,
}

impl FeasibilityReport {
    pub const LABEL: &'static str = "counting heuristic";
}

pub fn feasibility(shape: NetworkShape) -> FeasibilityReport {
    let w = shape.width as u128;
    let unknowns = shape.nodes() * shape.instances as u128;
    let per_epoch = w * (w + 1) * (shape.layers as u128 - 1);
    let equations = per_epoch * shape.epochs as u128;
    FeasibilityReport {
        unknowns,
        equations,
        feasible: equations >= unknowns,
        min_epochs: unknowns.div_ceil(per_epoch),
        rough_epoch_bound: shape.instances as f64 / shape.width as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train, TrainConfig};
    use crate::trace::FloatFormat;
    use proptest::prelude::*;

    fn reference_trace(n: usize, epochs: usize) -> (Dataset, ParamTrace) {
        let data = Dataset::new(
            [0.6, 0.2, 0.1, 0.9][..n].to_vec(),
            [0.5, 0.4, 0.3, 0.6][..n].to_vec(),
        )
        .unwrap();
        let cfg = TrainConfig::new(0.1, epochs, Params { w: 0.5, b: 0.5 }).unwrap();
        let trace = train(&data, &cfg).unwrap();
        (data, trace)
    }

    /// Residuals evaluated straight from the formula, one unknown at a time.
    fn fd_jacobian(problem: &ReconstructionProblem, z: &[f64], h: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(problem.residual_count(), z.len());
        for c in 0..z.len() {
            let mut plus = z.to_vec();
            let mut minus = z.to_vec();
            plus[c] += h;
            minus[c] -= h;
            let rp = problem.residuals(&plus).unwrap();
            let rm = problem.residuals(&minus).unwrap();
            for r in 0..rp.len() {
                jac[(r, c)] = (rp[r] - rm[r]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn ground_truth_is_a_root_of_table1_system() {
        let (data, trace) = reference_trace(1, 5);
        let problem = ReconstructionProblem::new(trace).unwrap();
        assert_eq!(problem.residual_count(), 8);
        let r = problem.residuals(&[0.6, 0.5]).unwrap();
        assert!(max_norm(&r) < 1e-9, "{r:?}");
        assert_eq!(problem.residuals_at(&data).unwrap(), r);
    }

    #[test]
    fn single_instance_right_hand_sides() {
        let (_, trace) = reference_trace(1, 2);
        let problem = ReconstructionProblem::new(trace).unwrap();
        let t = problem.transitions()[0];
        assert_eq!(format!("{:.3}", t.target_w), "0.055");
        // 3-decimal table values give 0.090; at full precision it is 0.0917.
        assert!((t.target_b - 0.090).abs() < 2e-3);
        assert_eq!(format!("{:.4}", t.target_b), "0.0917");
    }

    #[test]
    fn two_instance_right_hand_sides_at_seven_digits() {
        let (_, trace) = reference_trace(2, 3);
        let problem =
            ReconstructionProblem::new(trace.rounded(FloatFormat::Significant(7))).unwrap();
        let t = problem.transitions();
        assert!((t[0].target_w - 10.0 * (0.5000000 - 0.4925472)).abs() < 1e-15);
        assert!((t[0].target_b - 10.0 * (0.5000000 - 0.4810773)).abs() < 1e-15);
        assert!((t[1].target_w - 10.0 * (0.4925472 - 0.4855530)).abs() < 1e-15);
        assert!((t[1].target_b - 10.0 * (0.4810773 - 0.4634884)).abs() < 1e-15);
    }

    #[test]
    fn insufficient_trace() {
        let (_, trace) = reference_trace(2, 1);
        assert!(matches!(
            ReconstructionProblem::new(trace),
            Err(Error::InsufficientTrace {
                epochs: 1,
                required: 2
            })
        ));
    }

    #[test]
    fn wrong_unknown_length_is_rejected() {
        let (_, trace) = reference_trace(2, 3);
        let problem = ReconstructionProblem::new(trace).unwrap();
        assert!(problem.residuals(&[0.1, 0.2, 0.3]).is_err());
        assert!(problem.jacobian(&[0.1]).is_err());
    }

    #[test]
    fn single_instance_bias_column() {
        let (_, trace) = reference_trace(1, 4);
        let problem = ReconstructionProblem::new(trace.clone()).unwrap();
        let z = [0.37, -0.2];
        let jac = problem.jacobian(&z).unwrap();
        for (j, p) in trace.entries()[..3].iter().enumerate() {
            let t = (p.w * z[0] + p.b).tanh();
            assert_eq!(jac[(2 * j + 1, 1)], -(1.0 - t * t));
        }
    }

    #[test]
    fn zero_inputs_zero_label_derivatives_in_weight_rows() {
        let (_, trace) = reference_trace(3, 4);
        let problem = ReconstructionProblem::new(trace).unwrap();
        let z = [0.0, 0.0, 0.0, 0.2, -0.4, 0.7];
        let jac = problem.jacobian(&z).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                assert_eq!(jac[(2 * j, 3 + i)], 0.0);
            }
        }
    }

    #[test]
    fn feasibility_examples() {
        for n in 1..=10 {
            for e in 1..=12 {
                let r = feasibility(NetworkShape::new(1, 2, n, e).unwrap());
                assert_eq!(r.unknowns, 2 * n as u128);
                assert_eq!(r.equations, 2 * e as u128);
                assert_eq!(r.feasible, e >= n);
                assert_eq!(r.min_epochs, n as u128);
            }
        }
        let r = feasibility(NetworkShape::new(2, 3, 6, 3).unwrap());
        assert_eq!((r.unknowns, r.equations, r.feasible), (36, 36, true));
        let r = feasibility(NetworkShape::new(3, 4, 1_000_000, 1).unwrap());
        assert!(!r.feasible);
        assert!(NetworkShape::new(1, 1, 1, 1).is_err());
        assert!(NetworkShape::new(0, 2, 1, 1).is_err());
        assert!(NetworkShape::new(1, 2, 1, 0).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Dataset, usize, Vec<f64>)> {
        (1usize..=6, 2usize..=7).prop_flat_map(|(n, e)| {
            (
                proptest::collection::vec((0.0f64..1.0, -0.9f64..0.9), n),
                Just(e),
                proptest::collection::vec(-1.0f64..1.0, 2 * n),
            )
                .prop_map(|(pairs, e, z)| (Dataset::from_pairs(&pairs).unwrap(), e, z))
        })
    }

    proptest! {
        #[test]
        fn truth_is_root_of_generated_trace((data, epochs, _) in arb_case()) {
            let cfg = TrainConfig::new(0.1, epochs, Params { w: 0.5, b: 0.5 }).unwrap();
            let problem = ReconstructionProblem::new(train(&data, &cfg).unwrap()).unwrap();
            prop_assert!(max_norm(&problem.residuals_at(&data).unwrap()) < 1e-9);
        }

        #[test]
        fn residuals_invariant_under_pair_permutation(
            (data, epochs, z) in arb_case(),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let cfg = TrainConfig::new(0.1, epochs, Params { w: 0.5, b: 0.5 }).unwrap();
            let problem = ReconstructionProblem::new(train(&data, &cfg).unwrap()).unwrap();
            let n = data.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = order.iter().map(|&i| z[i]).chain(order.iter().map(|&i| z[n + i])).collect();
            let a = problem.residuals(&z).unwrap();
            let b = problem.residuals(&permuted).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-14);
            }
        }

        #[test]
        fn jacobian_matches_central_differences((data, epochs, z) in arb_case()) {
            let cfg = TrainConfig::new(0.1, epochs, Params { w: 0.5, b: 0.5 }).unwrap();
            let problem = ReconstructionProblem::new(train(&data, &cfg).unwrap()).unwrap();
            let analytic = problem.jacobian(&z).unwrap();
            let fd = fd_jacobian(&problem, &z, 1e-6);
            for (a, f) in analytic.iter().zip(fd.iter()) {
                prop_assert!((a - f).abs() <= 1e-6 * a.abs().max(1e-3), "{} vs {}", a, f);
            }
        }
    }
}
