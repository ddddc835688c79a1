//! Recovering the training pairs from a [`ReconstructionProblem`].
//!
//! With a single instance the first transition can be solved in closed form
//! ([`solve_n1`]): the two target sums are `x·Z` and `Z`, so their ratio is
//! `x`. In general the system is solved with Levenberg-Marquardt on the
//! residual vector using the analytic Jacobian, restarted from several
//! deterministic starting points ([`solve`]).
//!
//! The residuals are affine in the labels, so each start first runs
//! Levenberg-Marquardt over the inputs alone with the labels eliminated by
//! linear least squares (variable projection), then polishes in the full
//! space. The reduced problem has far fewer flat directions.
//!
//! The system is symmetric under reordering of the `(xᵢ, yᵢ)` pairs, so a
//! recovered dataset is compared to a reference with [`match_solutions`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::lm::{self, LeastSquares};
use crate::model::{train, Dataset, TrainConfig};
use crate::system::{max_norm, unpack, ReconstructionProblem};
use crate::trace::ParamTrace;

pub const DEFAULT_RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Targets smaller than this make the closed-form division meaningless.
pub const DEGENERATE_TARGET: f64 = 1e-14;

// A converged start keeps iterating for at most this many steps towards
// this residual. The Jacobian is badly conditioned near the solution, so a
// point that just meets the tolerance can still be far from the root.
const REFINE_ITERATIONS: usize = 8;
const REFINE_TOLERANCE: f64 = 1e-15;

// Starts that converge but refine no further than this may sit on a near
// root in a flat valley; later starts are still tried in search of a better one.
const EXACT_ROOT: f64 = 1e-13;

/// Inclusive bounds applied to every trial point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxBounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl BoxBounds {
    fn clip(&self, z: &mut [f64]) {
        let n = z.len() / 2;
        for (i, v) in z.iter_mut().enumerate() {
            let (lo, hi) = if i < n { self.x } else { self.y };
            *v = v.clamp(lo, hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Iteration budget per start, shared by the reduced and the full phase.
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the residual vector.
    pub residual_tolerance: f64,
    pub step_tolerance: f64,
    pub damping_init: f64,
    pub multistart_count: usize,
    pub seed: u64,
    pub box_bounds: Option<BoxBounds>,
    /// Replaces the default first start `(x₀ = 0.5, everything else 0)`.
    pub first_start: Option<Vec<f64>>,
    /// Accept traces with fewer than `n + 1` epochs and solve in the
    /// least-squares sense.
    pub allow_underdetermined: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            residual_tolerance: DEFAULT_RESIDUAL_TOLERANCE,
            step_tolerance: 1e-12,
            damping_init: 1e-3,
            multistart_count: 16,
            seed: 0,
            box_bounds: None,
            first_start: None,
            allow_underdetermined: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("residual_tolerance", self.residual_tolerance)?;
        positive("step_tolerance", self.step_tolerance)?;
        positive("damping_init", self.damping_init)?;
        if self.multistart_count == 0 {
            return Err(Error::InvalidArgument(
                "multistart_count must be at least 1".into(),
            ));
        }
        if let Some(b) = &self.box_bounds {
            if !(b.x.0 <= b.x.1 && b.y.0 <= b.y.1) {
                return Err(Error::InvalidArgument(format!("empty box bounds {b:?}")));
            }
        }
        Ok(())
    }

    fn lm_settings(&self, max_iterations: usize) -> lm::Settings {
        lm::Settings {
            max_iterations,
            residual_tolerance: self.residual_tolerance,
            step_tolerance: self.step_tolerance,
            damping_init: self.damping_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub recovered: Dataset,
    /// Max-norm of the residual vector at `recovered`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub starts_tried: usize,
}

/// Closed-form recovery of a single `(x, y)` pair.
///
/// `x` is the ratio of the two targets of the first transition and `y`
/// follows from `Z(x, y) = target_b`. Later transitions only enter the
/// reported residual norm.
pub fn solve_n1(problem: &ReconstructionProblem) -> Result<ReconstructionResult> {
    solve_n1_with_tolerance(problem, DEFAULT_RESIDUAL_TOLERANCE)
}

fn solve_n1_with_tolerance(
    problem: &ReconstructionProblem,
    tolerance: f64,
) -> Result<ReconstructionResult> {
    if problem.n() != 1 {
        return Err(Error::InvalidArgument(format!(
            "closed-form recovery needs n = 1, got n = {}",
            problem.n()
        )));
    }
    let first = problem.transitions()[0];
    if first.target_b.abs() < DEGENERATE_TARGET {
        return Err(Error::DegenerateDivision {
            target: first.target_b,
        });
    }
    let x = first.target_w / first.target_b;
    let t = (first.params.w * x + first.params.b).tanh();
    let y = t - first.target_b / (1.0 - t * t);
    let recovered = Dataset::new(vec![x], vec![y])?;
    let residual_norm = max_norm(&problem.residuals(&[x, y])?);
    Ok(ReconstructionResult {
        recovered,
        residual_norm,
        iterations: 0,
        converged: residual_norm <= tolerance,
        starts_tried: 1,
    })
}

/// Multi-start Levenberg-Marquardt.
///
/// Starts are tried in order until one reaches a residual of at most
/// `1e-13` (or all are used up); the result is the start with the smallest
/// residual norm (lowest index on ties). A converged start just inside a
/// looser tolerance does not stop the search, because in flat valleys such
/// points can be far from every root. Non-convergence is reported through
/// [`ReconstructionResult::converged`], not as an error.
pub fn solve(problem: &ReconstructionProblem, cfg: &SolverConfig) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let n = problem.n();
    if !problem.is_determined() && !cfg.allow_underdetermined {
        return Err(Error::InsufficientTrace {
            epochs: problem.trace().epochs(),
            required: n + 1,
        });
    }
    if let Some(start) = &cfg.first_start {
        if start.len() != 2 * n || start.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "first start must hold 2n = {} finite values",
                2 * n
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<lm::Outcome> = None;
    let mut starts_tried = 0;
    for k in 0..cfg.multistart_count {
        let start = match (k, &cfg.first_start) {
            (0, Some(s)) => s.clone(),
            (0, None) => default_first_start(n),
            _ => random_start(n, &mut rng),
        };
        let run = run_start(problem, start, cfg);
        starts_tried += 1;
        let exact = run.converged && run.residual_norm <= EXACT_ROOT;
        if best
            .as_ref()
            .is_none_or(|b| run.residual_norm < b.residual_norm)
        {
            best = Some(run);
        }
        if exact {
            break;
        }
    }

    let best = best.expect("at least one start");
    Ok(ReconstructionResult {
        recovered: unpack(&best.z)?,
        residual_norm: best.residual_norm,
        iterations: best.iterations,
        converged: best.converged,
        starts_tried,
    })
}

/// Closed form for a single instance when it works, Levenberg-Marquardt otherwise.
pub fn reconstruct(
    problem: &ReconstructionProblem,
    cfg: &SolverConfig,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    if problem.n() == 1 && cfg.first_start.is_none() {
        if let Ok(result) = solve_n1_with_tolerance(problem, cfg.residual_tolerance) {
            if result.converged {
                return Ok(result);
            }
        }
    }
    solve(problem, cfg)
}

fn default_first_start(n: usize) -> Vec<f64> {
    let mut z = vec![0.0; 2 * n];
    z[0] = 0.5;
    z
}

fn random_start(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
    z.extend((0..n).map(|_| rng.gen_range(-0.9..=0.9)));
    z
}

/// Reduced phase from the inputs of `start`, then the full system from
/// wherever it stopped. The labels of `start` only matter if the reduced
/// phase cannot be evaluated.
fn run_start(problem: &ReconstructionProblem, start: Vec<f64>, cfg: &SolverConfig) -> lm::Outcome {
    let n = problem.n();
    let full = FullSystem {
        problem,
        bounds: cfg.box_bounds,
    };
    let projected = ProjectedSystem {
        problem,
        bounds: cfg.box_bounds,
    };

    let reduced = lm::minimize(
        &projected,
        start[..n].to_vec(),
        &cfg.lm_settings(cfg.max_iterations),
    );
    let mut z = start;
    if let Some(ys) = projected.labels(&reduced.z) {
        z[..n].copy_from_slice(&reduced.z);
        z[n..].copy_from_slice(&ys);
    }
    let remaining = cfg.max_iterations - reduced.iterations;
    let mut out = lm::minimize(&full, z, &cfg.lm_settings(remaining));
    out.iterations += reduced.iterations;
    if out.converged && out.residual_norm > REFINE_TOLERANCE {
        let settings = lm::Settings {
            max_iterations: REFINE_ITERATIONS,
            residual_tolerance: REFINE_TOLERANCE,
            ..cfg.lm_settings(0)
        };
        let refined = lm::minimize(&projected, out.z[..n].to_vec(), &settings);
        out.iterations += refined.iterations;
        if let Some(ys) = projected.labels(&refined.z) {
            let mut z = refined.z;
            z.extend(ys);
            full.clip(&mut z);
            let mut r = vec![0.0; problem.residual_count()];
            problem.residuals_into(&z, &mut r);
            let norm = max_norm(&r);
            if norm < out.residual_norm {
                out.z = z;
                out.residual_norm = norm;
            }
        }
    }
    out
}

struct FullSystem<'a> {
    problem: &'a ReconstructionProblem,
    bounds: Option<BoxBounds>,
}

impl LeastSquares for FullSystem<'_> {
    fn residual_count(&self) -> usize {
        self.problem.residual_count()
    }

    fn unknowns(&self) -> usize {
        self.problem.unknowns()
    }

    fn residuals(&self, z: &[f64], out: &mut [f64]) {
        self.problem.residuals_into(z, out);
    }

    fn jacobian(&self, z: &[f64], jac: &mut DMatrix<f64>) {
        self.problem.jacobian_into(z, jac);
    }

    fn clip(&self, z: &mut [f64]) {
        if let Some(b) = &self.bounds {
            b.clip(z);
        }
    }
}

/// The residuals as a function of the inputs only, with the labels set to
/// their least-squares optimum `y*(x)`.
///
/// Writing `r(x, y) = r(x, 0) + J_y(x)·y`, the reduced residual is
/// `P⊥·r(x, 0)` where `P⊥` projects onto the complement of the range of
/// `J_y`. Its Jacobian is taken as `P⊥·J_x(x, y*)` (Kaufman's form), which
/// is exact wherever the reduced residual vanishes.
struct ProjectedSystem<'a> {
    problem: &'a ReconstructionProblem,
    bounds: Option<BoxBounds>,
}

struct Projection {
    labels: DVector<f64>,
    /// Residual vector at `(x, labels)`.
    residuals: DVector<f64>,
    /// Orthonormal basis of the range of `J_y`.
    basis: DMatrix<f64>,
}

impl ProjectedSystem<'_> {
    fn project(&self, xs: &[f64]) -> Option<Projection> {
        let n = self.problem.n();
        let m = self.problem.residual_count();
        let mut z = xs.to_vec();
        z.resize(2 * n, 0.0);
        let mut r0 = vec![0.0; m];
        self.problem.residuals_into(&z, &mut r0);
        let mut jac = DMatrix::zeros(m, 2 * n);
        self.problem.jacobian_into(&z, &mut jac);
        let r0 = DVector::from_vec(r0);
        let jy = jac.columns(n, n).into_owned();

        let svd = jy.clone().svd(true, true);
        let largest = svd.singular_values.max();
        if !largest.is_finite() {
            return None;
        }
        let cutoff = largest * f64::EPSILON * (m.max(n) as f64);
        let labels = svd.solve(&(-&r0), cutoff).ok()?;
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        let u = svd.u.as_ref()?;
        let mut basis = DMatrix::zeros(m, rank);
        let mut col = 0;
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > cutoff {
                basis.set_column(col, &u.column(k));
                col += 1;
            }
        }
        let residuals = r0 + &jy * &labels;
        Some(Projection {
            labels,
            residuals,
            basis,
        })
    }

    fn labels(&self, xs: &[f64]) -> Option<Vec<f64>> {
        let ys: Vec<f64> = self.project(xs)?.labels.iter().copied().collect();
        ys.iter().all(|v| v.is_finite()).then_some(ys)
    }
}

impl LeastSquares for ProjectedSystem<'_> {
    fn residual_count(&self) -> usize {
        self.problem.residual_count()
    }

    fn unknowns(&self) -> usize {
        self.problem.n()
    }

    fn residuals(&self, xs: &[f64], out: &mut [f64]) {
        match self.project(xs) {
            Some(p) => out.copy_from_slice(p.residuals.as_slice()),
            None => out.fill(f64::NAN),
        }
    }

    fn jacobian(&self, xs: &[f64], jac: &mut DMatrix<f64>) {
        let n = self.problem.n();
        let Some(p) = self.project(xs) else {
            jac.fill(f64::NAN);
            return;
        };
        let mut z = xs.to_vec();
        z.extend(p.labels.iter());
        let mut full = DMatrix::zeros(self.problem.residual_count(), 2 * n);
        self.problem.jacobian_into(&z, &mut full);
        let jx = full.columns(0, n).into_owned();
        let along = &p.basis * (p.basis.transpose() * &jx);
        jac.copy_from(&(jx - along));
    }

    fn clip(&self, xs: &mut [f64]) {
        if let Some(b) = &self.bounds {
            for v in xs {
                *v = v.clamp(b.x.0, b.x.1);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    /// `pairing[i]` is the index of the reference pair matched to recovered pair `i`.
    pub pairing: Vec<usize>,
    /// Largest `|Δx|` or `|Δy|` over matched pairs.
    pub max_abs_error: f64,
}

impl MatchReport {
    pub fn is_identity(&self) -> bool {
        self.pairing.iter().enumerate().all(|(i, &j)| i == j)
    }
}

/// Matches recovered pairs to reference pairs by minimum total `|Δx| + |Δy|`.
pub fn match_solutions(recovered: &Dataset, truth: &Dataset) -> Result<MatchReport> {
    let n = recovered.len();
    if truth.len() != n {
        return Err(Error::InvalidArgument(format!(
            "cannot match {n} recovered pairs against {} reference pairs",
            truth.len()
        )));
    }
    let rec: Vec<(f64, f64)> = recovered.pairs().collect();
    let tru: Vec<(f64, f64)> = truth.pairs().collect();
    let cost: Vec<f64> = rec
        .iter()
        .flat_map(|&(x, y)| {
            tru.iter()
                .map(move |&(tx, ty)| (x - tx).abs() + (y - ty).abs())
        })
        .collect();
    let pairing = min_cost_assignment(&cost, n);
    let max_abs_error = pairing
        .iter()
        .enumerate()
        .map(|(i, &j)| (rec[i].0 - tru[j].0).abs().max((rec[i].1 - tru[j].1).abs()))
        .fold(0.0, f64::max);
    Ok(MatchReport {
        pairing,
        max_abs_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    /// Per epoch, `(|Δw|, |Δb|)` between the retrained and observed parameters.
    pub deviations: Vec<(f64, f64)>,
    pub max_deviation: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Retrains on `dataset` from the trace's epoch-0 parameters and compares
/// every epoch with the observed trace.
pub fn verify_reconstruction(
    trace: &ParamTrace,
    dataset: &Dataset,
    threshold: f64,
) -> Result<VerifyReport> {
    if dataset.len() != trace.n() {
        return Err(Error::InvalidArgument(format!(
            "trace was recorded with n = {} but the dataset has {} pairs",
            trace.n(),
            dataset.len()
        )));
    }
    let cfg = TrainConfig::new(trace.eta(), trace.epochs(), trace.entries()[0])?;
    let retrained = train(dataset, &cfg)?;
    let deviations: Vec<(f64, f64)> = retrained
        .entries()
        .iter()
        .zip(trace.entries())
        .map(|(a, b)| ((a.w - b.w).abs(), (a.b - b.b).abs()))
        .collect();
    let max_deviation = deviations
        .iter()
        .fold(0.0f64, |m, &(dw, db)| m.max(dw).max(db));
    Ok(VerifyReport {
        deviations,
        max_deviation,
        threshold,
        passed: max_deviation < threshold,
    })
}
