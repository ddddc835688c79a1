//! The one-input, one-output tanh neuron and its full-batch training loop.

use rand::Rng;

use crate::error::{Error, Result};
use crate::trace::{DebugRecord, ParamTrace};

/// Parameters beyond this magnitude are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Params {
    pub w: f64,
    pub b: f64,
}

impl Params {
    pub fn new(w: f64, b: f64) -> Result<Self> {
        if !w.is_finite() || !b.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "parameters must be finite, got w={w}, b={b}"
            )));
        }
        Ok(Self { w, b })
    }

    /// Samples `w` and `b` uniformly from `[0, 1)`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            w: rng.gen_range(0.0..1.0),
            b: rng.gen_range(0.0..1.0),
        }
    }
}

/// Paired inputs and labels. Always non-empty, equal lengths, finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("dataset must not be empty".into()));
        }
        if xs.len() != ys.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} inputs but {} labels",
                xs.len(),
                ys.len()
            )));
        }
        if let Some(v) = xs.iter().chain(&ys).find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dataset values must be finite, found {v}"
            )));
        }
        Ok(Self { xs, ys })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let (xs, ys) = pairs.iter().copied().unzip();
        Self::new(xs, ys)
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    /// Reorders the pairs so that pair `i` of the result is pair `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len()
            || order
                .iter()
                .any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::InvalidArgument(
                "not a permutation of the dataset indices".into(),
            ));
        }
        Ok(Self {
            xs: order.iter().map(|&i| self.xs[i]).collect(),
            ys: order.iter().map(|&i| self.ys[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub init: Params,
}

impl TrainConfig {
    pub fn new(eta: f64, epochs: usize, init: Params) -> Result<Self> {
        let cfg = Self { eta, epochs, init };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.eta
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        Params::new(self.init.w, self.init.b)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gradients {
    pub dw: f64,
    pub db: f64,
}

/// `ŷᵢ = tanh(w·xᵢ + b)`.
pub fn forward(params: Params, xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(
            "forward pass needs at least one input".into(),
        ));
    }
    Ok(predict(params, xs))
}

fn predict(params: Params, xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| (params.w * x + params.b).tanh())
        .collect()
}

pub fn mse(yhat: &[f64], ys: &[f64]) -> Result<f64> {
    if yhat.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} predictions vs {} labels",
            yhat.len(),
            ys.len()
        )));
    }
    if ys.is_empty() {
        return Err(Error::InvalidArgument("mse of an empty vector".into()));
    }
    Ok(squared_error_mean(yhat, ys))
}

fn squared_error_mean(yhat: &[f64], ys: &[f64]) -> f64 {
    let sum: f64 = yhat.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum();
    sum / ys.len() as f64
}

/// Analytic partial derivatives of the MSE with respect to `w` and `b`,
/// using `d/dz tanh(z) = 1 − tanh²(z)`.
pub fn gradients(params: Params, data: &Dataset) -> Gradients {
    gradients_from_predictions(&predict(params, data.xs()), data)
}

fn gradients_from_predictions(yhat: &[f64], data: &Dataset) -> Gradients {
    let n = data.len() as f64;
    let mut dw = 0.0;
    let mut db = 0.0;
    for ((&p, &x), &y) in yhat.iter().zip(data.xs()).zip(data.ys()) {
        let base = 2.0 * (p - y) * (1.0 - p * p);
        db += base;
        dw += x * base;
    }
    Gradients {
        dw: dw / n,
        db: db / n,
    }
}

/// Runs full-batch gradient descent and records the parameters of every epoch.
///
/// Entry `j` of the trace holds the parameters used in epoch `j`'s forward
/// pass; the update is applied after recording. The trace carries a debug
/// block with the predictions and loss of each epoch.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<ParamTrace> {
    cfg.validate()?;
    let mut params = cfg.init;
    let mut entries = Vec::with_capacity(cfg.epochs);
    let mut debug = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let yhat = predict(params, data.xs());
        let loss = squared_error_mean(&yhat, data.ys());
        let grad = gradients_from_predictions(&yhat, data);
        entries.push(params);
        debug.push(DebugRecord { yhat, loss });

        // The last recorded epoch needs no update, but the divergence check
        // still applies to the value that would follow it.
        let next = Params {
            w: params.w - cfg.eta * grad.dw,
            b: params.b - cfg.eta * grad.db,
        };
        if !within_limit(next.w) || !within_limit(next.b) {
            return Err(Error::TrainingDiverged {
                epoch: epoch + 1,
                w: next.w,
                b: next.b,
            });
        }
        params = next;
    }

    ParamTrace::with_debug(cfg.eta, data.len(), entries, debug)
}

fn within_limit(v: f64) -> bool {
    v.is_finite() && v.abs() <= DIVERGENCE_LIMIT
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(n: usize) -> Dataset {
        let xs = [0.6, 0.2, 0.1, 0.9];
        let ys = [0.5, 0.4, 0.3, 0.6];
        Dataset::new(xs[..n].to_vec(), ys[..n].to_vec()).unwrap()
    }

    fn reference_cfg() -> TrainConfig {
        TrainConfig::new(0.1, 5, Params { w: 0.5, b: 0.5 }).unwrap()
    }

    fn three(v: f64) -> String {
        format!("{v:.3}")
    }

    fn mse_at(w: f64, b: f64, data: &Dataset) -> f64 {
        let yhat: Vec<f64> = data.xs().iter().map(|x| (w * x + b).tanh()).collect();
        mse(&yhat, data.ys()).unwrap()
    }

    #[test]
    fn forward_matches_table_rows() {
        let p = Params { w: 0.5, b: 0.5 };
        let out = forward(p, &[0.6]).unwrap();
        assert_eq!(three(out[0]), "0.664");
        let out = forward(p, table(4).xs()).unwrap();
        let rendered: Vec<_> = out.iter().map(|&v| three(v)).collect();
        assert_eq!(rendered, ["0.664", "0.537", "0.501", "0.740"]);
    }

    #[test]
    fn forward_at_zero_params_is_zero() {
        let out = forward(Params { w: 0.0, b: 0.0 }, &[0.3, -2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_empty_input() {
        assert!(matches!(
            forward(Params { w: 1.0, b: 0.0 }, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mse_cases() {
        let yhat = forward(Params { w: 0.5, b: 0.5 }, &[0.6]).unwrap();
        assert_eq!(three(mse(&yhat, &[0.5]).unwrap()), "0.027");
        assert_eq!(mse(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(
            mse(&[1.0], &[0.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gradients_match_table1_deltas() {
        // (w⁽⁰⁾ − w⁽¹⁾)/η and (b⁽⁰⁾ − b⁽¹⁾)/η from a float64 rerun of the reference loop.
        let g = gradients(Params { w: 0.5, b: 0.5 }, &table(1));
        assert!((g.dw - (0.5 - 0.48899532750603825) / 0.1).abs() < 1e-15);
        assert!((g.db - (0.5 - 0.48165887917673045) / 0.1).abs() < 1e-15);
        assert_eq!(three(g.dw), "0.110");
        assert_eq!(three(g.db), "0.183");
    }

    #[test]
    fn gradients_match_table2_deltas() {
        let g = gradients(Params { w: 0.5, b: 0.5 }, &table(2));
        assert!((g.dw - (0.5 - 0.49254723526805894) / 0.1).abs() < 1e-15);
        assert!((g.db - (0.5 - 0.48107729716356423) / 0.1).abs() < 1e-15);
    }

    #[test]
    fn gradients_vanish_on_perfect_fit() {
        let p = Params { w: 0.7, b: -0.2 };
        let xs = vec![0.1, 0.5, 0.9];
        let ys = forward(p, &xs).unwrap();
        let g = gradients(p, &Dataset::new(xs, ys).unwrap());
        assert_eq!((g.dw, g.db), (0.0, 0.0));
    }

    #[test]
    fn train_reproduces_table1_and_table3() {
        let trace = train(&table(1), &reference_cfg()).unwrap();
        let ws: Vec<_> = trace.entries().iter().map(|p| three(p.w)).collect();
        let bs: Vec<_> = trace.entries().iter().map(|p| three(p.b)).collect();
        assert_eq!(ws, ["0.500", "0.489", "0.479", "0.469", "0.460"]);
        assert_eq!(bs, ["0.500", "0.482", "0.464", "0.448", "0.433"]);
        assert_eq!(trace.eta(), 0.1);
        assert_eq!(trace.n(), 1);

        let trace = train(&table(3), &reference_cfg()).unwrap();
        let ws: Vec<_> = trace.entries().iter().map(|p| three(p.w)).collect();
        assert_eq!(ws, ["0.500", "0.494", "0.488", "0.483", "0.479"]);
    }

    #[test]
    fn train_matches_full_precision_reference() {
        let trace = train(&table(4), &reference_cfg()).unwrap();
        let expected_w = [
            0.5,
            0.4926744659206275,
            0.4857833678237926,
            0.4793559435455208,
            0.4734111144927551,
        ];
        let expected_b = [
            0.5,
            0.4798602226215474,
            0.46103844854593784,
            0.4435831980760279,
            0.42751587909260025,
        ];
        for (p, (w, b)) in trace
            .entries()
            .iter()
            .zip(expected_w.iter().zip(&expected_b))
        {
            assert!((p.w - w).abs() < 1e-15, "{} vs {}", p.w, w);
            assert!((p.b - b).abs() < 1e-15, "{} vs {}", p.b, b);
        }
    }

    #[test]
    fn zero_learning_rate_is_rejected() {
        assert!(TrainConfig::new(0.0, 5, Params { w: 0.5, b: 0.5 }).is_err());
        assert!(TrainConfig::new(-0.1, 5, Params { w: 0.5, b: 0.5 }).is_err());
        assert!(TrainConfig::new(0.1, 0, Params { w: 0.5, b: 0.5 }).is_err());
    }

    #[test]
    fn vanishing_learning_rate_keeps_init() {
        let cfg = TrainConfig::new(1e-300, 4, Params { w: 0.5, b: 0.5 }).unwrap();
        let trace = train(&table(2), &cfg).unwrap();
        assert!(trace.entries().iter().all(|p| *p == cfg.init));
    }

    #[test]
    fn single_epoch_trace_holds_init() {
        let cfg = TrainConfig::new(0.1, 1, Params { w: 0.3, b: 0.9 }).unwrap();
        let trace = train(&table(2), &cfg).unwrap();
        assert_eq!(trace.entries(), &[Params { w: 0.3, b: 0.9 }]);
    }

    #[test]
    fn divergence_names_epoch() {
        let data = Dataset::new(vec![1e5], vec![-1e5]).unwrap();
        let cfg = TrainConfig::new(10.0, 10, Params { w: 0.0, b: 0.0 }).unwrap();
        match train(&data, &cfg) {
            Err(Error::TrainingDiverged { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn descent_on_reference_datasets_with_small_step() {
        for n in 1..=4 {
            let cfg = TrainConfig::new(0.01, 50, Params { w: 0.5, b: 0.5 }).unwrap();
            let trace = train(&table(n), &cfg).unwrap();
            let losses: Vec<f64> = trace.debug().unwrap().iter().map(|d| d.loss).collect();
            assert!(losses.windows(2).all(|w| w[1] <= w[0]), "n={n}: {losses:?}");
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![0.1], vec![0.1, 0.2]).is_err());
        assert!(Dataset::new(vec![f64::NAN], vec![0.1]).is_err());
        let d = table(3);
        assert_eq!(d.permuted(&[2, 0, 1]).unwrap().xs(), &[0.1, 0.6, 0.2]);
        assert!(d.permuted(&[0, 0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn gradients_agree_with_central_differences(
            w in -2.0f64..2.0,
            b in -2.0f64..2.0,
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..=8),
        ) {
            let data = Dataset::from_pairs(&pairs).unwrap();
            let g = gradients(Params { w, b }, &data);
            let h = 1e-6;
            let fd_w = (mse_at(w + h, b, &data) - mse_at(w - h, b, &data)) / (2.0 * h);
            let fd_b = (mse_at(w, b + h, &data) - mse_at(w, b - h, &data)) / (2.0 * h);
            // Relative error with an absolute floor near stationary points.
            prop_assert!((g.dw - fd_w).abs() <= 1e-6 * g.dw.abs().max(1e-3));
            prop_assert!((g.db - fd_b).abs() <= 1e-6 * g.db.abs().max(1e-3));
        }

        #[test]
        fn forward_stays_inside_open_interval(
            w in -5.0f64..5.0,
            b in -5.0f64..5.0,
            xs in proptest::collection::vec(-2.0f64..2.0, 1..16),
        ) {
            for v in forward(Params { w, b }, &xs).unwrap() {
                prop_assert!(v > -1.0 && v < 1.0);
            }
        }
    }
}
