use serde::{Deserialize, Serialize};

use super::{NnError, Params, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self::with_hyper(param_count, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(param_count: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "adam: {n} params, {} grads, {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let g = grads.values[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params.values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Reduce-on-plateau for a metric that should increase.
///
/// An epoch that does not strictly beat the best value so far increments a
/// wait counter; when it reaches `patience` the rate is multiplied by
/// `factor` and the counter restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: None,
            wait: 0,
        }
    }

    /// Feeds one epoch's metric and returns the rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(best) if metric <= best => {
                self.wait += 1;
                if self.wait >= self.patience {
                    self.lr *= self.factor;
                    self.wait = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Learning rate in effect after each epoch of `history`.
pub fn plateau_trace(history: &[f64], lr0: f64, factor: f64, patience: usize) -> Vec<f64> {
    let mut s = PlateauScheduler::new(lr0, factor, patience);
    history.iter().map(|&m| s.step(m)).collect()
}

/// Rate after the latest epoch of `history`, given the rate `lr` that was in
/// effect before it. Replays the rule over the whole history.
pub fn plateau_schedule(history: &[f64], lr: f64, factor: f64, patience: usize) -> f64 {
    let Some((last, earlier)) = history.split_last() else {
        return lr;
    };
    let mut s = PlateauScheduler::new(lr, factor, patience);
    for &m in earlier {
        s.step(m);
    }
    let before = s.lr;
    if s.step(*last) < before {
        lr * factor
    } else {
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Params {
            values: vec![0.3, -1.0, 2.5],
        };
        let before = p.clone();
        let g = Params { values: vec![0.0; 3] };
        let mut s = AdamState::new(3);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 10);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = Params { values: vec![1.0] };
            let mut s = AdamState::new(1);
            adam_step(&mut p, &Params { values: vec![g] }, &mut s, 1e-4).unwrap();
            // m_hat = g, v_hat = g^2 so the step is lr * g / (|g| + eps)
            let expected = 1.0 - 1e-4 * g / (g.abs() + 1e-8);
            assert!((p.values[0] - expected).abs() < 1e-15);
            assert!((1.0 - p.values[0] - 1e-4 * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_is_pure() {
        let p0 = Params { values: vec![0.5, 0.1] };
        let g = Params {
            values: vec![0.2, -0.4],
        };
        let run = || {
            let mut p = p0.clone();
            let mut s = AdamState::new(2);
            adam_step(&mut p, &g, &mut s, 0.01).unwrap();
            adam_step(&mut p, &g, &mut s, 0.01).unwrap();
            (p, s)
        };
        assert_eq!(run(), run());
        let mut p = p0.clone();
        assert!(adam_step(&mut p, &Params { values: vec![0.0] }, &mut AdamState::new(2), 0.1).is_err());
    }

    #[test]
    fn plateau_examples() {
        assert_eq!(plateau_trace(&[0.70, 0.72, 0.75], 1e-4, 0.5, 2), vec![1e-4; 3]);
        assert_eq!(plateau_trace(&[0.75, 0.74, 0.73], 1e-4, 0.5, 2), vec![1e-4, 1e-4, 5e-5]);
        assert_eq!(
            plateau_trace(&[0.75, 0.74, 0.73, 0.72, 0.71], 1e-4, 0.5, 2).last(),
            Some(&2.5e-5)
        );
        assert_eq!(plateau_schedule(&[0.75, 0.74, 0.73], 1e-4, 0.5, 2), 5e-5);
        assert_eq!(plateau_schedule(&[0.75, 0.74], 1e-4, 0.5, 2), 1e-4);
        assert_eq!(plateau_schedule(&[0.75, 0.74, 0.73, 0.72], 5e-5, 0.5, 2), 5e-5);
        assert_eq!(plateau_schedule(&[0.75, 0.74, 0.73, 0.72, 0.71], 5e-5, 0.5, 2), 2.5e-5);
    }

    #[test]
    fn reductions_are_exact_powers() {
        let history: Vec<f64> = (0..20).map(|i| 1.0 - i as f64 * 0.01).collect();
        let trace = plateau_trace(&history, 1e-4, 0.5, 2);
        let last = *trace.last().unwrap();
        let k = (0..).find(|&k| 1e-4 * 0.5f64.powi(k) == last).unwrap();
        assert_eq!(k, 9);
    }
}
