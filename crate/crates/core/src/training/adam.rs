use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Adaptive-moment optimizer keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update rounds.
    pub steps: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates `param` in place for the current round.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        let t = (self.steps + 1) as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.lr;
        let eps = self.eps;
        for (((p, g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }

    /// Ends an update round.
    pub fn tick(&mut self) {
        self.steps += 1;
    }

    /// Moment buffers as named arrays under `prefix`.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}.steps"),
            Tensor::vector(vec![self.steps as f64]),
        )];
        for (name, (m, v)) in &self.moments {
            out.push((format!("{prefix}.m.{name}"), m.clone()));
            out.push((format!("{prefix}.v.{name}"), v.clone()));
        }
        out
    }

    /// Restores buffers written by [`Adam::export`].
    pub fn import(&mut self, prefix: &str, arrays: &[(String, Tensor)]) {
        self.moments.clear();
        let (pm, pv, ps) = (
            format!("{prefix}.m."),
            format!("{prefix}.v."),
            format!("{prefix}.steps"),
        );
        for (name, t) in arrays {
            if *name == ps {
                self.steps = t.item() as u64;
            } else if let Some(key) = name.strip_prefix(&pm) {
                let e = self
                    .moments
                    .entry(key.to_string())
                    .or_insert_with(|| (t.clone(), t.clone()));
                e.0 = t.clone();
            } else if let Some(key) = name.strip_prefix(&pv) {
                let e = self
                    .moments
                    .entry(key.to_string())
                    .or_insert_with(|| (t.clone(), t.clone()));
                e.1 = t.clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut a = Adam::new(0.1, 0.5, 0.9);
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        a.step("p", &mut p, &Tensor::vector(vec![3.0, -0.5]));
        a.tick();
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] + 1.9).abs() < 1e-8);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(0.05, 0.9, 0.999);
        let mut p = Tensor::vector(vec![3.0, -4.0]);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            a.step("p", &mut p, &g);
            a.tick();
        }
        assert!(p.max_abs() < 1e-3);
    }

    #[test]
    fn export_import_round_trip() {
        let mut a = Adam::new(0.1, 0.5, 0.9);
        let mut p = Tensor::vector(vec![1.0]);
        a.step("w", &mut p, &Tensor::vector(vec![0.3]));
        a.tick();
        let mut b = Adam::new(0.1, 0.5, 0.9);
        b.import("opt", &a.export("opt"));
        assert_eq!(a, b);
    }
}
