//! Adam with a cosine learning-rate schedule, shared by the trainers.

pub(crate) struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub(crate) fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every parameter group; `grads[i]` matches `params[i]`.
    pub(crate) fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (g, ((p, m), v)) in grads.iter().zip(params.iter_mut().zip(&mut self.m).zip(&mut self.v)) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `base` down to `base / 100` over `total` steps.
pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let floor = base * 0.01;
    if total <= 1 {
        return base;
    }
    let progress = step as f64 / (total - 1) as f64;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(&[2]);
        for s in 0..2000 {
            let g = vec![2.0 * (x[0] - 1.0), 8.0 * (x[1] + 0.5)];
            adam.step(cosine_lr(0.05, s, 2000), &mut [&mut x], &[&g]);
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 9, 10) - 0.01).abs() < 1e-12);
    }
}
