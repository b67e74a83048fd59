//! Adam over a flat list of parameter tensors. The caller owns the parameter
//! ordering; checkpointing serializes `(m, v, t)` in that same order.

use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `grads[i] = None` means zero gradient this step; moments
    /// still decay so resumed runs stay step-for-step identical.
    pub fn step(&mut self, params: &mut [ArrayD<f64>], grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state count");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let zero;
            let g = match &grads[i] {
                Some(g) => {
                    assert_eq!(g.shape(), params[i].shape(), "grad {i} shape");
                    g
                }
                None => {
                    zero = ArrayD::zeros(params[i].raw_dim());
                    &zero
                }
            };
            ndarray::Zip::from(&mut self.m[i])
                .and(g)
                .for_each(|m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            ndarray::Zip::from(&mut self.v[i])
                .and(g)
                .for_each(|v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut params[i])
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn matches_reference_formulas_for_two_steps() {
        // Oracle: the textbook update computed by hand, scalar parameter,
        // f(x) = x^2 / 2 so grad = x.
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        let mut p = vec![ArrayD::from_elem(IxDyn(&[1]), 1.0)];

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=2u32 {
            let g = x;
            let gs = vec![Some(ArrayD::from_elem(IxDyn(&[1]), p[0][[0]]))];
            opt.step(&mut p, &gs);

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32));
            let vhat = v / (1.0 - 0.999f64.powi(t as i32));
            x -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            assert!((p[0][[0]] - x).abs() < 1e-15, "step {t}: {} vs {x}", p[0][[0]]);
        }
    }

    #[test]
    fn zero_beta1_is_signed_rmsprop_like_step() {
        // beta1 = 0 drops momentum entirely: mhat = g.
        let mut opt = Adam::new(0.01, 0.0, 0.99);
        let mut p = vec![ArrayD::from_elem(IxDyn(&[1]), 3.0)];
        let g = vec![Some(ArrayD::from_elem(IxDyn(&[1]), 2.0))];
        opt.step(&mut p, &g);
        let vhat: f64 = (0.01 * 2.0 * 2.0) / (1.0 - 0.99);
        let expect = 3.0 - 0.01 * 2.0 / (vhat.sqrt() + 1e-8);
        assert!((p[0][[0]] - expect).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = Adam::new(0.05, 0.9, 0.999);
        let mut p = vec![ArrayD::from_elem(IxDyn(&[2]), 4.0)];
        for _ in 0..2000 {
            let g = p[0].mapv(|x| x); // f = |x|^2/2
            opt.step(&mut p, &[Some(g)]);
        }
        assert!(p[0].iter().all(|x| x.abs() < 1e-3), "{:?}", p[0]);
    }

    #[test]
    fn missing_grads_still_advance_time() {
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        let mut p = vec![ArrayD::from_elem(IxDyn(&[1]), 1.0)];
        opt.step(&mut p, &[None]);
        assert_eq!(opt.t, 1);
        assert_eq!(p[0][[0]], 1.0); // zero grad, zero moments: no movement
    }
}
