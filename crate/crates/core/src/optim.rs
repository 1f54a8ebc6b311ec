use ndarray::Array2;

use crate::autodiff::Real;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Real> Adam<F> {
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

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Array2<F>>, grads: &[Array2<F>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let c1 = F::c(1.0 - self.beta1.powi(self.t));
        let c2 = F::c(1.0 - self.beta2.powi(self.t));
        let lr = F::c(self.lr);
        let eps = F::c(self.eps);
        let one = F::one();
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = array![[1.0f64, -2.0]];
        let g = array![[0.3, -4.0]];
        let mut opt = Adam::new(0.1, 0.5, 0.9);
        opt.step(vec![&mut p], &[g]);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = array![[5.0f64]];
        let mut opt = Adam::new(0.1, 0.5, 0.9);
        for _ in 0..500 {
            let g = p.mapv(|x| 2.0 * (x - 1.0));
            opt.step(vec![&mut p], &[g]);
        }
        assert!((p[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
