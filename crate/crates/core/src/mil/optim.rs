use super::Params;

/// Cosine decay from `lr0` at `t = 0` over `total` epochs, floored at `lr_min`.
pub fn cosine_lr(lr0: f64, lr_min: f64, t: usize, total: usize) -> f64 {
    let frac = t as f64 / total.max(1) as f64;
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(lr_min)
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamW {
    pub fn new(k: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, step: 0, m: Params::zeros(k), v: Params::zeros(k) }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::mil::MilModel;

    #[test]
    fn schedule_starts_at_lr0_and_never_increases() {
        assert_eq!(cosine_lr(2e-4, 1e-6, 0, 50), 2e-4);
        let lrs: Vec<f64> = (0..50).map(|t| cosine_lr(2e-4, 1e-6, t, 50)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| l >= 1e-6));
        assert_eq!(cosine_lr(2e-4, 1e-6, 50, 50), 1e-6);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut rng = stream(1, 0);
        let mut p = MilModel::init(3, &mut rng).params;
        let before = p.clone();
        let mut opt = AdamW::new(3, 0.9, 0.999, 1e-8, 0.0);
        opt.update(&mut p, &Params::zeros(3), 1e-3);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut rng = stream(2, 0);
        let mut p = MilModel::init(2, &mut rng).params;
        let before = p.clone();
        let mut g = Params::zeros(2);
        g.w_enc[[0, 0]] = 3.0;
        g.b_cls = -0.25;
        let mut opt = AdamW::new(2, 0.9, 0.999, 1e-8, 0.0);
        opt.update(&mut p, &g, 1e-3);
        assert!((before.w_enc[[0, 0]] - p.w_enc[[0, 0]] - 1e-3).abs() < 1e-10);
        assert!((p.b_cls - before.b_cls - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn decay_alone_scales_parameters() {
        let mut rng = stream(3, 0);
        let mut p = MilModel::init(2, &mut rng).params;
        let before = p.clone();
        let mut opt = AdamW::new(2, 0.9, 0.999, 1e-8, 5e-4);
        let lr = 2e-4;
        opt.update(&mut p, &Params::zeros(2), lr);
        for (a, b) in p.slices().iter().zip(before.slices()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y * (1.0 - lr * 5e-4)).abs() <= 1e-15 * y.abs());
            }
        }
    }
}
