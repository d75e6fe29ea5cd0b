use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;

use crate::encoder::{gelu, gelu_derivative, ADAPTER_DIM};
use crate::rng::Rng;
use crate::store::StoreError;

/// Width of the attention hidden layer.
pub const ATTENTION_DIM: usize = 64;

/// Checkpoint names, in storage order.
pub const PARAM_NAMES: [&str; 7] = ["W_enc", "b_enc", "V", "U", "W", "W_cls", "b_cls"];

#[derive(Debug, thiserror::Error)]
pub enum MilError {
    #[error("bag has {actual} features per instance, model expects {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("empty bag {0:?}")]
    EmptyBag(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid training setup: {0}")]
    InvalidConfig(String),
    #[error("training cohort has a single class")]
    SingleClass,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

type Result<T> = std::result::Result<T, MilError>;

/// Every trainable tensor. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `256 x K`
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// `64 x 256`
    pub v: Array2<f64>,
    /// `64 x 256`
    pub u: Array2<f64>,
    pub w: Array1<f64>,
    pub w_cls: Array1<f64>,
    pub b_cls: f64,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros(k: usize) -> Self {
        Self {
            w_enc: Array2::zeros((ADAPTER_DIM, k)),
            b_enc: Array1::zeros(ADAPTER_DIM),
            v: Array2::zeros((ATTENTION_DIM, ADAPTER_DIM)),
            u: Array2::zeros((ATTENTION_DIM, ADAPTER_DIM)),
            w: Array1::zeros(ATTENTION_DIM),
            w_cls: Array1::zeros(ADAPTER_DIM),
            b_cls: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn shapes(&self) -> [Vec<usize>; 7] {
        let k = self.input_dim();
        [
            vec![ADAPTER_DIM, k],
            vec![ADAPTER_DIM],
            vec![ATTENTION_DIM, ADAPTER_DIM],
            vec![ATTENTION_DIM, ADAPTER_DIM],
            vec![1, ATTENTION_DIM],
            vec![1, ADAPTER_DIM],
            vec![1],
        ]
    }

    pub fn slices(&self) -> [&[f64]; 7] {
        [
            self.w_enc.as_slice().expect("standard layout"),
            self.b_enc.as_slice().expect("standard layout"),
            self.v.as_slice().expect("standard layout"),
            self.u.as_slice().expect("standard layout"),
            self.w.as_slice().expect("standard layout"),
            self.w_cls.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.b_cls),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w_enc.as_slice_mut().expect("standard layout"),
            self.b_enc.as_slice_mut().expect("standard layout"),
            self.v.as_slice_mut().expect("standard layout"),
            self.u.as_slice_mut().expect("standard layout"),
            self.w.as_slice_mut().expect("standard layout"),
            self.w_cls.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.b_cls),
        ]
    }

    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Activation choice. `Linear` replaces GeLU, tanh and the sigmoid gate by
/// the identity; it exists for attribution checks on an affine network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Nonlinearity {
    #[default]
    Gated,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub params: Params,
    pub nonlinearity: Nonlinearity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub p: f64,
    pub logit: f64,
    pub attention: Vec<f64>,
}

/// Inverted-dropout multipliers (0 or `1/(1-rate)`), one per unit.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub z: Array2<f64>,
    pub g: Option<Array2<f64>>,
}

impl DropoutMasks {
    pub fn sample(j: usize, rate: f64, attention: bool, rng: &mut Rng) -> Self {
        let keep = 1.0 - rate;
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        };
        let z = draw(j, ADAPTER_DIM);
        let g = attention.then(|| draw(j, ATTENTION_DIM));
        Self { z, g }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre: Array2<f64>,
    pub z: Array2<f64>,
    pub t: Array2<f64>,
    pub s: Array2<f64>,
    pub g: Array2<f64>,
    pub attention: Array1<f64>,
    pub z_volume: Array1<f64>,
    pub logit: f64,
    pub p: f64,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy from a logit, `softplus(l) - y l`.
pub fn bce_with_logit(logit: f64, y: f64) -> f64 {
    logit.max(0.0) + (-logit.abs()).exp().ln_1p() - y * logit
}

fn softmax(scores: ArrayView1<f64>) -> Array1<f64> {
    let m = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = scores.mapv(|s| (s - m).exp());
    let total = e.sum();
    e / total
}

/// Gated attention weights over the rows of `z`.
pub fn attention_scores(
    z: ArrayView2<f64>,
    v: ArrayView2<f64>,
    u: ArrayView2<f64>,
    w: ArrayView1<f64>,
) -> std::result::Result<Array1<f64>, MilError> {
    let g = z.dot(&v.t()).mapv(f64::tanh) * z.dot(&u.t()).mapv(sigmoid);
    let scores = g.dot(&w);
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MilError::NonFinite("attention logits"));
    }
    Ok(softmax(scores.view()))
}

impl MilModel {
    /// Uniform initialization in `±1/sqrt(fan_in)` for every tensor.
    pub fn init(k: usize, rng: &mut Rng) -> Self {
        let mut params = Params::zeros(k);
        let fan_in = [k, k, ADAPTER_DIM, ADAPTER_DIM, ATTENTION_DIM, ADAPTER_DIM, ADAPTER_DIM];
        for (slot, fan) in params.slices_mut().into_iter().zip(fan_in) {
            let bound = 1.0 / (fan as f64).sqrt();
            for x in slot.iter_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        Self { params, nonlinearity: Nonlinearity::Gated }
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    fn act(&self, x: f64) -> f64 {
        match self.nonlinearity {
            Nonlinearity::Gated => gelu(x),
            Nonlinearity::Linear => x,
        }
    }

    pub fn forward(&self, h: ArrayView2<f64>, masks: Option<&DropoutMasks>) -> Result<ForwardCache> {
        if h.ncols() != self.input_dim() {
            return Err(MilError::DimMismatch { expected: self.input_dim(), actual: h.ncols() });
        }
        if h.nrows() == 0 {
            return Err(MilError::EmptyBag(String::new()));
        }
        let p = &self.params;
        let pre = h.dot(&p.w_enc.t()) + &p.b_enc;
        let mut z = pre.mapv(|x| self.act(x));
        if let Some(m) = masks {
            z *= &m.z;
        }
        let a = z.dot(&p.v.t());
        let b = z.dot(&p.u.t());
        let (t, s) = match self.nonlinearity {
            Nonlinearity::Gated => (a.mapv(f64::tanh), b.mapv(sigmoid)),
            Nonlinearity::Linear => (a, b),
        };
        let mut g = &t * &s;
        if let Some(mg) = masks.and_then(|m| m.g.as_ref()) {
            g *= mg;
        }
        let scores = g.dot(&p.w);
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(MilError::NonFinite("attention logits"));
        }
        let attention = softmax(scores.view());
        let z_volume = z.t().dot(&attention);
        let logit = p.w_cls.dot(&z_volume) + p.b_cls;
        if !logit.is_finite() {
            return Err(MilError::NonFinite("logit"));
        }
        Ok(ForwardCache { pre, z, t, s, g, attention, z_volume, logit, p: sigmoid(logit) })
    }

    /// Backpropagate `d(objective)/d(logit)` through the network. Returns
    /// parameter gradients and, when asked, the gradient with respect to `H`.
    pub fn backward(
        &self,
        h: ArrayView2<f64>,
        c: &ForwardCache,
        masks: Option<&DropoutMasks>,
        dlogit: f64,
        want_dh: bool,
    ) -> (Gradients, Option<Array2<f64>>) {
        let p = &self.params;
        let w_cls = &p.w_cls * dlogit;
        let dz_volume = w_cls.view();
        // z_volume = sum_j a_j z_j
        let mut dz = outer(c.attention.view(), dz_volume);
        let da = c.z.dot(&dz_volume);
        let weighted = c.attention.dot(&da);
        let ds = &c.attention * &(da - weighted);
        let dw = c.g.t().dot(&ds);
        let mut dg = outer(ds.view(), p.w.view());
        if let Some(mg) = masks.and_then(|m| m.g.as_ref()) {
            dg *= mg;
        }
        let (da_pre, db_pre) = match self.nonlinearity {
            Nonlinearity::Gated => {
                let da_pre = &dg * &c.s * &c.t.mapv(|t| 1.0 - t * t);
                let db_pre = &dg * &c.t * &c.s.mapv(|s| s * (1.0 - s));
                (da_pre, db_pre)
            }
            Nonlinearity::Linear => (&dg * &c.s, &dg * &c.t),
        };
        let dv = da_pre.t().dot(&c.z);
        let du = db_pre.t().dot(&c.z);
        dz += &da_pre.dot(&p.v);
        dz += &db_pre.dot(&p.u);
        if let Some(m) = masks {
            dz *= &m.z;
        }
        let dpre = match self.nonlinearity {
            Nonlinearity::Gated => dz * &c.pre.mapv(gelu_derivative),
            Nonlinearity::Linear => dz,
        };
        let dw_enc = dpre.t().dot(&h);
        let db_enc = dpre.sum_axis(Axis(0));
        let dh = want_dh.then(|| dpre.dot(&p.w_enc));
        let grads = Params {
            w_enc: dw_enc,
            b_enc: db_enc,
            v: dv,
            u: du,
            w: dw,
            w_cls: &c.z_volume * dlogit,
            b_cls: dlogit,
        };
        (grads, dh)
    }

    /// BCE loss of one bag and its gradients.
    pub fn loss_and_gradients(
        &self,
        h: ArrayView2<f64>,
        label: f64,
        masks: Option<&DropoutMasks>,
    ) -> Result<(f64, Gradients)> {
        let c = self.forward(h, masks)?;
        let loss = bce_with_logit(c.logit, label);
        let (g, _) = self.backward(h, &c, masks, c.p - label, false);
        Ok((loss, g))
    }

    /// Mean BCE over a batch and the averaged gradients.
    pub fn batch_loss_and_gradients(&self, bags: &[ArrayView2<f64>], labels: &[f64]) -> Result<(f64, Gradients)> {
        let mut total = Params::zeros(self.input_dim());
        let mut loss = 0.0;
        for (h, &y) in bags.iter().zip(labels) {
            let (l, g) = self.loss_and_gradients(*h, y, None)?;
            loss += l;
            total.add_scaled(&g, 1.0);
        }
        let n = bags.len().max(1) as f64;
        total.scale(1.0 / n);
        Ok((loss / n, total))
    }

    /// Evaluation-mode forward pass.
    pub fn predict_matrix(&self, sample_id: &str, h: ArrayView2<f64>) -> Result<Prediction> {
        let c = self.forward(h, None).map_err(|e| match e {
            MilError::EmptyBag(_) => MilError::EmptyBag(sample_id.to_string()),
            e => e,
        })?;
        Ok(Prediction { sample_id: sample_id.to_string(), p: c.p, logit: c.logit, attention: c.attention.to_vec() })
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let col = a.insert_axis(Axis(1));
    let row = b.insert_axis(Axis(0));
    col.dot(&row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    fn random_bag(j: usize, k: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((j, k), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn singleton_and_symmetric_attention() {
        let mut rng = stream(1, 0);
        let m = MilModel::init(4, &mut rng);
        let h = random_bag(1, 4, &mut rng);
        assert_eq!(m.forward(h.view(), None).unwrap().attention.to_vec(), vec![1.0]);
        let row = random_bag(1, 4, &mut rng);
        let two = ndarray::concatenate(Axis(0), &[row.view(), row.view()]).unwrap();
        let a = m.forward(two.view(), None).unwrap().attention;
        assert_eq!(a.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn zero_gates_give_uniform_attention() {
        let mut rng = stream(2, 0);
        let mut m = MilModel::init(3, &mut rng);
        m.params.v.fill(0.0);
        m.params.u.fill(0.0);
        let a = m.forward(random_bag(7, 3, &mut rng).view(), None).unwrap().attention;
        for x in a {
            assert!((x - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut rng = stream(3, 0);
        let mut m = MilModel::init(3, &mut rng);
        m.params.w_cls.fill(0.0);
        m.params.b_cls = 0.0;
        let c = m.forward(random_bag(5, 3, &mut rng).view(), None).unwrap();
        assert_eq!(c.p, 0.5);
        assert!((bce_with_logit(c.logit, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let (g, _) = m.backward(random_bag(5, 3, &mut rng).view(), &c, None, 0.0, false);
        assert_eq!(g.b_cls, 0.0);
    }

    #[test]
    fn duplicated_bag_same_probability() {
        let mut rng = stream(4, 0);
        let m = MilModel::init(6, &mut rng);
        let h = random_bag(5, 6, &mut rng);
        let hh = ndarray::concatenate(Axis(0), &[h.view(), h.view()]).unwrap();
        let a = m.forward(h.view(), None).unwrap().p;
        let b = m.forward(hh.view(), None).unwrap().p;
        assert!((a - b).abs() < 1e-12);
    }

    /// Straight-line scalar evaluation of the same network.
    fn reference_p(m: &Params, h: &Array2<f64>) -> f64 {
        let (j, k) = h.dim();
        let mut z = vec![vec![0.0; ADAPTER_DIM]; j];
        for r in 0..j {
            for i in 0..ADAPTER_DIM {
                let mut s = m.b_enc[i];
                for c in 0..k {
                    s += m.w_enc[[i, c]] * h[[r, c]];
                }
                let cdf = 0.5 * (1.0 + libm::erf(s / 2f64.sqrt()));
                z[r][i] = s * cdf;
            }
        }
        let mut logits = vec![0.0; j];
        for r in 0..j {
            for q in 0..ATTENTION_DIM {
                let (mut a, mut b) = (0.0, 0.0);
                for i in 0..ADAPTER_DIM {
                    a += m.v[[q, i]] * z[r][i];
                    b += m.u[[q, i]] * z[r][i];
                }
                logits[r] += m.w[q] * a.tanh() / (1.0 + (-b).exp());
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let tot: f64 = e.iter().sum();
        let mut out = m.b_cls;
        for i in 0..ADAPTER_DIM {
            let zi: f64 = (0..j).map(|r| e[r] / tot * z[r][i]).sum();
            out += m.w_cls[i] * zi;
        }
        1.0 / (1.0 + (-out).exp())
    }

    #[test]
    fn matches_straight_line_reference() {
        let mut rng = stream(5, 0);
        let mut m = MilModel::init(4, &mut rng);
        for s in m.params.slices_mut() {
            s.iter_mut().for_each(|x| *x *= 0.5);
        }
        let h = random_bag(3, 4, &mut rng);
        let p = m.forward(h.view(), None).unwrap().p;
        assert!((p - reference_p(&m.params, &h)).abs() < 1e-12);
    }

    #[test]
    fn stationary_when_prediction_matches_label() {
        let mut rng = stream(6, 0);
        let mut m = MilModel::init(2, &mut rng);
        m.params.w_cls.fill(0.0);
        m.params.b_cls = 50.0;
        let (_, g) = m.loss_and_gradients(array![[0.1, 0.2]].view(), 1.0, None).unwrap();
        assert!(g.b_cls.abs() < 1e-20);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        let mut rng = stream(7, 0);
        let m = MilModel::init(3, &mut rng);
        let h = random_bag(5, 3, &mut rng);
        let masks = DropoutMasks::sample(5, 0.5, true, &mut rng);
        let (_, g) = m.loss_and_gradients(h.view(), 1.0, Some(&masks)).unwrap();
        let delta = 1e-5;
        for (slot, name) in PARAM_NAMES.iter().enumerate() {
            let n = g.slices()[slot].len();
            for idx in (0..n).step_by((n / 12).max(1)) {
                let mut plus = m.clone();
                plus.params.slices_mut()[slot][idx] += delta;
                let mut minus = m.clone();
                minus.params.slices_mut()[slot][idx] -= delta;
                let lp = plus.loss_and_gradients(h.view(), 1.0, Some(&masks)).unwrap().0;
                let lm = minus.loss_and_gradients(h.view(), 1.0, Some(&masks)).unwrap().0;
                let fd = (lp - lm) / (2.0 * delta);
                let an = g.slices()[slot][idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{idx}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = stream(8, 0);
        let m = MilModel::init(4, &mut rng);
        let h = random_bag(3, 4, &mut rng);
        let c = m.forward(h.view(), None).unwrap();
        let (_, dh) = m.backward(h.view(), &c, None, c.p * (1.0 - c.p), true);
        let dh = dh.unwrap();
        for r in 0..3 {
            for k in 0..4 {
                let mut hp = h.clone();
                hp[[r, k]] += 1e-6;
                let mut hm = h.clone();
                hm[[r, k]] -= 1e-6;
                let fd = (m.forward(hp.view(), None).unwrap().p - m.forward(hm.view(), None).unwrap().p) / 2e-6;
                assert!((fd - dh[[r, k]]).abs() < 1e-8, "{fd} vs {}", dh[[r, k]]);
            }
        }
    }

    #[test]
    fn wrong_dim_rejected() {
        let mut rng = stream(9, 0);
        let m = MilModel::init(4, &mut rng);
        assert!(matches!(m.forward(random_bag(2, 3, &mut rng).view(), None), Err(MilError::DimMismatch { .. })));
    }
}
