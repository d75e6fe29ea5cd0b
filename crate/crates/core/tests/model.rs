//! Network gradients, bag-order invariance and attribution properties.

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;
use volmil::interpret::{integrated_gradients, normalize_ig, IgTarget};
use volmil::mil::{bce_with_logit, DropoutMasks, MilModel, Nonlinearity, PARAM_NAMES};
use volmil::rng::stream;

const DELTA: f64 = 1e-5;
const MAX_REL: f64 = 1e-4;
/// Gradients below `FLOOR * max(loss, 1)` are compared absolutely against it;
/// difference roundoff grows with the loss value.
const FLOOR: f64 = 1e-6;

fn random_bag(j: usize, k: usize, rng: &mut volmil::rng::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((j, k), || rng.random_range(-2.0..2.0))
}

fn loss(m: &MilModel, h: &Array2<f64>, y: f64, masks: Option<&DropoutMasks>) -> f64 {
    bce_with_logit(m.forward(h.view(), masks).unwrap().logit, y)
}

/// Worst relative error between the analytic gradient and central
/// differences, over `entries(tensor, len)` of every parameter tensor.
fn worst_gradient_error(
    seed: u64,
    mut entries: impl FnMut(usize, usize, &mut volmil::rng::Rng) -> Vec<usize>,
) -> (f64, &'static str) {
    let mut rng = stream(seed, 7);
    let k = rng.random_range(2..=5);
    let j = rng.random_range(1..=6);
    let mut model = MilModel::init(k, &mut rng);
    // move away from the near-zero init so every branch carries signal
    for s in model.params.slices_mut() {
        for v in s.iter_mut() {
            *v *= 3.0;
        }
    }
    let h = random_bag(j, k, &mut rng);
    let y = rng.random_range(0..=1) as f64;
    let masks = (seed % 2 == 1).then(|| DropoutMasks::sample(j, 0.5, true, &mut rng));
    let (l, grads) = model.loss_and_gradients(h.view(), y, masks.as_ref()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let floor = FLOOR * l.max(1.0);
    let mut worst = (0.0, PARAM_NAMES[0]);
    for (t, name) in PARAM_NAMES.iter().enumerate() {
        let len = analytic[t].len();
        for i in entries(t, len, &mut rng) {
            let mut plus = model.clone();
            plus.params.slices_mut()[t][i] += DELTA;
            let mut minus = model.clone();
            minus.params.slices_mut()[t][i] -= DELTA;
            let fd = (loss(&plus, &h, y, masks.as_ref()) - loss(&minus, &h, y, masks.as_ref())) / (2.0 * DELTA);
            let a = analytic[t][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, name);
            }
        }
    }
    (worst.0, worst.1)
}

#[test]
fn gradients_match_central_differences_on_100_bags() {
    for seed in 0..100 {
        // every entry of the small tensors, 128 sampled entries of V and U
        let (err, name) = worst_gradient_error(seed, |_, len, rng| {
            if len > 4096 {
                (0..128).map(|_| rng.random_range(0..len)).collect()
            } else {
                (0..len).collect()
            }
        });
        assert!(err <= MAX_REL, "seed {seed}: {name} relative error {err:e}");
    }
}

#[test]
fn gradients_match_central_differences_exhaustively() {
    for seed in [1000, 1001] {
        let (err, name) = worst_gradient_error(seed, |_, len, _| (0..len).collect());
        assert!(err <= MAX_REL, "seed {seed}: {name} relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn prediction_ignores_instance_order(seed in any::<u64>(), j in 1usize..12) {
        let mut rng = stream(seed, 0);
        let model = MilModel::init(4, &mut rng);
        let h = random_bag(j, 4, &mut rng);
        let mut order: Vec<usize> = (0..j).collect();
        order.reverse();
        order.rotate_left(seed as usize % j);
        let permuted = h.select(ndarray::Axis(0), &order);
        let a = model.predict_matrix("s", h.view()).unwrap();
        let b = model.predict_matrix("s", permuted.view()).unwrap();
        prop_assert!((a.logit - b.logit).abs() <= 1e-12 * a.logit.abs().max(1.0));
        for (pos, &src) in order.iter().enumerate() {
            prop_assert!((b.attention[pos] - a.attention[src]).abs() < 1e-14);
        }
    }

    #[test]
    fn ig_is_exact_on_affine_harness(seed in any::<u64>(), j in 1usize..8, steps in 1usize..64) {
        let mut rng = stream(seed, 1);
        let mut model = MilModel::init(3, &mut rng);
        model.nonlinearity = Nonlinearity::Linear;
        model.params.v.fill(0.0);
        model.params.u.fill(0.0);
        let h = random_bag(j, 3, &mut rng);
        let r = integrated_gradients(&model, h.view(), steps, IgTarget::Logit).unwrap();
        prop_assert!(r.completeness_gap <= 1e-12, "gap {}", r.completeness_gap);
    }

    #[test]
    fn ig_normalization_is_idempotent(raw in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let once = normalize_ig(&raw);
        prop_assert_eq!(normalize_ig(&once), once.clone());
        for (r, n) in raw.iter().zip(&once) {
            prop_assert!((-1.0..=1.0).contains(n));
            prop_assert_eq!(r.signum() * (*r != 0.0) as i32 as f64, n.signum() * (*n != 0.0) as i32 as f64);
        }
    }
}

