use ndarray::{Array2, Array3};
use proptest::prelude::*;

use ngem::checkpoint;
use ngem::diffnet::DenseNet;
use ngem::harness::{LossKind, RunConfig};
use ngem::mixture::{self, CategoricalMode, MixtureParams};

const K: usize = 3;
const DY: usize = 2;
const B: usize = 4;

fn mixture_strategy() -> impl Strategy<Value = (MixtureParams, Array2<f64>)> {
    (
        prop::collection::vec(-3.0..3.0f64, B * K),
        prop::collection::vec(-2.0..2.0f64, B * K * DY),
        prop::collection::vec(0.2..2.0f64, B * K * DY),
        prop::collection::vec(-3.0..3.0f64, B * DY),
    )
        .prop_map(|(l, m, s, y)| {
            let params = MixtureParams::new(
                Array2::from_shape_vec((B, K), l).unwrap(),
                Array3::from_shape_vec((B, K, DY), m).unwrap(),
                Array3::from_shape_vec((B, K, DY), s).unwrap(),
            )
            .unwrap();
            (params, Array2::from_shape_vec((B, DY), y).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn logit_shift_leaves_the_mixture_unchanged((p, y) in mixture_strategy(), c in -50.0..50.0f64) {
        let shifted = MixtureParams::new(p.logits() + c, p.means().clone(), p.scales().clone()).unwrap();
        let a = mixture::nll_loss(&p, y.view()).unwrap();
        let b = mixture::nll_loss(&shifted, y.view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn responsibilities_are_distributions((p, y) in mixture_strategy()) {
        let rho = mixture::responsibilities(&p, y.view()).unwrap();
        for row in rho.view().rows() {
            prop_assert!(row.iter().all(|&r| (0.0..=1.0).contains(&r)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sgem_minus_nll_is_the_responsibility_entropy((p, y) in mixture_strategy()) {
        let rho = mixture::responsibilities(&p, y.view()).unwrap();
        let gap = mixture::sgem_loss(&p, &rho, y.view()).unwrap() - mixture::nll_loss(&p, y.view()).unwrap();
        let h: f64 = rho.view().iter().filter(|&&r| r > 0.0).map(|&r| -r * r.ln()).sum::<f64>() / B as f64;
        prop_assert!(gap >= -1e-12);
        prop_assert!((gap - h).abs() < 1e-10);
    }

    #[test]
    fn nll_and_sgem_gradients_agree((p, y) in mixture_strategy()) {
        let rho = mixture::responsibilities(&p, y.view()).unwrap();
        let a = mixture::nll_gradients(&p, y.view()).unwrap();
        let b = mixture::sgem_gradients(&p, &rho, y.view()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn natural_gradient_stays_finite((p, y) in mixture_strategy()) {
        let rho = mixture::responsibilities(&p, y.view()).unwrap();
        for mode in [CategoricalMode::Reference, CategoricalMode::Analytic] {
            let g = mixture::natural_gradient(&p, &rho, y.view(), mode).unwrap();
            prop_assert!(g.is_finite());
        }
    }

    #[test]
    fn backward_is_linear_in_the_upstream_gradient(
        seed in 0u64..1000,
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let net = DenseNet::init(&[2, 5], K, DY, seed).unwrap();
        let width = net.head().width();
        let x = Array2::from_shape_fn((B, 2), |(i, j)| (i as f64 - 1.5) * 0.7 + j as f64 * 0.3);
        let (_, trace) = net.forward(x.view()).unwrap();
        let u = Array2::from_shape_fn((B, width), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let v = Array2::from_shape_fn((B, width), |(i, j)| ((i + 2 * j) % 3) as f64 * 0.5);
        let gu = net.backward(&trace, u.view()).unwrap();
        let gv = net.backward(&trace, v.view()).unwrap();
        let combined = &u * a + &v * b;
        let g = net.backward(&trace, combined.view()).unwrap();
        for i in 0..g.len() {
            let expect = a * gu[i] + b * gv[i];
            prop_assert!((g[i] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..6, 0..3)) {
        let mut sizes = vec![3];
        sizes.extend(hidden);
        let net = DenseNet::init(&sizes, 2, 1, seed).unwrap();
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&net)).unwrap();
        prop_assert_eq!(back.params(), net.params());
        prop_assert_eq!(back.layer_sizes(), net.layer_sizes());
        prop_assert_eq!(back.activations(), net.activations());
        prop_assert_eq!(back.head(), net.head());
    }

    #[test]
    fn configs_round_trip(seed in any::<u64>(), lr in 1e-6..1.0f64, ngem in any::<bool>()) {
        let loss = if ngem { LossKind::Ngem } else { LossKind::Nll };
        let config = RunConfig::two_sinusoids(loss, lr, seed);
        let back = RunConfig::parse(&config.to_text()).unwrap();
        prop_assert_eq!(back, config);
    }
}
