use gradleak::attack::{extract_from_model, score, EPS_ACTIVE, TOL_REL};
use gradleak::data::{gen_synthetic, DatasetKind};
use gradleak::defense::{clip, prune};
use gradleak::dlg::matching_loss;
use gradleak::experiment::{ArchKind, ArchSpec};
use gradleak::fl::{aggregate, local_gradients, UserNode};
use gradleak::init::{init_forwarding, init_random, init_trap_layer, trap_weights_row, GainMode, RandomScheme, TrapConfig};
use gradleak::nn::{self, Dense, Layer, Model, Task};
use gradleak::rng::{self, streams};
use gradleak::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| r.random::<f64>())
}

fn mlp(inp: usize, hidden: usize, classes: usize, seed: u64) -> Model {
    let mut m = Model::new(
        vec![inp],
        vec![Layer::Dense(Dense::new(inp, hidden)), Layer::Relu, Layer::Dense(Dense::new(hidden, classes))],
        Task::Multiclass,
    )
    .unwrap();
    init_random(&mut m, RandomScheme::Gaussian { sigma: 0.5 }, &mut rng::seeded(seed)).unwrap();
    m
}

fn labels(n: usize, classes: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed ^ 0xabc);
    Tensor::new(vec![n], (0..n).map(|_| r.random_range(0..classes) as f64).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn single_example_rows_are_bias_times_input(seed in 0u64..10_000, inp in 1usize..20, hidden in 1usize..12) {
        let m = mlp(inp, hidden, 3, seed);
        let x = uniform(&[1, inp], seed + 1);
        let g = nn::gradients(&m, &x, &labels(1, 3, seed)).unwrap();
        let (gw, gb) = g.dense(0).unwrap();
        for i in 0..hidden {
            for (j, &xj) in x.data().iter().enumerate() {
                prop_assert_eq!(gw.row(i)[j], gb.data()[i] * xj);
            }
        }
    }

    #[test]
    fn rows_dead_on_the_whole_batch_are_zero(seed in 0u64..10_000, batch in 1usize..6) {
        let (inp, hidden) = (6, 10);
        let mut m = mlp(inp, hidden, 3, seed);
        // negative biases kill some rows outright
        let mut r = rng::seeded(seed);
        m.dense_mut(0).unwrap().bias.data_mut().iter_mut().for_each(|b| *b = -r.random::<f64>() * 2.0);
        let x = uniform(&[batch, inp], seed + 7);
        let g = nn::gradients(&m, &x, &labels(batch, 3, seed)).unwrap();
        let d = m.dense(0).unwrap();
        let (gw, gb) = g.dense(0).unwrap();
        for i in 0..hidden {
            let dead = x.iter_rows().all(|xr| {
                d.weight.row(i).iter().zip(xr).map(|(w, v)| w * v).sum::<f64>() + d.bias.data()[i] < -1e-9
            });
            if dead {
                prop_assert_eq!(gb.data()[i], 0.0);
                prop_assert!(gw.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn trap_rows_balance(l in 2usize..300, s in 0.05f64..0.995, seed in 0u64..10_000) {
        let row = trap_weights_row(l, &TrapConfig::new(s, seed), &mut rng::seeded(seed)).unwrap();
        let neg: Vec<f64> = row.iter().copied().filter(|&v| v < 0.0).collect();
        let pos: Vec<f64> = row.iter().copied().filter(|&v| v > 0.0).collect();
        prop_assert_eq!(neg.len(), l / 2);
        prop_assert_eq!(pos.len(), l - l / 2);
        if l % 2 == 0 {
            let (sp, sn): (f64, f64) = (pos.iter().sum(), neg.iter().sum());
            prop_assert!((sp + s * sn).abs() <= 1e-9 * (1.0 + sn.abs()));
        }
    }

    #[test]
    fn conv_forwarding_delivers_the_input(seed in 0u64..10_000) {
        let kind = DatasetKind::Image { height: 6, width: 5, channels: 3 };
        let arch = ArchSpec { width: 1.0 / 32.0, ..ArchSpec::new(ArchKind::Cnn, 16) };
        let mut m = arch.build(&kind, 4).unwrap();
        init_random(&mut m, RandomScheme::XavierUniform, &mut rng::seeded(seed)).unwrap();
        let target = m.first_dense();
        let plan = init_forwarding(&mut m, target, GainMode::Unit, 0.5, &mut rng::seeded(seed + 1)).unwrap();
        let routes = plan.routes(&m).unwrap();
        let x = uniform(&[3, m.input_len()], seed + 2);
        let (_, trace) = nn::forward(&m, &x).unwrap();
        let at = trace.layer_input(target).unwrap();
        for b in 0..3 {
            let back = plan.unmap(&routes, at.row(b));
            for (u, v) in back.iter().zip(x.row(b)) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dense_forwarding_with_random_gains_delivers_the_input(seed in 0u64..10_000, inp in 2usize..12) {
        let mut m = Model::new(
            vec![inp],
            vec![
                Layer::Dense(Dense::new(inp, 3 * inp)),
                Layer::Relu,
                Layer::Dense(Dense::new(3 * inp, 2 * inp)),
                Layer::Relu,
                Layer::Dense(Dense::new(2 * inp, 8)),
                Layer::Relu,
                Layer::Dense(Dense::new(8, 2)),
            ],
            Task::Multiclass,
        )
        .unwrap();
        let plan = init_forwarding(&mut m, 4, GainMode::Random, 0.5, &mut rng::seeded(seed)).unwrap();
        let routes = plan.routes(&m).unwrap();
        let x = uniform(&[4, inp], seed);
        let (_, trace) = nn::forward(&m, &x).unwrap();
        let at = trace.layer_input(4).unwrap();
        for b in 0..4 {
            let back = plan.unmap(&routes, at.row(b));
            for (u, v) in back.iter().zip(x.row(b)) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
            // nothing but carriers leaves the forwarding layers
            let carriers: Vec<usize> = routes.iter().map(|r| r.index).collect();
            for (k, &v) in at.row(b).iter().enumerate() {
                if !carriers.contains(&k) {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn init_is_a_function_of_the_seed(seed in 0u64..10_000, s in 0.3f64..0.99) {
        let build = || {
            let mut m = mlp(12, 20, 4, seed);
            init_random(&mut m, RandomScheme::XavierNormal, &mut rng::stream(seed, streams::INIT)).unwrap();
            init_trap_layer(&mut m, 0, &TrapConfig::new(s, seed), &mut rng::stream(seed, streams::TRAP)).unwrap();
            m
        };
        let (a, b) = (build(), build());
        prop_assert!(a.params().zip(b.params()).all(|(p, q)| p == q));
        prop_assert!(a.dense(0).unwrap().bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clipping_twice_is_clipping_once(seed in 0u64..10_000, c in 1e-3f64..10.0) {
        let m = mlp(8, 6, 3, seed);
        let g = nn::gradients(&m, &uniform(&[5, 8], seed), &labels(5, 3, seed)).unwrap();
        let once = clip(&g, c).unwrap();
        let twice = clip(&once, c).unwrap();
        prop_assert!(once.norm() <= c * (1.0 + 1e-12));
        for (a, b) in once.tensors().zip(twice.tensors()) {
            prop_assert!(a.max_abs_diff(b).unwrap() <= 1e-15 * (1.0 + c));
        }
    }

    #[test]
    fn pruning_never_adds_exact_rows(seed in 0u64..10_000) {
        let (inp, batch) = (16, 6);
        let mut m = mlp(inp, 60, 3, seed);
        init_trap_layer(&mut m, 0, &TrapConfig::new(0.8, seed), &mut rng::seeded(seed)).unwrap();
        let x = uniform(&[batch, inp], seed + 3);
        let g = nn::gradients(&m, &x, &labels(batch, 3, seed)).unwrap();
        let mut last = usize::MAX;
        for f in [0.0, 0.1, 0.3, 0.6, 0.9] {
            let p = prune(&g, f).unwrap();
            let ex = extract_from_model(&m, &p, 0, None, EPS_ACTIVE).unwrap();
            let g0 = score(&ex, &x, TOL_REL).unwrap().metrics.g0;
            prop_assert!(g0 <= last, "G0 rose to {} at fraction {}", g0, f);
            last = g0;
        }
    }

    #[test]
    fn aggregate_of_single_example_users_is_the_batch_gradient(seed in 0u64..10_000, users in 1usize..9) {
        let m = mlp(7, 9, 3, seed);
        let x = uniform(&[users, 7], seed);
        let y = labels(users, 3, seed);
        let nodes: Vec<UserNode> = (0..users)
            .map(|u| UserNode::new(u, x.select_rows(&[u]).unwrap(), y.select_rows(&[u]).unwrap(), u as u64).unwrap())
            .collect();
        let ups: Vec<_> = nodes
            .iter()
            .map(|u| local_gradients(u, &m, 1, 1, 0, &mut rng::seeded(seed)).unwrap())
            .collect();
        let agg = aggregate(&ups).unwrap();
        let want = nn::gradients(&m, &x, &y).unwrap();
        for (a, b) in agg.tensors().zip(want.tensors()) {
            prop_assert!(a.max_abs_diff(b).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn matching_loss_is_never_negative(seed in 0u64..10_000) {
        let m = mlp(6, 5, 3, seed);
        let target = nn::gradients(&m, &uniform(&[1, 6], seed), &labels(1, 3, seed)).unwrap();
        let mut r = rng::seeded(seed + 9);
        let guess = uniform(&[1, 6], seed + 11);
        let logits: Vec<f64> = (0..3).map(|_| r.random::<f64>() * 8.0 - 4.0).collect();
        let l = matching_loss(&m, &target, &guess, &logits).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn synthetic_features_stay_in_unit_range(seed in 0u64..10_000, pick in 0usize..3, n in 1usize..40) {
        let kind = match pick {
            0 => DatasetKind::Image { height: 4, width: 3, channels: 2 },
            1 => DatasetKind::Tabular { features: 9 },
            _ => DatasetKind::Tokens { seq_len: 5, vocab: 50 },
        };
        let ds = gen_synthetic(kind, n, 4, seed).unwrap();
        prop_assert_eq!(ds.len(), n);
        match kind {
            DatasetKind::Tokens { vocab, .. } => {
                prop_assert!(ds.features.data().iter().all(|&t| t >= 0.0 && t < vocab as f64 && t.fract() == 0.0));
            }
            _ => prop_assert!(ds.features.data().iter().all(|&v| (0.0..=1.0).contains(&v))),
        }
    }
}

#[test]
fn trap_activation_grows_with_s() {
    // mean active fraction over 10 seeds on uniform inputs
    let (inp, n, batch) = (64, 200, 20);
    let x = uniform(&[batch, inp], 99);
    let y = labels(batch, 3, 99);
    let mean_a = |s: f64| {
        let mut total = 0.0;
        for seed in 0..10 {
            let mut m = mlp(inp, n, 3, seed);
            init_trap_layer(&mut m, 0, &TrapConfig::new(s, seed), &mut rng::stream(seed, streams::TRAP)).unwrap();
            let g = nn::gradients(&m, &x, &y).unwrap();
            total += extract_from_model(&m, &g, 0, None, EPS_ACTIVE).unwrap().active() as f64 / n as f64;
        }
        total / 10.0
    };
    let a: Vec<f64> = [0.4, 0.6, 0.8, 0.95].into_iter().map(mean_a).collect();
    assert!(a.windows(2).all(|w| w[1] >= w[0]), "{a:?}");
    assert!(a[3] > a[0]);
}
