mod common;

use mano::attention::{AttentionParams, WindowSpec};
use mano::config::KvMap;
use mano::darcy::{read_dataset, write_dataset, Dataset, DarcySample, Field};
use mano::multipole::{MultipoleConfig, MultipoleParams, SamplerMode};
use mano::ops;
use mano::rng::{normal_tensor, rng_from};
use mano::training::cosine_lr;
use mano::{Graph, Tensor};
use proptest::prelude::*;

fn vec_f64(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-50.0f64..50.0, 1..32)) {
        let mut r = row.clone();
        ops::softmax_in_place(&mut r);
        prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Shift invariance.
        let mut shifted: Vec<f64> = row.iter().map(|v| v + 3.25).collect();
        ops::softmax_in_place(&mut shifted);
        for (a, b) in r.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_and_transpose_are_adjoint(
        small in 1usize..5, c_in in 1usize..4, c_out in 1usize..4, k in 1usize..4, seed in any::<u64>()
    ) {
        // With stride k the large grid is exactly small·k on a side.
        let large = small * k;
        let mut rng = rng_from(seed);
        let x = normal_tensor(&[large, large, c_in], 1.0, &mut rng);
        let y = normal_tensor(&[small, small, c_out], 1.0, &mut rng);
        let kern = normal_tensor(&[k, k, c_in, c_out], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xn, yn, kn) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(kern));
        let cx = g.conv2d(xn, kn, k, 0).unwrap();
        let ty = g.conv_transpose2d(yn, kn, k, 0).unwrap();
        let lhs = g.value(cx).dot(&y);
        let rhs = x.dot(g.value(ty));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn pool_and_replication_are_adjoint_up_to_scale(side in 1usize..5, c in 1usize..4, k in 1usize..4, seed in any::<u64>()) {
        let large = side * k;
        let mut rng = rng_from(seed);
        let x = normal_tensor(&[large, large, c], 1.0, &mut rng);
        let y = normal_tensor(&[side, side, c], 1.0, &mut rng);
        let pooled = ops::avg_pool(x.data(), large, large, c, k);
        let up = ops::nearest_upsample(y.data(), side, side, c, k);
        let lhs = ops::dot(&pooled, y.data()) * (k * k) as f64;
        let rhs = ops::dot(x.data(), &up);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn dense_attention_is_permutation_equivariant(tokens in 2usize..10, seed in any::<u64>()) {
        let (heads, dh) = (2, 3);
        let p = AttentionParams::init(heads, dh, true, seed, "attn").unwrap();
        let mut rng = rng_from(seed.wrapping_add(1));
        let x = normal_tensor(&[tokens, heads * dh], 1.0, &mut rng);
        // A fixed cyclic shift is a nontrivial permutation.
        let perm: Vec<usize> = (0..tokens).map(|i| (i + 1) % tokens).collect();
        let d = heads * dh;
        let px = Tensor::from_fn(&[tokens, d], |i| x.data()[perm[i / d] * d + i % d]);
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let xn = g.constant(input.clone());
            let pn = p.map("attn", &mut |name, t| g.param(name, t.clone()));
            let y = mano::attention::full_attention(&mut g, xn, &pn).unwrap();
            g.value(y).clone()
        };
        let (y, py) = (run(&x), run(&px));
        for t in 0..tokens {
            for c in 0..d {
                prop_assert!((py.data()[t * d + c] - y.data()[perm[t] * d + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multipole_preserves_shape_and_finiteness(
        levels in 0usize..4, avg in any::<bool>(), share in any::<bool>(), seed in any::<u64>()
    ) {
        let cfg = MultipoleConfig {
            levels,
            sampler: if avg { SamplerMode::AveragePool } else { SamplerMode::LearnedConv },
            share_du: share,
            ..MultipoleConfig::default()
        };
        let p = MultipoleParams::init(2, 2, true, &cfg, seed, "m").unwrap();
        let x = normal_tensor(&[16, 16, 4], 1.0, &mut rng_from(seed));
        let y = common::library_multipole(&x, &p, &cfg);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
    }

    #[test]
    fn windowed_attention_maps_constant_maps_to_constants(side in 2usize..7, seed in any::<u64>()) {
        let cfg = MultipoleConfig {
            window: WindowSpec::new(2, 1).unwrap(),
            ..MultipoleConfig::default()
        };
        let p = common::random_params(1, 3, &cfg, seed);
        let token = normal_tensor(&[3], 1.0, &mut rng_from(seed));
        let x = Tensor::from_fn(&[side, side, 3], |i| token.data()[i % 3]);
        let y = common::library_multipole(&x, &p, &cfg);
        for t in 1..side * side {
            for c in 0..3 {
                prop_assert!((y.data()[t * 3 + c] - y.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_schedule_is_monotone_and_bounded(total in 1u64..500, lr0 in 1e-5f64..1.0, frac in 0.0f64..1.0) {
        let lr_min = lr0 * frac;
        let mut prev = f64::INFINITY;
        for step in 0..=total + 3 {
            let lr = cosine_lr(step, total, lr0, lr_min);
            prop_assert!(lr <= prev + 1e-15);
            prop_assert!(lr >= lr_min - 1e-15 && lr <= lr0 + 1e-15);
            prev = lr;
        }
        prop_assert!((cosine_lr(0, total, lr0, lr_min) - lr0).abs() < 1e-15);
        prop_assert!((cosine_lr(total, total, lr0, lr_min) - lr_min).abs() < 1e-15);
    }

    #[test]
    fn kv_render_parse_round_trip(entries in prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", "[A-Za-z0-9_.,+-]{1,16}", 0..12)) {
        let mut map = KvMap::new();
        for (k, v) in &entries {
            map.set(k, v);
        }
        let parsed = KvMap::parse(&map.render()).unwrap();
        prop_assert_eq!(parsed, map);
    }

    #[test]
    fn dataset_round_trips(n in 2usize..6, count in 1usize..4, data in vec_f64(2 * 5 * 5 * 3)) {
        let take = |off: usize| Field::new(n, data[off..off + n * n].to_vec()).unwrap();
        let samples = (0..count)
            .map(|s| DarcySample { a: take(2 * s * n * n), u: take((2 * s + 1) * n * n) })
            .collect();
        let ds = Dataset { n, samples };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn relative_error_is_symmetric_and_bounded(a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let e = mano::gradcheck::relative_error(a, b, 1e-6);
        prop_assert!((e - mano::gradcheck::relative_error(b, a, 1e-6)).abs() < 1e-15);
        prop_assert!((0.0..=2.0).contains(&e));
    }
}
