use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sasq_core::persist::{decode_scales, encode_scales};
use sasq_core::qlinear::forward_int;
use sasq_core::quant::{derive_scale, fake_quantize, fake_quantize_tensor, quantize};
use sasq_core::*;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, mag: f32) -> FloatTensor {
    FloatTensor::from_vec(
        Shape::matrix(rows, cols).unwrap(),
        (0..rows * cols).map(|_| rng.gen_range(-mag..=mag)).collect(),
    )
    .unwrap()
}

fn group(g: Granularity, r: usize, c: usize) -> usize {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerToken => r,
        Granularity::PerChannel => c,
    }
}

fn granularity() -> impl Strategy<Value = Granularity> {
    prop::sample::select(vec![Granularity::PerTensor, Granularity::PerToken, Granularity::PerChannel])
}

fn bits() -> impl Strategy<Value = u8> {
    prop::sample::select(vec![2u8, 4, 8, 12, 16])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn derived_scales_reach_but_never_pass_qmax(
        rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), b in bits(), g in granularity(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, rows, cols, 3.0);
        let spec = QuantSpec::new(b, g).unwrap();
        let s = derive_scale(&x, &spec).unwrap();
        let q = quantize(&x, &s, &spec).unwrap();
        let mut peak = vec![0i32; s.len()];
        for r in 0..rows {
            for c in 0..cols {
                let n = q.ints.data()[r * cols + c];
                prop_assert!(n >= -spec.qmax() && n <= spec.qmax());
                let k = group(g, r, c);
                peak[k] = peak[k].max(n.abs());
            }
        }
        for (k, &p) in peak.iter().enumerate() {
            if s.values().data()[k] > spec.scale_floor {
                prop_assert_eq!(p, spec.qmax());
            }
        }
    }

    #[test]
    fn identity_ablation_is_within_one_ulp(
        rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), b in bits(), g in granularity(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, rows, cols, 5.0);
        let spec = QuantSpec::new(b, g).unwrap().with_ablation("no-round+no-clamp".parse().unwrap());
        // Deliberately small scales: without clamping nothing saturates.
        let s = derive_scale(&x.map(|v| v * 0.01), &spec).unwrap();
        let y = fake_quantize_tensor(&x, &s, &spec).unwrap();
        for (&a, &v) in y.data().iter().zip(x.data()) {
            prop_assert!((a - v).abs() <= v.abs() * f32::EPSILON, "{} vs {}", a, v);
        }
    }

    #[test]
    fn saturated_scale_gradient_counts_edges(
        rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(), b in bits(), g in granularity(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = QuantSpec::new(b, g).unwrap();
        let x = random(&mut rng, rows, cols, 1.0).map(|v| if v < 0.0 { v - 1.0 } else { v + 1.0 });
        let r = random(&mut rng, rows, cols, 1.0);
        let len = match g {
            Granularity::PerTensor => 1,
            Granularity::PerToken => rows,
            Granularity::PerChannel => cols,
        };
        // |x / s| >= 4 qmax, so every rounded value lies strictly outside the
        // inclusive clamp range.
        let s = FloatTensor::vector(vec![0.25 / spec.qmax() as f32; len]).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let sv = tape.leaf(s, true).unwrap();
        let rv = tape.constant(r.clone()).unwrap();
        let y = fake_quantize(&mut tape, xv, sv, &spec).unwrap();
        let prod = tape.mul(y, rv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut want = vec![0.0f64; len];
        for i in 0..rows {
            for c in 0..cols {
                let edge = if x.data()[i * cols + c] > 0.0 { spec.qmax() } else { spec.qmin() };
                want[group(g, i, c)] += edge as f64 * r.data()[i * cols + c] as f64;
            }
        }
        for (&got, &w) in grads.get(sv).unwrap().data().iter().zip(&want) {
            prop_assert!((got as f64 - w).abs() <= 1e-5 * w.abs().max(1.0), "{} vs {}", got, w);
        }
    }

    #[test]
    fn integer_linear_matches_fake_quant(
        m in 1usize..=16, k in 1usize..=32, n in 1usize..=16, seed in any::<u64>(),
        b in prop::sample::select(vec![4u8, 8, 16]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = FloatTensor::vector((0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()).unwrap();
        let mut layer = QuantLinear::new(random(&mut rng, k, n, 1.0), Some(bias)).unwrap();
        let spec = QuantSpec::new(b, Granularity::PerChannel).unwrap();
        layer.quantize_weights(&spec).unwrap();
        let x = random(&mut rng, m, k, 2.0);
        let s = derive_scale(&x, &spec).unwrap();
        let int = forward_int(&x, &layer, &s, &spec).unwrap();
        let fake = layer.forward_fake_plain(&x, &s, &spec).unwrap();
        let peak = fake.data().iter().fold(0.0f32, |a, v| a.max(v.abs())).max(1e-30);
        for (&a, &f) in int.data().iter().zip(fake.data()) {
            prop_assert!((a - f).abs() / peak <= 1e-5);
        }
    }

    #[test]
    fn single_row_per_token_equals_per_tensor(
        k in 1usize..=32, n in 1usize..=16, seed in any::<u64>(),
        b in prop::sample::select(vec![4u8, 8, 16]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = QuantLinear::new(random(&mut rng, k, n, 1.0), None).unwrap();
        let spec = QuantSpec::new(b, Granularity::PerChannel).unwrap();
        layer.quantize_weights(&spec).unwrap();
        let x = random(&mut rng, 1, k, 3.0);
        let tensor = spec.with_granularity(Granularity::PerTensor);
        let a = forward_int(&x, &layer, &derive_scale(&x, &tensor).unwrap(), &tensor).unwrap();
        let d = forward_dynamic_per_token(&x, &layer, &spec).unwrap();
        prop_assert!(a.data().iter().zip(d.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn scale_files_round_trip(widths in prop::collection::vec(1usize..20, 1..6), b in bits(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let v = FloatTensor::vector((0..w).map(|_| rng.gen_range(1e-6f32..10.0)).collect()).unwrap();
                (format!("blocks.{i}.mlp.up"), ScaleVector::new(Granularity::PerChannel, v, 1e-8).unwrap())
            })
            .collect();
        let set = ScaleSet::new(b, entries).unwrap();
        let bytes = encode_scales(&set).unwrap();
        let back = decode_scales(&bytes).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(encode_scales(&back).unwrap(), bytes);
    }
}
