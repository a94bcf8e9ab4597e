use attnseg_core::{aggregate, compute_weights, AttentionTensor, WeightVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, layer_id: usize, w: usize) -> AttentionTensor {
    let n = w * w;
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| (v / total) as f32));
    }
    AttentionTensor::new(layer_id, w, data).unwrap()
}

/// Bilinear value at output pixel `(py, px)` when a `w x w` map is resized
/// to `t x t`, evaluated directly from the four neighbouring source pixels.
fn bilinear_at(map: &[f32], w: usize, t: usize, py: usize, px: usize) -> f64 {
    let coord = |p: usize| {
        ((p as f64 + 0.5) * w as f64 / t as f64 - 0.5)
            .max(0.0)
            .min((w - 1) as f64)
    };
    let (y, x) = (coord(py), coord(px));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(w - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| map[r * w + c] as f64;
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Naive reference: four nested loops over (I, J, y, x) per tensor.
fn reference(tensors: &[AttentionTensor], weights: &[f64], t: usize) -> Vec<f64> {
    let n = t * t;
    let mut out = vec![0.0f64; n * n];
    for i in 0..t {
        for j in 0..t {
            let slice = &mut out[(i * t + j) * n..(i * t + j + 1) * n];
            for (tensor, &r) in tensors.iter().zip(weights) {
                let w = tensor.resolution();
                let d = t / w;
                let src = tensor.slice(i / d, j / d);
                for y in 0..t {
                    for x in 0..t {
                        slice[y * t + x] += r * bilinear_at(src, w, t, y, x);
                    }
                }
            }
            let sum: f64 = slice.iter().sum();
            for v in slice.iter_mut() {
                *v /= sum;
            }
        }
    }
    out
}

fn assert_matches_reference(tensors: &[AttentionTensor], weights: &WeightVector, t: usize) {
    let af = aggregate(tensors, weights, t).unwrap();
    let expected = reference(tensors, weights.as_slice(), t);
    for (k, (a, e)) in af.data().iter().zip(&expected).enumerate() {
        assert!((*a as f64 - e).abs() < 1e-6, "element {k}: {a} vs {e}");
    }
    for s in 0..t * t {
        let sum: f64 = af.map(s).iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}

#[test]
fn matches_quadruple_loop_at_16() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let tensors = vec![
            random_tensor(&mut rng, 0, 4),
            random_tensor(&mut rng, 1, 8),
            random_tensor(&mut rng, 2, 16),
        ];
        let weights = compute_weights(&[4, 8, 16]).unwrap();
        assert_matches_reference(&tensors, &weights, 16);
    }
}

#[test]
fn matches_quadruple_loop_at_64() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tensors = vec![
        random_tensor(&mut rng, 0, 8),
        random_tensor(&mut rng, 1, 16),
        random_tensor(&mut rng, 2, 64),
    ];
    let weights = WeightVector::new(vec![0.5, 0.3, 0.2]).unwrap();
    assert_matches_reference(&tensors, &weights, 64);
}

#[test]
fn locality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tensors = vec![random_tensor(&mut rng, 0, 4), random_tensor(&mut rng, 1, 8)];
    let weights = compute_weights(&[4, 8]).unwrap();
    let base = aggregate(&tensors, &weights, 8).unwrap();

    // Replace coarse slice (1, 2) with a different distribution.
    let mut data = tensors[0].data().to_vec();
    let s = 4 + 2;
    data[s * 16..(s + 1) * 16].copy_from_slice(&[1.0 / 16.0; 16]);
    let perturbed = vec![
        AttentionTensor::new(0, 4, data).unwrap(),
        tensors[1].clone(),
    ];
    let after = aggregate(&perturbed, &weights, 8).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let depends = i / 2 == 1 && j / 2 == 2;
            assert_eq!(
                base.slice(i, j) == after.slice(i, j),
                !depends,
                "({i}, {j})"
            );
        }
    }
}

#[test]
fn thread_count_does_not_change_result() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tensors = vec![
        random_tensor(&mut rng, 0, 8),
        random_tensor(&mut rng, 1, 16),
    ];
    let weights = compute_weights(&[8, 16]).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| aggregate(&tensors, &weights, 16).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalized_in_range_and_order_free(
        seed in any::<u64>(),
        picks in proptest::collection::vec(0usize..3, 1..5),
        raw_weights in proptest::collection::vec(0.01f64..1.0, 5),
        rotate in 0usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resolutions: Vec<usize> = picks.iter().map(|p| [2, 4, 8][*p]).collect();
        let tensors: Vec<AttentionTensor> = resolutions
            .iter()
            .enumerate()
            .map(|(k, &w)| random_tensor(&mut rng, k, w))
            .collect();
        let total: f64 = raw_weights[..tensors.len()].iter().sum();
        let w: Vec<f64> = raw_weights[..tensors.len()].iter().map(|v| v / total).collect();
        let af = aggregate(&tensors, &WeightVector::new(w.clone()).unwrap(), 8).unwrap();

        // Integer-factor upsampling scales each map's mass by δ², so the
        // pre-normalization slice sum is S = Σ R_k δ_k² and every
        // pre-normalization value lies in [Σ R_k min_k, Σ R_k max_k].
        let scale: f64 = tensors.iter().zip(&w).map(|(t, r)| r * ((8 / t.resolution()).pow(2) as f64)).sum();
        for i in 0..8 {
            for j in 0..8 {
                let slice = af.slice(i, j);
                let sum: f64 = slice.iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
                let (mut lo, mut hi) = (0.0, 0.0);
                for (t, r) in tensors.iter().zip(&w) {
                    let d = 8 / t.resolution();
                    let src = t.slice(i / d, j / d);
                    lo += r * src.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
                    hi += r * src.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                }
                for &v in slice {
                    let pre = v as f64 * scale;
                    prop_assert!(pre >= lo - 1e-6 && pre <= hi + 1e-6);
                }
            }
        }

        let n = tensors.len();
        let order: Vec<usize> = (0..n).map(|k| (k + rotate) % n).collect();
        let shuffled: Vec<AttentionTensor> = order.iter().map(|&k| tensors[k].clone()).collect();
        let sw: Vec<f64> = order.iter().map(|&k| w[k]).collect();
        let again = aggregate(&shuffled, &WeightVector::new(sw).unwrap(), 8).unwrap();
        prop_assert_eq!(af, again);
    }
}
