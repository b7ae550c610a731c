use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upcycle_core::lora::{apply, lora_forward, lora_init, lora_task_vector, materialize_delta, matrix_layers, RankScale, SQRT_SCALING_PAIRS};
use upcycle_core::merging::{compute_task_vector, merge_task_arithmetic};
use upcycle_core::moe::{moe_forward, moefy, route, MoeModel};
use upcycle_core::store::{decode, encode};
use upcycle_core::{Checkpoint, LoraAdapter, LoraModel, MoeLayer, ParamMap, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_base(rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut p = ParamMap::new();
    p.insert("l0.weight".into(), random_tensor(rng, &[5, 4], 1.0));
    p.insert("l0.bias".into(), random_tensor(rng, &[5], 1.0));
    p.insert("l1.weight".into(), random_tensor(rng, &[3, 5], 1.0));
    p.insert("l1.bias".into(), random_tensor(rng, &[3], 1.0));
    Checkpoint::new(p).unwrap()
}

fn trained_like(rng: &mut ChaCha8Rng, base: &Checkpoint, rank: usize, seed: u64) -> LoraModel {
    let mut lm = lora_init(&matrix_layers(base), rank, 8.0, seed, "base").unwrap();
    for ad in lm.adapters.values_mut() {
        let shape = ad.b.shape().to_vec();
        ad.b = random_tensor(rng, &shape, 0.5);
    }
    lm
}

#[test]
fn sqrt_pairs_validate() {
    for (rank, scale) in SQRT_SCALING_PAIRS {
        RankScale { rank, scale }.validate().unwrap();
    }
}

#[test]
fn materialized_delta_rank_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for r in 1..=3 {
        let a = random_tensor(&mut rng, &[r, 9], 1.0);
        let b = random_tensor(&mut rng, &[7, r], 1.0);
        let d = materialize_delta(&LoraAdapter::new("w", a, b, 4.0).unwrap());
        let m = DMatrix::from_row_slice(7, 9, &d.to_f64());
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        assert!(sv[r..].iter().all(|&s| s < 1e-4 * sv[0]), "rank {r}: {sv:?}");
    }
}

#[test]
fn two_merge_routes_agree_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = random_base(&mut rng);
    let models: Vec<LoraModel> = (0..3).map(|s| trained_like(&mut rng, &base, 2, s)).collect();
    let via_lora: Vec<_> = models
        .iter()
        .enumerate()
        .map(|(i, m)| lora_task_vector(m, &base, &format!("t{i}")).unwrap())
        .collect();
    let via_apply: Vec<_> = models
        .iter()
        .map(|m| compute_task_vector(&apply(&base, m).unwrap(), &base).unwrap())
        .collect();
    let a = merge_task_arithmetic(&base, &via_lora, 0.4).unwrap();
    let b = merge_task_arithmetic(&base, &via_apply, 0.4).unwrap();
    assert_eq!(a.params, b.params);
    // biases untouched
    assert!(via_lora[0].deltas["l0.bias"].is_zero());
}

#[test]
fn moefy_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let base = random_base(&mut rng);
    let lm = trained_like(&mut rng, &base, 2, 1);
    let moe = moefy(&base, std::slice::from_ref(&lm), 1, 0).unwrap();
    for (name, layer) in &moe.layers {
        let x = random_tensor(&mut rng, &[layer.w.cols()], 2.0);
        let dense = lora_forward(&layer.w, &layer.bias, &lm.adapters[name], &x).unwrap();
        assert_eq!(moe_forward(layer, &x).unwrap(), dense);
    }

    let zero = lora_init(&matrix_layers(&base), 2, 8.0, 3, "base").unwrap();
    let moe0 = moefy(&base, &[zero.clone(), zero], 2, 0).unwrap();
    assert_eq!(moe0.init, "arrow+random_fallback");
    for layer in moe0.layers.values() {
        let x = random_tensor(&mut rng, &[layer.w.cols()], 2.0);
        let y = moe_forward(layer, &x).unwrap();
        let want = layer.w.matmul(&x).unwrap().add(&layer.bias).unwrap();
        for (g, w) in y.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0));
        }
    }

    let eight: Vec<LoraModel> = (0..8).map(|s| trained_like(&mut rng, &base, 1, s)).collect();
    let moe8 = moefy(&base, &eight, 2, 0).unwrap();
    for layer in moe8.layers.values() {
        assert_eq!(layer.router.rows(), 8);
        for t in 0..8 {
            let n: f64 = layer.router.row(t).iter().map(|&v| f64::from(v).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }
    let back = MoeModel::from_archive(&decode(&encode(&moe8.to_archive())).unwrap()).unwrap();
    assert_eq!(back, moe8);

    let mut partial = eight[0].clone();
    partial.adapters.remove("l1.weight");
    assert!(moefy(&base, &[eight[1].clone(), partial], 2, 0).is_err());
}

proptest! {
    #[test]
    fn routing_weights_normalized(seed in any::<u64>(), n_exp in 1usize..6, k in 1usize..6) {
        let k = k.min(n_exp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_tensor(&mut rng, &[3, 4], 1.0);
        let experts: Vec<LoraAdapter> = (0..n_exp)
            .map(|_| LoraAdapter::new("l", random_tensor(&mut rng, &[2, 4], 1.0), random_tensor(&mut rng, &[3, 2], 1.0), 2.0).unwrap())
            .collect();
        let layer = MoeLayer::new("l", w, random_tensor(&mut rng, &[3], 1.0), experts, random_tensor(&mut rng, &[n_exp, 4], 3.0), k).unwrap();
        let d = route(&layer, &random_tensor(&mut rng, &[4], 2.0)).unwrap();
        prop_assert_eq!(d.selected.len(), k);
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let min_sel = d.selected.iter().map(|&t| d.probs[t]).fold(f64::INFINITY, f64::min);
        for t in 0..n_exp {
            if !d.selected.contains(&t) {
                prop_assert!(d.probs[t] <= min_sel);
            }
        }
        for (&t, &wt) in d.selected.iter().zip(&d.weights) {
            prop_assert!((wt * d.selected.iter().map(|&s| d.probs[s]).sum::<f64>() - d.probs[t]).abs() < 1e-12);
        }
    }
}
