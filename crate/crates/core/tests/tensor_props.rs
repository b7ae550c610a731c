use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upcycle_core::tensor::{softmax, top_right_singular_vector, DEFAULT_POWER_ITERS};
use upcycle_core::moe::ARROW_POWER_ITERS;
use upcycle_core::Tensor;

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1usize..=max, 1usize..=max).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10f32..10.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

fn dense_top_vector(m: &Tensor) -> (Vec<f64>, f64, f64) {
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), &m.to_f64());
    let eig = SymmetricEigen::new(a.transpose() * &a);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = order[0];
    let second = order.get(1).map_or(0.0, |&i| eig.eigenvalues[i]);
    (eig.eigenvectors.column(top).iter().copied().collect(), eig.eigenvalues[top], second)
}

proptest! {
    #[test]
    fn sub_self_is_zero_and_add_exact(m in matrix(6)) {
        prop_assert!(m.sub(&m).unwrap().is_zero());
        let doubled = m.add(&m).unwrap();
        prop_assert_eq!(doubled, m.scale(2.0).unwrap());
    }

    #[test]
    fn matmul_matches_triple_loop(a in matrix(5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..5);
        let b = Tensor::matrix(a.cols(), n, (0..a.cols() * n).map(|_| rng.random_range(-3f32..3.0)).collect()).unwrap();
        let out = a.matmul(&b).unwrap();
        for i in 0..a.rows() {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..a.cols() {
                    acc += f64::from(a.data()[i * a.cols() + p]) * f64::from(b.data()[p * n + j]);
                }
                prop_assert_eq!(out.data()[i * n + j], acc as f32);
            }
        }
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(v in proptest::collection::vec(-30f32..30.0, 1..10), c in -20f32..20.0) {
        let p = softmax(&Tensor::vector(v.clone()).unwrap()).unwrap();
        let total: f64 = p.data().iter().map(|&x| f64::from(x)).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        let q = softmax(&Tensor::vector(v.iter().map(|x| x + c).collect()).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn power_iteration_is_unit_and_dominant(m in matrix(8), seed in any::<u64>()) {
        prop_assume!(!m.is_zero());
        // convergence within the default cap needs sigma2 / sigma1 <= 0.9
        let (_, l1, l2) = dense_top_vector(&m);
        prop_assume!(l2 <= 0.81 * l1);
        let v = top_right_singular_vector(&m, DEFAULT_POWER_ITERS, seed).unwrap();
        prop_assert!((v.norm() - 1.0).abs() < 1e-6);
        let mv = m.matmul(&v).unwrap().norm();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let w: Vec<f64> = (0..m.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let w = Tensor::from_f64(vec![m.cols()], &w.iter().map(|x| x / n).collect::<Vec<_>>()).unwrap();
            prop_assert!(mv >= m.matmul(&w).unwrap().norm() - 1e-6, "{} vs {}", mv, m.matmul(&w).unwrap().norm());
        }
    }
}

#[test]
fn power_iteration_matches_dense_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let (r, c) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let m = Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1f32..1.0)).collect()).unwrap();
        let v = top_right_singular_vector(&m, ARROW_POWER_ITERS, case).unwrap();
        let (oracle, l1, l2) = dense_top_vector(&m);
        let cos: f64 = v.to_f64().iter().zip(&oracle).map(|(a, b)| a * b).sum::<f64>().abs();
        assert!(cos >= 1.0 - 1e-6, "case {case} ({r}x{c}): cos {cos}, gap {l1} vs {l2}");
    }
}
