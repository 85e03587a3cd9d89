use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::rope::RopeTable;

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn p(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::param(data, shape).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Central finite differences of `f` with respect to every entry of `leaf`.
fn numeric_grad(leaf: &Tensor<f64>, f: &dyn Fn() -> f64, eps: f64) -> Vec<f64> {
    (0..leaf.numel())
        .map(|i| {
            let orig = leaf.at(i);
            leaf.update_data(|d| d[i] = orig + eps);
            let up = f();
            leaf.update_data(|d| d[i] = orig - eps);
            let down = f();
            leaf.update_data(|d| d[i] = orig);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Checks analytic against numeric gradients for every leaf of a scalar function.
fn check(leaves: &[Tensor<f64>], f: &dyn Fn() -> Tensor<f64>) {
    for l in leaves {
        l.zero_grad();
    }
    f().backward().unwrap();
    for (i, l) in leaves.iter().enumerate() {
        let analytic = l.grad().unwrap_or_else(|| vec![0.0; l.numel()]);
        let numeric = numeric_grad(l, &|| f().item(), 1e-3);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "leaf {i}: rel err {err}\n analytic {analytic:?}\n numeric {numeric:?}");
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity_and_dot() {
    let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let m = t(&[3.0, -1.0, 0.5, 7.0], &[2, 2]);
    assert_eq!(eye.matmul(&m).unwrap().to_vec(), m.to_vec());

    let row = t(&[1.0, 2.0, 3.0], &[1, 3]);
    let ones = t(&[1.0; 3], &[3, 1]);
    assert_eq!(row.matmul(&ones).unwrap().to_vec(), vec![6.0]);

    let z = Tensor::<f64>::zeros(&[3, 4]);
    let any = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[4, 2]);
    let out = z.matmul(&any).unwrap();
    assert_eq!(out.shape(), &[3, 2]);
    assert!(out.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f32>::zeros(&[2, 3]);
    let b = Tensor::<f32>::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, crate::Error::Shape { .. }));
}

#[test]
fn matmul_counts_flops_additively() {
    flops::reset();
    let a = Tensor::<f32>::zeros(&[3, 5]);
    let b = Tensor::<f32>::zeros(&[5, 7]);
    let c = Tensor::<f32>::zeros(&[7, 2]);
    let (_, spent) = flops::measure(|| a.matmul(&b).unwrap().matmul(&c).unwrap());
    assert_eq!(spent, 2 * 3 * 5 * 7 + 2 * 3 * 7 * 2);
    assert_eq!(flops::read(), spent);
    // other ops are free
    let (_, spent) = flops::measure(|| a.softmax(1).unwrap().gelu());
    assert_eq!(spent, 0);
}

#[test]
fn softmax_examples() {
    let u = t(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap().to_vec();
    assert!(close(&u, &[1.0 / 3.0; 3], 1e-12));

    let x = t(&[0.3, -1.2, 2.0], &[3]);
    let shifted = t(&[100.3, 98.8, 102.0], &[3]);
    assert!(close(&x.softmax(0).unwrap().to_vec(), &shifted.softmax(0).unwrap().to_vec(), 1e-12));

    let peaked = t(&[10.0, 0.0, 0.0], &[3]).softmax(0).unwrap();
    assert!(peaked.at(0) > 0.9999);
}

#[test]
fn softmax_sums_to_one_along_any_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = t(&rand_vec(&mut rng, 24).iter().map(|v| v * 1e4).collect::<Vec<_>>(), &[2, 3, 4]);
    for axis in 0..3 {
        let y = x.softmax(axis).unwrap().to_vec();
        let (outer, len, inner) = ops::split_axis(&[2, 3, 4], axis);
        for o in 0..outer {
            for j in 0..inner {
                let s: f64 = (0..len).map(|i| y[(o * len + i) * inner + j]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
    assert!(x.softmax(3).is_err());
}

#[test]
fn layer_norm_examples() {
    let one = t(&[1.0; 4], &[4]);
    let zero = t(&[0.0; 4], &[4]);
    let c = t(&[5.0; 4], &[1, 4]).layer_norm(&one, &zero, 1e-5).unwrap();
    assert!(c.to_vec().iter().all(|v| v.abs() < 1e-12));

    let pm = t(&[1.0, -1.0], &[1, 2]);
    let y = pm.layer_norm(&t(&[1.0, 1.0], &[2]), &t(&[0.0, 0.0], &[2]), 1e-12).unwrap();
    assert!(close(&y.to_vec(), &[1.0, -1.0], 1e-9));

    let x = t(&[0.3, 2.0, -4.0], &[1, 3]);
    let beta = t(&[0.5, -1.0, 2.0], &[3]);
    let y = x.layer_norm(&t(&[0.0; 3], &[3]), &beta, 1e-5).unwrap();
    assert_eq!(y.to_vec(), beta.to_vec());
}

#[test]
fn gelu_examples() {
    let y = t(&[0.0, 10.0, -10.0], &[3]).gelu().to_vec();
    assert_eq!(y[0], 0.0);
    assert!((y[1] - 10.0).abs() < 1e-6);
    assert!(y[2].abs() < 1e-6);
}

#[test]
fn cross_entropy_examples() {
    let uniform = t(&[0.0; 4], &[1, 4]).cross_entropy(&[2]).unwrap().item();
    assert!((uniform - 4f64.ln()).abs() < 1e-12);
    let sure = t(&[100.0, 0.0, 0.0, 0.0], &[1, 4]).cross_entropy(&[0]).unwrap().item();
    assert!(sure.abs() < 1e-12);
    let two = t(&[0.0, 0.0], &[1, 2]).cross_entropy(&[1]).unwrap().item();
    assert!((two - 2f64.ln()).abs() < 1e-12);
    assert!(matches!(
        t(&[0.0, 0.0], &[1, 2]).cross_entropy(&[2]),
        Err(crate::Error::Index(_))
    ));
}

#[test]
fn backward_trivial_cases() {
    let w = p(vec![0.5, -2.0, 3.0, 1.0, 0.0, 4.0], &[2, 3]);
    w.sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![1.0; 6]);

    let w = p(vec![0.5, -2.0, 3.0], &[3]);
    w.mul(&w).unwrap().sum().scale(0.5).backward().unwrap();
    assert!(close(&w.grad().unwrap(), &w.to_vec(), 1e-12));
}

#[test]
fn backward_accumulates_and_rejects_non_scalar() {
    let w = p(vec![1.0, 2.0], &[2]);
    w.sum().backward().unwrap();
    w.sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
    w.zero_grad();
    assert!(w.grad().is_none());
    assert!(matches!(w.scale(2.0).backward(), Err(crate::Error::Contract(_))));
}

#[test]
fn shared_subexpression_is_visited_once() {
    // y = a·a used twice; d/da sum(y + y) = 4a
    let a = p(vec![1.5, -0.5], &[2]);
    let y = a.mul(&a).unwrap();
    y.add(&y).unwrap().sum().backward().unwrap();
    assert!(close(&a.grad().unwrap(), &[6.0, -2.0], 1e-12));
}

#[test]
fn no_grad_records_nothing() {
    let a = p(vec![1.0, 2.0], &[1, 2]);
    let y = no_grad(|| a.scale(3.0));
    assert!(!y.requires_grad());
    assert!(a.scale(3.0).requires_grad());
}

#[test]
fn constant_inputs_get_no_grad() {
    let w = p(vec![0.1, 0.2, 0.3], &[1, 3]);
    let bias = t(&[1.0, 2.0, 3.0], &[3]);
    w.add_row(&bias).unwrap().softmax(1).unwrap().sum().backward().unwrap();
    assert!(bias.grad().is_none());
    assert!(w.grad().is_some());
}

/// Every differentiable op against central differences, over 20 seeds.
#[test]
fn gradients_match_finite_differences() {
    let table = Arc::new(RopeTable::new(8, 10_000.0, 64).unwrap());
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let n = rng.gen_range(2..=8);
        let a = p(rand_vec(&mut rng, m * k), &[m, k]);
        let b = p(rand_vec(&mut rng, k * n), &[k, n]);
        let w = t(&rand_vec(&mut rng, m * n), &[m, n]);
        let row = p(rand_vec(&mut rng, n), &[n]);
        let col = p(rand_vec(&mut rng, m), &[m]);

        // matmul, mul, add_row, mul_col, transpose, sum
        check(&[a.clone(), b.clone(), row.clone(), col.clone()], &|| {
            let c = a.matmul(&b).unwrap().add_row(&row).unwrap().mul_col(&col).unwrap();
            c.mul(&w).unwrap().transpose().unwrap().sum()
        });

        // softmax along both axes, sub, scale, mean_rows
        let x = p(rand_vec(&mut rng, m * n), &[m, n]);
        check(std::slice::from_ref(&x), &|| {
            let s0 = x.softmax(0).unwrap();
            let s1 = x.softmax(1).unwrap();
            s0.sub(&s1.scale(0.7)).unwrap().mul(&w).unwrap().mean_rows().unwrap().mul(&row.detach()).unwrap().sum()
        });

        // layer norm with all three inputs, gelu
        let gain = p(rand_vec(&mut rng, n), &[n]);
        let offset = p(rand_vec(&mut rng, n), &[n]);
        check(&[x.clone(), gain.clone(), offset.clone()], &|| {
            x.layer_norm(&gain, &offset, 1e-5).unwrap().gelu().mul(&w).unwrap().sum()
        });

        // cross entropy
        let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        check(std::slice::from_ref(&x), &|| x.cross_entropy(&targets).unwrap());

        // rope + causal mask + narrow/concat
        let q = p(rand_vec(&mut rng, m * 8), &[m, 8]);
        let positions: Vec<i64> = (0..m).map(|_| rng.gen_range(0..64)).collect();
        let wq = t(&rand_vec(&mut rng, m * 8), &[m, 8]);
        check(std::slice::from_ref(&q), &|| {
            let r = q.rope(&positions, &table).unwrap();
            let left = r.narrow_cols(0, 3).unwrap();
            let right = r.narrow_cols(3, 5).unwrap();
            let back = Tensor::concat_cols(&[right, left]).unwrap();
            let stacked = Tensor::concat_rows(&[back.clone(), back]).unwrap();
            let scores = stacked.matmul(&q.transpose().unwrap()).unwrap();
            let masked = scores.causal_mask(0).unwrap().softmax(1).unwrap();
            masked.sum().add(&r.mul(&wq).unwrap().sum()).unwrap()
        });

        // index_rows, scatter_rows, gather, normalize_rows, reshape
        let probs = p(rand_vec(&mut rng, m * n).iter().map(|v| v.abs() + 0.1).collect(), &[m, n]);
        let rows: Vec<usize> = (0..3).map(|_| rng.gen_range(0..m)).collect();
        check(&[probs.clone(), x.clone()], &|| {
            let g = probs.gather(&[0, m * n - 1, (m * n) / 2]).unwrap().reshape(&[1, 3]).unwrap();
            let norm = probs.normalize_rows().unwrap();
            let picked = x.index_rows(&rows).unwrap();
            let scattered = Tensor::scatter_rows(m, n, vec![(picked, rows.clone()), (norm, (0..m).collect())]).unwrap();
            scattered.mul(&w).unwrap().sum().add(&g.sum()).unwrap()
        });
    }
}

#[test]
fn dropout_is_seeded_and_scaled() {
    let x = Tensor::<f64>::from_fn(&[200], |_| 1.0);
    let a = x.dropout(0.25, &mut ChaCha8Rng::seed_from_u64(9)).to_vec();
    let b = x.dropout(0.25, &mut ChaCha8Rng::seed_from_u64(9)).to_vec();
    assert_eq!(a, b);
    assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    assert!(a.contains(&0.0));
    assert_eq!(x.dropout(0.0, &mut ChaCha8Rng::seed_from_u64(9)).to_vec(), x.to_vec());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-1e4f64..1e4, 1..32)) {
            let n = v.len();
            let y = Tensor::new(v, &[1, n]).unwrap().softmax(1).unwrap().to_vec();
            prop_assert!(y.iter().all(|&p| p >= 0.0));
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn matmul_flops_are_exact(m in 1usize..6, k in 1usize..6, n in 1usize..6) {
            let a = Tensor::<f32>::zeros(&[m, k]);
            let b = Tensor::<f32>::zeros(&[k, n]);
            let (_, spent) = flops::measure(|| a.matmul(&b).unwrap());
            prop_assert_eq!(spent, (2 * m * n * k) as u64);
        }
    }
}
