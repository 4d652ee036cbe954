use std::f64::consts::{LN_2, TAU};

use coda::augment::adversarial_perturb;
use coda::contrast::{MemoryBank, MomentumState};
use coda::diagnostics::{mmd2, KernelSpec};
use coda::encoder::{EmbeddingSlice, ModelDims, ModelParams};
use coda::objectives::{info_nce, js_div, kl_div, total_objective, LossParts, LossWeights};
use coda::tensor::{l2_norm, Matrix};
use proptest::prelude::*;

fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn dist_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..6).prop_flat_map(|n| (dist(n), dist(n)))
}

fn unit(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter_map("nonzero", |v| {
        let n = l2_norm(&v);
        (n > 1e-3).then(|| v.iter().map(|x| x / n).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn js_bounds_symmetry_identity((p, q) in dist_pair()) {
        let a = js_div(&p, &q);
        prop_assert!((-1e-9..=LN_2 + 1e-9).contains(&a), "js = {a}");
        prop_assert_eq!(a, js_div(&q, &p));
        prop_assert!(js_div(&p, &p).abs() <= 1e-9);
        let gap = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if gap > 1e-3 {
            prop_assert!(a > 1e-9, "distinct distributions with js = {a}");
        }
    }

    #[test]
    fn kl_nonnegative((p, q) in dist_pair()) {
        prop_assert!(kl_div(&p, &q) >= -1e-9);
        prop_assert!(kl_div(&p, &p).abs() <= 1e-9);
    }

    #[test]
    fn info_nce_empty_bank_is_zero(q in unit(6), k in unit(6), tau in 0.05f64..5.0) {
        prop_assert!(info_nce(&q, &k, &[], tau).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn info_nce_decreases_with_positive_similarity(
        q in unit(5),
        u in unit(5),
        negs in prop::collection::vec(unit(5), 1..8),
        s1 in -0.99f64..0.99,
        ds in 0.001f64..0.5,
        tau in 0.1f64..3.0,
    ) {
        // direction orthogonal to q
        let proj: f64 = q.iter().zip(&u).map(|(a, b)| a * b).sum();
        let mut w: Vec<f64> = u.iter().zip(&q).map(|(a, b)| a - proj * b).collect();
        let n = l2_norm(&w);
        prop_assume!(n > 1e-3);
        w.iter_mut().for_each(|x| *x /= n);
        let s2 = (s1 + ds).min(0.999);
        prop_assume!(s2 > s1);
        let key = |s: f64| -> Vec<f64> {
            q.iter().zip(&w).map(|(a, b)| s * a + (1.0 - s * s).sqrt() * b).collect()
        };
        let flat: Vec<f64> = negs.concat();
        let l1 = info_nce(&q, &key(s1), &flat, tau).unwrap();
        let l2 = info_nce(&q, &key(s2), &flat, tau).unwrap();
        prop_assert!(l2 < l1, "{l1} -> {l2}");
    }

    #[test]
    fn breakdown_recomposes(
        parts in prop::array::uniform5(0.0f64..10.0),
        alpha in 0.0f64..1.0,
        beta in 0.0f64..3.0,
        lambda in 0.0f64..0.03,
    ) {
        let b = total_objective(
            LossParts {
                ce: parts[0],
                adv_ce: parts[1],
                consistency: parts[2],
                contrast_self: parts[3],
                contrast_aug: parts[4],
            },
            LossWeights { alpha, beta, lambda },
        );
        let recomposed = b.ce + alpha * b.adv_ce + beta * b.consistency + lambda * (b.contrast_self + b.contrast_aug);
        prop_assert!((b.total - recomposed).abs() <= 1e-9);
    }

    #[test]
    fn adversarial_step_lands_on_sphere(
        len in 1usize..10,
        d in 1usize..8,
        seed_vals in prop::collection::vec(-3.0f64..3.0, 80),
        grad_vals in prop::collection::vec(-2.0f64..2.0, 80),
        mask_bits in prop::collection::vec(any::<bool>(), 10),
        eps in 0.01f64..5.0,
    ) {
        let mut mask: Vec<f64> = mask_bits[..len].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        mask[0] = 1.0;
        let n = len * d;
        let e = EmbeddingSlice {
            d_emb: d,
            values: seed_vals[..n].to_vec(),
            mask: mask.clone(),
            sources: vec![Vec::new(); len],
            offset: vec![0.0; n],
        };
        let g = grad_vals[..n].to_vec();
        let active: f64 = (0..len)
            .filter(|&t| mask[t] != 0.0)
            .flat_map(|t| g[t * d..(t + 1) * d].iter().map(|x| x * x))
            .sum();
        prop_assume!(active.sqrt() > 1e-6);
        let out = adversarial_perturb(&e, &g, eps).unwrap();
        let diff: Vec<f64> = out.values.iter().zip(&e.values).map(|(a, b)| a - b).collect();
        prop_assert!((l2_norm(&diff) - eps).abs() <= 1e-9);
        for t in 0..len {
            if mask[t] == 0.0 {
                prop_assert!(diff[t * d..(t + 1) * d].iter().all(|&x| x == 0.0));
            }
        }
        let zero = adversarial_perturb(&e, &vec![0.0; n], eps).unwrap();
        prop_assert_eq!(zero.values, e.values);
    }

    #[test]
    fn fifo_matches_list_suffix(
        capacity in 1usize..12,
        angles in prop::collection::vec(0.0f64..TAU, 0..40),
    ) {
        let mut bank = MemoryBank::new(capacity, 2).unwrap();
        let mut oracle: Vec<Vec<f64>> = Vec::new();
        for a in angles {
            let k = vec![a.cos(), a.sin()];
            bank.push_one(&k).unwrap();
            oracle.push(k);
        }
        let start = oracle.len().saturating_sub(capacity);
        let expected: Vec<f64> = oracle[start..].concat();
        let snap = bank.snapshot();
        prop_assert_eq!(snap.as_flat(), expected.as_slice());
        prop_assert_eq!(bank.len(), oracle.len().min(capacity));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn momentum_gap_is_geometric(
        gamma in 0.0f64..1.0,
        steps in 1u32..120,
        key_vals in prop::collection::vec(-2.0f64..2.0, 4),
        query_vals in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let dims = ModelDims { vocab_size: 4, d_emb: 1, d_hid: 1, d_proj: 1, num_classes: 1 };
        let mut key = ModelParams::zeros(dims);
        let mut query = ModelParams::zeros(dims);
        key.embed.data.copy_from_slice(&key_vals);
        query.embed.data.copy_from_slice(&query_vals);
        let mut state = MomentumState::new(&key, gamma).unwrap();
        for _ in 0..steps {
            state.update(&query).unwrap();
        }
        for k in 0..4 {
            let gap0 = query_vals[k] - key_vals[k];
            let gap = query.embed.data[k] - state.key_params.embed.data[k];
            prop_assert!((gap - gamma.powi(steps as i32) * gap0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mmd_matches_brute_force(
        nx in 1usize..50,
        ny in 1usize..50,
        d in 1usize..5,
        vals in prop::collection::vec(-3.0f64..3.0, 500),
        bandwidths in prop::collection::vec(0.1f64..5.0, 1..4),
    ) {
        let x = Matrix::from_vec(nx, d, vals.iter().cycle().take(nx * d).cloned().collect()).unwrap();
        let y = Matrix::from_vec(ny, d, vals.iter().rev().cycle().take(ny * d).map(|v| v * 0.7 + 0.3).collect()).unwrap();
        let spec = KernelSpec::rbf(bandwidths.clone()).unwrap();
        let got = mmd2(&x, &y, &spec).unwrap();

        let k = |a: &[f64], b: &[f64]| -> f64 {
            let mut total = 0.0;
            for s in &bandwidths {
                let mut d2 = 0.0;
                for i in 0..a.len() {
                    d2 += (a[i] - b[i]).powi(2);
                }
                total += (-d2 / (2.0 * s * s)).exp();
            }
            total
        };
        let mut kxx = 0.0;
        for i in 0..nx { for j in 0..nx { kxx += k(x.row(i), x.row(j)); } }
        let mut kyy = 0.0;
        for i in 0..ny { for j in 0..ny { kyy += k(y.row(i), y.row(j)); } }
        let mut kxy = 0.0;
        for i in 0..nx { for j in 0..ny { kxy += k(x.row(i), y.row(j)); } }
        let oracle = kxx / (nx * nx) as f64 + kyy / (ny * ny) as f64 - 2.0 * kxy / (nx * ny) as f64;
        prop_assert!((got - oracle).abs() <= 1e-9, "{got} vs {oracle}");
        prop_assert!(got >= -1e-9);
        prop_assert_eq!(got, mmd2(&y, &x, &spec).unwrap());
        prop_assert!(mmd2(&x, &x, &spec).unwrap().abs() <= 1e-9);

        // kernel-sum additivity
        let parts: f64 = bandwidths
            .iter()
            .map(|&s| mmd2(&x, &y, &KernelSpec::rbf(vec![s]).unwrap()).unwrap())
            .sum();
        prop_assert!((parts - got).abs() <= 1e-9);
    }
}
