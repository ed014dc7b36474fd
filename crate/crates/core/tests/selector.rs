use ifam_core::numcore::{Graph, Rng, Tensor, Var};
use ifam_core::selector::{assign_parts, discretize, hard_map, shaping_losses, stage1_classify, LossWeights};
use proptest::prelude::*;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn assignment_matches_direct_softmax() {
    let mut rng = Rng::new(3);
    let (n, k, d, tau) = (4, 2, 5, 0.3);
    let f = rng.normal_tensor(&[n, d], 1.0);
    let p = rng.normal_tensor(&[k + 1, d], 1.0);
    let g = Graph::new();
    let a = assign_parts(g.constant(f.clone()), g.constant(p.clone()), g.constant(Tensor::scalar(tau)), None).unwrap();
    let soft = a.soft.value();
    for i in 0..n {
        let logits: Vec<f64> = (0..=k).map(|j| cosine(f.row(i), p.row(j)) / tau).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..=k {
            assert!((soft.at(j, i) - logits[j].exp() / z).abs() < 1e-12);
        }
    }
    assert_eq!(a.hard, hard_map(&soft));
}

#[test]
fn gumbel_assignment_reproducible() {
    let mut rng = Rng::new(1);
    let f = rng.normal_tensor(&[6, 4], 1.0);
    let p = rng.normal_tensor(&[3, 4], 1.0);
    let run = |seed| {
        let g = Graph::new();
        let mut noise = Rng::new(seed);
        let a = assign_parts(g.constant(f.clone()), g.constant(p.clone()), g.constant(Tensor::scalar(0.1)), Some(&mut noise)).unwrap();
        assert!(a.gumbel);
        a.soft_values()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn stage1_logits_match_pooled_linear_oracle() {
    let mut rng = Rng::new(8);
    let (n, k, d, c) = (6, 3, 4, 3);
    let f = rng.normal_tensor(&[n, d], 1.0);
    let protos = rng.normal_tensor(&[k + 1, d], 1.0);
    let modulation = rng.normal_tensor(&[k, d], 1.0);
    let w = rng.normal_tensor(&[d, c], 1.0);
    let b = rng.normal_tensor(&[c], 1.0);
    let kept = [1, 3];
    let g = Graph::new();
    let fv = g.constant(f.clone());
    let a = assign_parts(fv, g.constant(protos), g.constant(Tensor::scalar(0.5)), None).unwrap();
    let soft = a.soft_values();
    let logits = stage1_classify(&g, &a, fv, g.constant(modulation.clone()), g.constant(w.clone()), g.constant(b.clone()), &kept).unwrap();

    let mut summary = vec![0.0; d];
    for &part in &kept {
        let mass: f64 = (0..n).map(|i| soft.at(part, i)).sum();
        for j in 0..d {
            let z: f64 = (0..n).map(|i| soft.at(part, i) * f.at(i, j)).sum::<f64>() / mass;
            summary[j] += z * modulation.at(part - 1, j) / kept.len() as f64;
        }
    }
    for o in 0..c {
        let expect: f64 = (0..d).map(|j| summary[j] * w.at(j, o)).sum::<f64>() + b.data()[o];
        assert!((logits.value().data()[o] - expect).abs() < 1e-9);
    }
}

/// Shaping losses for features and prototypes, with parts relabelled by `perm` (a
/// permutation of `1..=K`; background stays first).
fn shaping_with_perm(f: &Tensor, p: &Tensor, perm: &[usize], weights: &LossWeights, grid: (usize, usize)) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let k = perm.len();
    let mut rows = vec![0];
    rows.extend(perm);
    let d = p.cols();
    let permuted = Tensor::from_fn(&[k + 1, d], |i| p.at(rows[i / d], i % d));
    let g = Graph::new();
    let a = assign_parts(g.constant(f.clone()), g.constant(permuted.clone()), g.constant(Tensor::scalar(0.4)), None).unwrap();
    let s = shaping_losses(&g, &a, g.constant(permuted), weights, grid).unwrap();
    let named: Vec<f64> = s.named().iter().map(|(_, v)| *v).collect();
    (
        named,
        s.presence_per_part.value().data().to_vec(),
        s.concentration_per_part.value().data().to_vec(),
        s.weighted.item(),
    )
}

#[test]
fn shaping_is_permutation_equivariant() {
    let mut rng = Rng::new(13);
    let weights = LossWeights::default();
    for _ in 0..20 {
        let f = rng.normal_tensor(&[16, 6], 1.0);
        let p = rng.normal_tensor(&[5, 6], 1.0);
        let mut perm: Vec<usize> = (1..=4).collect();
        rng.shuffle(&mut perm);
        let (base, pres, conc, total) = shaping_with_perm(&f, &p, &[1, 2, 3, 4], &weights, (4, 4));
        let (named, pres_p, conc_p, total_p) = shaping_with_perm(&f, &p, &perm, &weights, (4, 4));
        for (a, b) in base.iter().zip(&named) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((total - total_p).abs() < 1e-12);
        for (slot, &orig) in perm.iter().enumerate() {
            assert!((pres_p[slot] - pres[orig - 1]).abs() < 1e-12);
            assert!((conc_p[slot] - conc[orig - 1]).abs() < 1e-12);
        }
    }
}

fn shaping_gradient(f: &Tensor, p: &Tensor, weights: &LossWeights, with_prior_term: bool) -> Vec<f64> {
    let g = Graph::new();
    let fv = g.param(f.clone());
    let pv = g.param(p.clone());
    let a = assign_parts(fv, pv, g.constant(Tensor::scalar(0.4)), None).unwrap();
    let s = shaping_losses(&g, &a, pv, weights, (3, 3)).unwrap();
    let loss: Var<'_> = if with_prior_term {
        s.weighted
    } else {
        // Reference graph built only from the other terms.
        [s.total_variation, s.presence, s.concentration, s.orthogonality, s.entropy]
            .into_iter()
            .fold(g.constant(Tensor::scalar(0.0)), |acc, t| acc.add(t).unwrap())
    };
    let grads = g.backward(loss).unwrap();
    let mut out = grads.wrt(fv).unwrap().data().to_vec();
    out.extend(grads.wrt(pv).unwrap().data());
    out
}

#[test]
fn zero_prior_weight_removes_its_gradient() {
    let mut rng = Rng::new(4);
    let mut weights = LossWeights::default();
    weights.background_prior = 0.0;
    for _ in 0..10 {
        let f = rng.normal_tensor(&[9, 4], 1.0);
        let p = rng.normal_tensor(&[3, 4], 1.0);
        let with_zero = shaping_gradient(&f, &p, &weights, true);
        let reference = shaping_gradient(&f, &p, &weights, false);
        for (a, b) in with_zero.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let on = shaping_gradient(&f, &p, &LossWeights::default(), true);
        assert!(on.iter().zip(&reference).any(|(a, b)| a != b));
    }
}

#[test]
fn orthogonal_prototypes_have_zero_orthogonality() {
    let g = Graph::new();
    let p = Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
    let f = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).cos());
    let a = assign_parts(g.constant(f), g.constant(p.clone()), g.constant(Tensor::scalar(0.2)), None).unwrap();
    let s = shaping_losses(&g, &a, g.constant(p), &LossWeights::default(), (2, 2)).unwrap();
    assert!(s.orthogonality.item().abs() < 1e-15);
}

proptest! {
    #[test]
    fn columns_are_distributions(
        seed in any::<u64>(),
        n in 1usize..10,
        k in 1usize..5,
        tau in 0.01f64..10.0,
        gumbel in any::<bool>(),
    ) {
        let mut rng = Rng::new(seed);
        let f = rng.normal_tensor(&[n, 4], 1.0);
        let p = rng.normal_tensor(&[k + 1, 4], 1.0);
        let g = Graph::new();
        let mut noise = Rng::new(seed ^ 1);
        let a = assign_parts(
            g.constant(f),
            g.constant(p),
            g.constant(Tensor::scalar(tau)),
            gumbel.then_some(&mut noise),
        ).unwrap();
        let soft = a.soft_values();
        for i in 0..n {
            let col: f64 = (0..=k).map(|j| soft.at(j, i)).sum();
            prop_assert!((col - 1.0).abs() < 1e-6);
            for j in 0..=k {
                prop_assert!((0.0..=1.0).contains(&soft.at(j, i)));
            }
        }
        prop_assert_eq!(&a.hard, &hard_map(&soft));

        let kept: Vec<usize> = (1..=k).filter(|x| x % 2 == 1).collect();
        let m = discretize(&a, &kept).unwrap();
        let out = m.output.value();
        prop_assert!(out.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        let p_fg = m.p_fg.value();
        for i in 0..n {
            let expect: f64 = kept.iter().map(|&j| soft.at(j, i)).sum();
            prop_assert!((p_fg.data()[i] - expect).abs() < 1e-12);
            if !m.fallback {
                prop_assert_eq!(m.mask.0[i], kept.contains(&a.hard[i]));
            }
        }
        prop_assert!(m.mask.live_count() >= 1);
    }
}
