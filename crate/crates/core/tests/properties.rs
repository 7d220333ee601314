use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use weakinv_core::metrics::{fvae_score, irs, mig, sap, CodeFactorTable};
use weakinv_core::swap::{
    curriculum_step, pairwise_divergence, select_keep_set, swap_latents, CurriculumConfig, CurriculumState,
    DivergenceConfig, DivergenceForm, SwapPlan,
};
use weakinv_core::vae::{GaussianCode, LatentPartition};

fn partition() -> impl Strategy<Value = LatentPartition> {
    (1usize..4, 1usize..4, 1usize..5).prop_map(|(p, k, u)| LatentPartition::new(p, k, u).unwrap())
}

fn code(partition: LatentPartition) -> impl Strategy<Value = GaussianCode> {
    let d = partition.d_z();
    (prop::collection::vec(-5.0..5.0f64, d), prop::collection::vec(-4.0..4.0f64, d))
        .prop_map(move |(mu, lv)| GaussianCode::new(mu, lv, partition).unwrap())
}

fn pair() -> impl Strategy<Value = (GaussianCode, GaussianCode)> {
    partition().prop_flat_map(|p| (code(p), code(p)))
}

fn divergence_cfg() -> impl Strategy<Value = DivergenceConfig> {
    (any::<bool>(), any::<bool>()).prop_map(|(printed, symmetric)| DivergenceConfig {
        form: if printed { DivergenceForm::Printed } else { DivergenceForm::Standard },
        symmetric,
    })
}

proptest! {
    #[test]
    fn divergence_is_nonnegative_and_zero_on_self((l, m) in pair(), cfg in divergence_cfg()) {
        for v in pairwise_divergence(&l, &m, cfg).unwrap() {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
        for v in pairwise_divergence(&l, &l, cfg).unwrap() {
            prop_assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn keep_set_has_k_dims_and_dominates((l, m) in pair(), k_frac in 0.0..1.0f64, cfg in divergence_cfg()) {
        let p = l.partition;
        let k = (k_frac * (p.dim_n() + 1) as f64) as usize;
        let div = pairwise_divergence(&l, &m, cfg).unwrap();
        let div_n = &div[p.n_range()];
        let plan = select_keep_set(div_n, k.min(p.dim_n()), None, &p).unwrap();
        prop_assert_eq!(plan.keep_set.len(), k.min(p.dim_n()));
        prop_assert_eq!(plan.keep_set.len() + plan.swap_set.len(), p.dim_n());
        for &a in &plan.keep_set {
            for &b in &plan.swap_set {
                prop_assert!(div_n[a] >= div_n[b]);
            }
        }
    }

    #[test]
    fn swap_is_an_involution_and_conserves((l, m) in pair(), k_frac in 0.0..1.0f64) {
        let p = l.partition;
        let k = ((k_frac * p.dim_n() as f64) as usize).min(p.dim_n());
        let div = pairwise_divergence(&l, &m, DivergenceConfig::default()).unwrap();
        let plan = select_keep_set(&div[p.n_range()], k, None, &p).unwrap();
        let (hl, hm) = swap_latents(&l, &m, &plan).unwrap();
        let (bl, bm) = swap_latents(&hl, &hm, &plan).unwrap();
        prop_assert_eq!(&bl, &l);
        prop_assert_eq!(&bm, &m);
        for d in 0..p.d_z() {
            let mut before = [l.mu[d].to_bits(), m.mu[d].to_bits()];
            let mut after = [hl.mu[d].to_bits(), hm.mu[d].to_bits()];
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
        }
        for &j in &plan.keep_set {
            let d = p.dim_p + j;
            prop_assert_eq!(hl.mu[d].to_bits(), l.mu[d].to_bits());
            prop_assert_eq!(hl.log_var[d].to_bits(), l.log_var[d].to_bits());
        }
    }

    #[test]
    fn full_swap_exchanges_codes((l, m) in pair()) {
        let plan = SwapPlan::full(&l.partition);
        let (hl, hm) = swap_latents(&l, &m, &plan).unwrap();
        prop_assert_eq!(&hl, &m);
        prop_assert_eq!(&hm, &l);
    }

    #[test]
    fn curriculum_is_monotone_and_bounded(
        dim_n in 1usize..12,
        k_frac in 0.0..1.0f64,
        ramp_steps in 1usize..50,
        amount in any::<bool>(),
        difficulty in any::<bool>(),
    ) {
        let k_max = 1 + ((k_frac * dim_n as f64) as usize).min(dim_n - 1);
        let cfg = CurriculumConfig { amount, difficulty, ramp_steps, k_max };
        let mut state = CurriculumState::new(cfg, dim_n).unwrap();
        let mut prev = curriculum_step(&state);
        for _ in 0..ramp_steps + 5 {
            state.advance();
            let cur = curriculum_step(&state);
            prop_assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
            prop_assert!(cur.1 >= 1 && cur.1 <= k_max);
            prev = cur;
        }
        let end_swap = if amount { dim_n - k_max } else { dim_n };
        prop_assert_eq!(prev, (end_swap, k_max));
    }
}

fn random_table(n: usize, d: usize, cards: &[usize], seed: u64) -> (Array2<f64>, Array2<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = Array2::from_shape_fn((n, cards.len()), |(_, f)| rng.random_range(0..cards[f]));
    let codes = Array2::from_shape_fn((n, d), |(i, j)| {
        let f = j % cards.len();
        factors[[i, f]] as f64 * (j as f64 * 0.3) + rng.sample::<f64, _>(StandardNormal)
    });
    (codes, factors)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_are_bounded_and_permutation_invariant(seed in 0u64..1000, d in 2usize..6, perm_seed in 0u64..1000) {
        let (codes, factors) = random_table(300, d, &[3, 2, 4], seed);
        let mut order: Vec<usize> = (0..d).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted = Array2::from_shape_fn(codes.dim(), |(i, j)| codes[[i, order[j]]]);
        let a = CodeFactorTable::new(codes, factors.clone()).unwrap();
        let b = CodeFactorTable::new(permuted, factors).unwrap();
        let pairs = [
            (mig(&a, 20).unwrap().score, mig(&b, 20).unwrap().score),
            (sap(&a, 1).unwrap().score, sap(&b, 1).unwrap().score),
            (irs(&a).unwrap().score, irs(&b).unwrap().score),
            (fvae_score(&a, 100, 16, 2).unwrap().score, fvae_score(&b, 100, 16, 2).unwrap().score),
        ];
        for (x, y) in pairs {
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
        }
    }
}

/// Planted differing dims with |Δμ| ≥ 3 and unit variances are always kept.
#[test]
fn detection_recovers_planted_dims() {
    let p = LatentPartition::new(4, 3, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let k = rng.random_range(1..=3);
        let mut dims: Vec<usize> = (0..p.dim_n()).collect();
        use rand::seq::SliceRandom;
        dims.shuffle(&mut rng);
        let planted = &dims[..k];
        let mu_l: Vec<f64> = (0..p.d_z()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mu_m = mu_l.clone();
        for &j in planted {
            let delta = rng.random_range(3.0..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            mu_m[p.dim_p + j] += delta;
        }
        for j in p.n_range() {
            if !planted.contains(&(j - p.dim_p)) {
                mu_m[j] += rng.random_range(-0.5..0.5);
            }
        }
        let zeros = vec![0.0; p.d_z()];
        let l = GaussianCode::new(mu_l, zeros.clone(), p).unwrap();
        let m = GaussianCode::new(mu_m, zeros, p).unwrap();
        let div = pairwise_divergence(&l, &m, DivergenceConfig::default()).unwrap();
        let plan = select_keep_set(&div[p.n_range()], k, None, &p).unwrap();
        for j in planted {
            assert!(plan.keep_set.contains(j));
        }
    }
}
