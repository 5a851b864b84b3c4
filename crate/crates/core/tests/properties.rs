use eedlab_core::actions::{make_cyclic_shift_action, make_sign_action};
use eedlab_core::metrics::normalization_constant;
use eedlab_core::{
    generic_eed, latent_eed, make_permutation_action, make_rotation_action, softmax_eed,
    symmetrize, verify_action_axiom, verify_group_axioms, Carrier, DistanceKind, EedOptions,
    EvalFunction, FiniteGroup, GroupAction, Result, SignedPermutation, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 16;

/// Dense `DIM x DIM` map with 64-bit accumulation.
struct Linear(Vec<f64>);

impl EvalFunction for Linear {
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let y = self
            .0
            .chunks(DIM)
            .map(|row| {
                row.iter()
                    .zip(x.data())
                    .map(|(a, &b)| a * b as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        Tensor::vector(y)
    }
}

fn shift_action() -> GroupAction {
    make_cyclic_shift_action(&FiniteGroup::cyclic(4).unwrap(), DIM).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..DIM * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `(1/|G|) sum_g P_g^-1 A P_g` for the shift-by-4 permutation.
fn group_average(a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; DIM * DIM];
    for k in 0..4 {
        let s = 4 * k;
        for i in 0..DIM {
            for j in 0..DIM {
                out[i * DIM + j] += a[((i + s) % DIM) * DIM + (j + s) % DIM] / 4.0;
            }
        }
    }
    out
}

fn vectors(rng: &mut ChaCha8Rng, n: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| Tensor::from_fn(vec![DIM], |_| rng.gen_range(-1.0..1.0)).unwrap())
        .collect()
}

fn brute_force_equivariant(f: &Linear, action: &GroupAction, data: &[Tensor]) -> bool {
    data.iter().all(|x| {
        action.group().elements().all(|g| {
            let lhs = f.eval(&action.apply(g, x).unwrap()).unwrap();
            let rhs = action.apply(g, &f.eval(x).unwrap()).unwrap();
            lhs.data()
                .iter()
                .zip(rhs.data())
                .all(|(a, b)| (a - b).abs() <= 1e-6)
        })
    })
}

#[test]
fn averaged_linear_map_is_equivariant_and_perturbations_are_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let action = shift_action();
    let data = vectors(&mut rng, 50);
    let raw = random_matrix(&mut rng);
    let avg = Linear(group_average(&raw));
    let basis: Vec<Tensor> = (0..DIM)
        .map(|i| Tensor::from_fn(vec![DIM], |j| (i == j) as u8 as f32).unwrap())
        .collect();
    assert!(brute_force_equivariant(&avg, &action, &basis));
    let opts = EedOptions::default();
    let r = generic_eed(
        &avg,
        &action,
        &action,
        DistanceKind::Euclidean,
        &data,
        &opts,
    )
    .unwrap();
    assert!(r.mean <= 1e-6, "{}", r.mean);

    let unaveraged = Linear(raw);
    assert!(!brute_force_equivariant(&unaveraged, &action, &data));
    let r = generic_eed(
        &unaveraged,
        &action,
        &action,
        DistanceKind::Euclidean,
        &data,
        &opts,
    )
    .unwrap();
    assert!(r.mean > 0.01, "{}", r.mean);

    let noise = random_matrix(&mut rng);
    let mut last = 0.0;
    for delta in [1e-3, 1e-2, 1e-1] {
        let f = Linear(
            avg.0
                .iter()
                .zip(&noise)
                .map(|(a, n)| a + delta * n)
                .collect(),
        );
        assert!(!brute_force_equivariant(&f, &action, &data));
        let m = generic_eed(&f, &action, &action, DistanceKind::Euclidean, &data, &opts)
            .unwrap()
            .mean;
        assert!(m > 1e-5 && m > last, "delta {delta}: {m} after {last}");
        last = m;
    }
}

fn c2_swap() -> GroupAction {
    make_permutation_action(
        &FiniteGroup::cyclic(2).unwrap(),
        vec![
            SignedPermutation::unsigned(vec![0, 1]).unwrap(),
            SignedPermutation::unsigned(vec![1, 0]).unwrap(),
        ],
    )
    .unwrap()
}

#[test]
fn invariant_composite_with_non_equivariant_factor() {
    let swap = c2_swap();
    let trivial = eedlab_core::make_trivial_action(swap.group(), Carrier::Any);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<Tensor> = (0..50)
        .map(|_| {
            let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            Tensor::vector(vec![a.cos(), a.sin()]).unwrap()
        })
        .collect();
    let f = |v: &Tensor| Tensor::vector(vec![(v.data()[0] + v.data()[1]) / 2.0]);
    let f1 = |v: &Tensor| Tensor::vector(vec![2.0 * v.data()[0], v.data()[1]]);
    let f2 = |v: &Tensor| Tensor::vector(vec![(v.data()[0] + 2.0 * v.data()[1]) / 4.0]);
    let opts = EedOptions::default();
    let e = generic_eed(&f, &swap, &trivial, DistanceKind::Euclidean, &data, &opts).unwrap();
    assert!(e.mean <= 1e-7);
    let e1 = generic_eed(&f1, &swap, &swap, DistanceKind::Euclidean, &data, &opts).unwrap();
    assert!(e1.mean >= 0.1, "{}", e1.mean);
    for x in &data {
        let composed = f2(&f1(x).unwrap()).unwrap().data()[0];
        assert!((composed - f(x).unwrap().data()[0]).abs() <= 1e-6);
    }
}

#[test]
fn symmetrized_extractor_makes_the_whole_model_invariant() {
    let action = shift_action();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let features = Linear(random_matrix(&mut rng));
    let head_w: Vec<f64> = (0..3 * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sym = symmetrize(&features, &action);
    let model = |x: &Tensor| {
        let z = sym.eval(x)?;
        let logits: Vec<f64> = head_w
            .chunks(DIM)
            .map(|r| r.iter().zip(z.data()).map(|(a, &b)| a * b as f64).sum())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        Tensor::vector(e.iter().map(|v| (v / s) as f32).collect())
    };
    let data = vectors(&mut rng, 30);
    let r = softmax_eed(&model, &action, &data, &EedOptions::default()).unwrap();
    assert!(r.mean <= 1e-6, "{}", r.mean);
}

#[test]
fn symmetrize_under_interpolated_rotations_leaves_a_small_residual() {
    let c8 = FiniteGroup::cyclic(8).unwrap();
    let rot = make_rotation_action(&c8, Carrier::Spatial).unwrap();
    let data: Vec<Tensor> = (0..4)
        .map(|s| {
            let img = Tensor::from_fn(vec![15, 15], |i| {
                let (y, x) = (
                    (i / 15) as f32 - 7.0,
                    (i % 15) as f32 - 7.0 - s as f32 * 0.5,
                );
                (-(x * x + 2.0 * y * y) / 12.0).exp()
            })
            .unwrap();
            eedlab_core::circular_mask(&img).unwrap()
        })
        .collect();
    let f = |x: &Tensor| {
        let a = x.data()[..100].iter().map(|&v| v as f64).sum::<f64>();
        let b = x.data()[100..].iter().map(|&v| v as f64).sum::<f64>();
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        Tensor::vector(vec![(ea / (ea + eb)) as f32, (eb / (ea + eb)) as f32])
    };
    let sym = symmetrize(&f, &rot);
    let plain = softmax_eed(&f, &rot, &data, &EedOptions::default())
        .unwrap()
        .mean;
    let residual = softmax_eed(&sym, &rot, &data, &EedOptions::default())
        .unwrap()
        .mean;
    assert!(residual > 0.0 && residual < plain, "{residual} vs {plain}");
}

/// A wide random feature map, the setting the scaling check is meant for.
struct Features {
    w: Vec<f64>,
    scale: f64,
}

impl EvalFunction for Features {
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let out = self
            .w
            .chunks(DIM)
            .map(|r| {
                (self.scale
                    * r.iter()
                        .zip(x.data())
                        .map(|(a, &b)| a * b as f64)
                        .sum::<f64>()
                        .tanh()) as f32
            })
            .collect();
        Tensor::vector(out)
    }
}

#[test]
fn normalized_latent_eed_ignores_global_scale() {
    let action = shift_action();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let w: Vec<f64> = (0..64 * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let data = vectors(&mut rng, 20);
    let norm = vectors(&mut rng, 40);
    let opts = EedOptions::default();
    let base = Features {
        w: w.clone(),
        scale: 1.0,
    };
    let reference = latent_eed(
        &base,
        &action,
        DistanceKind::Euclidean,
        &data,
        &norm,
        true,
        &opts,
    )
    .unwrap();
    assert!(reference.mean > 0.0);
    // Power-of-two scales are exact in 32-bit storage, so the match is exact.
    for c in [0.125, 4.0, 1024.0] {
        let scaled = Features {
            w: w.clone(),
            scale: c,
        };
        let r = latent_eed(
            &scaled,
            &action,
            DistanceKind::Euclidean,
            &data,
            &norm,
            true,
            &opts,
        )
        .unwrap();
        assert_eq!(r.mean, reference.mean, "c = {c}");
        assert_eq!(
            r.unnormalized_mean.unwrap(),
            c * reference.unnormalized_mean.unwrap()
        );
    }
}

#[test]
fn normalization_constant_for_cosine_is_mean_similarity() {
    let pts = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let feats: Vec<Tensor> = pts
        .iter()
        .map(|p| Tensor::vector(p.clone()).unwrap())
        .collect();
    let m = normalization_constant(DistanceKind::NegCosine, &feats).unwrap();
    let expected = (0.0 + 2.0 * 0.5f64.sqrt()) / 3.0;
    assert!((m - expected).abs() < 1e-7);
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let action = shift_action();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Linear(random_matrix(&mut rng));
    let data = vectors(&mut rng, 40);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let r = generic_eed(
                    &f,
                    &action,
                    &action,
                    DistanceKind::Euclidean,
                    &data,
                    &EedOptions::default(),
                )
                .unwrap();
                serde_json::to_string(&r).unwrap()
            })
    };
    assert_eq!(run(1), run(8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cyclic_and_dihedral_groups_satisfy_axioms(n in 1usize..13) {
        prop_assert!(verify_group_axioms(&FiniteGroup::cyclic(n).unwrap()));
        prop_assert!(verify_group_axioms(&FiniteGroup::dihedral(n).unwrap()));
    }

    #[test]
    fn exact_rotation_actions_compose(seed in any::<u64>(), side in 1usize..9) {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rot = make_rotation_action(&c4, Carrier::Spatial).unwrap();
        let r = verify_action_axiom(&rot, &[side, side], 2, seed).unwrap();
        prop_assert!(r.holds);
        prop_assert_eq!(r.max_deviation, 0.0);
    }

    #[test]
    fn dihedral_actions_compose(seed in any::<u64>(), n in prop::sample::select(vec![1usize, 2, 4])) {
        let d = FiniteGroup::dihedral(n).unwrap();
        let act = eedlab_core::make_dihedral_action(&d).unwrap();
        let r = verify_action_axiom(&act, &[5, 5], 2, seed).unwrap();
        prop_assert!(r.holds);
    }

    #[test]
    fn equivariant_maps_score_zero_and_perturbed_maps_do_not(seed in any::<u64>()) {
        let action = shift_action();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let avg = group_average(&random_matrix(&mut rng));
        let data = vectors(&mut rng, 8);
        let opts = EedOptions::default();
        let f = Linear(avg.clone());
        let e = generic_eed(&f, &action, &action, DistanceKind::Euclidean, &data, &opts).unwrap();
        prop_assert!(e.mean <= 1e-6);
        let noise = random_matrix(&mut rng);
        let g = Linear(avg.iter().zip(&noise).map(|(a, n)| a + 0.1 * n).collect());
        let e = generic_eed(&g, &action, &action, DistanceKind::Euclidean, &data, &opts).unwrap();
        prop_assert!(e.mean > 1e-5);
    }

    #[test]
    fn report_mean_lies_inside_its_interval(seed in any::<u64>(), n in 1usize..12) {
        let c2 = FiniteGroup::cyclic(2).unwrap();
        let sign = make_sign_action(&c2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_fn(vec![3], |_| rng.gen_range(-1.0..1.0)).unwrap())
            .collect();
        let square = |x: &Tensor| x.map(|v| v * v);
        let r = generic_eed(&square, &sign, &sign, DistanceKind::Euclidean, &data, &EedOptions { seed, ..EedOptions::default() }).unwrap();
        prop_assert!(r.ci_low <= r.mean && r.mean <= r.ci_high);
        let direct = r.per_pair.iter().map(|p| p.value).sum::<f64>() / r.per_pair.len() as f64;
        prop_assert_eq!(r.mean, direct);
        prop_assert!(r.per_pair.iter().all(|p| p.element_idx < 2));
    }
}
