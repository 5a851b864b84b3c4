//! Acceptance checks for the metric toolkit. Each check prints one
//! `criterion N: PASS|FAIL` line; the process exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use eedlab_core::actions::make_cyclic_shift_action;
use eedlab_core::io::{synthesize_dataset, SynthKind};
use eedlab_core::{
    build_c4_equivariant_model, build_standard_cnn, channelwise_eed, circular_mask,
    filter_orbit_metric, generic_eed, latent_eed, make_permutation_action,
    make_regular_channel_action, make_rotation_action, make_trivial_action, softmax_eed,
    symmetrize, Carrier, DistanceKind, EedOptions, EvalFunction, FiniteGroup, GroupAction, Layer,
    Result, SignedPermutation, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c4() -> FiniteGroup {
    FiniteGroup::cyclic(4).unwrap()
}

fn masked_inputs(count: usize, seed: u64) -> Result<Vec<Tensor>> {
    let ds = synthesize_dataset(SynthKind::GaussianBlobs, count, 28, 10, seed)?;
    ds.images.iter().map(circular_mask).collect()
}

fn criterion_1() -> Outcome {
    let model = build_c4_equivariant_model(2, 2, 10, 28, 1).map_err(fail)?;
    let data = masked_inputs(20, 11).map_err(fail)?;
    let norm = masked_inputs(40, 12).map_err(fail)?;
    let rot = make_rotation_action(&c4(), Carrier::Spatial).map_err(fail)?;
    let regular = make_regular_channel_action(&c4(), 2).map_err(fail)?;
    let opts = EedOptions::default();
    let mut worst: f64 = f64::NEG_INFINITY;
    for &end in &model.block_ends {
        let prefix = model.prefix(end).map_err(fail)?;
        let r = channelwise_eed(&prefix, &rot, &regular, &data, &opts).map_err(fail)?;
        worst = worst.max(r.mean);
    }
    let latent = latent_eed(
        &model.features(),
        &rot,
        DistanceKind::Euclidean,
        &data,
        &norm,
        true,
        &opts,
    )
    .map_err(fail)?
    .mean;
    check(
        worst <= -0.99999 && latent <= 1e-5,
        format!("worst block channelwise {worst:.8}, latent {latent:.3e}"),
        format!("worst block channelwise {worst:.8} (need <= -0.99999), latent {latent:.3e} (need <= 1e-5)"),
    )
}

const DIM: usize = 16;

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

fn criterion_2() -> Outcome {
    let action = make_cyclic_shift_action(&c4(), DIM).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw: Vec<f64> = (0..DIM * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Shift by four places per group step, averaged over the orbit of the map.
    let mut avg = vec![0.0; DIM * DIM];
    for k in 0..4 {
        let s = 4 * k;
        for i in 0..DIM {
            for j in 0..DIM {
                avg[i * DIM + j] += raw[((i + s) % DIM) * DIM + (j + s) % DIM] / 4.0;
            }
        }
    }
    let data: Vec<Tensor> = (0..50)
        .map(|_| Tensor::from_fn(vec![DIM], |_| rng.gen_range(-1.0..1.0)).unwrap())
        .collect();
    let noise: Vec<f64> = (0..DIM * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let opts = EedOptions::default();
    let eed = |w: Vec<f64>| {
        generic_eed(
            &Linear(w),
            &action,
            &action,
            DistanceKind::Euclidean,
            &data,
            &opts,
        )
    };
    let base = eed(avg.clone()).map_err(fail)?.mean;
    let mut means = Vec::new();
    for delta in [1e-3, 1e-2, 1e-1] {
        let w = avg.iter().zip(&noise).map(|(a, n)| a + delta * n).collect();
        means.push(eed(w).map_err(fail)?.mean);
    }
    let increasing = means.windows(2).all(|w| w[0] < w[1]);
    let above = means.iter().all(|&m| m > 1e-5);
    check(
        base <= 1e-6 && increasing && above,
        format!("averaged {base:.3e}, perturbed {}", fmt(&means)),
        format!(
            "averaged {base:.3e} (need <= 1e-6), perturbed {} (need increasing, > 1e-5)",
            fmt(&means)
        ),
    )
}

fn fmt(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
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

fn unit_circle(count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Tensor::vector(vec![a.cos() as f32, a.sin() as f32]).unwrap()
        })
        .collect()
}

fn f1(v: &Tensor) -> Result<Tensor> {
    Tensor::vector(vec![2.0 * v.data()[0], v.data()[1]])
}

fn criterion_3() -> Outcome {
    let swap = c2_swap();
    let trivial = make_trivial_action(swap.group(), Carrier::Any);
    let data = unit_circle(50, 3);
    let f = |v: &Tensor| Tensor::vector(vec![(v.data()[0] + v.data()[1]) / 2.0]);
    let opts = EedOptions::default();
    let e = generic_eed(&f, &swap, &trivial, DistanceKind::Euclidean, &data, &opts)
        .map_err(fail)?
        .mean;
    let e1 = generic_eed(&f1, &swap, &swap, DistanceKind::Euclidean, &data, &opts)
        .map_err(fail)?
        .mean;
    check(
        e <= 1e-7 && e1 >= 0.1,
        format!("composite {e:.3e}, first factor {e1:.4}"),
        format!("composite {e:.3e} (need <= 1e-7), first factor {e1:.4} (need >= 0.1)"),
    )
}

/// `c * f`, scaled in double precision before rounding to the tensor type.
struct Scaled<'a, F: EvalFunction + ?Sized>(&'a F, f64);

impl<F: EvalFunction + ?Sized> EvalFunction for Scaled<'_, F> {
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.1;
        self.0.eval(x)?.map(|v| (c * v as f64) as f32)
    }
}

fn criterion_4() -> Outcome {
    let swap = c2_swap();
    let rot = make_rotation_action(&c4(), Carrier::Spatial).map_err(fail)?;
    let cnn = build_standard_cnn(&[8, 8], 10, 28, 4).map_err(fail)?;
    let features = cnn.features();
    let data = masked_inputs(20, 41).map_err(fail)?;
    let norm = masked_inputs(40, 42).map_err(fail)?;
    let opts = EedOptions::default();
    let eed = |c: f64| {
        latent_eed(
            &Scaled(&features, c),
            &rot,
            DistanceKind::Euclidean,
            &data,
            &norm,
            true,
            &opts,
        )
        .map(|r| r.mean)
    };
    let reference = eed(1.0).map_err(fail)?;
    let relative = |c: f64| {
        eed(c)
            .map(|e| (e - reference).abs() / reference)
            .map_err(fail)
    };
    let mut worst: f64 = 0.0;
    for c in [0.1, 3.7, 100.0] {
        worst = worst.max(relative(c)?);
    }
    // Power-of-two scales survive 32-bit rounding exactly; this separates
    // the metric from the storage rounding of `c * f`.
    let mut dyadic: f64 = 0.0;
    for c in [0.25, 4.0, 1024.0] {
        dyadic = dyadic.max(relative(c)?);
    }
    let identity = |x: &Tensor| Ok(x.clone());
    let toy_data = vec![Tensor::vector(vec![1.0, 0.0]).unwrap()];
    let toy_norm: Vec<Tensor> = [[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]
        .iter()
        .map(|p| Tensor::vector(p.to_vec()).unwrap())
        .collect();
    let toy = latent_eed(
        &identity,
        &swap,
        DistanceKind::Euclidean,
        &toy_data,
        &toy_norm,
        true,
        &opts,
    )
    .map_err(fail)?
    .mean;
    check(
        worst <= 1e-9 && (toy - 0.4560).abs() <= 1e-3,
        format!("max relative scale change {worst:.3e} (power-of-two scales {dyadic:e}), two-point example {toy:.5}"),
        format!(
            "max relative scale change {worst:.3e} (need <= 1e-9; power-of-two scales {dyadic:e}), two-point example {toy:.5} (need 0.4560 +- 1e-3)"
        ),
    )
}

fn softmax(logits: &[f64]) -> Result<Tensor> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Tensor::vector(e.iter().map(|v| (v / s) as f32).collect())
}

fn criterion_5() -> Outcome {
    let swap = c2_swap();
    let identity = |x: &Tensor| Ok(x.clone());
    let opts = EedOptions::default();
    let two_class = softmax_eed(
        &identity,
        &swap,
        &[Tensor::vector(vec![0.8, 0.2]).unwrap()],
        &opts,
    )
    .map_err(fail)?
    .mean;

    let shift = make_cyclic_shift_action(&c4(), DIM).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..3 * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let classifier = |x: &Tensor| {
        let logits: Vec<f64> = w
            .chunks(DIM)
            .map(|r| r.iter().zip(x.data()).map(|(a, &b)| a * b as f64).sum())
            .collect();
        softmax(&logits)
    };
    let data: Vec<Tensor> = (0..30)
        .map(|_| Tensor::from_fn(vec![DIM], |_| rng.gen_range(-1.0..1.0)).unwrap())
        .collect();
    let sym = symmetrize(&classifier, &shift);
    let plain = softmax_eed(&classifier, &shift, &data, &opts)
        .map_err(fail)?
        .mean;
    let symmetrized = softmax_eed(&sym, &shift, &data, &opts).map_err(fail)?.mean;
    check(
        (two_class - 0.19274).abs() <= 1e-4 && symmetrized <= 1e-6,
        format!("two-class example {two_class:.6} nats, symmetrized {symmetrized:.3e} (unsymmetrized {plain:.3e})"),
        format!("two-class example {two_class:.6} (need 0.19274 +- 1e-4), symmetrized {symmetrized:.3e} (need <= 1e-6)"),
    )
}

fn random_filters(count: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![count, 1, side, side], |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn criterion_6() -> Outcome {
    let group = c4();
    let trials = 100;
    let model = build_c4_equivariant_model(1, 4, 10, 28, 6).map_err(fail)?;
    let orbit = model
        .lifting_filters()
        .ok_or("model has no lifting layer")?
        .map_err(fail)?;
    let exact = filter_orbit_metric(&orbit, &group, trials, 6).map_err(fail)?;
    let random = filter_orbit_metric(&random_filters(16, 7, 6), &group, trials, 6).map_err(fail)?;
    let mut wins = 0;
    for seed in 0..20u64 {
        let m = build_c4_equivariant_model(1, 4, 10, 28, 100 + seed).map_err(fail)?;
        let eq = filter_orbit_metric(
            &m.lifting_filters().unwrap().map_err(fail)?,
            &group,
            trials,
            seed,
        )
        .map_err(fail)?;
        let cnn = build_standard_cnn(&[16], 10, 28, 100 + seed).map_err(fail)?;
        let Layer::Conv2d { weight, .. } = &cnn.layers[0] else {
            return Err("standard model does not start with a convolution".into());
        };
        let plain = filter_orbit_metric(weight, &group, trials, seed).map_err(fail)?;
        if eq < plain {
            wins += 1;
        }
    }
    check(
        exact == 0.0 && random > exact && wins == 20,
        format!("exact orbit {exact}, random 16x7x7 {random:.4}, equivariant smaller in {wins}/20 seeds"),
        format!("exact orbit {exact} (need 0), random {random:.4} (need > exact), equivariant smaller in {wins}/20 seeds"),
    )
}

fn criterion_7() -> Outcome {
    let rot = make_rotation_action(&c4(), Carrier::Spatial).map_err(fail)?;
    let regular = make_regular_channel_action(&c4(), 4).map_err(fail)?;
    let opts = EedOptions::default();
    let mut smallest_gap = f64::INFINITY;
    let mut losses = Vec::new();
    for seed in 0..10u64 {
        let data = masked_inputs(20, 700 + seed).map_err(fail)?;
        let eq = build_c4_equivariant_model(2, 4, 10, 28, seed).map_err(fail)?;
        let cnn = build_standard_cnn(&[8, 8], 10, 28, seed).map_err(fail)?;
        for (block, (&e_end, &c_end)) in eq.block_ends.iter().zip(&cnn.block_ends).enumerate() {
            let e = channelwise_eed(
                &eq.prefix(e_end).map_err(fail)?,
                &rot,
                &regular,
                &data,
                &opts,
            )
            .map_err(fail)?
            .mean;
            let c = channelwise_eed(&cnn.prefix(c_end).map_err(fail)?, &rot, &rot, &data, &opts)
                .map_err(fail)?
                .mean;
            smallest_gap = smallest_gap.min(c - e);
            if c <= e {
                losses.push(format!(
                    "seed {seed} block {block}: cnn {c:.5} vs c4 {e:.5}"
                ));
            }
        }
    }
    check(
        losses.is_empty(),
        format!("standard CNN higher at every block of 10 seeds, smallest gap {smallest_gap:.4}"),
        format!("ordering violated: {}", losses.join("; ")),
    )
}

fn eedlab(args: &[&str], threads: &str) -> std::result::Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_eedlab"))
        .args(args)
        .env("EEDLAB_THREADS", threads)
        .output()
        .map_err(fail)?;
    if !out.status.success() {
        return Err(format!(
            "eedlab {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let root = dir.path();
    let data = root.join("data");
    let norm = root.join("norm");
    let models = root.join("models");
    eedlab(
        &[
            "synthesize",
            "--count",
            "24",
            "--seed",
            "8",
            "--out",
            &path_str(&data),
        ],
        "1",
    )?;
    eedlab(
        &[
            "synthesize",
            "--count",
            "30",
            "--seed",
            "9",
            "--out",
            &path_str(&norm),
        ],
        "1",
    )?;
    eedlab(
        &[
            "model-init",
            "--kind",
            "c4",
            "--seed",
            "8",
            "--name",
            "c4",
            "--out",
            &path_str(&models),
        ],
        "1",
    )?;
    eedlab(
        &[
            "model-init",
            "--kind",
            "standard",
            "--seed",
            "8",
            "--name",
            "cnn",
            "--out",
            &path_str(&models),
        ],
        "1",
    )?;
    let data_m = path_str(&data.join("manifest.json"));
    let norm_m = path_str(&norm.join("manifest.json"));
    let c4_m = path_str(&models.join("c4.json"));
    let cnn_m = path_str(&models.join("cnn.json"));
    let runs: Vec<(&str, Vec<&str>)> = vec![
        (
            "channelwise",
            vec![
                "eed",
                "channelwise",
                "--model",
                &c4_m,
                "--hidden-action",
                "regular:4",
            ],
        ),
        (
            "channelwise-cnn",
            vec!["eed", "channelwise", "--model", &cnn_m, "--layer", "8"],
        ),
        (
            "latent",
            vec![
                "eed",
                "latent",
                "--model",
                &cnn_m,
                "--norm-data",
                &norm_m,
                "--norm-samples",
                "30",
            ],
        ),
        ("softmax", vec!["eed", "softmax", "--model", &cnn_m]),
        (
            "generic",
            vec!["eed", "generic", "--model", &c4_m, "--metric", "neg-cosine"],
        ),
    ];
    let mut differing = Vec::new();
    for (name, base) in &runs {
        let mut outputs: Vec<Vec<u8>> = Vec::new();
        for threads in ["1", "8"] {
            let out: PathBuf = root.join(format!("{name}-{threads}.json"));
            let mut args = base.clone();
            let out_s = path_str(&out);
            args.extend([
                "--data",
                &data_m,
                "--samples",
                "12",
                "--seed",
                "3",
                "--per-pair",
                "--out",
                &out_s,
            ]);
            eedlab(&args, threads)?;
            outputs.push(std::fs::read(&out).map_err(fail)?);
        }
        if outputs[0] != outputs[1] {
            differing.push(*name);
        }
    }
    check(
        differing.is_empty(),
        format!(
            "{} eed runs byte-identical across 1 and 8 threads",
            runs.len()
        ),
        format!(
            "reports differ between thread counts for: {}",
            differing.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        match run() {
            Ok(detail) => println!("criterion {n}: PASS {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
