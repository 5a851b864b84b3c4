//! Empirical equivariance deviation (EED) metrics.
//!
//! Every metric walks the same grid: for each sample `x` and every group
//! element `g` it compares `f(gx)` against `g` applied to the orbit average
//! `f^(x)`, the mean of `f(hx)` over the kernel of the output action. The
//! orbit `f(gx)` for all `g` is evaluated once per sample and reused for
//! both the orbit average and the comparisons.
//!
//! Samples are processed in parallel, but per-pair values are always
//! collected in (sample, element) order and reduced sequentially, so reports
//! do not depend on the worker count.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{is_quarter_turn, rotate_plane, GroupAction, ROTATION_CONVENTION};
use crate::error::{Error, Result};
use crate::groups::{kernel_of, FiniteGroup, GroupElement, GroupKind, Subgroup};
use crate::tensor::{
    check_distribution, cosine_similarity, distance_f64, widen, DistanceKind, Tensor, NORM_FLOOR,
};

/// Default number of evaluation samples drawn from a dataset.
pub const DEFAULT_SAMPLES: usize = 50;
/// Default number of points used for the latent normalization constant.
pub const DEFAULT_NORM_SAMPLES: usize = 200;

/// A deterministic tensor-valued function with fixed input and output shapes.
pub trait EvalFunction: Sync {
    fn eval(&self, x: &Tensor) -> Result<Tensor>;
}

impl<F> EvalFunction for F
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// Anything that can produce the orbit `f(g x_s)` of a sample under every
/// group element, in canonical element order.
pub trait OrbitSource: Sync {
    fn group(&self) -> &FiniteGroup;
    fn sample_count(&self) -> usize;
    fn orbit(&self, sample: usize) -> Result<Vec<Tensor>>;
}

/// Orbits computed by transforming inputs and running a function.
pub struct FunctionOrbits<'a, F: EvalFunction + ?Sized> {
    pub f: &'a F,
    pub action: &'a GroupAction,
    pub data: &'a [Tensor],
}

impl<F: EvalFunction + ?Sized> OrbitSource for FunctionOrbits<'_, F> {
    fn group(&self) -> &FiniteGroup {
        self.action.group()
    }

    fn sample_count(&self) -> usize {
        self.data.len()
    }

    fn orbit(&self, sample: usize) -> Result<Vec<Tensor>> {
        let x = &self.data[sample];
        self.action
            .group()
            .elements()
            .map(|g| {
                let gx = self
                    .action
                    .apply(g, x)
                    .map_err(|e| e.at_pair(sample, g.0))?;
                self.f.eval(&gx).map_err(|e| e.at_pair(sample, g.0))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Generic,
    Channelwise,
    Latent,
    Softmax,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Generic => "generic",
            MetricKind::Channelwise => "channelwise",
            MetricKind::Latent => "latent",
            MetricKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub sample_idx: usize,
    pub element_idx: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EedReport {
    pub metric_kind: MetricKind,
    pub distance: DistanceKind,
    pub group_name: String,
    pub input_action: String,
    pub output_action: String,
    pub sample_count: usize,
    pub pair_count: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub bootstrap_resamples: usize,
    /// Latent metric only: the mean pairwise feature distance (or cosine
    /// similarity) the per-pair values were divided by.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalization_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalized_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unnormalized_mean: Option<f64>,
    /// Channelwise metric: `(sample, element, channel)` terms skipped because
    /// a channel had (near) zero norm.
    pub degenerate_terms: usize,
    pub units: String,
    pub rotation_convention: String,
    pub config_echo: BTreeMap<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_pair: Vec<PairValue>,
}

impl EedReport {
    /// Per-pair values averaged per sample, in sample order.
    pub fn sample_means(&self) -> Vec<f64> {
        sample_means(&self.per_pair)
    }
}

/// Bootstrap settings shared by every metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EedOptions {
    pub ci_level: f64,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EedOptions {
    fn default() -> Self {
        Self {
            ci_level: 0.95,
            bootstrap_resamples: 1000,
            seed: 0,
        }
    }
}

/// Sorted indices of `count` distinct samples out of `total`, seeded.
/// Returns every index when `count >= total`.
pub fn select_samples(total: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= total {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, total, count).into_vec();
    picked.sort_unstable();
    picked
}

fn mean_f64(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn sample_means(per_pair: &[PairValue]) -> Vec<f64> {
    let mut grouped: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in per_pair {
        let e = grouped.entry(p.sample_idx).or_insert((0.0, 0));
        e.0 += p.value;
        e.1 += 1;
    }
    grouped.values().map(|&(s, n)| s / n as f64).collect()
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one value"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level {level} must lie in (0, 1)"
        )));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Ok((first, first));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    let hi = (((1.0 - alpha) * resamples as f64).ceil() as usize)
        .saturating_sub(1)
        .clamp(lo, resamples - 1);
    Ok((means[lo], means[hi]))
}

/// Runs `per_sample` over every sample in parallel and returns the per-pair
/// table in (sample, element) order plus the number of degenerate terms.
fn evaluate_grid<S, P>(source: &S, per_sample: P) -> Result<(Vec<PairValue>, usize)>
where
    S: OrbitSource + ?Sized,
    P: Fn(usize, &[Tensor]) -> Result<(Vec<PairValue>, usize)> + Sync,
{
    let results: Vec<Result<(Vec<PairValue>, usize)>> = (0..source.sample_count())
        .into_par_iter()
        .map(|s| {
            let orbit = source.orbit(s)?;
            if orbit.len() != source.group().order() {
                return Err(Error::invalid(format!(
                    "sample {s}: orbit has {} entries for a group of order {}",
                    orbit.len(),
                    source.group().order()
                )));
            }
            per_sample(s, &orbit)
        })
        .collect();
    let mut table = Vec::new();
    let mut degenerate = 0;
    for r in results {
        let (pairs, d) = r?;
        table.extend(pairs);
        degenerate += d;
    }
    Ok((table, degenerate))
}

struct ReportParts<'a> {
    kind: MetricKind,
    distance: DistanceKind,
    group: &'a FiniteGroup,
    input_action: String,
    output_action: String,
    sample_count: usize,
    per_pair: Vec<PairValue>,
    degenerate_terms: usize,
    units: &'a str,
}

fn finish_report(parts: ReportParts<'_>, opts: &EedOptions) -> Result<EedReport> {
    if parts.per_pair.is_empty() {
        return Err(Error::DegenerateInput(
            "no (sample, element) pair produced a usable value".into(),
        ));
    }
    let mean = mean_f64(parts.per_pair.iter().map(|p| p.value));
    let (lo, hi) = bootstrap_ci(
        &sample_means(&parts.per_pair),
        opts.ci_level,
        opts.bootstrap_resamples,
        opts.seed,
    )?;
    Ok(EedReport {
        metric_kind: parts.kind,
        distance: parts.distance,
        group_name: parts.group.name(),
        input_action: parts.input_action,
        output_action: parts.output_action,
        sample_count: parts.sample_count,
        pair_count: parts.per_pair.len(),
        mean,
        ci_low: lo.min(mean),
        ci_high: hi.max(mean),
        ci_level: opts.ci_level,
        bootstrap_resamples: opts.bootstrap_resamples,
        normalization_m: None,
        normalized_mean: None,
        unnormalized_mean: None,
        degenerate_terms: parts.degenerate_terms,
        units: parts.units.to_string(),
        rotation_convention: ROTATION_CONVENTION.to_string(),
        config_echo: BTreeMap::new(),
        per_pair: parts.per_pair,
    })
}

/// Mean of the orbit entries indexed by `members`, accumulated in `f64`.
fn centroid(orbit: &[Tensor], members: impl Iterator<Item = GroupElement>) -> Vec<f64> {
    let mut acc = vec![0.0f64; orbit[0].len()];
    let mut count = 0usize;
    for g in members {
        for (a, &v) in acc.iter_mut().zip(orbit[g.0].data()) {
            *a += v as f64;
        }
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

fn narrow(dims: &[usize], v: &[f64]) -> Result<Tensor> {
    Tensor::new(dims.to_vec(), v.iter().map(|&x| x as f32).collect())
}

/// `E_{g in kernel} f(gx)`; equals `f(x)` bit-exactly for a trivial kernel.
pub fn orbit_average<F: EvalFunction + ?Sized>(
    f: &F,
    x: &Tensor,
    action_x: &GroupAction,
    kernel: &Subgroup,
) -> Result<Tensor> {
    if kernel.parent() != action_x.group() {
        return Err(Error::invalid(
            "kernel is not a subgroup of the input action's group",
        ));
    }
    if kernel.is_trivial() {
        return f.eval(x);
    }
    let images: Vec<(GroupElement, Tensor)> = kernel
        .members()
        .map(|g| Ok((g, f.eval(&action_x.apply(g, x)?)?)))
        .collect::<Result<_>>()?;
    let dims = images[0].1.dims().to_vec();
    let mut acc = vec![0.0f64; images[0].1.len()];
    for (_, img) in &images {
        if img.dims() != dims.as_slice() {
            return Err(Error::invalid(
                "function output shape varies across the orbit",
            ));
        }
        for (a, &v) in acc.iter_mut().zip(img.data()) {
            *a += v as f64;
        }
    }
    let n = images.len() as f64;
    narrow(&dims, &acc.iter().map(|a| a / n).collect::<Vec<_>>())
}

/// Caches the output-action kernel, probed once on the first output shape.
fn output_kernel(action_y: &GroupAction, dims: &[usize]) -> Result<Subgroup> {
    kernel_of(action_y, dims)
}

fn check_same_group(a: &GroupAction, b: &GroupAction) -> Result<()> {
    if a.group() != b.group() {
        return Err(Error::invalid(format!(
            "input action is over {} but output action is over {}",
            a.group(),
            b.group()
        )));
    }
    Ok(())
}

fn first_orbit_dims<S: OrbitSource + ?Sized>(source: &S) -> Result<Vec<usize>> {
    if source.sample_count() == 0 {
        return Err(Error::invalid("no samples to evaluate"));
    }
    Ok(source.orbit(0)?[0].dims().to_vec())
}

/// `g f^(x)` as 64-bit coordinates. Kernel elements act as the identity,
/// which keeps the centroid unrounded.
fn transformed_centroid(
    action_y: &GroupAction,
    kernel: &Subgroup,
    g: GroupElement,
    dims: &[usize],
    centroid: &[f64],
) -> Result<Vec<f64>> {
    if kernel.contains(g) {
        return Ok(centroid.to_vec());
    }
    Ok(widen(action_y.apply(g, &narrow(dims, centroid)?)?.data()))
}

/// The general metric: mean over samples and group elements of
/// `m(f(gx), g f^(x))`.
pub fn generic_eed<F: EvalFunction + ?Sized>(
    f: &F,
    action_x: &GroupAction,
    action_y: &GroupAction,
    m: DistanceKind,
    data: &[Tensor],
    opts: &EedOptions,
) -> Result<EedReport> {
    check_same_group(action_x, action_y)?;
    generic_eed_on(
        &FunctionOrbits {
            f,
            action: action_x,
            data,
        },
        action_x.describe(),
        action_y,
        m,
        opts,
    )
}

/// [`generic_eed`] over precomputed orbits.
pub fn generic_eed_on<S: OrbitSource + ?Sized>(
    source: &S,
    input_action: String,
    action_y: &GroupAction,
    m: DistanceKind,
    opts: &EedOptions,
) -> Result<EedReport> {
    if source.group() != action_y.group() {
        return Err(Error::invalid(
            "orbit source and output action use different groups",
        ));
    }
    let dims = first_orbit_dims(source)?;
    let kernel = output_kernel(action_y, &dims)?;
    let (per_pair, degenerate) = evaluate_grid(source, |s, orbit| {
        let fhat: Vec<f64> = if kernel.is_trivial() {
            widen(orbit[0].data())
        } else {
            centroid(orbit, kernel.members())
        };
        let mut pairs = Vec::with_capacity(orbit.len());
        for g in source.group().elements() {
            let image = &orbit[g.0];
            if image.dims() != dims.as_slice() {
                return Err(Error::invalid(format!(
                    "output shape {:?} differs from {:?}",
                    image.dims(),
                    dims
                ))
                .at_pair(s, g.0));
            }
            let target = if kernel.is_trivial() && g.0 != 0 {
                widen(
                    action_y
                        .apply(g, &orbit[0])
                        .map_err(|e| e.at_pair(s, g.0))?
                        .data(),
                )
            } else {
                transformed_centroid(action_y, &kernel, g, &dims, &fhat)
                    .map_err(|e| e.at_pair(s, g.0))?
            };
            let value =
                distance_f64(m, &widen(image.data()), &target).map_err(|e| e.at_pair(s, g.0))?;
            pairs.push(PairValue {
                sample_idx: s,
                element_idx: g.0,
                value,
            });
        }
        Ok((pairs, 0))
    })?;
    finish_report(
        ReportParts {
            kind: MetricKind::Generic,
            distance: m,
            group: source.group(),
            input_action,
            output_action: action_y.describe(),
            sample_count: source.sample_count(),
            per_pair,
            degenerate_terms: degenerate,
            units: units_for(m),
        },
        opts,
    )
}

fn units_for(m: DistanceKind) -> &'static str {
    match m {
        DistanceKind::Euclidean => "l2",
        DistanceKind::NegCosine => "negative cosine similarity",
        DistanceKind::KlDivergence => "nats",
    }
}

/// Negative mean per-channel cosine similarity between `f(gx)` and
/// `g f^(x)` on `(C, H, W)` stacks. When the action permutes channels the
/// pairing follows the permutation, since `g f^(x)` is already permuted.
pub fn channelwise_eed<F: EvalFunction + ?Sized>(
    f: &F,
    action_x: &GroupAction,
    action_hidden: &GroupAction,
    data: &[Tensor],
    opts: &EedOptions,
) -> Result<EedReport> {
    check_same_group(action_x, action_hidden)?;
    channelwise_eed_on(
        &FunctionOrbits {
            f,
            action: action_x,
            data,
        },
        action_x.describe(),
        action_hidden,
        opts,
    )
}

pub fn channelwise_eed_on<S: OrbitSource + ?Sized>(
    source: &S,
    input_action: String,
    action_hidden: &GroupAction,
    opts: &EedOptions,
) -> Result<EedReport> {
    if source.group() != action_hidden.group() {
        return Err(Error::invalid(
            "orbit source and hidden action use different groups",
        ));
    }
    let dims = first_orbit_dims(source)?;
    let channels = match *dims.as_slice() {
        [c, _, _] => c,
        _ => {
            return Err(Error::invalid(format!(
                "channelwise EED needs (C, H, W) activations, got {dims:?}"
            )))
        }
    };
    let kernel = output_kernel(action_hidden, &dims)?;
    let (per_pair, degenerate) = evaluate_grid(source, |s, orbit| {
        let fhat = if kernel.is_trivial() {
            orbit[0].clone()
        } else {
            narrow(&dims, &centroid(orbit, kernel.members()))?
        };
        let mut pairs = Vec::with_capacity(orbit.len());
        let mut degenerate = 0;
        for g in source.group().elements() {
            let image = &orbit[g.0];
            if image.dims() != dims.as_slice() {
                return Err(
                    Error::invalid("activation shape varies across the orbit").at_pair(s, g.0)
                );
            }
            let target = action_hidden
                .apply(g, &fhat)
                .map_err(|e| e.at_pair(s, g.0))?;
            let mut sum = 0.0;
            let mut used = 0usize;
            for i in 0..channels {
                let a = widen(image.channel_slice(i)?);
                let b = widen(target.channel_slice(i)?);
                match cosine_similarity(&a, &b) {
                    Ok(cos) => {
                        sum += cos;
                        used += 1;
                    }
                    Err(Error::DegenerateInput(_)) => degenerate += 1,
                    Err(e) => return Err(e.at_pair(s, g.0)),
                }
            }
            if used > 0 {
                pairs.push(PairValue {
                    sample_idx: s,
                    element_idx: g.0,
                    value: -sum / used as f64,
                });
            }
        }
        Ok((pairs, degenerate))
    })?;
    finish_report(
        ReportParts {
            kind: MetricKind::Channelwise,
            distance: DistanceKind::NegCosine,
            group: source.group(),
            input_action,
            output_action: action_hidden.describe(),
            sample_count: source.sample_count(),
            per_pair,
            degenerate_terms: degenerate,
            units: units_for(DistanceKind::NegCosine),
        },
        opts,
    )
}

/// The latent normalization constant: mean euclidean distance (euclidean
/// `m`) or mean cosine similarity (neg-cosine `m`) over distinct pairs.
pub fn normalization_constant(m: DistanceKind, features: &[Tensor]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::invalid(
            "normalization needs at least two feature vectors",
        ));
    }
    let wide: Vec<Vec<f64>> = features.iter().map(|t| widen(t.data())).collect();
    let len = wide[0].len();
    if wide.iter().any(|w| w.len() != len) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..wide.len() {
        for j in i + 1..wide.len() {
            sum += match m {
                DistanceKind::Euclidean => distance_f64(m, &wide[i], &wide[j])?,
                DistanceKind::NegCosine => match cosine_similarity(&wide[i], &wide[j]) {
                    Ok(c) => c,
                    Err(Error::DegenerateInput(_)) => {
                        return Err(Error::DegenerateNormalization(0.0))
                    }
                    Err(e) => return Err(e),
                },
                DistanceKind::KlDivergence => {
                    return Err(Error::invalid(
                        "latent EED uses euclidean or neg-cosine distance",
                    ))
                }
            };
            pairs += 1;
        }
    }
    let mconst = sum / pairs as f64;
    if mconst.abs() < NORM_FLOOR {
        return Err(Error::DegenerateNormalization(mconst.abs()));
    }
    Ok(mconst)
}

/// Distance of latent features to their orbit centroid under a trivial
/// latent action, optionally divided by the normalization constant computed
/// on `norm_sample`.
pub fn latent_eed<F: EvalFunction + ?Sized>(
    feature: &F,
    action_x: &GroupAction,
    m: DistanceKind,
    data: &[Tensor],
    norm_sample: &[Tensor],
    normalize: bool,
    opts: &EedOptions,
) -> Result<EedReport> {
    let norm_features: Vec<Tensor> = if normalize {
        norm_sample
            .par_iter()
            .map(|x| feature.eval(x))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    latent_eed_on(
        &FunctionOrbits {
            f: feature,
            action: action_x,
            data,
        },
        action_x.describe(),
        m,
        &norm_features,
        normalize,
        opts,
    )
}

pub fn latent_eed_on<S: OrbitSource + ?Sized>(
    source: &S,
    input_action: String,
    m: DistanceKind,
    norm_features: &[Tensor],
    normalize: bool,
    opts: &EedOptions,
) -> Result<EedReport> {
    if m == DistanceKind::KlDivergence {
        return Err(Error::invalid(
            "latent EED uses euclidean or neg-cosine distance",
        ));
    }
    let dims = first_orbit_dims(source)?;
    if dims.len() != 1 {
        return Err(Error::invalid(format!(
            "latent features must be vectors, got {dims:?}"
        )));
    }
    let mconst = if normalize {
        if let Some(bad) = norm_features.iter().find(|t| t.dims() != dims.as_slice()) {
            return Err(Error::invalid(format!(
                "normalization features have shape {:?}, expected {dims:?}",
                bad.dims()
            )));
        }
        Some(normalization_constant(m, norm_features)?)
    } else {
        None
    };
    let (raw, degenerate) = evaluate_grid(source, |s, orbit| {
        if let Some(bad) = orbit.iter().position(|t| t.dims() != dims.as_slice()) {
            return Err(Error::invalid("feature vector length varies").at_pair(s, bad));
        }
        let c = centroid(orbit, source.group().elements());
        let pairs = source
            .group()
            .elements()
            .map(|g| {
                let value = distance_f64(m, &widen(orbit[g.0].data()), &c)
                    .map_err(|e| e.at_pair(s, g.0))?;
                Ok(PairValue {
                    sample_idx: s,
                    element_idx: g.0,
                    value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((pairs, 0))
    })?;
    let unnormalized = mean_f64(raw.iter().map(|p| p.value));
    let per_pair = match mconst {
        Some(mc) => raw
            .into_iter()
            .map(|p| PairValue {
                value: p.value / mc,
                ..p
            })
            .collect(),
        None => raw,
    };
    let mut report = finish_report(
        ReportParts {
            kind: MetricKind::Latent,
            distance: m,
            group: source.group(),
            input_action,
            output_action: "trivial".into(),
            sample_count: source.sample_count(),
            per_pair,
            degenerate_terms: degenerate,
            units: units_for(m),
        },
        opts,
    )?;
    report.normalization_m = mconst;
    report.normalized_mean = mconst.map(|_| report.mean);
    report.unnormalized_mean = Some(unnormalized);
    Ok(report)
}

/// KL divergence (nats) of each `f(gx)` from the orbit-mean distribution.
pub fn softmax_eed<F: EvalFunction + ?Sized>(
    model: &F,
    action_x: &GroupAction,
    data: &[Tensor],
    opts: &EedOptions,
) -> Result<EedReport> {
    softmax_eed_on(
        &FunctionOrbits {
            f: model,
            action: action_x,
            data,
        },
        action_x.describe(),
        opts,
    )
}

pub fn softmax_eed_on<S: OrbitSource + ?Sized>(
    source: &S,
    input_action: String,
    opts: &EedOptions,
) -> Result<EedReport> {
    let dims = first_orbit_dims(source)?;
    let (per_pair, _) = evaluate_grid(source, |s, orbit| {
        for (g, t) in orbit.iter().enumerate() {
            if t.dims() != dims.as_slice() {
                return Err(Error::invalid("output shape varies across the orbit").at_pair(s, g));
            }
            check_distribution(&widen(t.data()), "model output").map_err(|e| e.at_pair(s, g))?;
        }
        let c = centroid(orbit, source.group().elements());
        let pairs = source
            .group()
            .elements()
            .map(|g| {
                let value = distance_f64(DistanceKind::KlDivergence, &widen(orbit[g.0].data()), &c)
                    .map_err(|e| e.at_pair(s, g.0))?;
                Ok(PairValue {
                    sample_idx: s,
                    element_idx: g.0,
                    value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((pairs, 0))
    })?;
    finish_report(
        ReportParts {
            kind: MetricKind::Softmax,
            distance: DistanceKind::KlDivergence,
            group: source.group(),
            input_action,
            output_action: "trivial".into(),
            sample_count: source.sample_count(),
            per_pair,
            degenerate_terms: 0,
            units: "nats",
        },
        opts,
    )
}

/// Average over `trials` random picks `(i, t)` of the smallest distance
/// between a rotated channel `g(w[i, t])` and any channel `w[j, k]` of a
/// different filter `j != i`. Zero when filters come in whole rotation orbits.
pub fn filter_orbit_metric(
    filters: &Tensor,
    group: &FiniteGroup,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let (f, c, h, w) = match *filters.dims() {
        [f, c, h, w] => (f, c, h, w),
        _ => {
            return Err(Error::invalid(format!(
                "filters must be (F, C, h, w), got {:?}",
                filters.dims()
            )))
        }
    };
    if h != w {
        return Err(Error::invalid(format!(
            "filters must be square, got {h}x{w}"
        )));
    }
    if f < 2 {
        return Err(Error::invalid(
            "filter orbit metric needs at least two filters",
        ));
    }
    let n = match group.kind() {
        GroupKind::Cyclic(n) => n,
        _ => {
            return Err(Error::invalid(format!(
                "filter orbit metric needs a cyclic group, got {group}"
            )))
        }
    };
    if !is_quarter_turn(1, n) {
        return Err(Error::Unsupported(format!(
            "filter orbit metric needs exact rotations (c1, c2, c4), got {group}"
        )));
    }
    if trials == 0 {
        return Err(Error::invalid(
            "filter orbit metric needs at least one trial",
        ));
    }
    let plane = h * w;
    let slice = |i: usize, t: usize| &filters.data()[(i * c + t) * plane..(i * c + t + 1) * plane];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let i = rng.gen_range(0..f);
        let t = rng.gen_range(0..c);
        let rotations: Vec<Vec<f64>> = (0..n)
            .map(|k| widen(&rotate_plane(slice(i, t), h, k, n)))
            .collect();
        let mut best = f64::INFINITY;
        for j in (0..f).filter(|&j| j != i) {
            for k in 0..c {
                let other = widen(slice(j, k));
                for r in &rotations {
                    best = best.min(distance_f64(DistanceKind::Euclidean, r, &other)?);
                }
            }
        }
        total += best;
    }
    Ok(total / trials as f64)
}

/// `x -> mean_g f(gx)`, exactly invariant (up to summation order) for exact actions.
pub struct Symmetrized<'a, F: EvalFunction + ?Sized> {
    f: &'a F,
    action: &'a GroupAction,
}

pub fn symmetrize<'a, F: EvalFunction + ?Sized>(
    f: &'a F,
    action_x: &'a GroupAction,
) -> Symmetrized<'a, F> {
    Symmetrized {
        f,
        action: action_x,
    }
}

impl<F: EvalFunction + ?Sized> EvalFunction for Symmetrized<'_, F> {
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let orbit: Vec<Tensor> = self
            .action
            .group()
            .elements()
            .map(|g| self.f.eval(&self.action.apply(g, x)?))
            .collect::<Result<_>>()?;
        let dims = orbit[0].dims().to_vec();
        if orbit.iter().any(|t| t.dims() != dims.as_slice()) {
            return Err(Error::invalid(
                "function output shape varies across the orbit",
            ));
        }
        narrow(&dims, &centroid(&orbit, self.action.group().elements()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{
        make_cyclic_shift_action, make_permutation_action, make_rotation_action, make_sign_action,
        make_trivial_action, Carrier, SignedPermutation,
    };

    fn vec_t(v: &[f32]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn c2_swap() -> GroupAction {
        let c2 = FiniteGroup::cyclic(2).unwrap();
        make_permutation_action(
            &c2,
            vec![
                SignedPermutation::unsigned(vec![0, 1]).unwrap(),
                SignedPermutation::unsigned(vec![1, 0]).unwrap(),
            ],
        )
        .unwrap()
    }

    fn identity(x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    #[test]
    fn orbit_average_cases() {
        let c2 = FiniteGroup::cyclic(2).unwrap();
        let sign = make_sign_action(&c2, 1).unwrap();
        let x = vec_t(&[0.7]);
        let whole = Subgroup::whole(&c2);
        assert_eq!(
            orbit_average(&identity, &x, &sign, &whole).unwrap(),
            vec_t(&[0.0])
        );
        let trivial = Subgroup::trivial(&c2);
        assert_eq!(orbit_average(&identity, &x, &sign, &trivial).unwrap(), x);
        let constant = |_: &Tensor| Tensor::vector(vec![3.25, -1.0]);
        assert_eq!(
            orbit_average(&constant, &x, &sign, &whole).unwrap(),
            vec_t(&[3.25, -1.0])
        );
    }

    #[test]
    fn generic_identity_map_is_exactly_equivariant() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let shift = make_cyclic_shift_action(&c4, 8).unwrap();
        let data: Vec<Tensor> = (0..5)
            .map(|s| Tensor::from_fn(vec![8], |i| ((i * 7 + s * 3) % 11) as f32 - 5.0).unwrap())
            .collect();
        let r = generic_eed(
            &identity,
            &shift,
            &shift,
            DistanceKind::Euclidean,
            &data,
            &EedOptions::default(),
        )
        .unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.pair_count, 20);
        assert_eq!((r.ci_low, r.ci_high), (0.0, 0.0));
    }

    #[test]
    fn generic_group_mismatch() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let c2 = FiniteGroup::cyclic(2).unwrap();
        let a = make_cyclic_shift_action(&c4, 4).unwrap();
        let b = make_trivial_action(&c2, Carrier::Any);
        let data = vec![vec_t(&[1.0, 2.0, 3.0, 4.0])];
        assert!(matches!(
            generic_eed(
                &identity,
                &a,
                &b,
                DistanceKind::Euclidean,
                &data,
                &EedOptions::default()
            ),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn distance_errors_carry_pair_context() {
        let c2 = FiniteGroup::cyclic(2).unwrap();
        let sign = make_sign_action(&c2, 2).unwrap();
        let zero = |_: &Tensor| Tensor::zeros(vec![2]);
        let data = vec![vec_t(&[1.0, 2.0])];
        let err = generic_eed(
            &zero,
            &sign,
            &sign,
            DistanceKind::NegCosine,
            &data,
            &EedOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::AtPair {
                sample: 0,
                element: 0,
                ..
            }
        ));
        assert!(err.is_degenerate());
    }

    #[test]
    fn softmax_two_class_example() {
        let action = c2_swap();
        let data = vec![vec_t(&[0.8, 0.2])];
        let r = softmax_eed(&identity, &action, &data, &EedOptions::default()).unwrap();
        assert!((r.mean - 0.19274).abs() < 1e-4, "{}", r.mean);
        assert_eq!(r.units, "nats");
    }

    #[test]
    fn softmax_constant_and_invalid_outputs() {
        let action = c2_swap();
        let data = vec![vec_t(&[0.8, 0.2]), vec_t(&[0.1, 0.9])];
        let constant = |_: &Tensor| Tensor::vector(vec![0.3, 0.7]);
        let r = softmax_eed(&constant, &action, &data, &EedOptions::default()).unwrap();
        assert_eq!(r.mean, 0.0);
        let raw = |x: &Tensor| x.scale(2.0);
        assert!(matches!(
            softmax_eed(&raw, &action, &data, &EedOptions::default())
                .unwrap_err()
                .root(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn latent_two_point_example() {
        let action = c2_swap();
        let data = vec![vec_t(&[1.0, 0.0])];
        let norm = vec![vec_t(&[1.0, 0.0]), vec_t(&[0.0, 1.0]), vec_t(&[2.0, 0.0])];
        let r = latent_eed(
            &identity,
            &action,
            DistanceKind::Euclidean,
            &data,
            &norm,
            true,
            &EedOptions::default(),
        )
        .unwrap();
        // Oracle by enumeration of every distinct pair of the normalization sample.
        let pts = [[1.0f64, 0.0], [0.0, 1.0], [2.0, 0.0]];
        let mut dsum = 0.0;
        let mut count = 0;
        for i in 0..3 {
            for j in 0..3 {
                if i < j {
                    dsum +=
                        ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                    count += 1;
                }
            }
        }
        let m = dsum / count as f64;
        let expected = 0.5f64.sqrt() / m;
        assert!((r.normalization_m.unwrap() - m).abs() < 1e-12);
        assert!((r.mean - expected).abs() < 1e-9);
        assert!((r.mean - 0.4560).abs() < 1e-3);
        assert!((r.unnormalized_mean.unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn latent_unnormalized_omits_m() {
        let action = c2_swap();
        let data = vec![vec_t(&[1.0, 0.0])];
        let r = latent_eed(
            &identity,
            &action,
            DistanceKind::Euclidean,
            &data,
            &[],
            false,
            &EedOptions::default(),
        )
        .unwrap();
        assert!(r.normalization_m.is_none());
        assert!((r.mean - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn latent_constant_features_are_degenerate() {
        let action = c2_swap();
        let data = vec![vec_t(&[1.0, 0.0])];
        let norm = vec![vec_t(&[1.0, 0.0]), vec_t(&[0.0, 1.0])];
        let constant = |_: &Tensor| Tensor::vector(vec![1.0, 1.0]);
        let err = latent_eed(
            &constant,
            &action,
            DistanceKind::Euclidean,
            &data,
            &norm,
            true,
            &EedOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateNormalization(_)));
        let too_few = latent_eed(
            &identity,
            &action,
            DistanceKind::Euclidean,
            &data,
            &norm[..1],
            true,
            &EedOptions::default(),
        );
        assert!(matches!(too_few, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn latent_invariant_feature_scores_zero() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let shift = make_cyclic_shift_action(&c4, 8).unwrap();
        let feature = |x: &Tensor| Tensor::vector(vec![x.sum() as f32, x.norm() as f32]);
        let data: Vec<Tensor> = (0..4)
            .map(|s| Tensor::from_fn(vec![8], |i| (i as f32 - s as f32).sin()).unwrap())
            .collect();
        let r = latent_eed(
            &feature,
            &shift,
            DistanceKind::Euclidean,
            &data,
            &data,
            true,
            &EedOptions::default(),
        )
        .unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn channelwise_identity_is_minus_one() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rot = make_rotation_action(&c4, Carrier::Spatial).unwrap();
        let data: Vec<Tensor> = (0..3)
            .map(|s| Tensor::from_fn(vec![2, 5, 5], |i| ((i + s) as f32 * 0.37).cos()).unwrap())
            .collect();
        let r = channelwise_eed(&identity, &rot, &rot, &data, &EedOptions::default()).unwrap();
        assert!((r.mean + 1.0).abs() < 1e-12);
    }

    #[test]
    fn channelwise_counts_dead_channels() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rot = make_rotation_action(&c4, Carrier::Spatial).unwrap();
        let half_dead = |x: &Tensor| {
            let mut d = x.data().to_vec();
            d.extend(std::iter::repeat_n(0.0, x.len()));
            Tensor::new(vec![2, x.dims()[0], x.dims()[1]], d)
        };
        let data = vec![Tensor::from_fn(vec![4, 4], |i| i as f32).unwrap()];
        let r = channelwise_eed(&half_dead, &rot, &rot, &data, &EedOptions::default()).unwrap();
        assert_eq!(r.degenerate_terms, 4);
        assert!((r.mean + 1.0).abs() < 1e-12);
        assert!(channelwise_eed(
            &identity,
            &rot,
            &rot,
            &[Tensor::zeros(vec![1, 4, 4]).unwrap()],
            &EedOptions::default()
        )
        .unwrap_err()
        .is_degenerate());
    }

    #[test]
    fn bootstrap_cases() {
        assert_eq!(bootstrap_ci(&[2.5; 7], 0.95, 100, 1).unwrap(), (2.5, 2.5));
        assert_eq!(bootstrap_ci(&[4.0], 0.95, 100, 1).unwrap(), (4.0, 4.0));
        let mut v = vec![0.0; 500];
        v.extend(vec![1.0; 500]);
        let (lo, hi) = bootstrap_ci(&v, 0.95, 1000, 7).unwrap();
        assert!(lo < 0.5 && 0.5 < hi);
        // Binomial standard error 0.5/sqrt(1000) ~ 0.0158; the 95% interval is ~ +-0.031.
        assert!(lo > 0.45 && hi < 0.55, "({lo}, {hi})");
        assert_eq!(bootstrap_ci(&v, 0.95, 1000, 7).unwrap(), (lo, hi));
        assert!(bootstrap_ci(&[], 0.95, 10, 0).is_err());
        assert!(bootstrap_ci(&v, 1.0, 10, 0).is_err());
    }

    #[test]
    fn filter_orbit_exact_pair_and_errors() {
        let w0 = Tensor::from_fn(vec![3, 3], |i| (i as f32 * 0.7).sin()).unwrap();
        let w1 = crate::actions::rotate2(&w0, 1, 4).unwrap();
        let filters = Tensor::new(vec![2, 1, 3, 3], [w0.data(), w1.data()].concat()).unwrap();
        let c4 = FiniteGroup::cyclic(4).unwrap();
        assert_eq!(filter_orbit_metric(&filters, &c4, 20, 0).unwrap(), 0.0);
        let one = Tensor::new(vec![1, 1, 3, 3], w0.data().to_vec()).unwrap();
        assert!(matches!(
            filter_orbit_metric(&one, &c4, 5, 0),
            Err(Error::InvalidArgument(_))
        ));
        let c8 = FiniteGroup::cyclic(8).unwrap();
        assert!(matches!(
            filter_orbit_metric(&filters, &c8, 5, 0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn symmetrize_makes_invariant() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let shift = make_cyclic_shift_action(&c4, 4).unwrap();
        let softmax_first_two = |x: &Tensor| {
            let a = (x.data()[0] as f64).exp();
            let b = (x.data()[1] as f64).exp();
            Tensor::vector(vec![(a / (a + b)) as f32, (b / (a + b)) as f32])
        };
        let data: Vec<Tensor> = (0..6)
            .map(|s| Tensor::from_fn(vec![4], |i| ((i * 3 + s) as f32).sin()).unwrap())
            .collect();
        let plain = softmax_eed(&softmax_first_two, &shift, &data, &EedOptions::default()).unwrap();
        assert!(plain.mean > 1e-3);
        let sym = symmetrize(&softmax_first_two, &shift);
        let r = softmax_eed(&sym, &shift, &data, &EedOptions::default()).unwrap();
        assert!(r.mean <= 1e-6, "{}", r.mean);
        // already-invariant function is unchanged
        let inv = |x: &Tensor| Tensor::vector(vec![x.sum() as f32]);
        let sym_inv = symmetrize(&inv, &shift);
        for x in &data {
            let a = sym_inv.eval(x).unwrap().data()[0];
            let b = inv(x).unwrap().data()[0];
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn sample_selection_is_seeded() {
        assert_eq!(select_samples(5, 10, 1), vec![0, 1, 2, 3, 4]);
        let a = select_samples(100, 10, 42);
        assert_eq!(a, select_samples(100, 10, 42));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, select_samples(100, 10, 43));
    }
}
