//! Dense row-major `f32` tensors and the distance functions used by every
//! EED variant.
//!
//! Storage is 32-bit; every reduction accumulates in `f64` sequentially in
//! index order so results never depend on scheduling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor applied before taking logarithms in the KL divergence.
pub const KL_EPSILON: f64 = 1e-7;

/// Inputs to the KL divergence must sum to one within this tolerance.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-5;

/// Norms below this make cosine similarity undefined.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dims must be non-empty and positive, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor with dims {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![0.0; len])
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![value; len])
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len().max(1)], data)
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, (0..len).map(&mut f).collect())
    }

    /// Builds a tensor whose values were produced by shape-preserving
    /// arithmetic on already-validated data.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Tensor> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        Tensor::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        self.map(|v| v * c)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other)?;
        Tensor::new(
            self.dims.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other)?;
        Tensor::new(
            self.dims.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Copy of channel `i` of a `(C, H, W)` stack as an `(H, W)` tensor.
    pub fn channel(&self, i: usize) -> Result<Tensor> {
        let (c, h, w) = self.as_stack()?;
        if i >= c {
            return Err(Error::invalid(format!(
                "channel {i} out of range for {c} channels"
            )));
        }
        let plane = h * w;
        Ok(Tensor::from_parts(
            vec![h, w],
            self.data[i * plane..(i + 1) * plane].to_vec(),
        ))
    }

    /// Borrowed view of channel `i` without copying.
    pub fn channel_slice(&self, i: usize) -> Result<&[f32]> {
        let (c, h, w) = self.as_stack()?;
        if i >= c {
            return Err(Error::invalid(format!(
                "channel {i} out of range for {c} channels"
            )));
        }
        Ok(&self.data[i * h * w..(i + 1) * h * w])
    }

    /// Stacks equally-shaped `(H, W)` planes into a `(C, H, W)` tensor.
    pub fn stack(channels: &[Tensor]) -> Result<Tensor> {
        let first = channels
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero channels"))?;
        if first.rank() != 2 {
            return Err(Error::invalid("stack expects (H, W) planes"));
        }
        let mut data = Vec::with_capacity(first.len() * channels.len());
        for ch in channels {
            first.check_same_dims(ch)?;
            data.extend_from_slice(&ch.data);
        }
        let mut dims = vec![channels.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Tensor::from_parts(dims, data))
    }

    /// `(C, H, W)` view of a rank-3 tensor, or `(1, H, W)` for rank 2.
    pub fn as_stack(&self) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [h, w] => Ok((1, h, w)),
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected (H, W) or (C, H, W), got {:?}",
                self.dims
            ))),
        }
    }

    pub(crate) fn check_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... {} more", self.data.len() - SHOWN)?;
        }
        f.write_str("]")
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// The distance `m` compared across the orbit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    Euclidean,
    /// Negated cosine similarity, so that larger still means further apart.
    NegCosine,
    /// KL divergence in nats.
    KlDivergence,
}

impl DistanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::NegCosine => "neg-cosine",
            DistanceKind::KlDivergence => "kl-divergence",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "l2" => Ok(DistanceKind::Euclidean),
            "neg-cosine" | "cosine" => Ok(DistanceKind::NegCosine),
            "kl-divergence" | "kl" => Ok(DistanceKind::KlDivergence),
            other => Err(Error::invalid(format!(
                "unknown distance {other:?}, expected euclidean, neg-cosine or kl-divergence"
            ))),
        }
    }
}

pub fn distance(kind: DistanceKind, a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_dims(b)?;
    distance_f64(kind, &widen(&a.data), &widen(&b.data))
}

pub(crate) fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Distance on 64-bit coordinates; callers guarantee equal lengths.
pub(crate) fn distance_f64(kind: DistanceKind, a: &[f64], b: &[f64]) -> Result<f64> {
    debug_assert_eq!(a.len(), b.len());
    match kind {
        DistanceKind::Euclidean => Ok(euclidean(a, b)),
        DistanceKind::NegCosine => Ok(-cosine_similarity(a, b)?),
        DistanceKind::KlDivergence => kl_divergence(a, b),
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = dot64(a, a).sqrt();
    let nb = dot64(b, b).sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(Error::DegenerateInput(format!(
            "cosine similarity of a vector with norm {:e}",
            na.min(nb)
        )));
    }
    Ok((dot64(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|&&v| v < 0.0) {
        return Err(Error::invalid(format!(
            "{which} has negative probability {v}"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::invalid(format!("{which} sums to {total}, not 1")));
    }
    Ok(())
}

/// Clamps to `[KL_EPSILON, 1]` and renormalizes.
fn clamp_distribution(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|&v| v.clamp(KL_EPSILON, 1.0)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|v| v / total).collect()
}

fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_distribution(p, "first argument")?;
    check_distribution(q, "second argument")?;
    let p = clamp_distribution(p);
    let q = clamp_distribution(q);
    let kl: f64 = p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum();
    Ok(kl.max(0.0))
}
