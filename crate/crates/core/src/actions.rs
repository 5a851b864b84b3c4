//! Group actions on images, channel stacks, and vectors.
//!
//! Rotation convention: counter-clockwise about `((H-1)/2, (W-1)/2)`, inverse
//! mapping with bilinear interpolation and zero fill. Rotations by multiples
//! of 90 degrees bypass interpolation and are exact index permutations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::groups::{FiniteGroup, GroupElement, GroupKind, Subgroup};
use crate::tensor::Tensor;

/// Recorded in reports and manifests so results can be reproduced elsewhere.
pub const ROTATION_CONVENTION: &str =
    "counter-clockwise; center ((H-1)/2, (W-1)/2); inverse-mapped bilinear, zero fill; multiples of 90 degrees exact";

/// True when rotation by `k/n` of a full turn is a multiple of 90 degrees.
pub fn is_quarter_turn(k: usize, n: usize) -> bool {
    (4 * k).is_multiple_of(n)
}

fn square_side(img: &Tensor) -> Result<usize> {
    match *img.dims() {
        [h, w] if h == w => Ok(h),
        [h, w] => Err(Error::invalid(format!(
            "rotation needs a square image, got {h}x{w}"
        ))),
        _ => Err(Error::invalid(format!(
            "expected an (H, W) image, got {:?}",
            img.dims()
        ))),
    }
}

/// Rotates a square `(H, W)` image counter-clockwise by `2 pi k / n`.
pub fn rotate2(img: &Tensor, k: usize, n: usize) -> Result<Tensor> {
    let side = square_side(img)?;
    if n == 0 || k >= n {
        return Err(Error::invalid(format!(
            "rotation index {k} out of range for n = {n}"
        )));
    }
    Ok(Tensor::from_parts(
        img.dims().to_vec(),
        rotate_plane(img.data(), side, k, n),
    ))
}

pub(crate) fn rotate_plane(src: &[f32], side: usize, k: usize, n: usize) -> Vec<f32> {
    let k = k % n;
    if is_quarter_turn(k, n) {
        rotate_quarter(src, side, 4 * k / n)
    } else {
        rotate_bilinear(src, side, 2.0 * PI * k as f64 / n as f64)
    }
}

/// Exact counter-clockwise rotation by `q` quarter turns.
pub(crate) fn rotate_quarter(src: &[f32], s: usize, q: usize) -> Vec<f32> {
    let last = s - 1;
    let mut out = vec![0.0f32; s * s];
    for r in 0..s {
        for c in 0..s {
            out[r * s + c] = match q % 4 {
                0 => src[r * s + c],
                1 => src[c * s + (last - r)],
                2 => src[(last - r) * s + (last - c)],
                _ => src[(last - c) * s + r],
            };
        }
    }
    out
}

fn rotate_bilinear(src: &[f32], s: usize, theta: f64) -> Vec<f32> {
    let (sin, cos) = theta.sin_cos();
    let center = (s as f64 - 1.0) / 2.0;
    let sample = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r as usize >= s || c as usize >= s {
            0.0
        } else {
            src[r as usize * s + c as usize] as f64
        }
    };
    let mut out = vec![0.0f32; s * s];
    for r in 0..s {
        let y_out = r as f64 - center;
        for c in 0..s {
            let x_out = c as f64 - center;
            let x = x_out * cos - y_out * sin + center;
            let y = x_out * sin + y_out * cos + center;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (c0, r0) = (x0 as isize, y0 as isize);
            let value = sample(r0, c0) * (1.0 - fx) * (1.0 - fy)
                + sample(r0, c0 + 1) * fx * (1.0 - fy)
                + sample(r0 + 1, c0) * (1.0 - fx) * fy
                + sample(r0 + 1, c0 + 1) * fx * fy;
            out[r * s + c] = value as f32;
        }
    }
    out
}

/// Mirror across the vertical axis (column reversal).
pub fn reflect2(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.as_stack()?;
    let mut out = Vec::with_capacity(img.len());
    for plane in 0..c {
        out.extend_from_slice(&reflect_plane(
            &img.data()[plane * h * w..(plane + 1) * h * w],
            h,
            w,
        ));
    }
    Ok(Tensor::from_parts(img.dims().to_vec(), out))
}

fn reflect_plane(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    (0..h)
        .flat_map(|r| (0..w).rev().map(move |c| src[r * w + c]))
        .collect()
}

/// Zeroes every pixel further than `(H-1)/2` from the image center.
/// Rank-3 stacks are masked channel by channel.
pub fn circular_mask(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.as_stack()?;
    if h != w {
        return Err(Error::invalid(format!(
            "circular mask needs a square image, got {h}x{w}"
        )));
    }
    let center = (h as f64 - 1.0) / 2.0;
    let radius_sq = center * center;
    let mut data = img.data().to_vec();
    for plane in 0..c {
        for r in 0..h {
            for col in 0..w {
                let dr = r as f64 - center;
                let dc = col as f64 - center;
                if dr * dr + dc * dc > radius_sq {
                    data[plane * h * w + r * w + col] = 0.0;
                }
            }
        }
    }
    Ok(Tensor::from_parts(img.dims().to_vec(), data))
}

/// A permutation of vector coordinates with optional sign flips:
/// coordinate `i` moves to `target[i]`, negated when `negate[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignedPermutation {
    target: Vec<usize>,
    negate: Vec<bool>,
}

impl SignedPermutation {
    pub fn new(target: Vec<usize>, negate: Vec<bool>) -> Result<Self> {
        if target.len() != negate.len() {
            return Err(Error::invalid(
                "permutation and sign tables differ in length",
            ));
        }
        let mut seen = vec![false; target.len()];
        for &t in &target {
            if t >= target.len() || std::mem::replace(&mut seen[t], true) {
                return Err(Error::invalid(format!("{target:?} is not a permutation")));
            }
        }
        Ok(Self { target, negate })
    }

    pub fn unsigned(target: Vec<usize>) -> Result<Self> {
        let len = target.len();
        Self::new(target, vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; x.len()];
        for (i, (&t, &neg)) in self.target.iter().zip(&self.negate).enumerate() {
            out[t] = if neg { -x[i] } else { x[i] };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ActionKind {
    Trivial,
    /// Cyclic `C_n`; element `k` rotates every channel by `2 pi k / n`.
    Rotation,
    /// Order-2 group; the non-identity element reverses columns.
    ReflectionVertical,
    /// Dihedral `D_n`; element `(k, s)` reflects when `s = 1`, then rotates by `k`.
    Dihedral,
    /// Cyclic `C_n` on `(B * n, H, W)` stacks: rotates each channel and moves
    /// slot `t` of every block to slot `t + j mod n`. `blocks = None` infers
    /// the block count from the channel count.
    RegularChannel {
        blocks: Option<usize>,
    },
    Permutation {
        maps: Vec<SignedPermutation>,
    },
}

/// The tensor shapes an action is defined on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Carrier {
    /// `(H, W)` images or `(C, H, W)` stacks, acted on channel by channel.
    Spatial,
    /// `(C, H, W)` stacks whose channel axis is also permuted.
    Stack,
    Vector(usize),
    Any,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAction {
    group: FiniteGroup,
    kind: ActionKind,
    carrier: Carrier,
    declared_kernel: Option<Subgroup>,
}

fn cyclic_order(group: &FiniteGroup, what: &str) -> Result<usize> {
    match group.kind() {
        GroupKind::Cyclic(n) => Ok(n),
        GroupKind::Dihedral(_) => Err(Error::invalid(format!(
            "{what} needs a cyclic group, got {group}; use the dihedral action instead"
        ))),
        GroupKind::Explicit => Err(Error::invalid(format!(
            "{what} needs a cyclic group, got {group}"
        ))),
    }
}

/// Element `k` of `C_n` rotates each channel of an image or stack.
pub fn make_rotation_action(group: &FiniteGroup, carrier: Carrier) -> Result<GroupAction> {
    cyclic_order(group, "rotation action")?;
    if !matches!(carrier, Carrier::Spatial | Carrier::Stack) {
        return Err(Error::invalid("rotation acts on images or channel stacks"));
    }
    Ok(GroupAction {
        group: group.clone(),
        kind: ActionKind::Rotation,
        carrier,
        declared_kernel: Some(Subgroup::trivial(group)),
    })
}

/// Rotations and vertical-axis reflections of `D_n`.
pub fn make_dihedral_action(group: &FiniteGroup) -> Result<GroupAction> {
    if !matches!(group.kind(), GroupKind::Dihedral(_)) {
        return Err(Error::invalid(format!(
            "dihedral action needs a dihedral group, got {group}"
        )));
    }
    Ok(GroupAction {
        group: group.clone(),
        kind: ActionKind::Dihedral,
        carrier: Carrier::Spatial,
        declared_kernel: Some(Subgroup::trivial(group)),
    })
}

/// Reflection across the vertical axis; the group must have order 2.
pub fn make_reflection_action(group: &FiniteGroup) -> Result<GroupAction> {
    if group.order() != 2 || group.kind() == GroupKind::Explicit {
        return Err(Error::invalid(format!(
            "vertical reflection needs c2 or d1, got {group}"
        )));
    }
    Ok(GroupAction {
        group: group.clone(),
        kind: ActionKind::ReflectionVertical,
        carrier: Carrier::Spatial,
        declared_kernel: Some(Subgroup::trivial(group)),
    })
}

/// The regular-representation action on `(blocks * n, H, W)` stacks.
pub fn make_regular_channel_action(group: &FiniteGroup, blocks: usize) -> Result<GroupAction> {
    cyclic_order(group, "regular channel action")?;
    if blocks == 0 {
        return Err(Error::invalid(
            "regular channel action needs at least one block",
        ));
    }
    Ok(regular(group, Some(blocks)))
}

/// Like [`make_regular_channel_action`] but accepts any channel count divisible by `n`.
pub fn make_regular_channel_action_any(group: &FiniteGroup) -> Result<GroupAction> {
    cyclic_order(group, "regular channel action")?;
    Ok(regular(group, None))
}

fn regular(group: &FiniteGroup, blocks: Option<usize>) -> GroupAction {
    GroupAction {
        group: group.clone(),
        kind: ActionKind::RegularChannel { blocks },
        carrier: Carrier::Stack,
        declared_kernel: Some(Subgroup::trivial(group)),
    }
}

pub fn make_trivial_action(group: &FiniteGroup, carrier: Carrier) -> GroupAction {
    GroupAction {
        group: group.clone(),
        kind: ActionKind::Trivial,
        carrier,
        declared_kernel: Some(Subgroup::whole(group)),
    }
}

/// An action by signed coordinate permutations, one per group element.
/// The action axiom is checked exhaustively at construction.
pub fn make_permutation_action(
    group: &FiniteGroup,
    maps: Vec<SignedPermutation>,
) -> Result<GroupAction> {
    if maps.len() != group.order() {
        return Err(Error::invalid(format!(
            "{} permutations given for a group of order {}",
            maps.len(),
            group.order()
        )));
    }
    let len = maps[0].len();
    if len == 0 || maps.iter().any(|m| m.len() != len) {
        return Err(Error::invalid("permutations must share a positive length"));
    }
    let action = GroupAction {
        group: group.clone(),
        kind: ActionKind::Permutation { maps },
        carrier: Carrier::Vector(len),
        declared_kernel: None,
    };
    let report = verify_action_axiom(&action, &[len], 2, 0)?;
    if !report.holds {
        return Err(Error::invalid(format!(
            "permutation tables do not respect composition (residual {})",
            report.max_deviation
        )));
    }
    Ok(action)
}

/// `C_n` acting on length-`len` vectors by cyclic shifts of `len / n` places.
pub fn make_cyclic_shift_action(group: &FiniteGroup, len: usize) -> Result<GroupAction> {
    let n = cyclic_order(group, "cyclic shift action")?;
    if len == 0 || !len.is_multiple_of(n) {
        return Err(Error::invalid(format!(
            "vector length {len} is not a positive multiple of {n}"
        )));
    }
    let step = len / n;
    let maps = (0..n)
        .map(|k| SignedPermutation::unsigned((0..len).map(|i| (i + k * step) % len).collect()))
        .collect::<Result<_>>()?;
    make_permutation_action(group, maps)
}

/// `C_2` acting on vectors by negation.
pub fn make_sign_action(group: &FiniteGroup, len: usize) -> Result<GroupAction> {
    if group.order() != 2 {
        return Err(Error::invalid(format!(
            "sign action needs an order-2 group, got {group}"
        )));
    }
    let id: Vec<usize> = (0..len).collect();
    make_permutation_action(
        group,
        vec![
            SignedPermutation::new(id.clone(), vec![false; len])?,
            SignedPermutation::new(id, vec![true; len])?,
        ],
    )
}

impl GroupAction {
    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn kind(&self) -> &ActionKind {
        &self.kind
    }

    pub fn carrier(&self) -> Carrier {
        self.carrier
    }

    pub fn declared_kernel(&self) -> Option<&Subgroup> {
        self.declared_kernel.as_ref()
    }

    /// Replaces the declared kernel; `None` leaves interpolated actions with
    /// no kernel to report.
    pub fn with_declared_kernel(mut self, kernel: Option<Subgroup>) -> Result<Self> {
        if let Some(k) = &kernel {
            if k.parent() != &self.group {
                return Err(Error::invalid(
                    "declared kernel belongs to a different group",
                ));
            }
        }
        self.declared_kernel = kernel;
        Ok(self)
    }

    fn rotation_steps(&self) -> usize {
        match self.group.kind() {
            GroupKind::Cyclic(n) | GroupKind::Dihedral(n) => n,
            GroupKind::Explicit => 1,
        }
    }

    /// True when every element acts as an exact (signed) permutation of entries.
    pub fn is_exact(&self) -> bool {
        match self.kind {
            ActionKind::Trivial
            | ActionKind::ReflectionVertical
            | ActionKind::Permutation { .. } => true,
            ActionKind::Rotation | ActionKind::Dihedral | ActionKind::RegularChannel { .. } => {
                is_quarter_turn(1, self.rotation_steps())
            }
        }
    }

    /// Purely spatial actions on a single pixel (or single column, for reflection)
    /// fix everything regardless of interpolation.
    pub(crate) fn is_spatially_trivial(&self, dims: &[usize]) -> bool {
        let (h, w) = match dims {
            [h, w] | [_, h, w] => (*h, *w),
            _ => return false,
        };
        match self.kind {
            ActionKind::Rotation | ActionKind::Dihedral => h == 1 && w == 1,
            ActionKind::ReflectionVertical => w == 1,
            _ => false,
        }
    }

    /// Short human-readable tag, e.g. `rot(c8)` or `regular:4(c4)`.
    pub fn describe(&self) -> String {
        let name = match &self.kind {
            ActionKind::Trivial => "trivial".to_string(),
            ActionKind::Rotation => "rot".to_string(),
            ActionKind::ReflectionVertical => "reflect-v".to_string(),
            ActionKind::Dihedral => "rot+reflect-v".to_string(),
            ActionKind::RegularChannel { .. } => format!("regular:{}", self.group.order()),
            ActionKind::Permutation { .. } => "permutation".to_string(),
        };
        format!("{name}({})", self.group)
    }

    pub fn apply(&self, g: GroupElement, x: &Tensor) -> Result<Tensor> {
        if !self.group.contains(g) {
            return Err(Error::invalid(format!(
                "element {} not in {}",
                g.0, self.group
            )));
        }
        match &self.kind {
            ActionKind::Trivial => Ok(x.clone()),
            ActionKind::Rotation => self.rotate_channels(x, g.0, None),
            ActionKind::ReflectionVertical => {
                if g.0 == 0 {
                    Ok(x.clone())
                } else {
                    reflect2(x)
                }
            }
            ActionKind::Dihedral => {
                let (k, reflected) = self.group.rotation_reflection(g).expect("dihedral group");
                if reflected {
                    self.rotate_channels(&reflect2(x)?, k, None)
                } else {
                    self.rotate_channels(x, k, None)
                }
            }
            ActionKind::RegularChannel { blocks } => {
                let n = self.group.order();
                let (c, _, _) = stack_dims(x)?;
                if c % n != 0 {
                    return Err(Error::invalid(format!(
                        "regular action of {} needs a channel count divisible by {n}, got {c}",
                        self.group
                    )));
                }
                if let Some(b) = blocks {
                    if c != b * n {
                        return Err(Error::invalid(format!(
                            "regular action expects {} channels ({b} blocks of {n}), got {c}",
                            b * n
                        )));
                    }
                }
                self.rotate_channels(x, g.0, Some(n))
            }
            ActionKind::Permutation { maps } => {
                let map = &maps[g.0];
                if x.dims() != [map.len()] {
                    return Err(Error::invalid(format!(
                        "permutation action expects a vector of length {}, got {:?}",
                        map.len(),
                        x.dims()
                    )));
                }
                Ok(Tensor::from_parts(x.dims().to_vec(), map.apply(x.data())))
            }
        }
    }

    /// Rotates every channel by `k` steps; with `block = Some(n)` also moves
    /// slot `t` of each size-`n` block to slot `t + k mod n`.
    fn rotate_channels(&self, x: &Tensor, k: usize, block: Option<usize>) -> Result<Tensor> {
        let (c, h, w) = x.as_stack()?;
        if h != w {
            return Err(Error::invalid(format!(
                "rotation needs square channels, got {h}x{w}"
            )));
        }
        if self.carrier == Carrier::Stack && x.rank() != 3 {
            return Err(Error::invalid(format!(
                "expected a (C, H, W) stack, got {:?}",
                x.dims()
            )));
        }
        let n = self.rotation_steps();
        let plane = h * w;
        let mut out = vec![0.0f32; x.len()];
        for ch in 0..c {
            let dest = match block {
                Some(bn) => (ch / bn) * bn + (ch % bn + k) % bn,
                None => ch,
            };
            let rotated = rotate_plane(&x.data()[ch * plane..(ch + 1) * plane], h, k, n);
            out[dest * plane..(dest + 1) * plane].copy_from_slice(&rotated);
        }
        Ok(Tensor::from_parts(x.dims().to_vec(), out))
    }
}

fn stack_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!(
            "expected a (C, H, W) stack, got {:?}",
            x.dims()
        ))),
    }
}

/// Outcome of [`verify_action_axiom`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionAxiomReport {
    /// Whether the action is an exact permutation action.
    pub exact: bool,
    /// Exact actions: composition held bit-for-bit. Interpolated actions
    /// always report `true`; inspect `max_deviation` instead.
    pub holds: bool,
    /// Largest `|g2(g1 x) - (g2 g1) x|` seen, including the identity check.
    pub max_deviation: f64,
    pub pairs_checked: usize,
}

/// Exhaustively checks `g2(g1 x) = (g2 g1) x` over every pair of elements on
/// `samples` seeded random tensors of shape `dims`. Square spatial inputs for
/// interpolated actions are circularly masked first.
pub fn verify_action_axiom(
    action: &GroupAction,
    dims: &[usize],
    samples: usize,
    seed: u64,
) -> Result<ActionAxiomReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exact = action.is_exact();
    let group = action.group();
    let mut max_deviation = 0.0f64;
    let mut pairs_checked = 0;
    for _ in 0..samples.max(1) {
        let mut x = Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0f32..1.0))?;
        if !exact {
            x = circular_mask(&x)?;
        }
        let id = action.apply(group.identity(), &x)?;
        max_deviation = max_deviation.max(max_abs_diff(&id, &x));
        let images: Vec<Tensor> = group
            .elements()
            .map(|g| action.apply(g, &x))
            .collect::<Result<_>>()?;
        for g1 in group.elements() {
            for g2 in group.elements() {
                let lhs = action.apply(g2, &images[g1.0])?;
                let rhs = &images[group.compose(g2, g1).0];
                max_deviation = max_deviation.max(max_abs_diff(&lhs, rhs));
                pairs_checked += 1;
            }
        }
    }
    Ok(ActionAxiomReport {
        exact,
        holds: !exact || max_deviation == 0.0,
        max_deviation,
        pairs_checked,
    })
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}
