//! Finite groups stored as dense composition tables.
//!
//! Elements are plain indices into the group's canonical enumeration and
//! element `0` is always the identity. Cyclic `C_n` uses the rotation count
//! as its index; dihedral `D_n` encodes a rotation `k` followed by an
//! optional reflection `s` as `k + n * s`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::actions::GroupAction;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of an element inside its group's canonical enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupElement(pub usize);

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement(0);

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "n", rename_all = "lowercase")]
pub enum GroupKind {
    Cyclic(usize),
    Dihedral(usize),
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteGroup {
    kind: GroupKind,
    order: usize,
    /// Row-major `order x order`; entry `[a * order + b]` is `a . b`.
    composition: Vec<usize>,
    inverse: Vec<usize>,
}

impl FiniteGroup {
    /// The cyclic group `C_n`; element `k` is rotation by `k` steps.
    pub fn cyclic(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("cyclic group order must be at least 1"));
        }
        let composition = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a + b) % n))
            .collect();
        let inverse = (0..n).map(|a| (n - a) % n).collect();
        Ok(Self {
            kind: GroupKind::Cyclic(n),
            order: n,
            composition,
            inverse,
        })
    }

    /// The dihedral group `D_n` of order `2n`.
    pub fn dihedral(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid(
                "dihedral group parameter must be at least 1",
            ));
        }
        let order = 2 * n;
        let encode = |k: usize, s: usize| k + n * s;
        let decode = |i: usize| (i % n, i / n);
        let mut composition = vec![0; order * order];
        for a in 0..order {
            let (k1, s1) = decode(a);
            for b in 0..order {
                let (k2, s2) = decode(b);
                let k = if s1 == 0 {
                    (k1 + k2) % n
                } else {
                    (k1 + n - k2) % n
                };
                composition[a * order + b] = encode(k, s1 ^ s2);
            }
        }
        let inverse = (0..order)
            .map(|a| {
                let (k, s) = decode(a);
                // reflections are involutions
                if s == 1 {
                    a
                } else {
                    encode((n - k) % n, 0)
                }
            })
            .collect();
        Ok(Self {
            kind: GroupKind::Dihedral(n),
            order,
            composition,
            inverse,
        })
    }

    /// A group given by explicit tables. Only shapes and index ranges are
    /// checked here; use [`FiniteGroup::check_axioms`] for the group laws.
    pub fn explicit(order: usize, composition: Vec<usize>, inverse: Vec<usize>) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("group order must be at least 1"));
        }
        if composition.len() != order * order {
            return Err(Error::invalid(format!(
                "composition table has {} entries, expected {}",
                composition.len(),
                order * order
            )));
        }
        if inverse.len() != order {
            return Err(Error::invalid(format!(
                "inverse table has {} entries, expected {order}",
                inverse.len()
            )));
        }
        if let Some(bad) = composition.iter().chain(&inverse).find(|&&e| e >= order) {
            return Err(Error::invalid(format!(
                "table entry {bad} out of range for order {order}"
            )));
        }
        Ok(Self {
            kind: GroupKind::Explicit,
            order,
            composition,
            inverse,
        })
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement::IDENTITY
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElement> + '_ {
        (0..self.order).map(GroupElement)
    }

    pub fn contains(&self, g: GroupElement) -> bool {
        g.0 < self.order
    }

    pub fn compose(&self, a: GroupElement, b: GroupElement) -> GroupElement {
        GroupElement(self.composition[a.0 * self.order + b.0])
    }

    pub fn inverse(&self, a: GroupElement) -> GroupElement {
        GroupElement(self.inverse[a.0])
    }

    pub fn composition_table(&self) -> &[usize] {
        &self.composition
    }

    pub fn inverse_table(&self) -> &[usize] {
        &self.inverse
    }

    /// `(rotation steps, reflected)` for cyclic and dihedral groups.
    pub fn rotation_reflection(&self, g: GroupElement) -> Option<(usize, bool)> {
        match self.kind {
            GroupKind::Cyclic(_) => Some((g.0, false)),
            GroupKind::Dihedral(n) => Some((g.0 % n, g.0 >= n)),
            GroupKind::Explicit => None,
        }
    }

    /// Short name used on the command line: `c8`, `d8`, or `explicit<order>`.
    pub fn name(&self) -> String {
        match self.kind {
            GroupKind::Cyclic(n) => format!("c{n}"),
            GroupKind::Dihedral(n) => format!("d{n}"),
            GroupKind::Explicit => format!("explicit{}", self.order),
        }
    }

    /// Exhaustively checks identity, inverse, and associativity.
    pub fn check_axioms(&self) -> Result<(), AxiomViolation> {
        let n = self.order;
        let e = self.identity();
        for a in self.elements() {
            if self.compose(e, a) != a || self.compose(a, e) != a {
                return Err(AxiomViolation::Identity(a.0));
            }
            let inv = self.inverse(a);
            if self.compose(a, inv) != e || self.compose(inv, a) != e {
                return Err(AxiomViolation::Inverse(a.0));
            }
        }
        for a in 0..n {
            for b in 0..n {
                let ab = self.composition[a * n + b];
                for c in 0..n {
                    let lhs = self.composition[ab * n + c];
                    let rhs = self.composition[a * n + self.composition[b * n + c]];
                    if lhs != rhs {
                        return Err(AxiomViolation::Associativity(a, b, c));
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for FiniteGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for FiniteGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let parse_n = |digits: &str| {
            digits
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad group name {s:?}, expected c<n> or d<n>")))
        };
        match s.split_at_checked(1) {
            Some(("c", n)) => FiniteGroup::cyclic(parse_n(n)?),
            Some(("d", n)) => FiniteGroup::dihedral(parse_n(n)?),
            _ => Err(Error::invalid(format!(
                "bad group name {s:?}, expected c<n> or d<n>"
            ))),
        }
    }
}

/// First group law found broken by [`FiniteGroup::check_axioms`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AxiomViolation {
    #[error("element 0 is not a two-sided identity for element {0}")]
    Identity(usize),
    #[error("inverse table entry for element {0} is not a two-sided inverse")]
    Inverse(usize),
    #[error("associativity fails for ({0}, {1}, {2})")]
    Associativity(usize, usize, usize),
}

/// True iff the group tables satisfy the group axioms.
pub fn verify_group_axioms(group: &FiniteGroup) -> bool {
    group.check_axioms().is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgroup {
    parent: FiniteGroup,
    members: Vec<usize>,
}

impl Subgroup {
    /// Validates that `members` contains the identity and is closed.
    pub fn new(
        parent: &FiniteGroup,
        members: impl IntoIterator<Item = GroupElement>,
    ) -> Result<Self> {
        let mut members: Vec<usize> = members.into_iter().map(|g| g.0).collect();
        members.sort_unstable();
        members.dedup();
        if let Some(&bad) = members.iter().find(|&&m| m >= parent.order()) {
            return Err(Error::invalid(format!("element {bad} is not in {parent}")));
        }
        if members.first() != Some(&0) {
            return Err(Error::invalid("subgroup must contain the identity"));
        }
        for &a in &members {
            if members.binary_search(&parent.inverse[a]).is_err() {
                return Err(Error::invalid(format!(
                    "subgroup not closed under inverse of {a}"
                )));
            }
            for &b in &members {
                let ab = parent.compose(GroupElement(a), GroupElement(b)).0;
                if members.binary_search(&ab).is_err() {
                    return Err(Error::invalid(format!(
                        "subgroup not closed: {a} . {b} = {ab}"
                    )));
                }
            }
        }
        Ok(Self {
            parent: parent.clone(),
            members,
        })
    }

    pub fn whole(parent: &FiniteGroup) -> Self {
        Self {
            parent: parent.clone(),
            members: (0..parent.order()).collect(),
        }
    }

    pub fn trivial(parent: &FiniteGroup) -> Self {
        Self {
            parent: parent.clone(),
            members: vec![0],
        }
    }

    pub fn parent(&self) -> &FiniteGroup {
        &self.parent
    }

    pub fn members(&self) -> impl Iterator<Item = GroupElement> + '_ {
        self.members.iter().map(|&m| GroupElement(m))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    /// Never true; a subgroup always holds the identity.
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_trivial(&self) -> bool {
        self.members.len() == 1
    }

    pub fn contains(&self, g: GroupElement) -> bool {
        self.members.binary_search(&g.0).is_ok()
    }
}

/// The kernel of `action` on tensors of shape `probe_dims`.
///
/// Exact actions are probed on every standard basis tensor; an element is in
/// the kernel iff it fixes all of them. Interpolated actions can only report
/// the kernel declared when they were built.
pub fn kernel_of(action: &GroupAction, probe_dims: &[usize]) -> Result<Subgroup> {
    let group = action.group();
    if !action.is_exact() {
        if action.is_spatially_trivial(probe_dims) {
            return Ok(Subgroup::whole(group));
        }
        return action.declared_kernel().cloned().ok_or_else(|| {
            Error::UnsupportedAction(format!(
                "{} is interpolated and has no declared kernel",
                action.describe()
            ))
        });
    }
    let size: usize = probe_dims.iter().product();
    // Distinct positive entries expose any moved or negated coordinate at once.
    let distinct = Tensor::from_fn(probe_dims.to_vec(), |i| (i + 1) as f32)?;
    let mut members = vec![group.identity()];
    'elements: for g in group.elements().skip(1) {
        if action.apply(g, &distinct)? != distinct {
            continue;
        }
        for i in 0..size {
            let mut data = vec![0.0f32; size];
            data[i] = 1.0;
            let basis = Tensor::new(probe_dims.to_vec(), data)?;
            let image = action.apply(g, &basis)?;
            if image != basis {
                continue 'elements;
            }
        }
        members.push(g);
    }
    let kernel = Subgroup::new(group, members)?;
    if let Some(declared) = action.declared_kernel() {
        if declared != &kernel && !action.is_spatially_trivial(probe_dims) {
            return Err(Error::invalid(format!(
                "{} declares kernel {:?} but acts as identity exactly on {:?}",
                action.describe(),
                declared.members,
                kernel.members
            )));
        }
    }
    Ok(kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(i: usize) -> GroupElement {
        GroupElement(i)
    }

    #[test]
    fn cyclic_construction() {
        assert!(FiniteGroup::cyclic(0).is_err());
        let c1 = FiniteGroup::cyclic(1).unwrap();
        assert_eq!(c1.order(), 1);
        assert_eq!(c1.compose(g(0), g(0)), g(0));
        let c8 = FiniteGroup::cyclic(8).unwrap();
        assert_eq!(c8.order(), 8);
        let c4 = FiniteGroup::cyclic(4).unwrap();
        assert_eq!(c4.compose(g(2), g(2)), g(0));
        assert_eq!(c4.compose(g(3), g(2)), g(1));
        assert_eq!(c4.inverse(g(1)), g(3));
    }

    #[test]
    fn dihedral_construction() {
        assert!(FiniteGroup::dihedral(0).is_err());
        let d8 = FiniteGroup::dihedral(8).unwrap();
        assert_eq!(d8.order(), 16);
        for s in 8..16 {
            assert_eq!(d8.compose(g(s), g(s)), g(0));
        }
        // (1,1).(1,0) = (0,1)
        assert_eq!(d8.compose(g(1 + 8), g(1)), g(8));
    }

    #[test]
    fn dihedral_relations_brute_force() {
        // Independent model: D_n as permutations of the n-gon's vertices.
        for n in 1..=8 {
            let d = FiniteGroup::dihedral(n).unwrap();
            let as_perm = |i: usize| -> Vec<usize> {
                let (k, s) = (i % n, i / n);
                // vertex v -> k + (-1)^s v
                (0..n)
                    .map(|v| if s == 0 { (k + v) % n } else { (k + n - v) % n })
                    .collect()
            };
            for a in 0..2 * n {
                for b in 0..2 * n {
                    let pa = as_perm(a);
                    let pb = as_perm(b);
                    let composed: Vec<usize> = (0..n).map(|v| pa[pb[v]]).collect();
                    let ab = d.compose(g(a), g(b)).0;
                    if n > 2 {
                        assert_eq!(as_perm(ab), composed, "n={n} a={a} b={b}");
                    }
                }
            }
            // s r = r^-1 s
            if n > 1 {
                let r = g(1);
                let s = g(n);
                assert_eq!(d.compose(s, r), d.compose(d.inverse(r), s));
            }
        }
    }

    #[test]
    fn constructed_groups_satisfy_axioms() {
        for n in 1..=8 {
            assert!(verify_group_axioms(&FiniteGroup::cyclic(n).unwrap()));
            assert!(verify_group_axioms(&FiniteGroup::dihedral(n).unwrap()));
        }
    }

    #[test]
    fn corrupted_explicit_table_is_rejected() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let good = FiniteGroup::explicit(
            4,
            c4.composition_table().to_vec(),
            c4.inverse_table().to_vec(),
        )
        .unwrap();
        assert!(verify_group_axioms(&good));
        // Flip every single non-identity-row cell and confirm the checker notices.
        for cell in 0..16 {
            let mut table = c4.composition_table().to_vec();
            table[cell] = (table[cell] + 1) % 4;
            let bad = FiniteGroup::explicit(4, table, c4.inverse_table().to_vec()).unwrap();
            assert!(!verify_group_axioms(&bad), "cell {cell}");
        }
        let mut table = c4.composition_table().to_vec();
        table[2 * 4 + 3] = 0;
        let bad = FiniteGroup::explicit(4, table, c4.inverse_table().to_vec()).unwrap();
        assert!(bad.check_axioms().is_err());
    }

    #[test]
    fn explicit_shape_errors() {
        assert!(FiniteGroup::explicit(2, vec![0, 1, 1], vec![0, 1]).is_err());
        assert!(FiniteGroup::explicit(2, vec![0, 1, 1, 0], vec![0]).is_err());
        assert!(FiniteGroup::explicit(2, vec![0, 1, 1, 2], vec![0, 1]).is_err());
    }

    #[test]
    fn names_round_trip() {
        for name in ["c1", "c2", "c8", "d1", "d8"] {
            let group: FiniteGroup = name.parse().unwrap();
            assert_eq!(group.name(), name);
        }
        assert!("x8".parse::<FiniteGroup>().is_err());
        assert!("c".parse::<FiniteGroup>().is_err());
        assert!("c0".parse::<FiniteGroup>().is_err());
        assert!("".parse::<FiniteGroup>().is_err());
    }

    #[test]
    fn serialization_is_stable() {
        let d8 = FiniteGroup::dihedral(8).unwrap();
        let json = serde_json::to_string(&d8).unwrap();
        let back: FiniteGroup = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d8);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn subgroup_validation() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        assert!(Subgroup::new(&c4, [g(0), g(2)]).is_ok());
        assert!(Subgroup::new(&c4, [g(0), g(1)]).is_err());
        assert!(Subgroup::new(&c4, [g(2)]).is_err());
        assert!(Subgroup::new(&c4, [g(0), g(7)]).is_err());
        assert_eq!(Subgroup::whole(&c4).len(), 4);
        assert!(Subgroup::trivial(&c4).is_trivial());
    }
}
