//! Sequence transforms that compose into classification and transduction tasks.

use serde::{Deserialize, Serialize};

use super::GenError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementwiseKind {
    Mul,
    Add,
    Div,
    Mod,
}

/// Elementwise arithmetic with a fixed operand (first stage of every task).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementwiseTransform {
    pub kind: ElementwiseKind,
    pub v: i64,
}

impl ElementwiseTransform {
    pub fn new(kind: ElementwiseKind, v: i64) -> Result<Self, GenError> {
        let min = match kind {
            ElementwiseKind::Div | ElementwiseKind::Mod => 1,
            ElementwiseKind::Mul | ElementwiseKind::Add => 0,
        };
        if v < min {
            return Err(GenError::InvalidTransform(format!("{kind:?} {v}")));
        }
        Ok(Self { kind, v })
    }

    /// `div` is floor division and `mod` the non-negative remainder.
    pub fn apply(&self, seq: &[i64]) -> Vec<i64> {
        let v = self.v;
        seq.iter()
            .map(|&x| match self.kind {
                ElementwiseKind::Mul => x * v,
                ElementwiseKind::Add => x + v,
                ElementwiseKind::Div => x.div_euclid(v),
                ElementwiseKind::Mod => x.rem_euclid(v),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    MultipleOf,
    GreaterThan,
    ExactDivisorCount,
}

/// Keeps the elements that satisfy (or with `negated`, fail) a predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterTransform {
    pub kind: FilterKind,
    pub v: i64,
    pub negated: bool,
}

/// Number of positive divisors of `x`; zero for `x <= 0`.
pub fn divisor_count(x: i64) -> i64 {
    if x <= 0 {
        return 0;
    }
    let mut count = 0;
    let mut d = 1;
    while d * d <= x {
        if x % d == 0 {
            count += if d * d == x { 1 } else { 2 };
        }
        d += 1;
    }
    count
}

impl FilterTransform {
    pub fn new(kind: FilterKind, v: i64, negated: bool) -> Result<Self, GenError> {
        if v < 1 {
            return Err(GenError::InvalidTransform(format!("{kind:?} {v}")));
        }
        Ok(Self { kind, v, negated })
    }

    pub fn predicate(&self, x: i64) -> bool {
        let holds = match self.kind {
            FilterKind::MultipleOf => x.rem_euclid(self.v) == 0,
            FilterKind::GreaterThan => x > self.v,
            // zero has no divisor count and fails every such predicate
            FilterKind::ExactDivisorCount => x > 0 && divisor_count(x) == self.v,
        };
        holds != self.negated
    }

    pub fn apply(&self, seq: &[i64]) -> Vec<i64> {
        seq.iter().copied().filter(|&x| self.predicate(x)).collect()
    }
}

/// Reduces a non-empty sequence to one integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelerTransform {
    Count,
    Min,
    Max,
    Mean,
    Median,
    Mode,
    First,
    Last,
    MaxMin,
    Middle,
}

impl LabelerTransform {
    pub const ALL: [LabelerTransform; 10] = [
        LabelerTransform::Count,
        LabelerTransform::Min,
        LabelerTransform::Max,
        LabelerTransform::Mean,
        LabelerTransform::Median,
        LabelerTransform::Mode,
        LabelerTransform::First,
        LabelerTransform::Last,
        LabelerTransform::MaxMin,
        LabelerTransform::Middle,
    ];

    /// `mean` floors, `median` takes sorted index `(n-1)/2`, `mode` breaks
    /// ties towards the smallest value and `middle` takes index `n/2`.
    pub fn apply(&self, seq: &[i64]) -> Result<i64, GenError> {
        let (&first, &last) = match (seq.first(), seq.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(GenError::EmptySequence),
        };
        let min = *seq.iter().min().unwrap();
        let max = *seq.iter().max().unwrap();
        let n = seq.len();
        Ok(match self {
            LabelerTransform::Count => n as i64,
            LabelerTransform::Min => min,
            LabelerTransform::Max => max,
            LabelerTransform::Mean => seq.iter().sum::<i64>().div_euclid(n as i64),
            LabelerTransform::Median => {
                let mut sorted = seq.to_vec();
                sorted.sort_unstable();
                sorted[(n - 1) / 2]
            }
            LabelerTransform::Mode => {
                let mut sorted = seq.to_vec();
                sorted.sort_unstable();
                let mut best = (sorted[0], 0usize);
                let mut i = 0;
                while i < n {
                    let mut j = i;
                    while j < n && sorted[j] == sorted[i] {
                        j += 1;
                    }
                    if j - i > best.1 {
                        best = (sorted[i], j - i);
                    }
                    i = j;
                }
                best.0
            }
            LabelerTransform::First => first,
            LabelerTransform::Last => last,
            LabelerTransform::MaxMin => max - min,
            LabelerTransform::Middle => seq[n / 2],
        })
    }
}

/// Function used by [`SubstitutionTransform::ReplacePosition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "fn")]
pub enum PositionFn {
    /// `a * x_i + b`
    Affine { a: i64, b: i64 },
    /// `x_j`
    Other,
    /// `|x_i - x_j|`
    AbsDiff,
    /// `x_i + x_j`
    Sum,
}

impl PositionFn {
    pub fn eval(&self, xi: i64, xj: i64) -> i64 {
        match *self {
            PositionFn::Affine { a, b } => a * xi + b,
            PositionFn::Other => xj,
            PositionFn::AbsDiff => (xi - xj).abs(),
            PositionFn::Sum => xi + xj,
        }
    }
}

/// Length-preserving value substitution. Positions are 1-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op")]
pub enum SubstitutionTransform {
    ReplaceValue { from: i64, to: i64 },
    ReplacePosition { i: usize, j: usize, f: PositionFn },
}

fn position(p: usize, len: usize) -> Result<usize, GenError> {
    if p == 0 || p > len {
        return Err(GenError::PositionOutOfRange { position: p, len });
    }
    Ok(p - 1)
}

impl SubstitutionTransform {
    pub fn apply(&self, seq: &[i64]) -> Result<Vec<i64>, GenError> {
        match *self {
            SubstitutionTransform::ReplaceValue { from, to } => Ok(seq
                .iter()
                .map(|&x| if x == from { to } else { x })
                .collect()),
            SubstitutionTransform::ReplacePosition { i, j, f } => {
                let (pi, pj) = (position(i, seq.len())?, position(j, seq.len())?);
                let mut out = seq.to_vec();
                out[pi] = f.eval(seq[pi], seq[pj]);
                Ok(out)
            }
        }
    }
}

/// Permutes the sequence. Positions are 1-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op")]
pub enum RearrangeTransform {
    SortAscending,
    SortDescending,
    Reverse,
    Swap { i: usize, j: usize },
    /// Cyclic shift to the right by `v` places.
    ShiftRight { v: usize },
}

impl RearrangeTransform {
    pub fn apply(&self, seq: &[i64]) -> Result<Vec<i64>, GenError> {
        let mut out = seq.to_vec();
        match *self {
            RearrangeTransform::SortAscending => out.sort_unstable(),
            RearrangeTransform::SortDescending => out.sort_unstable_by(|a, b| b.cmp(a)),
            RearrangeTransform::Reverse => out.reverse(),
            RearrangeTransform::Swap { i, j } => {
                let (pi, pj) = (position(i, seq.len())?, position(j, seq.len())?);
                out.swap(pi, pj);
            }
            RearrangeTransform::ShiftRight { v } => {
                if !out.is_empty() {
                    let len = out.len();
                    out.rotate_right(v % len);
                }
            }
        }
        Ok(out)
    }
}
