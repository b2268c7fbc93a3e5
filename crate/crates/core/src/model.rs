//! Shared symbols of the slotted two-color mix and the entropy helpers
//! everything else is built on.
//!
//! All entropies are in bits. `0 log 0` is taken to be `0`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MixError, Result};

/// A real number in `[0, 1]`. NaN is rejected.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub const ZERO: Probability = Probability(0.0);
    pub const HALF: Probability = Probability(0.5);
    pub const ONE: Probability = Probability(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Probability(value))
        } else {
            Err(MixError::domain(format!(
                "probability {value} is outside [0, 1]"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn complement(self) -> Probability {
        Probability(1.0 - self.0)
    }
}

impl TryFrom<f64> for Probability {
    type Error = MixError;

    fn try_from(value: f64) -> Result<Self> {
        Probability::new(value)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Bernoulli arrival rates of the red and blue flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePair {
    pub lambda_r: Probability,
    pub lambda_b: Probability,
}

impl RatePair {
    pub fn new(lambda_r: f64, lambda_b: f64) -> Result<Self> {
        Ok(RatePair {
            lambda_r: Probability::new(lambda_r)?,
            lambda_b: Probability::new(lambda_b)?,
        })
    }

    #[inline]
    pub fn r(&self) -> f64 {
        self.lambda_r.value()
    }

    #[inline]
    pub fn b(&self) -> f64 {
        self.lambda_b.value()
    }

    /// Expected packet arrivals per slot.
    pub fn total(&self) -> f64 {
        self.r() + self.b()
    }

    pub fn swapped(&self) -> RatePair {
        RatePair {
            lambda_r: self.lambda_b,
            lambda_b: self.lambda_r,
        }
    }

    /// Probability of each arrival symbol in one slot, indexed by [`PacketSet::index`].
    pub fn arrival_distribution(&self) -> [f64; 4] {
        let (r, b) = (self.r(), self.b());
        [(1.0 - r) * (1.0 - b), r * (1.0 - b), (1.0 - r) * b, r * b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Blue,
}

impl Color {
    pub fn other(self) -> Color {
        match self {
            Color::Red => Color::Blue,
            Color::Blue => Color::Red,
        }
    }
}

/// A set of at most one red and one blue packet.
///
/// This is both the per-slot arrival `I_k` and the content of one age cell of
/// the mix buffer (for `T = 1` the whole queue state).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub enum PacketSet {
    #[default]
    Empty,
    R,
    B,
    RB,
}

pub type ArrivalSymbol = PacketSet;
pub type QueueState = PacketSet;

impl PacketSet {
    pub const ALL: [PacketSet; 4] = [PacketSet::Empty, PacketSet::R, PacketSet::B, PacketSet::RB];

    pub fn from_flags(red: bool, blue: bool) -> PacketSet {
        match (red, blue) {
            (false, false) => PacketSet::Empty,
            (true, false) => PacketSet::R,
            (false, true) => PacketSet::B,
            (true, true) => PacketSet::RB,
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn has_red(self) -> bool {
        matches!(self, PacketSet::R | PacketSet::RB)
    }

    #[inline]
    pub fn has_blue(self) -> bool {
        matches!(self, PacketSet::B | PacketSet::RB)
    }

    pub fn has(self, color: Color) -> bool {
        match color {
            Color::Red => self.has_red(),
            Color::Blue => self.has_blue(),
        }
    }

    pub fn len(self) -> usize {
        self.has_red() as usize + self.has_blue() as usize
    }

    pub fn is_empty(self) -> bool {
        self == PacketSet::Empty
    }

    pub fn is_subset_of(self, other: PacketSet) -> bool {
        (!self.has_red() || other.has_red()) && (!self.has_blue() || other.has_blue())
    }

    pub fn union(self, other: PacketSet) -> PacketSet {
        PacketSet::from_flags(
            self.has_red() || other.has_red(),
            self.has_blue() || other.has_blue(),
        )
    }

    pub fn minus(self, other: PacketSet) -> PacketSet {
        PacketSet::from_flags(
            self.has_red() && !other.has_red(),
            self.has_blue() && !other.has_blue(),
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            PacketSet::Empty => "-",
            PacketSet::R => "R",
            PacketSet::B => "B",
            PacketSet::RB => "RB",
        }
    }
}

impl fmt::Display for PacketSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// What the single output link carries in one slot. Order matters for
/// two-packet words of different colors.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub enum OutputWord {
    #[default]
    Empty,
    R,
    B,
    RR,
    BB,
    RB,
    BR,
}

impl OutputWord {
    pub const ALL: [OutputWord; 7] = [
        OutputWord::Empty,
        OutputWord::R,
        OutputWord::B,
        OutputWord::RR,
        OutputWord::BB,
        OutputWord::RB,
        OutputWord::BR,
    ];

    /// Number of packets on the wire, `G_k = |O_k|`, which the observer sees.
    pub fn cardinality(self) -> usize {
        match self {
            OutputWord::Empty => 0,
            OutputWord::R | OutputWord::B => 1,
            _ => 2,
        }
    }

    pub fn reds(self) -> usize {
        match self {
            OutputWord::R | OutputWord::RB | OutputWord::BR => 1,
            OutputWord::RR => 2,
            _ => 0,
        }
    }

    pub fn blues(self) -> usize {
        self.cardinality() - self.reds()
    }

    pub fn from_colors(colors: &[Color]) -> Option<OutputWord> {
        use Color::*;
        Some(match colors {
            [] => OutputWord::Empty,
            [Red] => OutputWord::R,
            [Blue] => OutputWord::B,
            [Red, Red] => OutputWord::RR,
            [Blue, Blue] => OutputWord::BB,
            [Red, Blue] => OutputWord::RB,
            [Blue, Red] => OutputWord::BR,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            OutputWord::Empty => "-",
            OutputWord::R => "R",
            OutputWord::B => "B",
            OutputWord::RR => "RR",
            OutputWord::BB => "BB",
            OutputWord::RB => "RB",
            OutputWord::BR => "BR",
        }
    }
}

impl fmt::Display for OutputWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// `-p log2 p`, with the continuous extension at 0.
#[inline]
fn plogp(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.log2()
    }
}

/// Binary entropy in bits. Inputs are clamped to `[0, 1]`.
pub fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    plogp(p) + plogp(1.0 - p)
}

/// Shannon entropy (bits) of a weight vector; weights need not be normalized.
pub fn entropy_bits(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    weights.iter().map(|&w| plogp(w / total)).sum()
}

/// `H(O | G)` for a distribution over output words: entropy inside each
/// cardinality class, weighted by the class probability.
pub fn entropy_given_cardinality(dist: &[(OutputWord, f64)]) -> f64 {
    let mut classes = [[0.0f64; 7]; 3];
    for &(word, p) in dist {
        classes[word.cardinality()][word as usize] += p;
    }
    let total: f64 = dist.iter().map(|(_, p)| p).sum();
    if total <= 0.0 {
        return 0.0;
    }
    classes
        .iter()
        .map(|class| {
            let mass: f64 = class.iter().sum();
            (mass / total) * entropy_bits(class)
        })
        .sum()
}

/// The unique `p` in `[0, 1/2]` with `binary_entropy(p) == h`, by bisection to 1e-12.
pub fn inverse_binary_entropy(h: f64) -> Result<Probability> {
    if !(0.0..=1.0).contains(&h) {
        return Err(MixError::domain(format!(
            "binary entropy {h} is outside [0, 1]"
        )));
    }
    // H is flat to machine precision near 1/2, so pin the endpoints exactly.
    if h == 1.0 {
        return Ok(Probability::HALF);
    }
    if h == 0.0 {
        return Ok(Probability::ZERO);
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if binary_entropy(mid) < h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Probability::new(0.5 * (lo + hi))
}

/// Fano lower bound on the per-packet probability that the observer
/// mislabels an output packet's color, given anonymity in bits/packet.
pub fn fano_error_lower_bound(anonymity: f64) -> Result<Probability> {
    if anonymity > 1.0 {
        return Err(MixError::domain(format!(
            "anonymity {anonymity} exceeds 1 bit/packet, impossible with two colors"
        )));
    }
    inverse_binary_entropy(anonymity)
}
