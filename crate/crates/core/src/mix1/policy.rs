//! Stationary mixing policies for the two-input, one-output mix with a
//! strict per-packet delay of one slot.
//!
//! The queue state is whatever was held back at the end of the previous slot;
//! with `T = 1` it must all leave in the current slot. Each state has its own
//! small set of randomization parameters:
//!
//! | state | parameters | meaning |
//! |-------|------------|---------|
//! | `∅`   | `alpha`, `beta` | hold a lone R / lone B arrival |
//! |       | `s`, `y`, `p`   | on RB: transmit at all / send only one / that one is R |
//! | `R`   | `gamma` | on R: hold the new R |
//! |       | `a`     | on B: send a random permutation (else hold the B) |
//! |       | `t`, `d`| on RB: transmit two / those two are RR |
//! | `B`   | `delta`, `b`, `z`, `r` | mirror image of state `R` |
//! | `RB`  | none    | flush RB or BR uniformly, hold the whole arrival |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MixError, Result};
use crate::model::{
    binary_entropy, entropy_given_cardinality, ArrivalSymbol, OutputWord, Probability, QueueState,
    RatePair,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricPolicy {
    pub alpha: Probability,
    pub beta: Probability,
    pub s: Probability,
    pub y: Probability,
    pub p: Probability,
    pub gamma: Probability,
    pub a: Probability,
    pub t: Probability,
    pub d: Probability,
    pub delta: Probability,
    pub b: Probability,
    pub z: Probability,
    pub r: Probability,
}

impl ParametricPolicy {
    pub const NUM_PARAMS: usize = 13;

    /// Parameter names in the order used by [`Self::to_array`].
    pub const PARAM_NAMES: [&'static str; 13] = [
        "alpha", "beta", "s", "y", "p", "gamma", "a", "t", "d", "delta", "b", "z", "r",
    ];

    pub fn from_array(v: [f64; 13]) -> Result<Self> {
        let p = |i: usize| Probability::new(v[i]);
        Ok(ParametricPolicy {
            alpha: p(0)?,
            beta: p(1)?,
            s: p(2)?,
            y: p(3)?,
            p: p(4)?,
            gamma: p(5)?,
            a: p(6)?,
            t: p(7)?,
            d: p(8)?,
            delta: p(9)?,
            b: p(10)?,
            z: p(11)?,
            r: p(12)?,
        })
    }

    pub fn to_array(&self) -> [f64; 13] {
        [
            self.alpha, self.beta, self.s, self.y, self.p, self.gamma, self.a, self.t, self.d,
            self.delta, self.b, self.z, self.r,
        ]
        .map(Probability::value)
    }

    /// The structure of the optimal policy: every gating parameter is 1 and
    /// only the three splitting probabilities are free.
    pub fn optimal(p_star: Probability, d_star: Probability, r_star: Probability) -> Self {
        let one = Probability::ONE;
        ParametricPolicy {
            alpha: one,
            beta: one,
            s: one,
            y: one,
            p: p_star,
            gamma: one,
            a: one,
            t: one,
            d: d_star,
            delta: one,
            b: one,
            z: one,
            r: r_star,
        }
    }
}

/// Shorthand for [`ParametricPolicy::optimal`].
pub fn optimal_policy_t1(
    p_star: Probability,
    d_star: Probability,
    r_star: Probability,
) -> ParametricPolicy {
    ParametricPolicy::optimal(p_star, d_star, r_star)
}

/// One slot of the mix: what went out and what is held for the next slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixStep {
    pub output: OutputWord,
    pub next_queue: QueueState,
}

/// A terminal branch of the action tree for one `(queue, arrival)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub prob: f64,
    pub output: OutputWord,
    pub next_queue: QueueState,
}

/// Expected one-slot reward `E_I[H(O | q, I, G)]` in bits.
pub fn reward(q: QueueState, policy: &ParametricPolicy, rates: &RatePair) -> f64 {
    let (lr, lb) = (rates.r(), rates.b());
    let pol = policy;
    match q {
        QueueState::Empty => {
            let (s, y, p) = (pol.s.value(), pol.y.value(), pol.p.value());
            lr * lb * s * (y * binary_entropy(p) + 1.0 - y)
        }
        QueueState::R => {
            let (a, t, d) = (pol.a.value(), pol.t.value(), pol.d.value());
            lb * (1.0 - lr) * a + lr * lb * t * (binary_entropy(d) + 1.0 - d)
        }
        QueueState::B => {
            let (b, z, r) = (pol.b.value(), pol.z.value(), pol.r.value());
            lr * (1.0 - lb) * b + lr * lb * z * (binary_entropy(r) + 1.0 - r)
        }
        QueueState::RB => 1.0,
    }
}

/// Next-state distribution, indexed by [`QueueState::index`].
pub fn transition_row(q: QueueState, policy: &ParametricPolicy, rates: &RatePair) -> [f64; 4] {
    let (lr, lb) = (rates.r(), rates.b());
    let only_r = lr * (1.0 - lb);
    let only_b = lb * (1.0 - lr);
    let both = lr * lb;
    let pol = policy;
    let (to_r, to_b, to_rb) = match q {
        QueueState::Empty => {
            let (s, y, p) = (pol.s.value(), pol.y.value(), pol.p.value());
            (
                only_r * pol.alpha.value() + both * s * y * (1.0 - p),
                only_b * pol.beta.value() + both * s * y * p,
                both * (1.0 - s),
            )
        }
        QueueState::R => {
            let (t, d) = (pol.t.value(), pol.d.value());
            (
                only_r * pol.gamma.value() + both * t * (1.0 - d),
                only_b * (1.0 - pol.a.value()) + both * t * d,
                both * (1.0 - t),
            )
        }
        QueueState::B => {
            let (z, r) = (pol.z.value(), pol.r.value());
            (
                only_r * (1.0 - pol.b.value()) + both * z * r,
                only_b * pol.delta.value() + both * z * (1.0 - r),
                both * (1.0 - z),
            )
        }
        QueueState::RB => (only_r, only_b, both),
    };
    let to_empty = (1.0 - to_r - to_b - to_rb).max(0.0);
    [to_empty, to_r, to_b, to_rb]
}

/// Every branch the policy can take on `(q, arrival)`, with its probability.
/// Zero-probability branches are omitted.
pub fn outcomes(q: QueueState, arrival: ArrivalSymbol, policy: &ParametricPolicy) -> Vec<Outcome> {
    use OutputWord as O;
    use QueueState as Q;

    let mut out = Vec::with_capacity(5);
    let mut push = |prob: f64, output: OutputWord, next_queue: QueueState| {
        if prob > 0.0 {
            out.push(Outcome {
                prob,
                output,
                next_queue,
            });
        }
    };
    let pol = policy;
    match (q, arrival) {
        (Q::Empty, Q::Empty) => push(1.0, O::Empty, Q::Empty),
        (Q::Empty, Q::R) => {
            let alpha = pol.alpha.value();
            push(alpha, O::Empty, Q::R);
            push(1.0 - alpha, O::R, Q::Empty);
        }
        (Q::Empty, Q::B) => {
            let beta = pol.beta.value();
            push(beta, O::Empty, Q::B);
            push(1.0 - beta, O::B, Q::Empty);
        }
        (Q::Empty, Q::RB) => {
            let (s, y, p) = (pol.s.value(), pol.y.value(), pol.p.value());
            push(1.0 - s, O::Empty, Q::RB);
            push(0.5 * s * (1.0 - y), O::RB, Q::Empty);
            push(0.5 * s * (1.0 - y), O::BR, Q::Empty);
            push(s * y * p, O::R, Q::B);
            push(s * y * (1.0 - p), O::B, Q::R);
        }
        (Q::R, Q::Empty) => push(1.0, O::R, Q::Empty),
        (Q::R, Q::R) => {
            let gamma = pol.gamma.value();
            push(gamma, O::R, Q::R);
            push(1.0 - gamma, O::RR, Q::Empty);
        }
        (Q::R, Q::B) => {
            let a = pol.a.value();
            push(0.5 * a, O::RB, Q::Empty);
            push(0.5 * a, O::BR, Q::Empty);
            push(1.0 - a, O::R, Q::B);
        }
        (Q::R, Q::RB) => {
            let (t, d) = (pol.t.value(), pol.d.value());
            // The held R must leave now, so "hold both arrivals" still sends it.
            push(1.0 - t, O::R, Q::RB);
            push(t * d, O::RR, Q::B);
            push(0.5 * t * (1.0 - d), O::RB, Q::R);
            push(0.5 * t * (1.0 - d), O::BR, Q::R);
        }
        (Q::B, Q::Empty) => push(1.0, O::B, Q::Empty),
        (Q::B, Q::B) => {
            let delta = pol.delta.value();
            push(delta, O::B, Q::B);
            push(1.0 - delta, O::BB, Q::Empty);
        }
        (Q::B, Q::R) => {
            let b = pol.b.value();
            push(0.5 * b, O::RB, Q::Empty);
            push(0.5 * b, O::BR, Q::Empty);
            push(1.0 - b, O::B, Q::R);
        }
        (Q::B, Q::RB) => {
            let (z, r) = (pol.z.value(), pol.r.value());
            push(1.0 - z, O::B, Q::RB);
            push(z * r, O::BB, Q::R);
            push(0.5 * z * (1.0 - r), O::RB, Q::B);
            push(0.5 * z * (1.0 - r), O::BR, Q::B);
        }
        (Q::RB, i) => {
            push(0.5, O::RB, i);
            push(0.5, O::BR, i);
        }
    }
    out
}

/// Output-word distribution for `(q, arrival)`.
pub fn output_distribution(
    q: QueueState,
    arrival: ArrivalSymbol,
    policy: &ParametricPolicy,
) -> Vec<(OutputWord, f64)> {
    let mut dist: Vec<(OutputWord, f64)> = Vec::with_capacity(4);
    for o in outcomes(q, arrival, policy) {
        match dist.iter_mut().find(|(w, _)| *w == o.output) {
            Some((_, p)) => *p += o.prob,
            None => dist.push((o.output, o.prob)),
        }
    }
    dist
}

/// `H(O | q, i, G)` for one realized arrival.
pub fn conditional_entropy(
    q: QueueState,
    arrival: ArrivalSymbol,
    policy: &ParametricPolicy,
) -> f64 {
    entropy_given_cardinality(&output_distribution(q, arrival, policy))
}

fn permutation<R: Rng + ?Sized>(rng: &mut R) -> OutputWord {
    if rng.random_bool(0.5) {
        OutputWord::RB
    } else {
        OutputWord::BR
    }
}

#[inline]
fn flip<R: Rng + ?Sized>(rng: &mut R, p: Probability) -> bool {
    rng.random_bool(p.value())
}

/// Sample one slot of the policy: transmit-or-hold first, then how many,
/// then which packet or which order.
pub fn step<R: Rng + ?Sized>(
    q: QueueState,
    arrival: ArrivalSymbol,
    policy: &ParametricPolicy,
    rng: &mut R,
) -> MixStep {
    use OutputWord as O;
    use QueueState as Q;

    let pol = policy;
    let (output, next_queue) = match (q, arrival) {
        (Q::Empty, Q::Empty) => (O::Empty, Q::Empty),
        (Q::Empty, Q::R) => {
            if flip(rng, pol.alpha) {
                (O::Empty, Q::R)
            } else {
                (O::R, Q::Empty)
            }
        }
        (Q::Empty, Q::B) => {
            if flip(rng, pol.beta) {
                (O::Empty, Q::B)
            } else {
                (O::B, Q::Empty)
            }
        }
        (Q::Empty, Q::RB) => {
            if !flip(rng, pol.s) {
                (O::Empty, Q::RB)
            } else if !flip(rng, pol.y) {
                (permutation(rng), Q::Empty)
            } else if flip(rng, pol.p) {
                (O::R, Q::B)
            } else {
                (O::B, Q::R)
            }
        }
        (Q::R, Q::Empty) => (O::R, Q::Empty),
        (Q::R, Q::R) => {
            if flip(rng, pol.gamma) {
                (O::R, Q::R)
            } else {
                (O::RR, Q::Empty)
            }
        }
        (Q::R, Q::B) => {
            if flip(rng, pol.a) {
                (permutation(rng), Q::Empty)
            } else {
                (O::R, Q::B)
            }
        }
        (Q::R, Q::RB) => {
            if !flip(rng, pol.t) {
                (O::R, Q::RB)
            } else if flip(rng, pol.d) {
                (O::RR, Q::B)
            } else {
                (permutation(rng), Q::R)
            }
        }
        (Q::B, Q::Empty) => (O::B, Q::Empty),
        (Q::B, Q::B) => {
            if flip(rng, pol.delta) {
                (O::B, Q::B)
            } else {
                (O::BB, Q::Empty)
            }
        }
        (Q::B, Q::R) => {
            if flip(rng, pol.b) {
                (permutation(rng), Q::Empty)
            } else {
                (O::B, Q::R)
            }
        }
        (Q::B, Q::RB) => {
            if !flip(rng, pol.z) {
                (O::B, Q::RB)
            } else if flip(rng, pol.r) {
                (O::BB, Q::R)
            } else {
                (permutation(rng), Q::B)
            }
        }
        (Q::RB, i) => (permutation(rng), i),
    };
    MixStep { output, next_queue }
}

/// Zero-delay optimum: forward everything, permuting simultaneous R and B.
pub fn step_t0<R: Rng + ?Sized>(arrival: ArrivalSymbol, rng: &mut R) -> OutputWord {
    match arrival {
        ArrivalSymbol::Empty => OutputWord::Empty,
        ArrivalSymbol::R => OutputWord::R,
        ArrivalSymbol::B => OutputWord::B,
        ArrivalSymbol::RB => permutation(rng),
    }
}

/// Maximum anonymity (bits/packet) with zero delay: `λ_R λ_B / (λ_R + λ_B)`.
pub fn anonymity_t0(rates: &RatePair) -> Result<f64> {
    let total = rates.total();
    if total == 0.0 {
        return Err(MixError::DegenerateInput);
    }
    Ok(rates.r() * rates.b() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PacketSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rates(r: f64, b: f64) -> RatePair {
        RatePair::new(r, b).unwrap()
    }

    fn prob(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn sym_optimal() -> ParametricPolicy {
        optimal_policy_t1(Probability::HALF, prob(1.0 / 3.0), prob(1.0 / 3.0))
    }

    #[test]
    fn reward_examples() {
        let half = rates(0.5, 0.5);
        assert_eq!(
            reward(QueueState::RB, &sym_optimal(), &rates(0.2, 0.9)),
            1.0
        );

        let mut pol = ParametricPolicy::from_array([0.0; 13]).unwrap();
        pol.s = Probability::ONE;
        pol.y = Probability::ONE;
        pol.p = Probability::HALF;
        assert!((reward(QueueState::Empty, &pol, &half) - 0.25).abs() < 1e-15);

        let mut pol = ParametricPolicy::from_array([0.0; 13]).unwrap();
        pol.a = Probability::ONE;
        pol.t = Probability::ONE;
        pol.d = prob(1.0 / 3.0);
        // λ_B(1−λ_R)·a + λ_Rλ_B·t·(H(d) + 1 − d) = 0.25 + 0.25·(log2 3 − 2/3 + 2/3)
        assert!((reward(QueueState::R, &pol, &half) - 0.646_240_625_180_289).abs() < 1e-12);
    }

    #[test]
    fn transition_examples() {
        let half = rates(0.5, 0.5);
        let row = transition_row(QueueState::RB, &sym_optimal(), &half);
        assert_eq!(row, [0.25; 4]);

        let mut pol = ParametricPolicy::from_array([0.0; 13]).unwrap();
        pol.alpha = Probability::ONE;
        pol.beta = Probability::ONE;
        pol.s = Probability::ONE;
        pol.y = Probability::ONE;
        pol.p = Probability::HALF;
        let row = transition_row(QueueState::Empty, &pol, &half);
        let expect = [0.25, 0.375, 0.375, 0.0];
        for (a, b) in row.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        for q in QueueState::ALL {
            assert_eq!(
                transition_row(q, &sym_optimal(), &rates(0.0, 0.0)),
                [1.0, 0.0, 0.0, 0.0]
            );
        }
    }

    #[test]
    fn outcomes_agree_with_tables() {
        // Averaging the branch tree over arrivals must reproduce both tables.
        let grid = [0.0, 0.13, 0.5, 0.77, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &lr in &grid {
            for &lb in &grid {
                let rp = rates(lr, lb);
                for _ in 0..20 {
                    let pol = ParametricPolicy::from_array(std::array::from_fn(|_| rng.random()))
                        .unwrap();
                    for q in QueueState::ALL {
                        let mut row = [0.0; 4];
                        let mut h = 0.0;
                        for (i, pi) in PacketSet::ALL.iter().zip(rp.arrival_distribution()) {
                            let branches = outcomes(q, *i, &pol);
                            let mass: f64 = branches.iter().map(|o| o.prob).sum();
                            assert!((mass - 1.0).abs() < 1e-12);
                            for o in &branches {
                                row[o.next_queue.index()] += pi * o.prob;
                            }
                            h += pi * conditional_entropy(q, *i, &pol);
                        }
                        let table = transition_row(q, &pol, &rp);
                        for k in 0..4 {
                            assert!((row[k] - table[k]).abs() < 1e-12, "{q:?} {k}");
                        }
                        assert!((h - reward(q, &pol, &rp)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = [0usize; 2];
        for _ in 0..1000 {
            let st = step(
                QueueState::RB,
                ArrivalSymbol::Empty,
                &sym_optimal(),
                &mut rng,
            );
            assert_eq!(st.next_queue, QueueState::Empty);
            match st.output {
                OutputWord::RB => seen[0] += 1,
                OutputWord::BR => seen[1] += 1,
                o => panic!("unexpected {o}"),
            }
        }
        assert!(seen[0] > 400 && seen[1] > 400);

        let st = step(QueueState::R, ArrivalSymbol::B, &sym_optimal(), &mut rng);
        assert!(matches!(st.output, OutputWord::RB | OutputWord::BR));
        assert_eq!(st.next_queue, QueueState::Empty);

        let st = step(
            QueueState::Empty,
            ArrivalSymbol::R,
            &sym_optimal(),
            &mut rng,
        );
        assert_eq!(
            st,
            MixStep {
                output: OutputWord::Empty,
                next_queue: QueueState::R
            }
        );
    }

    #[test]
    fn zero_split_never_sends_same_color_pairs() {
        let pol = optimal_policy_t1(Probability::HALF, Probability::ZERO, Probability::ZERO);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            for q in [QueueState::R, QueueState::B] {
                let st = step(q, ArrivalSymbol::RB, &pol, &mut rng);
                assert!(!matches!(st.output, OutputWord::RR | OutputWord::BB));
            }
        }
    }

    #[test]
    fn t0_anonymity() {
        assert_eq!(anonymity_t0(&rates(0.5, 0.5)).unwrap(), 0.25);
        assert_eq!(anonymity_t0(&rates(0.3, 0.0)).unwrap(), 0.0);
        assert_eq!(anonymity_t0(&rates(1.0, 1.0)).unwrap(), 0.5);
        assert!(matches!(
            anonymity_t0(&rates(0.0, 0.0)),
            Err(MixError::DegenerateInput)
        ));
    }
}
