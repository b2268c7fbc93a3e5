//! The two-input, two-output mix under perfect anonymity.
//!
//! Both output links must fire in exactly the same slots, so a packet can
//! only leave together with a packet of the other color. When the red flow is
//! faster it must shed `λ_R − λ_B` packets per slot. Two strategies:
//!
//! * strict delay `T`: pair head-of-line packets, drop a head-of-line packet
//!   once it has waited `T` slots with nothing to pair it with ([`HolMix`]);
//! * no delay bound: keep at most `m` red packets, dropping the oldest red on
//!   overflow ([`ThresholdMix`]). The backlog is a birth–death chain with
//!   ratio `ρ = λ_B(1−λ_R) / (λ_R(1−λ_B))` and the best `m` has a closed form.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{MixError, Result};
use crate::model::{Color, Probability, RatePair};

pub const DEFAULT_Y_MAX: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Mix2State {
    pub red_backlog: u64,
    pub blue_backlog: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub m: u32,
}

impl ThresholdPolicy {
    /// Drop probability `δ_x` in red state `x`.
    pub fn delta(&self, x: u32) -> f64 {
        if x >= self.m {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_profile(&self) -> DropProfile {
        let mut delta = vec![Probability::ZERO; self.m as usize];
        delta.push(Probability::ONE);
        DropProfile { delta }
    }
}

/// Rates relabeled so that the faster flow is red.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oriented {
    pub rates: RatePair,
    pub swapped: bool,
    pub rho: f64,
}

pub fn orient_and_rho(rates: &RatePair) -> Result<Oriented> {
    let (lr, lb) = (rates.r(), rates.b());
    for v in [lr, lb] {
        if v <= 0.0 || v >= 1.0 {
            return Err(MixError::domain(format!(
                "arrival rate {v} must lie strictly between 0 and 1"
            )));
        }
    }
    if lr == lb {
        return Err(MixError::SingularRates);
    }
    let swapped = lr < lb;
    let rates = if swapped { rates.swapped() } else { *rates };
    let (lr, lb) = (rates.r(), rates.b());
    Ok(Oriented {
        rates,
        swapped,
        rho: lb * (1.0 - lr) / (lr * (1.0 - lb)),
    })
}

fn check_rho(rho: f64) -> Result<()> {
    if rho >= 1.0 {
        Err(MixError::SingularRates)
    } else if rho.is_nan() || rho < 0.0 {
        Err(MixError::domain(format!(
            "traffic ratio {rho} must be in [0, 1)"
        )))
    } else {
        Ok(())
    }
}

/// Smallest `m` with `2ρ^(m+1) ≤ 1`: zero for `ρ ≤ 1/2`, else `⌈−1/log2 ρ⌉ − 1`.
pub fn optimal_threshold(rho: f64) -> Result<u32> {
    check_rho(rho)?;
    if rho <= 0.5 {
        return Ok(0);
    }
    let mut m = ((-1.0 / rho.log2()).ceil() - 1.0).max(0.0) as u32;
    // Guard the ceiling against rounding exactly at the jump points.
    while m > 0 && 2.0 * rho.powi(m as i32) <= 1.0 {
        m -= 1;
    }
    while 2.0 * rho.powi(m as i32 + 1) > 1.0 {
        m += 1;
    }
    Ok(m)
}

/// Mean total backlog under threshold `m`: `(2ρ^(m+1) + m(1−ρ) − ρ) / (1−ρ)`.
pub fn mean_queue_length(m: u32, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok((2.0 * rho.powi(m as i32 + 1) + m as f64 * (1.0 - rho) - rho) / (1.0 - rho))
}

/// Stationary distribution over the one-sided backlog states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mix2Stationary {
    pub pi_00: f64,
    /// `π(x, 0)` for `x = 1, 2, ...`.
    pub red: Vec<f64>,
    /// `π(0, y)` for `y = 1..=y_max`.
    pub blue: Vec<f64>,
    /// Mass of `π(0, y)` for `y > y_max`.
    pub blue_tail_mass: f64,
}

impl Mix2Stationary {
    pub fn get(&self, state: Mix2State) -> f64 {
        match (state.red_backlog, state.blue_backlog) {
            (0, 0) => self.pi_00,
            (x, 0) => self.red.get(x as usize - 1).copied().unwrap_or(0.0),
            (0, y) => self.blue.get(y as usize - 1).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.pi_00
            + self.red.iter().sum::<f64>()
            + self.blue.iter().sum::<f64>()
            + self.blue_tail_mass
    }

    /// Largest per-state difference over the states both distributions report.
    pub fn max_abs_diff(&self, other: &Mix2Stationary) -> f64 {
        let side = |a: &[f64], b: &[f64]| {
            (0..a.len().max(b.len()))
                .map(|i| (a.get(i).unwrap_or(&0.0) - b.get(i).unwrap_or(&0.0)).abs())
                .fold(0.0, f64::max)
        };
        (self.pi_00 - other.pi_00)
            .abs()
            .max(side(&self.red, &other.red))
            .max(side(&self.blue, &other.blue))
    }
}

/// Closed-form stationary distribution under threshold `m`:
/// `π(0,0) = (1−ρ)ρ^m`, `π(x,0) = π(0,0)ρ^(−x)`, `π(0,y) = π(0,0)ρ^y`.
pub fn stationary_distribution(m: u32, rho: f64, y_max: usize) -> Result<Mix2Stationary> {
    check_rho(rho)?;
    let pi_00 = (1.0 - rho) * rho.powi(m as i32);
    // π(x,0) = (1−ρ)ρ^(m−x), written without negative powers so ρ = 0 is fine.
    let red = (1..=m)
        .map(|x| (1.0 - rho) * rho.powi((m - x) as i32))
        .collect();
    let blue: Vec<f64> = (1..=y_max).map(|y| pi_00 * rho.powi(y as i32)).collect();
    let blue_tail_mass = pi_00 * rho.powi(y_max as i32 + 1) / (1.0 - rho);
    Ok(Mix2Stationary {
        pi_00,
        red,
        blue,
        blue_tail_mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropRate {
    /// `λ_R − λ_B` on oriented rates.
    pub rate: f64,
    /// `π(m,0) λ_R (1−λ_B)`, which must equal `rate` for every `m`.
    pub via_stationary: f64,
}

pub fn drop_rate(m: u32, oriented: &Oriented) -> Result<DropRate> {
    let (lr, lb) = (oriented.rates.r(), oriented.rates.b());
    let pi = stationary_distribution(m, oriented.rho, 0)?;
    let pi_m0 = if m == 0 {
        pi.pi_00
    } else {
        pi.red[m as usize - 1]
    };
    Ok(DropRate {
        rate: lr - lb,
        via_stationary: pi_m0 * lr * (1.0 - lb),
    })
}

/// Per-state red drop probabilities `δ_x`, `x = 0..len`. Red states past the
/// first `δ_x = 1` are unreachable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropProfile {
    pub delta: Vec<Probability>,
}

impl DropProfile {
    pub fn new(delta: Vec<Probability>) -> Result<Self> {
        let profile = DropProfile { delta };
        profile.cap()?;
        Ok(profile)
    }

    /// Index of the first certain drop, i.e. the largest reachable red backlog.
    pub fn cap(&self) -> Result<usize> {
        self.delta
            .iter()
            .position(|d| d.value() >= 1.0)
            .ok_or_else(|| {
                MixError::Stability(
                    "no state drops with probability 1, so the red backlog is unbounded".into(),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEvaluation {
    pub mean_queue: f64,
    pub pi: Mix2Stationary,
}

/// Thomas algorithm for `sub[i] x[i-1] + diag[i] x[i] + sup[i] x[i+1] = rhs[i]`.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    if n == 0 {
        return Vec::new();
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / denom;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// One side of the backlog chain, states `1..=n` hanging off `(0,0)`:
/// `up[k]` is the rate from side state `k` to `k+1` (index 0 is `(0,0)`),
/// `down` the constant rate back toward `(0,0)`. Returns masses relative to
/// `π(0,0) = 1`.
fn solve_side(up: &[f64], down: f64, n: usize) -> Vec<f64> {
    // Balance at side state k: π(k−1)up[k−1] + π(k+1)down = π(k)(up[k] + down),
    // with no up-move out of state n.
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let k = i + 1;
        let out_up = if k < n { up[k] } else { 0.0 };
        diag[i] = -(out_up + down);
        if i > 0 {
            sub[i] = up[k - 1];
        } else {
            rhs[i] = -up[0];
        }
        if k < n {
            sup[i] = down;
        }
    }
    solve_tridiagonal(&sub, &diag, &sup, &rhs)
}

/// Mean backlog of an arbitrary drop profile by a linear solve of the
/// truncated balance equations. The blue side is cut at `y_max` and its
/// geometric tail is added back analytically.
pub fn evaluate_drop_profile(
    profile: &DropProfile,
    rho: f64,
    y_max: usize,
) -> Result<ProfileEvaluation> {
    check_rho(rho)?;
    let cap = profile.cap()?;

    // Time rescaled so a lone red arrival has rate 1 and a lone blue arrival rate ρ.
    let red_up: Vec<f64> = profile.delta[..=cap]
        .iter()
        .map(|d| 1.0 - d.value())
        .collect();
    let red = solve_side(&red_up, rho, cap);
    let blue_up = vec![rho; y_max + 1];
    let blue = solve_side(&blue_up, 1.0, y_max);

    let (tail_mass, tail_mean) = match blue.last() {
        Some(&last) if rho > 0.0 => {
            let y = y_max as f64;
            (
                last * rho / (1.0 - rho),
                last * (y * rho / (1.0 - rho) + rho / ((1.0 - rho) * (1.0 - rho))),
            )
        }
        _ => (0.0, 0.0),
    };

    let total = 1.0 + red.iter().sum::<f64>() + blue.iter().sum::<f64>() + tail_mass;
    let weighted =
        |v: &[f64]| -> f64 { v.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum() };
    let mean_queue = (weighted(&red) + weighted(&blue) + tail_mean) / total;
    Ok(ProfileEvaluation {
        mean_queue,
        pi: Mix2Stationary {
            pi_00: 1.0 / total,
            red: red.iter().map(|p| p / total).collect(),
            blue: blue.iter().map(|p| p / total).collect(),
            blue_tail_mass: tail_mass / total,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mix2Analysis {
    pub oriented: Oriented,
    pub rho: f64,
    pub pi_00: f64,
    pub m_star: u32,
    pub mean_queue: f64,
    pub drop_rate: f64,
}

pub fn analyze(rates: &RatePair) -> Result<Mix2Analysis> {
    let oriented = orient_and_rho(rates)?;
    let rho = oriented.rho;
    let m_star = optimal_threshold(rho)?;
    Ok(Mix2Analysis {
        oriented,
        rho,
        pi_00: (1.0 - rho) * rho.powi(m_star as i32),
        m_star,
        mean_queue: mean_queue_length(m_star, rho)?,
        drop_rate: drop_rate(m_star, &oriented)?.rate,
    })
}

/// A packet identified by the slot it arrived in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub color: Color,
    pub arrival_slot: u64,
}

/// Result of one slot of a two-output mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SlotOutcome {
    /// Arrival slots of the `(red, blue)` pair sent this slot, if any.
    pub pair: Option<(u64, u64)>,
    pub dropped: Option<Packet>,
}

impl SlotOutcome {
    /// Output-link indicators `(G₁, G₂)`.
    pub fn indicators(&self) -> (bool, bool) {
        (self.pair.is_some(), self.pair.is_some())
    }
}

#[derive(Debug, Clone, Default)]
struct Queues {
    red: VecDeque<u64>,
    blue: VecDeque<u64>,
}

impl Queues {
    fn admit(&mut self, slot: u64, red: bool, blue: bool) {
        if red {
            self.red.push_back(slot);
        }
        if blue {
            self.blue.push_back(slot);
        }
    }

    fn pair(&mut self) -> Option<(u64, u64)> {
        if self.red.is_empty() || self.blue.is_empty() {
            return None;
        }
        Some((self.red.pop_front()?, self.blue.pop_front()?))
    }

    fn queue(&mut self, color: Color) -> &mut VecDeque<u64> {
        match color {
            Color::Red => &mut self.red,
            Color::Blue => &mut self.blue,
        }
    }

    fn state(&self) -> Mix2State {
        Mix2State {
            red_backlog: self.red.len() as u64,
            blue_backlog: self.blue.len() as u64,
        }
    }
}

/// Head-of-line pairing under a strict delay of `T` slots. A packet that
/// arrived in slot `k` can leave no later than slot `k + T`.
#[derive(Debug, Clone)]
pub struct HolMix {
    delay: u64,
    queues: Queues,
}

impl HolMix {
    pub fn new(delay: u64) -> Self {
        HolMix {
            delay,
            queues: Queues::default(),
        }
    }

    pub fn state(&self) -> Mix2State {
        self.queues.state()
    }

    /// Arrivals first, then at most one pair departs, then an expired
    /// head-of-line packet is dropped if nothing is left to pair it with.
    pub fn step(&mut self, slot: u64, red_arrival: bool, blue_arrival: bool) -> SlotOutcome {
        self.queues.admit(slot, red_arrival, blue_arrival);
        let pair = self.queues.pair();
        let mut dropped = None;
        for color in [Color::Red, Color::Blue] {
            let other_empty = self.queues.queue(color.other()).is_empty();
            let q = self.queues.queue(color);
            if let Some(&head) = q.front() {
                if other_empty && slot - head >= self.delay {
                    q.pop_front();
                    debug_assert!(dropped.is_none());
                    dropped = Some(Packet {
                        color,
                        arrival_slot: head,
                    });
                }
            }
        }
        SlotOutcome { pair, dropped }
    }
}

/// Threshold policy: at most `m` packets of the `limited` (faster) flow are
/// held; on overflow the oldest one is dropped and the new arrival kept.
#[derive(Debug, Clone)]
pub struct ThresholdMix {
    threshold: u32,
    limited: Color,
    queues: Queues,
}

impl ThresholdMix {
    pub fn new(threshold: u32, limited: Color) -> Self {
        ThresholdMix {
            threshold,
            limited,
            queues: Queues::default(),
        }
    }

    pub fn state(&self) -> Mix2State {
        self.queues.state()
    }

    pub fn step(&mut self, slot: u64, red_arrival: bool, blue_arrival: bool) -> SlotOutcome {
        self.queues.admit(slot, red_arrival, blue_arrival);
        let pair = self.queues.pair();
        let limited = self.limited;
        let q = self.queues.queue(limited);
        let dropped = if q.len() > self.threshold as usize {
            q.pop_front().map(|arrival_slot| Packet {
                color: limited,
                arrival_slot,
            })
        } else {
            None
        };
        SlotOutcome { pair, dropped }
    }
}
