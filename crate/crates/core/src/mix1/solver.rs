//! Exact evaluation and optimization of one-slot-delay mixing policies.
//!
//! The average-reward optimality equation, normalized by `φ(∅) = 0`, reduces
//! under the optimal policy structure to three linear equations in
//! `(w, φ(R), φ(B))` once the splitting probabilities `(p*, d*, r*)` are fixed,
//! and those probabilities are in turn logistic functions of the value gap
//! `ξ = φ(R) − φ(B)`:
//!
//! ```text
//! p* = 1 / (1 + 2^ξ)     d* = 1 / (1 + 2^(1+ξ))     r* = 1 / (1 + 2^(1−ξ))
//! ```
//!
//! [`solve_fixed_point`] alternates between the two until the probabilities
//! settle. [`evaluate_policy`] computes the average reward of an arbitrary
//! stationary policy directly from its stationary distribution and serves as
//! the independent check on the solver.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{reward, transition_row, ParametricPolicy};
use crate::error::{MixError, Result};
use crate::model::{binary_entropy, Probability, QueueState, RatePair};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Iterations over which a non-decreasing step size counts as oscillation.
const OSCILLATION_WINDOW: usize = 100;
const DAMPING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    /// Optimal average reward, bits/slot.
    pub w: f64,
    pub phi_r: f64,
    pub phi_b: f64,
    pub phi_rb: f64,
    pub p_star: Probability,
    pub d_star: Probability,
    pub r_star: Probability,
    /// `w / (λ_R + λ_B)`, bits/packet.
    pub anonymity: f64,
    pub iterations: usize,
    pub converged: bool,
    pub damped: bool,
}

impl SolveResult {
    pub fn xi(&self) -> f64 {
        self.phi_r - self.phi_b
    }

    pub fn policy(&self) -> ParametricPolicy {
        ParametricPolicy::optimal(self.p_star, self.d_star, self.r_star)
    }
}

/// Stationary distribution of the four-state queue chain, indexed by
/// [`QueueState::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution4(pub [f64; 4]);

impl StationaryDistribution4 {
    pub fn get(&self, q: QueueState) -> f64 {
        self.0[q.index()]
    }

    /// Largest entry of `|π P − π|`.
    pub fn balance_residual(&self, policy: &ParametricPolicy, rates: &RatePair) -> f64 {
        let mut next = [0.0; 4];
        for q in QueueState::ALL {
            let row = transition_row(q, policy, rates);
            for k in 0..4 {
                next[k] += self.0[q.index()] * row[k];
            }
        }
        next.iter()
            .zip(self.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub w: f64,
    pub anonymity: f64,
    pub pi: StationaryDistribution4,
}

fn both_saturated(rates: &RatePair) -> bool {
    rates.r() >= 1.0 && rates.b() >= 1.0
}

fn per_packet(w: f64, rates: &RatePair) -> f64 {
    let total = rates.total();
    if total > 0.0 {
        w / total
    } else {
        0.0
    }
}

/// Average reward of a fixed stationary policy, from a direct solve of the
/// balance equations `π P = π`, `Σ π = 1`.
pub fn evaluate_policy(policy: &ParametricPolicy, rates: &RatePair) -> Result<PolicyValue> {
    if both_saturated(rates) {
        return Err(MixError::NonstationaryRegime);
    }
    // Rows 0..3 are (P^T - I) π = 0; the last balance row is replaced by Σ π = 1.
    let mut a = Matrix4::<f64>::zeros();
    for q in QueueState::ALL {
        let row = transition_row(q, policy, rates);
        for (k, p) in row.iter().enumerate() {
            a[(k, q.index())] += p;
        }
        a[(q.index(), q.index())] -= 1.0;
    }
    for j in 0..4 {
        a[(3, j)] = 1.0;
    }
    let rhs = Vector4::new(0.0, 0.0, 0.0, 1.0);
    let sol = a.lu().solve(&rhs).ok_or(MixError::NonstationaryRegime)?;
    if sol.iter().any(|v| !v.is_finite() || *v < -1e-9) {
        return Err(MixError::NonstationaryRegime);
    }
    let mut pi = [0.0; 4];
    for (k, v) in sol.iter().enumerate() {
        pi[k] = v.max(0.0);
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);

    let w = QueueState::ALL
        .iter()
        .map(|&q| pi[q.index()] * reward(q, policy, rates))
        .sum();
    Ok(PolicyValue {
        w,
        anonymity: per_packet(w, rates),
        pi: StationaryDistribution4(pi),
    })
}

/// The optimal splitting probabilities `(p*, d*, r*)` as functions of `ξ`.
pub fn splitting_probabilities(xi: f64) -> (f64, f64, f64) {
    let p = 1.0 / (1.0 + xi.exp2());
    let d = 1.0 / (1.0 + (1.0 + xi).exp2());
    let r = 1.0 / (1.0 + (1.0 - xi).exp2());
    (p, d, r)
}

/// `g(ξ) = (d* − p*)(−ξ) + H(d*) − H(p*) − d*`, nondecreasing on `[−1, 1]`.
pub fn g_func(xi: f64) -> f64 {
    let (p, d, _) = splitting_probabilities(xi);
    (d - p) * (-xi) + binary_entropy(d) - binary_entropy(p) - d
}

/// `f(ξ) = (r* + p*)ξ + H(r*) − H(p*) − r* − ξ`, nonincreasing on `[−1, 1]`.
pub fn f_func(xi: f64) -> f64 {
    let (p, _, r) = splitting_probabilities(xi);
    (r + p) * xi + binary_entropy(r) - binary_entropy(p) - r - xi
}

/// `H(p*) + (1 − p*)φ(R) + p*φ(B)`.
pub fn psi1(xi: f64, phi_r: f64) -> f64 {
    let (p, _, _) = splitting_probabilities(xi);
    binary_entropy(p) - p * xi + phi_r
}

/// `H(d*) − d*ξ − d*`.
pub fn psi2(xi: f64) -> f64 {
    let (_, d, _) = splitting_probabilities(xi);
    binary_entropy(d) - d * xi - d
}

/// `H(r*) + r*ξ − r*`.
pub fn psi3(xi: f64) -> f64 {
    let (_, _, r) = splitting_probabilities(xi);
    binary_entropy(r) + r * xi - r
}

fn phi_rb_from_values(w: f64, phi_r: f64, phi_b: f64, rates: &RatePair) -> f64 {
    let (lr, lb) = (rates.r(), rates.b());
    (1.0 + lr * (1.0 - lb) * phi_r + lb * (1.0 - lr) * phi_b - w) / (1.0 - lr * lb)
}

/// Closed form for equal rates, where `ξ = 0`, `p* = 1/2`, `d* = r* = 1/3`.
pub fn solve_symmetric(lambda: Probability) -> Result<SolveResult> {
    let l = lambda.value();
    if l >= 1.0 {
        return Err(MixError::NonstationaryRegime);
    }
    let log3 = 3f64.log2();
    let denom = -l * l + l + 1.0;
    let phi = (l * l * (log3 - 2.0) + l) / denom;
    let w = l * l / denom * (-l * l * (log3 - 1.0) + 2.0 * (log3 - 2.0) * l + 3.0);
    let rates = RatePair {
        lambda_r: lambda,
        lambda_b: lambda,
    };
    let third = Probability::new(1.0 / 3.0)?;
    Ok(SolveResult {
        w,
        phi_r: phi,
        phi_b: phi,
        phi_rb: phi_rb_from_values(w, phi, phi, &rates),
        p_star: Probability::HALF,
        d_star: third,
        r_star: third,
        anonymity: per_packet(w, &rates),
        iterations: 0,
        converged: true,
        damped: false,
    })
}

/// Solve the three linear optimality equations for `(w, φ(R), φ(B))` with the
/// splitting probabilities frozen.
fn solve_values(rates: &RatePair, p: f64, d: f64, r: f64) -> Result<(f64, f64, f64)> {
    let (lr, lb) = (rates.r(), rates.b());
    let both = lr * lb;
    let a = Matrix3::new(
        1.0,
        -lr * (1.0 - lb * p),
        -lb * (1.0 - lr * (1.0 - p)),
        1.0,
        1.0 - lr * (1.0 - lb) - both * (1.0 - d),
        -both * d,
        1.0,
        -both * r,
        1.0 - lb * (1.0 - lr) - both * (1.0 - r),
    );
    let rhs = Vector3::new(
        both * binary_entropy(p),
        lb * (1.0 - lr) + both * (binary_entropy(d) + 1.0 - d),
        lr * (1.0 - lb) + both * (binary_entropy(r) + 1.0 - r),
    );
    // LU with partial pivoting; a singular system only arises at λ_R = λ_B = 1.
    let x = a.lu().solve(&rhs).ok_or(MixError::NonstationaryRegime)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MixError::NonstationaryRegime);
    }
    Ok((x[0], x[1], x[2]))
}

/// Alternate between the linear value solve and the logistic probability
/// update until no probability moves by more than `tol`.
pub fn solve_fixed_point(rates: &RatePair, tol: f64, max_iter: usize) -> Result<SolveResult> {
    if both_saturated(rates) {
        return Err(MixError::NonstationaryRegime);
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(MixError::domain("tolerance must be positive"));
    }

    let (mut p, mut d, mut r) = (0.5, 1.0 / 3.0, 1.0 / 3.0);
    let mut steps: Vec<f64> = Vec::new();
    let mut damped = false;
    let mut last = None;

    for iter in 1..=max_iter {
        let (w, phi_r, phi_b) = solve_values(rates, p, d, r)?;
        let (np, nd, nr) = splitting_probabilities(phi_r - phi_b);
        let (np, nd, nr) = if damped {
            (
                p + DAMPING * (np - p),
                d + DAMPING * (nd - d),
                r + DAMPING * (nr - r),
            )
        } else {
            (np, nd, nr)
        };
        let change = (np - p).abs().max((nd - d).abs()).max((nr - r).abs());
        (p, d, r) = (np, nd, nr);
        last = Some((w, phi_r, phi_b));

        if change <= tol {
            return finish(rates, (w, phi_r, phi_b), (p, d, r), iter, true, damped);
        }
        steps.push(change);
        if !damped && steps.len() > OSCILLATION_WINDOW {
            let earlier = steps[steps.len() - 1 - OSCILLATION_WINDOW];
            if change >= earlier {
                damped = true;
            }
        }
    }

    let values = last.unwrap_or((0.0, 0.0, 0.0));
    let result = finish(rates, values, (p, d, r), max_iter, false, damped)?;
    Err(MixError::Convergence {
        iterations: max_iter,
        last: Box::new(result),
    })
}

fn finish(
    rates: &RatePair,
    (w, phi_r, phi_b): (f64, f64, f64),
    (p, d, r): (f64, f64, f64),
    iterations: usize,
    converged: bool,
    damped: bool,
) -> Result<SolveResult> {
    Ok(SolveResult {
        w,
        phi_r,
        phi_b,
        phi_rb: phi_rb_from_values(w, phi_r, phi_b, rates),
        p_star: Probability::new(p)?,
        d_star: Probability::new(d)?,
        r_star: Probability::new(r)?,
        anonymity: per_packet(w, rates),
        iterations,
        converged,
        damped,
    })
}

/// Solve for the optimum, using the closed form when the rates are equal.
pub fn solve(rates: &RatePair, tol: f64, max_iter: usize) -> Result<SolveResult> {
    if rates.r() == rates.b() {
        solve_symmetric(rates.lambda_r)
    } else {
        solve_fixed_point(rates, tol, max_iter)
    }
}

/// Slack below which an inequality counts as violated.
pub const KKT_SLACK: f64 = -1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktCondition {
    pub name: &'static str,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub conditions: Vec<KktCondition>,
}

impl KktReport {
    pub fn all_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&KktCondition> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Check the sufficient conditions under which the gated parameters of the
/// optimal policy are all 1, plus the value bounds.
pub fn verify_kkt(result: &SolveResult, rates: &RatePair) -> KktReport {
    let (phi_r, phi_b, phi_rb) = (result.phi_r, result.phi_b, result.phi_rb);
    let p = result.p_star.value();
    let d = result.d_star.value();
    let r = result.r_star.value();
    let (h_p, h_d, h_r) = (binary_entropy(p), binary_entropy(d), binary_entropy(r));
    let xi = result.xi();
    let floor = 5f64.log2() - 2.0;
    let (lr, lb) = (rates.r(), rates.b());
    let via_psi1 = (1.0 - lr * lb * psi1(xi, phi_r)) / (1.0 - lr * lb);

    let slacks = [
        ("single_send", h_p - 1.0 + (1.0 - p) * phi_r + p * phi_b),
        (
            "transmit_on_rb",
            h_p + (1.0 - p) * phi_r + p * phi_b - phi_rb,
        ),
        (
            "pair_from_r",
            h_d + 1.0 - d + (1.0 - d) * phi_r + d * phi_b - phi_rb,
        ),
        (
            "pair_from_b",
            h_r + 1.0 - r + (1.0 - r) * phi_b + r * phi_r - phi_rb,
        ),
        ("phi_r_nonneg", phi_r),
        ("phi_r_le_one", 1.0 - phi_r),
        ("phi_b_nonneg", phi_b),
        ("phi_b_le_one", 1.0 - phi_b),
        ("phi_rb_le_one", 1.0 - phi_rb),
        ("phi_rb_identity", 1e-9 - (phi_rb - via_psi1).abs()),
        ("psi2_floor", psi2(xi) - floor),
        ("psi3_floor", psi3(xi) - floor),
    ];
    KktReport {
        conditions: slacks
            .into_iter()
            .map(|(name, slack)| KktCondition {
                name,
                slack,
                pass: slack >= KKT_SLACK,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentResult {
    pub best_policy: ParametricPolicy,
    pub best_w: f64,
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;
const MAX_SWEEPS: usize = 400;

fn value_of(params: &[f64; 13], rates: &RatePair) -> f64 {
    ParametricPolicy::from_array(*params)
        .and_then(|pol| evaluate_policy(&pol, rates))
        .map(|v| v.w)
        .unwrap_or(f64::NEG_INFINITY)
}

fn line_search(params: &mut [f64; 13], k: usize, rates: &RatePair, tol: f64) -> f64 {
    let at = |x: f64| {
        let mut trial = *params;
        trial[k] = x;
        (value_of(&trial, rates), x)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let (mut f1, _) = at(x1);
    let (mut f2, _) = at(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = at(x2).0;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = at(x1).0;
        }
    }
    let current = at(params[k]);
    let best = [at(0.0), at(1.0), at(0.5 * (lo + hi)), current]
        .into_iter()
        .fold(current, |acc, c| if c.0 > acc.0 { c } else { acc });
    params[k] = best.1;
    best.0
}

/// Cyclic coordinate ascent over all 13 parameters, with a golden-section
/// search per coordinate. Starts from the optimal-structure policy with
/// `(1/2, 1/3, 1/3)` and from `seeds` uniformly random policies.
pub fn coordinate_ascent(rates: &RatePair, seeds: usize, tol: f64, seed: u64) -> AscentResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![ParametricPolicy::optimal(
        Probability::HALF,
        Probability::new(1.0 / 3.0).expect("valid"),
        Probability::new(1.0 / 3.0).expect("valid"),
    )
    .to_array()];
    for _ in 0..seeds {
        starts.push(std::array::from_fn(|_| rng.random::<f64>()));
    }

    let mut best = (f64::NEG_INFINITY, starts[0]);
    for mut params in starts {
        let mut value = value_of(&params, rates);
        for _ in 0..MAX_SWEEPS {
            let before = value;
            for k in 0..ParametricPolicy::NUM_PARAMS {
                value = line_search(&mut params, k, rates, tol);
            }
            if value - before <= tol * 1e-2 {
                break;
            }
        }
        if value > best.0 {
            best = (value, params);
        }
    }
    AscentResult {
        best_policy: ParametricPolicy::from_array(best.1).expect("parameters stay in [0, 1]"),
        best_w: best.0,
    }
}
