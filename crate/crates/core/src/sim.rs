//! Seeded slot-level Monte-Carlo simulation of both mixes.
//!
//! Within a slot, arrivals happen first and departures second. Arrivals are
//! independent Bernoulli draws per flow. Each run owns one ChaCha8 key split
//! into three streams (red arrivals, blue arrivals, strategy randomness), so a
//! run is reproducible bit for bit from its [`SimConfig`].
//!
//! Single-output strategies see an [`AgedBuffer`] holding the packets that
//! have waited `j` slots in cell `j`, and return the output word together with
//! the buffer they leave behind. The engine derives which packets departed
//! from that and audits every slot for per-flow reordering, delay-bound
//! violations and words that do not match the departed packets.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MixError, Result};
use crate::mix1::policy::{self, ParametricPolicy};
use crate::mix2::{HolMix, SlotOutcome, ThresholdMix};
use crate::model::{
    entropy_bits, entropy_given_cardinality, ArrivalSymbol, Color, OutputWord, PacketSet,
    QueueState, RatePair,
};

pub type SimRng = ChaCha8Rng;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

const RED_STREAM: u64 = 0;
const BLUE_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;
const ENTROPY_BATCHES: u64 = 50;
const DELAY_BINS: usize = 1024;

/// Packets inside a single-output mix, by age. Cell `j` holds what arrived
/// `j` slots before the current one and has not left yet.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgedBuffer {
    cells: Vec<PacketSet>,
}

impl AgedBuffer {
    pub fn empty(delay: usize) -> Self {
        AgedBuffer {
            cells: vec![PacketSet::Empty; delay],
        }
    }

    pub fn from_cells(cells: Vec<PacketSet>) -> Self {
        AgedBuffer { cells }
    }

    pub fn delay(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[PacketSet] {
        &self.cells
    }

    pub fn cell(&self, age: usize) -> PacketSet {
        self.cells.get(age).copied().unwrap_or_default()
    }

    pub fn packets(&self) -> usize {
        self.cells.iter().map(|c| c.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|c| c.is_empty())
    }
}

/// What a strategy does in one slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub output: OutputWord,
    /// Buffer after the slot, by age: index 0 holds kept arrivals and index
    /// `j + 1` what is kept from the old cell `j`. Length `T + 1`; the last
    /// cell must be empty.
    pub next: Vec<PacketSet>,
}

/// A mixing strategy for the single-output mix under a strict delay.
pub trait MixStrategy {
    fn delay(&self) -> usize;

    fn step(&mut self, buffer: &AgedBuffer, arrival: ArrivalSymbol, rng: &mut SimRng) -> Step;

    /// Exact output distribution for `(buffer, arrival)`, when known.
    fn output_distribution(
        &self,
        _buffer: &AgedBuffer,
        _arrival: ArrivalSymbol,
    ) -> Option<Vec<(OutputWord, f64)>> {
        None
    }
}

fn random_order(rng: &mut SimRng) -> OutputWord {
    if rng.random_bool(0.5) {
        OutputWord::RB
    } else {
        OutputWord::BR
    }
}

fn flush_word(set: PacketSet, permute: Option<&mut SimRng>) -> OutputWord {
    match set {
        PacketSet::Empty => OutputWord::Empty,
        PacketSet::R => OutputWord::R,
        PacketSet::B => OutputWord::B,
        PacketSet::RB => permute.map(random_order).unwrap_or(OutputWord::RB),
    }
}

fn flush_distribution(set: PacketSet, permute: bool) -> Vec<(OutputWord, f64)> {
    match set {
        PacketSet::RB if permute => vec![(OutputWord::RB, 0.5), (OutputWord::BR, 0.5)],
        s => vec![(flush_word(s, None), 1.0)],
    }
}

/// Zero-delay optimum: forward every arrival, permuting RB uniformly.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDelayPermute;

impl MixStrategy for ZeroDelayPermute {
    fn delay(&self) -> usize {
        0
    }

    fn step(&mut self, _buffer: &AgedBuffer, arrival: ArrivalSymbol, rng: &mut SimRng) -> Step {
        Step {
            output: policy::step_t0(arrival, rng),
            next: vec![PacketSet::Empty],
        }
    }

    fn output_distribution(
        &self,
        _buffer: &AgedBuffer,
        arrival: ArrivalSymbol,
    ) -> Option<Vec<(OutputWord, f64)>> {
        Some(flush_distribution(arrival, true))
    }
}

/// Forward every arrival immediately in a fixed order. No anonymity.
#[derive(Debug, Clone, Copy)]
pub struct FifoPassThrough {
    pub delay: usize,
}

impl MixStrategy for FifoPassThrough {
    fn delay(&self) -> usize {
        self.delay
    }

    fn step(&mut self, _buffer: &AgedBuffer, arrival: ArrivalSymbol, _rng: &mut SimRng) -> Step {
        Step {
            output: flush_word(arrival, None),
            next: vec![PacketSet::Empty; self.delay + 1],
        }
    }

    fn output_distribution(
        &self,
        _buffer: &AgedBuffer,
        arrival: ArrivalSymbol,
    ) -> Option<Vec<(OutputWord, f64)>> {
        Some(flush_distribution(arrival, false))
    }
}

/// Hold everything for exactly `T` slots, then send it as a random
/// permutation. With `T = 1` this is the collect-one-slot, flush-next batch.
#[derive(Debug, Clone, Copy)]
pub struct FixedDelayPermute {
    pub delay: usize,
}

impl MixStrategy for FixedDelayPermute {
    fn delay(&self) -> usize {
        self.delay
    }

    fn step(&mut self, buffer: &AgedBuffer, arrival: ArrivalSymbol, rng: &mut SimRng) -> Step {
        if self.delay == 0 {
            return ZeroDelayPermute.step(buffer, arrival, rng);
        }
        let mut next = Vec::with_capacity(self.delay + 1);
        next.push(arrival);
        next.extend_from_slice(&buffer.cells()[..self.delay - 1]);
        next.push(PacketSet::Empty);
        Step {
            output: flush_word(buffer.cell(self.delay - 1), Some(rng)),
            next,
        }
    }

    fn output_distribution(
        &self,
        buffer: &AgedBuffer,
        arrival: ArrivalSymbol,
    ) -> Option<Vec<(OutputWord, f64)>> {
        let leaving = if self.delay == 0 {
            arrival
        } else {
            buffer.cell(self.delay - 1)
        };
        Some(flush_distribution(leaving, true))
    }
}

/// A one-slot-delay parametric policy.
#[derive(Debug, Clone, Copy)]
pub struct ParametricT1 {
    pub policy: ParametricPolicy,
}

impl MixStrategy for ParametricT1 {
    fn delay(&self) -> usize {
        1
    }

    fn step(&mut self, buffer: &AgedBuffer, arrival: ArrivalSymbol, rng: &mut SimRng) -> Step {
        let st = policy::step(buffer.cell(0), arrival, &self.policy, rng);
        Step {
            output: st.output,
            next: vec![st.next_queue, PacketSet::Empty],
        }
    }

    fn output_distribution(
        &self,
        buffer: &AgedBuffer,
        arrival: ArrivalSymbol,
    ) -> Option<Vec<(OutputWord, f64)>> {
        Some(policy::output_distribution(
            buffer.cell(0),
            arrival,
            &self.policy,
        ))
    }
}

/// Strategies selectable by name for arbitrary `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneralStrategy {
    FixedDelayPermute,
    FifoPassThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    Mix1T0,
    Mix1T1 {
        policy: ParametricPolicy,
        #[serde(default)]
        initial: QueueState,
    },
    Mix1GeneralT {
        strategy: GeneralStrategy,
        delay: usize,
    },
    Mix2Threshold {
        m: u32,
    },
    Mix2Hol {
        delay: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rates: RatePair,
    pub horizon: u64,
    pub seed: u64,
    /// Slots excluded from statistics; defaults to 1% of the horizon, at
    /// least 1000 slots but never more than half the horizon.
    pub warmup: Option<u64>,
    pub scenario: Scenario,
    /// Fail on the first delay violation instead of counting it.
    #[serde(default)]
    pub strict: bool,
}

impl SimConfig {
    pub fn new(rates: RatePair, horizon: u64, seed: u64, scenario: Scenario) -> Self {
        SimConfig {
            rates,
            horizon,
            seed,
            warmup: None,
            scenario,
            strict: false,
        }
    }

    pub fn effective_warmup(&self) -> u64 {
        self.warmup
            .unwrap_or_else(|| (self.horizon / 100).max(1000).min(self.horizon / 2))
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.effective_warmup() >= self.horizon {
            return Err(MixError::domain(format!(
                "horizon ({}) must exceed warmup ({})",
                self.horizon,
                self.effective_warmup()
            )));
        }
        Ok(())
    }
}

/// Invariant violations seen during a run. All zero for a correct strategy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violations {
    /// A packet left while an older packet of the same flow stayed.
    pub order: u64,
    /// A packet was still inside after `T` slots.
    pub delay: u64,
    /// The output word does not match the packets that left, or a strategy
    /// kept a packet it never had.
    pub consistency: u64,
    /// The two output links did not fire together.
    pub g_sync: u64,
    /// Cumulative departures exceeded `min(A_R, A_B)`.
    pub departure_bound: u64,
    /// Both colors were waiting at the end of a slot without being paired.
    pub unpaired: u64,
    /// A packet was dropped although a partner was available in its lifetime.
    pub unforced_drop: u64,
}

impl Violations {
    pub fn total(&self) -> u64 {
        self.order
            + self.delay
            + self.consistency
            + self.g_sync
            + self.departure_bound
            + self.unpaired
            + self.unforced_drop
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub measured_slots: u64,
    pub empirical_lambda_r: f64,
    pub empirical_lambda_b: f64,
    /// Packets leaving the mix per slot (both links for the two-output mix).
    pub output_rate: f64,
    pub drop_rate: f64,
    /// Time-average number of packets held at the end of a slot.
    pub mean_queue: f64,
    pub mean_delay: f64,
    /// Delivered packets by delay in slots; the last bin collects the overflow.
    pub delay_histogram: Vec<u64>,
    /// Average `H(O_k | buffer, I_k, G_k)` from the strategy's own output
    /// distributions, bits/slot.
    pub plugin_entropy_rate: Option<f64>,
    /// Batch-means standard error of `plugin_entropy_rate`.
    pub plugin_entropy_stderr: Option<f64>,
    /// `plugin_entropy_rate` per arrived packet, bits/packet.
    pub plugin_anonymity: Option<f64>,
    pub plugin_anonymity_stderr: Option<f64>,
    /// Black-box estimate from empirical output frequencies, bits/slot.
    pub histogram_entropy_rate: Option<f64>,
    pub violations: Violations,
}

struct Streams {
    red: SimRng,
    blue: SimRng,
    policy: SimRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut rng = SimRng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Streams {
            red: stream(RED_STREAM),
            blue: stream(BLUE_STREAM),
            policy: stream(POLICY_STREAM),
        }
    }

    fn arrival(&mut self, rates: &RatePair) -> ArrivalSymbol {
        let red = self.red.random_bool(rates.r());
        let blue = self.blue.random_bool(rates.b());
        PacketSet::from_flags(red, blue)
    }
}

/// One line of the trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub slot: u64,
    pub arrival: ArrivalSymbol,
    /// Single-output mix: buffer before departures, by age.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub buffer: Option<Vec<PacketSet>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output: Option<OutputWord>,
    /// Two-output mix: backlogs after arrivals, before departures.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub red_backlog: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub blue_backlog: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dropped: Option<Color>,
}

fn write_trace(sink: &mut Option<&mut dyn Write>, record: &TraceRecord) -> Result<()> {
    if let Some(w) = sink.as_mut() {
        serde_json::to_writer(&mut **w, record)
            .map_err(|e| MixError::domain(format!("trace write failed: {e}")))?;
        w.write_all(b"\n")
            .map_err(|e| MixError::domain(format!("trace write failed: {e}")))?;
    }
    Ok(())
}

struct DelayStats {
    histogram: Vec<u64>,
    total: u64,
    count: u64,
}

impl DelayStats {
    fn new() -> Self {
        DelayStats {
            histogram: Vec::new(),
            total: 0,
            count: 0,
        }
    }

    fn record(&mut self, delay: u64) {
        let bin = (delay as usize).min(DELAY_BINS - 1);
        if self.histogram.len() <= bin {
            self.histogram.resize(bin + 1, 0);
        }
        self.histogram[bin] += 1;
        self.total += delay;
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total as f64 / self.count as f64
        }
    }
}

/// Plug-in estimate of `H(O | state, I, G)` from counts.
#[derive(Debug, Clone, Default)]
pub struct HistogramEntropy {
    cells: BTreeMap<(Vec<PacketSet>, ArrivalSymbol), [u64; 7]>,
    slots: u64,
}

/// Counts behind one conditioning cell of [`HistogramEntropy`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCount {
    pub buffer: Vec<PacketSet>,
    pub arrival: ArrivalSymbol,
    pub visits: u64,
    pub entropy: f64,
}

impl HistogramEntropy {
    pub fn add(&mut self, buffer: &AgedBuffer, arrival: ArrivalSymbol, output: OutputWord) {
        let counts = self
            .cells
            .entry((buffer.cells().to_vec(), arrival))
            .or_insert([0; 7]);
        counts[output as usize] += 1;
        self.slots += 1;
    }

    fn cell_entropy(counts: &[u64; 7]) -> f64 {
        let dist: Vec<(OutputWord, f64)> = OutputWord::ALL
            .iter()
            .map(|&w| (w, counts[w as usize] as f64))
            .collect();
        entropy_given_cardinality(&dist)
    }

    /// Bits per slot.
    pub fn rate(&self) -> f64 {
        if self.slots == 0 {
            return 0.0;
        }
        self.cells
            .values()
            .map(|c| c.iter().sum::<u64>() as f64 * Self::cell_entropy(c))
            .sum::<f64>()
            / self.slots as f64
    }

    pub fn cells(&self) -> Vec<CellCount> {
        self.cells
            .iter()
            .map(|((buffer, arrival), c)| CellCount {
                buffer: buffer.clone(),
                arrival: *arrival,
                visits: c.iter().sum(),
                entropy: Self::cell_entropy(c),
            })
            .collect()
    }
}

/// One slot of a recorded single-output trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub buffer: AgedBuffer,
    pub arrival: ArrivalSymbol,
    pub output: OutputWord,
}

/// Path average of `H(O | buffer, I, G)` using the strategy's exact output
/// distributions. Falls back to [`histogram_entropy`] when the strategy does
/// not expose them.
pub fn plugin_entropy(strategy: &dyn MixStrategy, trajectory: &[SlotRecord]) -> f64 {
    if trajectory.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for rec in trajectory {
        match strategy.output_distribution(&rec.buffer, rec.arrival) {
            Some(dist) => total += entropy_given_cardinality(&dist),
            None => return histogram_entropy(trajectory).rate(),
        }
    }
    total / trajectory.len() as f64
}

pub fn histogram_entropy(trajectory: &[SlotRecord]) -> HistogramEntropy {
    let mut h = HistogramEntropy::default();
    for rec in trajectory {
        h.add(&rec.buffer, rec.arrival, rec.output);
    }
    h
}

/// Run a single-output strategy and keep every slot. Starts from an empty buffer.
pub fn record_trajectory(
    strategy: &mut dyn MixStrategy,
    rates: &RatePair,
    horizon: u64,
    seed: u64,
) -> Vec<SlotRecord> {
    let mut streams = Streams::new(seed);
    let mut buffer = AgedBuffer::empty(strategy.delay());
    let mut out = Vec::with_capacity(horizon as usize);
    for _ in 0..horizon {
        let arrival = streams.arrival(rates);
        let st = strategy.step(&buffer, arrival, &mut streams.policy);
        out.push(SlotRecord {
            buffer: buffer.clone(),
            arrival,
            output: st.output,
        });
        let delay = strategy.delay();
        buffer = AgedBuffer::from_cells(st.next[..delay.min(st.next.len())].to_vec());
    }
    out
}

pub fn run(config: &SimConfig) -> Result<SimReport> {
    run_traced(config, None)
}

/// [`run`], additionally writing one JSON line per slot to `trace`.
pub fn run_traced(config: &SimConfig, trace: Option<&mut dyn Write>) -> Result<SimReport> {
    config.validate()?;
    match &config.scenario {
        Scenario::Mix1T0 => run_mix1(config, &mut ZeroDelayPermute, AgedBuffer::empty(0), trace),
        Scenario::Mix1T1 { policy, initial } => run_mix1(
            config,
            &mut ParametricT1 { policy: *policy },
            AgedBuffer::from_cells(vec![*initial]),
            trace,
        ),
        Scenario::Mix1GeneralT { strategy, delay } => {
            let initial = AgedBuffer::empty(*delay);
            match strategy {
                GeneralStrategy::FixedDelayPermute => run_mix1(
                    config,
                    &mut FixedDelayPermute { delay: *delay },
                    initial,
                    trace,
                ),
                GeneralStrategy::FifoPassThrough => run_mix1(
                    config,
                    &mut FifoPassThrough { delay: *delay },
                    initial,
                    trace,
                ),
            }
        }
        Scenario::Mix2Threshold { m } => {
            let limited = if config.rates.b() > config.rates.r() {
                Color::Blue
            } else {
                Color::Red
            };
            let mut mix = ThresholdMix::new(*m, limited);
            run_mix2(config, false, trace, |slot, r, b| {
                (mix.step(slot, r, b), mix.state())
            })
        }
        Scenario::Mix2Hol { delay } => {
            let mut mix = HolMix::new(*delay);
            run_mix2(config, true, trace, |slot, r, b| {
                (mix.step(slot, r, b), mix.state())
            })
        }
    }
}

/// Simulate a caller-supplied single-output strategy from `initial`.
pub fn run_mix1(
    config: &SimConfig,
    strategy: &mut dyn MixStrategy,
    initial: AgedBuffer,
    mut trace: Option<&mut dyn Write>,
) -> Result<SimReport> {
    config.validate()?;
    let delay = strategy.delay();
    if initial.delay() != delay {
        return Err(MixError::domain(format!(
            "initial buffer has {} cells but the strategy delay is {delay}",
            initial.delay()
        )));
    }
    let warmup = config.effective_warmup();
    let measured = config.horizon - warmup;
    let batch_len = (measured / ENTROPY_BATCHES).max(1);

    let mut streams = Streams::new(config.seed);
    let mut buffer = initial;
    let mut violations = Violations::default();
    let mut delays = DelayStats::new();
    let mut histogram = HistogramEntropy::default();
    let (mut arrivals_r, mut arrivals_b, mut sent, mut held) = (0u64, 0u64, 0u64, 0u64);
    let mut plugin_total = 0.0;
    let mut plugin_known = true;
    let mut batches: Vec<(f64, f64)> = Vec::new();
    let (mut batch_sum, mut batch_arrivals) = (0.0, 0.0);

    for slot in 0..config.horizon {
        let arrival = streams.arrival(&config.rates);
        let st = strategy.step(&buffer, arrival, &mut streams.policy);
        let measuring = slot >= warmup;

        write_trace(
            &mut trace,
            &TraceRecord {
                schema_version: TRACE_SCHEMA_VERSION,
                slot,
                arrival,
                buffer: Some(buffer.cells().to_vec()),
                output: Some(st.output),
                red_backlog: None,
                blue_backlog: None,
                pair: None,
                dropped: None,
            },
        )?;

        // Sources by post-slot age: the arrival is age 0, old cell j is age j + 1.
        let mut sources = Vec::with_capacity(delay + 1);
        sources.push(arrival);
        sources.extend_from_slice(buffer.cells());

        let mut next = st.next.clone();
        next.resize(delay + 1, PacketSet::Empty);
        let mut departed = Vec::with_capacity(delay + 1);
        for (age, (&src, kept)) in sources.iter().zip(next.iter_mut()).enumerate() {
            if !kept.is_subset_of(src) {
                violations.consistency += 1;
                *kept = PacketSet::from_flags(
                    kept.has_red() && src.has_red(),
                    kept.has_blue() && src.has_blue(),
                );
            }
            departed.push(src.minus(*kept));
            if age == delay && !kept.is_empty() {
                violations.delay += 1;
                if config.strict {
                    return Err(MixError::DelayViolation { slot, delay });
                }
                *kept = PacketSet::Empty;
            }
        }

        let left_red = departed.iter().filter(|d| d.has_red()).count();
        let left_blue = departed.iter().filter(|d| d.has_blue()).count();
        if left_red != st.output.reds() || left_blue != st.output.blues() {
            violations.consistency += 1;
        }
        for color in [Color::Red, Color::Blue] {
            let youngest_leaving = departed.iter().position(|d| d.has(color));
            let oldest_staying = next.iter().rposition(|k| k.has(color));
            if let (Some(leaving), Some(staying)) = (youngest_leaving, oldest_staying) {
                if staying > leaving {
                    violations.order += 1;
                }
            }
        }

        if measuring {
            arrivals_r += arrival.has_red() as u64;
            arrivals_b += arrival.has_blue() as u64;
            sent += st.output.cardinality() as u64;
            for (age, d) in departed.iter().enumerate() {
                for _ in 0..d.len() {
                    delays.record(age as u64);
                }
            }
            histogram.add(&buffer, arrival, st.output);
            if plugin_known {
                match strategy.output_distribution(&buffer, arrival) {
                    Some(dist) => {
                        let h = entropy_given_cardinality(&dist);
                        plugin_total += h;
                        batch_sum += h;
                        batch_arrivals += arrival.len() as f64;
                        if (slot - warmup + 1).is_multiple_of(batch_len) {
                            batches.push((batch_sum, batch_arrivals));
                            batch_sum = 0.0;
                            batch_arrivals = 0.0;
                        }
                    }
                    None => plugin_known = false,
                }
            }
        }

        next.truncate(delay);
        buffer = AgedBuffer::from_cells(next);
        if measuring {
            held += buffer.packets() as u64;
        }
    }

    let n = measured as f64;
    let arrivals = arrivals_r + arrivals_b;
    let plugin_rate = plugin_known.then(|| plugin_total / n);
    let slots_per_batch: Vec<(f64, f64)> = batches
        .iter()
        .map(|&(h, _)| (h, batch_len as f64))
        .collect();
    Ok(SimReport {
        config: config.clone(),
        measured_slots: measured,
        empirical_lambda_r: arrivals_r as f64 / n,
        empirical_lambda_b: arrivals_b as f64 / n,
        output_rate: sent as f64 / n,
        drop_rate: 0.0,
        mean_queue: held as f64 / n,
        mean_delay: delays.mean(),
        delay_histogram: delays.histogram,
        plugin_entropy_rate: plugin_rate,
        plugin_entropy_stderr: plugin_known.then(|| ratio_stderr(&slots_per_batch)),
        plugin_anonymity: plugin_known.then(|| {
            if arrivals > 0 {
                plugin_total / arrivals as f64
            } else {
                0.0
            }
        }),
        plugin_anonymity_stderr: plugin_known.then(|| ratio_stderr(&batches)),
        histogram_entropy_rate: Some(histogram.rate()),
        violations,
    })
}

/// Batch-means standard error of the ratio estimator `sum(num) / sum(den)`.
fn ratio_stderr(batches: &[(f64, f64)]) -> f64 {
    let k = batches.len();
    let den: f64 = batches.iter().map(|b| b.1).sum();
    if k < 2 || den == 0.0 {
        return 0.0;
    }
    let ratio = batches.iter().map(|b| b.0).sum::<f64>() / den;
    let ss: f64 = batches.iter().map(|(n, d)| (n - ratio * d).powi(2)).sum();
    let mean_den = den / k as f64;
    (ss / ((k * (k - 1)) as f64)).sqrt() / mean_den
}

fn run_mix2<F>(
    config: &SimConfig,
    check_forced_drops: bool,
    mut trace: Option<&mut dyn Write>,
    mut step: F,
) -> Result<SimReport>
where
    F: FnMut(u64, bool, bool) -> (SlotOutcome, crate::mix2::Mix2State),
{
    let warmup = config.effective_warmup();
    let measured = config.horizon - warmup;
    let mut streams = Streams::new(config.seed);
    let mut violations = Violations::default();
    let mut delays = DelayStats::new();

    // Cumulative counts over the whole run, for the departure bound.
    let (mut cum_r, mut cum_b, mut cum_d1, mut cum_d2) = (0u64, 0u64, 0u64, 0u64);
    // Last slot that ended with an unpaired packet of each color still in the mix.
    let mut last_waiting: [Option<u64>; 2] = [None, None];
    let (mut arrivals_r, mut arrivals_b, mut sent, mut dropped, mut held) =
        (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut prev = crate::mix2::Mix2State::default();

    for slot in 0..config.horizon {
        let arrival = streams.arrival(&config.rates);
        let (outcome, state) = step(slot, arrival.has_red(), arrival.has_blue());
        let measuring = slot >= warmup;

        if trace.is_some() {
            write_trace(
                &mut trace,
                &TraceRecord {
                    schema_version: TRACE_SCHEMA_VERSION,
                    slot,
                    arrival,
                    buffer: None,
                    output: None,
                    red_backlog: Some(prev.red_backlog + arrival.has_red() as u64),
                    blue_backlog: Some(prev.blue_backlog + arrival.has_blue() as u64),
                    pair: Some(outcome.pair.is_some()),
                    dropped: outcome.dropped.map(|p| p.color),
                },
            )?;
        }
        prev = state;

        cum_r += arrival.has_red() as u64;
        cum_b += arrival.has_blue() as u64;
        let (g1, g2) = outcome.indicators();
        if g1 != g2 {
            violations.g_sync += 1;
        }
        cum_d1 += g1 as u64;
        cum_d2 += g2 as u64;
        let bound = cum_r.min(cum_b);
        if cum_d1 > bound || cum_d2 > bound {
            violations.departure_bound += 1;
        }
        if state.red_backlog > 0 && state.blue_backlog > 0 {
            violations.unpaired += 1;
        }

        let mut waiting = [state.red_backlog > 0, state.blue_backlog > 0];
        if let Some(p) = outcome.dropped {
            waiting[p.color as usize] = true;
        }
        if check_forced_drops {
            if let Some(p) = outcome.dropped {
                // The drop was avoidable if a partner sat unpaired at the end of
                // any slot of this packet's lifetime.
                let partner = p.color.other() as usize;
                let partner_waiting =
                    waiting[partner] || last_waiting[partner].is_some_and(|t| t >= p.arrival_slot);
                if partner_waiting {
                    violations.unforced_drop += 1;
                }
            }
        }
        for (c, w) in waiting.iter().enumerate() {
            if *w {
                last_waiting[c] = Some(slot);
            }
        }

        if measuring {
            arrivals_r += arrival.has_red() as u64;
            arrivals_b += arrival.has_blue() as u64;
            if let Some((r, b)) = outcome.pair {
                sent += 2;
                delays.record(slot - r);
                delays.record(slot - b);
            }
            dropped += outcome.dropped.is_some() as u64;
            held += state.red_backlog + state.blue_backlog;
        }
    }

    let n = measured as f64;
    Ok(SimReport {
        config: config.clone(),
        measured_slots: measured,
        empirical_lambda_r: arrivals_r as f64 / n,
        empirical_lambda_b: arrivals_b as f64 / n,
        output_rate: sent as f64 / n,
        drop_rate: dropped as f64 / n,
        mean_queue: held as f64 / n,
        mean_delay: delays.mean(),
        delay_histogram: delays.histogram,
        plugin_entropy_rate: None,
        plugin_entropy_stderr: None,
        plugin_anonymity: None,
        plugin_anonymity_stderr: None,
        histogram_entropy_rate: None,
        violations,
    })
}

/// Entropy of the empirical output-word distribution, ignoring state.
pub fn marginal_output_entropy(trajectory: &[SlotRecord]) -> f64 {
    let mut counts = [0.0; 7];
    for rec in trajectory {
        counts[rec.output as usize] += 1.0;
    }
    entropy_bits(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Probability;

    fn rates(r: f64, b: f64) -> RatePair {
        RatePair::new(r, b).unwrap()
    }

    fn sym_policy() -> ParametricPolicy {
        ParametricPolicy::optimal(
            Probability::HALF,
            Probability::new(1.0 / 3.0).unwrap(),
            Probability::new(1.0 / 3.0).unwrap(),
        )
    }

    /// Keeps a red packet one slot too long when it can.
    struct Overstay;

    impl MixStrategy for Overstay {
        fn delay(&self) -> usize {
            1
        }

        fn step(&mut self, buffer: &AgedBuffer, arrival: ArrivalSymbol, _rng: &mut SimRng) -> Step {
            Step {
                output: OutputWord::Empty,
                next: vec![arrival, buffer.cell(0)],
            }
        }
    }

    /// Two-slot delay; sends a fresh red while an older red stays behind.
    struct Reorder;

    impl MixStrategy for Reorder {
        fn delay(&self) -> usize {
            2
        }

        fn step(&mut self, buffer: &AgedBuffer, arrival: ArrivalSymbol, _rng: &mut SimRng) -> Step {
            let mut colors: Vec<Color> = Vec::new();
            if buffer.cell(1).has_red() {
                colors.push(Color::Red);
            }
            let jump = buffer.cell(0).has_red() && arrival.has_red();
            if jump {
                colors.push(Color::Red);
            }
            let kept = if jump { PacketSet::Empty } else { arrival };
            Step {
                output: OutputWord::from_colors(&colors).unwrap(),
                next: vec![kept, buffer.cell(0), PacketSet::Empty],
            }
        }
    }

    #[test]
    fn zero_rates_give_zero_report() {
        let scenarios = [
            Scenario::Mix1T0,
            Scenario::Mix1T1 {
                policy: sym_policy(),
                initial: QueueState::Empty,
            },
            Scenario::Mix1GeneralT {
                strategy: GeneralStrategy::FixedDelayPermute,
                delay: 3,
            },
            Scenario::Mix2Threshold { m: 2 },
            Scenario::Mix2Hol { delay: 2 },
        ];
        for scenario in scenarios {
            let cfg = SimConfig::new(rates(0.0, 0.0), 5000, 1, scenario);
            let rep = run(&cfg).unwrap();
            assert_eq!(rep.output_rate, 0.0);
            assert_eq!(rep.drop_rate, 0.0);
            assert_eq!(rep.mean_queue, 0.0);
            assert_eq!(rep.empirical_lambda_r, 0.0);
            assert!(rep.plugin_entropy_rate.unwrap_or(0.0) == 0.0);
            assert_eq!(rep.violations.total(), 0);
        }
    }

    #[test]
    fn overstay_is_counted_or_rejected() {
        let mut cfg = SimConfig::new(rates(0.5, 0.5), 3000, 2, Scenario::Mix1T0);
        let rep = run_mix1(&cfg, &mut Overstay, AgedBuffer::empty(1), None).unwrap();
        assert!(rep.violations.delay > 0);
        cfg.strict = true;
        assert!(matches!(
            run_mix1(&cfg, &mut Overstay, AgedBuffer::empty(1), None),
            Err(MixError::DelayViolation { .. })
        ));
    }

    #[test]
    fn reordering_is_counted() {
        let cfg = SimConfig::new(rates(0.8, 0.0), 3000, 4, Scenario::Mix1T0);
        let rep = run_mix1(&cfg, &mut Reorder, AgedBuffer::empty(2), None).unwrap();
        assert_eq!(rep.violations.delay, 0);
        assert_eq!(rep.violations.consistency, 0);
        assert!(rep.violations.order > 0);
    }

    #[test]
    fn well_behaved_strategies_have_no_violations() {
        let cfg = |scenario| SimConfig::new(rates(0.6, 0.4), 20_000, 5, scenario);
        for scenario in [
            Scenario::Mix1T0,
            Scenario::Mix1T1 {
                policy: sym_policy(),
                initial: QueueState::RB,
            },
            Scenario::Mix1GeneralT {
                strategy: GeneralStrategy::FixedDelayPermute,
                delay: 4,
            },
            Scenario::Mix1GeneralT {
                strategy: GeneralStrategy::FifoPassThrough,
                delay: 2,
            },
            Scenario::Mix2Threshold { m: 1 },
            Scenario::Mix2Hol { delay: 3 },
        ] {
            let rep = run(&cfg(scenario.clone())).unwrap();
            assert_eq!(rep.violations, Violations::default(), "{scenario:?}");
        }
    }

    #[test]
    fn fixed_delay_holds_exactly_t() {
        let cfg = SimConfig::new(
            rates(0.5, 0.5),
            10_000,
            8,
            Scenario::Mix1GeneralT {
                strategy: GeneralStrategy::FixedDelayPermute,
                delay: 3,
            },
        );
        let rep = run(&cfg).unwrap();
        assert_eq!(rep.delay_histogram.len(), 4);
        assert_eq!(&rep.delay_histogram[..3], &[0, 0, 0]);
        assert!((rep.mean_delay - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fifo_has_zero_entropy() {
        let traj = record_trajectory(
            &mut FifoPassThrough { delay: 0 },
            &rates(0.5, 0.5),
            10_000,
            3,
        );
        assert_eq!(plugin_entropy(&FifoPassThrough { delay: 0 }, &traj), 0.0);
        assert_eq!(histogram_entropy(&traj).rate(), 0.0);
        assert!(marginal_output_entropy(&traj) > 1.0);
    }

    #[test]
    fn plugin_falls_back_to_histogram() {
        let traj = record_trajectory(&mut Overstay, &rates(0.5, 0.5), 1000, 3);
        assert_eq!(
            plugin_entropy(&Overstay, &traj),
            histogram_entropy(&traj).rate()
        );
    }

    #[test]
    fn invalid_horizon_rejected() {
        let mut cfg = SimConfig::new(rates(0.5, 0.5), 100, 1, Scenario::Mix1T0);
        cfg.warmup = Some(100);
        assert!(run(&cfg).is_err());
        cfg.warmup = Some(10);
        assert!(run(&cfg).is_ok());
    }

    #[test]
    fn trace_lines_parse() {
        let cfg = SimConfig {
            warmup: Some(1),
            ..SimConfig::new(
                rates(0.5, 0.5),
                20,
                1,
                Scenario::Mix1T1 {
                    policy: sym_policy(),
                    initial: QueueState::Empty,
                },
            )
        };
        let mut buf = Vec::new();
        run_traced(&cfg, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<TraceRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 20);
        assert_eq!(lines[0].buffer.as_deref(), Some(&[PacketSet::Empty][..]));
        assert!(lines
            .iter()
            .all(|r| r.schema_version == TRACE_SCHEMA_VERSION));

        let cfg = SimConfig {
            scenario: Scenario::Mix2Hol { delay: 1 },
            ..cfg
        };
        let mut buf = Vec::new();
        run_traced(&cfg, Some(&mut buf)).unwrap();
        let first: TraceRecord =
            serde_json::from_str(String::from_utf8(buf).unwrap().lines().next().unwrap()).unwrap();
        assert!(first.pair.is_some() && first.buffer.is_none());
    }
}
