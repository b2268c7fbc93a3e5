use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use mixlab_core::mix1::{self, anonymity_t0, solve as solve_mix1, verify_kkt, ParametricPolicy};
use mixlab_core::mix2::{analyze, mean_queue_length, optimal_threshold};
use mixlab_core::sim::{self, GeneralStrategy, Scenario, SimConfig};
use mixlab_core::{fano_error_lower_bound, MixError, Probability, QueueState, RatePair};
use rayon::prelude::*;
use serde_json::json;

use crate::output::{opt_sig12, sig12, ResultRecord};
use crate::{Failure, Format, ScenarioKind, SimulateArgs, SolveArgs, StrategyKind, SweepArgs};

pub const THREADS_ENV: &str = "MIXLAB_THREADS";

fn print_record(record: &ResultRecord) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    writeln!(out, "{}", record.to_json())?;
    Ok(())
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn rates(lambda_r: f64, lambda_b: f64) -> Result<RatePair, Failure> {
    Ok(RatePair::new(lambda_r, lambda_b)?)
}

const SOLVE_HEADER: [&str; 12] = [
    "lambda_r",
    "lambda_b",
    "delay",
    "anonymity",
    "w",
    "phi_r",
    "phi_b",
    "phi_rb",
    "p_star",
    "d_star",
    "r_star",
    "iterations",
];

pub fn solve(a: &SolveArgs) -> Result<(), Failure> {
    let rp = rates(a.lambda_r, a.lambda_b)?;
    let inputs = json!({
        "lambda_r": a.lambda_r,
        "lambda_b": a.lambda_b,
        "delay": a.delay,
        "tol": a.tol,
        "max_iter": a.max_iter,
    });

    if a.delay == 0 {
        let anonymity = anonymity_t0(&rp)?;
        return match a.format {
            Format::Json => print_record(&ResultRecord::new(
                "solve",
                inputs,
                json!({ "anonymity": anonymity, "w": anonymity * rp.total() }),
                None,
            )),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(io::stdout().lock());
                w.write_record(SOLVE_HEADER)?;
                let mut row = vec![sig12(rp.r()), sig12(rp.b()), "0".into(), sig12(anonymity)];
                row.push(sig12(anonymity * rp.total()));
                row.resize(SOLVE_HEADER.len(), String::new());
                w.write_record(&row)?;
                w.flush()?;
                Ok(())
            }
        };
    }

    let s = solve_mix1(&rp, a.tol, a.max_iter)?;
    let kkt = verify_kkt(&s, &rp);
    match a.format {
        Format::Json => print_record(&ResultRecord::new(
            "solve",
            inputs,
            json!({
                "anonymity": s.anonymity,
                "w": s.w,
                "phi_r": s.phi_r,
                "phi_b": s.phi_b,
                "phi_rb": s.phi_rb,
                "xi": s.xi(),
                "p_star": s.p_star,
                "d_star": s.d_star,
                "r_star": s.r_star,
                "iterations": s.iterations,
                "converged": s.converged,
                "damped": s.damped,
                "kkt": { "all_pass": kkt.all_pass(), "conditions": kkt.conditions },
            }),
            None,
        )),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record(SOLVE_HEADER)?;
            w.write_record([
                sig12(rp.r()),
                sig12(rp.b()),
                "1".into(),
                sig12(s.anonymity),
                sig12(s.w),
                sig12(s.phi_r),
                sig12(s.phi_b),
                sig12(s.phi_rb),
                sig12(s.p_star.value()),
                sig12(s.d_star.value()),
                sig12(s.r_star.value()),
                s.iterations.to_string(),
            ])?;
            w.flush()?;
            Ok(())
        }
    }
}

pub const SWEEP_HEADER: [&str; 11] = [
    "lambda_r",
    "lambda_b",
    "anonymity",
    "w",
    "phi_r",
    "phi_b",
    "p_star",
    "d_star",
    "r_star",
    "iterations",
    "error",
];

#[derive(Default)]
struct SweepRow {
    lambda_r: f64,
    lambda_b: f64,
    anonymity: Option<f64>,
    w: Option<f64>,
    phi_r: Option<f64>,
    phi_b: Option<f64>,
    p_star: Option<f64>,
    d_star: Option<f64>,
    r_star: Option<f64>,
    iterations: Option<usize>,
    error: Option<String>,
}

impl SweepRow {
    fn fill(&mut self, s: &mix1::SolveResult) {
        self.anonymity = Some(s.anonymity);
        self.w = Some(s.w);
        self.phi_r = Some(s.phi_r);
        self.phi_b = Some(s.phi_b);
        self.p_star = Some(s.p_star.value());
        self.d_star = Some(s.d_star.value());
        self.r_star = Some(s.r_star.value());
        self.iterations = Some(s.iterations);
    }

    fn fields(&self) -> Vec<String> {
        vec![
            sig12(self.lambda_r),
            sig12(self.lambda_b),
            opt_sig12(self.anonymity),
            opt_sig12(self.w),
            opt_sig12(self.phi_r),
            opt_sig12(self.phi_b),
            opt_sig12(self.p_star),
            opt_sig12(self.d_star),
            opt_sig12(self.r_star),
            self.iterations.map(|i| i.to_string()).unwrap_or_default(),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

fn sweep_cell(lambda_r: f64, lambda_b: f64, a: &SweepArgs) -> SweepRow {
    let mut row = SweepRow {
        lambda_r,
        lambda_b,
        ..SweepRow::default()
    };
    let rp = match RatePair::new(lambda_r, lambda_b) {
        Ok(rp) => rp,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    if a.delay == 0 {
        match anonymity_t0(&rp) {
            Ok(v) => {
                row.anonymity = Some(v);
                row.w = Some(v * rp.total());
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        return row;
    }
    match solve_mix1(&rp, a.tol, a.max_iter) {
        Ok(s) => row.fill(&s),
        Err(MixError::Convergence { iterations, last }) => {
            row.fill(&last);
            row.error = Some(format!("not converged after {iterations} iterations"));
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn thread_pool() -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Failure::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start worker threads: {e}")))
}

pub fn sweep(a: &SweepArgs) -> Result<(), Failure> {
    let cells: Vec<(f64, f64)> = a
        .grid_r
        .values()
        .into_iter()
        .flat_map(|r| a.grid_b.values().into_iter().map(move |b| (r, b)))
        .collect();
    let rows: Vec<SweepRow> = thread_pool()?.install(|| {
        cells
            .par_iter()
            .map(|&(r, b)| sweep_cell(r, b, a))
            .collect()
    });

    let mut w = csv::Writer::from_writer(sink(a.out.as_deref())?);
    w.write_record(SWEEP_HEADER)?;
    for row in &rows {
        w.write_record(row.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn mix2_analyze(lambda_r: f64, lambda_b: f64) -> Result<(), Failure> {
    let rp = rates(lambda_r, lambda_b)?;
    let an = analyze(&rp)?;
    print_record(&ResultRecord::new(
        "mix2 analyze",
        json!({ "lambda_r": lambda_r, "lambda_b": lambda_b }),
        json!({
            "rho": an.rho,
            "swapped": an.oriented.swapped,
            "m_star": an.m_star,
            "mean_queue": an.mean_queue,
            "drop_rate": an.drop_rate,
            "pi_00": an.pi_00,
            "pi_m0": an.pi_00 * an.rho.powi(-(an.m_star as i32)),
        }),
        None,
    ))
}

pub fn mix2_simulate(
    lambda_r: f64,
    lambda_b: f64,
    horizon: u64,
    seed: u64,
    warmup: Option<u64>,
    delay: Option<u64>,
) -> Result<(), Failure> {
    let rp = rates(lambda_r, lambda_b)?;
    let (scenario, analysis) = match delay {
        Some(delay) => (Scenario::Mix2Hol { delay }, None),
        None => {
            let an = analyze(&rp)?;
            (Scenario::Mix2Threshold { m: an.m_star }, Some(an))
        }
    };
    let config = SimConfig {
        warmup,
        ..SimConfig::new(rp, horizon, seed, scenario)
    };
    let report = sim::run(&config)?;
    print_record(&ResultRecord::new(
        "mix2 simulate",
        json!({
            "lambda_r": lambda_r,
            "lambda_b": lambda_b,
            "horizon": horizon,
            "warmup": config.effective_warmup(),
            "T": delay,
        }),
        json!({ "analysis": analysis, "report": report }),
        Some(seed),
    ))
}

pub fn mix2_staircase(
    rho_max: f64,
    steps: usize,
    jumps: bool,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if !(0.0..1.0).contains(&rho_max) || steps < 2 {
        return Err(Failure::Usage(
            "staircase needs 0 <= rho-max < 1 and at least two steps".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(sink(out)?);
    if jumps {
        // m* steps from m to m + 1 where 2 ρ^(m+1) = 1.
        w.write_record(["m", "rho"])?;
        for m in 0u32.. {
            let rho = 0.5f64.powf(1.0 / (m + 1) as f64);
            if rho > rho_max {
                break;
            }
            w.write_record([m.to_string(), sig12(rho)])?;
        }
    } else {
        w.write_record(["rho", "m_star", "mean_queue"])?;
        for i in 0..steps {
            let rho = rho_max * i as f64 / (steps - 1) as f64;
            let m = optimal_threshold(rho)?;
            w.write_record([sig12(rho), m.to_string(), sig12(mean_queue_length(m, rho)?)])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_policy(spec: &str, rp: &RatePair) -> Result<ParametricPolicy, Failure> {
    if spec.trim().eq_ignore_ascii_case("optimal") {
        return Ok(solve_mix1(
            rp,
            mix1::solver::DEFAULT_TOL,
            mix1::solver::DEFAULT_MAX_ITER,
        )?
        .policy());
    }
    let values: Vec<f64> = spec
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("bad --policy '{spec}': {e}")))?;
    match values.len() {
        3 => Ok(ParametricPolicy::optimal(
            Probability::new(values[0])?,
            Probability::new(values[1])?,
            Probability::new(values[2])?,
        )),
        13 => {
            let mut arr = [0.0; 13];
            arr.copy_from_slice(&values);
            Ok(ParametricPolicy::from_array(arr)?)
        }
        n => Err(Failure::Usage(format!(
            "--policy takes 'optimal', p,d,r or 13 values; got {n} values"
        ))),
    }
}

fn parse_queue(s: &str) -> Result<QueueState, Failure> {
    match s.trim().to_ascii_uppercase().as_str() {
        "" | "-" | "EMPTY" => Ok(QueueState::Empty),
        "R" => Ok(QueueState::R),
        "B" => Ok(QueueState::B),
        "RB" | "BR" => Ok(QueueState::RB),
        _ => Err(Failure::Usage(format!(
            "--initial must be -, R, B or RB; got '{s}'"
        ))),
    }
}

fn require_delay(a: &SimulateArgs) -> Result<u64, Failure> {
    a.delay
        .ok_or_else(|| Failure::Usage("this scenario needs --delay".into()))
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let rp = rates(a.lambda_r, a.lambda_b)?;
    let scenario = match a.scenario {
        ScenarioKind::Mix1T0 => Scenario::Mix1T0,
        ScenarioKind::Mix1T1 => Scenario::Mix1T1 {
            policy: parse_policy(&a.policy, &rp)?,
            initial: parse_queue(&a.initial)?,
        },
        ScenarioKind::Mix1General => Scenario::Mix1GeneralT {
            strategy: match a.strategy {
                StrategyKind::FixedDelayPermute => GeneralStrategy::FixedDelayPermute,
                StrategyKind::FifoPassThrough => GeneralStrategy::FifoPassThrough,
            },
            delay: require_delay(a)? as usize,
        },
        ScenarioKind::Mix2Threshold => Scenario::Mix2Threshold {
            m: match a.m {
                Some(m) => m,
                None => analyze(&rp)?.m_star,
            },
        },
        ScenarioKind::Mix2Hol => Scenario::Mix2Hol {
            delay: require_delay(a)?,
        },
    };
    let config = SimConfig {
        warmup: a.warmup,
        strict: a.strict,
        ..SimConfig::new(rp, a.horizon, a.seed, scenario)
    };
    let report = match &a.dump_trace {
        Some(path) => {
            let mut file = BufWriter::new(File::create(path)?);
            let report = sim::run_traced(&config, Some(&mut file))?;
            file.flush()?;
            report
        }
        None => sim::run(&config)?,
    };
    print_record(&ResultRecord::new(
        "simulate",
        json!({
            "scenario": config.scenario,
            "lambda_r": a.lambda_r,
            "lambda_b": a.lambda_b,
            "horizon": a.horizon,
            "warmup": config.effective_warmup(),
            "strict": a.strict,
        }),
        serde_json::to_value(&report).expect("reports serialize"),
        Some(a.seed),
    ))
}

pub fn fano(anonymity: f64) -> Result<(), Failure> {
    let bound = fano_error_lower_bound(anonymity)?;
    print_record(&ResultRecord::new(
        "fano",
        json!({ "anonymity": anonymity }),
        json!({ "error_lower_bound": bound.value() }),
        None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_strings() {
        let rp = RatePair::new(0.5, 0.5).unwrap();
        let p = parse_policy("optimal", &rp).unwrap();
        assert_eq!(p.p.value(), 0.5);
        let q = parse_policy("0.5, 0.25, 0.25", &rp).unwrap();
        assert_eq!(q.d.value(), 0.25);
        assert!(parse_policy(&["1"; 13].join(","), &rp).is_ok());
        assert!(matches!(
            parse_policy("0.5,0.2", &rp),
            Err(Failure::Usage(_))
        ));
        assert!(matches!(parse_policy("x", &rp), Err(Failure::Usage(_))));
        assert!(matches!(
            parse_policy("0.5,2,0.1", &rp),
            Err(Failure::Mix(_))
        ));
    }

    #[test]
    fn queue_strings() {
        assert_eq!(parse_queue("-").unwrap(), QueueState::Empty);
        assert_eq!(parse_queue("rb").unwrap(), QueueState::RB);
        assert!(parse_queue("RR").is_err());
    }

    #[test]
    fn saturated_sweep_cell_reports_error() {
        let a = SweepArgs {
            grid_r: "1:1:1".parse().unwrap(),
            grid_b: "1:1:1".parse().unwrap(),
            delay: 1,
            tol: 1e-10,
            max_iter: 100,
            out: None,
        };
        let row = sweep_cell(1.0, 1.0, &a);
        assert!(row.error.is_some() && row.w.is_none());
        assert_eq!(row.fields().len(), SWEEP_HEADER.len());
    }
}
