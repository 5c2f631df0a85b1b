//! Benchmark workloads: prefill, timed light/heavy trials and CSV output.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering::Relaxed};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checker::{keysum_verify, History, HistoryEvent, Op, Recorder};
use crate::policy::{PathCounters, PathStats};
use crate::trees::{AbTree, Bst, Dictionary, TreeConfig, TreeConfigError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TreeKind {
    Bst,
    AbTree,
}

impl TreeKind {
    pub const ALL: [TreeKind; 2] = [TreeKind::Bst, TreeKind::AbTree];

    pub fn name(self) -> &'static str {
        match self {
            TreeKind::Bst => "bst",
            TreeKind::AbTree => "abtree",
        }
    }

    /// Default largest range-query size.
    pub fn default_range_max(self) -> u64 {
        match self {
            TreeKind::Bst => 1000,
            TreeKind::AbTree => 10_000,
        }
    }

    pub fn build(self, config: TreeConfig) -> Result<Box<dyn Dictionary>, TreeConfigError> {
        Ok(match self {
            TreeKind::Bst => Box::new(Bst::new(config)?),
            TreeKind::AbTree => Box::new(AbTree::new(config)?),
        })
    }
}

impl fmt::Display for TreeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown {what} `{got}`")]
pub struct UnknownName {
    what: &'static str,
    got: String,
}

impl FromStr for TreeKind {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TreeKind::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| UnknownName {
            what: "tree",
            got: s.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WorkloadKind {
    /// Every thread does 50% inserts and 50% deletes.
    Light,
    /// One thread does only range queries; the rest do light updates.
    Heavy,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 2] = [WorkloadKind::Light, WorkloadKind::Heavy];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Light => "light",
            WorkloadKind::Heavy => "heavy",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorkloadKind::ALL.into_iter().find(|w| w.name() == s).ok_or_else(|| UnknownName {
            what: "workload",
            got: s.to_string(),
        })
    }
}

pub const DEFAULT_KEY_RANGE: u64 = 100_000;

#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub tree: TreeKind,
    pub workload: WorkloadKind,
    pub threads: usize,
    pub key_range: u64,
    pub duration: Duration,
    /// Each thread stops after this many operations instead of at the
    /// deadline (scripted, reproducible runs).
    pub op_limit: Option<u64>,
    pub range_max: u64,
    pub config: TreeConfig,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(tree: TreeKind, config: TreeConfig) -> Self {
        WorkloadSpec {
            tree,
            workload: WorkloadKind::Light,
            threads: 1,
            key_range: DEFAULT_KEY_RANGE,
            duration: Duration::from_secs(1),
            op_limit: None,
            range_max: tree.default_range_max(),
            config,
            seed: 0,
        }
    }
}

/// Range-query size for a uniform `x` in `[0, 1)`: `floor(x^2 * s) + 1`.
pub fn sample_range_size(x: f64, range_max: u64) -> u64 {
    assert!((0.0..1.0).contains(&x), "x = {x} outside [0, 1)");
    assert!(range_max >= 1);
    ((x * x * range_max as f64).floor() as u64 + 1).min(range_max)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PrefillError {
    #[error("prefill did not reach {target} +/- {slack} keys within {secs} s (size {size})")]
    Timeout { target: u64, slack: u64, size: u64, secs: u64 },
}

pub const PREFILL_TIMEOUT: Duration = Duration::from_secs(60);

/// Random inserts and deletes (half each) on uniform keys in
/// `[0, key_range)` until the dictionary holds `key_range / 2` keys, within
/// 5%. Single-threaded and deterministic for a given seed. Returns the sum
/// of the keys present afterwards.
pub fn prefill(d: &dyn Dictionary, key_range: u64, seed: u64) -> Result<u64, PrefillError> {
    let target = key_range / 2;
    let slack = target / 20;
    let mut w = d.register();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4546_494c_4c00);
    let start = Instant::now();
    let mut size = d.len() as u64;
    let mut sum = d.key_sum();
    let mut n = 0u64;
    while size.abs_diff(target) > slack {
        n += 1;
        if n % 4096 == 0 && start.elapsed() > PREFILL_TIMEOUT {
            return Err(PrefillError::Timeout {
                target,
                slack,
                size,
                secs: PREFILL_TIMEOUT.as_secs(),
            });
        }
        let k = rng.gen_range(0..key_range);
        if rng.gen_bool(0.5) {
            if d.insert(&mut w, k, k) {
                size += 1;
                sum = sum.wrapping_add(k);
            }
        } else if d.delete(&mut w, k) {
            size -= 1;
            sum = sum.wrapping_sub(k);
        }
    }
    Ok(sum)
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub ops: u64,
    pub ops_per_sec: f64,
    /// Per-path counters of dictionary operations.
    pub stats: PathStats,
    /// Counters of the rebalancing steps those operations triggered.
    pub rebalance: PathStats,
    pub keysum_ok: bool,
    pub violations: Vec<String>,
    pub wall: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum TrialError {
    #[error(transparent)]
    Config(#[from] TreeConfigError),
    #[error(transparent)]
    Prefill(#[from] PrefillError),
    #[error("trial failed verification (keysum_ok={keysum_ok})\nviolations: {violations:?}\nlast operations:\n{tail}")]
    Verification {
        keysum_ok: bool,
        violations: Vec<String>,
        tail: String,
    },
}

const TAIL_PER_THREAD: usize = 8;

struct ThreadOutcome {
    sum: u64,
    ops: u64,
    stats: PathStats,
    rebalance: PathStats,
    tail: Vec<HistoryEvent>,
}

fn worker_loop(
    d: &dyn Dictionary,
    spec: &WorkloadSpec,
    t: usize,
    stop: &AtomicBool,
    recorder: &Recorder,
) -> ThreadOutcome {
    let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = d.register();
    let mut log = recorder.ring(t, TAIL_PER_THREAD);
    let queries_only = spec.workload == WorkloadKind::Heavy && t == 0;
    let mut out = ThreadOutcome {
        sum: 0,
        ops: 0,
        stats: PathStats::default(),
        rebalance: PathStats::default(),
        tail: Vec::new(),
    };
    loop {
        match spec.op_limit {
            Some(limit) if out.ops >= limit => break,
            None if stop.load(Relaxed) => break,
            _ => {}
        }
        let op = if queries_only {
            let lo = rng.gen_range(0..spec.key_range);
            let size = sample_range_size(rng.gen(), spec.range_max);
            Op::RangeQuery {
                lo,
                hi: lo.saturating_add(size),
            }
        } else {
            let key = rng.gen_range(0..spec.key_range);
            if rng.gen_bool(0.5) {
                Op::Insert { key, value: key }
            } else {
                Op::Delete { key }
            }
        };
        let response = log.record(op, || op.apply(d, &mut w));
        if let (Op::Insert { key, .. }, crate::checker::Response::Bool(true)) = (op, response) {
            out.sum = out.sum.wrapping_add(key);
        }
        if let (Op::Delete { key }, crate::checker::Response::Bool(true)) = (op, response) {
            out.sum = out.sum.wrapping_sub(key);
        }
        out.ops += 1;
    }
    out.stats = w.stats;
    out.rebalance = w.rebalance_stats;
    out.tail = log.into_events();
    out
}

/// Builds a fresh tree, prefills it, runs one timed trial and verifies the
/// key sum and structure afterwards.
pub fn run_trial(spec: &WorkloadSpec, trial: u64) -> Result<TrialResult, TrialError> {
    let d = spec.tree.build(spec.config.clone())?;
    run_trial_on(&*d, spec, trial)
}

/// [`run_trial`] on a caller-built, empty dictionary (for instrumented
/// runs). `spec.tree` and `spec.config` are only used for reporting.
pub fn run_trial_on(d: &dyn Dictionary, spec: &WorkloadSpec, trial: u64) -> Result<TrialResult, TrialError> {
    let seed = spec.seed.wrapping_add(trial.wrapping_mul(0x1000_0001));
    let prefill_sum = prefill(d, spec.key_range, seed)?;
    let trial_spec = WorkloadSpec {
        seed,
        ..spec.clone()
    };
    let stop = AtomicBool::new(false);
    let recorder = Recorder::new();
    let start = Instant::now();
    let outcomes: Vec<ThreadOutcome> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..spec.threads)
            .map(|t| {
                let (spec, stop, recorder) = (&trial_spec, &stop, &recorder);
                s.spawn(move || worker_loop(d, spec, t, stop, recorder))
            })
            .collect();
        if spec.op_limit.is_none() {
            std::thread::sleep(spec.duration);
            stop.store(true, Relaxed);
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let wall = start.elapsed();

    let mut sums = vec![prefill_sum];
    let mut stats = PathStats::default();
    let mut rebalance = PathStats::default();
    let mut ops = 0;
    for o in &outcomes {
        sums.push(o.sum);
        stats.merge(&o.stats);
        rebalance.merge(&o.rebalance);
        ops += o.ops;
    }
    let keysum_ok = keysum_verify(&sums, d);
    let mut w = d.register();
    d.rebalance_all(&mut w);
    drop(w);
    let violations = d.validate();
    if !keysum_ok || !violations.is_empty() {
        let tail = History::merge(outcomes.into_iter().map(|o| o.tail)).tail(TAIL_PER_THREAD * spec.threads);
        return Err(TrialError::Verification {
            keysum_ok,
            violations,
            tail,
        });
    }
    Ok(TrialResult {
        ops,
        ops_per_sec: ops as f64 / wall.as_secs_f64(),
        stats,
        rebalance,
        keysum_ok,
        violations,
        wall,
    })
}

pub const CSV_HEADER: &str = "tree,policy,threads,workload,trial,ops,ops_per_sec,fast_done,middle_done,fallback_done,fast_commit,fast_abort_conflict,fast_abort_capacity,fast_abort_explicit,fast_abort_spurious,middle_commit,middle_abort_conflict,middle_abort_capacity,middle_abort_explicit,middle_abort_spurious,keysum_ok";

fn counter_columns(c: &PathCounters) -> String {
    format!(
        "{},{},{},{},{}",
        c.commit, c.abort_conflict, c.abort_capacity, c.abort_explicit, c.abort_spurious
    )
}

fn row_prefix(spec: &WorkloadSpec) -> String {
    format!(
        "{},{},{},{}",
        spec.tree, spec.config.policy, spec.threads, spec.workload
    )
}

pub fn csv_row(spec: &WorkloadSpec, trial: u64, r: &TrialResult) -> String {
    let s = &r.stats;
    format!(
        "{},{trial},{},{:.0},{},{},{},{},{},{}",
        row_prefix(spec),
        r.ops,
        r.ops_per_sec,
        s.fast.done,
        s.middle.done,
        s.fallback.done,
        counter_columns(&s.fast),
        counter_columns(&s.middle),
        r.keysum_ok
    )
}

/// Mean of every numeric column over the trials, labelled `mean`.
pub fn csv_summary(spec: &WorkloadSpec, results: &[TrialResult]) -> String {
    let n = results.len().max(1) as f64;
    let mean = |f: &dyn Fn(&TrialResult) -> f64| format!("{:.0}", results.iter().map(f).sum::<f64>() / n);
    let counters = |pick: fn(&PathStats) -> &PathCounters| {
        [
            mean(&|r| pick(&r.stats).commit as f64),
            mean(&|r| pick(&r.stats).abort_conflict as f64),
            mean(&|r| pick(&r.stats).abort_capacity as f64),
            mean(&|r| pick(&r.stats).abort_explicit as f64),
            mean(&|r| pick(&r.stats).abort_spurious as f64),
        ]
        .join(",")
    };
    format!(
        "{},mean,{},{},{},{},{},{},{},{}",
        row_prefix(spec),
        mean(&|r| r.ops as f64),
        mean(&|r| r.ops_per_sec),
        mean(&|r| r.stats.fast.done as f64),
        mean(&|r| r.stats.middle.done as f64),
        mean(&|r| r.stats.fallback.done as f64),
        counters(|s| &s.fast),
        counters(|s| &s.middle),
        results.iter().all(|r| r.keysum_ok)
    )
}

/// Runs `trials` trials and returns the CSV lines (without header): one
/// per trial and a summary.
pub fn run_trials(spec: &WorkloadSpec, trials: u64) -> Result<(Vec<TrialResult>, Vec<String>), TrialError> {
    let mut results = Vec::new();
    let mut lines = Vec::new();
    for trial in 0..trials {
        let r = run_trial(spec, trial)?;
        lines.push(csv_row(spec, trial, &r));
        results.push(r);
    }
    lines.push(csv_summary(spec, &results));
    Ok((results, lines))
}
