//! Execution-path policies: how an operation moves between transactional
//! attempts and the lock-free (or locked) fallback.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crossbeam_utils::Backoff;
use parking_lot::Mutex;

use crate::llxscx::GATE_CLOSED;
use crate::txn::{AbortReason, SharedWord, TxResult, TxnContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Lock-free fallback only.
    NonHtm,
    /// Transactional lock elision over a global lock.
    Tle,
    /// Instrumented transactions running concurrently with the fallback.
    TwoPathConcurrent,
    /// Uninstrumented transactions that never overlap the fallback.
    TwoPathNonConcurrent,
    /// Fast, middle and fallback paths.
    ThreePath,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::NonHtm,
        PolicyKind::Tle,
        PolicyKind::TwoPathConcurrent,
        PolicyKind::TwoPathNonConcurrent,
        PolicyKind::ThreePath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::NonHtm => "nonhtm",
            PolicyKind::Tle => "tle",
            PolicyKind::TwoPathConcurrent => "2pc",
            PolicyKind::TwoPathNonConcurrent => "2pnc",
            PolicyKind::ThreePath => "3path",
        }
    }

    /// Transactional tries per operation before it reaches its last path.
    pub fn txn_attempts(self, budget: &PathBudget) -> u32 {
        match self {
            PolicyKind::NonHtm => 0,
            PolicyKind::Tle | PolicyKind::TwoPathConcurrent | PolicyKind::TwoPathNonConcurrent => {
                budget.attempt_limit
            }
            PolicyKind::ThreePath => budget.fast_limit + budget.middle_limit,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown policy `{0}` (expected nonhtm, tle, 2pc, 2pnc or 3path)")]
pub struct UnknownPolicy(String);

impl FromStr for PolicyKind {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathBudget {
    pub attempt_limit: u32,
    pub fast_limit: u32,
    pub middle_limit: u32,
}

impl Default for PathBudget {
    fn default() -> Self {
        PathBudget {
            attempt_limit: 20,
            fast_limit: 10,
            middle_limit: 10,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("path budgets must be at least 1")]
pub struct ZeroBudget;

impl PathBudget {
    pub fn validate(&self) -> Result<(), ZeroBudget> {
        if self.attempt_limit == 0 || self.fast_limit == 0 || self.middle_limit == 0 {
            return Err(ZeroBudget);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    Fast,
    Middle,
    Fallback,
}

/// Counters for one path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PathCounters {
    pub done: u64,
    pub commit: u64,
    pub abort_conflict: u64,
    pub abort_capacity: u64,
    pub abort_explicit: u64,
    pub abort_spurious: u64,
}

impl PathCounters {
    pub fn aborts(&self) -> u64 {
        self.abort_conflict + self.abort_capacity + self.abort_explicit + self.abort_spurious
    }

    pub fn attempts(&self) -> u64 {
        self.commit + self.aborts()
    }

    fn record(&mut self, outcome: Result<(), AbortReason>) {
        match outcome {
            Ok(()) => self.commit += 1,
            Err(AbortReason::Conflict) => self.abort_conflict += 1,
            Err(AbortReason::Capacity) => self.abort_capacity += 1,
            Err(AbortReason::Explicit(_)) => self.abort_explicit += 1,
            Err(AbortReason::Spurious) => self.abort_spurious += 1,
        }
    }

    fn merge(&mut self, o: &PathCounters) {
        self.done += o.done;
        self.commit += o.commit;
        self.abort_conflict += o.abort_conflict;
        self.abort_capacity += o.abort_capacity;
        self.abort_explicit += o.abort_explicit;
        self.abort_spurious += o.abort_spurious;
    }
}

/// Per-thread statistics, merged at the end of a trial.
///
/// TLE's transactional path and the single transactional path of the two
/// 2-path policies are reported as the fast path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathStats {
    pub fast: PathCounters,
    pub middle: PathCounters,
    pub fallback: PathCounters,
    /// Fewest and most transactional attempts made by a single operation.
    pub min_op_attempts: u64,
    pub max_op_attempts: u64,
}

impl Default for PathStats {
    fn default() -> Self {
        PathStats {
            fast: PathCounters::default(),
            middle: PathCounters::default(),
            fallback: PathCounters::default(),
            min_op_attempts: u64::MAX,
            max_op_attempts: 0,
        }
    }
}

impl PathStats {
    pub fn path(&mut self, p: Path) -> &mut PathCounters {
        match p {
            Path::Fast => &mut self.fast,
            Path::Middle => &mut self.middle,
            Path::Fallback => &mut self.fallback,
        }
    }

    pub fn record(&mut self, p: Path, outcome: Result<(), AbortReason>) {
        self.path(p).record(outcome);
    }

    pub fn completions(&self) -> u64 {
        self.fast.done + self.middle.done + self.fallback.done
    }

    pub fn txn_attempts(&self) -> u64 {
        self.fast.attempts() + self.middle.attempts() + self.fallback.attempts()
    }

    pub fn merge(&mut self, o: &PathStats) {
        self.fast.merge(&o.fast);
        self.middle.merge(&o.middle);
        self.fallback.merge(&o.fallback);
        self.min_op_attempts = self.min_op_attempts.min(o.min_op_attempts);
        self.max_op_attempts = self.max_op_attempts.max(o.max_op_attempts);
    }

    fn finish_op(&mut self, p: Path, attempts: u64) {
        self.path(p).done += 1;
        self.min_op_attempts = self.min_op_attempts.min(attempts);
        self.max_op_attempts = self.max_op_attempts.max(attempts);
    }
}

/// Result of a fallback-path body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step<T> {
    Done(T),
    /// An SCX failed or a node vanished: search again.
    Restart,
}

/// The bodies of one operation, supplied by a data structure.
///
/// Transactional bodies signal an operation-level restart by aborting; the
/// abort consumes one attempt like any other.
pub trait OpDescriptor {
    type Output;

    /// Sequential code, inside a transaction.
    fn run_fast(&mut self, ctx: &mut TxnContext) -> TxResult<Self::Output>;
    /// LLX/SCX code, inside a transaction.
    fn run_middle(&mut self, ctx: &mut TxnContext) -> TxResult<Self::Output>;
    /// Lock-free code, outside any transaction.
    fn run_fallback(&mut self) -> Step<Self::Output>;
    /// Sequential code under the global lock (TLE).
    fn run_locked(&mut self) -> Self::Output;
    /// Called after every transactional attempt.
    fn after_attempt(&mut self, committed: bool, version: u64);
}

/// Log of fallback-gate values and transactional commits, ordered by the
/// engine's global version clock. Used to check that no fast-path
/// transaction ever commits while an operation is on the fallback path.
#[derive(Debug, Default)]
pub struct GateMonitor {
    inner: Mutex<MonitorLog>,
}

#[derive(Debug, Default)]
struct MonitorLog {
    gate: Vec<(u64, u64)>,
    commits: Vec<(u64, Path)>,
}

/// Summary of a [`GateMonitor`] log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateReport {
    pub fast_commits: u64,
    pub middle_commits: u64,
    pub fast_commits_while_open: u64,
    pub middle_commits_while_open: u64,
    pub gate_entries: u64,
}

impl GateMonitor {
    fn gate_changed(&self, version: u64, value: u64) {
        self.inner.lock().gate.push((version, value));
    }

    fn committed(&self, version: u64, path: Path) {
        self.inner.lock().commits.push((version, path));
    }

    /// Replays the log. "Open" means the gate was nonzero at the commit's
    /// serialization version.
    pub fn report(&self) -> GateReport {
        let log = self.inner.lock();
        let mut gate = log.gate.clone();
        gate.sort_unstable();
        let mut out = GateReport {
            gate_entries: gate.windows(2).filter(|w| w[1].1 > w[0].1).count() as u64
                + gate.first().map_or(0, |g| (g.1 > 0) as u64),
            ..GateReport::default()
        };
        for &(version, path) in &log.commits {
            // Gate value published at or before `version`.
            let i = gate.partition_point(|g| g.0 <= version);
            let open = i > 0 && gate[i - 1].1 > 0;
            match path {
                Path::Fast => {
                    out.fast_commits += 1;
                    out.fast_commits_while_open += open as u64;
                }
                Path::Middle => {
                    out.middle_commits += 1;
                    out.middle_commits_while_open += open as u64;
                }
                Path::Fallback => {}
            }
        }
        out
    }
}

/// Shared path-selection state of one dictionary.
pub struct PathControl {
    pub kind: PolicyKind,
    pub budget: PathBudget,
    /// Number of operations on the fallback path (gated policies).
    gate: SharedWord,
    /// TLE's global lock.
    lock: SharedWord,
    monitor: Option<GateMonitor>,
}

impl PathControl {
    pub fn new(kind: PolicyKind, budget: PathBudget) -> Self {
        PathControl {
            kind,
            budget,
            gate: SharedWord::new(0),
            lock: SharedWord::new(0),
            monitor: None,
        }
    }

    /// Turns on gate/commit logging.
    pub fn with_monitor(mut self) -> Self {
        self.monitor = Some(GateMonitor::default());
        self
    }

    pub fn monitor(&self) -> Option<&GateMonitor> {
        self.monitor.as_ref()
    }

    pub fn gate_value(&self) -> u64 {
        self.gate.load()
    }

    pub fn lock_held(&self) -> bool {
        self.lock.load() != 0
    }

    pub fn gate_enter(&self) -> GateGuard<'_> {
        let (prev, version) = self.gate.fetch_add(1);
        if let Some(m) = &self.monitor {
            m.gate_changed(version, prev + 1);
        }
        GateGuard { control: self }
    }

    fn gate_exit(&self) {
        let (prev, version) = self.gate.fetch_sub(1);
        debug_assert!(prev > 0, "fallback gate exit without enter");
        if let Some(m) = &self.monitor {
            m.gate_changed(version, prev - 1);
        }
    }

    /// Takes TLE's global lock, spinning until it is free.
    pub fn lock_acquire(&self) -> LockGuard<'_> {
        let backoff = Backoff::new();
        while self.lock.compare_exchange(0, 1).is_err() {
            backoff.snooze();
        }
        LockGuard { control: self }
    }

    fn wait_lock_free(&self) {
        let backoff = Backoff::new();
        while self.lock.load() != 0 {
            backoff.snooze();
        }
    }

    /// Waits for the gate to read zero: snoozing first, then sleeping with
    /// an exponentially growing delay capped at 1 ms.
    fn wait_gate_closed(&self) {
        let backoff = Backoff::new();
        let mut delay = Duration::from_micros(1);
        while self.gate.load() != 0 {
            if !backoff.is_completed() {
                backoff.snooze();
            } else {
                std::thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_millis(1));
            }
        }
    }

    /// Runs `op` to completion according to the policy.
    pub fn execute<O: OpDescriptor>(
        &self,
        ctx: &mut TxnContext,
        stats: &mut PathStats,
        op: &mut O,
    ) -> O::Output {
        let mut attempts = 0u64;
        let b = self.budget;
        match self.kind {
            PolicyKind::NonHtm => {}
            PolicyKind::Tle => {
                for _ in 0..b.attempt_limit {
                    self.wait_lock_free();
                    attempts += 1;
                    let r = ctx.execute(|c| {
                        if c.read(&self.lock)? != 0 {
                            return c.abort(GATE_CLOSED);
                        }
                        op.run_fast(c)
                    });
                    if let Some(out) = self.settle(ctx, stats, op, Path::Fast, r) {
                        stats.finish_op(Path::Fast, attempts);
                        return out;
                    }
                }
                let _lock = self.lock_acquire();
                let out = op.run_locked();
                stats.finish_op(Path::Fallback, attempts);
                return out;
            }
            PolicyKind::TwoPathConcurrent => {
                for _ in 0..b.attempt_limit {
                    attempts += 1;
                    let r = ctx.execute(|c| op.run_middle(c));
                    if let Some(out) = self.settle(ctx, stats, op, Path::Fast, r) {
                        stats.finish_op(Path::Fast, attempts);
                        return out;
                    }
                }
            }
            PolicyKind::TwoPathNonConcurrent => {
                for _ in 0..b.attempt_limit {
                    self.wait_gate_closed();
                    attempts += 1;
                    let r = ctx.execute(|c| {
                        if c.read(&self.gate)? != 0 {
                            return c.abort(GATE_CLOSED);
                        }
                        op.run_fast(c)
                    });
                    if let Some(out) = self.settle(ctx, stats, op, Path::Fast, r) {
                        stats.finish_op(Path::Fast, attempts);
                        return out;
                    }
                }
                let _gate = self.gate_enter();
                let out = Self::fallback_loop(op);
                stats.finish_op(Path::Fallback, attempts);
                return out;
            }
            PolicyKind::ThreePath => {
                for _ in 0..b.fast_limit {
                    attempts += 1;
                    let r = ctx.execute(|c| {
                        if c.read(&self.gate)? != 0 {
                            return c.abort(GATE_CLOSED);
                        }
                        op.run_fast(c)
                    });
                    let gate_closed = matches!(r, Err(AbortReason::Explicit(GATE_CLOSED)));
                    if let Some(out) = self.settle(ctx, stats, op, Path::Fast, r) {
                        stats.finish_op(Path::Fast, attempts);
                        return out;
                    }
                    if gate_closed {
                        break;
                    }
                }
                for _ in 0..b.middle_limit {
                    attempts += 1;
                    let r = ctx.execute(|c| op.run_middle(c));
                    if let Some(out) = self.settle(ctx, stats, op, Path::Middle, r) {
                        stats.finish_op(Path::Middle, attempts);
                        return out;
                    }
                }
                let _gate = self.gate_enter();
                let out = Self::fallback_loop(op);
                stats.finish_op(Path::Fallback, attempts);
                return out;
            }
        }
        let out = Self::fallback_loop(op);
        stats.finish_op(Path::Fallback, attempts);
        out
    }

    fn settle<O: OpDescriptor>(
        &self,
        ctx: &TxnContext,
        stats: &mut PathStats,
        op: &mut O,
        path: Path,
        r: TxResult<O::Output>,
    ) -> Option<O::Output> {
        let version = ctx.last_commit_version();
        op.after_attempt(r.is_ok(), version);
        stats.record(path, r.as_ref().map(|_| ()).map_err(|e| *e));
        if r.is_ok() {
            if let Some(m) = &self.monitor {
                m.committed(version, path);
            }
        }
        r.ok()
    }

    fn fallback_loop<O: OpDescriptor>(op: &mut O) -> O::Output {
        loop {
            if let Step::Done(out) = op.run_fallback() {
                return out;
            }
        }
    }
}

/// Holds the fallback gate open; leaves it on drop.
pub struct GateGuard<'a> {
    control: &'a PathControl,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        self.control.gate_exit();
    }
}

pub struct LockGuard<'a> {
    control: &'a PathControl,
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        self.control.lock.store(0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::txn::TxnConfig;
    use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
    use std::sync::Arc;

    /// Increments a shared word on whichever path it runs.
    struct Bump<'a> {
        word: &'a SharedWord,
        paths: Vec<&'static str>,
        restarts_left: u32,
        after: u32,
    }

    impl<'a> Bump<'a> {
        fn new(word: &'a SharedWord) -> Self {
            Bump {
                word,
                paths: Vec::new(),
                restarts_left: 0,
                after: 0,
            }
        }
    }

    impl OpDescriptor for Bump<'_> {
        type Output = u64;
        fn run_fast(&mut self, ctx: &mut TxnContext) -> TxResult<u64> {
            self.paths.push("fast");
            let v = ctx.read(self.word)?;
            ctx.write(self.word, v + 1)?;
            Ok(v)
        }
        fn run_middle(&mut self, ctx: &mut TxnContext) -> TxResult<u64> {
            self.paths.push("middle");
            let v = ctx.read(self.word)?;
            ctx.write(self.word, v + 1)?;
            Ok(v)
        }
        fn run_fallback(&mut self) -> Step<u64> {
            self.paths.push("fallback");
            if self.restarts_left > 0 {
                self.restarts_left -= 1;
                return Step::Restart;
            }
            Step::Done(self.word.fetch_add(1).0)
        }
        fn run_locked(&mut self) -> u64 {
            self.paths.push("locked");
            self.word.fetch_add(1).0
        }
        fn after_attempt(&mut self, _: bool, _: u64) {
            self.after += 1;
        }
    }

    fn ctx(p: f64) -> TxnContext {
        TxnContext::new(
            &TxnConfig {
                spurious_abort_prob: p,
                ..TxnConfig::default()
            },
            0,
        )
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("htm".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn budget_validation() {
        assert!(PathBudget::default().validate().is_ok());
        let b = PathBudget {
            middle_limit: 0,
            ..PathBudget::default()
        };
        assert_eq!(b.validate(), Err(ZeroBudget));
    }

    #[test]
    fn three_path_without_aborts_finishes_fast() {
        let w = SharedWord::new(0);
        let pc = PathControl::new(PolicyKind::ThreePath, PathBudget::default());
        let mut stats = PathStats::default();
        let mut op = Bump::new(&w);
        assert_eq!(pc.execute(&mut ctx(0.0), &mut stats, &mut op), 0);
        assert_eq!(stats.fast.done, 1);
        assert_eq!(stats.fast.commit, 1);
        assert_eq!(op.paths, ["fast"]);
        assert_eq!(w.load(), 1);
    }

    #[test]
    fn always_abort_walks_every_budget() {
        let b = PathBudget {
            attempt_limit: 7,
            fast_limit: 3,
            middle_limit: 4,
        };
        for kind in PolicyKind::ALL {
            let w = SharedWord::new(0);
            let pc = PathControl::new(kind, b);
            let mut stats = PathStats::default();
            let mut op = Bump::new(&w);
            let mut c = ctx(1.0);
            pc.execute(&mut c, &mut stats, &mut op);
            assert_eq!(stats.txn_attempts(), kind.txn_attempts(&b) as u64, "{kind}");
            assert_eq!(op.after as u64, stats.txn_attempts());
            assert_eq!(stats.fallback.done, 1);
            assert_eq!(stats.min_op_attempts, stats.max_op_attempts);
            assert_eq!(pc.gate_value(), 0);
            assert_eq!(w.load(), 1);
            let expected_last = if kind == PolicyKind::Tle { "locked" } else { "fallback" };
            assert_eq!(op.paths, [expected_last], "bodies never run when aborted at begin");
        }
    }

    #[test]
    fn three_path_attempt_split() {
        let b = PathBudget {
            attempt_limit: 1,
            fast_limit: 3,
            middle_limit: 4,
        };
        let w = SharedWord::new(0);
        let pc = PathControl::new(PolicyKind::ThreePath, b);
        let mut stats = PathStats::default();
        pc.execute(&mut ctx(1.0), &mut stats, &mut Bump::new(&w));
        assert_eq!(stats.fast.abort_spurious, 3);
        assert_eq!(stats.middle.abort_spurious, 4);
    }

    #[test]
    fn fallback_restarts_do_not_touch_budget() {
        let w = SharedWord::new(0);
        let pc = PathControl::new(PolicyKind::NonHtm, PathBudget::default());
        let mut stats = PathStats::default();
        let mut op = Bump::new(&w);
        op.restarts_left = 3;
        pc.execute(&mut ctx(0.0), &mut stats, &mut op);
        assert_eq!(op.paths.len(), 4);
        assert_eq!(stats.txn_attempts(), 0);
        assert_eq!(stats.fallback.done, 1);
    }

    #[test]
    fn open_gate_sends_fast_attempt_to_middle() {
        let w = SharedWord::new(0);
        let pc = PathControl::new(PolicyKind::ThreePath, PathBudget::default());
        let _parked = pc.gate_enter();
        assert_eq!(pc.gate_value(), 1);
        let mut stats = PathStats::default();
        let mut op = Bump::new(&w);
        pc.execute(&mut ctx(0.0), &mut stats, &mut op);
        assert_eq!(stats.fast.abort_explicit, 1);
        assert_eq!(stats.middle.done, 1);
        // The gate read comes first, so the fast body never ran.
        assert_eq!(op.paths, ["middle"]);
    }

    #[test]
    fn gate_guard_balances() {
        let pc = PathControl::new(PolicyKind::ThreePath, PathBudget::default());
        {
            let _a = pc.gate_enter();
            let _b = pc.gate_enter();
            assert_eq!(pc.gate_value(), 2);
        }
        assert_eq!(pc.gate_value(), 0);
    }

    #[test]
    fn fast_transaction_aborts_when_gate_opens_mid_flight() {
        let pc = PathControl::new(PolicyKind::ThreePath, PathBudget::default());
        let x = SharedWord::new(0);
        let mut c = ctx(0.0);
        c.begin().unwrap();
        assert_eq!(c.read(&pc.gate), Ok(0));
        c.write(&x, 1).unwrap();
        let g = pc.gate_enter();
        assert_eq!(c.commit(), Err(AbortReason::Conflict));
        drop(g);
        assert_eq!(x.load(), 0);
    }

    #[test]
    fn tle_transaction_aborts_when_lock_taken_mid_flight() {
        let pc = PathControl::new(PolicyKind::Tle, PathBudget::default());
        let x = SharedWord::new(0);
        let mut c = ctx(0.0);
        c.begin().unwrap();
        assert_eq!(c.read(&pc.lock), Ok(0));
        c.write(&x, 1).unwrap();
        let g = pc.lock_acquire();
        assert_eq!(c.commit(), Err(AbortReason::Conflict));
        drop(g);
    }

    #[test]
    fn tle_waits_for_holder_then_completes() {
        let pc = Arc::new(PathControl::new(PolicyKind::Tle, PathBudget::default()));
        let w = Arc::new(SharedWord::new(0));
        let g = pc.lock_acquire();
        let t = {
            let (pc, w) = (pc.clone(), w.clone());
            std::thread::spawn(move || {
                let mut stats = PathStats::default();
                pc.execute(&mut ctx(0.0), &mut stats, &mut Bump::new(&w));
                stats
            })
        };
        std::thread::sleep(Duration::from_millis(50));
        assert_eq!(w.load(), 0);
        drop(g);
        let stats = t.join().unwrap();
        assert_eq!(stats.completions(), 1);
        assert_eq!(w.load(), 1);
    }

    #[test]
    fn tle_critical_section_is_exclusive() {
        struct Exclusive<'a> {
            inside: &'a AtomicU64,
            overlaps: &'a AtomicU64,
        }
        impl OpDescriptor for Exclusive<'_> {
            type Output = ();
            fn run_fast(&mut self, _: &mut TxnContext) -> TxResult<()> {
                unreachable!()
            }
            fn run_middle(&mut self, _: &mut TxnContext) -> TxResult<()> {
                unreachable!()
            }
            fn run_fallback(&mut self) -> Step<()> {
                unreachable!()
            }
            fn run_locked(&mut self) {
                if self.inside.fetch_add(1, SeqCst) != 0 {
                    self.overlaps.fetch_add(1, SeqCst);
                }
                std::thread::yield_now();
                self.inside.fetch_sub(1, SeqCst);
            }
            fn after_attempt(&mut self, _: bool, _: u64) {}
        }
        let pc = PathControl::new(PolicyKind::Tle, PathBudget::default());
        let inside = AtomicU64::new(0);
        let overlaps = AtomicU64::new(0);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    let mut c = ctx(1.0);
                    let mut stats = PathStats::default();
                    for _ in 0..200 {
                        let mut op = Exclusive {
                            inside: &inside,
                            overlaps: &overlaps,
                        };
                        pc.execute(&mut c, &mut stats, &mut op);
                    }
                });
            }
        });
        assert_eq!(overlaps.load(SeqCst), 0);
    }

    #[test]
    fn concurrent_policies_never_lose_updates() {
        for kind in PolicyKind::ALL {
            let pc = PathControl::new(kind, PathBudget::default()).with_monitor();
            let w = SharedWord::new(0);
            let total = std::thread::scope(|s| {
                let hs: Vec<_> = (0..4)
                    .map(|t| {
                        let (pc, w) = (&pc, &w);
                        s.spawn(move || {
                            let mut c = TxnContext::new(
                                &TxnConfig {
                                    spurious_abort_prob: 0.3,
                                    rng_seed: t,
                                    ..TxnConfig::default()
                                },
                                t,
                            );
                            let mut stats = PathStats::default();
                            for _ in 0..500 {
                                pc.execute(&mut c, &mut stats, &mut Bump::new(w));
                            }
                            stats
                        })
                    })
                    .collect();
                let mut total = PathStats::default();
                for h in hs {
                    total.merge(&h.join().unwrap());
                }
                total
            });
            assert_eq!(w.load(), 2000, "{kind}");
            assert_eq!(total.completions(), 2000);
            let report = pc.monitor().unwrap().report();
            if matches!(kind, PolicyKind::ThreePath | PolicyKind::TwoPathNonConcurrent) {
                assert_eq!(report.fast_commits_while_open, 0, "{kind}");
            }
        }
    }

    #[test]
    fn monitor_orders_commits_against_gate_versions() {
        let m = GateMonitor::default();
        m.gate_changed(10, 1);
        m.gate_changed(20, 0);
        m.committed(5, Path::Fast);
        m.committed(15, Path::Middle);
        m.committed(20, Path::Fast);
        m.committed(12, Path::Fast);
        let r = m.report();
        assert_eq!(r.fast_commits, 3);
        assert_eq!(r.fast_commits_while_open, 1);
        assert_eq!(r.middle_commits_while_open, 1);
        assert_eq!(r.gate_entries, 1);
    }
}
