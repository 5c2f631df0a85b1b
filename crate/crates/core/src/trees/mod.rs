//! Dictionaries built on LLX/SCX and driven by a [`PathControl`].
//!
//! Each tree operation is written once as a body over [`Access`], which
//! routes memory accesses, LLX and SCX to the right primitives for the path
//! the policy picked.

mod abtree;
mod bst;

pub use abtree::AbTree;
pub use bst::Bst;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::SeqCst};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::llxscx::{Process, Record, TaggedSeq, FAILED_VALIDATION, MAX_PROCESSES, NODE_MARKED};
use crate::policy::{OpDescriptor, PathBudget, PathControl, PathStats, PolicyKind, Step};
use crate::reclaim::{EpochDomain, Retired};
use crate::txn::{AbortReason, SharedWord, TxResult, TxnConfig, TxnContext};

/// Handle value meaning "no node".
pub(crate) const NIL: u64 = 0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TreeConfigError {
    #[error(transparent)]
    Txn(#[from] crate::txn::ConfigError),
    #[error(transparent)]
    Budget(#[from] crate::policy::ZeroBudget),
    #[error("(a,b)-tree needs 2 <= a and b >= 2a - 1 (got a={a}, b={b})")]
    Degrees { a: usize, b: usize },
}

/// Construction parameters shared by both trees.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeConfig {
    pub policy: PolicyKind,
    pub budget: PathBudget,
    pub txn: TxnConfig,
    /// Search outside the transaction on the fast path and validate the
    /// found nodes inside it (inserts and deletes only).
    pub search_outside_txn: bool,
    /// Minimum and maximum node degree of the (a,b)-tree.
    pub a: usize,
    pub b: usize,
    /// Poison reclaimed nodes instead of freeing them (for use-after-free
    /// tests).
    pub poison: bool,
    /// Log gate transitions and commits for [`crate::policy::GateMonitor`].
    pub monitor: bool,
}

impl TreeConfig {
    pub fn new(policy: PolicyKind) -> Self {
        TreeConfig {
            policy,
            budget: PathBudget::default(),
            txn: TxnConfig::default(),
            search_outside_txn: false,
            a: 6,
            b: 16,
            poison: false,
            monitor: false,
        }
    }

    pub fn validate(&self) -> Result<(), TreeConfigError> {
        self.txn.validate()?;
        self.budget.validate()?;
        if self.a < 2 || self.b + 1 < 2 * self.a {
            return Err(TreeConfigError::Degrees { a: self.a, b: self.b });
        }
        Ok(())
    }
}

#[derive(Default)]
struct PidPool {
    next: usize,
    free: Vec<usize>,
    last_tag: HashMap<usize, TaggedSeq>,
}

/// State shared by a tree and its workers.
pub(crate) struct Shared {
    pub control: PathControl,
    pub domain: Arc<EpochDomain>,
    pub config: TreeConfig,
    pids: Arc<Mutex<PidPool>>,
    broken_insert: AtomicBool,
    id: u64,
}

static NEXT_TREE: AtomicU64 = AtomicU64::new(1);

impl Shared {
    pub fn new(config: TreeConfig) -> Result<Self, TreeConfigError> {
        config.validate()?;
        let mut control = PathControl::new(config.policy, config.budget);
        if config.monitor {
            control = control.with_monitor();
        }
        Ok(Shared {
            control,
            domain: EpochDomain::new(config.poison),
            config,
            pids: Arc::default(),
            broken_insert: AtomicBool::new(false),
            id: NEXT_TREE.fetch_add(1, SeqCst),
        })
    }

    pub fn register(&self) -> Worker {
        let (pid, last) = {
            let mut pool = self.pids.lock();
            let pid = pool.free.pop().unwrap_or_else(|| {
                pool.next += 1;
                pool.next - 1
            });
            assert!(pid < MAX_PROCESSES, "too many workers");
            (pid, pool.last_tag.get(&pid).copied())
        };
        let handle = self.domain.register().expect("no free reclamation slot");
        let mut txn = self.config.txn.clone();
        txn.rng_seed = txn.rng_seed.wrapping_add(pid as u64);
        Worker {
            ctx: TxnContext::new(&txn, pid as u64),
            proc: Process::new(pid, handle, last),
            stats: PathStats::default(),
            rebalance_stats: PathStats::default(),
            allocs: 0,
            pids: self.pids.clone(),
            tree: self.id,
        }
    }

    pub fn broken_insert_flag(&self) -> &AtomicBool {
        &self.broken_insert
    }

    pub fn broken_insert(&self) -> bool {
        self.broken_insert.load(SeqCst)
    }

    fn fallback_mode(&self) -> Mode {
        // Policies whose transactions never write tags can use the original LLX.
        let original = matches!(self.config.policy, PolicyKind::NonHtm | PolicyKind::TwoPathNonConcurrent);
        Mode::Fallback { original }
    }

    /// Runs one operation body to completion through the policy.
    pub fn run<T>(
        &self,
        w: &mut Worker,
        rebalancing: bool,
        body: impl FnMut(&mut Access<'_>) -> Flow<T>,
    ) -> T {
        assert_eq!(w.tree, self.id, "worker registered with another tree");
        w.proc.begin_op();
        let mut op = TreeOp {
            body,
            proc: &mut w.proc,
            allocs: &mut w.allocs,
            mark: self.config.search_outside_txn,
            fallback: self.fallback_mode(),
        };
        let stats = if rebalancing {
            &mut w.rebalance_stats
        } else {
            &mut w.stats
        };
        let out = self.control.execute(&mut w.ctx, stats, &mut op);
        w.proc.end_op();
        out
    }

    /// Hands every node reachable at teardown to the reclamation domain.
    pub fn adopt_reachable(&self, nodes: Vec<Retired>) {
        self.domain.adopt(nodes);
    }
}

/// Per-thread handle for operating on one tree.
pub struct Worker {
    ctx: TxnContext,
    proc: Process,
    pub stats: PathStats,
    /// Statistics of rebalancing steps, kept apart so per-path completions
    /// add up to the number of dictionary operations.
    pub rebalance_stats: PathStats,
    allocs: u64,
    pids: Arc<Mutex<PidPool>>,
    tree: u64,
}

impl Worker {
    pub fn pid(&self) -> usize {
        self.proc.pid()
    }

    /// Nodes allocated by this worker so far.
    pub fn allocations(&self) -> u64 {
        self.allocs
    }

    /// Yield the CPU at scheduling points with probability `prob`.
    pub fn set_chaos(&mut self, prob: f64, seed: u64) {
        self.proc.set_chaos(prob, seed);
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let mut pool = self.pids.lock();
        pool.last_tag.insert(self.proc.pid(), self.proc.tagseq());
        pool.free.push(self.proc.pid());
    }
}

/// Common interface of the two trees.
pub trait Dictionary: Send + Sync {
    fn name(&self) -> &'static str;
    fn register(&self) -> Worker;
    /// Maps `key` to `value`; true if the key was absent.
    fn insert(&self, w: &mut Worker, key: u64, value: u64) -> bool;
    /// True if the key was present.
    fn delete(&self, w: &mut Worker, key: u64) -> bool;
    fn get(&self, w: &mut Worker, key: u64) -> Option<u64>;
    /// Pairs with `lo <= key < hi`, in key order, as of one instant.
    fn range_query(&self, w: &mut Worker, lo: u64, hi: u64) -> Vec<(u64, u64)>;
    fn control(&self) -> &PathControl;
    fn config(&self) -> &TreeConfig;
    /// Finishes all pending rebalancing. Quiescent use only.
    fn rebalance_all(&self, w: &mut Worker);
    /// Shape, order and balance violations. Quiescent use only.
    fn validate(&self) -> Vec<String>;
    /// All pairs in key order. Quiescent use only.
    fn entries(&self) -> Vec<(u64, u64)>;
    /// Hash of contents and shape. Quiescent use only.
    fn shape_hash(&self) -> u64;
    fn len(&self) -> usize {
        self.entries().len()
    }
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Wrapping sum of all keys. Quiescent use only.
    fn key_sum(&self) -> u64 {
        self.entries().iter().fold(0u64, |s, (k, _)| s.wrapping_add(*k))
    }
    /// Makes fallback inserts of absent keys skip SCX validation, producing
    /// a deliberately non-linearizable tree for checker tests.
    #[doc(hidden)]
    fn set_broken_insert(&self, on: bool);
}

/// Which primitives an operation body is running on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Mode {
    /// Sequential code in a transaction; may edit nodes in place.
    Fast,
    /// LLX/SCX in a transaction.
    Middle,
    /// LLX/SCX outside transactions.
    Fallback { original: bool },
    /// Sequential code under the TLE lock.
    Locked,
}

impl Mode {
    pub fn in_place(self) -> bool {
        matches!(self, Mode::Fast | Mode::Locked)
    }
}

/// Why a body stopped early.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Halt {
    Abort(AbortReason),
    Restart,
}

impl From<AbortReason> for Halt {
    fn from(r: AbortReason) -> Self {
        Halt::Abort(r)
    }
}

pub(crate) type Flow<T> = Result<T, Halt>;

/// Memory and LLX/SCX access for one attempt of an operation body.
pub(crate) struct Access<'a> {
    pub mode: Mode,
    ctx: Option<&'a mut TxnContext>,
    proc: &'a mut Process,
    allocs: &'a mut u64,
    mark: bool,
}

impl Access<'_> {
    /// Reads a mutable word on the current path.
    pub fn load(&mut self, w: &SharedWord) -> Flow<u64> {
        match self.ctx.as_deref_mut() {
            Some(c) => Ok(c.read(w)?),
            None => Ok(w.load()),
        }
    }

    /// Reads a word without transactional tracking.
    pub fn plain(&self, w: &SharedWord) -> u64 {
        w.load()
    }

    /// In-place write; fast and locked paths only.
    pub fn store(&mut self, w: &SharedWord, v: u64) -> Flow<()> {
        debug_assert!(self.mode.in_place());
        match self.ctx.as_deref_mut() {
            Some(c) => c.write(w, v)?,
            None => {
                w.store(v);
            }
        }
        Ok(())
    }

    /// Whether the fast path searches outside the transaction.
    pub fn outside_search(&self) -> bool {
        self.mark && self.mode == Mode::Fast
    }

    /// Aborts with [`NODE_MARKED`] unless `node` is unmarked.
    pub fn require_unmarked<N: Record>(&mut self, node: &N) -> Flow<()> {
        if self.load(&node.header().marked)? != 0 {
            return self.abort(NODE_MARKED);
        }
        Ok(())
    }

    pub fn abort<T>(&mut self, code: u8) -> Flow<T> {
        match self.ctx.as_deref_mut() {
            Some(c) => match c.abort::<()>(code) {
                Err(e) => Err(e.into()),
                Ok(()) => unreachable!(),
            },
            None => Err(Halt::Restart),
        }
    }

    /// Snapshot of `node`'s slots, or a restart if it is frozen or finalized.
    pub fn llx<N: Record>(&mut self, node: &N) -> Flow<Vec<u64>> {
        let snap = match self.mode {
            Mode::Fast | Mode::Locked => {
                let mut out = Vec::with_capacity(node.slots().len());
                for s in node.slots() {
                    out.push(self.load(s)?);
                }
                return Ok(out);
            }
            Mode::Middle => {
                let ctx = self.ctx.as_deref_mut().expect("middle path without a transaction");
                self.proc.llx_htm_txn(ctx, node)?
            }
            Mode::Fallback { original: true } => self.proc.llx_o(node),
            Mode::Fallback { original: false } => self.proc.llx_htm(node),
        };
        snap.snapshot().ok_or(Halt::Restart)
    }

    /// Replaces the value in `fld` (read by the LLX of its owner) with `new`,
    /// finalizing `r`. On in-place paths this is a plain write plus
    /// retirement of `r`.
    pub fn scx<N: Record>(&mut self, v: &[&N], r: &[&N], fld: (&N, usize), new: u64) -> Flow<()> {
        let (owner, slot) = fld;
        match self.mode {
            Mode::Fast | Mode::Locked => {
                self.store(&owner.slots()[slot], new)?;
                for n in r {
                    if self.mark {
                        self.store(&n.header().marked, 1)?;
                    }
                    self.proc.retire_on_success(*n);
                }
                Ok(())
            }
            Mode::Middle => {
                let ctx = self.ctx.as_deref_mut().expect("middle path without a transaction");
                self.proc.scx_htm(ctx, v, r, fld, new)?;
                Ok(())
            }
            Mode::Fallback { .. } => {
                let ok = self.proc.scx_o(v, r, fld, new);
                self.proc.finish_attempt(ok, 0);
                if ok {
                    Ok(())
                } else {
                    Err(Halt::Restart)
                }
            }
        }
    }

    /// Unvalidated store used by the deliberately broken insert.
    pub fn store_unchecked<N: Record>(&mut self, fld: (&N, usize), new: u64) {
        fld.0.slots()[fld.1].store(new);
        self.proc.finish_attempt(true, 0);
    }

    /// Unlinks `node` on an in-place path: marks it when searches may run
    /// outside transactions, and retires it.
    pub fn unlink<N: Record>(&mut self, node: &N) -> Flow<()> {
        if self.mark {
            self.store(&node.header().marked, 1)?;
        }
        self.proc.retire_on_success(node);
        Ok(())
    }

    /// True if `node` is unchanged since this operation's LLX of it.
    pub fn still_linked<N: Record>(&self, node: &N) -> bool {
        self.proc.still_linked(node.header())
    }


    /// Publishes a new node to this attempt; it is freed if the attempt
    /// fails.
    pub fn alloc<N: Record>(&mut self, node: N) -> &'static N {
        *self.allocs += 1;
        let p = Box::into_raw(Box::new(node));
        self.proc.track_fresh(Retired::unpublished(p as *const N));
        // SAFETY: freshly leaked; freed only through reclamation.
        unsafe { &*p }
    }

    pub fn yield_point(&mut self) {
        self.proc.yield_point();
    }
}

struct TreeOp<'a, F> {
    body: F,
    proc: &'a mut Process,
    allocs: &'a mut u64,
    mark: bool,
    fallback: Mode,
}

impl<T, F: FnMut(&mut Access<'_>) -> Flow<T>> TreeOp<'_, F> {
    fn in_txn(&mut self, mode: Mode, ctx: &mut TxnContext) -> TxResult<T> {
        let mut acc = Access {
            mode,
            ctx: Some(ctx),
            proc: self.proc,
            allocs: self.allocs,
            mark: self.mark,
        };
        match (self.body)(&mut acc) {
            Ok(v) => Ok(v),
            Err(Halt::Abort(r)) => Err(r),
            Err(Halt::Restart) => acc.ctx.as_deref_mut().unwrap().abort(FAILED_VALIDATION),
        }
    }

    fn direct(&mut self, mode: Mode) -> Flow<T> {
        let mut acc = Access {
            mode,
            ctx: None,
            proc: self.proc,
            allocs: self.allocs,
            mark: self.mark,
        };
        let out = (self.body)(&mut acc);
        self.proc.finish_attempt(out.is_ok(), 0);
        out
    }
}

impl<T, F: FnMut(&mut Access<'_>) -> Flow<T>> OpDescriptor for TreeOp<'_, F> {
    type Output = T;

    fn run_fast(&mut self, ctx: &mut TxnContext) -> TxResult<T> {
        self.in_txn(Mode::Fast, ctx)
    }

    fn run_middle(&mut self, ctx: &mut TxnContext) -> TxResult<T> {
        self.in_txn(Mode::Middle, ctx)
    }

    fn run_fallback(&mut self) -> Step<T> {
        match self.direct(self.fallback) {
            Ok(v) => Step::Done(v),
            Err(_) => Step::Restart,
        }
    }

    fn run_locked(&mut self) -> T {
        loop {
            if let Ok(v) = self.direct(Mode::Locked) {
                return v;
            }
        }
    }

    fn after_attempt(&mut self, committed: bool, version: u64) {
        self.proc.finish_attempt(committed, version);
    }
}

/// Dereferences a node handle.
///
/// # Safety
/// `handle` was read from a reachable node inside the current reclamation
/// guard (or the tree is quiescent).
pub(crate) unsafe fn deref<'a, N: Record>(handle: u64) -> &'a N {
    debug_assert_ne!(handle, NIL);
    let n = &*(handle as *const N);
    debug_assert!(n.header().is_live(), "reached a reclaimed node");
    n
}

pub(crate) fn handle<N>(node: &N) -> u64 {
    node as *const N as u64
}
