//! Software emulation of best-effort hardware transactions.
//!
//! Shared state lives in [`SharedWord`]s. Each word carries a versioned
//! lock next to its value; versions are drawn from one process-wide clock.
//! Transactions buffer their writes, validate their reads whenever the clock
//! has moved past their snapshot, and publish everything at commit while
//! holding the locks of the words they write. Plain (non-transactional)
//! stores go through the same lock and clock, so a racing plain write
//! invalidates transactional readers exactly like a committed transaction.
//!
//! The engine never retries. Callers decide what to do with an abort.

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use crossbeam_utils::Backoff;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

static CLOCK: AtomicU64 = AtomicU64::new(0);

const LOCK_BIT: u64 = 1;

/// How many backoff rounds a transaction waits on a locked word before it
/// gives up with a conflict.
const LOCK_PATIENCE: u32 = 12;

/// Beyond this many entries the footprint gets a hash index.
const LINEAR_SCAN_MAX: usize = 16;

thread_local! {
    static IN_TXN: Cell<bool> = const { Cell::new(false) };
}

/// Current value of the global version clock.
pub fn clock_now() -> u64 {
    CLOCK.load(SeqCst)
}

fn tick() -> u64 {
    CLOCK.fetch_add(1, SeqCst) + 1
}

/// A 64-bit word that transactions and plain code can both access.
#[derive(Debug, Default)]
pub struct SharedWord {
    meta: AtomicU64,
    val: AtomicU64,
}

impl SharedWord {
    pub const fn new(value: u64) -> Self {
        SharedWord {
            meta: AtomicU64::new(0),
            val: AtomicU64::new(value),
        }
    }

    /// Consistent plain read.
    pub fn load(&self) -> u64 {
        self.load_versioned().0
    }

    /// Consistent plain read returning `(value, version)`.
    pub fn load_versioned(&self) -> (u64, u64) {
        let backoff = Backoff::new();
        loop {
            let m1 = self.meta.load(SeqCst);
            if m1 & LOCK_BIT != 0 {
                backoff.snooze();
                continue;
            }
            let v = self.val.load(SeqCst);
            if self.meta.load(SeqCst) == m1 {
                return (v, m1 >> 1);
            }
        }
    }

    /// Unsynchronized read. Only valid for fields that never change after the
    /// record holding them was published.
    #[inline]
    pub fn raw(&self) -> u64 {
        self.val.load(SeqCst)
    }

    /// Initializes a word of a record that no other thread can see yet.
    #[inline]
    pub fn init(&self, value: u64) {
        self.val.store(value, SeqCst);
    }

    pub fn version(&self) -> u64 {
        self.meta.load(SeqCst) >> 1
    }

    fn lock(&self) -> u64 {
        let backoff = Backoff::new();
        loop {
            let m = self.meta.load(SeqCst);
            if m & LOCK_BIT == 0
                && self
                    .meta
                    .compare_exchange_weak(m, m | LOCK_BIT, SeqCst, SeqCst)
                    .is_ok()
            {
                return m;
            }
            backoff.snooze();
        }
    }

    fn publish(&self, value: u64) -> u64 {
        let version = tick();
        self.val.store(value, SeqCst);
        self.meta.store(version << 1, SeqCst);
        version
    }

    /// Plain store. Returns the version it was published at.
    pub fn store(&self, value: u64) -> u64 {
        self.lock();
        self.publish(value)
    }

    /// Plain CAS. `Ok(version)` on success, `Err(actual)` otherwise.
    pub fn compare_exchange(&self, current: u64, new: u64) -> Result<u64, u64> {
        let seen = self.load();
        if seen != current {
            return Err(seen);
        }
        let m = self.lock();
        let seen = self.val.load(SeqCst);
        if seen != current {
            self.meta.store(m, SeqCst);
            return Err(seen);
        }
        Ok(self.publish(new))
    }

    /// Plain CAS that also requires the word to still be at `version`.
    /// Immune to ABA on values that can recur.
    pub fn compare_exchange_at(&self, current: u64, version: u64, new: u64) -> Result<u64, u64> {
        let (seen, ver) = self.load_versioned();
        if seen != current || ver != version {
            return Err(seen);
        }
        let m = self.lock();
        let seen = self.val.load(SeqCst);
        if seen != current || m >> 1 != version {
            self.meta.store(m, SeqCst);
            return Err(seen);
        }
        Ok(self.publish(new))
    }

    /// Plain wrapping add. Returns `(previous value, version)`.
    pub fn fetch_add(&self, delta: u64) -> (u64, u64) {
        self.lock();
        let prev = self.val.load(SeqCst);
        (prev, self.publish(prev.wrapping_add(delta)))
    }

    /// Plain wrapping subtract. Returns `(previous value, version)`.
    pub fn fetch_sub(&self, delta: u64) -> (u64, u64) {
        self.fetch_add(delta.wrapping_neg())
    }
}

/// Engine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TxnConfig {
    /// Distinct words a transaction may touch before it aborts with
    /// [`AbortReason::Capacity`].
    pub capacity_limit: usize,
    /// Chance that an attempt aborts spuriously, drawn once when it begins.
    pub spurious_abort_prob: f64,
    pub rng_seed: u64,
}

impl Default for TxnConfig {
    fn default() -> Self {
        TxnConfig {
            capacity_limit: 64,
            spurious_abort_prob: 0.0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("capacity limit must be at least 1")]
    ZeroCapacity,
    #[error("spurious abort probability {0} is outside [0, 1]")]
    BadProbability(f64),
}

impl TxnConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.capacity_limit == 0 {
            return Err(ConfigError::ZeroCapacity);
        }
        if !(0.0..=1.0).contains(&self.spurious_abort_prob) {
            return Err(ConfigError::BadProbability(self.spurious_abort_prob));
        }
        Ok(())
    }
}

/// Why an attempt did not commit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AbortReason {
    Conflict,
    Capacity,
    Explicit(u8),
    Spurious,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnOutcome {
    Committed,
    Aborted(AbortReason),
}

impl TxnOutcome {
    pub fn of<T>(result: &TxResult<T>) -> TxnOutcome {
        match result {
            Ok(_) => TxnOutcome::Committed,
            Err(reason) => TxnOutcome::Aborted(*reason),
        }
    }
}

/// Result of anything that runs inside a transaction. The error side means
/// the attempt is dead; bodies should propagate it with `?`.
pub type TxResult<T> = Result<T, AbortReason>;

#[derive(Clone, Copy, Debug)]
struct Entry {
    word: *const SharedWord,
    /// `(meta, value)` seen by the first read.
    read: Option<(u64, u64)>,
    /// Lock word observed when the word was first written.
    write_base: u64,
    write: Option<u64>,
}

/// Per-thread transaction state. One attempt is live at a time.
///
/// `begin`, `read`, `write` and `commit` are public so that tests can drive
/// several contexts step by step from one thread. Regular code goes through
/// [`TxnContext::execute`].
pub struct TxnContext {
    capacity: usize,
    spurious: f64,
    rng: ChaCha8Rng,
    alive: bool,
    failed: Option<AbortReason>,
    snapshot: u64,
    entries: Vec<Entry>,
    index: HashMap<usize, usize>,
    last_version: u64,
}

// Entries hold raw word pointers only while an attempt is live, and a live
// attempt never crosses threads.
unsafe impl Send for TxnContext {}

impl TxnContext {
    /// `stream` separates the random streams of contexts sharing a seed.
    pub fn new(config: &TxnConfig, stream: u64) -> Self {
        config.validate().expect("invalid transaction config");
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(stream);
        TxnContext {
            capacity: config.capacity_limit,
            spurious: config.spurious_abort_prob,
            rng,
            alive: false,
            failed: None,
            snapshot: 0,
            entries: Vec::new(),
            index: HashMap::new(),
            last_version: 0,
        }
    }

    /// Runs `body` as one attempt. Writes become visible only if the result
    /// is `Ok`.
    ///
    /// Panics when called from inside another transaction on the same thread.
    pub fn execute<T>(&mut self, body: impl FnOnce(&mut TxnContext) -> TxResult<T>) -> TxResult<T> {
        assert!(
            !IN_TXN.with(|f| f.get()) && !self.alive,
            "nested transactions are not supported"
        );
        struct Flag;
        impl Drop for Flag {
            fn drop(&mut self) {
                IN_TXN.with(|f| f.set(false));
            }
        }
        IN_TXN.with(|f| f.set(true));
        let _flag = Flag;

        self.begin()?;
        match body(self) {
            Ok(value) => self.commit().map(|()| value),
            Err(reason) => {
                let reason = self.failed.unwrap_or(reason);
                self.reset();
                Err(reason)
            }
        }
    }

    /// Starts an attempt. The spurious-abort coin is flipped here.
    pub fn begin(&mut self) -> TxResult<()> {
        assert!(!self.alive, "attempt already in progress");
        self.entries.clear();
        self.index.clear();
        self.failed = None;
        if self.spurious > 0.0 && (self.spurious >= 1.0 || self.rng.gen_bool(self.spurious)) {
            return Err(AbortReason::Spurious);
        }
        self.alive = true;
        self.snapshot = clock_now();
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.alive
    }

    /// Commit version of the last committed attempt. Read-only attempts
    /// report their validated snapshot.
    pub fn last_commit_version(&self) -> u64 {
        self.last_version
    }

    /// Number of distinct words the live attempt has touched.
    pub fn footprint(&self) -> usize {
        self.entries.len()
    }

    fn fail(&mut self, reason: AbortReason) -> AbortReason {
        if self.failed.is_none() {
            self.failed = Some(reason);
        }
        self.failed.unwrap()
    }

    fn reset(&mut self) {
        self.alive = false;
        self.entries.clear();
        self.index.clear();
    }

    fn find(&self, word: *const SharedWord) -> Option<usize> {
        if self.entries.len() <= LINEAR_SCAN_MAX {
            self.entries.iter().position(|e| std::ptr::eq(e.word, word))
        } else {
            self.index.get(&(word as usize)).copied()
        }
    }

    fn push(&mut self, entry: Entry) -> TxResult<usize> {
        if self.entries.len() >= self.capacity {
            return Err(self.fail(AbortReason::Capacity));
        }
        let at = self.entries.len();
        self.entries.push(entry);
        if self.entries.len() == LINEAR_SCAN_MAX + 1 {
            for (i, e) in self.entries.iter().enumerate() {
                self.index.insert(e.word as usize, i);
            }
        } else if self.entries.len() > LINEAR_SCAN_MAX + 1 {
            self.index.insert(entry.word as usize, at);
        }
        Ok(at)
    }

    fn check_live(&mut self) -> TxResult<()> {
        match self.failed {
            Some(reason) => Err(reason),
            None if !self.alive => panic!("transactional access outside an attempt"),
            None => Ok(()),
        }
    }

    fn reads_valid(&self) -> bool {
        self.entries.iter().all(|e| match e.read {
            // SAFETY: words outlive the attempt (callers hold a reclamation guard).
            Some((meta, _)) => (unsafe { (*e.word).meta.load(SeqCst) }) == meta,
            None => true,
        })
    }

    /// Reads the first `(meta, value)` of `word` consistent with the snapshot.
    fn sample(&mut self, word: &SharedWord) -> TxResult<(u64, u64)> {
        let backoff = Backoff::new();
        let mut waited = 0;
        loop {
            let m1 = word.meta.load(SeqCst);
            if m1 & LOCK_BIT != 0 {
                waited += 1;
                if waited > LOCK_PATIENCE {
                    return Err(self.fail(AbortReason::Conflict));
                }
                backoff.snooze();
                continue;
            }
            let v = word.val.load(SeqCst);
            if word.meta.load(SeqCst) != m1 {
                continue;
            }
            if m1 >> 1 > self.snapshot {
                // Something committed since we started: extend the snapshot if
                // everything read so far is still current.
                let now = clock_now();
                if !self.reads_valid() {
                    return Err(self.fail(AbortReason::Conflict));
                }
                self.snapshot = now;
                if m1 >> 1 > self.snapshot {
                    continue;
                }
            }
            return Ok((m1, v));
        }
    }

    /// Transactional read with read-own-writes.
    pub fn read(&mut self, word: &SharedWord) -> TxResult<u64> {
        self.check_live()?;
        let ptr = word as *const SharedWord;
        if let Some(i) = self.find(ptr) {
            let e = self.entries[i];
            if let Some(v) = e.write {
                return Ok(v);
            }
            if let Some((_, v)) = e.read {
                return Ok(v);
            }
            let (meta, value) = self.sample(word)?;
            self.entries[i].read = Some((meta, value));
            return Ok(value);
        }
        if self.entries.len() >= self.capacity {
            return Err(self.fail(AbortReason::Capacity));
        }
        let (meta, value) = self.sample(word)?;
        self.push(Entry {
            word: ptr,
            read: Some((meta, value)),
            write_base: 0,
            write: None,
        })?;
        Ok(value)
    }

    /// Buffered write. Invisible to everyone else until commit.
    pub fn write(&mut self, word: &SharedWord, value: u64) -> TxResult<()> {
        self.check_live()?;
        let ptr = word as *const SharedWord;
        match self.find(ptr) {
            Some(i) => {
                if self.entries[i].write.is_none() {
                    self.entries[i].write_base = word.meta.load(SeqCst) & !LOCK_BIT;
                }
                self.entries[i].write = Some(value);
            }
            None => {
                let base = word.meta.load(SeqCst) & !LOCK_BIT;
                self.push(Entry {
                    word: ptr,
                    read: None,
                    write_base: base,
                    write: Some(value),
                })?;
            }
        }
        Ok(())
    }

    /// Explicit abort. Always returns `Err`, so bodies can `return ctx.abort(c)`.
    pub fn abort<T>(&mut self, code: u8) -> TxResult<T> {
        Err(self.fail(AbortReason::Explicit(code)))
    }

    /// Tries to commit the live attempt.
    pub fn commit(&mut self) -> TxResult<()> {
        if let Some(reason) = self.failed {
            self.reset();
            return Err(reason);
        }
        assert!(self.alive, "commit without a live attempt");

        let mut writes: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].write.is_some())
            .collect();
        if writes.is_empty() {
            // Every read was validated against the snapshot when it happened.
            self.last_version = self.snapshot;
            self.reset();
            return Ok(());
        }
        writes.sort_by_key(|&i| self.entries[i].word as usize);

        let mut held: Vec<(usize, u64)> = Vec::with_capacity(writes.len());
        let release = |held: &[(usize, u64)], entries: &[Entry]| {
            for &(i, meta) in held {
                // SAFETY: see `reads_valid`.
                unsafe { (*entries[i].word).meta.store(meta, SeqCst) };
            }
        };
        for &i in &writes {
            let e = self.entries[i];
            // SAFETY: see `reads_valid`.
            let word = unsafe { &*e.word };
            let backoff = Backoff::new();
            let mut waited = 0;
            let meta = loop {
                let m = word.meta.load(SeqCst);
                if m & LOCK_BIT == 0 {
                    if word.meta.compare_exchange(m, m | LOCK_BIT, SeqCst, SeqCst).is_ok() {
                        break Some(m);
                    }
                    continue;
                }
                waited += 1;
                if waited > LOCK_PATIENCE {
                    break None;
                }
                backoff.snooze();
            };
            let Some(meta) = meta else {
                release(&held, &self.entries);
                return Err(self.abort_commit(AbortReason::Conflict));
            };
            held.push((i, meta));
            let expected = e.read.map_or(e.write_base, |(m, _)| m);
            if meta != expected {
                release(&held, &self.entries);
                return Err(self.abort_commit(AbortReason::Conflict));
            }
        }

        let version = tick();
        if version != self.snapshot + 1 {
            let stale = self.entries.iter().any(|e| match (e.read, e.write) {
                // SAFETY: see `reads_valid`.
                (Some((meta, _)), None) => (unsafe { (*e.word).meta.load(SeqCst) }) != meta,
                _ => false,
            });
            if stale {
                release(&held, &self.entries);
                return Err(self.abort_commit(AbortReason::Conflict));
            }
        }

        for &(i, _) in &held {
            let e = self.entries[i];
            // SAFETY: see `reads_valid`.
            let word = unsafe { &*e.word };
            word.val.store(e.write.unwrap(), SeqCst);
        }
        for &(i, _) in &held {
            // SAFETY: see `reads_valid`.
            unsafe { (*self.entries[i].word).meta.store(version << 1, SeqCst) };
        }
        self.last_version = version;
        self.reset();
        Ok(())
    }

    fn abort_commit(&mut self, reason: AbortReason) -> AbortReason {
        let reason = self.fail(reason);
        self.reset();
        reason
    }

    /// Abandons a live attempt started with [`TxnContext::begin`].
    pub fn rollback(&mut self) {
        self.reset();
    }
}
