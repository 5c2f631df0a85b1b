//! Epoch-based deferred reclamation.
//!
//! Threads announce the global epoch when they enter an operation and clear
//! the announcement when they leave. A retired record goes into one of three
//! limbo bags, stamped with the global epoch at retirement time, and is
//! freed once the global epoch is two ahead of that stamp. The epoch advances
//! only when every active thread has announced the current one.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::Arc;

use crossbeam_utils::CachePadded;
use parking_lot::Mutex;
use thiserror::Error;

/// Maximum number of simultaneously registered threads per domain.
pub const MAX_THREADS: usize = 256;

/// A thread attempts to advance the epoch once per this many operations.
pub const ADVANCE_INTERVAL: u64 = 64;

const ACTIVE: u64 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReclaimError {
    #[error("guard entered twice without an exit")]
    NestedEnter,
    #[error("guard exited without a matching enter")]
    UnbalancedExit,
    #[error("all {MAX_THREADS} thread slots are taken")]
    NoFreeSlot,
}

/// Implemented by everything that can be handed to [`EpochHandle::retire`].
pub trait Reclaim: Sized {
    fn retired_flag(&self) -> &AtomicBool;

    /// Releases the record. Records whose destruction drops the last
    /// reference to some other record push that record onto `cascade`.
    ///
    /// # Safety
    /// `ptr` came from `Box::into_raw` and nobody can reach it anymore.
    unsafe fn free(ptr: *mut Self, cascade: &mut Vec<Retired>);

    /// Overwrites the record with recognizable garbage without releasing it.
    fn poison(&self) {}
}

/// A type-erased retired record.
pub struct Retired {
    ptr: *mut u8,
    free: unsafe fn(*mut u8, &mut Vec<Retired>),
    poison: unsafe fn(*mut u8),
}

// Retired records are unreachable; whoever owns the entry owns the record.
unsafe impl Send for Retired {}

impl Retired {
    /// # Safety
    /// `ptr` must point to a live record that is no longer reachable.
    pub unsafe fn new<T: Reclaim>(ptr: *const T) -> Self {
        unsafe fn free<T: Reclaim>(p: *mut u8, cascade: &mut Vec<Retired>) {
            T::free(p as *mut T, cascade)
        }
        unsafe fn poison<T: Reclaim>(p: *mut u8) {
            (*(p as *const T)).poison()
        }
        // SAFETY: callers only retire live records.
        let prev = unsafe { (*ptr).retired_flag().swap(true, SeqCst) };
        assert!(!prev, "record retired twice");
        Retired {
            ptr: ptr as *mut u8,
            free: free::<T>,
            poison: poison::<T>,
        }
    }

    /// Wraps a record that was never published, for immediate disposal
    /// with [`Retired::discard`]. The retired flag is left alone.
    pub fn unpublished<T: Reclaim>(ptr: *const T) -> Self {
        unsafe fn free<T: Reclaim>(p: *mut u8, cascade: &mut Vec<Retired>) {
            T::free(p as *mut T, cascade)
        }
        unsafe fn poison<T: Reclaim>(p: *mut u8) {
            (*(p as *const T)).poison()
        }
        Retired {
            ptr: ptr as *mut u8,
            free: free::<T>,
            poison: poison::<T>,
        }
    }

    /// Frees a record no other thread ever saw.
    pub fn discard(self) {
        let mut cascade = Vec::new();
        // SAFETY: only used for unpublished records.
        unsafe { (self.free)(self.ptr, &mut cascade) };
        debug_assert!(cascade.is_empty());
    }

    pub fn addr(&self) -> usize {
        self.ptr as usize
    }
}

struct Slot {
    in_use: AtomicBool,
    announce: AtomicU64,
}

/// Shared reclamation state for one data structure.
pub struct EpochDomain {
    epoch: AtomicU64,
    slots: Box<[CachePadded<Slot>]>,
    orphans: Mutex<Vec<Retired>>,
    quarantine: Mutex<Vec<Retired>>,
    poison: bool,
    retired: AtomicUsize,
    freed: AtomicUsize,
}

impl EpochDomain {
    /// With `poison` set, freed records are poisoned and parked instead of
    /// released, so stale accesses are detectable and addresses are never
    /// reused while the domain lives.
    pub fn new(poison: bool) -> Arc<Self> {
        let slots = (0..MAX_THREADS)
            .map(|_| {
                CachePadded::new(Slot {
                    in_use: AtomicBool::new(false),
                    announce: AtomicU64::new(0),
                })
            })
            .collect();
        Arc::new(EpochDomain {
            epoch: AtomicU64::new(0),
            slots,
            orphans: Mutex::new(Vec::new()),
            quarantine: Mutex::new(Vec::new()),
            poison,
            retired: AtomicUsize::new(0),
            freed: AtomicUsize::new(0),
        })
    }

    pub fn register(self: &Arc<Self>) -> Result<EpochHandle, ReclaimError> {
        for (i, slot) in self.slots.iter().enumerate() {
            if !slot.in_use.load(SeqCst)
                && slot
                    .in_use
                    .compare_exchange(false, true, SeqCst, SeqCst)
                    .is_ok()
            {
                slot.announce.store(self.epoch.load(SeqCst) << 1, SeqCst);
                return Ok(EpochHandle {
                    domain: self.clone(),
                    slot: i,
                    bags: Default::default(),
                    active: false,
                    ops: 0,
                });
            }
        }
        Err(ReclaimError::NoFreeSlot)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(SeqCst)
    }

    pub fn poisoning(&self) -> bool {
        self.poison
    }

    /// Records retired so far.
    pub fn retired_count(&self) -> usize {
        self.retired.load(SeqCst)
    }

    /// Records freed (or poisoned) so far.
    pub fn freed_count(&self) -> usize {
        self.freed.load(SeqCst)
    }

    /// Retired but not yet freed.
    pub fn limbo_count(&self) -> usize {
        self.retired_count() - self.freed_count()
    }

    /// Advances the epoch if every active thread announced the current one.
    pub fn try_advance(&self) -> bool {
        let e = self.epoch.load(SeqCst);
        for slot in self.slots.iter() {
            if !slot.in_use.load(SeqCst) {
                continue;
            }
            let a = slot.announce.load(SeqCst);
            if a & ACTIVE != 0 && a >> 1 != e {
                return false;
            }
        }
        self.epoch.compare_exchange(e, e + 1, SeqCst, SeqCst).is_ok()
    }

    fn release(&self, batch: Vec<Retired>, cascade: &mut Vec<Retired>) {
        let n = batch.len();
        if self.poison {
            for r in &batch {
                // SAFETY: the record is unreachable and still allocated.
                unsafe { (r.poison)(r.ptr) };
            }
            self.quarantine.lock().extend(batch);
        } else {
            for r in batch {
                // SAFETY: the record is unreachable; it is freed exactly once.
                unsafe { (r.free)(r.ptr, cascade) };
            }
        }
        self.freed.fetch_add(n, SeqCst);
    }

    /// Takes ownership of records that must be freed when the domain goes
    /// away (used by data structures tearing themselves down).
    pub fn adopt(&self, records: Vec<Retired>) {
        self.retired.fetch_add(records.len(), SeqCst);
        self.orphans.lock().extend(records);
    }
}

impl Drop for EpochDomain {
    fn drop(&mut self) {
        let mut pending: Vec<Retired> = std::mem::take(&mut *self.orphans.lock());
        pending.extend(std::mem::take(&mut *self.quarantine.lock()));
        while let Some(r) = pending.pop() {
            let mut cascade = Vec::new();
            // SAFETY: no thread is registered anymore, nothing is reachable.
            unsafe { (r.free)(r.ptr, &mut cascade) };
            pending.extend(cascade);
        }
    }
}

#[derive(Default)]
struct Bag {
    stamp: u64,
    items: Vec<Retired>,
}

/// One thread's registration in an [`EpochDomain`].
pub struct EpochHandle {
    domain: Arc<EpochDomain>,
    slot: usize,
    bags: [Bag; 3],
    active: bool,
    ops: u64,
}

impl EpochHandle {
    pub fn domain(&self) -> &Arc<EpochDomain> {
        &self.domain
    }

    /// Dense slot index of this thread, `0..MAX_THREADS`.
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn enter(&mut self) -> Result<(), ReclaimError> {
        if self.active {
            return Err(ReclaimError::NestedEnter);
        }
        self.ops += 1;
        if self.ops % ADVANCE_INTERVAL == 0 {
            self.domain.try_advance();
        }
        let e = self.domain.epoch.load(SeqCst);
        self.domain.slots[self.slot]
            .announce
            .store((e << 1) | ACTIVE, SeqCst);
        self.active = true;
        Ok(())
    }

    pub fn exit(&mut self) -> Result<(), ReclaimError> {
        if !self.active {
            return Err(ReclaimError::UnbalancedExit);
        }
        let e = self.domain.epoch.load(SeqCst);
        self.domain.slots[self.slot].announce.store(e << 1, SeqCst);
        self.active = false;
        self.collect();
        Ok(())
    }

    /// Attempts an epoch advance and frees whatever became safe.
    pub fn try_advance(&mut self) -> bool {
        let advanced = self.domain.try_advance();
        self.collect();
        advanced
    }

    /// Hands an unreachable record over for deferred release.
    pub fn retire(&mut self, record: Retired) {
        self.domain.retired.fetch_add(1, SeqCst);
        self.push(record);
    }

    fn push(&mut self, record: Retired) {
        let e = self.domain.epoch.load(SeqCst);
        let bag = &mut self.bags[(e % 3) as usize];
        if bag.stamp != e && !bag.items.is_empty() {
            // Same residue, older stamp: at least three epochs old.
            let old = std::mem::take(&mut bag.items);
            let mut cascade = Vec::new();
            self.domain.release(old, &mut cascade);
            for r in cascade {
                self.domain.retired.fetch_add(1, SeqCst);
                self.bags[(e % 3) as usize].items.push(r);
            }
        }
        let bag = &mut self.bags[(e % 3) as usize];
        bag.stamp = e;
        bag.items.push(record);
    }

    fn collect(&mut self) {
        let e = self.domain.epoch.load(SeqCst);
        let mut cascade = Vec::new();
        for i in 0..3 {
            let bag = &mut self.bags[i];
            if !bag.items.is_empty() && bag.stamp + 2 <= e {
                let old = std::mem::take(&mut bag.items);
                self.domain.release(old, &mut cascade);
            }
        }
        for r in cascade {
            self.retire(r);
        }
    }

    /// Records in this thread's limbo bags.
    pub fn limbo_len(&self) -> usize {
        self.bags.iter().map(|b| b.items.len()).sum()
    }
}

impl Drop for EpochHandle {
    fn drop(&mut self) {
        let slot = &self.domain.slots[self.slot];
        slot.announce.store(0, SeqCst);
        let mut left = Vec::new();
        for bag in &mut self.bags {
            left.append(&mut bag.items);
        }
        self.domain.orphans.lock().extend(left);
        slot.in_use.store(false, SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    static LIVE: AtomicUsize = AtomicUsize::new(0);

    const CANARY_LIVE: u64 = 0x11ee_11ee;
    const CANARY_DEAD: u64 = 0xdead_beef;

    struct Node {
        retired: AtomicBool,
        canary: AtomicU64,
    }

    impl Node {
        fn alloc() -> *const Node {
            LIVE.fetch_add(1, SeqCst);
            Box::into_raw(Box::new(Node {
                retired: AtomicBool::new(false),
                canary: AtomicU64::new(CANARY_LIVE),
            }))
        }
    }

    impl Reclaim for Node {
        fn retired_flag(&self) -> &AtomicBool {
            &self.retired
        }
        unsafe fn free(ptr: *mut Self, _: &mut Vec<Retired>) {
            LIVE.fetch_sub(1, SeqCst);
            drop(Box::from_raw(ptr));
        }
        fn poison(&self) {
            self.canary.store(CANARY_DEAD, SeqCst);
        }
    }

    #[test]
    fn enter_exit_leaves_inactive_and_nesting_is_rejected() {
        let d = EpochDomain::new(false);
        let mut h = d.register().unwrap();
        h.enter().unwrap();
        assert_eq!(h.enter(), Err(ReclaimError::NestedEnter));
        h.exit().unwrap();
        assert!(!h.is_active());
        assert_eq!(h.exit(), Err(ReclaimError::UnbalancedExit));
    }

    #[test]
    fn inactive_threads_do_not_block_advance() {
        let d = EpochDomain::new(false);
        let _idle = d.register().unwrap();
        let mut h = d.register().unwrap();
        h.enter().unwrap();
        assert!(d.try_advance());
        h.exit().unwrap();
        assert!(d.try_advance());
        assert_eq!(d.epoch(), 2);
    }

    #[test]
    fn lagging_active_thread_blocks_advance() {
        let d = EpochDomain::new(false);
        let mut slow = d.register().unwrap();
        slow.enter().unwrap();
        assert!(d.try_advance());
        assert!(!d.try_advance());
        slow.exit().unwrap();
        assert!(d.try_advance());
    }

    #[test]
    fn retired_records_freed_after_two_advances() {
        let d = EpochDomain::new(false);
        let mut h = d.register().unwrap();
        h.enter().unwrap();
        for _ in 0..10 {
            h.retire(unsafe { Retired::new(Node::alloc()) });
        }
        h.exit().unwrap();
        assert_eq!(d.freed_count(), 0);
        assert!(h.try_advance());
        assert_eq!(d.freed_count(), 0);
        assert!(h.try_advance());
        assert_eq!(d.freed_count(), 10);
        assert_eq!(d.limbo_count(), 0);
    }

    #[test]
    fn parked_guard_holds_back_freeing() {
        let d = EpochDomain::new(false);
        let mut parked = d.register().unwrap();
        let mut h = d.register().unwrap();
        parked.enter().unwrap();
        h.enter().unwrap();
        h.retire(unsafe { Retired::new(Node::alloc()) });
        h.exit().unwrap();
        for _ in 0..5 {
            h.try_advance();
        }
        assert_eq!(d.freed_count(), 0);
        parked.exit().unwrap();
        for _ in 0..3 {
            h.try_advance();
        }
        assert_eq!(d.freed_count(), 1);
    }

    #[test]
    #[should_panic(expected = "retired twice")]
    fn double_retire_is_caught() {
        let d = EpochDomain::new(true);
        let mut h = d.register().unwrap();
        let n = Node::alloc();
        h.retire(unsafe { Retired::new(n) });
        h.retire(unsafe { Retired::new(n) });
    }

    #[test]
    fn poison_mode_parks_records_and_domain_drop_releases_them() {
        let before = LIVE.load(SeqCst);
        let d = EpochDomain::new(true);
        let mut h = d.register().unwrap();
        let n = Node::alloc();
        h.enter().unwrap();
        h.retire(unsafe { Retired::new(n) });
        h.exit().unwrap();
        h.try_advance();
        h.try_advance();
        // SAFETY: poison mode keeps the allocation alive.
        assert_eq!(unsafe { (*n).canary.load(SeqCst) }, CANARY_DEAD);
        drop(h);
        drop(d);
        assert!(LIVE.load(SeqCst) <= before);
    }

    #[test]
    fn concurrent_readers_never_see_poison() {
        use std::sync::atomic::AtomicPtr;
        let d = EpochDomain::new(true);
        let shared = Arc::new(AtomicPtr::new(Node::alloc() as *mut Node));
        let stop = Arc::new(AtomicBool::new(false));
        let mut readers = Vec::new();
        for _ in 0..3 {
            let d = d.clone();
            let shared = shared.clone();
            let stop = stop.clone();
            readers.push(std::thread::spawn(move || {
                let mut h = d.register().unwrap();
                while !stop.load(SeqCst) {
                    h.enter().unwrap();
                    let p = shared.load(SeqCst);
                    std::thread::yield_now();
                    // SAFETY: protected by the guard.
                    assert_eq!(unsafe { (*p).canary.load(SeqCst) }, CANARY_LIVE);
                    h.exit().unwrap();
                }
            }));
        }
        let mut h = d.register().unwrap();
        for _ in 0..2000 {
            h.enter().unwrap();
            let old = shared.swap(Node::alloc() as *mut Node, SeqCst);
            h.retire(unsafe { Retired::new(old) });
            h.exit().unwrap();
            h.try_advance();
        }
        stop.store(true, SeqCst);
        for r in readers {
            r.join().unwrap();
        }
        assert!(d.freed_count() > 0);
        // Bounded garbage: limbo never holds more than a few epochs' worth.
        assert!(h.limbo_len() < 2000);
        let last = shared.load(SeqCst);
        h.retire(unsafe { Retired::new(last) });
    }
}
