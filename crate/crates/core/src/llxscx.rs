//! LLX/SCX: multi-record load-link / store-conditional.
//!
//! Three flavours live here:
//!
//! * the lock-free original (`llx_o`, `scx_o`, `help`), which freezes records
//!   by installing a pointer to an [`ScxRecord`] in their `info` word;
//! * the transactional flavour (`llx_htm`, `scx_htm`), which writes a fresh
//!   [`TaggedSeq`] into `info` instead of creating a descriptor;
//! * [`Process::scx_dispatch`], which runs the transactional SCX until the
//!   process runs out of attempts and then falls back to `scx_o`.
//!
//! Descriptors are reference counted by the number of `info` words holding
//! them (plus one for their creator while it runs) and handed to epoch
//! reclamation when the count drops to zero.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering::SeqCst};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reclaim::{EpochHandle, Reclaim, Retired};
use crate::txn::{AbortReason, SharedWord, TxResult, TxnContext};

/// Explicit abort: a record changed since its linked LLX.
pub const FAILED_VALIDATION: u8 = 1;
/// Explicit abort: the fallback gate (or the elision lock) is taken.
pub const GATE_CLOSED: u8 = 2;
/// Explicit abort: a node found by a search outside the transaction is gone.
pub const NODE_MARKED: u8 = 3;

/// Process ids fit in 15 bits of a [`TaggedSeq`].
pub const MAX_PROCESSES: usize = 1 << 15;

const SEQ_SHIFT: u32 = 16;

static NEXT_RECORD_ID: AtomicU64 = AtomicU64::new(1);
static LIVE_DESCRIPTORS: AtomicUsize = AtomicUsize::new(0);

const CANARY_LIVE: u64 = 0x5eed_cafe_f00d_0001;
const CANARY_DEAD: u64 = 0xdead_dead_dead_dead;

/// Descriptors currently allocated, process-wide. Used by leak tests.
pub fn live_descriptors() -> usize {
    LIVE_DESCRIPTORS.load(SeqCst)
}

/// Per-process sequence number stored in `info` by transactional SCX.
///
/// Layout: bit 0 is the tag (always 1), bits 1..16 the process id, bits
/// 16..64 the sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaggedSeq(u64);

impl TaggedSeq {
    pub fn initial(pid: usize) -> Self {
        assert!(pid < MAX_PROCESSES, "process id {pid} out of range");
        TaggedSeq(((pid as u64) << 1) | 1)
    }

    pub fn from_raw(raw: u64) -> Option<Self> {
        is_tagged(raw).then_some(TaggedSeq(raw))
    }

    #[must_use]
    pub fn next(self) -> Self {
        TaggedSeq(self.0 + (1 << SEQ_SHIFT))
    }

    pub fn pid(self) -> usize {
        ((self.0 >> 1) & 0x7fff) as usize
    }

    pub fn seq(self) -> u64 {
        self.0 >> SEQ_SHIFT
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

pub fn is_tagged(info: u64) -> bool {
    info & 1 == 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ScxState {
    InProgress = 0,
    Committed = 1,
    Aborted = 2,
}

impl ScxState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => ScxState::InProgress,
            1 => ScxState::Committed,
            _ => ScxState::Aborted,
        }
    }
}

/// Decoded content of an `info` word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfoValue {
    Descriptor(*const ScxRecord),
    Tagged(TaggedSeq),
}

impl InfoValue {
    pub fn decode(raw: u64) -> Self {
        match TaggedSeq::from_raw(raw) {
            Some(t) => InfoValue::Tagged(t),
            None => InfoValue::Descriptor(raw as *const ScxRecord),
        }
    }
}

/// Descriptor of one SCX_O invocation.
pub struct ScxRecord {
    v: Vec<*const RecordHeader>,
    r: Vec<*const RecordHeader>,
    fld: *const SharedWord,
    fld_owner: *const RecordHeader,
    new: u64,
    old: u64,
    /// `(info, version of the info word)` seen by each linked LLX.
    info_fields: Vec<(u64, u64)>,
    state: AtomicU8,
    all_frozen: AtomicBool,
    refs: AtomicUsize,
    retired: AtomicBool,
}

// Descriptors are shared through `info` words; the raw pointers they hold are
// protected by epoch reclamation.
unsafe impl Send for ScxRecord {}
unsafe impl Sync for ScxRecord {}

/// Initial `info` of every record: a permanently aborted descriptor.
static DUMMY: ScxRecord = ScxRecord {
    v: Vec::new(),
    r: Vec::new(),
    fld: std::ptr::null(),
    fld_owner: std::ptr::null(),
    new: 0,
    old: 0,
    info_fields: Vec::new(),
    state: AtomicU8::new(ScxState::Aborted as u8),
    all_frozen: AtomicBool::new(false),
    refs: AtomicUsize::new(1),
    retired: AtomicBool::new(false),
};

fn dummy_info() -> u64 {
    &DUMMY as *const ScxRecord as u64
}

impl ScxRecord {
    pub fn state(&self) -> ScxState {
        ScxState::from_u8(self.state.load(SeqCst))
    }

    pub fn all_frozen(&self) -> bool {
        self.all_frozen.load(SeqCst)
    }

    fn addr(&self) -> u64 {
        self as *const ScxRecord as u64
    }

    fn is_dummy(&self) -> bool {
        std::ptr::eq(self, &DUMMY)
    }

    /// Takes a reference unless the descriptor is already dead.
    fn try_acquire(&self) -> bool {
        if self.is_dummy() {
            return true;
        }
        let mut c = self.refs.load(SeqCst);
        loop {
            if c == 0 {
                return false;
            }
            match self.refs.compare_exchange(c, c + 1, SeqCst, SeqCst) {
                Ok(_) => return true,
                Err(now) => c = now,
            }
        }
    }

    fn release(&self, sink: &mut Vec<Retired>) {
        if self.is_dummy() {
            return;
        }
        if self.refs.fetch_sub(1, SeqCst) == 1 {
            sink.push(unsafe { Retired::new(self as *const ScxRecord) });
        }
    }
}

impl Reclaim for ScxRecord {
    fn retired_flag(&self) -> &AtomicBool {
        &self.retired
    }

    unsafe fn free(ptr: *mut Self, _: &mut Vec<Retired>) {
        LIVE_DESCRIPTORS.fetch_sub(1, SeqCst);
        drop(Box::from_raw(ptr));
    }
}

/// Dereferences an untagged info value.
///
/// # Safety
/// The caller is inside a reclamation guard and read `info` from a record
/// it reached inside that guard.
unsafe fn descriptor<'a>(info: u64) -> &'a ScxRecord {
    debug_assert!(!is_tagged(info));
    &*(info as *const ScxRecord)
}

/// Drops the reference an `info` word held on its descriptor, if any.
pub fn release_info(info: u64, sink: &mut Vec<Retired>) {
    if !is_tagged(info) {
        // SAFETY: the info word held a reference until now.
        unsafe { descriptor(info) }.release(sink);
    }
}

/// Ordering key for per-record info history entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum InfoEvent {
    /// `info` took this value.
    Info(u64),
    /// A mutable slot changed.
    Slot,
}

const HISTORY_CAP: usize = 64;

#[cfg(debug_assertions)]
static HISTORY_ON: AtomicBool = AtomicBool::new(false);

/// Turns per-record info history logging on or off (debug builds only).
pub fn set_info_history(on: bool) {
    #[cfg(debug_assertions)]
    HISTORY_ON.store(on, SeqCst);
    #[cfg(not(debug_assertions))]
    let _ = on;
}

fn history_on() -> bool {
    #[cfg(debug_assertions)]
    return HISTORY_ON.load(SeqCst);
    #[cfg(not(debug_assertions))]
    false
}

/// Bounded log of `(version, event)` pairs for one record.
#[derive(Debug, Default, Clone)]
pub struct InfoHistory {
    pub events: VecDeque<(u64, InfoEvent)>,
    /// Events ever logged; more than the ring holds means entries were lost.
    pub total: usize,
}

/// Fields every data record carries.
pub struct RecordHeader {
    pub info: SharedWord,
    pub marked: SharedWord,
    id: u64,
    retired: AtomicBool,
    canary: AtomicU64,
    #[cfg(debug_assertions)]
    history: std::sync::OnceLock<parking_lot::Mutex<InfoHistory>>,
}

impl Default for RecordHeader {
    fn default() -> Self {
        Self::new()
    }
}

impl RecordHeader {
    pub fn new() -> Self {
        RecordHeader {
            info: SharedWord::new(dummy_info()),
            marked: SharedWord::new(0),
            id: NEXT_RECORD_ID.fetch_add(1, SeqCst),
            retired: AtomicBool::new(false),
            canary: AtomicU64::new(CANARY_LIVE),
            #[cfg(debug_assertions)]
            history: std::sync::OnceLock::new(),
        }
    }

    /// Allocation-order identity; SCX freezes records in increasing id order.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn retired_flag(&self) -> &AtomicBool {
        &self.retired
    }

    pub fn is_live(&self) -> bool {
        self.canary.load(SeqCst) == CANARY_LIVE
    }

    /// Panics if the record was freed under poisoning.
    #[inline]
    pub fn assert_live(&self) {
        assert!(self.is_live(), "access to a reclaimed record");
    }

    pub fn poison(&self) {
        self.canary.store(CANARY_DEAD, SeqCst);
    }

    /// The initial `info` value shared by every new record.
    pub fn initial_info() -> u64 {
        dummy_info()
    }

    fn log(&self, version: u64, event: InfoEvent) {
        #[cfg(debug_assertions)]
        if history_on() {
            let mut h = self
                .history
                .get_or_init(Default::default)
                .lock();
            if h.events.len() == HISTORY_CAP {
                h.events.pop_front();
            }
            h.events.push_back((version, event));
            h.total += 1;
        }
        #[cfg(not(debug_assertions))]
        let _ = (version, event, history_on(), HISTORY_CAP);
    }

    /// Snapshot of this record's info history, if logging was on.
    pub fn info_history(&self) -> Option<InfoHistory> {
        #[cfg(debug_assertions)]
        return self.history.get().map(|h| h.lock().clone());
        #[cfg(not(debug_assertions))]
        None
    }
}

/// Checks the info-freshness property on one record's history: every value
/// `info` takes was never held before, and any two slot changes are
/// separated by at least one `info` change.
pub fn check_info_freshness(history: &InfoHistory) -> Result<(), String> {
    if history.total > history.events.len() {
        return Err(format!("history overflowed ({} events)", history.total));
    }
    let mut events: Vec<(u64, InfoEvent)> = history.events.iter().copied().collect();
    events.sort();
    let mut held = std::collections::HashSet::new();
    held.insert(dummy_info());
    let mut changed_since_slot = true;
    for (version, e) in events {
        match e {
            InfoEvent::Info(v) => {
                if !held.insert(v) {
                    return Err(format!("info value {v:#x} repeated at version {version}"));
                }
                changed_since_slot = true;
            }
            InfoEvent::Slot => {
                if !changed_since_slot {
                    return Err(format!("two slot changes without an info change (version {version})"));
                }
                changed_since_slot = false;
            }
        }
    }
    Ok(())
}

/// A data record: a header plus mutable child-link slots.
pub trait Record: Reclaim + Send + Sync {
    fn header(&self) -> &RecordHeader;
    /// The mutable slots covered by LLX snapshots.
    fn slots(&self) -> &[SharedWord];
}

/// Outcome of an LLX.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LlxResult {
    Snapshot(Vec<u64>),
    Fail,
    Finalized,
}

impl LlxResult {
    pub fn snapshot(self) -> Option<Vec<u64>> {
        match self {
            LlxResult::Snapshot(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug)]
struct Link {
    info: u64,
    /// Version of the info word when read, 0 if unknown.
    version: u64,
    snapshot: Vec<u64>,
}

/// The per-process table of linked LLX results.
#[derive(Debug, Default)]
pub struct LlxTable {
    links: HashMap<usize, Link>,
}

impl LlxTable {
    fn store(&mut self, record: &RecordHeader, info: u64, version: u64, snapshot: Vec<u64>) {
        self.links.insert(
            record as *const RecordHeader as usize,
            Link {
                info,
                version,
                snapshot,
            },
        );
    }

    fn get(&self, record: &RecordHeader) -> Option<&Link> {
        self.links.get(&(record as *const RecordHeader as usize))
    }

    /// The `info` value seen by the last linked LLX of `record`.
    pub fn info_of(&self, record: &RecordHeader) -> Option<u64> {
        self.get(record).map(|l| l.info)
    }

    pub fn clear(&mut self) {
        self.links.clear();
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

/// Effects of a transactional attempt that only apply if it commits.
struct DeferredRetire {
    ptr: *const u8,
    make: unsafe fn(*const u8) -> Retired,
}

impl DeferredRetire {
    fn of<N: Record>(node: &N) -> Self {
        unsafe fn make<N: Record>(p: *const u8) -> Retired {
            unsafe { Retired::new(p as *const N) }
        }
        DeferredRetire {
            ptr: node as *const N as *const u8,
            make: make::<N>,
        }
    }
}

#[derive(Default)]
struct Pending {
    released_infos: Vec<u64>,
    retire: Vec<DeferredRetire>,
    history: Vec<(*const RecordHeader, InfoEvent)>,
    fresh: Vec<Retired>,
}

/// How far [`Process::help_partial`] runs a descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HelpLimit {
    Complete,
    /// Stop after this many freezing steps.
    FreezeOnly(usize),
}

/// Per-process LLX/SCX state: linked LLX table, attempt budget counter,
/// tagged sequence number and the reclamation handle.
pub struct Process {
    pid: usize,
    table: LlxTable,
    attempts: u32,
    tagseq: TaggedSeq,
    pending: Pending,
    epoch: EpochHandle,
    chaos: f64,
    rng: ChaCha8Rng,
    txn_attempts: u64,
}

// Pending effects hold raw record pointers; they never leave the thread that
// produced them while an attempt is live.
unsafe impl Send for Process {}

impl Process {
    /// `last_tagseq` lets a process id be reused without repeating values.
    pub fn new(pid: usize, epoch: EpochHandle, last_tagseq: Option<TaggedSeq>) -> Self {
        Process {
            pid,
            table: LlxTable::default(),
            attempts: 0,
            tagseq: last_tagseq.unwrap_or_else(|| TaggedSeq::initial(pid)),
            pending: Pending::default(),
            epoch,
            chaos: 0.0,
            rng: ChaCha8Rng::seed_from_u64(pid as u64),
            txn_attempts: 0,
        }
    }

    pub fn pid(&self) -> usize {
        self.pid
    }

    pub fn tagseq(&self) -> TaggedSeq {
        self.tagseq
    }

    pub fn attempts(&self) -> u32 {
        self.attempts
    }

    /// Transactions started by [`Process::scx_dispatch`].
    pub fn dispatch_txn_attempts(&self) -> u64 {
        self.txn_attempts
    }

    pub fn table(&self) -> &LlxTable {
        &self.table
    }

    pub fn epoch(&mut self) -> &mut EpochHandle {
        &mut self.epoch
    }

    /// Makes the process yield its time slice at scheduling points with the
    /// given probability, to shake out interleavings in tests.
    pub fn set_chaos(&mut self, prob: f64, seed: u64) {
        self.chaos = prob;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    #[inline]
    pub fn yield_point(&mut self) {
        if self.chaos > 0.0 && self.rng.gen_bool(self.chaos) {
            std::thread::yield_now();
        }
    }

    pub fn begin_op(&mut self) {
        self.epoch.enter().expect("operation already in progress");
        self.table.clear();
    }

    pub fn end_op(&mut self) {
        self.table.clear();
        self.epoch.exit().expect("no operation in progress");
    }

    /// Registers a node allocated by the current attempt so it is freed if
    /// the attempt does not publish it.
    pub fn track_fresh(&mut self, fresh: Retired) {
        self.pending.fresh.push(fresh);
    }

    /// Queues a record for retirement when the current attempt succeeds.
    pub fn retire_on_success<N: Record>(&mut self, node: &N) {
        self.pending.retire.push(DeferredRetire::of(node));
    }

    /// Ends an attempt. On success pending retirements, descriptor releases
    /// and history entries take effect; otherwise fresh nodes are discarded.
    pub fn finish_attempt(&mut self, success: bool, version: u64) {
        let pending = std::mem::take(&mut self.pending);
        if success {
            let mut dead = Vec::new();
            for info in pending.released_infos {
                release_info(info, &mut dead);
            }
            for r in dead {
                self.epoch.retire(r);
            }
            for r in pending.retire {
                // SAFETY: the committed attempt unlinked the record.
                self.epoch.retire(unsafe { (r.make)(r.ptr) });
            }
            for (h, e) in pending.history {
                // SAFETY: the record was reachable inside this guard.
                unsafe { (*h).log(version, e) };
            }
        } else {
            for f in pending.fresh {
                f.discard();
            }
        }
        self.pending = Pending::default();
    }

    /// True if `record` is unmarked and its info still holds the value seen
    /// by this process's last linked LLX of it.
    pub fn still_linked(&self, record: &RecordHeader) -> bool {
        record.marked.load() == 0 && self.table.info_of(record) == Some(record.info.load())
    }

    // ---------------------------------------------------------------- LLX

    /// LLX of the original algorithm. Must not see tagged `info` values.
    pub fn llx_o<N: Record>(&mut self, r: &N) -> LlxResult {
        let h = r.header();
        h.assert_live();
        let marked1 = h.marked.load() != 0;
        let (rinfo, rver) = h.info.load_versioned();
        debug_assert!(!is_tagged(rinfo), "llx_o met a tagged info value");
        // SAFETY: guard held, `r` reached inside it.
        let d = unsafe { descriptor(rinfo) };
        let state = d.state();
        let marked2 = h.marked.load() != 0;
        self.yield_point();
        if state == ScxState::Aborted || (state == ScxState::Committed && !marked2) {
            let snap: Vec<u64> = r.slots().iter().map(SharedWord::load).collect();
            if h.info.load_versioned() == (rinfo, rver) {
                self.table.store(h, rinfo, rver, snap.clone());
                return LlxResult::Snapshot(snap);
            }
        }
        // Re-reads the state of the descriptor seen above, not of the current one.
        let state = d.state();
        if (state == ScxState::Committed || (state == ScxState::InProgress && self.help(d)))
            && marked1
        {
            return LlxResult::Finalized;
        }
        let cur = h.info.load();
        // SAFETY: as above.
        let d = unsafe { descriptor(cur) };
        if d.state() == ScxState::InProgress {
            self.help(d);
        }
        LlxResult::Fail
    }

    /// Tag-aware LLX, run outside any transaction. Helps in-progress
    /// descriptors like `llx_o`; tagged values count as committed.
    pub fn llx_htm<N: Record>(&mut self, r: &N) -> LlxResult {
        let h = r.header();
        h.assert_live();
        let marked1 = h.marked.load() != 0;
        let (rinfo, rver) = h.info.load_versioned();
        let state = info_state(rinfo);
        let marked2 = h.marked.load() != 0;
        self.yield_point();
        if state == ScxState::Aborted || (state == ScxState::Committed && !marked2) {
            let snap: Vec<u64> = r.slots().iter().map(SharedWord::load).collect();
            if h.info.load_versioned() == (rinfo, rver) {
                self.table.store(h, rinfo, rver, snap.clone());
                return LlxResult::Snapshot(snap);
            }
        }
        let state2 = info_state(rinfo);
        if (state2 == ScxState::Committed
            || (state2 == ScxState::InProgress
                // SAFETY: untagged, guard held.
                && self.help(unsafe { descriptor(rinfo) })))
            && marked1
        {
            return LlxResult::Finalized;
        }
        let rinfo2 = h.info.load();
        if info_state(rinfo2) == ScxState::InProgress {
            // SAFETY: as above.
            self.help(unsafe { descriptor(rinfo2) });
        }
        LlxResult::Fail
    }

    /// Tag-aware LLX inside a transaction. Helping from inside a
    /// transaction would only make it conflict with the SCX it helps, so an
    /// in-progress descriptor yields `Fail` without helping.
    pub fn llx_htm_txn<N: Record>(&mut self, ctx: &mut TxnContext, r: &N) -> TxResult<LlxResult> {
        let h = r.header();
        h.assert_live();
        let marked1 = ctx.read(&h.marked)? != 0;
        let rinfo = ctx.read(&h.info)?;
        let state = info_state(rinfo);
        let marked2 = ctx.read(&h.marked)? != 0;
        if state == ScxState::Aborted || (state == ScxState::Committed && !marked2) {
            let mut snap = Vec::with_capacity(r.slots().len());
            for s in r.slots() {
                snap.push(ctx.read(s)?);
            }
            if ctx.read(&h.info)? == rinfo {
                self.table.store(h, rinfo, 0, snap.clone());
                return Ok(LlxResult::Snapshot(snap));
            }
        }
        if info_state(rinfo) == ScxState::Committed && marked1 {
            return Ok(LlxResult::Finalized);
        }
        Ok(LlxResult::Fail)
    }

    // ---------------------------------------------------------------- SCX

    fn build<N: Record>(&self, v: &[&N], r: &[&N], fld: (&N, usize), new: u64) -> ScxRecord {
        let mut linked: Vec<(u64, *const RecordHeader, (u64, u64))> = v
            .iter()
            .map(|n| {
                let h = n.header();
                let link = self
                    .table
                    .get(h)
                    .expect("SCX on a record without a linked LLX");
                let mut version = link.version;
                if version == 0 {
                    // Linked inside a transaction: take the current version
                    // if the value still matches, else make freezing fail.
                    let (now, ver) = h.info.load_versioned();
                    version = if now == link.info { ver } else { u64::MAX };
                }
                (h.id(), h as *const RecordHeader, (link.info, version))
            })
            .collect();
        linked.sort_by_key(|l| l.0);
        debug_assert!(r
            .iter()
            .all(|x| v.iter().any(|y| std::ptr::eq(x.header(), y.header()))));
        let (owner, slot) = fld;
        let old = self
            .table
            .get(owner.header())
            .expect("fld owner not linked")
            .snapshot[slot];
        ScxRecord {
            v: linked.iter().map(|l| l.1).collect(),
            r: r.iter().map(|n| n.header() as *const RecordHeader).collect(),
            fld: &owner.slots()[slot] as *const SharedWord,
            fld_owner: owner.header() as *const RecordHeader,
            new,
            old,
            info_fields: linked.iter().map(|l| l.2).collect(),
            state: AtomicU8::new(ScxState::InProgress as u8),
            all_frozen: AtomicBool::new(false),
            refs: AtomicUsize::new(1),
            retired: AtomicBool::new(false),
        }
    }

    /// SCX of the original algorithm.
    pub fn scx_o<N: Record>(&mut self, v: &[&N], r: &[&N], fld: (&N, usize), new: u64) -> bool {
        let d = self.publish(self.build(v, r, fld, new));
        let ok = self.help(d);
        self.drop_creator_ref(d);
        if ok {
            for n in r {
                self.epoch.retire(unsafe { Retired::new(*n as *const N) });
            }
        }
        ok
    }

    fn publish(&self, d: ScxRecord) -> &'static ScxRecord {
        LIVE_DESCRIPTORS.fetch_add(1, SeqCst);
        // SAFETY: leaked until its reference count drops to zero.
        unsafe { &*Box::into_raw(Box::new(d)) }
    }

    fn drop_creator_ref(&mut self, d: &ScxRecord) {
        let mut dead = Vec::new();
        d.release(&mut dead);
        for x in dead {
            self.epoch.retire(x);
        }
    }

    /// Starts an SCX_O but stops part way, as if the process halted.
    /// Returns the published descriptor; the creator reference is kept.
    #[doc(hidden)]
    pub fn scx_o_partial<N: Record>(
        &mut self,
        v: &[&N],
        r: &[&N],
        fld: (&N, usize),
        new: u64,
        limit: HelpLimit,
    ) -> &'static ScxRecord {
        let d = self.publish(self.build(v, r, fld, new));
        self.help_partial(d, limit);
        d
    }

    /// Runs `d` to completion (or abort) on behalf of its creator.
    pub fn help(&mut self, d: &ScxRecord) -> bool {
        self.help_partial(d, HelpLimit::Complete)
            .expect("complete help always finishes")
    }

    /// `None` when stopped early by `limit`.
    #[doc(hidden)]
    pub fn help_partial(&mut self, d: &ScxRecord, limit: HelpLimit) -> Option<bool> {
        let me = d.addr();
        for (i, &rec) in d.v.iter().enumerate() {
            if limit == HelpLimit::FreezeOnly(i) {
                return None;
            }
            // SAFETY: records in V stay allocated while the descriptor is in
            // progress and we hold a guard.
            let h = unsafe { &*rec };
            let (expected, version) = d.info_fields[i];
            let mut frozen = false;
            if d.try_acquire() {
                match h.info.compare_exchange_at(expected, version, me) {
                    Ok(version) => {
                        let mut dead = Vec::new();
                        release_info(expected, &mut dead);
                        for x in dead {
                            self.epoch.retire(x);
                        }
                        h.log(version, InfoEvent::Info(me));
                        frozen = true;
                    }
                    Err(_) => self.drop_creator_ref(d),
                }
            }
            if !frozen && h.info.load() != me {
                if d.all_frozen() {
                    return Some(true);
                }
                d.state.store(ScxState::Aborted as u8, SeqCst);
                return Some(false);
            }
            self.yield_point();
        }
        if limit == HelpLimit::FreezeOnly(d.v.len()) {
            return None;
        }
        d.all_frozen.store(true, SeqCst);
        for &rec in &d.r {
            // SAFETY: as above.
            unsafe { (*rec).marked.store(1) };
        }
        self.yield_point();
        // SAFETY: `fld` belongs to a record in V.
        if let Ok(version) = unsafe { (*d.fld).compare_exchange(d.old, d.new) } {
            // SAFETY: as above.
            unsafe { (*d.fld_owner).log(version, InfoEvent::Slot) };
        }
        d.state.store(ScxState::Committed as u8, SeqCst);
        Some(true)
    }

    /// Transactional SCX: validates every record of `v` against its linked
    /// LLX, then stamps them with a fresh tagged sequence number, marks `r`
    /// and writes `new` into the field. Effects beyond the transaction
    /// (retiring `r`, releasing replaced descriptors) wait for
    /// [`Process::finish_attempt`].
    pub fn scx_htm<N: Record>(
        &mut self,
        ctx: &mut TxnContext,
        v: &[&N],
        r: &[&N],
        fld: (&N, usize),
        new: u64,
    ) -> TxResult<bool> {
        self.tagseq = self.tagseq.next();
        let tag = self.tagseq.raw();
        let mut seen = Vec::with_capacity(v.len());
        for n in v {
            let h = n.header();
            let linked = self
                .table
                .info_of(h)
                .expect("SCX on a record without a linked LLX");
            if ctx.read(&h.info)? != linked {
                return ctx.abort(FAILED_VALIDATION);
            }
            seen.push(linked);
        }
        for n in v {
            ctx.write(&n.header().info, tag)?;
        }
        for n in r {
            ctx.write(&n.header().marked, 1)?;
        }
        let (owner, slot) = fld;
        ctx.write(&owner.slots()[slot], new)?;

        self.pending.released_infos.extend(seen);
        for n in r {
            self.pending.retire.push(DeferredRetire::of(*n));
        }
        for n in v {
            self.pending
                .history
                .push((n.header() as *const RecordHeader, InfoEvent::Info(tag)));
        }
        self.pending
            .history
            .push((owner.header() as *const RecordHeader, InfoEvent::Slot));
        Ok(true)
    }

    /// SCX that tries the transactional version while the process has
    /// attempts left and falls back to `scx_o` afterwards. The attempt
    /// counter resets whenever an SCX succeeds.
    pub fn scx_dispatch<N: Record>(
        &mut self,
        ctx: &mut TxnContext,
        v: &[&N],
        r: &[&N],
        fld: (&N, usize),
        new: u64,
        budget: u32,
    ) -> bool {
        loop {
            let ok = if self.attempts < budget {
                self.attempts += 1;
                self.txn_attempts += 1;
                let result = ctx.execute(|c| self.scx_htm(c, v, r, fld, new));
                self.finish_attempt(result.is_ok(), ctx.last_commit_version());
                match result {
                    Ok(ok) => ok,
                    Err(AbortReason::Explicit(_)) => return false,
                    Err(_) => continue,
                }
            } else {
                self.scx_o(v, r, fld, new)
            };
            if ok {
                self.attempts = 0;
            }
            return ok;
        }
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        let pending = std::mem::take(&mut self.pending);
        for f in pending.fresh {
            f.discard();
        }
        drop(pending.retire);
    }
}

fn info_state(info: u64) -> ScxState {
    if is_tagged(info) {
        ScxState::Committed
    } else {
        // SAFETY: callers hold a guard and read `info` from a reachable record.
        unsafe { descriptor(info) }.state()
    }
}
