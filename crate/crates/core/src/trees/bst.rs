//! Unbalanced leaf-oriented binary search tree.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::atomic::{AtomicBool, Ordering::SeqCst};

use super::{deref, handle, Access, Dictionary, Flow, Halt, Mode, Shared, TreeConfig, TreeConfigError, Worker, NIL};
use crate::llxscx::{release_info, Record, RecordHeader, NODE_MARKED};
use crate::policy::PathControl;
use crate::reclaim::{Reclaim, Retired};
use crate::txn::SharedWord;

/// Largest key a user may store is `SENTINEL_LOW - 1`.
pub const SENTINEL_LOW: u64 = u64::MAX - 1;
const SENTINEL_HIGH: u64 = u64::MAX;

pub(crate) struct BstNode {
    header: RecordHeader,
    key: u64,
    leaf: bool,
    /// Mutable in place by sequential paths (leaves only).
    value: SharedWord,
    children: [SharedWord; 2],
}

impl BstNode {
    fn leaf(key: u64, value: u64) -> Self {
        BstNode {
            header: RecordHeader::new(),
            key,
            leaf: true,
            value: SharedWord::new(value),
            children: [SharedWord::new(NIL), SharedWord::new(NIL)],
        }
    }

    fn internal(key: u64, left: u64, right: u64) -> Self {
        BstNode {
            header: RecordHeader::new(),
            key,
            leaf: false,
            value: SharedWord::new(0),
            children: [SharedWord::new(left), SharedWord::new(right)],
        }
    }

    /// Internal node over two leaves with distinct keys.
    fn join(a: &BstNode, b: &BstNode) -> Self {
        let (lo, hi) = if a.key < b.key { (a, b) } else { (b, a) };
        BstNode::internal(hi.key, handle(lo), handle(hi))
    }

    fn dir(&self, key: u64) -> usize {
        (key >= self.key) as usize
    }
}

impl Reclaim for BstNode {
    fn retired_flag(&self) -> &AtomicBool {
        self.header.retired_flag()
    }

    unsafe fn free(ptr: *mut Self, cascade: &mut Vec<Retired>) {
        release_info((*ptr).header.info.raw(), cascade);
        drop(Box::from_raw(ptr));
    }

    fn poison(&self) {
        self.header.poison();
    }
}

impl Record for BstNode {
    fn header(&self) -> &RecordHeader {
        &self.header
    }

    fn slots(&self) -> &[SharedWord] {
        if self.leaf {
            &[]
        } else {
            &self.children
        }
    }
}

struct Found<'a> {
    gp: Option<(&'a BstNode, usize)>,
    p: &'a BstNode,
    p_dir: usize,
    l: &'a BstNode,
}

/// Leaf-oriented BST. Keys must be below [`SENTINEL_LOW`].
pub struct Bst {
    shared: Shared,
    root: *const BstNode,
}

// The root pointer is owned by the tree; nodes are shared under reclamation.
unsafe impl Send for Bst {}
unsafe impl Sync for Bst {}

impl Bst {
    pub fn new(config: TreeConfig) -> Result<Self, TreeConfigError> {
        let shared = Shared::new(config)?;
        let low = Box::into_raw(Box::new(BstNode::leaf(SENTINEL_LOW, 0)));
        let high = Box::into_raw(Box::new(BstNode::leaf(SENTINEL_HIGH, 0)));
        let root = Box::into_raw(Box::new(BstNode::internal(SENTINEL_HIGH, low as u64, high as u64)));
        Ok(Bst { shared, root })
    }

    fn root(&self) -> &BstNode {
        // SAFETY: the root is never removed.
        unsafe { &*self.root }
    }

    fn search<'a>(&self, acc: &mut Access<'_>, key: u64, plain: bool) -> Flow<Found<'a>> {
        let read = |acc: &mut Access<'_>, w: &SharedWord| -> Flow<u64> {
            if plain {
                Ok(acc.plain(w))
            } else {
                acc.load(w)
            }
        };
        // SAFETY: the root outlives every operation.
        let root: &'a BstNode = unsafe { &*self.root };
        let mut gp = None;
        let mut p = root;
        let mut p_dir = 0;
        // SAFETY (all derefs below): handles read inside the operation's guard.
        let mut l: &'a BstNode = unsafe { deref(read(acc, &root.children[0])?) };
        while !l.leaf {
            gp = Some((p, p_dir));
            p = l;
            p_dir = l.dir(key);
            l = unsafe { deref(read(acc, &l.children[p_dir])?) };
        }
        Ok(Found { gp, p, p_dir, l })
    }

    /// Inside the transaction: every node found by the outside search is
    /// still in the tree and still linked the same way.
    fn verify(acc: &mut Access<'_>, f: &Found<'_>) -> Flow<()> {
        acc.require_unmarked(f.l)?;
        acc.require_unmarked(f.p)?;
        if acc.load(&f.p.children[f.p_dir])? != handle(f.l) {
            return acc.abort(NODE_MARKED);
        }
        if let Some((gp, d)) = f.gp {
            acc.require_unmarked(gp)?;
            if acc.load(&gp.children[d])? != handle(f.p) {
                return acc.abort(NODE_MARKED);
            }
        }
        Ok(())
    }

    fn check_link(snap: &[u64], dir: usize, child: &BstNode) -> Flow<()> {
        if snap[dir] == handle(child) {
            Ok(())
        } else {
            Err(Halt::Restart)
        }
    }

    fn insert_body(&self, acc: &mut Access<'_>, key: u64, value: u64) -> Flow<bool> {
        let outside = acc.outside_search();
        let f = self.search(acc, key, outside)?;
        acc.yield_point();
        if outside {
            Self::verify(acc, &f)?;
        }
        let (p, d, l) = (f.p, f.p_dir, f.l);
        if l.key == key {
            if acc.mode.in_place() {
                acc.store(&l.value, value)?;
                return Ok(false);
            }
            Self::check_link(&acc.llx(p)?, d, l)?;
            acc.llx(l)?;
            acc.yield_point();
            let new = acc.alloc(BstNode::leaf(key, value));
            acc.scx(&[p, l], &[l], (p, d), handle(new))?;
            return Ok(false);
        }
        if acc.mode.in_place() {
            let leaf = acc.alloc(BstNode::leaf(key, value));
            let internal = acc.alloc(BstNode::join(leaf, l));
            acc.store(&p.children[d], handle(internal))?;
            return Ok(true);
        }
        Self::check_link(&acc.llx(p)?, d, l)?;
        acc.llx(l)?;
        acc.yield_point();
        let leaf = acc.alloc(BstNode::leaf(key, value));
        if matches!(acc.mode, Mode::Fallback { .. }) && self.shared.broken_insert() {
            let internal = acc.alloc(BstNode::join(leaf, l));
            acc.store_unchecked((p, d), handle(internal));
            return Ok(true);
        }
        let value = acc.load(&l.value)?;
        let copy = acc.alloc(BstNode::leaf(l.key, value));
        let internal = acc.alloc(BstNode::join(leaf, copy));
        acc.scx(&[p, l], &[l], (p, d), handle(internal))?;
        Ok(true)
    }

    fn delete_body(&self, acc: &mut Access<'_>, key: u64) -> Flow<bool> {
        let outside = acc.outside_search();
        let f = self.search(acc, key, outside)?;
        acc.yield_point();
        if outside {
            Self::verify(acc, &f)?;
        }
        if f.l.key != key {
            return Ok(false);
        }
        let (p, d, l) = (f.p, f.p_dir, f.l);
        let (gp, gd) = f.gp.expect("user keys sit below the root");
        if acc.mode.in_place() {
            let sibling = acc.load(&p.children[1 - d])?;
            acc.store(&gp.children[gd], sibling)?;
            acc.unlink(p)?;
            acc.unlink(l)?;
            return Ok(true);
        }
        Self::check_link(&acc.llx(gp)?, gd, p)?;
        let sp = acc.llx(p)?;
        Self::check_link(&sp, d, l)?;
        // SAFETY: read from p's snapshot inside the guard.
        let s: &BstNode = unsafe { deref(sp[1 - d]) };
        let ss = acc.llx(s)?;
        acc.llx(l)?;
        acc.yield_point();
        let copy = if s.leaf {
            BstNode::leaf(s.key, acc.load(&s.value)?)
        } else {
            BstNode::internal(s.key, ss[0], ss[1])
        };
        let copy = acc.alloc(copy);
        acc.scx(&[gp, p, l, s], &[p, l, s], (gp, gd), handle(copy))?;
        Ok(true)
    }

    fn get_body(&self, acc: &mut Access<'_>, key: u64) -> Flow<Option<u64>> {
        let f = self.search(acc, key, false)?;
        if f.l.key == key {
            Ok(Some(acc.load(&f.l.value)?))
        } else {
            Ok(None)
        }
    }

    fn range_body(&self, acc: &mut Access<'_>, lo: u64, hi: u64) -> Flow<Vec<(u64, u64)>> {
        let fallback = matches!(acc.mode, Mode::Fallback { .. });
        let mut out = Vec::new();
        let mut visited = Vec::new();
        let mut stack = vec![self.root()];
        while let Some(n) = stack.pop() {
            let kids = if fallback {
                let snap = acc.llx(n)?;
                visited.push(n);
                snap
            } else if n.leaf {
                Vec::new()
            } else {
                vec![acc.load(&n.children[0])?, acc.load(&n.children[1])?]
            };
            if n.leaf {
                if lo <= n.key && n.key < hi && n.key < SENTINEL_LOW {
                    out.push((n.key, acc.load(&n.value)?));
                }
                continue;
            }
            // SAFETY: handles read inside the guard.
            unsafe {
                if hi > n.key {
                    stack.push(deref(kids[1]));
                }
                if lo < n.key {
                    stack.push(deref(kids[0]));
                }
            }
        }
        if fallback {
            acc.yield_point();
            if !visited.iter().all(|n| acc.still_linked(*n)) {
                return Err(Halt::Restart);
            }
        }
        Ok(out)
    }

    fn for_each_node(&self, mut f: impl FnMut(&BstNode, usize)) {
        let mut stack = vec![(self.root, 0usize)];
        while let Some((n, depth)) = stack.pop() {
            // SAFETY: quiescent traversal.
            let n = unsafe { &*n };
            f(n, depth);
            if !n.leaf {
                for c in n.children.iter().rev() {
                    let h = c.load();
                    if h != NIL {
                        stack.push((h as *const BstNode, depth + 1));
                    }
                }
            }
        }
    }
}

impl Dictionary for Bst {
    fn name(&self) -> &'static str {
        "bst"
    }

    fn register(&self) -> Worker {
        self.shared.register()
    }

    fn insert(&self, w: &mut Worker, key: u64, value: u64) -> bool {
        assert!(key < SENTINEL_LOW, "key {key} is reserved");
        self.shared.run(w, false, |acc| self.insert_body(acc, key, value))
    }

    fn delete(&self, w: &mut Worker, key: u64) -> bool {
        if key >= SENTINEL_LOW {
            return false;
        }
        self.shared.run(w, false, |acc| self.delete_body(acc, key))
    }

    fn get(&self, w: &mut Worker, key: u64) -> Option<u64> {
        if key >= SENTINEL_LOW {
            return None;
        }
        self.shared.run(w, false, |acc| self.get_body(acc, key))
    }

    fn range_query(&self, w: &mut Worker, lo: u64, hi: u64) -> Vec<(u64, u64)> {
        assert!(lo <= hi, "empty range [{lo}, {hi})");
        self.shared.run(w, false, |acc| self.range_body(acc, lo, hi))
    }

    fn control(&self) -> &PathControl {
        &self.shared.control
    }

    fn config(&self) -> &TreeConfig {
        &self.shared.config
    }

    fn rebalance_all(&self, _: &mut Worker) {}

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let root = self.root();
        if root.leaf || root.key != SENTINEL_HIGH {
            errs.push("root is not the high sentinel".to_string());
            return errs;
        }
        match unsafe { (root.children[1].load() as *const BstNode).as_ref() } {
            Some(r) if r.leaf && r.key == SENTINEL_HIGH => {}
            _ => errs.push("right child of root is not the high sentinel leaf".to_string()),
        }
        // (node, lower bound inclusive, upper bound exclusive)
        let mut stack = vec![(root.children[0].load(), 0u64, SENTINEL_HIGH)];
        let mut last: Option<u64> = None;
        while let Some((h, lo, hi)) = stack.pop() {
            if h == NIL {
                errs.push("missing child".to_string());
                continue;
            }
            // SAFETY: quiescent traversal.
            let n = unsafe { &*(h as *const BstNode) };
            let name = format!("node {h:#x} (key {})", n.key);
            if n.header.marked.load() != 0 {
                errs.push(format!("{name} is marked but reachable"));
            }
            if n.key < lo || n.key >= hi {
                errs.push(format!("{name} outside its range [{lo}, {hi})"));
            }
            if n.leaf {
                if last.is_some_and(|k| k >= n.key) {
                    errs.push(format!("{name} out of order"));
                }
                last = Some(n.key);
                continue;
            }
            stack.push((n.children[1].load(), n.key.max(lo), hi));
            stack.push((n.children[0].load(), lo, n.key.min(hi)));
        }
        if last != Some(SENTINEL_LOW) {
            errs.push("low sentinel is not the last leaf left of the root".to_string());
        }
        errs
    }

    fn entries(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        self.for_each_node(|n, _| {
            if n.leaf && n.key < SENTINEL_LOW {
                out.push((n.key, n.value.load()));
            }
        });
        out
    }

    fn shape_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.for_each_node(|n, depth| {
            h.write_u64(n.key);
            h.write_usize(depth);
            h.write_u8(n.leaf as u8);
            if n.leaf {
                h.write_u64(n.value.load());
            }
        });
        h.finish()
    }

    fn set_broken_insert(&self, on: bool) {
        self.shared.broken_insert_flag().store(on, SeqCst);
    }
}

impl Drop for Bst {
    fn drop(&mut self) {
        let mut nodes = Vec::new();
        self.for_each_node(|n, _| nodes.push(Retired::unpublished(n as *const BstNode)));
        self.shared.adopt_reachable(nodes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;
    use crate::trees::testing::oracle_run;
    use crate::txn::{AbortReason, TxnConfig};

    fn tree(policy: PolicyKind) -> Bst {
        Bst::new(TreeConfig::new(policy)).unwrap()
    }

    fn forced_fallback(policy: PolicyKind) -> Bst {
        let mut c = TreeConfig::new(policy);
        c.txn = TxnConfig {
            spurious_abort_prob: 1.0,
            ..TxnConfig::default()
        };
        Bst::new(c).unwrap()
    }

    #[test]
    fn empty_tree() {
        let t = tree(PolicyKind::ThreePath);
        let mut w = t.register();
        assert_eq!(t.get(&mut w, 5), None);
        assert_eq!(t.range_query(&mut w, 0, 100), vec![]);
        assert!(t.validate().is_empty());
        assert_eq!(t.key_sum(), 0);
    }

    #[test]
    fn insert_then_get() {
        let t = tree(PolicyKind::ThreePath);
        let mut w = t.register();
        assert!(t.insert(&mut w, 5, 50));
        assert_eq!(t.get(&mut w, 5), Some(50));
        assert!(!t.insert(&mut w, 5, 51));
        assert_eq!(t.get(&mut w, 5), Some(51));
    }

    #[test]
    fn range_examples() {
        for policy in PolicyKind::ALL {
            let t = tree(policy);
            let mut w = t.register();
            for k in [1, 3, 5] {
                t.insert(&mut w, k, k * 10);
            }
            assert_eq!(t.range_query(&mut w, 2, 6), vec![(3, 30), (5, 50)]);
            let t = forced_fallback(policy);
            let mut w = t.register();
            for k in [1, 3, 5] {
                t.insert(&mut w, k, k * 10);
            }
            assert_eq!(t.range_query(&mut w, 2, 6), vec![(3, 30), (5, 50)], "{policy}");
        }
    }

    #[test]
    fn delete_absent_leaves_tree_unchanged() {
        let t = tree(PolicyKind::ThreePath);
        let mut w = t.register();
        for k in [4, 2, 9] {
            t.insert(&mut w, k, k);
        }
        let before = t.shape_hash();
        assert!(!t.delete(&mut w, 3));
        assert_eq!(t.shape_hash(), before);
    }

    #[test]
    fn oracle_all_policies() {
        for policy in PolicyKind::ALL {
            oracle_run(&tree(policy), 3000, 64, 1);
            oracle_run(&forced_fallback(policy), 3000, 64, 2);
        }
    }

    #[test]
    fn oracle_with_outside_search() {
        let mut c = TreeConfig::new(PolicyKind::ThreePath);
        c.search_outside_txn = true;
        oracle_run(&Bst::new(c).unwrap(), 3000, 64, 3);
    }

    #[test]
    fn fast_path_allocation_counts() {
        let t = tree(PolicyKind::ThreePath);
        let mut w = t.register();
        let a0 = w.allocations();
        t.insert(&mut w, 10, 1);
        assert_eq!(w.allocations() - a0, 2, "new leaf and internal");
        let a1 = w.allocations();
        t.insert(&mut w, 10, 2);
        assert_eq!(w.allocations(), a1, "existing key");
        t.insert(&mut w, 20, 1);
        let a2 = w.allocations();
        assert!(t.delete(&mut w, 10));
        assert_eq!(w.allocations(), a2, "delete");
        assert_eq!(w.stats.fast.done, 4);
    }

    #[test]
    fn fallback_allocation_counts() {
        let t = forced_fallback(PolicyKind::ThreePath);
        let mut w = t.register();
        let a0 = w.allocations();
        t.insert(&mut w, 10, 1);
        assert_eq!(w.allocations() - a0, 3, "leaf, copy of old leaf, internal");
        let a1 = w.allocations();
        t.insert(&mut w, 10, 2);
        assert_eq!(w.allocations() - a1, 1, "one new leaf");
        t.insert(&mut w, 20, 1);
        let a2 = w.allocations();
        assert!(t.delete(&mut w, 10));
        assert_eq!(w.allocations() - a2, 1, "sibling copy");
        assert_eq!(w.stats.fallback.done, 4);
        assert_eq!(t.entries(), vec![(20, 1)]);
    }

    #[test]
    fn fallback_replacements_retire_old_nodes() {
        let t = forced_fallback(PolicyKind::NonHtm);
        let mut w = t.register();
        t.insert(&mut w, 10, 1);
        let retired0 = t.shared.domain.retired_count();
        t.insert(&mut w, 10, 2);
        // The old leaf and the descriptor it no longer references.
        assert!(t.shared.domain.retired_count() > retired0);
    }

    #[test]
    fn validator_names_misordered_node() {
        let t = tree(PolicyKind::ThreePath);
        let mut w = t.register();
        for k in [10, 20, 30] {
            t.insert(&mut w, k, k);
        }
        assert!(t.validate().is_empty());
        // Swap the key of one leaf behind the tree's back.
        let mut victim = NIL;
        t.for_each_node(|n, _| {
            if n.leaf && n.key == 20 {
                victim = handle(n);
            }
        });
        let node = unsafe { &mut *(victim as *mut BstNode) };
        node.key = 5;
        let errs = t.validate();
        assert!(!errs.is_empty());
        assert!(errs.iter().all(|e| e.contains("key 5")), "{errs:?}");
        node.key = 20;
    }

    #[test]
    fn outside_search_sees_removed_subtree_and_restarts() {
        let mut c = TreeConfig::new(PolicyKind::ThreePath);
        c.search_outside_txn = true;
        let t = Bst::new(c).unwrap();
        let mut a = t.register();
        let mut b = t.register();
        for k in [1, 2, 3] {
            t.insert(&mut a, k, k);
        }
        // a searches for 2 outside any transaction.
        a.proc.begin_op();
        let mut allocs = 0;
        let mut acc = Access {
            mode: Mode::Fast,
            ctx: None,
            proc: &mut a.proc,
            allocs: &mut allocs,
            mark: true,
        };
        let found = t.search(&mut acc, 2, true).unwrap();
        let leaf = handle(found.l);
        // b removes that leaf on the fast path, marking it.
        assert!(t.delete(&mut b, 2));
        assert_eq!(unsafe { deref::<BstNode>(leaf) }.header.marked.load(), 1);
        // a's transaction notices.
        a.ctx.begin().unwrap();
        let mut acc = Access {
            mode: Mode::Fast,
            ctx: Some(&mut a.ctx),
            proc: &mut a.proc,
            allocs: &mut allocs,
            mark: true,
        };
        assert_eq!(
            Bst::verify(&mut acc, &found),
            Err(Halt::Abort(AbortReason::Explicit(NODE_MARKED)))
        );
        a.ctx.rollback();
        a.proc.finish_attempt(false, 0);
        a.proc.end_op();
        // The full operation restarts and succeeds.
        assert!(t.insert(&mut a, 2, 22));
        assert_eq!(t.get(&mut a, 2), Some(22));
    }

    #[test]
    fn concurrent_stress_keeps_key_sum() {
        use rand::{Rng, SeedableRng};
        for policy in PolicyKind::ALL {
            let mut c = TreeConfig::new(policy);
            c.txn.spurious_abort_prob = 0.2;
            c.poison = true;
            let t = Bst::new(c).unwrap();
            let sum = std::thread::scope(|s| {
                let hs: Vec<_> = (0..4u64)
                    .map(|i| {
                        let t = &t;
                        s.spawn(move || {
                            let mut w = t.register();
                            w.set_chaos(0.05, i);
                            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i);
                            let mut sum = 0u64;
                            for _ in 0..2000 {
                                let k = rng.gen_range(0..50);
                                match rng.gen_range(0..3) {
                                    0 => {
                                        if t.insert(&mut w, k, k) {
                                            sum = sum.wrapping_add(k);
                                        }
                                    }
                                    1 => {
                                        if t.delete(&mut w, k) {
                                            sum = sum.wrapping_sub(k);
                                        }
                                    }
                                    _ => {
                                        let r = t.range_query(&mut w, k, k + 10);
                                        assert!(r.windows(2).all(|p| p[0].0 < p[1].0));
                                    }
                                }
                            }
                            sum
                        })
                    })
                    .collect();
                hs.into_iter().fold(0u64, |a, h| a.wrapping_add(h.join().unwrap()))
            });
            assert_eq!(t.key_sum(), sum, "{policy}");
            assert!(t.validate().is_empty(), "{policy}: {:?}", t.validate());
        }
    }
}
