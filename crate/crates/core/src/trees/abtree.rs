//! Relaxed (a,b)-tree.
//!
//! Leaves hold up to `b` sorted pairs; internal nodes hold `degree - 1`
//! routing keys, child `i` covering `[keys[i-1], keys[i])`. Balance may be
//! violated temporarily by tagged nodes (an extra level left by a split) and
//! by underfull nodes (degree below `a`); updates that create a violation
//! repair it before returning, one local step at a time.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::atomic::{AtomicBool, Ordering::SeqCst};

use super::{deref, handle, Access, Dictionary, Flow, Halt, Mode, Shared, TreeConfig, TreeConfigError, Worker, NIL};
use crate::llxscx::{release_info, Record, RecordHeader, NODE_MARKED};
use crate::policy::PathControl;
use crate::reclaim::{Reclaim, Retired};
use crate::txn::SharedWord;

pub(crate) struct AbNode {
    header: RecordHeader,
    leaf: bool,
    tagged: bool,
    /// Pairs in a leaf (mutable in place by sequential paths); children of
    /// an internal node (fixed).
    size: SharedWord,
    keys: Box<[SharedWord]>,
    vals: Box<[SharedWord]>,
    children: Box<[SharedWord]>,
}

fn words(values: impl IntoIterator<Item = u64>) -> Box<[SharedWord]> {
    values.into_iter().map(SharedWord::new).collect()
}

impl AbNode {
    fn leaf(pairs: &[(u64, u64)], cap: usize) -> Self {
        debug_assert!(pairs.len() <= cap);
        let pad = cap - pairs.len();
        AbNode {
            header: RecordHeader::new(),
            leaf: true,
            tagged: false,
            size: SharedWord::new(pairs.len() as u64),
            keys: words(pairs.iter().map(|p| p.0).chain(std::iter::repeat(0).take(pad))),
            vals: words(pairs.iter().map(|p| p.1).chain(std::iter::repeat(0).take(pad))),
            children: Box::new([]),
        }
    }

    fn internal(keys: &[u64], children: &[u64], tagged: bool) -> Self {
        debug_assert_eq!(keys.len() + 1, children.len());
        AbNode {
            header: RecordHeader::new(),
            leaf: false,
            tagged,
            size: SharedWord::new(children.len() as u64),
            keys: words(keys.iter().copied()),
            vals: Box::new([]),
            children: words(children.iter().copied()),
        }
    }

    /// Routing keys of an internal node (immutable).
    fn routing(&self) -> Vec<u64> {
        self.keys.iter().map(SharedWord::raw).collect()
    }

    fn child_index(&self, key: u64) -> usize {
        self.keys.iter().take_while(|k| k.raw() <= key).count()
    }
}

impl Reclaim for AbNode {
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

impl Record for AbNode {
    fn header(&self) -> &RecordHeader {
        &self.header
    }

    fn slots(&self) -> &[SharedWord] {
        &self.children
    }
}

/// Root-to-leaf path: `nodes[0]` is the entry, `idx[k]` the child slot
/// taken at `nodes[k]`.
struct Path<'a> {
    nodes: Vec<&'a AbNode>,
    idx: Vec<usize>,
}

impl<'a> Path<'a> {
    fn leaf(&self) -> &'a AbNode {
        self.nodes[self.nodes.len() - 1]
    }

    fn parent(&self) -> (&'a AbNode, usize) {
        let n = self.nodes.len();
        (self.nodes[n - 2], self.idx[n - 2])
    }
}

/// Outcome of an update body: whether the key set changed, and whether a
/// violation was left on the key's path.
type Update = (bool, bool);

pub struct AbTree {
    shared: Shared,
    entry: *const AbNode,
    a: usize,
    b: usize,
}

// The entry pointer is owned by the tree; nodes are shared under reclamation.
unsafe impl Send for AbTree {}
unsafe impl Sync for AbTree {}

impl AbTree {
    pub fn new(config: TreeConfig) -> Result<Self, TreeConfigError> {
        let (a, b) = (config.a, config.b);
        let shared = Shared::new(config)?;
        let root = Box::into_raw(Box::new(AbNode::leaf(&[], b)));
        let entry = Box::into_raw(Box::new(AbNode::internal(&[], &[root as u64], false)));
        Ok(AbTree { shared, entry, a, b })
    }

    fn is_entry(&self, n: &AbNode) -> bool {
        std::ptr::eq(n, self.entry)
    }

    fn search<'a>(&self, acc: &mut Access<'_>, key: u64, plain: bool) -> Flow<Path<'a>> {
        // SAFETY: the entry outlives every operation.
        let mut n: &'a AbNode = unsafe { &*self.entry };
        let mut path = Path {
            nodes: vec![n],
            idx: Vec::new(),
        };
        while !n.leaf {
            let i = n.child_index(key);
            let c = if plain {
                acc.plain(&n.children[i])
            } else {
                acc.load(&n.children[i])?
            };
            path.idx.push(i);
            // SAFETY: handle read inside the operation's guard.
            n = unsafe { deref(c) };
            path.nodes.push(n);
        }
        Ok(path)
    }

    fn verify(acc: &mut Access<'_>, path: &Path<'_>) -> Flow<()> {
        let (p, i) = path.parent();
        let l = path.leaf();
        acc.require_unmarked(l)?;
        acc.require_unmarked(p)?;
        if acc.load(&p.children[i])? != handle(l) {
            return acc.abort(NODE_MARKED);
        }
        Ok(())
    }

    fn leaf_keys(acc: &mut Access<'_>, l: &AbNode) -> Flow<Vec<u64>> {
        let n = acc.load(&l.size)? as usize;
        let mut out = Vec::with_capacity(n);
        for k in &l.keys[..n] {
            out.push(acc.load(k)?);
        }
        Ok(out)
    }

    fn leaf_pairs(acc: &mut Access<'_>, l: &AbNode) -> Flow<Vec<(u64, u64)>> {
        let keys = Self::leaf_keys(acc, l)?;
        let mut out = Vec::with_capacity(keys.len());
        for (i, k) in keys.into_iter().enumerate() {
            out.push((k, acc.load(&l.vals[i])?));
        }
        Ok(out)
    }

    fn degree(acc: &mut Access<'_>, n: &AbNode) -> Flow<usize> {
        if n.leaf {
            Ok(acc.load(&n.size)? as usize)
        } else {
            Ok(n.children.len())
        }
    }

    fn check_link(snap: &[u64], i: usize, child: &AbNode) -> Flow<()> {
        if snap.get(i) == Some(&handle(child)) {
            Ok(())
        } else {
            Err(Halt::Restart)
        }
    }

    /// LLX of the leaf's parent (checking the link) and of the leaf.
    fn link_leaf(acc: &mut Access<'_>, p: &AbNode, i: usize, l: &AbNode) -> Flow<()> {
        Self::check_link(&acc.llx(p)?, i, l)?;
        acc.llx(l)?;
        acc.yield_point();
        Ok(())
    }

    fn insert_body(&self, acc: &mut Access<'_>, key: u64, value: u64) -> Flow<Update> {
        let outside = acc.outside_search();
        let path = self.search(acc, key, outside)?;
        acc.yield_point();
        if outside {
            Self::verify(acc, &path)?;
        }
        let l = path.leaf();
        let (p, i) = path.parent();
        let keys = Self::leaf_keys(acc, l)?;
        let n = keys.len();
        match keys.binary_search(&key) {
            Ok(j) => {
                if acc.mode.in_place() {
                    acc.store(&l.vals[j], value)?;
                } else {
                    Self::link_leaf(acc, p, i, l)?;
                    let mut pairs = Self::leaf_pairs(acc, l)?;
                    pairs[j].1 = value;
                    let new = acc.alloc(AbNode::leaf(&pairs, self.b));
                    acc.scx(&[p, l], &[l], (p, i), handle(new))?;
                }
                Ok((false, false))
            }
            Err(j) if n < self.b => {
                if acc.mode.in_place() {
                    for m in (j..n).rev() {
                        let v = acc.load(&l.vals[m])?;
                        acc.store(&l.keys[m + 1], keys[m])?;
                        acc.store(&l.vals[m + 1], v)?;
                    }
                    acc.store(&l.keys[j], key)?;
                    acc.store(&l.vals[j], value)?;
                    acc.store(&l.size, n as u64 + 1)?;
                } else {
                    Self::link_leaf(acc, p, i, l)?;
                    let mut pairs = Self::leaf_pairs(acc, l)?;
                    pairs.insert(j, (key, value));
                    let new = acc.alloc(AbNode::leaf(&pairs, self.b));
                    acc.scx(&[p, l], &[l], (p, i), handle(new))?;
                }
                Ok((true, false))
            }
            Err(j) => {
                let tagged = !self.is_entry(p);
                if !acc.mode.in_place() {
                    Self::link_leaf(acc, p, i, l)?;
                }
                let mut pairs = Self::leaf_pairs(acc, l)?;
                pairs.insert(j, (key, value));
                let split = pairs.len().div_ceil(2);
                let right = acc.alloc(AbNode::leaf(&pairs[split..], self.b));
                if acc.mode.in_place() {
                    // The leaf keeps the lower half; a new sibling and parent are added.
                    for (m, &(k, v)) in pairs[..split].iter().enumerate() {
                        acc.store(&l.keys[m], k)?;
                        acc.store(&l.vals[m], v)?;
                    }
                    acc.store(&l.size, split as u64)?;
                    let parent = acc.alloc(AbNode::internal(&[pairs[split].0], &[handle(l), handle(right)], tagged));
                    acc.store(&p.children[i], handle(parent))?;
                } else {
                    let left = acc.alloc(AbNode::leaf(&pairs[..split], self.b));
                    let parent =
                        acc.alloc(AbNode::internal(&[pairs[split].0], &[handle(left), handle(right)], tagged));
                    acc.scx(&[p, l], &[l], (p, i), handle(parent))?;
                }
                Ok((true, tagged))
            }
        }
    }

    fn delete_body(&self, acc: &mut Access<'_>, key: u64) -> Flow<Update> {
        let outside = acc.outside_search();
        let path = self.search(acc, key, outside)?;
        acc.yield_point();
        if outside {
            Self::verify(acc, &path)?;
        }
        let l = path.leaf();
        let (p, i) = path.parent();
        let keys = Self::leaf_keys(acc, l)?;
        let n = keys.len();
        let Ok(j) = keys.binary_search(&key) else {
            return Ok((false, false));
        };
        if acc.mode.in_place() {
            for m in j..n - 1 {
                let v = acc.load(&l.vals[m + 1])?;
                acc.store(&l.keys[m], keys[m + 1])?;
                acc.store(&l.vals[m], v)?;
            }
            acc.store(&l.size, n as u64 - 1)?;
        } else {
            Self::link_leaf(acc, p, i, l)?;
            let mut pairs = Self::leaf_pairs(acc, l)?;
            pairs.remove(j);
            let new = acc.alloc(AbNode::leaf(&pairs, self.b));
            acc.scx(&[p, l], &[l], (p, i), handle(new))?;
        }
        Ok((true, n - 1 < self.a && !self.is_entry(p)))
    }

    fn get_body(&self, acc: &mut Access<'_>, key: u64) -> Flow<Option<u64>> {
        let path = self.search(acc, key, false)?;
        let l = path.leaf();
        let keys = Self::leaf_keys(acc, l)?;
        match keys.binary_search(&key) {
            Ok(j) => Ok(Some(acc.load(&l.vals[j])?)),
            Err(_) => Ok(None),
        }
    }

    fn range_body(&self, acc: &mut Access<'_>, lo: u64, hi: u64) -> Flow<Vec<(u64, u64)>> {
        let fallback = matches!(acc.mode, Mode::Fallback { .. });
        let mut out = Vec::new();
        let mut visited = Vec::new();
        // SAFETY: the entry outlives every operation.
        let entry: &AbNode = unsafe { &*self.entry };
        // (node, lower bound, upper bound or None for unbounded)
        let mut stack: Vec<(&AbNode, u64, Option<u64>)> = vec![(entry, 0, None)];
        while let Some((n, lower, upper)) = stack.pop() {
            let kids = if fallback {
                let snap = acc.llx(n)?;
                visited.push(n);
                snap
            } else {
                let mut kids = Vec::with_capacity(n.children.len());
                for c in n.children.iter() {
                    kids.push(acc.load(c)?);
                }
                kids
            };
            if n.leaf {
                for (k, v) in Self::leaf_pairs(acc, n)? {
                    if lo <= k && k < hi {
                        out.push((k, v));
                    }
                }
                continue;
            }
            let keys = n.routing();
            for (t, &c) in kids.iter().enumerate().rev() {
                let l = if t == 0 { lower } else { keys[t - 1] };
                let u = if t == keys.len() { upper } else { Some(keys[t]) };
                if l < hi && u.map_or(true, |u| lo < u) {
                    // SAFETY: handle read inside the guard.
                    stack.push((unsafe { deref(c) }, l, u));
                }
            }
        }
        if fallback {
            acc.yield_point();
            if !visited.iter().all(|n| acc.still_linked(*n)) {
                return Err(Halt::Restart);
            }
        }
        out.sort_unstable_by_key(|p| p.0);
        Ok(out)
    }

    /// Repairs the topmost violation on `key`'s path. False if there is none.
    fn rebalance_body(&self, acc: &mut Access<'_>, key: u64) -> Flow<bool> {
        let path = self.search(acc, key, false)?;
        for d in 1..path.nodes.len() {
            let u = path.nodes[d];
            let (p, i) = (path.nodes[d - 1], path.idx[d - 1]);
            let gp = (d >= 2).then(|| (path.nodes[d - 2], path.idx[d - 2]));
            if u.tagged {
                self.fix_tag(acc, gp, p, i, u)?;
                return Ok(true);
            }
            let deg = Self::degree(acc, u)?;
            if d == 1 && !u.leaf && deg == 1 {
                self.collapse_root(acc, u)?;
                return Ok(true);
            }
            if let Some(gp) = gp {
                if deg < self.a {
                    self.fix_underfull(acc, gp, p, i, u)?;
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    fn collapse_root(&self, acc: &mut Access<'_>, root: &AbNode) -> Flow<()> {
        // SAFETY: the entry outlives every operation.
        let entry: &AbNode = unsafe { &*self.entry };
        Self::check_link(&acc.llx(entry)?, 0, root)?;
        let snap = acc.llx(root)?;
        // SAFETY: read from the root's snapshot.
        let child: &AbNode = unsafe { deref(snap[0]) };
        let cs = acc.llx(child)?;
        acc.yield_point();
        let copy = self.copy_node(acc, child, &cs, false)?;
        acc.scx(&[entry, root, child], &[root, child], (entry, 0), handle(copy))
    }

    fn copy_node(&self, acc: &mut Access<'_>, n: &AbNode, snap: &[u64], tagged: bool) -> Flow<&'static AbNode> {
        let node = if n.leaf {
            AbNode::leaf(&Self::leaf_pairs(acc, n)?, self.b)
        } else {
            AbNode::internal(&n.routing(), snap, tagged)
        };
        Ok(acc.alloc(node))
    }

    /// Removes the tagged node `u` (child `i` of `p`) by merging it into
    /// `p`, splitting `p` if it overflows (which moves the tag up).
    fn fix_tag(
        &self,
        acc: &mut Access<'_>,
        gp: Option<(&AbNode, usize)>,
        p: &AbNode,
        i: usize,
        u: &AbNode,
    ) -> Flow<()> {
        let Some((gp, j)) = gp else {
            // Tagged root: just drop the tag.
            Self::check_link(&acc.llx(p)?, i, u)?;
            let su = acc.llx(u)?;
            acc.yield_point();
            let new = self.copy_node(acc, u, &su, false)?;
            return acc.scx(&[p, u], &[u], (p, i), handle(new));
        };
        Self::check_link(&acc.llx(gp)?, j, p)?;
        let sp = acc.llx(p)?;
        Self::check_link(&sp, i, u)?;
        let su = acc.llx(u)?;
        acc.yield_point();
        let pk = p.routing();
        let children: Vec<u64> = sp[..i].iter().chain(&su).chain(&sp[i + 1..]).copied().collect();
        let keys: Vec<u64> = pk[..i].iter().chain(&u.routing()).chain(&pk[i..]).copied().collect();
        let new = if children.len() <= self.b {
            acc.alloc(AbNode::internal(&keys, &children, p.tagged))
        } else {
            let split = children.len().div_ceil(2);
            let left = acc.alloc(AbNode::internal(&keys[..split - 1], &children[..split], false));
            let right = acc.alloc(AbNode::internal(&keys[split..], &children[split..], false));
            acc.alloc(AbNode::internal(
                &[keys[split - 1]],
                &[handle(left), handle(right)],
                !self.is_entry(gp),
            ))
        };
        acc.scx(&[gp, p, u], &[p, u], (gp, j), handle(new))
    }

    /// Joins the underfull node `u` (child `i` of `p`) with a neighbour, or
    /// shares pairs/children with it when a join would overflow.
    fn fix_underfull(&self, acc: &mut Access<'_>, gp: (&AbNode, usize), p: &AbNode, i: usize, u: &AbNode) -> Flow<()> {
        let (gp, j) = gp;
        Self::check_link(&acc.llx(gp)?, j, p)?;
        let sp = acc.llx(p)?;
        Self::check_link(&sp, i, u)?;
        if sp.len() < 2 {
            return Err(Halt::Restart);
        }
        let si = if i > 0 { i - 1 } else { i + 1 };
        // SAFETY: read from p's snapshot.
        let s: &AbNode = unsafe { deref(sp[si]) };
        if s.tagged {
            return self.fix_tag(acc, Some((gp, j)), p, si, s);
        }
        if s.leaf != u.leaf {
            return Err(Halt::Restart);
        }
        let su = acc.llx(u)?;
        let ss = acc.llx(s)?;
        acc.yield_point();
        let li = i.min(si);
        let (left, right, ls, rs) = if si < i { (s, u, &ss, &su) } else { (u, s, &su, &ss) };
        let pk = p.routing();

        // Combined content and a way to build one side from a slice of it.
        let (total, new_nodes, sep): (usize, Vec<&'static AbNode>, u64) = if u.leaf {
            let mut all = Self::leaf_pairs(acc, left)?;
            all.extend(Self::leaf_pairs(acc, right)?);
            let total = all.len();
            if total < 2 * self.a {
                (total, vec![acc.alloc(AbNode::leaf(&all, self.b))], 0)
            } else {
                let split = total.div_ceil(2);
                let l = acc.alloc(AbNode::leaf(&all[..split], self.b));
                let r = acc.alloc(AbNode::leaf(&all[split..], self.b));
                (total, vec![l, r], all[split].0)
            }
        } else {
            let keys: Vec<u64> = left.routing().into_iter().chain([pk[li]]).chain(right.routing()).collect();
            let children: Vec<u64> = ls.iter().chain(rs.iter()).copied().collect();
            let total = children.len();
            if total < 2 * self.a {
                (total, vec![acc.alloc(AbNode::internal(&keys, &children, false))], 0)
            } else {
                let split = total.div_ceil(2);
                let l = acc.alloc(AbNode::internal(&keys[..split - 1], &children[..split], false));
                let r = acc.alloc(AbNode::internal(&keys[split..], &children[split..], false));
                (total, vec![l, r], keys[split - 1])
            }
        };
        debug_assert!(total >= 2 * self.a || new_nodes.len() == 1);

        let new = if new_nodes.len() == 1 && self.is_entry(gp) && sp.len() == 2 {
            // Joining the root's only two children: the result becomes the root.
            new_nodes[0]
        } else {
            let mut children = sp.clone();
            let mut keys = pk.clone();
            if let [merged] = new_nodes[..] {
                children.splice(li..li + 2, [handle(merged)]);
                keys.remove(li);
            } else {
                children[li] = handle(new_nodes[0]);
                children[li + 1] = handle(new_nodes[1]);
                keys[li] = sep;
            }
            acc.alloc(AbNode::internal(&keys, &children, false))
        };
        acc.scx(&[gp, p, u, s], &[p, u, s], (gp, j), handle(new))
    }

    /// A key on whose search path some violation lies, if any.
    fn find_violation(&self) -> Option<u64> {
        // (node, lower bound, depth)
        // SAFETY: quiescent traversal.
        let entry = unsafe { &*self.entry };
        let root = unsafe { &*(entry.children[0].load() as *const AbNode) };
        let mut stack = vec![(root, 0u64, true)];
        while let Some((n, lower, is_root)) = stack.pop() {
            let deg = if n.leaf { n.size.load() as usize } else { n.children.len() };
            if n.tagged || (is_root && !n.leaf && deg == 1) || (!is_root && deg < self.a) {
                return Some(lower);
            }
            if !n.leaf {
                let keys = n.routing();
                for (t, c) in n.children.iter().enumerate() {
                    let l = if t == 0 { lower } else { keys[t - 1] };
                    stack.push((unsafe { &*(c.load() as *const AbNode) }, l, false));
                }
            }
        }
        None
    }

    fn rebalance_key(&self, w: &mut Worker, key: u64) {
        while self.shared.run(w, true, |acc| self.rebalance_body(acc, key)) {}
    }

    fn for_each_node(&self, mut f: impl FnMut(&AbNode, usize)) {
        let mut stack = vec![(self.entry, 0usize)];
        while let Some((n, depth)) = stack.pop() {
            // SAFETY: quiescent traversal.
            let n = unsafe { &*n };
            f(n, depth);
            for c in n.children.iter().rev() {
                stack.push((c.load() as *const AbNode, depth + 1));
            }
        }
    }
}

impl Dictionary for AbTree {
    fn name(&self) -> &'static str {
        "abtree"
    }

    fn register(&self) -> Worker {
        self.shared.register()
    }

    fn insert(&self, w: &mut Worker, key: u64, value: u64) -> bool {
        let (inserted, violation) = self.shared.run(w, false, |acc| self.insert_body(acc, key, value));
        if violation {
            self.rebalance_key(w, key);
        }
        inserted
    }

    fn delete(&self, w: &mut Worker, key: u64) -> bool {
        let (deleted, violation) = self.shared.run(w, false, |acc| self.delete_body(acc, key));
        if violation {
            self.rebalance_key(w, key);
        }
        deleted
    }

    fn get(&self, w: &mut Worker, key: u64) -> Option<u64> {
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

    fn rebalance_all(&self, w: &mut Worker) {
        let mut steps = 0usize;
        while let Some(key) = self.find_violation() {
            self.rebalance_key(w, key);
            steps += 1;
            assert!(steps < 10_000_000, "rebalancing does not converge");
        }
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        // SAFETY: quiescent traversal.
        let entry = unsafe { &*self.entry };
        if entry.leaf || entry.tagged || entry.children.len() != 1 {
            errs.push("entry node must be an untagged internal node of degree 1".to_string());
            return errs;
        }
        let mut leaf_depth = None;
        // (handle, lower bound, upper bound, depth)
        let mut stack = vec![(entry.children[0].load(), 0u64, None::<u64>, 1usize)];
        while let Some((h, lower, upper, depth)) = stack.pop() {
            if h == NIL {
                errs.push("missing child".to_string());
                continue;
            }
            let n = unsafe { &*(h as *const AbNode) };
            let name = format!("node {h:#x} at depth {depth}");
            let is_root = depth == 1;
            if n.header.marked.load() != 0 {
                errs.push(format!("{name} is marked but reachable"));
            }
            if n.tagged {
                errs.push(format!("{name} is tagged"));
            }
            let keys: Vec<u64> = if n.leaf {
                n.keys[..n.size.load() as usize].iter().map(SharedWord::load).collect()
            } else {
                n.routing()
            };
            let deg = if n.leaf { keys.len() } else { n.children.len() };
            if deg > self.b {
                errs.push(format!("{name} has degree {deg} > b"));
            }
            if !is_root && deg < self.a {
                errs.push(format!("{name} has degree {deg} < a"));
            }
            if is_root && !n.leaf && deg < 2 {
                errs.push(format!("{name} is an internal root of degree {deg}"));
            }
            if keys.windows(2).any(|w| w[0] >= w[1]) {
                errs.push(format!("{name} keys not strictly increasing: {keys:?}"));
            }
            if keys.iter().any(|&k| k < lower || upper.is_some_and(|u| k >= u)) {
                errs.push(format!("{name} keys {keys:?} outside [{lower}, {upper:?})"));
            }
            if n.leaf {
                match leaf_depth {
                    None => leaf_depth = Some(depth),
                    Some(d) if d != depth => errs.push(format!("{name} is a leaf at depth {depth}, expected {d}")),
                    _ => {}
                }
                continue;
            }
            for (t, c) in n.children.iter().enumerate() {
                let l = if t == 0 { lower } else { keys[t - 1] };
                let u = if t == keys.len() { upper } else { Some(keys[t]) };
                stack.push((c.load(), l, u, depth + 1));
            }
        }
        errs
    }

    fn entries(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        self.for_each_node(|n, _| {
            if n.leaf {
                let size = n.size.load() as usize;
                out.extend((0..size).map(|i| (n.keys[i].load(), n.vals[i].load())));
            }
        });
        out
    }

    fn shape_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.for_each_node(|n, depth| {
            h.write_usize(depth);
            h.write_u8(n.leaf as u8);
            if n.leaf {
                for i in 0..n.size.load() as usize {
                    h.write_u64(n.keys[i].load());
                    h.write_u64(n.vals[i].load());
                }
            } else {
                for k in n.routing() {
                    h.write_u64(k);
                }
            }
        });
        h.finish()
    }

    fn set_broken_insert(&self, on: bool) {
        self.shared.broken_insert_flag().store(on, SeqCst);
    }
}

impl Drop for AbTree {
    fn drop(&mut self) {
        let mut nodes = Vec::new();
        self.for_each_node(|n, _| nodes.push(Retired::unpublished(n as *const AbNode)));
        self.shared.adopt_reachable(nodes);
    }
}
