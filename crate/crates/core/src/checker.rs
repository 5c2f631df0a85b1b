//! History recording and exhaustive linearizability checking against a
//! sequential ordered map, plus the key-sum check used by stress trials.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trees::{Dictionary, Worker};

/// Largest history [`check_linearizable`] accepts.
pub const MAX_THREADS: usize = 3;
pub const MAX_OPS: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Insert { key: u64, value: u64 },
    Delete { key: u64 },
    Search { key: u64 },
    RangeQuery { lo: u64, hi: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Response {
    Bool(bool),
    Value(Option<u64>),
    Pairs(Vec<(u64, u64)>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryEvent {
    pub thread: usize,
    pub op: Op,
    pub response: Response,
    pub invoked: u64,
    pub responded: u64,
}

impl Op {
    /// Runs the operation on a concurrent dictionary.
    pub fn apply(self, d: &dyn Dictionary, w: &mut Worker) -> Response {
        match self {
            Op::Insert { key, value } => Response::Bool(d.insert(w, key, value)),
            Op::Delete { key } => Response::Bool(d.delete(w, key)),
            Op::Search { key } => Response::Value(d.get(w, key)),
            Op::RangeQuery { lo, hi } => Response::Pairs(d.range_query(w, lo, hi)),
        }
    }
}

/// Reference semantics for the four dictionary operations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct OracleDict {
    map: BTreeMap<u64, u64>,
}

impl OracleDict {
    pub fn apply(&mut self, op: Op) -> Response {
        match op {
            Op::Insert { key, value } => Response::Bool(self.map.insert(key, value).is_none()),
            Op::Delete { key } => Response::Bool(self.map.remove(&key).is_some()),
            Op::Search { key } => Response::Value(self.map.get(&key).copied()),
            Op::RangeQuery { lo, hi } => {
                Response::Pairs(self.map.range(lo..hi.max(lo)).map(|(k, v)| (*k, *v)).collect())
            }
        }
    }
}

/// Hands out invocation and response timestamps.
#[derive(Debug, Default)]
pub struct Recorder {
    clock: AtomicU64,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log(&self, thread: usize) -> ThreadLog<'_> {
        ThreadLog {
            recorder: self,
            thread,
            events: VecDeque::new(),
            keep: usize::MAX,
        }
    }

    /// Like [`Recorder::log`], but keeps only the last `keep` events.
    pub fn ring(&self, thread: usize, keep: usize) -> ThreadLog<'_> {
        ThreadLog {
            keep,
            ..self.log(thread)
        }
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, SeqCst) + 1
    }
}

/// One thread's events, in program order.
#[derive(Debug)]
pub struct ThreadLog<'a> {
    recorder: &'a Recorder,
    thread: usize,
    events: VecDeque<HistoryEvent>,
    keep: usize,
}

impl ThreadLog<'_> {
    pub fn record(&mut self, op: Op, run: impl FnOnce() -> Response) -> &Response {
        let invoked = self.recorder.tick();
        let response = run();
        let responded = self.recorder.tick();
        if self.events.len() == self.keep {
            self.events.pop_front();
        }
        self.events.push_back(HistoryEvent {
            thread: self.thread,
            op,
            response,
            invoked,
            responded,
        });
        &self.events.back().unwrap().response
    }

    pub fn into_events(self) -> Vec<HistoryEvent> {
        self.events.into()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    pub fn merge(logs: impl IntoIterator<Item = Vec<HistoryEvent>>) -> Self {
        let mut events: Vec<_> = logs.into_iter().flatten().collect();
        events.sort_by_key(|e| e.invoked);
        History { events }
    }

    pub fn threads(&self) -> usize {
        let ids: HashSet<_> = self.events.iter().map(|e| e.thread).collect();
        ids.len()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Last `n` events in text form.
    pub fn tail(&self, n: usize) -> String {
        let start = self.events.len().saturating_sub(n);
        self.events[start..].iter().map(|e| format!("{e}\n")).collect()
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Op::Insert { key, value } => write!(f, "insert {key} {value}"),
            Op::Delete { key } => write!(f, "delete {key}"),
            Op::Search { key } => write!(f, "search {key}"),
            Op::RangeQuery { lo, hi } => write!(f, "range_query {lo} {hi}"),
        }
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Bool(b) => write!(f, "{b}"),
            Response::Value(None) => write!(f, "none"),
            Response::Value(Some(v)) => write!(f, "some {v}"),
            Response::Pairs(ps) => {
                write!(f, "[")?;
                for (i, (k, v)) in ps.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{k}:{v}")?;
                }
                write!(f, "]")
            }
        }
    }
}

impl fmt::Display for HistoryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} → {} @{},{}",
            self.thread, self.op, self.response, self.invoked, self.responded
        )
    }
}

impl fmt::Display for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.events {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseHistoryError {
    pub line: usize,
    pub msg: String,
}

fn parse_event(s: &str) -> Result<HistoryEvent, String> {
    let (call, rest) = s.split_once('→').ok_or("missing →")?;
    let (resp, stamps) = rest.rsplit_once('@').ok_or("missing @")?;
    let (inv, res) = stamps.trim().split_once(',').ok_or("timestamps need inv,resp")?;
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("{t:?}: {e}"));
    let words: Vec<&str> = call.split_whitespace().collect();
    let arg = |i: usize| words.get(i).ok_or_else(|| format!("missing argument {i}")).and_then(|w| num(w));
    let thread = arg(0)? as usize;
    let op = match words.get(1).copied() {
        Some("insert") => Op::Insert {
            key: arg(2)?,
            value: arg(3)?,
        },
        Some("delete") => Op::Delete { key: arg(2)? },
        Some("search") => Op::Search { key: arg(2)? },
        Some("range_query") => Op::RangeQuery { lo: arg(2)?, hi: arg(3)? },
        other => return Err(format!("unknown operation {other:?}")),
    };
    let resp = resp.trim();
    let response = match resp {
        "true" => Response::Bool(true),
        "false" => Response::Bool(false),
        "none" => Response::Value(None),
        _ if resp.starts_with("some ") => Response::Value(Some(num(&resp[5..])?)),
        _ if resp.starts_with('[') && resp.ends_with(']') => {
            let pairs = resp[1..resp.len() - 1]
                .split_whitespace()
                .map(|p| {
                    let (k, v) = p.split_once(':').ok_or_else(|| format!("bad pair {p:?}"))?;
                    Ok((num(k)?, num(v)?))
                })
                .collect::<Result<_, String>>()?;
            Response::Pairs(pairs)
        }
        _ => return Err(format!("bad response {resp:?}")),
    };
    Ok(HistoryEvent {
        thread,
        op,
        response,
        invoked: num(inv)?,
        responded: num(res)?,
    })
}

impl FromStr for History {
    type Err = ParseHistoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let events = s
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_event(l).map_err(|msg| ParseHistoryError { line: i + 1, msg }))
            .collect::<Result<_, _>>()?;
        Ok(History { events })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    /// No legal order exists. `prefix` is the longest sequence of events
    /// that could be linearized before the search got stuck.
    Violation { prefix: Vec<HistoryEvent> },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("history too large for exhaustive search ({threads} threads, {ops} ops; limit {MAX_THREADS} threads, {MAX_OPS} ops)")]
    BudgetExceeded { threads: usize, ops: usize },
    #[error("thread {0} has overlapping operations")]
    Overlap(usize),
}

struct Search<'a> {
    per_thread: Vec<Vec<&'a HistoryEvent>>,
    seen: HashSet<(Vec<usize>, OracleDict)>,
    order: Vec<&'a HistoryEvent>,
    best: Vec<&'a HistoryEvent>,
}

impl Search<'_> {
    fn run(&mut self, next: &mut Vec<usize>, state: &OracleDict) -> bool {
        if next.iter().zip(&self.per_thread).all(|(i, evs)| *i == evs.len()) {
            return true;
        }
        if !self.seen.insert((next.clone(), state.clone())) {
            return false;
        }
        // Earliest response among pending events: only events invoked
        // before it can go next.
        let horizon = (0..next.len())
            .filter_map(|t| self.per_thread[t].get(next[t]).map(|e| e.responded))
            .min()
            .unwrap();
        for t in 0..next.len() {
            let Some(&e) = self.per_thread[t].get(next[t]) else {
                continue;
            };
            if e.invoked > horizon {
                continue;
            }
            let mut after = state.clone();
            if after.apply(e.op) != e.response {
                continue;
            }
            self.order.push(e);
            if self.order.len() > self.best.len() {
                self.best = self.order.clone();
            }
            next[t] += 1;
            if self.run(next, &after) {
                return true;
            }
            next[t] -= 1;
            self.order.pop();
        }
        false
    }
}

/// Decides whether some order of the events that respects real-time
/// precedence reproduces every response on an initially empty
/// [`OracleDict`].
pub fn check_linearizable(history: &History) -> Result<Verdict, CheckError> {
    let threads = history.threads();
    if threads > MAX_THREADS || history.len() > MAX_OPS {
        return Err(CheckError::BudgetExceeded {
            threads,
            ops: history.len(),
        });
    }
    let mut ids: Vec<usize> = history.events.iter().map(|e| e.thread).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut per_thread: Vec<Vec<&HistoryEvent>> = vec![Vec::new(); ids.len()];
    for e in &history.events {
        per_thread[ids.binary_search(&e.thread).unwrap()].push(e);
    }
    for (evs, id) in per_thread.iter_mut().zip(&ids) {
        evs.sort_by_key(|e| e.invoked);
        if evs.windows(2).any(|w| w[0].responded > w[1].invoked) {
            return Err(CheckError::Overlap(*id));
        }
    }
    let mut search = Search {
        per_thread,
        seen: HashSet::new(),
        order: Vec::new(),
        best: Vec::new(),
    };
    let mut next = vec![0; ids.len()];
    if search.run(&mut next, &OracleDict::default()) {
        Ok(Verdict::Ok)
    } else {
        Ok(Verdict::Violation {
            prefix: search.best.into_iter().cloned().collect(),
        })
    }
}

/// True iff the per-thread (inserted minus deleted) key sums add up to the
/// sum of keys present.
pub fn keysum_verify(per_thread_sums: &[u64], d: &dyn Dictionary) -> bool {
    let expected = per_thread_sums.iter().fold(0u64, |a, s| a.wrapping_add(*s));
    expected == d.key_sum()
}

/// Runs `ops` random single-threaded operations on `d` (assumed empty) and
/// on an [`OracleDict`], stopping at the first differing response.
pub fn oracle_equivalence(d: &dyn Dictionary, ops: usize, key_range: u64, seed: u64) -> Result<(), String> {
    let mut w = d.register();
    let mut oracle = OracleDict::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..ops {
        let op = random_op(&mut rng, key_range);
        let got = op.apply(d, &mut w);
        let want = oracle.apply(op);
        if got != want {
            return Err(format!("op {i} ({op}): got {got}, expected {want}"));
        }
    }
    Ok(())
}

/// Shape of a randomly generated concurrent history.
#[derive(Clone, Copy, Debug)]
pub struct HistorySpec {
    pub threads: usize,
    pub ops_per_thread: usize,
    pub key_range: u64,
    pub seed: u64,
    /// Probability of yielding at each scheduling point inside operations.
    pub chaos: f64,
}

impl Default for HistorySpec {
    fn default() -> Self {
        HistorySpec {
            threads: 3,
            ops_per_thread: 12,
            key_range: 8,
            seed: 0,
            chaos: 0.2,
        }
    }
}

fn random_op(rng: &mut ChaCha8Rng, key_range: u64) -> Op {
    let key = rng.gen_range(0..key_range);
    match rng.gen_range(0..10) {
        0..=3 => Op::Insert {
            key,
            value: rng.gen_range(0..4),
        },
        4..=6 => Op::Delete { key },
        7..=8 => Op::Search { key },
        _ => Op::RangeQuery {
            lo: key,
            hi: key + rng.gen_range(1..=key_range),
        },
    }
}

/// Runs random operations from `spec.threads` threads on `d` and returns
/// the recorded history.
pub fn record_random_history(d: &dyn Dictionary, spec: HistorySpec) -> History {
    let recorder = Recorder::new();
    let logs = std::thread::scope(|s| {
        let handles: Vec<_> = (0..spec.threads)
            .map(|t| {
                let recorder = &recorder;
                s.spawn(move || {
                    let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut w = d.register();
                    w.set_chaos(spec.chaos, seed);
                    let mut log = recorder.log(t);
                    for _ in 0..spec.ops_per_thread {
                        let op = random_op(&mut rng, spec.key_range);
                        log.record(op, || op.apply(d, &mut w));
                        if spec.chaos > 0.0 && rng.gen_bool(spec.chaos) {
                            std::thread::yield_now();
                        }
                    }
                    log.into_events()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
    });
    History::merge(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;
    use crate::trees::{AbTree, Bst, TreeConfig};

    fn ev(thread: usize, op: Op, response: Response, invoked: u64, responded: u64) -> HistoryEvent {
        HistoryEvent {
            thread,
            op,
            response,
            invoked,
            responded,
        }
    }

    fn ins(key: u64) -> Op {
        Op::Insert { key, value: 0 }
    }

    #[test]
    fn empty_history_is_linearizable() {
        assert_eq!(check_linearizable(&History::default()), Ok(Verdict::Ok));
    }

    #[test]
    fn sequential_history_from_oracle_is_linearizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut oracle = OracleDict::default();
        let events = (0..30)
            .map(|i| {
                let op = random_op(&mut rng, 8);
                ev(0, op, oracle.apply(op), 2 * i + 1, 2 * i + 2)
            })
            .collect();
        assert_eq!(check_linearizable(&History { events }), Ok(Verdict::Ok));
    }

    #[test]
    fn lost_update_is_a_violation() {
        // Both inserts of 5 claim the key was absent; no delete in between.
        let h = History {
            events: vec![
                ev(0, ins(5), Response::Bool(true), 1, 4),
                ev(1, ins(5), Response::Bool(true), 2, 3),
                ev(2, Op::Search { key: 5 }, Response::Value(Some(0)), 5, 6),
            ],
        };
        let Ok(Verdict::Violation { prefix }) = check_linearizable(&h) else {
            panic!("expected a violation");
        };
        assert_eq!(prefix.len(), 1);
    }

    #[test]
    fn overlapping_ops_may_reorder() {
        // The search overlaps the insert, so it may see either state.
        for seen in [None, Some(0)] {
            let h = History {
                events: vec![
                    ev(0, ins(1), Response::Bool(true), 1, 4),
                    ev(1, Op::Search { key: 1 }, Response::Value(seen), 2, 3),
                ],
            };
            assert_eq!(check_linearizable(&h), Ok(Verdict::Ok), "{seen:?}");
        }
    }

    #[test]
    fn real_time_order_is_respected() {
        // The search starts after the insert returned, so it must see it.
        let h = History {
            events: vec![
                ev(0, ins(1), Response::Bool(true), 1, 2),
                ev(1, Op::Search { key: 1 }, Response::Value(None), 3, 4),
            ],
        };
        assert!(!check_linearizable(&h).unwrap().is_ok());
    }

    #[test]
    fn range_query_must_match_a_single_instant() {
        let mut h = History {
            events: vec![
                ev(0, ins(2), Response::Bool(true), 1, 2),
                ev(0, ins(1), Response::Bool(true), 3, 4),
                ev(0, Op::Delete { key: 2 }, Response::Bool(true), 6, 7),
                ev(1, Op::RangeQuery { lo: 0, hi: 8 }, Response::Pairs(vec![(1, 0)]), 5, 8),
            ],
        };
        assert_eq!(check_linearizable(&h), Ok(Verdict::Ok));
        // Starting after both inserts, the query sees {1,2} or {1}, never {}.
        h.events[3].response = Response::Pairs(vec![]);
        assert!(!check_linearizable(&h).unwrap().is_ok());
    }

    #[test]
    fn oversized_history_is_rejected() {
        let events = (0..37).map(|i| ev(0, ins(i), Response::Bool(true), 2 * i + 1, 2 * i + 2)).collect();
        assert_eq!(
            check_linearizable(&History { events }),
            Err(CheckError::BudgetExceeded { threads: 1, ops: 37 })
        );
        let events = (0..4).map(|t| ev(t, ins(t as u64), Response::Bool(true), 1, 2)).collect();
        assert!(matches!(
            check_linearizable(&History { events }),
            Err(CheckError::BudgetExceeded { threads: 4, .. })
        ));
    }

    #[test]
    fn overlapping_ops_of_one_thread_are_rejected() {
        let h = History {
            events: vec![
                ev(0, ins(1), Response::Bool(true), 1, 3),
                ev(0, ins(2), Response::Bool(true), 2, 4),
            ],
        };
        assert_eq!(check_linearizable(&h), Err(CheckError::Overlap(0)));
    }

    #[test]
    fn text_format_round_trips() {
        let h = History {
            events: vec![
                ev(0, Op::Insert { key: 3, value: 30 }, Response::Bool(true), 1, 2),
                ev(1, Op::Search { key: 3 }, Response::Value(Some(30)), 3, 4),
                ev(2, Op::Search { key: 4 }, Response::Value(None), 5, 6),
                ev(1, Op::RangeQuery { lo: 0, hi: 9 }, Response::Pairs(vec![(3, 30), (5, 1)]), 7, 8),
                ev(0, Op::Delete { key: 3 }, Response::Bool(false), 9, 10),
                ev(0, Op::RangeQuery { lo: 0, hi: 1 }, Response::Pairs(vec![]), 11, 12),
            ],
        };
        let text = h.to_string();
        assert_eq!(text.lines().next().unwrap(), "0 insert 3 30 → true @1,2");
        assert_eq!(text.parse::<History>().unwrap(), h);
        assert_eq!("0 frobnicate 1 → true @1,2".parse::<History>().unwrap_err().line, 1);
    }

    #[test]
    fn keysum_examples() {
        let t = Bst::new(TreeConfig::new(PolicyKind::ThreePath)).unwrap();
        assert!(keysum_verify(&[], &t));
        let mut w = t.register();
        t.insert(&mut w, 7, 1);
        assert!(keysum_verify(&[7], &t));
        assert!(!keysum_verify(&[6], &t));
    }

    #[test]
    fn recorded_histories_check_ok() {
        for policy in PolicyKind::ALL {
            for seed in 0..20 {
                let bst = Bst::new(TreeConfig::new(policy)).unwrap();
                let ab = AbTree::new(TreeConfig::new(policy)).unwrap();
                for d in [&bst as &dyn Dictionary, &ab] {
                    let h = record_random_history(
                        d,
                        HistorySpec {
                            seed,
                            ..HistorySpec::default()
                        },
                    );
                    assert_eq!(h.len(), 36);
                    assert_eq!(check_linearizable(&h), Ok(Verdict::Ok), "{policy} {}\n{h}", d.name());
                }
            }
        }
    }
}
