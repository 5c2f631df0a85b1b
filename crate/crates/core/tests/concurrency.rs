use std::sync::atomic::AtomicBool;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threepath::checker::keysum_verify;
use threepath::llxscx::{check_info_freshness, release_info, set_info_history, Process, Record, RecordHeader};
use threepath::policy::PolicyKind;
use threepath::reclaim::{EpochDomain, Reclaim, Retired};
use threepath::trees::{Dictionary, TreeConfig};
use threepath::txn::{SharedWord, TxnConfig, TxnContext};
use threepath::workload::TreeKind;

fn stress(d: &dyn Dictionary, threads: u64, ops: usize, keys: u64) -> Vec<u64> {
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    let mut w = d.register();
                    w.set_chaos(0.02, t);
                    let mut rng = ChaCha8Rng::seed_from_u64(t);
                    let mut sum = 0u64;
                    for _ in 0..ops {
                        let k = rng.gen_range(0..keys);
                        match rng.gen_range(0..10) {
                            0..=3 => {
                                if d.insert(&mut w, k, k) {
                                    sum = sum.wrapping_add(k);
                                }
                            }
                            4..=7 => {
                                if d.delete(&mut w, k) {
                                    sum = sum.wrapping_sub(k);
                                }
                            }
                            8 => {
                                if let Some(v) = d.get(&mut w, k) {
                                    assert_eq!(v, k);
                                }
                            }
                            _ => {
                                let r = d.range_query(&mut w, k, k + keys / 4);
                                assert!(r.windows(2).all(|p| p[0].0 < p[1].0));
                                assert!(r.iter().all(|&(a, b)| a == b && a >= k && a < k + keys / 4));
                            }
                        }
                    }
                    sum
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

#[test]
fn outside_search_mode_under_contention() {
    for tree in TreeKind::ALL {
        for spurious in [0.0, 0.3] {
            let mut c = TreeConfig::new(PolicyKind::ThreePath);
            c.search_outside_txn = true;
            c.poison = true;
            c.txn.spurious_abort_prob = spurious;
            let d = tree.build(c).unwrap();
            let sums = stress(&*d, 4, 3000, 200);
            assert!(keysum_verify(&sums, &*d), "{tree} {spurious}");
            let mut w = d.register();
            d.rebalance_all(&mut w);
            assert_eq!(d.validate(), Vec::<String>::new());
        }
    }
}

#[test]
fn every_policy_conserves_keys_with_poisoned_reclamation() {
    for tree in TreeKind::ALL {
        for policy in PolicyKind::ALL {
            let mut c = TreeConfig::new(policy);
            c.poison = true;
            c.txn.spurious_abort_prob = 0.1;
            c.txn.capacity_limit = 32;
            let d = tree.build(c).unwrap();
            let sums = stress(&*d, 3, 2000, 100);
            assert!(keysum_verify(&sums, &*d), "{tree} {policy}");
            let mut w = d.register();
            d.rebalance_all(&mut w);
            assert_eq!(d.validate(), Vec::<String>::new(), "{tree} {policy}");
        }
    }
}

#[test]
fn worker_pids_are_reused() {
    let d = TreeKind::Bst.build(TreeConfig::new(PolicyKind::ThreePath)).unwrap();
    for _ in 0..3 {
        stress(&*d, 2, 100, 50);
    }
    let w = d.register();
    assert!(w.pid() < 2);
}

struct Cell {
    header: RecordHeader,
    slots: [SharedWord; 1],
}

impl Reclaim for Cell {
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

impl Record for Cell {
    fn header(&self) -> &RecordHeader {
        &self.header
    }

    fn slots(&self) -> &[SharedWord] {
        &self.slots
    }
}

#[test]
fn info_values_stay_fresh_across_paths() {
    if !cfg!(debug_assertions) {
        return;
    }
    set_info_history(true);
    let domain = EpochDomain::new(false);
    let cells: Vec<&'static Cell> = (0..8)
        .map(|_| {
            &*Box::leak(Box::new(Cell {
                header: RecordHeader::new(),
                slots: [SharedWord::new(0)],
            }))
        })
        .collect();
    std::thread::scope(|s| {
        for pid in 0..2 {
            let (domain, cells) = (&domain, &cells);
            s.spawn(move || {
                let txn = TxnConfig {
                    spurious_abort_prob: 0.5,
                    ..TxnConfig::default()
                };
                let mut ctx = TxnContext::new(&txn, pid as u64);
                let mut p = Process::new(pid, domain.register().unwrap(), None);
                let mut rng = ChaCha8Rng::seed_from_u64(pid as u64);
                for n in 0..15u64 {
                    let i = rng.gen_range(0..8);
                    p.begin_op();
                    if p.llx_htm(cells[i]).snapshot().is_some() {
                        p.scx_dispatch(&mut ctx, &[cells[i]], &[], (cells[i], 0), (pid as u64) << 32 | n, 1);
                    }
                    p.end_op();
                }
            });
        }
    });
    set_info_history(false);
    for c in &cells {
        let h = c.header.info_history().unwrap_or_default();
        check_info_freshness(&h).unwrap();
    }
    domain.adopt(cells.iter().map(|c| unsafe { Retired::new(*c as *const Cell) }).collect());
}
