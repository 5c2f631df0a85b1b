use std::time::Duration;

use anyhow::{Context, Result};
use clap::Parser;

use threepath::policy::{PathBudget, PathCounters, PolicyKind};
use threepath::trees::TreeConfig;
use threepath::txn::TxnConfig;
use threepath::workload::{run_trials, TreeKind, TrialResult, WorkloadKind, WorkloadSpec, CSV_HEADER, DEFAULT_KEY_RANGE};

/// Timed dictionary benchmark: prefill to half the key range, then run
/// light (updates only) or heavy (updates plus one range-query thread)
/// trials and report throughput and per-path counters.
#[derive(Parser, Debug)]
#[command(name = "threepath", version)]
struct Args {
    /// bst or abtree
    #[arg(long, default_value = "bst")]
    tree: TreeKind,
    /// nonhtm, tle, 2pc, 2pnc or 3path
    #[arg(long, default_value = "3path")]
    policy: PolicyKind,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 1000)]
    duration_ms: u64,
    /// Keys are drawn uniformly from [0, keyrange).
    #[arg(long, default_value_t = DEFAULT_KEY_RANGE)]
    keyrange: u64,
    /// light or heavy
    #[arg(long, default_value = "light")]
    workload: WorkloadKind,
    /// Largest range-query size (default 1000 for bst, 10000 for abtree).
    #[arg(long)]
    range_max: Option<u64>,
    #[arg(long, default_value_t = PathBudget::default().fast_limit)]
    fast_limit: u32,
    #[arg(long, default_value_t = PathBudget::default().middle_limit)]
    middle_limit: u32,
    /// Transactional attempts for TLE and the 2-path policies.
    #[arg(long, default_value_t = PathBudget::default().attempt_limit)]
    attempt_limit: u32,
    /// Distinct words a transaction may touch.
    #[arg(long, default_value_t = TxnConfig::default().capacity_limit)]
    cap_limit: usize,
    #[arg(long, default_value_t = 0.0)]
    spurious_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    trials: u64,
    /// Print CSV (header, one row per trial, then a mean row).
    #[arg(long)]
    csv: bool,
}

impl Args {
    fn spec(&self) -> WorkloadSpec {
        let mut config = TreeConfig::new(self.policy);
        config.budget = PathBudget {
            attempt_limit: self.attempt_limit,
            fast_limit: self.fast_limit,
            middle_limit: self.middle_limit,
        };
        config.txn = TxnConfig {
            capacity_limit: self.cap_limit,
            spurious_abort_prob: self.spurious_prob,
            rng_seed: self.seed,
        };
        let mut spec = WorkloadSpec::new(self.tree, config);
        spec.workload = self.workload;
        spec.threads = self.threads;
        spec.key_range = self.keyrange;
        spec.duration = Duration::from_millis(self.duration_ms);
        spec.range_max = self.range_max.unwrap_or(self.tree.default_range_max());
        spec.seed = self.seed;
        spec
    }
}

fn aborts(c: &PathCounters) -> String {
    format!(
        "conflict {} capacity {} explicit {} spurious {}",
        c.abort_conflict, c.abort_capacity, c.abort_explicit, c.abort_spurious
    )
}

fn print_human(spec: &WorkloadSpec, results: &[TrialResult]) {
    println!(
        "{} {} {} threads={} keyrange={}",
        spec.tree, spec.config.policy, spec.workload, spec.threads, spec.key_range
    );
    for (i, r) in results.iter().enumerate() {
        let s = &r.stats;
        println!(
            "trial {i}: {} ops, {:.0} ops/s; done fast/middle/fallback {}/{}/{}",
            r.ops, r.ops_per_sec, s.fast.done, s.middle.done, s.fallback.done
        );
        println!("  fast: commit {} {}", s.fast.commit, aborts(&s.fast));
        println!("  middle: commit {} {}", s.middle.commit, aborts(&s.middle));
    }
    let mean = results.iter().map(|r| r.ops_per_sec).sum::<f64>() / results.len().max(1) as f64;
    println!("mean {mean:.0} ops/s; all trials verified");
}

fn main() -> Result<()> {
    let args = Args::parse();
    let spec = args.spec();
    spec.config.validate().context("invalid configuration")?;
    anyhow::ensure!(args.threads >= 1, "--threads must be at least 1");
    anyhow::ensure!(args.keyrange >= 2, "--keyrange must be at least 2");
    anyhow::ensure!(spec.range_max >= 1, "--range-max must be at least 1");
    let (results, lines) = run_trials(&spec, args.trials)?;
    if args.csv {
        println!("{CSV_HEADER}");
        for l in lines {
            println!("{l}");
        }
    } else {
        print_human(&spec, &results);
    }
    Ok(())
}
