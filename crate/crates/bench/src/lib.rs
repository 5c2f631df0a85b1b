//! Shared helpers for the criterion benches.

use threepath::policy::PolicyKind;
use threepath::trees::{Dictionary, TreeConfig};
use threepath::workload::{prefill, TreeKind};

/// A tree holding about half of `[0, key_range)`.
pub fn prefilled(tree: TreeKind, policy: PolicyKind, key_range: u64) -> Box<dyn Dictionary> {
    let d = tree.build(TreeConfig::new(policy)).expect("default configuration is valid");
    prefill(&*d, key_range, 1).expect("prefill converges");
    d
}
