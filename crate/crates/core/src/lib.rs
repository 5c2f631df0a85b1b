//! Concurrent dictionaries (an unbalanced external BST and a relaxed
//! (a,b)-tree) built on LLX/SCX, with a software transactional engine that
//! stands in for hardware transactional memory and several policies for
//! combining transactional and lock-free execution paths.

pub mod checker;
pub mod llxscx;
pub mod policy;
pub mod reclaim;
pub mod trees;
pub mod txn;
pub mod workload;

pub use checker::{check_linearizable, keysum_verify, History, HistoryEvent, Op, Response, Verdict};
pub use policy::{PathBudget, PathStats, PolicyKind};
pub use trees::{AbTree, Bst, Dictionary, TreeConfig, Worker};
pub use txn::TxnConfig;
pub use workload::{TreeKind, WorkloadKind, WorkloadSpec};
