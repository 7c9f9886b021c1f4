//! Rank-based AUROC, average precision, demographic slices, seed statistics
//! and the one-tailed rank-sum test.

mod rank;
mod report;
mod wilcoxon;

pub use rank::{auprc, auroc, midranks};
pub use report::{
    evaluate, label_table, seed_aggregate, subgroup_metrics, subgroup_table, AgeBin, Comparison, LabelAggregate,
    LabelMetric, MeanStd, MetricReport, SeedAggregate, SubgroupAggregate, SubgroupAxis, SubgroupCell,
};
pub use wilcoxon::{wilcoxon_exact, wilcoxon_normal, wilcoxon_one_tailed, Alternative, EXACT_MAX};
