//! Image similarity and anomaly-detection metrics.

pub mod detection;
pub mod ssim;

pub use self::detection::{
    auroc, average_precision, evaluate_groups, evaluate_named_groups, roc_curve, write_group_table,
    write_roc, GroupMetrics, LabeledScore, LabeledScores, RocPoint, ALL_GROUP, NORMAL_GROUP,
};
pub use self::ssim::{ssim, ssim_in_region, ssim_map, SsimParams, Weighting};
