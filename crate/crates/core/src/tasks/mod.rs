//! Synthetic paired-modality tasks, quality metrics and the misalignment
//! harness.

mod datasets;
mod metrics;

pub use datasets::{gen_dataset, gen_pair, misalign, pair_seed, SyntheticTaskSpec, TaskKind};
pub use metrics::{
    evaluate_pairs, mae, mse, psnr, seg_metrics, ssim, MetricReport, SegMetrics, DYNAMIC_RANGE,
    SSIM_WINDOW,
};
