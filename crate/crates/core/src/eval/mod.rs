//! Datasets, metrics and benchmarks.

pub mod ablation;
pub mod bench;
pub mod dataset;
pub mod metrics;

pub use ablation::{run_ablation, AblationReport, VariantResult};
pub use bench::{run_benchmark, MetricReport, MetricRow};
pub use dataset::{load_dataset, DatasetLayout, LoadedDataset, TripletSample};
pub use metrics::{interpolation_error, psnr, ssim};
