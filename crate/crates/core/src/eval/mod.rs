//! Evaluation: metrics, downstream inpainter adapters, reports and the
//! ablation grid.

pub mod ablation;
pub mod adapters;
pub mod fidelity;
pub mod metrics;
pub mod report;

pub use ablation::{ablation_run, AblationContext, AblationGrid, AblationItem, AblationRow, Variant};
pub use adapters::{adapter_by_name, run_downstream, DiffusionAdapter, IdentityAdapter, InpainterAdapter};
pub use fidelity::{selection_fidelity, FidelityReport, FidelitySpec};
pub use metrics::{clip_at_mask, fid, lpips_metric};
pub use report::{evaluate, EvalSample, MetricNets, MetricReport};
