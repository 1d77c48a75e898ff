//! Test-time protocols: DiffAug ensembles, covariate shifts, denoised
//! smoothing certificates, OOD scoring and sample-quality metrics.

pub mod certify;
pub mod ensemble;
pub mod metrics;
pub mod ood;
pub mod shift;

pub use certify::{
    certification_csv, certified_accuracy_curve, certified_radius, certify_dds, clopper_pearson_lower, CERTIFY_CSV_HEADER,
    smoothing_time, CertificationResult, CertifyParams,
};
pub use ensemble::{predict_de, predict_de_labels, EnsembleConfig};
pub use metrics::{auroc, midranks, prdc, prdc_with_warnings, spearman, AurocResult, Prdc};
pub use ood::{ood_csv, ood_scores, OodMode};
pub use shift::{
    apply_shift, chance_accuracy, predict_mode, shift_eval, shift_rows_csv, DeContext, EvalMode, ShiftKind,
    ShiftRow, ShiftSpec,
};
