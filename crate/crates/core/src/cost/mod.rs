//! Parameter counts and forward-pass multiply-accumulate accounting.

mod presets;
mod report;

pub use presets::{reference_presets, reference_schema, Preset, REFERENCE_DOMAINS, REFERENCE_VOCAB};
pub use report::{
    count_params, estimate_flops, estimate_macs, instrumented_macs, table_csv, CostReport, MacBreakdown, ParamGroups,
    TABLE_CSV_HEADER,
};
