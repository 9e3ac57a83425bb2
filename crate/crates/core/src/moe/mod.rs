//! Routers, top-k selection and the sparse mixture-of-experts layer.

mod gate;
mod layer;
mod trace;

pub use gate::{
    gate_distribution, gate_domain_aware, gate_domain_specialized, gate_standard, top_k_select, GateParams, GateVariant,
};
pub use layer::{balance_penalty, Routing, SmoeLayer};
pub use trace::{GateTrace, Stack, TraceEntry, TRACE_CSV_HEADER};
