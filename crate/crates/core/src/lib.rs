//! Gated assembly interpreter with pluggable transition strategies, an overlay
//! safety monitor, a static zero-cost verifier and trace-property checks.

pub mod lang;
pub mod machine;
pub mod monitor;
pub mod properties;
pub mod transitions;
pub mod verifier;
