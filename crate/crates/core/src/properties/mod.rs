//! Trace properties of gated calls, noninterference pair runs, and a
//! generator and attack mutator for differential testing.

mod gen;
mod integrity;
mod mutate;
mod ni;

pub use gen::{
    gen_library, gen_program, DriverCall, FuncKind, GenCallback, GenFunc, GenLibrary, GenParams, GenProgram, Line, Tag,
    DRIVER_REG_BASE, HEAP_READ_BASE, HEAP_SPARE_BASE, HEAP_WRITE_BASE,
};
pub use integrity::{
    check_csr_integrity, check_integrity, check_ra_integrity, return_address_locs, wb_segments, CsrViolation,
    IntegrityReport, RaClause, RaViolation, WbSegment,
};
pub use mutate::{attack_instance, mutate, MutationKind, NotApplicable};
pub use ni::{check_strong_ni, low_equiv_mutate, low_equivalent, Divergence, NiError, NiVerdict};
