//! Shared fixtures for the benchmarks.

use rwalk_core::adapted::AdaptedModel;
use rwalk_core::{AdaptedSpec, GroupSpec, SparseMeasure};

pub fn srw(spec: GroupSpec) -> SparseMeasure {
    SparseMeasure::simple_random_walk(spec)
}

/// Simple random walk on `Z * Z` as an adapted model.
pub fn free_group_model() -> AdaptedModel {
    let z = GroupSpec::lattice(1);
    let a = AdaptedSpec::new(0.5, srw(z.clone()), srw(z)).expect("valid adapted measure");
    AdaptedModel::new(a).expect("radius resolves")
}
