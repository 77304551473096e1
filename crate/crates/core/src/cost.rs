use std::sync::atomic::{AtomicU64, Ordering};

/// Shared counter of computational cost units: one lower-level solver
/// iteration or one CG iteration each.
#[derive(Debug, Default)]
pub struct CostCounter(AtomicU64);

impl CostCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, units: u64) {
        self.0.fetch_add(units, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}
