use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use crate::error::{invalid, Result};

use super::strategy::{Baseline, FixedKl, Full, ProjectOnly, ReweightOnly, UpdateStrategy};

/// Names of the built-in strategies, in reporting order.
pub const BUILTIN_MODES: [&str; 5] = [
    "baseline",
    "fixed-kl",
    "reweight-only",
    "project-only",
    "full",
];

/// Update strategies keyed by name.
#[derive(Default, Clone)]
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, Arc<dyn UpdateStrategy>>,
}

impl StrategyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        let builtins: [Arc<dyn UpdateStrategy>; 5] = [
            Arc::new(Baseline),
            Arc::new(FixedKl),
            Arc::new(ReweightOnly),
            Arc::new(ProjectOnly),
            Arc::new(Full),
        ];
        for s in builtins {
            reg.register(s).expect("builtin names are unique");
        }
        reg
    }

    /// Fails if a strategy with the same name is already registered.
    pub fn register(&mut self, strategy: Arc<dyn UpdateStrategy>) -> Result<()> {
        let name = strategy.name();
        if self.entries.contains_key(name) {
            return Err(invalid(format!("strategy `{name}` is already registered")));
        }
        self.entries.insert(name, strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn UpdateStrategy>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            invalid(format!(
                "unknown mode `{name}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

pub fn builtin_registry() -> &'static StrategyRegistry {
    static REGISTRY: OnceLock<StrategyRegistry> = OnceLock::new();
    REGISTRY.get_or_init(StrategyRegistry::with_builtins)
}
