//! Byte-accounting ledger with device and host ceilings.
//!
//! Only allocations the engine registers are counted. Quantized weights,
//! adapters and activations live on the device side; optimizer states and
//! everything else on the host side.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{BudgetError, Error, Result};

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    QuantizedWeights,
    Adapters,
    Activations,
    OptimizerStates,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::QuantizedWeights,
        Category::Adapters,
        Category::Activations,
        Category::OptimizerStates,
        Category::Other,
    ];

    pub fn on_device(self) -> bool {
        matches!(
            self,
            Category::QuantizedWeights | Category::Adapters | Category::Activations
        )
    }

    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryBudget {
    pub device_bytes: u64,
    pub host_bytes: u64,
}

impl Default for MemoryBudget {
    fn default() -> Self {
        MemoryBudget {
            device_bytes: 7 * GIB / 2,
            host_bytes: 12 * GIB,
        }
    }
}

impl MemoryBudget {
    pub fn unlimited() -> Self {
        MemoryBudget {
            device_bytes: u64::MAX,
            host_bytes: u64::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLedger {
    budget: MemoryBudget,
    current: [u64; 5],
    high_water: [u64; 5],
    device_high_water: u64,
    host_high_water: u64,
}

impl MemoryLedger {
    pub fn new(budget: MemoryBudget) -> Self {
        MemoryLedger {
            budget,
            current: [0; 5],
            high_water: [0; 5],
            device_high_water: 0,
            host_high_water: 0,
        }
    }

    pub fn budget(&self) -> MemoryBudget {
        self.budget
    }

    pub fn device_total(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| c.on_device())
            .map(|c| self.current[c.idx()])
            .sum()
    }

    pub fn host_total(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| !c.on_device())
            .map(|c| self.current[c.idx()])
            .sum()
    }

    pub fn current(&self, cat: Category) -> u64 {
        self.current[cat.idx()]
    }

    pub fn high_water(&self, cat: Category) -> u64 {
        self.high_water[cat.idx()]
    }

    pub fn device_high_water(&self) -> u64 {
        self.device_high_water
    }

    pub fn host_high_water(&self) -> u64 {
        self.host_high_water
    }

    pub fn breakdown(&self) -> Vec<(Category, u64)> {
        Category::ALL.iter().map(|&c| (c, self.current[c.idx()])).collect()
    }

    /// Registers `bytes` under `cat`, refusing before any state changes if
    /// either side of the ledger would exceed its ceiling.
    pub fn enforce(&mut self, cat: Category, bytes: u64) -> Result<()> {
        let (dev, host) = if cat.on_device() {
            (self.device_total().saturating_add(bytes), self.host_total())
        } else {
            (self.device_total(), self.host_total().saturating_add(bytes))
        };
        if dev > self.budget.device_bytes || host > self.budget.host_bytes {
            return Err(Error::Budget(BudgetError {
                category: cat,
                requested: bytes,
                device_total: self.device_total(),
                device_budget: self.budget.device_bytes,
                host_total: self.host_total(),
                host_budget: self.budget.host_bytes,
                breakdown: self.breakdown(),
            }));
        }
        let i = cat.idx();
        self.current[i] += bytes;
        self.high_water[i] = self.high_water[i].max(self.current[i]);
        self.device_high_water = self.device_high_water.max(dev);
        self.host_high_water = self.host_high_water.max(host);
        Ok(())
    }

    pub fn release(&mut self, cat: Category, bytes: u64) {
        let i = cat.idx();
        debug_assert!(self.current[i] >= bytes, "release without matching allocation");
        self.current[i] = self.current[i].saturating_sub(bytes);
    }

    /// Forgets high-water marks, keeping current totals.
    pub fn reset_high_water(&mut self) {
        self.high_water = self.current;
        self.device_high_water = self.device_total();
        self.host_high_water = self.host_total();
    }
}
