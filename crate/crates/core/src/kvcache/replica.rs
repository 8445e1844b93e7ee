use serde::{Deserialize, Serialize};

use super::{CacheEntry, CacheError, KvCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleItem {
    AppendA(CacheEntry),
    AppendB(CacheEntry),
    /// Copies replica `a` onto `b`.
    SyncAB,
    /// A sync that never happens.
    SkipSyncFaulty,
}

/// Two caches kept consistent by an explicit schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaPair {
    pub a: KvCache,
    pub b: KvCache,
    pub sync_schedule: Vec<ScheduleItem>,
}

impl ReplicaPair {
    pub fn new(cache: KvCache) -> Self {
        ReplicaPair {
            a: cache.clone(),
            b: cache,
            sync_schedule: Vec::new(),
        }
    }

    /// Applies one schedule item and records it.
    pub fn step(&mut self, item: ScheduleItem) -> Result<(), CacheError> {
        match &item {
            ScheduleItem::AppendA(e) => self.a.append(e.k.clone(), e.v.clone(), e.position_id)?,
            ScheduleItem::AppendB(e) => self.b.append(e.k.clone(), e.v.clone(), e.position_id)?,
            ScheduleItem::SyncAB => self.b = self.a.clone(),
            ScheduleItem::SkipSyncFaulty => {}
        }
        self.sync_schedule.push(item);
        Ok(())
    }

    /// Entries present in only one replica plus entries that differ.
    pub fn divergence(&self) -> usize {
        let (ea, eb) = (self.a.entries(), self.b.entries());
        let common = ea.len().min(eb.len());
        let differing = ea[..common].iter().zip(&eb[..common]).filter(|(x, y)| x != y).count();
        differing + ea.len().abs_diff(eb.len())
    }
}

/// Functional form of [`ReplicaPair::step`].
pub fn replica_step(pair: &ReplicaPair, item: ScheduleItem) -> Result<ReplicaPair, CacheError> {
    let mut next = pair.clone();
    next.step(item)?;
    Ok(next)
}
