//! Per-sample running averages of past predictions for temporal ensembling.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    z: Vec<f64>,
    updates: u32,
}

/// Running store `Z` keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalStore {
    rate: f64,
    entries: BTreeMap<u64, Entry>,
}

impl TemporalStore {
    /// Registers every id with `Z = 0`; the width is fixed by the first update.
    pub fn new(rate: f64, ids: impl IntoIterator<Item = u64>) -> Self {
        let entries = ids
            .into_iter()
            .map(|id| {
                (
                    id,
                    Entry {
                        z: Vec::new(),
                        updates: 0,
                    },
                )
            })
            .collect();
        Self { rate, entries }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bias-corrected target for `id`, or `None` before its first update.
    pub fn target(&self, id: u64) -> Result<Option<Vec<f64>>> {
        let e = self
            .entries
            .get(&id)
            .ok_or_else(|| Error::Contract(format!("sample id {id} is not in the ensemble store")))?;
        if e.updates == 0 {
            return Ok(None);
        }
        let corr = 1.0 - self.rate.powi(e.updates as i32);
        Ok(Some(e.z.iter().map(|z| z / corr).collect()))
    }

    fn update(&mut self, id: u64, z_epoch: &[f64]) -> Result<()> {
        let rate = self.rate;
        let e = self
            .entries
            .get_mut(&id)
            .ok_or_else(|| Error::Contract(format!("sample id {id} is not in the ensemble store")))?;
        if e.updates == 0 {
            e.z = vec![0.0; z_epoch.len()];
        }
        if e.z.len() != z_epoch.len() {
            return Err(Error::dim("te_target_update", &[e.z.len()], &[z_epoch.len()]));
        }
        for (z, &x) in e.z.iter_mut().zip(z_epoch) {
            *z = rate * *z + (1.0 - rate) * x;
        }
        e.updates += 1;
        Ok(())
    }
}

/// Folds one epoch of predictions into the store and returns the corrected
/// targets in input order. Nothing is modified when any id is unknown.
pub fn te_target_update(store: &mut TemporalStore, z_epoch: &[(u64, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
    if let Some((id, _)) = z_epoch.iter().find(|(id, _)| !store.entries.contains_key(id)) {
        return Err(Error::Contract(format!("sample id {id} is not in the ensemble store")));
    }
    let mut out = Vec::with_capacity(z_epoch.len());
    for (id, z) in z_epoch {
        store.update(*id, z)?;
        out.push(store.target(*id)?.expect("updated entry has a target"));
    }
    Ok(out)
}
