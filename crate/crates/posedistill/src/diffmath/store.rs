//! Named parameter storage with Adam state, freeze flags, and group
//! operations. Parameters live outside any tape; a training step copies
//! them onto a fresh tape, runs backward, and applies `adam_step` with the
//! resulting gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub frozen: bool,
    /// Non-trainable parameters (e.g. running statistics) are stored and
    /// checkpointed but never touched by the optimizer.
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// BTreeMap keeps iteration deterministic, which in turn keeps checkpoint
/// bytes and training trajectories reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a trainable parameter. Re-registering a name is an error.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_inner(name, value, true)
    }

    /// Register a non-trainable buffer (running statistics etc.).
    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_inner(name, value, false)
    }

    fn insert_inner(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if !value.all_finite() {
            return Err(Error::NonFinite("param insert"));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!("parameter {name} already exists")));
        }
        let n = value.len();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
                frozen: false,
                trainable,
            },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    /// Overwrite a parameter or buffer value in place (shape must match).
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                detail: format!("{:?} vs {:?}", e.value.shape(), value.shape()),
            });
        }
        if !value.all_finite() {
            return Err(Error::NonFinite("set_value"));
        }
        e.value = value;
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn entries_mut(&mut self) -> &mut BTreeMap<String, ParamEntry> {
        &mut self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn group_names(&self, prefix: &str) -> Result<Vec<String>> {
        let sel: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.as_str() == prefix || k.starts_with(&format!("{prefix}.")))
            .cloned()
            .collect();
        if sel.is_empty() {
            return Err(Error::Invalid(format!("no parameters under group {prefix}")));
        }
        Ok(sel)
    }

    /// Freeze every parameter whose name is `prefix` or starts with
    /// `prefix.`; frozen parameters are skipped by the optimizer.
    pub fn freeze_group(&mut self, prefix: &str) -> Result<usize> {
        let names = self.group_names(prefix)?;
        for n in &names {
            self.entries.get_mut(n).unwrap().frozen = true;
        }
        Ok(names.len())
    }

    pub fn unfreeze_group(&mut self, prefix: &str) -> Result<usize> {
        let names = self.group_names(prefix)?;
        for n in &names {
            self.entries.get_mut(n).unwrap().frozen = false;
        }
        Ok(names.len())
    }

    /// True if every parameter in the group is frozen.
    pub fn group_frozen(&self, prefix: &str) -> Result<bool> {
        let names = self.group_names(prefix)?;
        Ok(names.iter().all(|n| self.entries[n].frozen))
    }

    /// One Adam update from a gradient map (typically `Tape::backward`
    /// output). Gradients for unknown parameters are an error; parameters
    /// without a gradient entry are left untouched, as are frozen and
    /// non-trainable ones. Returns the number of parameters updated.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<usize> {
        for name in grads.keys() {
            if !self.entries.contains_key(name) {
                return Err(Error::Invalid(format!(
                    "gradient for unknown parameter {name}"
                )));
            }
        }
        let mut updated = 0;
        for (name, entry) in self.entries.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            if entry.frozen || !entry.trainable {
                continue;
            }
            if grad.shape() != entry.value.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!(
                        "{name}: grad {:?} vs param {:?}",
                        grad.shape(),
                        entry.value.shape()
                    ),
                });
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite("adam_step gradient"));
            }
            entry.t += 1;
            let t = entry.t as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let data = entry.value.data_mut();
            for (i, gi) in grad.data().iter().enumerate() {
                entry.m[i] = cfg.beta1 * entry.m[i] + (1.0 - cfg.beta1) * gi;
                entry.v[i] = cfg.beta2 * entry.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            if !entry.value.all_finite() {
                return Err(Error::NonFinite("adam_step update"));
            }
            updated += 1;
        }
        Ok(updated)
    }
}
