//! Parameter storage, gradient maps, optimizers, and checkpoint files.
//!
//! A [`ParamStore`] owns every trainable array of a model, keyed by name in
//! registration order. That order is load-bearing: checkpoints serialize
//! parameters as an ordered list, and reproducibility across runs depends on
//! never iterating parameters in hash order anywhere.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{config_err, data_err, NavError, Result};

/// Schema tag written into every checkpoint file.
pub const CKPT_SCHEMA: &str = "navgen-ckpt/1";

/// Gradients keyed by parameter name, in the order the tape touched them.
pub type GradMap = IndexMap<String, Array>;

/// Sum `from` into `into`, keying by name. Shapes must agree.
pub fn accumulate(into: &mut GradMap, from: &GradMap) -> Result<()> {
    for (name, g) in from {
        match into.get_mut(name) {
            Some(acc) => {
                if acc.shape() != g.shape() {
                    return Err(NavError::Shape {
                        op: "accumulate",
                        lhs: acc.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                for (a, b) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(())
}

/// Multiply every gradient in place (for averaging over a batch).
pub fn scale_grads(grads: &mut GradMap, c: f64) {
    for (_, g) in grads.iter_mut() {
        for x in g.data_mut() {
            *x *= c;
        }
    }
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<()> {
        if self.entries.contains_key(name) {
            return config_err(format!("duplicate parameter name {name:?}"));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .ok_or_else(|| NavError::UnknownId(format!("parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NavError::UnknownId(format!("parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Array::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// One SGD step: `p -= lr * g` for every named gradient. Parameters without
/// a gradient entry are left untouched.
pub fn sgd_step(store: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return config_err(format!("learning rate must be positive, got {lr}"));
    }
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(NavError::Shape {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (pi, gi) in p.data_mut().iter_mut().zip(g.data().iter()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

/// Adam with bias correction. First and second moment buffers are allocated
/// lazily per parameter, so one optimizer instance can drive any store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Array>,
    v: IndexMap<String, Array>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Adam> {
        if lr <= 0.0 || !lr.is_finite() {
            return config_err(format!("learning rate must be positive, got {lr}"));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        })
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(NavError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            for ((pi, gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ============================================================================
// Checkpoints
// ============================================================================

/// One serialized parameter: name, shape, and row-major data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model snapshot. `kind` distinguishes follower from speaker
/// checkpoints; `config` carries the full model/training configuration that
/// produced it, and the hashes let downstream loads verify they are pairing
/// the checkpoint with the same vocabulary it was trained against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_store(
        kind: &str,
        config: serde_json::Value,
        vocab_hash: &str,
        store: &ParamStore,
    ) -> Checkpoint {
        Checkpoint {
            schema: CKPT_SCHEMA.to_string(),
            kind: kind.to_string(),
            config,
            vocab_hash: vocab_hash.to_string(),
            params: store
                .iter()
                .map(|(name, arr)| ParamEntry {
                    name: name.clone(),
                    shape: arr.shape().to_vec(),
                    data: arr.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuild a parameter store, preserving the serialized order.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for entry in &self.params {
            let arr = Array::new(entry.shape.clone(), entry.data.clone()).map_err(|_| {
                NavError::Data(format!(
                    "checkpoint parameter {:?} has shape {:?} but {} values",
                    entry.name,
                    entry.shape,
                    entry.data.len()
                ))
            })?;
            store.register(&entry.name, arr)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| {
            NavError::Data(format!("{}: not a checkpoint file: {e}", path.display()))
        })?;
        if ckpt.schema != CKPT_SCHEMA {
            return data_err(format!(
                "{}: schema {:?} does not match expected {CKPT_SCHEMA:?}",
                path.display(),
                ckpt.schema
            ));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_converges_on_a_quadratic() {
        let mut store = ParamStore::new();
        store.register("x", Array::vector(vec![1.0, -3.0])).unwrap();
        for _ in 0..60 {
            // d/dx (x^2) = 2x
            let g: Vec<f64> = store.get("x").unwrap().data().iter().map(|&x| 2.0 * x).collect();
            let mut grads = GradMap::new();
            grads.insert("x".into(), Array::vector(g));
            sgd_step(&mut store, &grads, 0.1).unwrap();
        }
        for &x in store.get("x").unwrap().data() {
            assert!(x.abs() < 1e-3, "sgd failed to converge: {x}");
        }
    }

    #[test]
    fn adam_first_step_has_bias_corrected_magnitude() {
        let mut store = ParamStore::new();
        store.register("x", Array::vector(vec![0.0])).unwrap();
        let mut opt = Adam::new(0.01).unwrap();
        let mut grads = GradMap::new();
        grads.insert("x".into(), Array::vector(vec![0.3]));
        opt.step(&mut store, &grads).unwrap();
        // After bias correction the first update is lr * g / (|g| + eps).
        let expect = -0.01 * 0.3 / (0.3 + 1e-8);
        let got = store.get("x").unwrap().data()[0];
        assert!((got - expect).abs() < 1e-15, "got {got}, expected {expect}");
    }

    #[test]
    fn params_without_gradients_are_untouched() {
        let mut store = ParamStore::new();
        store.register("a", Array::vector(vec![1.0])).unwrap();
        store.register("b", Array::vector(vec![2.0])).unwrap();
        let mut grads = GradMap::new();
        grads.insert("a".into(), Array::vector(vec![0.5]));
        let mut opt = Adam::new(0.1).unwrap();
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("b").unwrap().data(), &[2.0]);
        assert_ne!(store.get("a").unwrap().data(), &[1.0]);
    }

    #[test]
    fn invalid_learning_rates_are_config_errors() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-1.0).is_err());
        assert!(Adam::new(f64::NAN).is_err());
        let mut store = ParamStore::new();
        store.register("x", Array::vector(vec![1.0])).unwrap();
        assert!(sgd_step(&mut store, &GradMap::new(), 0.0).is_err());
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Array::scalar(1.0)).unwrap();
        assert!(store.register("w", Array::scalar(2.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.register("zeta", Array::vector(vec![1.5, -2.5])).unwrap();
        store
            .register("alpha", Array::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap())
            .unwrap();
        let ckpt = Checkpoint::from_store(
            "follower",
            serde_json::json!({"hidden": 64}),
            "abc123",
            &store,
        );
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.kind, "follower");
        assert_eq!(loaded.vocab_hash, "abc123");
        let restored = loaded.to_store().unwrap();
        let names: Vec<&String> = restored.names().collect();
        assert_eq!(names, vec!["zeta", "alpha"]); // registration order kept
        assert_eq!(restored.get("zeta").unwrap().data(), &[1.5, -2.5]);
    }

    #[test]
    fn checkpoint_schema_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"schema":"navgen-ckpt/999","kind":"x","config":{},"vocab_hash":"","params":[]}"#,
        )
        .unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(NavError::Data(_))));
    }

    #[test]
    fn accumulate_and_scale_average_a_batch() {
        let mut acc = GradMap::new();
        let mut g1 = GradMap::new();
        g1.insert("w".into(), Array::vector(vec![1.0, 2.0]));
        let mut g2 = GradMap::new();
        g2.insert("w".into(), Array::vector(vec![3.0, 4.0]));
        accumulate(&mut acc, &g1).unwrap();
        accumulate(&mut acc, &g2).unwrap();
        scale_grads(&mut acc, 0.5);
        assert_eq!(acc["w"].data(), &[2.0, 3.0]);
    }
}
