//! Parameter checkpoints as canonical JSON.
//!
//! Layout: `{"format": ..., "model": <config>, "params": {name: {"shape",
//! "values"}}}` with every object's keys sorted. Floats are written in
//! shortest round-trip form, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "anchorplan-ckpt/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: serde_json::Value,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, model: serde_json::Value) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    ParamEntry {
                        shape: p.value.shape().to_vec(),
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            model,
            params,
        }
    }

    /// Overwrites every parameter of `store` from this checkpoint. Names and
    /// shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!(
                "unknown checkpoint format {}",
                self.format
            )));
        }
        if self.params.len() != store.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let entry = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Schema(format!("checkpoint lacks parameter {name}")))?;
            if entry.shape != store.value(id).shape() {
                return Err(Error::Schema(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    entry.shape,
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = Tensor::new(entry.shape.clone(), entry.values.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        // Going through `Value` sorts every object's keys.
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keys_are_sorted() {
        let mut s = ParamStore::new();
        s.add("zeta.w", Tensor::zeros(&[1])).unwrap();
        s.add("alpha.w", Tensor::zeros(&[1])).unwrap();
        let json = Checkpoint::from_store(&s, serde_json::json!({"b": 1, "a": 2}))
            .to_json()
            .unwrap();
        assert!(json.find("alpha.w").unwrap() < json.find("zeta.w").unwrap());
        assert!(json.find("\"format\"").unwrap() < json.find("\"model\"").unwrap());
        assert!(json.find("\"a\"").unwrap() < json.find("\"b\"").unwrap());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        let ck = Checkpoint::from_store(&s, serde_json::Value::Null);
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(ck.load_into(&mut other), Err(Error::Schema(_))));
        let mut missing = ParamStore::new();
        missing.add("v", Tensor::zeros(&[2])).unwrap();
        assert!(ck.load_into(&mut missing).is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..50)) {
            let mut s = ParamStore::new();
            s.add("p", Tensor::new(vec![vals.len()], vals.clone()).unwrap()).unwrap();
            let json = Checkpoint::from_store(&s, serde_json::Value::Null).to_json().unwrap();
            let back = Checkpoint::from_json(&json).unwrap();
            let mut t = ParamStore::new();
            t.add("p", Tensor::zeros(&[vals.len()])).unwrap();
            back.load_into(&mut t).unwrap();
            let got = t.value(t.id("p").unwrap()).data();
            for (a, b) in got.iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
