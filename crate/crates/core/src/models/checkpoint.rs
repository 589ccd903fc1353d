//! JSON checkpoints with every float stored as its 64-bit pattern in hex,
//! so a save/load cycle is bit exact.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// `{:016x}` of `f64::to_bits` for each entry, row-major.
    pub data: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

pub fn encode_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn decode_f64(s: &str) -> Result<f64, String> {
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|e| format!("bad float {s:?}: {e}"))
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, t: &Tensor) -> Self {
        Self { name: name.into(), shape: t.shape().to_vec(), data: t.data().iter().map(|&v| encode_f64(v)).collect() }
    }

    pub fn to_tensor(&self) -> Result<Tensor, String> {
        let data = self.data.iter().map(|s| decode_f64(s)).collect::<Result<Vec<_>, _>>()?;
        Tensor::new(self.shape.clone(), data).map_err(|e| e.to_string())
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let t = Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]).unwrap();
        let ck = Checkpoint { model: "x".into(), arch: serde_json::json!({}), tensors: vec![NamedTensor::new("w", &t)] };
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        let t2 = back.tensors[0].to_tensor().unwrap();
        assert!(t.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
