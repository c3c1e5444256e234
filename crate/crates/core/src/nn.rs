//! Learnable parameters, their optimizer state, and checkpoint I/O.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256PlusPlus;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor plus its gradient accumulator and SGD
/// momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    velocity: Tensor,
}

/// All parameters of a model, addressed by insertion order and unique
/// name.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

/// Checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TXS1";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let shape = value.shape.clone();
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
            value,
        });
        Ok(ParamId(id))
    }

    /// Convolution weight `[k, c, kh, kw]` initialized uniform in
    /// `±1/sqrt(fan_in)` with a zero bias `[k]`.
    pub fn add_conv(
        &mut self,
        name: &str,
        k: usize,
        c: usize,
        kh: usize,
        kw: usize,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Result<(ParamId, ParamId)> {
        let bound = 1.0 / ((c * kh * kw) as f32).sqrt();
        let w = self.add(
            format!("{name}.weight"),
            Tensor::rand_uniform(&[k, c, kh, kw], -bound, bound, rng),
        )?;
        let b = self.add(format!("{name}.bias"), Tensor::zeros(&[k]))?;
        Ok((w, b))
    }

    /// Fully connected weight `[o, d]` with the same fan-in rule.
    pub fn add_fc(
        &mut self,
        name: &str,
        o: usize,
        d: usize,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Result<(ParamId, ParamId)> {
        let bound = 1.0 / (d as f32).sqrt();
        let w = self.add(format!("{name}.weight"), Tensor::rand_uniform(&[o, d], -bound, bound, rng))?;
        let b = self.add(format!("{name}.bias"), Tensor::zeros(&[o]))?;
        Ok((w, b))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Put the parameter's current value on a tape as a differentiable
    /// leaf. Binding the same parameter twice returns the same node.
    pub fn watch(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.bind_param(id.0, &self.params[id.0].value)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Pull gradients of every parameter bound on `tape` into the
    /// per-parameter accumulators. Call once per backward sweep.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (slot, grad) in tape.param_grads() {
            let dst = &mut self.params[slot].grad.data;
            for (d, &g) in dst.iter_mut().zip(grad.iter()) {
                *d += g;
            }
        }
    }

    /// Classic SGD with momentum and weight decay:
    /// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`. Velocity buffers persist
    /// across calls. A non-finite gradient aborts the whole step before
    /// any parameter moves, naming the offending parameter.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
        for p in &self.params {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {:?}", p.name)));
            }
        }
        for p in &mut self.params {
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i] + weight_decay * p.value.data[i];
                p.velocity.data[i] = momentum * p.velocity.data[i] + g;
                p.value.data[i] -= lr * p.velocity.data[i];
            }
        }
        Ok(())
    }

    // ───────────────────────── checkpoint format ─────────────────────────
    //
    // magic "TXS1", then for each parameter in sorted-name order:
    //   u16 LE name length, UTF-8 name, u8 rank, rank × u32 LE dims,
    //   raw f32 LE values.

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, &idx) in &self.by_name {
            let p = &self.params[idx];
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.value.shape.len() as u8);
            for &d in &p.value.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Parse a checkpoint into `(name, tensor)` pairs.
    pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint", "file shorter than magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", format!("bad magic {magic:?}")));
        }
        let mut entries = Vec::new();
        loop {
            let mut lenb = [0u8; 2];
            match cur.read_exact(&mut lenb) {
                Ok(()) => {}
                Err(_) => break, // clean EOF between records
            }
            let name_len = u16::from_le_bytes(lenb) as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name)
                .map_err(|_| Error::format("checkpoint", "truncated name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?;
            let mut rank = [0u8; 1];
            cur.read_exact(&mut rank)
                .map_err(|_| Error::format("checkpoint", "truncated rank"))?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut d = [0u8; 4];
                cur.read_exact(&mut d)
                    .map_err(|_| Error::format("checkpoint", "truncated dims"))?;
                shape.push(u32::from_le_bytes(d) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f32; numel];
            for v in &mut data {
                let mut b = [0u8; 4];
                cur.read_exact(&mut b)
                    .map_err(|_| Error::format("checkpoint", format!("truncated data for {name:?}")))?;
                *v = f32::from_le_bytes(b);
            }
            entries.push((name, Tensor { shape, data }));
        }
        Ok(entries)
    }

    /// Restore parameter values from checkpoint bytes. Every parameter in
    /// the set must be present with an identical shape, and the checkpoint
    /// must not carry unknown names.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = Self::parse_checkpoint(bytes)?;
        if entries.len() != self.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} parameters in file, model has {}", entries.len(), self.params.len()),
            ));
        }
        for (name, tensor) in entries {
            let idx = *self
                .by_name
                .get(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown parameter {name:?}")))?;
            let p = &mut self.params[idx];
            if p.value.shape != tensor.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "parameter {name:?} has shape {:?} in file but {:?} in model",
                        tensor.shape, p.value.shape
                    ),
                ));
            }
            p.value = tensor;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.load_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(set.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn sgd_zero_lr_keeps_parameters() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        set.params[id.0].grad.data = vec![3.0, 4.0];
        set.sgd_step(0.0, 0.9, 0.0).unwrap();
        assert_eq!(set.get(id).value.data, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_single_step_definition() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        set.params[id.0].grad.data = vec![1.0];
        set.sgd_step(0.1, 0.0, 0.0).unwrap();
        assert!((set.get(id).value.data[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn sgd_two_momentum_steps() {
        // Constant unit gradient, lr 0.1, momentum 0.9:
        // v1 = 1, w = 0.9; v2 = 1.9, w = 0.9 - 0.19 = 0.71.
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        for _ in 0..2 {
            set.params[id.0].grad.data = vec![1.0];
            set.sgd_step(0.1, 0.9, 0.0).unwrap();
        }
        assert!((set.get(id).value.data[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_nonfinite_gradient() {
        let mut set = ParamSet::new();
        let a = set.add("layers.first", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        set.add("layers.second", Tensor::from_vec(&[1], vec![2.0]).unwrap()).unwrap();
        set.params[1].grad.data = vec![f32::NAN];
        let err = set.sgd_step(0.1, 0.9, 0.0).unwrap_err().to_string();
        assert!(err.contains("layers.second"), "{err}");
        // Aborted before any parameter moved.
        assert_eq!(set.get(a).value.data, vec![1.0]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = Xoshiro256PlusPlus::new(9);
        let mut set = ParamSet::new();
        set.add_conv("stem", 4, 3, 3, 3, &mut rng).unwrap();
        set.add_fc("head", 1, 8, &mut rng).unwrap();
        let bytes = set.to_bytes();
        assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);

        let mut restored = ParamSet::new();
        let mut rng2 = Xoshiro256PlusPlus::new(1234);
        restored.add_conv("stem", 4, 3, 3, 3, &mut rng2).unwrap();
        restored.add_fc("head", 1, 8, &mut rng2).unwrap();
        restored.load_bytes(&bytes).unwrap();
        for (a, b) in set.iter().zip(restored.iter()) {
            assert_eq!(a.value.data, b.value.data);
        }
        assert_eq!(bytes, restored.to_bytes());
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let mut rng = Xoshiro256PlusPlus::new(9);
        let mut set = ParamSet::new();
        set.add_fc("head", 1, 8, &mut rng).unwrap();
        let bytes = set.to_bytes();

        let mut other = ParamSet::new();
        other.add_fc("head", 2, 8, &mut rng).unwrap();
        let err = other.load_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("head"), "{err}");
    }

    #[test]
    fn params_sorted_by_name_in_file() {
        let mut set = ParamSet::new();
        set.add("zz", Tensor::zeros(&[1])).unwrap();
        set.add("aa", Tensor::zeros(&[1])).unwrap();
        let bytes = set.to_bytes();
        // First record after the magic should be "aa".
        assert_eq!(&bytes[4..6], &2u16.to_le_bytes());
        assert_eq!(&bytes[6..8], b"aa");
    }
}
