//! Versioned little-endian checkpoint container.
//!
//! ```text
//! magic "MMDACKPT" | version u32 | config JSON (u64 length + bytes)
//! side u64 | encoder kind (u32 length + UTF-8)
//! six tensor groups: encoder, head, encoder Adam m, v, head Adam m, v
//!   each: count u32, then per tensor: name (u32 length + UTF-8),
//!   rank u32, dims u64 × rank, values f64 × numel
//! encoder Adam steps u64 | head Adam steps u64 | batches done u64
//! validation accuracy: flag u8 + f64 | end marker "CKPTEND!"
//! ```

use std::fs;
use std::path::Path;

use super::adam::Adam;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{AnyEncoder, DeskEncoder, Encoder, LinearEncoder, Model, ParamSet, PrototypicalHead, PROTOTYPES};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMDACKPT";
const END: &[u8; 8] = b"CKPTEND!";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model and optimizer state between two batches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub encoder_opt: Adam,
    pub head_opt: Adam,
    /// Completed training batches; the next batch has this index.
    pub batches_done: u64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        TrainState {
            encoder_opt: Adam::new(cfg.adam, model.encoder.params()),
            head_opt: Adam::new(cfg.adam, model.head.params()),
            model,
            batches_done: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Side length of the images the model was trained on.
    pub side: usize,
    pub state: TrainState,
    /// Validation accuracy measured on this state, if any.
    pub val_acc: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config does not serialize: {e}")))?;
        w.extend_from_slice(&(config.len() as u64).to_le_bytes());
        w.extend_from_slice(&config);
        w.extend_from_slice(&(self.side as u64).to_le_bytes());
        put_str(&mut w, self.state.model.encoder.kind());
        let s = &self.state;
        for group in [
            s.model.encoder.params(),
            s.model.head.params(),
            &s.encoder_opt.first,
            &s.encoder_opt.second,
            &s.head_opt.first,
            &s.head_opt.second,
        ] {
            put_group(&mut w, group);
        }
        for v in [s.encoder_opt.steps, s.head_opt.steps, s.batches_done] {
            w.extend_from_slice(&v.to_le_bytes());
        }
        match self.val_acc {
            Some(a) => {
                w.push(1);
                w.extend_from_slice(&a.to_le_bytes());
            }
            None => {
                w.push(0);
                w.extend_from_slice(&0f64.to_le_bytes());
            }
        }
        w.extend_from_slice(END);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            ));
        }
        let config_len = r.len_u64()?;
        let config: TrainConfig =
            serde_json::from_slice(r.take(config_len)?).map_err(|e| format!("bad config snapshot: {e}"))?;
        let side = r.len_u64()?;
        let kind = r.string()?;
        let mut groups = Vec::with_capacity(6);
        for _ in 0..6 {
            groups.push(r.group()?);
        }
        let encoder_steps = r.u64()?;
        let head_steps = r.u64()?;
        let batches_done = r.u64()?;
        let flag = r.take(1)?[0];
        let acc = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let val_acc = match flag {
            0 => None,
            1 => Some(acc),
            other => return Err(format!("bad validation flag {other}")),
        };
        if r.take(8)? != END {
            return Err("missing end marker".into());
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }

        let mut groups = groups.into_iter();
        let mut next = || groups.next().expect("six groups read");
        let (enc_params, head_params) = (next(), next());
        let model = rebuild_model(&config, side, &kind, enc_params, head_params).map_err(|e| e.to_string())?;
        let (em, ev, hm, hv) = (next(), next(), next(), next());
        for (moments, params) in [
            (&em, model.encoder.params()),
            (&ev, model.encoder.params()),
            (&hm, model.head.params()),
            (&hv, model.head.params()),
        ] {
            params
                .check_compatible(moments)
                .map_err(|e| format!("optimizer state: {e}"))?;
        }
        let encoder_opt = Adam {
            config: config.adam,
            steps: encoder_steps,
            first: em,
            second: ev,
        };
        let head_opt = Adam {
            config: config.adam,
            steps: head_steps,
            first: hm,
            second: hv,
        };
        Ok(Checkpoint {
            config,
            side,
            state: TrainState {
                model,
                encoder_opt,
                head_opt,
                batches_done,
            },
            val_acc,
        })
    }
}

/// Reassembles a model from named tensors.
pub fn rebuild_model(
    config: &TrainConfig,
    side: usize,
    kind: &str,
    encoder: ParamSet,
    head: ParamSet,
) -> Result<Model> {
    let encoder = match kind {
        "desk" => AnyEncoder::Desk(DeskEncoder::from_params(config.desk_config(), encoder)?),
        "linear" => AnyEncoder::Linear(LinearEncoder::from_params(
            config.channels * side * side,
            config.linear_dim,
            encoder,
        )?),
        other => return Err(Error::Checkpoint(format!("unknown encoder kind {other:?}"))),
    };
    let prototypes = head
        .get(PROTOTYPES)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {PROTOTYPES}")))?
        .clone();
    if head.len() != 1 {
        return Err(Error::Checkpoint("unexpected head tensors".into()));
    }
    let head =
        PrototypicalHead::new(prototypes, config.temperature)?.with_normalized_prototypes(config.normalize_prototypes);
    Model::new(encoder, head)
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_group(w: &mut Vec<u8>, group: &ParamSet) {
    w.extend_from_slice(&(group.len() as u32).to_le_bytes());
    for p in group.iter() {
        put_str(w, &p.name);
        let shape = p.value.shape();
        w.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            w.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {} (needed {} more)", self.pos, n));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining input.
    fn len_u64(&mut self) -> std::result::Result<usize, String> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| format!("implausible length {v} at byte {}", self.pos - 8))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }

    fn group(&mut self) -> std::result::Result<ParamSet, String> {
        let count = self.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.saturating_mul(8) <= self.bytes.len() - self.pos)
                .ok_or_else(|| format!("truncated tensor {name}"))?;
            let raw = self.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            set.push(name, Tensor::new(shape, data).map_err(|e| e.to_string())?);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            widths: vec![4, 6],
            ..Default::default()
        };
        let mut state = TrainState::new(config.build_model(8).unwrap(), &config);
        state.encoder_opt.first.data_mut(0)[3] = 0.25;
        state.head_opt.second.data_mut(0)[1] = 1e-9;
        state.encoder_opt.steps = 7;
        state.head_opt.steps = 7;
        state.batches_done = 7;
        Checkpoint {
            config,
            side: 8,
            state,
            val_acc: Some(2.0 / 3.0),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);

        let lin_cfg = TrainConfig {
            encoder: "linear".into(),
            linear_dim: 4,
            ..Default::default()
        };
        let lin = Checkpoint {
            state: TrainState::new(lin_cfg.build_model(3).unwrap(), &lin_cfg),
            config: lin_cfg,
            side: 3,
            val_acc: None,
        };
        assert_eq!(Checkpoint::from_bytes(&lin.to_bytes().unwrap()).unwrap(), lin);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for n in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(Checkpoint::from_bytes(&bytes[..n]).is_err(), "prefix {n}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 2;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().contains("version 2"));
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
