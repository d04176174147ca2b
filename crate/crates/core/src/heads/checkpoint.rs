//! Binary checkpoint: schedule, extractor, heads, optional memory and an opaque
//! run-state blob. Layout:
//!
//! ```text
//! "CISSCKPT" | version:u32 | payload_len:u64 | sha256(payload) | payload
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{Activation, ConvStage, Extractor};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::heads::{HeadParams, SegModel};
use crate::memory::ExemplarMemory;
use crate::schedule::{ClassId, TaskSchedule};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CISSCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: TaskSchedule,
    pub model: SegModel,
    pub memory: Option<ExemplarMemory>,
    /// Caller-defined JSON (the harness stores its progress here).
    pub run_state: String,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&serde_json::to_vec(&self.schedule)?);
        let ex = &self.model.extractor;
        w.u64(ex.seed());
        w.u32(ex.stages().len() as u32);
        for s in ex.stages() {
            w.u32(s.kernel() as u32);
            w.u32(s.in_channels() as u32);
            w.u32(s.out_channels() as u32);
            w.u8(s.activation().code());
            for &v in s.weights().iter().chain(s.bias()) {
                w.f32(v);
            }
        }
        w.u64(self.model.task_index as u64);
        w.u32(self.model.current_classes.len() as u32);
        for c in &self.model.current_classes {
            w.u32(c.0 as u32);
        }
        w.u32(self.model.heads.len() as u32);
        for (c, h) in &self.model.heads {
            w.u32(c.0 as u32);
            w.u8(h.frozen as u8);
            w.u32(h.weight.len() as u32);
            for &v in &h.weight {
                w.f64(v);
            }
            w.f64(h.bias);
        }
        match &self.memory {
            Some(m) => {
                w.u8(1);
                m.encode(&mut w);
            }
            None => w.u8(0),
        }
        w.bytes(self.run_state.as_bytes());

        let payload = w.buf;
        let mut out = Vec::with_capacity(payload.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let len = r.u64()?;
        let digest = r.take(32)?;
        let payload = r.take(usize::try_from(len).map_err(|_| Error::corrupt("payload length overflow"))?)?;
        if r.remaining() != 0 {
            return Err(Error::corrupt("trailing bytes after payload"));
        }
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::corrupt("checksum mismatch"));
        }
        decode_payload(payload)
    }
}

fn small(r: &mut Reader<'_>, what: &str, limit: usize) -> Result<usize> {
    let n = r.u32()? as usize;
    if n > limit {
        return Err(Error::corrupt(format!("{what} = {n} is implausible")));
    }
    Ok(n)
}

fn class_id(r: &mut Reader<'_>) -> Result<ClassId> {
    let v = r.u32()?;
    u16::try_from(v)
        .map(ClassId)
        .map_err(|_| Error::corrupt(format!("class id {v} out of range")))
}

fn decode_payload(payload: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(payload);
    let schedule: TaskSchedule = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::corrupt(format!("schedule: {e}")))?;
    let schedule = TaskSchedule::from_tasks(schedule.tasks().to_vec(), schedule.ordering_seed())
        .map_err(|e| Error::corrupt(format!("schedule: {e}")))?;

    let ex_seed = r.u64()?;
    let n_stages = small(&mut r, "stage count", 1 << 10)?;
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        let kernel = small(&mut r, "kernel", 1 << 8)?;
        let cin = small(&mut r, "input channels", 1 << 12)?;
        let cout = small(&mut r, "output channels", 1 << 12)?;
        let code = r.u8()?;
        let act = Activation::from_code(code)
            .ok_or_else(|| Error::corrupt(format!("unknown activation code {code}")))?;
        let nw = cout * cin * kernel * kernel;
        if nw.saturating_mul(4) > r.remaining() {
            return Err(Error::corrupt("stage weights exceed remaining data"));
        }
        let weights = (0..nw).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let bias = (0..cout).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        stages.push(
            ConvStage::new(kernel, cin, cout, weights, bias, act)
                .map_err(|e| Error::corrupt(format!("stage: {e}")))?,
        );
    }
    let extractor =
        Extractor::from_stages(stages, ex_seed).map_err(|e| Error::corrupt(format!("extractor: {e}")))?;

    let task_index = r.u64()? as usize;
    let n_current = small(&mut r, "current class count", 1 << 16)?;
    let current = (0..n_current)
        .map(|_| class_id(&mut r))
        .collect::<Result<BTreeSet<_>>>()?;
    let n_heads = small(&mut r, "head count", 1 << 16)?;
    let mut heads = BTreeMap::new();
    for _ in 0..n_heads {
        let c = class_id(&mut r)?;
        let frozen = r.u8()? != 0;
        let dim = small(&mut r, "head dim", 1 << 16)?;
        let weight = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = r.f64()?;
        if heads.insert(c, HeadParams { weight, bias, frozen }).is_some() {
            return Err(Error::corrupt(format!("duplicate head {c}")));
        }
    }
    let model = SegModel::from_parts(extractor, heads, task_index, current)
        .map_err(|e| Error::corrupt(format!("model: {e}")))?;
    let memory = match r.u8()? {
        0 => None,
        1 => Some(ExemplarMemory::decode(&mut r)?),
        f => return Err(Error::corrupt(format!("bad memory flag {f}"))),
    };
    let run_state = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::corrupt("run state is not UTF-8"))?;
    if r.remaining() != 0 {
        return Err(Error::corrupt("unparsed bytes in payload"));
    }
    Ok(Checkpoint {
        schedule,
        model,
        memory,
        run_state,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.encode()?;
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}
