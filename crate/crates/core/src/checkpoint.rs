//! Named-tensor checkpoints and stage-to-stage handoff.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::resample::bilinear_resample_grid;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"IMHD-CKPT";
pub const FORMAT_VERSION: u32 = 1;

/// The only tensor whose shape may legitimately change between stages.
pub const RESAMPLABLE: &str = "vit.pos_embed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageTag {
    Init,
    Pt,
    Cpt,
    Dra,
    Ift,
}

impl StageTag {
    fn to_byte(self) -> u8 {
        match self {
            StageTag::Init => 0,
            StageTag::Pt => 1,
            StageTag::Cpt => 2,
            StageTag::Dra => 3,
            StageTag::Ift => 4,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => StageTag::Init,
            1 => StageTag::Pt,
            2 => StageTag::Cpt,
            3 => StageTag::Dra,
            4 => StageTag::Ift,
            _ => return Err(Error::Format(format!("unknown stage tag {b}"))),
        })
    }
}

/// In-memory image of a checkpoint file. Values are held exactly as
/// stored (f32 widened to f64).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub stage: StageTag,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, seed: u64, stage: StageTag) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.map(|v| f64::from(v as f32))))
            .collect();
        Self { seed, stage, tensors }
    }

    pub fn from_model(model: &Model, stage: StageTag) -> Self {
        Self::from_store(&model.store, model.seed, stage)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(self.stage.to_byte());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic: not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let stage = StageTag::from_byte(r.take(1)?[0])?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(Error::Format(format!("tensor names not strictly ascending at {name}")));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            last = Some(name.clone());
            tensors.insert(name, t);
        }
        if !r.0.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after last tensor", r.0.len())));
        }
        Ok(Self { seed, stage, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// One tensor whose stored shape differed from the model's and was resampled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reshape {
    pub name: String,
    pub from: Vec<usize>,
    pub to: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HandoffReport {
    pub reshaped: Vec<Reshape>,
}

/// Copies every checkpoint tensor into `store`. All names must match
/// exactly; only `vit.pos_embed` may differ in grid size, in which case it
/// is bilinearly resampled. Nothing is written unless every tensor checks.
pub fn apply_checkpoint(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<HandoffReport> {
    for (_, p) in store.iter() {
        if !ckpt.tensors.contains_key(&p.name) {
            return Err(Error::Handoff(format!("checkpoint is missing tensor {}", p.name)));
        }
    }
    let mut staged = Vec::with_capacity(ckpt.tensors.len());
    let mut report = HandoffReport::default();
    for (name, t) in &ckpt.tensors {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Handoff(format!("checkpoint tensor {name} has no counterpart in the model")))?;
        let want = store.value(id).shape().to_vec();
        if t.shape() == want.as_slice() {
            staged.push((id, t.clone()));
            continue;
        }
        let resamplable = name == RESAMPLABLE && t.rank() == 3 && want.len() == 3 && t.shape()[2] == want[2];
        if !resamplable {
            return Err(Error::Handoff(format!("tensor {name} has shape {:?}, model expects {want:?}", t.shape())));
        }
        staged.push((id, bilinear_resample_grid(t, want[0], want[1])?));
        report.reshaped.push(Reshape { name: name.clone(), from: t.shape().to_vec(), to: want });
    }
    for (id, t) in staged {
        store.replace_value(id, t);
    }
    Ok(report)
}

/// Builds a model for `config` and fills it from the checkpoint at `path`.
pub fn load_model(path: &Path, config: &ModelConfig) -> Result<(Model, HandoffReport, StageTag)> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Model::new(config.clone(), ckpt.seed)?;
    let report = apply_checkpoint(&mut model.store, &ckpt)?;
    Ok((model, report, ckpt.stage))
}

pub fn save_model(model: &Model, stage: StageTag, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, stage).save(path)
}
