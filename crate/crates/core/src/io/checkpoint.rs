use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{create_dir, read_bytes, read_json, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::model::{SdhsiConfig, SdhsiModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::preprocess::PcaModel;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights blob.
    pub offset: u64,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    /// Managed parameters; moments are stored as `optimizer.m.<name>` / `optimizer.v.<name>`.
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SdhsiConfig,
    pub tensors: Vec<TensorEntry>,
    /// Batch-norm layers whose running stats are stored as `<name>.running_mean` / `<name>.running_var`.
    pub buffers: Vec<String>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    #[serde(default)]
    pub pca: Option<PcaModel>,
    /// Free-form run information (seed, split, source scene).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// A model with everything needed to resume training or reproduce inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SdhsiModel<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub pca: Option<PcaModel>,
    pub metadata: serde_json::Value,
}

fn running_names(buffer: &str) -> [String; 2] {
    [format!("{buffer}.running_mean"), format!("{buffer}.running_var")]
}

struct Blob {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl Blob {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        self.entries.push(TensorEntry {
            name,
            shape,
            offset: self.bytes.len() as u64,
            dtype: DTYPE.into(),
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Writes `manifest.json` and `weights.bin` into `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let model = &ckpt.model;
    let mut blob = Blob {
        entries: Vec::new(),
        bytes: Vec::new(),
    };
    for (name, t) in model.params().iter() {
        blob.push(name.to_string(), t.shape().to_vec(), t.data());
    }
    for b in model.buffers() {
        let [m, v] = running_names(&b.name);
        blob.push(m, vec![b.stats.mean.len()], &b.stats.mean);
        blob.push(v, vec![b.stats.var.len()], &b.stats.var);
    }
    let optimizer = ckpt.optimizer.as_ref().map(|opt| {
        let (m, v) = opt.moments();
        let mut names = Vec::with_capacity(opt.params().len());
        for (k, &id) in opt.params().iter().enumerate() {
            let name = model.params().name(id).to_string();
            let shape = model.params().get(id).shape().to_vec();
            blob.push(format!("optimizer.m.{name}"), shape.clone(), &m[k]);
            blob.push(format!("optimizer.v.{name}"), shape, &v[k]);
            names.push(name);
        }
        OptimizerState {
            config: opt.config,
            step: opt.step_count(),
            params: names,
        }
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors: blob.entries,
        buffers: model.buffers().iter().map(|b| b.name.clone()).collect(),
        optimizer,
        pca: ckpt.pca.clone(),
        metadata: ckpt.metadata.clone(),
    };
    create_dir(dir)?;
    write_bytes(&dir.join(WEIGHTS_FILE), &blob.bytes)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Reads and fully validates a checkpoint; nothing is returned on any error.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&manifest_path)?;
    let bad = |field: String, detail: String| Error::format(&manifest_path, format!("field `{field}`: {detail}"));

    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(
            "format_version".into(),
            format!("unsupported version {}, expected {FORMAT_VERSION}", manifest.format_version),
        ));
    }
    manifest
        .config
        .validate()
        .map_err(|e| bad("config".into(), e.to_string()))?;
    if let Some(pca) = &manifest.pca {
        pca.validate().map_err(|e| bad("pca".into(), e.to_string()))?;
        if pca.bands_out != manifest.config.bands {
            return Err(bad(
                "pca.bands_out".into(),
                format!("{} does not match config.bands {}", pca.bands_out, manifest.config.bands),
            ));
        }
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = read_bytes(&weights_path)?;

    // Validate every entry's placement before decoding anything.
    let mut spans: Vec<(u64, u64, usize)> = Vec::with_capacity(manifest.tensors.len());
    let mut by_name: HashMap<&str, usize> = HashMap::new();
    for (i, e) in manifest.tensors.iter().enumerate() {
        if e.dtype != DTYPE {
            return Err(bad(format!("tensors[{i}].dtype"), format!("expected {DTYPE:?}, got {:?}", e.dtype)));
        }
        if by_name.insert(&e.name, i).is_some() {
            return Err(bad(format!("tensors[{i}].name"), format!("duplicate tensor {:?}", e.name)));
        }
        let len = e.shape.iter().product::<usize>() as u64 * 4;
        let end = e.offset.checked_add(len).filter(|&end| end <= bytes.len() as u64);
        let Some(end) = end else {
            return Err(bad(
                format!("tensors[{i}].offset"),
                format!(
                    "tensor {:?} spans bytes {}..{} but {WEIGHTS_FILE} has {} bytes",
                    e.name,
                    e.offset,
                    e.offset.saturating_add(len),
                    bytes.len()
                ),
            ));
        };
        if e.offset % 4 != 0 {
            return Err(bad(format!("tensors[{i}].offset"), format!("offset {} is not 4-byte aligned", e.offset)));
        }
        spans.push((e.offset, end, i));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(bad(
                format!("tensors[{}].offset", w[1].2),
                format!(
                    "tensor {:?} overlaps tensor {:?}",
                    manifest.tensors[w[1].2].name, manifest.tensors[w[0].2].name
                ),
            ));
        }
    }

    let mut used = vec![false; manifest.tensors.len()];
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let &i = by_name
            .get(name)
            .ok_or_else(|| bad("tensors".into(), format!("missing tensor {name:?}")))?;
        let e = &manifest.tensors[i];
        if e.shape != shape {
            return Err(bad(
                format!("tensors[{i}].shape"),
                format!("tensor {name:?} has shape {:?}, config implies {shape:?}", e.shape),
            ));
        }
        used[i] = true;
        let start = e.offset as usize;
        let n: usize = shape.iter().product();
        Ok(bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };

    let mut model = SdhsiModel::<f32>::build(&manifest.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let shape = model.params().get(id).shape().to_vec();
        let data = take(&name, &shape)?;
        model.params_mut().get_mut(id).data_mut().copy_from_slice(&data);
    }
    let expected_buffers: Vec<String> = model.buffers().iter().map(|b| b.name.clone()).collect();
    if manifest.buffers != expected_buffers {
        return Err(bad(
            "buffers".into(),
            format!("expected {expected_buffers:?}, got {:?}", manifest.buffers),
        ));
    }
    for b in model.buffers_mut() {
        let c = b.stats.mean.len();
        let [m, v] = running_names(&b.name);
        b.stats.mean = take(&m, &[c])?;
        b.stats.var = take(&v, &[c])?;
    }

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(state) => {
            let mut ids = Vec::with_capacity(state.params.len());
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for (k, name) in state.params.iter().enumerate() {
                let id = model
                    .params()
                    .id(name)
                    .ok_or_else(|| bad(format!("optimizer.params[{k}]"), format!("unknown parameter {name:?}")))?;
                let shape = model.params().get(id).shape().to_vec();
                m.push(take(&format!("optimizer.m.{name}"), &shape)?);
                v.push(take(&format!("optimizer.v.{name}"), &shape)?);
                ids.push(id);
            }
            Some(AdamW::from_state(model.params(), ids, state.config, m, v, state.step)?)
        }
    };
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(bad(
            format!("tensors[{i}].name"),
            format!("unexpected tensor {:?}", manifest.tensors[i].name),
        ));
    }

    Ok(Checkpoint {
        model,
        optimizer,
        pca: manifest.pca,
        metadata: manifest.metadata,
    })
}
