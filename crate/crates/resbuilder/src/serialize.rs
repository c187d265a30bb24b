//! Architecture documents (JSON) and weight sidecars (indexed little-endian
//! f64 binary). Round trips are lossless: structure compares equal and
//! weights are bit-identical.

use crate::arch::{
    Architecture, BlockId, BnParams, LayerId, LayerParams, ParamStore, PoolStage, ResBlock,
    StemSpec,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct ArchDoc {
    input_shape: [usize; 3],
    n_classes: usize,
    stem: StemDoc,
    stages: Vec<StageDoc>,
    head: HeadDoc,
}

#[derive(Serialize, Deserialize)]
struct StemDoc {
    k: usize,
    c_out: usize,
}

#[derive(Serialize, Deserialize)]
struct StageDoc {
    blocks: Vec<BlockDoc>,
    pool: bool,
}

#[derive(Serialize, Deserialize)]
struct BlockDoc {
    id: BlockId,
    c_mid: usize,
    c_out: usize,
    projection: bool,
    #[serde(default)]
    birth_step: u64,
}

#[derive(Serialize, Deserialize)]
struct HeadDoc {
    units: usize,
}

pub fn arch_to_json(arch: &Architecture) -> String {
    let doc = ArchDoc {
        input_shape: [arch.input_shape.0, arch.input_shape.1, arch.input_shape.2],
        n_classes: arch.n_classes,
        stem: StemDoc { k: arch.stem.kernel, c_out: arch.stem.c_out },
        stages: arch
            .stages
            .iter()
            .map(|s| StageDoc {
                blocks: s
                    .blocks
                    .iter()
                    .map(|b| BlockDoc {
                        id: b.id,
                        c_mid: b.c_mid,
                        c_out: b.c_out,
                        projection: b.projection,
                        birth_step: b.birth_step,
                    })
                    .collect(),
                pool: s.pool,
            })
            .collect(),
        head: HeadDoc { units: arch.n_classes },
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("architecture serializes");
    s.push('\n');
    s
}

pub fn arch_from_json(text: &str, origin: &str) -> Result<Architecture> {
    let doc: ArchDoc = serde_json::from_str(text)
        .map_err(|e| Error::Parse { path: origin.to_string(), detail: e.to_string() })?;
    if doc.head.units != doc.n_classes {
        return Err(Error::Parse {
            path: origin.to_string(),
            detail: format!("head units {} != n_classes {}", doc.head.units, doc.n_classes),
        });
    }
    let next_block_id = doc
        .stages
        .iter()
        .flat_map(|s| &s.blocks)
        .map(|b| b.id + 1)
        .max()
        .unwrap_or(0);
    let arch = Architecture {
        input_shape: (doc.input_shape[0], doc.input_shape[1], doc.input_shape[2]),
        n_classes: doc.n_classes,
        stem: StemSpec { kernel: doc.stem.k, c_out: doc.stem.c_out },
        stages: doc
            .stages
            .into_iter()
            .map(|s| PoolStage {
                blocks: s
                    .blocks
                    .into_iter()
                    .map(|b| ResBlock {
                        id: b.id,
                        c_mid: b.c_mid,
                        c_out: b.c_out,
                        projection: b.projection,
                        birth_step: b.birth_step,
                    })
                    .collect(),
                pool: s.pool,
            })
            .collect(),
        next_block_id,
    };
    arch.validate().map_err(|e| Error::Parse {
        path: origin.to_string(),
        detail: e.to_string(),
    })?;
    Ok(arch)
}

pub fn save_arch(arch: &Architecture, path: &Path) -> Result<()> {
    std::fs::write(path, arch_to_json(arch)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_arch(path: &Path) -> Result<Architecture> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    arch_from_json(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Weight sidecar

const WEIGHTS_MAGIC: &[u8; 4] = b"RBW1";

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    layer: String,
    tensor: String,
    shape: Vec<usize>,
    /// Offset into the data section, counted in f64 values.
    offset: u64,
}

fn store_tensors(store: &ParamStore) -> Vec<(LayerId, &'static str, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (&id, lp) in store.iter() {
        match lp {
            LayerParams::Conv { kernel, bn } => {
                out.push((id, "kernel", kernel.shape().to_vec(), kernel.data().to_vec()));
                out.push((id, "gamma", vec![bn.gamma.len()], bn.gamma.clone()));
                out.push((id, "beta", vec![bn.beta.len()], bn.beta.clone()));
                out.push((id, "running_mean", vec![bn.running_mean.len()], bn.running_mean.clone()));
                out.push((id, "running_var", vec![bn.running_var.len()], bn.running_var.clone()));
            }
            LayerParams::Proj { kernel } => {
                out.push((id, "kernel", kernel.shape().to_vec(), kernel.data().to_vec()));
            }
            LayerParams::Dense { weight, bias } => {
                out.push((id, "weight", weight.shape().to_vec(), weight.data().to_vec()));
                out.push((id, "bias", bias.shape().to_vec(), bias.data().to_vec()));
            }
        }
    }
    out
}

pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    let tensors = store_tensors(store);
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (id, name, shape, data) in &tensors {
        entries.push(WeightEntry {
            layer: id.to_string(),
            tensor: (*name).to_string(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len() as u64;
    }
    let index = serde_json::to_vec(&entries).expect("index serializes");
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(WEIGHTS_MAGIC).map_err(io_err)?;
    w.write_all(&(index.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&index).map_err(io_err)?;
    for (_, _, _, data) in &tensors {
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Loads a sidecar and checks it against the architecture.
pub fn load_weights(path: &Path, arch: &Architecture) -> Result<ParamStore> {
    let path_str = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path_str.clone(), e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Parse { path: path_str.clone(), detail: "truncated magic".into() })?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Parse { path: path_str, detail: "bad weights magic".into() });
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Parse { path: path_str.clone(), detail: "truncated index length".into() })?;
    let mut index = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut index)
        .map_err(|_| Error::Parse { path: path_str.clone(), detail: "truncated index".into() })?;
    let entries: Vec<WeightEntry> = serde_json::from_slice(&index)
        .map_err(|e| Error::Parse { path: path_str.clone(), detail: e.to_string() })?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path_str.clone(), e))?;
    if raw.len() % 8 != 0 {
        return Err(Error::Parse { path: path_str, detail: "data section not f64-aligned".into() });
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();

    let mut tensors: std::collections::BTreeMap<(LayerId, String), Tensor> = Default::default();
    for e in &entries {
        let id = LayerId::parse(&e.layer)
            .map_err(|err| Error::Parse { path: path_str.clone(), detail: err.to_string() })?;
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        if start + n > values.len() {
            return Err(Error::Parse {
                path: path_str.clone(),
                detail: format!("tensor {}/{} overruns data section", e.layer, e.tensor),
            });
        }
        let t = Tensor::from_vec(&e.shape, values[start..start + n].to_vec())?;
        tensors.insert((id, e.tensor.clone()), t);
    }

    let mut store = ParamStore::new();
    let take = |tensors: &mut std::collections::BTreeMap<(LayerId, String), Tensor>,
                id: LayerId,
                name: &str|
     -> Result<Tensor> {
        tensors.remove(&(id, name.to_string())).ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            detail: format!("missing tensor {id}/{name}"),
        })
    };
    let conv_ids: Vec<LayerId> = std::iter::once(LayerId::Stem)
        .chain(arch.iter_blocks().flat_map(|(_, _, b)| [LayerId::Conv1(b.id), LayerId::Conv2(b.id)]))
        .collect();
    for id in conv_ids {
        let kernel = take(&mut tensors, id, "kernel")?;
        let bn = BnParams {
            gamma: take(&mut tensors, id, "gamma")?.into_data(),
            beta: take(&mut tensors, id, "beta")?.into_data(),
            running_mean: take(&mut tensors, id, "running_mean")?.into_data(),
            running_var: take(&mut tensors, id, "running_var")?.into_data(),
        };
        store.insert(id, LayerParams::Conv { kernel, bn });
    }
    for (_, _, b) in arch.iter_blocks() {
        if b.projection {
            let kernel = take(&mut tensors, LayerId::Proj(b.id), "kernel")?;
            store.insert(LayerId::Proj(b.id), LayerParams::Proj { kernel });
        }
    }
    store.insert(
        LayerId::Head,
        LayerParams::Dense {
            weight: take(&mut tensors, LayerId::Head, "weight")?,
            bias: take(&mut tensors, LayerId::Head, "bias")?,
        },
    );
    store.validate_against(arch)?;
    Ok(store)
}
