//! Single-file checkpoints: named `f32` arrays in a safetensors container
//! plus string metadata (format version, iteration, config, optimizer steps).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const KEY_VERSION: &str = "format_version";
const KEY_ITERATION: &str = "iteration";
const KEY_CONFIG: &str = "config";
const KEY_CONFIG_HASH: &str = "config_sha256";
const KEY_OPTIMIZER_STEPS: &str = "optimizer_steps";

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerSteps {
    generators: u64,
    critic_s: u64,
    critic_r: u64,
}

fn config_hash(json: &str) -> String {
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect())
}

/// Writes every parameter and optimizer moment of `state` to `path`.
///
/// The file is written next to its destination and renamed into place, so a
/// reader never sees a partial checkpoint.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in state.named_parameters() {
        arrays.push((format!("param/{name}"), var.dims().to_vec(), f32_bytes(var.as_tensor())?));
    }
    for (tag, opt) in [("gen", &state.opt_gen), ("f_s", &state.opt_f_s), ("f_r", &state.opt_f_r)] {
        for (name, m, v) in opt.moments() {
            arrays.push((format!("adam/{tag}/m/{name}"), m.dims().to_vec(), f32_bytes(m)?));
            arrays.push((format!("adam/{tag}/v/{name}"), v.dims().to_vec(), f32_bytes(v)?));
        }
    }
    let views = arrays
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|view| (name.clone(), view))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let config_json = serde_json::to_string(&state.config)?;
    let steps = OptimizerSteps {
        generators: state.opt_gen.step_count(),
        critic_s: state.opt_f_s.step_count(),
        critic_r: state.opt_f_r.step_count(),
    };
    let metadata = HashMap::from([
        (KEY_VERSION.to_string(), CHECKPOINT_FORMAT_VERSION.to_string()),
        (KEY_ITERATION.to_string(), state.iteration.to_string()),
        (KEY_CONFIG_HASH.to_string(), config_hash(&config_json)),
        (KEY_CONFIG.to_string(), config_json),
        (KEY_OPTIMIZER_STEPS.to_string(), serde_json::to_string(&steps)?),
    ]);
    let bytes = safetensors::serialize(views, Some(metadata))
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("safetensors.partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Loaded {
    bytes: Vec<u8>,
    config: TrainConfig,
    iteration: u64,
    steps: OptimizerSteps,
}

fn read(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{} is not a readable checkpoint: {e}", path.display())))?;
    let meta = meta
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata", path.display())))?;
    let get = |key: &str| {
        meta.get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks metadata `{key}`", path.display())))
    };
    let version: u32 = get(KEY_VERSION)?
        .parse()
        .map_err(|_| Error::Checkpoint("unparsable format version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let config_json = get(KEY_CONFIG)?;
    if config_hash(&config_json) != get(KEY_CONFIG_HASH)? {
        return Err(Error::Checkpoint("stored config does not match its hash".into()));
    }
    let config: TrainConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    let iteration = get(KEY_ITERATION)?
        .parse()
        .map_err(|_| Error::Checkpoint("unparsable iteration".into()))?;
    let steps = serde_json::from_str(&get(KEY_OPTIMIZER_STEPS)?)
        .map_err(|e| Error::Checkpoint(format!("optimizer steps: {e}")))?;
    Ok(Loaded {
        bytes,
        config,
        iteration,
        steps,
    })
}

fn tensor_from(st: &SafeTensors<'_>, name: &str) -> Result<Tensor> {
    let view = st
        .tensor(name)
        .map_err(|_| Error::Checkpoint(format!("missing array `{name}`")))?;
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("array `{name}` is {:?}, expected F32", view.dtype())));
    }
    let values: Vec<f32> = view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(values, view.shape(), &Device::Cpu)?)
}

/// Restores the state stored at `path` with the architecture it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let loaded = read(path)?;
    let config = loaded.config.clone();
    restore_checked(&loaded, config)
}

/// Restores the state stored at `path` into networks built from `expected`.
///
/// Fails, naming the layer, when a stored array does not fit the expected
/// architecture.
pub fn load_checkpoint_with(path: &Path, expected: &TrainConfig) -> Result<TrainState> {
    let loaded = read(path)?;
    let state = restore_checked(&loaded, expected.clone())?;
    if loaded.config.generator != expected.generator || loaded.config.critic != expected.critic {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint has generator {:?} / critic {:?}, expected {:?} / {:?}",
            loaded.config.generator, loaded.config.critic, expected.generator, expected.critic
        )));
    }
    Ok(state)
}

fn restore_checked(loaded: &Loaded, config: TrainConfig) -> Result<TrainState> {
    let st = SafeTensors::deserialize(&loaded.bytes).map_err(|e| Error::Checkpoint(format!("corrupt container: {e}")))?;
    let mut state = TrainState::new(config)?;
    for (name, var) in state.named_parameters() {
        let stored = tensor_from(&st, &format!("param/{name}"))?;
        if stored.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "layer `{name}` expects shape {:?}, checkpoint holds {:?}",
                var.dims(),
                stored.dims()
            )));
        }
        var.set(&stored)?;
    }
    let expected_params = state.named_parameters().len();
    let stored_params = st.names().iter().filter(|n| n.starts_with("param/")).count();
    if stored_params != expected_params {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {stored_params} parameter arrays, the architecture has {expected_params}"
        )));
    }
    let steps = &loaded.steps;
    for (tag, opt, step) in [
        ("gen", &mut state.opt_gen, steps.generators),
        ("f_s", &mut state.opt_f_s, steps.critic_s),
        ("f_r", &mut state.opt_f_r, steps.critic_r),
    ] {
        opt.restore(step, |name| {
            Ok((
                tensor_from(&st, &format!("adam/{tag}/m/{name}"))?,
                tensor_from(&st, &format!("adam/{tag}/v/{name}"))?,
            ))
        })?;
    }
    state.iteration = loaded.iteration;
    Ok(state)
}

/// The checkpoint with the highest iteration in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let iteration = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_"))
            .and_then(|n| n.strip_suffix(".safetensors"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(k) = iteration {
            if best.as_ref().is_none_or(|(b, _)| k > *b) {
                best = Some((k, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
