//! Checkpoint directories.
//!
//! * `params.bin`: little-endian f64 payload of every stored tensor, back to
//!   back.
//! * `config.txt`: the canonical run config the model was trained with.
//! * `manifest.txt`: a `hiermatch-checkpoint 1` header, `key = value` state
//!   lines, then one line per tensor:
//!   `tensor <kind>/<name> <rows>x<cols> offset=<f64 index> sha256=<hex>`
//!   where `kind` is `param`, `adam_m` or `adam_v`.
//!
//! The optimizer moments and the early-stopping state make resumed training
//! reproduce an uninterrupted run bit for bit. Floats in the state lines are
//! stored as their bit patterns.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::embedder::{Model, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;

const HEADER: &str = "hiermatch-checkpoint 1";

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub run: RunConfig,
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean loss of every completed epoch.
    pub losses: Vec<f64>,
    pub best_loss: f64,
    /// Epochs since `best_loss` last improved.
    pub stale_epochs: usize,
}

impl TrainState {
    pub fn fresh(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model.clone(), run.seed)?;
        let adam = Adam::new(&model.params, run.lr);
        Ok(TrainState {
            run: run.clone(),
            model,
            adam,
            epoch: 0,
            losses: Vec::new(),
            best_loss: f64::INFINITY,
            stale_epochs: 0,
        })
    }
}

fn digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "{HEADER}\nconfig_fingerprint = {}\nepoch = {}\nadam_step = {}\nbest_loss = {:016x}\nstale_epochs = {}\nlosses = {}\n",
        state.run.fingerprint(),
        state.epoch,
        state.adam.step,
        state.best_loss.to_bits(),
        state.stale_epochs,
        if state.losses.is_empty() {
            "-".to_string()
        } else {
            state
                .losses
                .iter()
                .map(|l| format!("{:016x}", l.to_bits()))
                .collect::<Vec<_>>()
                .join(",")
        }
    );
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let store = &state.model.params;
    let groups: [(&str, Vec<&Tensor>); 3] = [
        ("param", store.ids().map(|id| store.value(id)).collect()),
        ("adam_m", state.adam.m.iter().collect()),
        ("adam_v", state.adam.v.iter().collect()),
    ];
    for (kind, tensors) in &groups {
        for (id, t) in store.ids().zip(tensors) {
            manifest.push_str(&format!(
                "tensor {kind}/{} {}x{} offset={offset} sha256={}\n",
                store.name(id),
                t.rows(),
                t.cols(),
                digest(t.data())
            ));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.data().len();
        }
    }
    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, data).map_err(|e| Error::io(&p, e))
    };
    write("params.bin", &payload)?;
    write("config.txt", state.run.to_text().as_bytes())?;
    // The manifest goes last so a torn write never looks complete.
    write("manifest.txt", manifest.as_bytes())
}

pub fn load(dir: &Path) -> Result<TrainState> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", dir.display()));
    let manifest =
        String::from_utf8(read("manifest.txt")?).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let config =
        String::from_utf8(read("config.txt")?).map_err(|_| bad("config is not UTF-8".into()))?;
    let run = RunConfig::parse(&config)?;
    let bytes = read("params.bin")?;
    if bytes.len() % 8 != 0 {
        return Err(bad("params.bin is not a whole number of f64".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad(format!("manifest must start with {HEADER:?}")));
    }
    let mut state_kv: HashMap<String, String> = HashMap::new();
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            let [key, shape, offset, sum] = toks[..] else {
                return Err(bad(format!("bad tensor line {line:?}")));
            };
            let (r, c) = shape
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                .ok_or_else(|| bad(format!("bad shape in {line:?}")))?;
            let off = offset
                .strip_prefix("offset=")
                .and_then(|o| o.parse::<usize>().ok())
                .ok_or_else(|| bad(format!("bad offset in {line:?}")))?;
            let sum = sum
                .strip_prefix("sha256=")
                .ok_or_else(|| bad(format!("bad checksum in {line:?}")))?;
            let end = off
                .checked_add(r * c)
                .filter(|&e| e <= values.len())
                .ok_or_else(|| bad(format!("{key} runs past params.bin")))?;
            let slice = &values[off..end];
            if digest(slice) != sum {
                return Err(bad(format!("checksum mismatch for {key}")));
            }
            tensors.insert(key.to_string(), Tensor::new(r, c, slice.to_vec())?);
        } else if let Some((k, v)) = line.split_once('=') {
            state_kv.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            return Err(bad(format!("unexpected line {line:?}")));
        }
    }

    let get = |k: &str| state_kv.get(k).ok_or_else(|| bad(format!("missing {k}")));
    let count = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(format!("bad {k}")));
    let float = |s: &str| {
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|_| bad(format!("bad float bits {s:?}")))
    };
    if get("config_fingerprint")? != &run.fingerprint() {
        return Err(bad("config.txt does not match the manifest fingerprint".into()));
    }
    let losses = match get("losses")?.as_str() {
        "-" => Vec::new(),
        s => s.split(',').map(float).collect::<Result<Vec<_>>>()?,
    };
    let epoch = count("epoch")? as usize;
    if losses.len() != epoch {
        return Err(bad(format!("{} losses for {epoch} epochs", losses.len())));
    }

    let mut take = |key: String| tensors.remove(&key).ok_or_else(|| bad(format!("missing {key}")));
    let mut params = ParamStore::new();
    for name in PARAM_NAMES {
        params.insert(name, take(format!("param/{name}"))?)?;
    }
    let model = Model::from_store(run.model.clone(), params)?;
    let mut adam = Adam::new(&model.params, run.lr);
    adam.step = count("adam_step")?;
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        let (m, v) = (take(format!("adam_m/{name}"))?, take(format!("adam_v/{name}"))?);
        if m.shape() != adam.m[i].shape() || v.shape() != adam.v[i].shape() {
            return Err(bad(format!("optimizer state of {name} has the wrong shape")));
        }
        adam.m[i] = m;
        adam.v[i] = v;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unknown tensor {extra}")));
    }

    Ok(TrainState {
        run,
        model,
        adam,
        epoch,
        losses,
        best_loss: float(get("best_loss")?)?,
        stale_epochs: count("stale_epochs")? as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::ModelConfig;

    fn run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                d_raw: 3,
                d: 4,
                d_h: 2,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut state = TrainState::fresh(&run()).unwrap();
        state.adam.step = 7;
        state.adam.m[0].data_mut()[1] = -0.125;
        state.adam.v[3].data_mut()[0] = 1e-300;
        state.epoch = 2;
        state.losses = vec![0.5, 0.1 + 0.2];
        state.best_loss = 0.1 + 0.2;
        state.stale_epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, state);
        let first = fs::read(dir.path().join("params.bin")).unwrap();
        save(&back, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("params.bin")).unwrap(), first);
    }

    #[test]
    fn corruption_is_detected() {
        let state = TrainState::fresh(&run()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let p = dir.path().join("params.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn config_must_match_manifest() {
        let state = TrainState::fresh(&run()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let mut other = run();
        other.lr = 0.5;
        fs::write(dir.path().join("config.txt"), other.to_text()).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
