//! Single-file checkpoints: parameter and optimizer arrays as f64 safetensors
//! entries, configuration and loop state as JSON under one metadata key.
//!
//! Tensor names are `<branch>.<param>` (`shared.conv1.weight`, or
//! `ground.*`/`aerial.*` without weight sharing), `log_tau`, and the same
//! names prefixed with `optimizer.m.` / `optimizer.v.` for the moment estimates.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::encoders::{DualEncoder, EncoderConfig, EncoderGrads};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::training::{AdamState, StepRecord, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "congeo";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    encoder: EncoderConfig,
    loss: LossConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    step: u64,
    epoch: usize,
    rng: ChaCha8Rng,
    history: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub loss: LossConfig,
    pub train: Option<TrainConfig>,
}

fn to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_bytes(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
}

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn to_bytes_checkpoint(state: &TrainState, loss: &LossConfig, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let names = state.encoder.named_parameters();
    let flat = |g: &EncoderGrads| -> Vec<Vec<f64>> { g.branches.iter().flatten().cloned().collect() };
    let (m, v) = (flat(&state.adam.m), flat(&state.adam.v));
    for (i, (name, p)) in names.iter().enumerate() {
        entries.push((name.clone(), p.shape.clone(), to_bytes(&p.data)));
        entries.push((format!("optimizer.m.{name}"), p.shape.clone(), to_bytes(&m[i])));
        entries.push((format!("optimizer.v.{name}"), p.shape.clone(), to_bytes(&v[i])));
    }
    entries.push(("log_tau".into(), vec![4], to_bytes(&state.log_tau)));
    entries.push(("optimizer.m.log_tau".into(), vec![4], to_bytes(&state.adam.tau_m)));
    entries.push(("optimizer.v.log_tau".into(), vec![4], to_bytes(&state.adam.tau_v)));

    let header = Header {
        format_version: FORMAT_VERSION,
        encoder: state.encoder.config().clone(),
        loss: *loss,
        train: train.cloned(),
        step: state.step,
        epoch: state.epoch,
        rng: state.rng.clone(),
        history: state.history.clone(),
    };
    let meta = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&header)?)]);
    let views = entries
        .iter()
        .map(|(n, s, b)| TensorView::new(Dtype::F64, s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(ck)?;
    safetensors::serialize(views, Some(meta)).map_err(ck)
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState, loss: &LossConfig, train: Option<&TrainConfig>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes_checkpoint(state, loss, train)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn from_bytes_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(ck)?;
    let text = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("missing `{METADATA_KEY}` metadata")))?;
    let version: serde_json::Value = serde_json::from_str(text)?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::Checkpoint(format!("unsupported format version {v} (expected {FORMAT_VERSION})"))),
        None => return Err(Error::Checkpoint("missing format_version".into())),
    }
    let header: Header = serde_json::from_value(version)?;
    let tensors = SafeTensors::deserialize(bytes).map_err(ck)?;
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let t = tensors.tensor(name).map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.dtype() != Dtype::F64 || t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {:?} {:?}, expected F64 {shape:?}",
                t.dtype(),
                t.shape()
            )));
        }
        Ok(from_bytes(t.data()))
    };

    let mut encoder = DualEncoder::init(header.encoder.clone(), 0)?;
    let prefixes = encoder.branch_prefixes();
    let mut m = encoder.zero_grads();
    let mut v = encoder.zero_grads();
    for (bi, branch) in encoder.branches_mut().iter_mut().enumerate() {
        for (pi, p) in branch.params_mut().iter_mut().enumerate() {
            let name = format!("{}.{}", prefixes[bi], p.name);
            p.data = read(&name, &p.shape)?;
            m.branches[bi][pi] = read(&format!("optimizer.m.{name}"), &p.shape)?;
            v.branches[bi][pi] = read(&format!("optimizer.v.{name}"), &p.shape)?;
        }
    }
    let four = |name: &str| -> Result<[f64; 4]> { Ok(read(name, &[4])?.try_into().expect("shape checked")) };
    let state = TrainState {
        encoder,
        log_tau: four("log_tau")?,
        adam: AdamState { m, v, tau_m: four("optimizer.m.log_tau")?, tau_v: four("optimizer.v.log_tau")? },
        step: header.step,
        epoch: header.epoch,
        rng: header.rng,
        history: header.history,
    };
    Ok(Checkpoint { state, loss: header.loss, train: header.train })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, LocationRecord, SyntheticSpec};
    use crate::training::{build_batch, fit, train_step};

    fn setup() -> (Vec<LocationRecord>, EncoderConfig, TrainConfig) {
        let spec = SyntheticSpec { n_locations: 10, n_test: 2, pano_size: [16, 64], aerial_size: 32, ..Default::default() };
        let enc = EncoderConfig { embed_dim: 8, ground_size: [16, 64], aerial_size: 32, ..Default::default() };
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        (generate_synthetic(&spec).unwrap(), enc, cfg)
    }

    #[test]
    fn roundtrip_and_continue_bit_identically() {
        let (recs, enc, cfg) = setup();
        let loss = LossConfig::default();
        let mut state = TrainState::new(enc, &loss, 0).unwrap();
        fit(&mut state, &recs, &loss, &cfg, &mut |_| Ok(())).unwrap();

        let bytes = to_bytes_checkpoint(&state, &loss, Some(&cfg)).unwrap();
        let mut restored = from_bytes_checkpoint(&bytes).unwrap();
        assert_eq!(restored.state, state);
        assert_eq!(restored.train.as_ref(), Some(&cfg));

        let refs: Vec<&LocationRecord> = recs.iter().take(4).collect();
        let step = |s: &mut TrainState| {
            let b = build_batch(&refs, &cfg, false, &mut s.rng).unwrap();
            train_step(s, &b, &loss, &cfg, 10).unwrap()
        };
        assert_eq!(step(&mut state), step(&mut restored.state));
        assert_eq!(restored.state, state);
    }

    #[test]
    fn unshared_branches_use_view_prefixes() {
        let (_, enc, _) = setup();
        let enc = EncoderConfig { share_weights: false, ..enc };
        let state = TrainState::new(enc, &LossConfig::default(), 3).unwrap();
        let bytes = to_bytes_checkpoint(&state, &LossConfig::default(), None).unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        assert!(st.tensor("ground.conv1.weight").is_ok());
        assert!(st.tensor("aerial.head.bias").is_ok());
        assert_eq!(from_bytes_checkpoint(&bytes).unwrap().state, state);
    }

    #[test]
    fn rejects_foreign_or_versionless_files() {
        assert!(from_bytes_checkpoint(b"not a checkpoint").is_err());
        let data = to_bytes(&[1.0, 2.0]);
        let view = TensorView::new(Dtype::F64, vec![2], &data).unwrap();
        let no_meta = safetensors::serialize([("x", view.clone())], None).unwrap();
        assert!(matches!(from_bytes_checkpoint(&no_meta), Err(Error::Checkpoint(_))));
        let meta = HashMap::from([(METADATA_KEY.to_string(), "{\"format_version\": 99}".to_string())]);
        let future = safetensors::serialize([("x", view)], Some(meta)).unwrap();
        let err = from_bytes_checkpoint(&future).unwrap_err().to_string();
        assert!(err.contains("99"), "{err}");
    }

    #[test]
    fn serialization_is_deterministic() {
        let (_, enc, _) = setup();
        let state = TrainState::new(enc, &LossConfig::default(), 1).unwrap();
        let a = to_bytes_checkpoint(&state, &LossConfig::default(), None).unwrap();
        let b = to_bytes_checkpoint(&state, &LossConfig::default(), None).unwrap();
        assert_eq!(a, b);
    }
}
