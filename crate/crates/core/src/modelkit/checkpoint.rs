//! Named-tensor archives (safetensors, little-endian `f64`) for adapters and
//! full toy models.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::modelkit::adapter::{Adapter, AdapterConfig, LoraLayer};
use crate::modelkit::tokenizer::Tokenizer;
use crate::modelkit::toy::{ToyConfig, ToyModel};

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn to_bytes(t: &Array2<f64>) -> Vec<u8> {
    t.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(v: &TensorView<'_>) -> Result<Array2<f64>> {
    if v.dtype() != Dtype::F64 || v.shape().len() != 2 {
        return Err(ck(format!("expected a 2-D F64 tensor, found {:?} {:?}", v.dtype(), v.shape())));
    }
    let vals: Vec<f64> = v
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((v.shape()[0], v.shape()[1]), vals).map_err(ck)
}

fn write_archive(path: &Path, tensors: Vec<(String, &Array2<f64>)>, meta: HashMap<String, String>) -> Result<()> {
    let bufs: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), to_bytes(t)))
        .collect();
    let views = bufs
        .iter()
        .map(|(n, shape, data)| Ok((n.clone(), TensorView::new(Dtype::F64, shape.clone(), data).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::tensor::serialize(views, &Some(meta)).map_err(ck)?;
    write_atomic(path, &bytes)
}

fn read_meta<'a>(meta: &'a Option<HashMap<String, String>>, key: &str) -> Result<&'a str> {
    meta.as_ref()
        .and_then(|m| m.get(key))
        .map(String::as_str)
        .ok_or_else(|| ck(format!("metadata field {key:?} missing")))
}

/// Writes the adapter factors with a `{rank, alpha, selector,
/// base_fingerprint}` header.
pub fn save_adapter(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let a = model.adapter().ok_or_else(|| Error::Config("no adapter attached".into()))?;
    let mut tensors = Vec::new();
    for l in &a.layers {
        tensors.push((format!("{}.lora_a", l.name), &l.a));
        tensors.push((format!("{}.lora_b", l.name), &l.b));
    }
    let meta = HashMap::from([
        ("rank".to_string(), a.config.rank.to_string()),
        ("alpha".to_string(), serde_json::to_string(&a.config.alpha)?),
        ("selector".to_string(), serde_json::to_string(&a.config.targets)?),
        ("init_seed".to_string(), a.config.init_seed.to_string()),
        ("base_fingerprint".to_string(), a.base_fingerprint.clone()),
    ]);
    write_archive(path.as_ref(), tensors, meta)
}

/// Loads an adapter onto `base`, which must be the model it was trained on.
pub fn load_adapter(base: &ToyModel, path: impl AsRef<Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ck)?;
    let meta = header.metadata();
    let fp = read_meta(meta, "base_fingerprint")?;
    if fp != base.base_fingerprint() {
        return Err(ck(format!(
            "adapter was trained on base {fp}, not {}",
            base.base_fingerprint()
        )));
    }
    let config = AdapterConfig {
        rank: read_meta(meta, "rank")?.parse().map_err(ck)?,
        alpha: serde_json::from_str(read_meta(meta, "alpha")?)?,
        targets: serde_json::from_str(read_meta(meta, "selector")?)?,
        init_seed: read_meta(meta, "init_seed").unwrap_or("0").parse().map_err(ck)?,
    };
    let st = SafeTensors::deserialize(&bytes).map_err(ck)?;
    let mut layers = Vec::new();
    for (i, spec) in base.linears().iter().enumerate() {
        if !config.selects(&spec.name) {
            continue;
        }
        let a = from_view(&st.tensor(&format!("{}.lora_a", spec.name)).map_err(ck)?)?;
        let b = from_view(&st.tensor(&format!("{}.lora_b", spec.name)).map_err(ck)?)?;
        layers.push(LoraLayer { name: spec.name.clone(), linear: i, a, b });
    }
    let mut m = base.base();
    m.set_adapter(Adapter { config, layers, base_fingerprint: fp.to_string() })?;
    Ok(m)
}

/// Writes every base parameter plus the model and tokenizer configuration.
pub fn save_model(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let p = model.params();
    let tensors = p.names.iter().cloned().zip(p.tensors.iter()).collect();
    let meta = HashMap::from([
        ("config".to_string(), serde_json::to_string(model.config())?),
        (
            "tokenizer".to_string(),
            serde_json::to_string(crate::modelkit::ModelInterface::tokenizer(model))?,
        ),
    ]);
    write_archive(path.as_ref(), tensors, meta)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ck)?;
    let config: ToyConfig = serde_json::from_str(read_meta(header.metadata(), "config")?)?;
    let tokenizer: Tokenizer = serde_json::from_str(read_meta(header.metadata(), "tokenizer")?)?;
    let mut model = ToyModel::new(config, tokenizer)?;
    let st = SafeTensors::deserialize(&bytes).map_err(ck)?;
    let params = model.params_mut();
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        let loaded = from_view(&st.tensor(name).map_err(ck)?)?;
        if loaded.dim() != t.dim() {
            return Err(ck(format!("shape mismatch for {name}")));
        }
        *t = loaded;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::ModelInterface;

    fn small() -> ToyModel {
        let cfg = ToyConfig { width: 8, heads: 2, layers: 1, ..ToyConfig::default() };
        ToyModel::new(cfg, Tokenizer::toy()).unwrap()
    }

    #[test]
    fn adapter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = small();
        let mut m = base.attach_adapter(&AdapterConfig::new(2, 4.0, &["layers.*"])).unwrap();
        for l in m.adapter_mut().unwrap().layers.iter_mut() {
            l.b.mapv_inplace(|_| 0.125);
        }
        let p = dir.path().join("a.safetensors");
        save_adapter(&m, &p).unwrap();
        let back = load_adapter(&base, &p).unwrap();
        assert_eq!(back.adapter(), m.adapter());
        assert_eq!(back.fingerprint(), m.fingerprint());

        let other = ToyModel::new(ToyConfig { init_seed: 9, ..base.config().clone() }, Tokenizer::toy()).unwrap();
        assert!(matches!(load_adapter(&other, &p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        let p = dir.path().join("m.safetensors");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.fingerprint(), m.fingerprint());
    }
}
