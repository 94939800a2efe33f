//! Weights container: `<name>.bin` holds every tensor as little-endian
//! scalars in traversal order; `<name>.json` describes the model, the
//! normalization statistics and the tensor layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Autoencoder, Emulator, ModelConfig};
use crate::dataset::TrainStats;
use crate::error::{Error, Result};
use crate::nn::params::checksum;
use crate::nn::Params;
use crate::rng::rng_from;
use crate::scalar::Scalar;

const FORMAT: &str = "pyroemu-weights";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsDescriptor {
    pub format: String,
    pub version: u32,
    /// `"autoencoder"` or `"emulator"`.
    pub kind: String,
    pub dtype: String,
    pub model_config: ModelConfig,
    pub stats: Option<TrainStats>,
    pub ae_frozen: bool,
    pub ae_checksum: String,
    pub data_file: String,
    pub data_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn collect<T: Scalar>(parts: &[(&str, &dyn Params<T>)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut tensors = Vec::new();
    let mut bytes = Vec::new();
    for (prefix, p) in parts {
        p.visit(prefix, &mut |name, s| {
            tensors.push(TensorEntry { name, len: s.len() });
            for v in s {
                bytes.extend_from_slice(&v.to_le_bytes_vec());
            }
        });
    }
    (tensors, bytes)
}

fn write(dir: &Path, name: &str, mut desc: WeightsDescriptor, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(format!("{name}.bin"));
    desc.data_file = format!("{name}.bin");
    desc.data_sha256 = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{name}.json"));
    fs::write(&json, serde_json::to_string_pretty(&desc)?).map_err(|e| Error::io(&json, e))
}

fn read(dir: &Path, name: &str, kind: &str, hint: &str) -> Result<(WeightsDescriptor, Vec<f64>)> {
    let json = dir.join(format!("{name}.json"));
    if !json.exists() {
        return Err(Error::Missing { path: json, hint: hint.into() });
    }
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let desc: WeightsDescriptor = serde_json::from_str(&text)?;
    if desc.format != FORMAT || desc.version != VERSION || desc.kind != kind {
        return Err(Error::Format { path: json, msg: format!("expected {FORMAT} v{VERSION} {kind}, found {} v{} {}", desc.format, desc.version, desc.kind) });
    }
    let bin = dir.join(&desc.data_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    if digest != desc.data_sha256 {
        return Err(Error::Format { path: bin, msg: "weights digest mismatch".into() });
    }
    let values = match desc.dtype.as_str() {
        "f32le" => bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect(),
        "f64le" => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
        other => return Err(Error::Format { path: bin, msg: format!("unsupported dtype {other}") }),
    };
    Ok((desc, values))
}

fn assign<T: Scalar>(parts: &mut [(&str, &mut dyn Params<T>)], desc: &WeightsDescriptor, values: &[f64], path: &Path) -> Result<()> {
    let mut idx = 0;
    let mut off = 0;
    let mut err = None;
    for (prefix, p) in parts.iter_mut() {
        p.visit_mut(prefix, &mut |name, s| {
            if err.is_some() {
                return;
            }
            match desc.tensors.get(idx) {
                Some(t) if t.name == name && t.len == s.len() && off + t.len <= values.len() => {
                    for (d, v) in s.iter_mut().zip(&values[off..off + t.len]) {
                        *d = T::of(*v);
                    }
                    off += t.len;
                }
                _ => err = Some(format!("tensor {idx} ({name}, {}) does not match the descriptor", s.len())),
            }
            idx += 1;
        });
    }
    if err.is_none() && (idx != desc.tensors.len() || off != values.len()) {
        err = Some(format!("descriptor lists {} tensors / {} values, model has {idx} / {off}", desc.tensors.len(), values.len()));
    }
    match err {
        Some(msg) => Err(Error::Format { path: path.to_path_buf(), msg }),
        None => Ok(()),
    }
}

pub fn save_autoencoder<T: Scalar>(dir: &Path, name: &str, ae: &Autoencoder<T>, config: &ModelConfig) -> Result<()> {
    let (tensors, bytes) = collect::<T>(&[("ae", ae)]);
    let desc = WeightsDescriptor {
        format: FORMAT.into(),
        version: VERSION,
        kind: "autoencoder".into(),
        dtype: T::DTYPE.into(),
        model_config: config.clone(),
        stats: None,
        ae_frozen: ae.frozen,
        ae_checksum: checksum(ae),
        data_file: String::new(),
        data_sha256: String::new(),
        tensors,
    };
    write(dir, name, desc, &bytes)
}

pub fn load_autoencoder<T: Scalar>(dir: &Path, name: &str) -> Result<(Autoencoder<T>, ModelConfig)> {
    let (desc, values) = read(dir, name, "autoencoder", "run `pyroemu train-ae`")?;
    let mut ae = Autoencoder::new(&mut rng_from(0), desc.model_config.decoder_channels);
    assign::<T>(&mut [("ae", &mut ae)], &desc, &values, &dir.join(&desc.data_file))?;
    ae.frozen = desc.ae_frozen;
    Ok((ae, desc.model_config))
}

pub fn save_emulator<T: Scalar>(dir: &Path, name: &str, emu: &Emulator<T>) -> Result<()> {
    let (tensors, bytes) = collect::<T>(&[("ae", &emu.ae), ("net", &emu.net)]);
    let desc = WeightsDescriptor {
        format: FORMAT.into(),
        version: VERSION,
        kind: "emulator".into(),
        dtype: T::DTYPE.into(),
        model_config: emu.config.clone(),
        stats: Some(emu.stats),
        ae_frozen: emu.ae.frozen,
        ae_checksum: checksum(&emu.ae),
        data_file: String::new(),
        data_sha256: String::new(),
        tensors,
    };
    write(dir, name, desc, &bytes)
}

pub fn load_emulator<T: Scalar>(dir: &Path, name: &str) -> Result<Emulator<T>> {
    let (desc, values) = read(dir, name, "emulator", "run `pyroemu train`")?;
    let stats = desc.stats.ok_or_else(|| Error::Format { path: dir.join(format!("{name}.json")), msg: "emulator descriptor lacks statistics".into() })?;
    let mut rng = rng_from(0);
    let ae = Autoencoder::new(&mut rng, desc.model_config.decoder_channels);
    let mut emu = Emulator::new(&mut rng, desc.model_config.clone(), stats, ae)?;
    {
        let Emulator { ae, net, .. } = &mut emu;
        assign::<T>(&mut [("ae", ae), ("net", net)], &desc, &values, &dir.join(&desc.data_file))?;
    }
    emu.ae.frozen = desc.ae_frozen;
    Ok(emu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::tests::stats;

    #[test]
    fn emulator_round_trip_and_dtype_conversion() {
        let mut rng = rng_from(9);
        let mut ae = Autoencoder::<f64>::new(&mut rng, 8);
        ae.frozen = true;
        let mut emu = Emulator::new(&mut rng, ModelConfig { unet_depth: 2, ..Default::default() }, stats(), ae).unwrap();
        emu.net.unet.out.weight.mapv_inplace(|_| 0.25);
        let dir = tempfile::tempdir().unwrap();
        save_emulator(dir.path(), "m", &emu).unwrap();
        let back: Emulator<f64> = load_emulator(dir.path(), "m").unwrap();
        assert_eq!(back, emu);
        let single: Emulator<f32> = load_emulator(dir.path(), "m").unwrap();
        assert_eq!(single.net.unet.out.weight[[0, 0, 0, 0]], 0.25f32);
        let desc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(desc["model_config"]["unet_depth"], 2);
        assert_eq!(desc["stats"]["wind_scale_px"], 150.0);
        assert!(matches!(load_emulator::<f32>(dir.path(), "other"), Err(Error::Missing { .. })));
    }

    #[test]
    fn autoencoder_round_trip_and_corruption() {
        let ae = Autoencoder::<f32>::new(&mut rng_from(3), 8);
        let dir = tempfile::tempdir().unwrap();
        save_autoencoder(dir.path(), "ae", &ae, &ModelConfig::default()).unwrap();
        assert_eq!(load_autoencoder::<f32>(dir.path(), "ae").unwrap().0, ae);
        let bin = dir.path().join("ae.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_autoencoder::<f32>(dir.path(), "ae"), Err(Error::Format { .. })));
    }
}
