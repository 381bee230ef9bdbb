//! Checkpoint files for supernets, stand-alone networks and latency
//! predictors.
//!
//! Layout: magic `DWCK`, u32 format version, u64 manifest length (all
//! little-endian), the JSON manifest, then the tensor blob of little-endian
//! f32 values. Every manifest entry names a tensor, its shape and its byte
//! range in the blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_file, write_atomic};
use crate::elastic::CalibratedStats;
use crate::error::{Error, Result};
use crate::latency::LatencyModel;
use crate::network::{Network, NetworkLayout};
use crate::space::{Supernet, SupernetConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DWCK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Supernet,
    Network,
    Predictor,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Supernet => "supernet",
            CheckpointKind::Network => "network",
            CheckpointKind::Predictor => "predictor",
        }
    }
}

/// Provenance stamped into every artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub meta: ArtifactMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<NetworkLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supernet: Option<SupernetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor_shape: Option<[usize; 2]>,
    #[serde(default)]
    pub transformed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated: Option<CalibratedStats>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

fn pack(tensors: impl IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, shape, data) in tensors {
        let offset = blob.len() as u64;
        for v in &data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape,
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    (entries, blob)
}

impl Checkpoint {
    fn new(kind: CheckpointKind, meta: ArtifactMeta, tensors: Vec<(String, Vec<usize>, Vec<f32>)>) -> Self {
        let (entries, blob) = pack(tensors);
        Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind,
                meta,
                layout: None,
                supernet: None,
                predictor_shape: None,
                transformed: false,
                calibrated: None,
                tensors: entries,
            },
            blob,
        }
    }

    pub fn from_network(net: &Network<f32>, meta: ArtifactMeta, calibrated: Option<CalibratedStats>) -> Self {
        let tensors = net
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
            .collect();
        let mut ck = Checkpoint::new(CheckpointKind::Network, meta, tensors);
        let layout = net.layout();
        ck.manifest.transformed = layout.stem_folded;
        ck.manifest.layout = Some(layout);
        ck.manifest.calibrated = calibrated;
        ck
    }

    pub fn from_supernet(net: &Supernet<f32>, meta: ArtifactMeta) -> Self {
        let tensors = net
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
            .collect();
        let mut ck = Checkpoint::new(CheckpointKind::Supernet, meta, tensors);
        ck.manifest.supernet = Some(net.config.clone());
        ck
    }

    /// Predictor parameters are stored as f32; a fitted predictor already
    /// holds f32-representable values, so reloading is exact.
    pub fn from_predictor(model: &LatencyModel, meta: ArtifactMeta) -> Self {
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect()))
            .collect();
        let mut ck = Checkpoint::new(CheckpointKind::Predictor, meta, tensors);
        ck.manifest.predictor_shape = Some([model.layers, model.n_ops]);
        ck.manifest.transformed = false;
        ck
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Format(format!(
                "expected a {} checkpoint, found {}",
                kind.name(),
                self.manifest.kind.name()
            )));
        }
        Ok(())
    }

    fn tensor_data(&self, e: &TensorEntry) -> Result<Vec<f32>> {
        let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
        if end > self.blob.len() || e.length % 4 != 0 {
            return Err(Error::Format(format!(
                "tensor {} spans bytes {start}..{end} outside the {}-byte blob",
                e.name,
                self.blob.len()
            )));
        }
        Ok(self.blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    /// Fills every target tensor from the entry with the same name.
    fn fill<'a, T: crate::tensor::Element + 'a>(
        &self,
        targets: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    ) -> Result<()> {
        let mut used = 0;
        for (name, t) in targets {
            let e = self
                .manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if e.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            let data = self.tensor_data(e)?;
            *t = Tensor::new(&e.shape, data.into_iter().map(|v| T::of(v as f64)).collect())?;
            used += 1;
        }
        if used != self.manifest.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model uses {used}",
                self.manifest.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn to_network(&self) -> Result<Network<f32>> {
        self.expect_kind(CheckpointKind::Network)?;
        let layout = self
            .manifest
            .layout
            .as_ref()
            .ok_or_else(|| Error::Format("network checkpoint lacks a layout".into()))?;
        let mut net = Network::from_layout(layout)?;
        self.fill(net.named_tensors_mut())?;
        Ok(net)
    }

    pub fn to_supernet(&self) -> Result<Supernet<f32>> {
        self.expect_kind(CheckpointKind::Supernet)?;
        let cfg = self
            .manifest
            .supernet
            .as_ref()
            .ok_or_else(|| Error::Format("supernet checkpoint lacks its config".into()))?;
        let mut net = Supernet::build(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.fill(net.named_tensors_mut())?;
        Ok(net)
    }

    pub fn to_predictor(&self) -> Result<LatencyModel> {
        self.expect_kind(CheckpointKind::Predictor)?;
        let [layers, n_ops] = self
            .manifest
            .predictor_shape
            .ok_or_else(|| Error::Format("predictor checkpoint lacks its input shape".into()))?;
        let mut model = LatencyModel::new(layers, n_ops, &mut ChaCha8Rng::seed_from_u64(0));
        self.fill(model.named_tensors_mut())?;
        model.trained = true;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(PREAMBLE + manifest.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let truncated = |expected: usize| Error::Truncated {
            path: path.into(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < PREAMBLE {
            return Err(truncated(PREAMBLE));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint (bad magic)", path.display())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() < PREAMBLE + mlen {
            return Err(truncated(PREAMBLE + mlen));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + mlen])
            .map_err(|e| Error::Format(format!("{}: manifest: {e}", path.display())))?;
        let blob_len = manifest.tensors.iter().map(|e| e.offset + e.length).max().unwrap_or(0) as usize;
        let expected = PREAMBLE + mlen + blob_len;
        if bytes.len() != expected {
            return Err(truncated(expected));
        }
        Ok(Checkpoint {
            manifest,
            blob: bytes[PREAMBLE + mlen..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&read_file(path)?, path)
    }
}
