//! `PAE1` checkpoint container.
//!
//! Layout: 4-byte magic `PAE1`, a little-endian u64 header length, a UTF-8
//! JSON header (model structure, tensor manifest, effective run config),
//! then the payload: little-endian f64 arrays at ascending, non-overlapping
//! byte offsets relative to the payload start, in manifest order.

use crate::config::RunConfig;
use pae_core::nn::{Activation, LayerSpec, MlpNet};
use pae_core::paired::{Block, PairedModel};
use pae_core::variational::{VariationalAe, VariationalLatentMap, VpaeModel};
use pae_core::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PAE1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerMeta {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetMeta {
    pub layers: Vec<LayerMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum BlockMeta {
    Identity { dim: usize },
    Matrix { rows: usize, cols: usize, trainable: bool },
    Mlp { net: NetMeta },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedMeta {
    pub r_x: usize,
    pub r_y: usize,
    pub e_x: BlockMeta,
    pub d_x: BlockMeta,
    pub e_y: BlockMeta,
    pub d_y: BlockMeta,
    pub map_fwd: BlockMeta,
    pub map_inv: BlockMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelMeta {
    Paired {
        paired: PairedMeta,
    },
    Vpae {
        r_x: usize,
        r_y: usize,
        sigma_x: f64,
        sigma_y: f64,
        enc_x: NetMeta,
        dec_x: NetMeta,
        enc_y: NetMeta,
        dec_y: NetMeta,
    },
    LatentMap {
        paired: PairedMeta,
        enc: NetMeta,
        dec: NetMeta,
        sigma: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelMeta,
    pub manifest: Vec<TensorEntry>,
    pub config: RunConfig,
}

/// Model payloads a checkpoint can carry.
#[derive(Debug, Clone)]
pub enum SavedModel {
    Paired(PairedModel),
    Vpae(VpaeModel),
    LatentMap {
        paired: PairedModel,
        map: VariationalLatentMap,
    },
}

impl SavedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SavedModel::Paired(_) => "paired",
            SavedModel::Vpae(_) => "vpae",
            SavedModel::LatentMap { .. } => "latent-map",
        }
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Relu => "relu",
        Activation::Silu => "silu",
        Activation::Sigmoid => "sigmoid",
    }
}

fn activation_from(name: &str) -> Result<Activation, String> {
    Ok(match name {
        "identity" => Activation::Identity,
        "relu" => Activation::Relu,
        "silu" => Activation::Silu,
        "sigmoid" => Activation::Sigmoid,
        other => return Err(format!("unknown activation {other:?}")),
    })
}

fn net_meta(net: &MlpNet) -> NetMeta {
    NetMeta {
        layers: net
            .specs()
            .iter()
            .map(|s| LayerMeta {
                in_dim: s.in_dim,
                out_dim: s.out_dim,
                activation: activation_name(s.activation).to_string(),
            })
            .collect(),
    }
}

fn block_meta(block: &Block) -> BlockMeta {
    match block {
        Block::Identity { dim } => BlockMeta::Identity { dim: *dim },
        Block::Matrix { weight, trainable } => BlockMeta::Matrix {
            rows: weight.rows(),
            cols: weight.cols(),
            trainable: *trainable,
        },
        Block::Mlp(net) => BlockMeta::Mlp { net: net_meta(net) },
    }
}

fn paired_meta(model: &PairedModel) -> PairedMeta {
    PairedMeta {
        r_x: model.r_x,
        r_y: model.r_y,
        e_x: block_meta(&model.e_x),
        d_x: block_meta(&model.d_x),
        e_y: block_meta(&model.e_y),
        d_y: block_meta(&model.d_y),
        map_fwd: block_meta(&model.map_fwd),
        map_inv: block_meta(&model.map_inv),
    }
}

/// Collects (name, tensor) payload entries in a fixed, documented order.
struct PayloadBuilder {
    entries: Vec<(String, Tensor)>,
}

impl PayloadBuilder {
    fn new() -> PayloadBuilder {
        PayloadBuilder { entries: Vec::new() }
    }

    fn push_net(&mut self, prefix: &str, net: &MlpNet) {
        for l in 0..net.specs().len() {
            self.entries
                .push((format!("{prefix}.w{l}"), net.weight(l).clone()));
            self.entries
                .push((format!("{prefix}.b{l}"), net.bias(l).clone()));
        }
    }

    fn push_block(&mut self, prefix: &str, block: &Block) {
        match block {
            Block::Identity { .. } => {}
            Block::Matrix { weight, .. } => {
                self.entries.push((format!("{prefix}.w"), weight.clone()));
            }
            Block::Mlp(net) => self.push_net(prefix, net),
        }
    }

    fn push_paired(&mut self, model: &PairedModel) {
        self.push_block("e_x", &model.e_x);
        self.push_block("d_x", &model.d_x);
        self.push_block("e_y", &model.e_y);
        self.push_block("d_y", &model.d_y);
        self.push_block("map_fwd", &model.map_fwd);
        self.push_block("map_inv", &model.map_inv);
    }
}

/// Serializes a model plus the effective config into checkpoint bytes.
pub fn to_bytes(model: &SavedModel, config: &RunConfig) -> Vec<u8> {
    let mut builder = PayloadBuilder::new();
    let meta = match model {
        SavedModel::Paired(p) => {
            builder.push_paired(p);
            ModelMeta::Paired {
                paired: paired_meta(p),
            }
        }
        SavedModel::Vpae(v) => {
            builder.push_net("enc_x", &v.ae_x.encoder);
            builder.push_net("dec_x", &v.ae_x.decoder);
            builder.push_net("enc_y", &v.ae_y.encoder);
            builder.push_net("dec_y", &v.ae_y.decoder);
            builder.entries.push(("map_fwd.w".into(), v.map_fwd.clone()));
            builder.entries.push(("map_inv.w".into(), v.map_inv.clone()));
            ModelMeta::Vpae {
                r_x: v.ae_x.latent_dim,
                r_y: v.ae_y.latent_dim,
                sigma_x: v.ae_x.sigma,
                sigma_y: v.ae_y.sigma,
                enc_x: net_meta(&v.ae_x.encoder),
                dec_x: net_meta(&v.ae_x.decoder),
                enc_y: net_meta(&v.ae_y.encoder),
                dec_y: net_meta(&v.ae_y.decoder),
            }
        }
        SavedModel::LatentMap { paired, map } => {
            builder.push_paired(paired);
            builder.push_net("lm_enc", &map.encoder);
            builder.push_net("lm_dec", &map.decoder);
            ModelMeta::LatentMap {
                paired: paired_meta(paired),
                enc: net_meta(&map.encoder),
                dec: net_meta(&map.decoder),
                sigma: map.sigma,
            }
        }
    };

    let mut manifest = Vec::with_capacity(builder.entries.len());
    let mut offset = 0u64;
    for (name, tensor) in &builder.entries {
        manifest.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += (tensor.len() * 8) as u64;
    }
    let header = Header {
        model: meta,
        manifest,
        config: config.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization is infallible");

    let mut out = Vec::with_capacity(12 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in &builder.entries {
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, model: &SavedModel, config: &RunConfig) -> Result<(), String> {
    let bytes = to_bytes(model, config);
    let mut f = std::fs::File::create(path)
        .map_err(|e| format!("cannot create checkpoint {}: {e}", path.display()))?;
    f.write_all(&bytes)
        .map_err(|e| format!("cannot write checkpoint: {e}"))?;
    Ok(())
}

struct PayloadReader<'a> {
    manifest: &'a [TensorEntry],
    payload: &'a [u8],
    next: usize,
}

impl<'a> PayloadReader<'a> {
    fn take(&mut self, want_name: &str) -> Result<Tensor, String> {
        let entry = self
            .manifest
            .get(self.next)
            .ok_or_else(|| format!("manifest exhausted at {want_name}"))?;
        if entry.name != want_name {
            return Err(format!(
                "manifest order mismatch: expected {want_name}, found {}",
                entry.name
            ));
        }
        self.next += 1;
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > self.payload.len() {
            return Err(format!("tensor {want_name} overruns the payload"));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in self.payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Tensor::from_vec(&entry.shape, data).map_err(|e| e.to_string())
    }

    fn take_net(&mut self, prefix: &str, meta: &NetMeta) -> Result<MlpNet, String> {
        let mut specs = Vec::with_capacity(meta.layers.len());
        for l in &meta.layers {
            specs.push(LayerSpec::new(
                l.in_dim,
                l.out_dim,
                activation_from(&l.activation)?,
            ));
        }
        let mut net = MlpNet::new(specs).map_err(|e| e.to_string())?;
        for l in 0..meta.layers.len() {
            let w = self.take(&format!("{prefix}.w{l}"))?;
            let b = self.take(&format!("{prefix}.b{l}"))?;
            net.set_layer(l, w, b).map_err(|e| e.to_string())?;
        }
        Ok(net)
    }

    fn take_block(&mut self, prefix: &str, meta: &BlockMeta) -> Result<Block, String> {
        Ok(match meta {
            BlockMeta::Identity { dim } => Block::Identity { dim: *dim },
            BlockMeta::Matrix { trainable, .. } => {
                Block::matrix(self.take(&format!("{prefix}.w"))?, *trainable)
            }
            BlockMeta::Mlp { net } => Block::Mlp(self.take_net(prefix, net)?),
        })
    }

    fn take_paired(&mut self, meta: &PairedMeta) -> Result<PairedModel, String> {
        PairedModel::new(
            self.take_block("e_x", &meta.e_x)?,
            self.take_block("d_x", &meta.d_x)?,
            self.take_block("e_y", &meta.e_y)?,
            self.take_block("d_y", &meta.d_y)?,
            self.take_block("map_fwd", &meta.map_fwd)?,
            self.take_block("map_inv", &meta.map_inv)?,
        )
        .map_err(|e| e.to_string())
    }
}

/// Parses checkpoint bytes, validating the magic, the manifest (ascending
/// non-overlapping offsets), and the payload length.
pub fn from_bytes(bytes: &[u8]) -> Result<(SavedModel, RunConfig), String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("not a PAE1 checkpoint (bad magic)".into());
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if 12 + header_len > bytes.len() {
        return Err("checkpoint truncated inside the header".into());
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| format!("invalid checkpoint header: {e}"))?;
    let payload = &bytes[12 + header_len..];

    let mut expected_offset = 0u64;
    for entry in &header.manifest {
        if entry.offset != expected_offset {
            return Err(format!(
                "manifest offsets not ascending/contiguous at {}",
                entry.name
            ));
        }
        let count: usize = entry.shape.iter().product();
        expected_offset += (count * 8) as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(format!(
            "payload length {} does not match manifest total {}",
            payload.len(),
            expected_offset
        ));
    }

    let mut reader = PayloadReader {
        manifest: &header.manifest,
        payload,
        next: 0,
    };
    let model = match &header.model {
        ModelMeta::Paired { paired } => SavedModel::Paired(reader.take_paired(paired)?),
        ModelMeta::Vpae {
            sigma_x,
            sigma_y,
            enc_x,
            dec_x,
            enc_y,
            dec_y,
            ..
        } => {
            let ex = reader.take_net("enc_x", enc_x)?;
            let dx = reader.take_net("dec_x", dec_x)?;
            let ey = reader.take_net("enc_y", enc_y)?;
            let dy = reader.take_net("dec_y", dec_y)?;
            let mf = reader.take("map_fwd.w")?;
            let mi = reader.take("map_inv.w")?;
            let ae_x = VariationalAe::new(ex, dx, *sigma_x).map_err(|e| e.to_string())?;
            let ae_y = VariationalAe::new(ey, dy, *sigma_y).map_err(|e| e.to_string())?;
            SavedModel::Vpae(VpaeModel::new(ae_x, ae_y, mf, mi).map_err(|e| e.to_string())?)
        }
        ModelMeta::LatentMap {
            paired,
            enc,
            dec,
            sigma,
        } => {
            let p = reader.take_paired(paired)?;
            let e = reader.take_net("lm_enc", enc)?;
            let d = reader.take_net("lm_dec", dec)?;
            SavedModel::LatentMap {
                paired: p,
                map: VariationalLatentMap::new(e, d, *sigma).map_err(|e| e.to_string())?,
            }
        }
    };
    if reader.next != header.manifest.len() {
        return Err("unconsumed manifest entries".into());
    }
    Ok((model, header.config))
}

pub fn load(path: &Path) -> Result<(SavedModel, RunConfig), String> {
    let bytes = std::fs::read(path)
        .map_err(|e| format!("cannot read checkpoint {}: {e}", path.display()))?;
    from_bytes(&bytes)
}
