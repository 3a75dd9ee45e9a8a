//! Training checkpoints: a directory holding `VOL1` blocks for the
//! volumetric parameters and a JSON manifest for everything else.
//!
//! The manifest records a SHA-256 digest of every block file and of its own
//! body, so any edit to either is reported as an integrity error on load.
//! Volumetric blocks are stored as `f32`; scalar parameters, the TinyNet
//! weights and optimizer moments keep full `f64` precision in JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::UnaryModel;
use crate::error::{Error, Result};
use crate::meanfield::CamParams;
use crate::optim::AdamState;
use crate::potentials::{Compatibility, Connectivity, PriorWeights, SmoothWeights};
use crate::train::Stage;
use crate::unary::TinyNetParams;
use crate::vol1::{decode, encode, Volume};
use crate::volume::{Dims, ScalarVolume};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;
const OMEGA_P_FILE: &str = "omega_p.vol1";
const UNARY_FILE: &str = "unary.vol1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
enum UnaryEntry {
    TinyNet { params: Vec<f64> },
    Fixed { block: Block },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Body {
    format: u32,
    k: usize,
    dims: [usize; 3],
    stage: Stage,
    epoch: usize,
    seed: u64,
    mu: Vec<f64>,
    mu_smooth: Option<Vec<f64>>,
    omega_p: Block,
    theta_p: f64,
    omega_s: Vec<f64>,
    theta_s: f64,
    conn_p: Connectivity,
    conn_s: Connectivity,
    iters: usize,
    enable_prior: bool,
    enable_smooth: bool,
    unary: UnaryEntry,
    adam_step: u64,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    body: Body,
    body_sha256: String,
}

/// Everything needed to resume or deploy a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: CamParams,
    pub model: UnaryModel,
    pub optimizer: AdamState,
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_block(dir: &Path, file: &str, volume: &Volume) -> Result<Block> {
    let bytes = encode(volume)?;
    let path = dir.join(file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(Block { file: file.to_string(), sha256: hex_digest(&bytes) })
}

fn read_block(dir: &Path, block: &Block) -> Result<Volume> {
    if block.file.contains(['/', '\\']) {
        return Err(Error::CheckpointIntegrity(format!("block path {:?} leaves the checkpoint", block.file)));
    }
    let path = dir.join(&block.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let found = hex_digest(&bytes);
    if found != block.sha256 {
        return Err(Error::CheckpointIntegrity(format!("{} digest {found} does not match {}", block.file, block.sha256)));
    }
    decode(&bytes)
}

fn body_digest(body: &Body) -> Result<String> {
    let text = serde_json::to_string(body).map_err(|e| Error::Json { path: MANIFEST.into(), source: e })?;
    Ok(hex_digest(text.as_bytes()))
}

impl Checkpoint {
    /// Writes the checkpoint into `dir`, creating it if needed. Returns the
    /// manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = &self.params;
        let dims = p.prior.omega_p.dims();
        let omega_p = write_block(dir, OMEGA_P_FILE, &Volume::Scalar(p.prior.omega_p.clone()))?;
        let unary = match &self.model {
            UnaryModel::TinyNet(t) => UnaryEntry::TinyNet { params: t.flat().to_vec() },
            UnaryModel::Fixed(u) => UnaryEntry::Fixed { block: write_block(dir, UNARY_FILE, &Volume::Prob(u.clone()))? },
        };
        let body = Body {
            format: FORMAT,
            k: p.k(),
            dims: dims.as_array(),
            stage: self.stage,
            epoch: self.epoch,
            seed: self.seed,
            mu: p.mu.values().to_vec(),
            mu_smooth: p.mu_smooth.as_ref().map(|m| m.values().to_vec()),
            omega_p,
            theta_p: p.prior.theta_p,
            omega_s: p.smooth.omega_s.clone(),
            theta_s: p.smooth.theta_s,
            conn_p: p.conn_p,
            conn_s: p.conn_s,
            iters: p.iters,
            enable_prior: p.enable_prior,
            enable_smooth: p.enable_smooth,
            unary,
            adam_step: self.optimizer.step,
            adam_m: self.optimizer.m.clone(),
            adam_v: self.optimizer.v.clone(),
        };
        let manifest = Manifest { body_sha256: body_digest(&body)?, body };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a checkpoint from its directory or its manifest path.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::CheckpointIntegrity(format!("{}: {e}", manifest_path.display())))?;
        let body = manifest.body;
        if body_digest(&body)? != manifest.body_sha256 {
            return Err(Error::CheckpointIntegrity("manifest body does not match its digest".into()));
        }
        if body.format != FORMAT {
            return Err(Error::CheckpointIntegrity(format!("unsupported checkpoint format {}", body.format)));
        }
        let dims = Dims::new(body.dims[0], body.dims[1], body.dims[2]);
        let omega_p = read_block(&dir, &body.omega_p)?.into_scalar()?;
        if omega_p.dims() != dims {
            return Err(Error::CheckpointIntegrity(format!("omega_p block is {}, manifest says {dims}", omega_p.dims())));
        }
        let model = match body.unary {
            UnaryEntry::TinyNet { params } => UnaryModel::TinyNet(TinyNetParams::from_flat(body.k, params)?),
            UnaryEntry::Fixed { block } => UnaryModel::Fixed(read_block(&dir, &block)?.into_prob()?),
        };
        let params = CamParams {
            mu: Compatibility::new(body.k, body.mu)?,
            mu_smooth: body.mu_smooth.map(|m| Compatibility::new(body.k, m)).transpose()?,
            prior: PriorWeights { omega_p, theta_p: body.theta_p },
            smooth: SmoothWeights { omega_s: body.omega_s, theta_s: body.theta_s },
            conn_p: Connectivity::new(body.conn_p.size, body.conn_p.dilation)?,
            conn_s: Connectivity::new(body.conn_s.size, body.conn_s.dilation)?,
            iters: body.iters,
            enable_prior: body.enable_prior,
            enable_smooth: body.enable_smooth,
        };
        params.validate(body.k, dims)?;
        if model.k() != body.k {
            return Err(Error::CheckpointIntegrity(format!("unary model has {} classes, manifest says {}", model.k(), body.k)));
        }
        let optimizer = AdamState { step: body.adam_step, m: body.adam_m, v: body.adam_v };
        if optimizer.m.len() != optimizer.v.len() {
            return Err(Error::CheckpointIntegrity("optimizer moments differ in length".into()));
        }
        Ok(Checkpoint { params, model, optimizer, stage: body.stage, epoch: body.epoch, seed: body.seed })
    }
}

/// `ω_p` rounded through `f32`, as it will read back from a checkpoint.
pub fn round_trip_omega_p(params: &CamParams) -> Result<CamParams> {
    let mut p = params.clone();
    let v = &p.prior.omega_p;
    p.prior.omega_p = ScalarVolume::new(v.dims(), v.data().iter().map(|&x| x as f32 as f64).collect())?;
    Ok(p)
}
