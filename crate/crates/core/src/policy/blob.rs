//! Versioned parameter blob.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VRPB"
//! 4       4     format version (u32 LE, currently 1)
//! 8       4     model kind (0 = chunked, 1 = single-step baseline)
//! 12      44    11 × u32 LE: obs_dim, width, enc_layers, dec_layers, heads,
//!               horizon, latent_dim, num_buttons, ffn_hidden, obs_token_dim,
//!               history
//! 56      8     init seed (u64 LE)
//! 64      8     parameter count N (u64 LE)
//! 72      4N    parameters, f32 LE, in layout enumeration order
//! 72+4N   4     CRC-32 of all preceding bytes
//! ```

use super::{ActPolicy, BaselinePolicy, ChunkModel, PolicyConfig, PolicyError};
use crate::nn::Real;

pub const MAGIC: &[u8; 4] = b"VRPB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 72;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Chunked = 0,
    Baseline = 1,
}

pub fn encode<F: Real>(kind: ModelKind, cfg: &PolicyConfig, params: &[F]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * params.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    for v in [
        cfg.obs_dim,
        cfg.width,
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.heads,
        cfg.horizon,
        cfg.latent_dim,
        cfg.num_buttons,
        cfg.ffn_hidden,
        cfg.obs_token_dim,
        cfg.history,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.to_f() as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBlob {
    pub kind: ModelKind,
    pub config: PolicyConfig,
    pub params: Vec<f32>,
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<DecodedBlob, PolicyError> {
    if bytes.len() < 8 {
        return Err(PolicyError::Corrupt("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(PolicyError::Corrupt("bad magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(PolicyError::VersionMismatch { found: version });
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(PolicyError::Corrupt("truncated header".into()));
    }
    let kind = match u32_at(bytes, 8) {
        0 => ModelKind::Chunked,
        1 => ModelKind::Baseline,
        k => return Err(PolicyError::Corrupt(format!("unknown model kind {k}"))),
    };
    let f: Vec<usize> = (0..11).map(|i| u32_at(bytes, 12 + 4 * i) as usize).collect();
    let config = PolicyConfig {
        obs_dim: f[0],
        width: f[1],
        enc_layers: f[2],
        dec_layers: f[3],
        heads: f[4],
        horizon: f[5],
        latent_dim: f[6],
        num_buttons: f[7],
        ffn_hidden: f[8],
        obs_token_dim: f[9],
        history: f[10],
        seed: u64_at(bytes, 56),
    };
    let count = u64_at(bytes, 64) as usize;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| PolicyError::Corrupt("parameter count overflows".into()))?;
    if bytes.len() != expected {
        return Err(PolicyError::Corrupt(format!(
            "expected {expected} bytes for {count} parameters, found {}",
            bytes.len()
        )));
    }
    let body = &bytes[..expected - 4];
    let stored = u32_at(bytes, expected - 4);
    if crc32fast::hash(body) != stored {
        return Err(PolicyError::Corrupt("checksum mismatch".into()));
    }
    let params = body[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DecodedBlob { kind, config, params })
}

fn expect_kind(d: &DecodedBlob, kind: ModelKind) -> Result<(), PolicyError> {
    if d.kind != kind {
        return Err(PolicyError::Corrupt(format!(
            "blob holds a {:?} model, not {:?}",
            d.kind, kind
        )));
    }
    Ok(())
}

impl<F: Real> ActPolicy<F> {
    pub fn from_blob(bytes: &[u8]) -> Result<Self, PolicyError> {
        let d = decode(bytes)?;
        expect_kind(&d, ModelKind::Chunked)?;
        let mut p = Self::new(d.config)?;
        p.set_params(d.params.iter().map(|&v| F::of(v as f64)).collect())?;
        Ok(p)
    }

    /// Replaces this policy's weights with the blob's; configs must match.
    pub fn load_parameters(&mut self, bytes: &[u8]) -> Result<(), PolicyError> {
        let d = decode(bytes)?;
        expect_kind(&d, ModelKind::Chunked)?;
        if d.config != *self.config() {
            return Err(PolicyError::Corrupt("blob config differs from this policy".into()));
        }
        self.set_params(d.params.iter().map(|&v| F::of(v as f64)).collect())
    }
}

impl<F: Real> BaselinePolicy<F> {
    pub fn from_blob(bytes: &[u8]) -> Result<Self, PolicyError> {
        let d = decode(bytes)?;
        expect_kind(&d, ModelKind::Baseline)?;
        let mut p = Self::new(d.config)?;
        p.set_params(d.params.iter().map(|&v| F::of(v as f64)).collect())?;
        Ok(p)
    }
}
