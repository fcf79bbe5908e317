//! Self-describing policy checkpoints.
//!
//! JSON with a format version, the vocabulary, the layout metadata and the
//! flat parameter list. Field order and float formatting are deterministic,
//! so load followed by save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{init_policy, PolicyKind, PolicyParams, TokenId, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: PolicyKind,
    pub vocab_tokens: Vec<String>,
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub window: usize,
    pub hidden_dim: usize,
    pub seed_lineage: Vec<u64>,
    /// Tabular context keys in flat-layout order; empty for neural.
    pub contexts: Vec<Vec<TokenId>>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(params: &PolicyParams) -> Result<Self> {
        let flat = params.flat();
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::Internal("refusing to checkpoint non-finite parameters".into()));
        }
        let contexts = match params.kind() {
            PolicyKind::Tabular => params.tabular_contexts()?.to_vec(),
            PolicyKind::Neural => Vec::new(),
        };
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            kind: params.kind(),
            vocab_tokens: params.vocab().tokens().to_vec(),
            bos: params.vocab().bos(),
            eos: params.vocab().eos(),
            pad: params.vocab().pad(),
            window: params.window(),
            hidden_dim: params.hidden_dim(),
            seed_lineage: params.seed_lineage().to_vec(),
            contexts,
            params: flat,
        })
    }

    pub fn into_params(self) -> Result<PolicyParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        let vocab = Vocabulary::from_parts(self.vocab_tokens, self.bos, self.eos, self.pad)?;
        let v = vocab.size();
        let seed0 = self.seed_lineage.first().copied().unwrap_or(0);
        let mut params = init_policy(self.kind, vocab, self.window, self.hidden_dim.max(usize::from(self.kind == PolicyKind::Neural)), seed0)?;
        match self.kind {
            PolicyKind::Tabular => {
                if self.params.len() != self.contexts.len() * v {
                    return Err(Error::Config("checkpoint parameter count does not match contexts".into()));
                }
                for (i, ctx) in self.contexts.iter().enumerate() {
                    params.set_tabular_row(ctx, self.params[i * v..(i + 1) * v].to_vec())?;
                }
            }
            PolicyKind::Neural => {
                if self.params.len() != params.param_count() {
                    return Err(Error::Config(format!(
                        "checkpoint has {} parameters, layout expects {}",
                        self.params.len(),
                        params.param_count()
                    )));
                }
                params.set_flat(&self.params)?;
            }
        }
        // restore the recorded lineage verbatim
        let mut lineage = self.seed_lineage;
        if lineage.is_empty() {
            lineage.push(seed0);
        }
        for s in lineage.iter().skip(1) {
            params.push_seed(*s);
        }
        Ok(params)
    }
}

pub fn to_bytes(params: &PolicyParams) -> Result<Vec<u8>> {
    let ckpt = Checkpoint::from_params(params)?;
    let mut bytes = serde_json::to_vec(&ckpt)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn save(params: &PolicyParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    let bytes = fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    ckpt.into_params()
}
