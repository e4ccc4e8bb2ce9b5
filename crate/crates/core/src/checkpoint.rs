//! Binary checkpoint of a complete training state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then the little-endian `f64` arrays listed in the header, in order.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpg::{
    actor_layers, Agent, Critic, Hyperparams, LearningCurve, ReplayBuffer, Trainer, Transition, Variant,
};
use crate::error::{Error, Result};
use crate::neural::{AdamState, LayerSpec};

pub const MAGIC: &[u8; 8] = b"TRKBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub variant: Variant,
    pub actor_layers: Vec<LayerSpec>,
    pub critic: String,
    pub hyperparams: Hyperparams,
    pub episodes: usize,
    pub noise_variance: f64,
    pub config_hash: String,
    pub rng_seed: String,
    pub rng_stream: u64,
    /// Decimal string; the word position is a `u128`.
    pub rng_word_pos: String,
    pub actor_adam: AdamMeta,
    pub critic_adam: AdamMeta,
    pub replay_capacity: usize,
    pub replay_inserted: u64,
    pub arrays: Vec<ArrayMeta>,
}

const TRANSITION_WIDTH: usize = 9;

fn adam_meta(a: &AdamState) -> AdamMeta {
    AdamMeta {
        step: a.step,
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
    }
}

fn critic_tag(c: &Critic) -> &'static str {
    match c {
        Critic::Quadratic(_) => "quadratic",
        Critic::Merge(_) => "merge",
    }
}

/// Serializes the full trainer state.
pub fn encode(trainer: &Trainer, config_hash: &str) -> Result<Vec<u8>> {
    let agent = &trainer.agent;
    let replay: Vec<f64> = trainer
        .buffer
        .transitions()
        .iter()
        .flat_map(|t| {
            [
                t.s[0],
                t.s[1],
                t.s[2],
                t.a,
                t.r,
                t.s2[0],
                t.s2[1],
                t.s2[2],
                if t.done { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    let arrays: Vec<(&str, Vec<f64>)> = vec![
        ("actor", agent.actor.params().to_vec()),
        ("actor_target", agent.actor_target.params().to_vec()),
        ("actor_lr_factors", agent.actor.lr_factors().to_vec()),
        ("critic", agent.critic.params()),
        ("critic_target", agent.critic_target.params()),
        ("actor_adam_m", agent.actor_opt.m.clone()),
        ("actor_adam_v", agent.actor_opt.v.clone()),
        ("critic_adam_m", agent.critic_opt.m.clone()),
        ("critic_adam_v", agent.critic_opt.v.clone()),
        ("replay", replay),
        ("curve", trainer.curve.rewards.clone()),
    ];
    let header = Header {
        variant: agent.variant,
        actor_layers: agent.actor.layers().to_vec(),
        critic: critic_tag(&agent.critic).into(),
        hyperparams: agent.hp.clone(),
        episodes: trainer.episodes_done(),
        noise_variance: agent.noise_variance,
        config_hash: config_hash.into(),
        rng_seed: hex::encode(trainer.rng.get_seed()),
        rng_stream: trainer.rng.get_stream(),
        rng_word_pos: trainer.rng.get_word_pos().to_string(),
        actor_adam: adam_meta(&agent.actor_opt),
        critic_adam: adam_meta(&agent.critic_opt),
        replay_capacity: trainer.buffer.capacity(),
        replay_inserted: trainer.buffer.inserted(),
        arrays: arrays
            .iter()
            .map(|(n, a)| ArrayMeta {
                name: (*n).into(),
                len: a.len(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let total: usize = arrays.iter().map(|(_, a)| a.len() * 8).sum();
    let mut out = Vec::with_capacity(24 + header_json.len() + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, a) in &arrays {
        for v in a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Splits a checkpoint into its header and named arrays.
pub fn read_header(bytes: &[u8]) -> Result<(Header, Vec<Vec<f64>>)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let mut rest = &body[hlen..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for meta in &header.arrays {
        let n = meta.len.checked_mul(8).ok_or_else(|| bad("array length overflow"))?;
        if rest.len() < n {
            return Err(bad(format!("truncated array `{}`", meta.name)));
        }
        let (chunk, tail) = rest.split_at(n);
        arrays.push(
            chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after the last array"));
    }
    Ok((header, arrays))
}

fn restore_adam(meta: &AdamMeta, m: Vec<f64>, v: Vec<f64>) -> AdamState {
    AdamState {
        m,
        v,
        step: meta.step,
        lr: meta.lr,
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
    }
}

/// Rebuilds the trainer; returns it with the stored config hash.
pub fn decode(bytes: &[u8]) -> Result<(Trainer, String)> {
    let (header, arrays) = read_header(bytes)?;
    let expected = [
        "actor",
        "actor_target",
        "actor_lr_factors",
        "critic",
        "critic_target",
        "actor_adam_m",
        "actor_adam_v",
        "critic_adam_m",
        "critic_adam_v",
        "replay",
        "curve",
    ];
    let names: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
    if names != expected {
        return Err(bad(format!("unexpected array list {names:?}")));
    }
    if header.actor_layers != actor_layers(header.variant) {
        return Err(bad("actor layer specification does not match the agent variant"));
    }
    let mut it = arrays.into_iter();
    let mut next = || it.next().expect("array count checked");

    // Build a shell agent with the right shapes, then overwrite every field.
    let mut shell_rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent = Agent::new(header.variant, header.hyperparams.clone(), &mut shell_rng)?;
    if critic_tag(&agent.critic) != header.critic {
        return Err(bad(format!(
            "critic kind `{}` does not match the agent variant",
            header.critic
        )));
    }
    agent
        .actor
        .set_params(&next())
        .map_err(|e| bad(format!("actor: {e}")))?;
    agent
        .actor_target
        .set_params(&next())
        .map_err(|e| bad(format!("actor_target: {e}")))?;
    let factors = next();
    agent
        .actor
        .set_lr_factors(&factors)
        .map_err(|e| bad(format!("actor_lr_factors: {e}")))?;
    agent.actor_target.set_lr_factors(&factors)?;
    agent
        .critic
        .set_params(&next())
        .map_err(|e| bad(format!("critic: {e}")))?;
    agent
        .critic_target
        .set_params(&next())
        .map_err(|e| bad(format!("critic_target: {e}")))?;
    let (am, av, cm, cv) = (next(), next(), next(), next());
    if am.len() != agent.actor.param_count() || av.len() != am.len() {
        return Err(bad("actor optimizer state has the wrong length"));
    }
    if cm.len() != agent.critic.param_count() || cv.len() != cm.len() {
        return Err(bad("critic optimizer state has the wrong length"));
    }
    agent.actor_opt = restore_adam(&header.actor_adam, am, av);
    agent.critic_opt = restore_adam(&header.critic_adam, cm, cv);
    agent.noise_variance = header.noise_variance;

    let replay = next();
    if replay.len() % TRANSITION_WIDTH != 0 {
        return Err(bad("replay array length is not a multiple of the transition width"));
    }
    let transitions = replay
        .chunks_exact(TRANSITION_WIDTH)
        .map(|c| Transition {
            s: [c[0], c[1], c[2]],
            a: c[3],
            r: c[4],
            s2: [c[5], c[6], c[7]],
            done: c[8] != 0.0,
        })
        .collect();
    let buffer = ReplayBuffer::from_parts(header.replay_capacity, transitions, header.replay_inserted)
        .map_err(|e| bad(e.to_string()))?;
    let curve = LearningCurve { rewards: next() };
    if curve.rewards.len() != header.episodes {
        return Err(bad("learning curve length differs from the episode count"));
    }

    let seed: [u8; 32] = hex::decode(&header.rng_seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("rng seed is not 32 hex-encoded bytes"))?;
    let word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| bad("rng word position is not an integer"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(word_pos);

    Ok((
        Trainer {
            agent,
            buffer,
            rng,
            curve,
        },
        header.config_hash,
    ))
}

/// Writes atomically through a sibling temporary file.
pub fn write(path: &Path, trainer: &Trainer, config_hash: &str) -> Result<()> {
    let bytes = encode(trainer, config_hash)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Trainer, String)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
