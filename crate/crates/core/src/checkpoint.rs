//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CGANSEG\0"
//! version    u32
//! hdr_len    u32
//! header     hdr_len bytes of UTF-8 JSON (configs, image size, counters, RNG state)
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes
//!   rank     u32, dims rank × u64
//!   data     prod(dims) × f32
//! sha256     32 bytes over everything above
//! ```
//!
//! Tensor order: generator parameters, discriminator parameters, then the
//! Adam moments `opt.gen.m.*`, `opt.gen.v.*`, `opt.disc.m.*`, `opt.disc.v.*`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{
    init_discriminator_with_std, init_generator_with_std, DiscriminatorConfig, GeneratorConfig, ParamSet,
};
use crate::tensor::Tensor;
use crate::training::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CGANSEG\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// u128 word position as a decimal string.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub image_width: usize,
    pub image_height: usize,
    pub step: u64,
    pub epoch: u64,
    pub gen_opt_steps: u64,
    pub disc_opt_steps: u64,
    rng: RngState,
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
    /// `(width, height)` the networks were trained at.
    pub image_dims: (usize, usize),
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let mut out = state.gen.named();
    out.extend(state.disc.named());
    for (net, opt, names) in [
        ("gen", &state.gen_opt, state.gen.named()),
        ("disc", &state.disc_opt, state.disc.named()),
    ] {
        for (kind, buf) in [("m", &opt.m), ("v", &opt.v)] {
            for ((n, _), t) in names.iter().zip(buf) {
                out.push((format!("opt.{net}.{kind}.{n}"), t));
            }
        }
    }
    out
}

/// Serializes `state` to bytes.
pub fn encode(state: &TrainState, train: &TrainConfig, image_dims: (usize, usize)) -> Result<Vec<u8>> {
    let header = Header {
        generator: state.gen_cfg.clone(),
        discriminator: state.disc_cfg.clone(),
        train: train.clone(),
        image_width: image_dims.0,
        image_height: image_dims.1,
        step: state.step,
        epoch: state.epoch,
        gen_opt_steps: state.gen_opt.t,
        disc_opt_steps: state.disc_opt.t,
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
    };
    let hdr = serde_json::to_vec(&header)?;
    let tensors = named_tensors(state);
    let mut buf = Vec::with_capacity(64 + tensors.iter().map(|(_, t)| 4 * t.len() + 64).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hdr);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save(path: &Path, state: &TrainState, train: &TrainConfig, image_dims: (usize, usize)) -> Result<()> {
    let bytes = encode(state, train, image_dims)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::BadCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadCheckpoint(msg.into())
}

/// Parses and validates checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(bad("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if body[..8] != MAGIC[..] {
        return Err(bad("bad magic"));
    }
    if Sha256::digest(body)[..] != digest[..] {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
    header.generator.validate()?;
    header.discriminator.validate()?;

    // Zero-initialized containers give the expected names and shapes.
    let gen = init_generator_with_std::<f32>(&header.generator, 0, 0.0);
    let disc = init_discriminator_with_std::<f32>(&header.discriminator, 0, 0.0);
    let seed = unhex(&header.rng.seed).ok_or_else(|| bad("rng seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(header.rng.word_pos.parse().map_err(|_| bad("rng word_pos"))?);
    let mut state = TrainState {
        gen_opt: Adam::new(&gen),
        disc_opt: Adam::new(&disc),
        gen,
        disc,
        gen_cfg: header.generator.clone(),
        disc_cfg: header.discriminator.clone(),
        step: header.step,
        epoch: header.epoch,
        rng,
    };
    state.gen_opt.t = header.gen_opt_steps;
    state.disc_opt.t = header.disc_opt_steps;

    let expected: Vec<(String, Vec<usize>)> = named_tensors(&state)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(bad(format!("{count} tensors, layout needs {}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let nlen = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("tensor name not UTF-8"))?;
        if got != name {
            return Err(bad(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(bad(format!("{name}: shape {dims:?}, layout needs {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("{name}: non-finite values")));
        }
        loaded.push(Tensor::new(dims, data)?);
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }

    let mut it = loaded.into_iter();
    let ng = state.gen.named().len();
    let nd = state.disc.named().len();
    for t in state.gen.tensors_mut() {
        *t = it.next().unwrap();
    }
    for t in state.disc.tensors_mut() {
        *t = it.next().unwrap();
    }
    state.gen_opt.m = it.by_ref().take(ng).collect();
    state.gen_opt.v = it.by_ref().take(ng).collect();
    state.disc_opt.m = it.by_ref().take(nd).collect();
    state.disc_opt.v = it.by_ref().take(nd).collect();

    Ok(Checkpoint {
        state,
        train: header.train,
        image_dims: (header.image_width, header.image_height),
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn state() -> TrainState {
        let gen = GeneratorConfig {
            levels: 4,
            ..GeneratorConfig::with_filters(2)
        };
        let mut s = TrainState::new(gen, DiscriminatorConfig::with_filters(2), 17).unwrap();
        s.rng.next_u64();
        s.step = 3;
        s.epoch = 1;
        s.gen_opt.t = 3;
        s.gen_opt.m[0].data_mut()[0] = 0.25;
        s
    }

    #[test]
    fn round_trip() {
        let s = state();
        let cfg = TrainConfig::default();
        let bytes = encode(&s, &cfg, (64, 48)).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.state, s);
        assert_eq!(ck.train, cfg);
        assert_eq!(ck.image_dims, (64, 48));
        assert_eq!(encode(&ck.state, &ck.train, ck.image_dims).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&state(), &TrainConfig::default(), (16, 16)).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(v["generator"]["base_filters"], 2);
        assert_eq!(v["train"]["generator_loss_mode"], "saturating");
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode(&state(), &TrainConfig::default(), (16, 16)).unwrap();
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::BadCheckpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::BadCheckpoint(_))));
        assert!(matches!(decode(b"nonsense"), Err(Error::BadCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode(&state(), &TrainConfig::default(), (16, 16)).unwrap();
        bytes[8] = 9;
        let n = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
