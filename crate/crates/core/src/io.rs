//! On-disk formats: latent sequences, checkpoints and `key = value` files.
//!
//! Latent file: magic `NFLAT\0\x01\0`, little-endian `u32` frames, `u32`
//! dim, `u8` dtype (0 = f64, 1 = f32), three zero bytes, row-major payload.
//!
//! Checkpoint: a UTF-8 manifest terminated by a line `end`, then the
//! concatenated little-endian tensor payloads. Manifest lines are
//! `config <key> <value>`, `meta <key> <value>` and
//! `tensor <name> <dtype> <d0,d1,..> <byte offset>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, DenoiserParams};
use crate::numerics::{Dtype, Real, Tensor};

pub const LATENT_MAGIC: [u8; 8] = *b"NFLAT\x00\x01\x00";
pub const CHECKPOINT_MAGIC: &str = "NFCKPT 1";

pub fn write_latents<E: Real>(w: &mut impl Write, values: &Tensor<E>) -> Result<()> {
    if values.rank() != 2 {
        return Err(Error::Invalid(format!("latents must be 2-D, got {:?}", values.shape())));
    }
    let frames = u32::try_from(values.rows()).map_err(|_| Error::Invalid("too many frames".into()))?;
    let dim = u32::try_from(values.cols()).map_err(|_| Error::Invalid("latent dim too large".into()))?;
    w.write_all(&LATENT_MAGIC)?;
    w.write_all(&frames.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&[E::DTYPE.code(), 0, 0, 0])?;
    w.write_all(&values.to_le_bytes())?;
    Ok(())
}

/// Reads a latent file. `f32` payloads are widened exactly; the stored
/// dtype is returned so a rewrite reproduces the file.
pub fn read_latents(r: &mut impl Read) -> Result<(Tensor, Dtype)> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)?;
    if header[..8] != LATENT_MAGIC {
        return Err(Error::Format("not a latent file (bad magic)".into()));
    }
    let frames = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
    let dtype = Dtype::from_code(header[16]).ok_or_else(|| Error::Format(format!("unknown dtype {}", header[16])))?;
    if header[17..20] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let data = decode(&payload, dtype, frames * dim)?;
    Ok((Tensor::from_vec(&[frames, dim], data)?, dtype))
}

pub fn save_latents<E: Real>(path: &Path, values: &Tensor<E>) -> Result<()> {
    let mut buf = Vec::new();
    write_latents(&mut buf, values)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_latents(path: &Path) -> Result<(Tensor, Dtype)> {
    read_latents(&mut fs::File::open(path)?)
}

fn decode(bytes: &[u8], dtype: Dtype, count: usize) -> Result<Vec<f64>> {
    if bytes.len() != count * dtype.size() {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            count * dtype.size()
        )));
    }
    Ok(match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    })
}

/// Parameters plus free-form metadata (training stage, mask mode, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub meta: BTreeMap<String, String>,
}

pub fn config_pairs(cfg: &DenoiserConfig) -> Vec<(&'static str, String)> {
    vec![
        ("n_layers", cfg.n_layers.to_string()),
        ("n_heads", cfg.n_heads.to_string()),
        ("d_model", cfg.d_model.to_string()),
        ("d_latent", cfg.d_latent.to_string()),
        ("d_cond", cfg.d_cond.to_string()),
        ("d_ff", cfg.d_ff.to_string()),
        ("rope_base", format!("{:?}", cfg.rope_base)),
        ("lambda", cfg.lambda.to_string()),
        ("rotate_memory_values", cfg.rotate_memory_values.to_string()),
    ]
}

/// Applies one `key = value` setting to a model config.
pub fn set_config_field(cfg: &mut DenoiserConfig, key: &str, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("bad value {value:?} for {key}"));
    let int = || value.parse::<usize>().map_err(|_| bad());
    match key {
        "n_layers" => cfg.n_layers = int()?,
        "n_heads" => cfg.n_heads = int()?,
        "d_model" => cfg.d_model = int()?,
        "d_latent" => cfg.d_latent = int()?,
        "d_cond" => cfg.d_cond = int()?,
        "d_ff" => cfg.d_ff = int()?,
        "lambda" => cfg.lambda = int()?,
        "rope_base" => cfg.rope_base = value.parse().map_err(|_| bad())?,
        "rotate_memory_values" => cfg.rotate_memory_values = value.parse().map_err(|_| bad())?,
        _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint, dtype: Dtype) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(CHECKPOINT_MAGIC);
    manifest.push('\n');
    for (k, v) in config_pairs(ckpt.params.config()) {
        manifest.push_str(&format!("config {k} {v}\n"));
    }
    for (k, v) in &ckpt.meta {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Invalid(format!("metadata entry {k:?} cannot be stored")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut payload = Vec::new();
    for (name, t) in ckpt.params.names().iter().zip(ckpt.params.tensors()) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor {name} {} {} {}\n", dtype.name(), dims.join(","), payload.len()));
        match dtype {
            Dtype::F64 => payload.extend(t.to_le_bytes()),
            Dtype::F32 => payload.extend(t.cast::<f32>().to_le_bytes()),
        }
    }
    manifest.push_str("end\n");
    w.write_all(manifest.as_bytes())?;
    w.write_all(&payload)?;
    Ok(())
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

pub fn read_checkpoint(r: &mut impl BufRead) -> Result<Checkpoint> {
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::Format("checkpoint manifest ends without `end`".into()));
        }
        Ok(())
    };
    next_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad header)".into()));
    }
    let mut config = DenoiserConfig::default();
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    loop {
        next_line(&mut line)?;
        let text = line.trim_end_matches('\n');
        if text == "end" {
            break;
        }
        let (kind, rest) = text.split_once(' ').ok_or_else(|| Error::Format(format!("bad manifest line {text:?}")))?;
        match kind {
            "config" => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| Error::Format(format!("bad config line {text:?}")))?;
                set_config_field(&mut config, k, v).map_err(|e| Error::Format(e.to_string()))?;
            }
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            "tensor" => entries.push(parse_entry(rest)?),
            _ => return Err(Error::Format(format!("unknown manifest entry {kind:?}"))),
        }
    }
    drop(next_line);
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut named = Vec::with_capacity(entries.len());
    let mut expected_offset = 0;
    for e in entries {
        let count: usize = e.shape.iter().product();
        let size = count * e.dtype.size();
        if e.offset != expected_offset || e.offset + size > payload.len() {
            return Err(Error::Format(format!("tensor {} has inconsistent offset {}", e.name, e.offset)));
        }
        let data = decode(&payload[e.offset..e.offset + size], e.dtype, count)?;
        named.push((e.name, Tensor::from_vec(&e.shape, data)?));
        expected_offset += size;
    }
    if expected_offset != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() - expected_offset
        )));
    }
    Ok(Checkpoint {
        params: DenoiserParams::from_named(config, named)?,
        meta,
    })
}

fn parse_entry(rest: &str) -> Result<Entry> {
    let bad = || Error::Format(format!("bad tensor line {rest:?}"));
    let parts: Vec<&str> = rest.split(' ').collect();
    let [name, dtype, dims, offset] = parts[..] else {
        return Err(bad());
    };
    let shape = dims
        .split(',')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    Ok(Entry {
        name: name.to_string(),
        dtype: Dtype::parse(dtype).ok_or_else(bad)?,
        shape,
        offset: offset.parse().map_err(|_| bad())?,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, dtype: Dtype) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt, dtype)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut std::io::BufReader::new(fs::File::open(path)?))
}

/// Parses line-oriented `key = value` text. Blank lines and lines starting
/// with `#` are skipped; a repeated key is an error.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn format_key_values<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_header_layout() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.25, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_latents(&mut buf, &t).unwrap();
        assert_eq!(&buf[..8], b"NFLAT\x00\x01\x00");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &3u32.to_le_bytes());
        assert_eq!(&buf[16..20], &[0, 0, 0, 0]);
        assert_eq!(buf.len(), 20 + 6 * 8);
        let (back, dtype) = read_latents(&mut buf.as_slice()).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(back.to_le_bytes(), t.to_le_bytes());
    }

    #[test]
    fn f32_latents_round_trip_bitwise() {
        let t: Tensor<f32> = Tensor::from_vec(&[1, 3], vec![0.1f32, -7.5, 1e-30]).unwrap();
        let mut buf = Vec::new();
        write_latents(&mut buf, &t).unwrap();
        assert_eq!(buf[16], 1);
        let (back, dtype) = read_latents(&mut buf.as_slice()).unwrap();
        assert_eq!(dtype, Dtype::F32);
        let mut again = Vec::new();
        write_latents(&mut again, &back.cast::<f32>()).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_latents_rejected() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_latents(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_latents(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[16] = 9;
        assert!(read_latents(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad.pop();
        assert!(read_latents(&mut bad.as_slice()).is_err());
    }

    fn toy() -> DenoiserParams {
        let cfg = DenoiserConfig {
            d_model: 8,
            d_ff: 16,
            d_latent: 4,
            d_cond: 2,
            ..Default::default()
        };
        DenoiserParams::init(cfg, 5).unwrap().randomized(6, 0.1)
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut meta = BTreeMap::new();
        meta.insert("mask".to_string(), "none".to_string());
        meta.insert("note".to_string(), "two words".to_string());
        let ckpt = Checkpoint { params: toy(), meta };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt, Dtype::F64).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back, Dtype::F64).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn f32_checkpoint_is_stable_after_first_rounding() {
        let ckpt = Checkpoint { params: toy(), meta: BTreeMap::new() };
        let mut first = Vec::new();
        write_checkpoint(&mut first, &ckpt, Dtype::F32).unwrap();
        let back = read_checkpoint(&mut first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_checkpoint(&mut second, &back, Dtype::F32).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let ckpt = Checkpoint { params: toy(), meta: BTreeMap::new() };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt, Dtype::F64).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn key_values_parse_and_echo() {
        let text = "# comment\n steps = 20\n\nlr=0.001\n";
        let kv = parse_key_values(text).unwrap();
        assert_eq!(kv, vec![("steps".into(), "20".into()), ("lr".into(), "0.001".into())]);
        let echoed = format_key_values(kv.iter().map(|(k, v)| (k.as_str(), v.clone())));
        assert_eq!(parse_key_values(&echoed).unwrap(), kv);
        assert!(parse_key_values("a = 1\na = 2").is_err());
        assert!(parse_key_values("no equals sign").is_err());
    }

    #[test]
    fn model_keys_round_trip() {
        let cfg = DenoiserConfig {
            rope_base: 123.456,
            rotate_memory_values: true,
            ..Default::default()
        };
        let mut back = DenoiserConfig::default();
        for (k, v) in config_pairs(&cfg) {
            set_config_field(&mut back, k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(set_config_field(&mut back, "bogus", "1").is_err());
    }
}
