//! Binary checkpoint format.
//!
//! Layout: magic `RGPR`, format version (u32 LE), length-prefixed UTF-8
//! `key=value` config text, then per-parameter records until EOF. Each
//! record: length-prefixed name, rank (u32), dims (u32 each), raw
//! little-endian 4-byte floats. Save -> load -> save is bit-identical.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gpr::HeadKind;
use crate::posenet::{build, Model, NetworkConfig};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"RGPR";
const VERSION: u32 = 1;

// ── Low-level helpers ───────────────────────────────────────────────

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad UTF-8 in name: {e}")))
}

/// One named-tensor record.
pub fn write_record(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> Result<()> {
    write_str(w, name)?;
    let s = t.shape();
    write_u32(w, 4)?;
    for d in [s.n, s.c, s.h, s.w] {
        write_u32(w, d as u32)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_record(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let name = read_str(r)?;
    let rank = read_u32(r)?;
    if rank != 4 {
        return Err(Error::Checkpoint(format!(
            "record {name}: expected rank 4, got {rank}"
        )));
    }
    let dims: Vec<usize> = (0..4)
        .map(|_| read_u32(r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let mut data = Vec::with_capacity(shape.numel());
    let mut buf = [0u8; 4];
    for _ in 0..shape.numel() {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok((name, Tensor::new(shape, data)?))
}

// ── Config text ─────────────────────────────────────────────────────

fn head_to_str(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Gpr => "gpr",
        HeadKind::RescaleSum => "rescale_sum",
    }
}

fn head_from_str(s: &str) -> Result<HeadKind> {
    match s {
        "gpr" => Ok(HeadKind::Gpr),
        "rescale_sum" => Ok(HeadKind::RescaleSum),
        other => Err(Error::Checkpoint(format!("unknown head kind `{other}`"))),
    }
}

pub fn config_to_kv(c: &NetworkConfig) -> String {
    format!(
        "width={}\nnum_stages={}\nblocks_per_stage={}\ninput_h={}\ninput_w={}\n\
         num_keypoints={}\nattention_enabled={}\nhead={}\n",
        c.width,
        c.num_stages,
        c.blocks_per_stage,
        c.input_h,
        c.input_w,
        c.num_keypoints,
        c.attention_enabled,
        head_to_str(c.head)
    )
}

pub fn config_from_kv(text: &str) -> Result<NetworkConfig> {
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut take = |k: &str| -> Result<String> {
        map.remove(k)
            .ok_or_else(|| Error::Checkpoint(format!("config missing key `{k}`")))
    };
    let parse_usize = |k: &str, v: String| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("config key `{k}`: bad integer `{v}`")))
    };
    let cfg = NetworkConfig {
        width: parse_usize("width", take("width")?)?,
        num_stages: parse_usize("num_stages", take("num_stages")?)?,
        blocks_per_stage: parse_usize("blocks_per_stage", take("blocks_per_stage")?)?,
        input_h: parse_usize("input_h", take("input_h")?)?,
        input_w: parse_usize("input_w", take("input_w")?)?,
        num_keypoints: parse_usize("num_keypoints", take("num_keypoints")?)?,
        attention_enabled: match take("attention_enabled")?.as_str() {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Checkpoint(format!(
                    "attention_enabled must be true/false, got `{other}`"
                )))
            }
        },
        head: head_from_str(&take("head")?)?,
    };
    if let Some(k) = map.keys().next() {
        return Err(Error::Checkpoint(format!("unknown config key `{k}`")));
    }
    Ok(cfg)
}

// ── Model save / load ───────────────────────────────────────────────

pub fn save_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    write_u32(&mut out, VERSION)?;
    write_str(&mut out, &config_to_kv(&model.config))?;
    let mut err = None;
    model.visit_params(&mut |name, t| {
        if err.is_none() {
            if let Err(e) = write_record(&mut out, name, t) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

pub fn load_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let config = config_from_kv(&read_str(&mut r)?)?;
    let mut records: HashMap<String, Tensor<f32>> = HashMap::new();
    while !r.is_empty() {
        let (name, t) = read_record(&mut r)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    let mut model: Model<f32> = build(&config, 0)?;
    let mut err: Option<Error> = None;
    model.visit_params_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match records.remove(name) {
            Some(loaded) => {
                if loaded.shape() != t.shape() {
                    err = Some(Error::Checkpoint(format!(
                        "record `{name}`: shape {} does not match model {}",
                        loaded.shape(),
                        t.shape()
                    )));
                } else {
                    *t = loaded;
                }
            }
            None => err = Some(Error::Checkpoint(format!("missing record `{name}`"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has extra record `{name}`"
        )));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    load_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn sample_model() -> Model<f32> {
        let cfg = NetworkConfig {
            width: 4,
            num_stages: 2,
            blocks_per_stage: 1,
            input_h: 64,
            input_w: 48,
            num_keypoints: 5,
            ..NetworkConfig::default()
        };
        build(&cfg, 77).unwrap()
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let model = sample_model();
        let a = save_bytes(&model).unwrap();
        let reloaded = load_bytes(&a).unwrap();
        let b = save_bytes(&reloaded).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reloaded_model_forward_is_bit_identical() {
        let model = sample_model();
        let reloaded = load_bytes(&save_bytes(&model).unwrap()).unwrap();
        let mut rng = crate::rng::Rng::new(5);
        let img = Tensor::<f32>::random_uniform(Shape::new(1, 3, 64, 48), 0.0, 1.0, &mut rng);
        let (a, _) = model.forward(&img).unwrap();
        let (b, _) = reloaded.forward(&img).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = sample_model().config;
        let text = config_to_kv(&cfg);
        assert_eq!(config_from_kv(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let model = sample_model();
        let mut bytes = save_bytes(&model).unwrap();
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        assert!(load_bytes(&corrupted).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(load_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_unknown_config_key() {
        assert!(config_from_kv("width=4\nbogus=1\n").is_err());
    }
}
