//! Binary checkpoints.
//!
//! ```text
//! SNRL1\n
//! meta <key> <value>\n            (zero or more)
//! entry <name> <d1,d2,..> <offset>\n   (one per array)
//! end <payload bytes>\n
//! <little-endian f64 payload>
//! ```
//!
//! Offsets are byte offsets into the payload, strictly increasing and
//! contiguous. Scalars use the shape `1`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, QNetwork};
use crate::optim::OptimState;
use crate::specnorm::SpectralState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"SNRL1\n";

/// Everything needed to resume or probe a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: QNetwork,
    pub states: Vec<SpectralState>,
    pub optim: OptimState,
    /// Free-form metadata, e.g. the experiment config as JSON.
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::None => "none",
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Serialises a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    let rhos: Vec<f64> = ck.states.iter().map(|s| s.rho).collect();
    for (i, l) in ck.net.layers().iter().enumerate() {
        arrays.push((format!("layer{i}.weight"), l.weight.shape().to_vec(), l.weight.data()));
        arrays.push((format!("layer{i}.bias"), l.bias.shape().to_vec(), l.bias.data()));
    }
    for (k, s) in ck.states.iter().enumerate() {
        arrays.push((format!("sn{}.u", s.layer), vec![s.u.len()], &s.u));
        arrays.push((format!("sn{}.v", s.layer), vec![s.v.len()], &s.v));
        arrays.push((format!("sn{}.rho", s.layer), vec![1], &rhos[k..k + 1]));
    }
    for (name, slots) in [
        ("opt.first", &ck.optim.first),
        ("opt.second", &ck.optim.second),
        ("opt.mean", &ck.optim.mean),
    ] {
        for (k, v) in slots.iter().enumerate() {
            arrays.push((format!("{name}{k}"), vec![v.len()], v));
        }
    }

    let mut head = String::from_utf8(MAGIC.to_vec()).expect("ascii");
    let acts: Vec<&str> = ck.net.layers().iter().map(|l| activation_name(l.activation)).collect();
    let mut meta = ck.meta.clone();
    meta.insert("input_shape".into(), join(ck.net.input_shape()));
    meta.insert("activations".into(), acts.join(","));
    meta.insert("opt_t".into(), ck.optim.t.to_string());
    meta.insert("opt_slots".into(), ck.optim.second.len().to_string());
    for (k, v) in &meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(bad(format!("meta key {k:?} or its value is not a single token/line")));
        }
        head.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for (name, shape, data) in &arrays {
        head.push_str(&format!("entry {name} {} {offset}\n", join(shape)));
        offset += data.len() * 8;
    }
    head.push_str(&format!("end {offset}\n"));
    let mut out = head.into_bytes();
    out.reserve(offset);
    for (_, _, data) in &arrays {
        for x in data.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parsed header: metadata, manifest and the payload slice.
pub fn parse_manifest(bytes: &[u8]) -> Result<(BTreeMap<String, String>, Vec<ManifestEntry>, &[u8])> {
    if !bytes.starts_with(MAGIC) {
        return Err(bad("bad magic: expected \"SNRL1\""));
    }
    let mut pos = MAGIC.len();
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated manifest"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("manifest is not utf-8"))?;
        pos += nl + 1;
        let mut parts = line.splitn(2, ' ');
        let tag = parts.next().unwrap_or("");
        let rest = parts.next().unwrap_or("");
        match tag {
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            "entry" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad(format!("malformed entry line {line:?}")));
                }
                let shape = f[1]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                let offset = f[2].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
                entries.push(ManifestEntry {
                    name: f[0].to_string(),
                    shape,
                    offset,
                });
            }
            "end" => {
                let total: usize = rest.parse().map_err(|_| bad("bad payload length"))?;
                let payload = &bytes[pos..];
                if payload.len() != total {
                    return Err(bad(format!(
                        "truncated payload: {} bytes, manifest says {total}",
                        payload.len()
                    )));
                }
                validate_layout(&entries, total)?;
                return Ok((meta, entries, payload));
            }
            _ => return Err(bad(format!("unknown manifest line {line:?}"))),
        }
    }
}

/// Offsets must tile the payload exactly, in order.
pub fn validate_layout(entries: &[ManifestEntry], total: usize) -> Result<()> {
    let mut expected = 0usize;
    for e in entries {
        if e.offset != expected {
            return Err(bad(format!("entry {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        let bytes = e
            .shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("entry {} is too large", e.name)))?;
        expected = expected
            .checked_add(bytes)
            .ok_or_else(|| bad(format!("entry {} is too large", e.name)))?;
    }
    if expected != total {
        return Err(bad(format!("entries cover {expected} bytes of {total}")));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (mut meta, entries, payload) = parse_manifest(bytes)?;
    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for e in &entries {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = payload[e.offset..e.offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if arrays.insert(e.name.clone(), (e.shape.clone(), data)).is_some() {
            return Err(bad(format!("duplicate entry {}", e.name)));
        }
    }
    let mut take_meta = |k: &str| meta.remove(k).ok_or_else(|| bad(format!("missing meta {k}")));
    let input_shape: Vec<usize> = take_meta("input_shape")?
        .split(',')
        .map(|d| d.parse().map_err(|_| bad("bad input_shape")))
        .collect::<Result<_>>()?;
    let acts: Vec<Activation> = take_meta("activations")?
        .split(',')
        .map(|a| match a {
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            other => Err(bad(format!("unknown activation {other}"))),
        })
        .collect::<Result<_>>()?;
    let t: u64 = take_meta("opt_t")?.parse().map_err(|_| bad("bad opt_t"))?;
    let slots: usize = take_meta("opt_slots")?.parse().map_err(|_| bad("bad opt_slots"))?;

    let mut take = |name: &str| arrays.remove(name).ok_or_else(|| bad(format!("missing entry {name}")));
    let mut layers = Vec::with_capacity(acts.len());
    for (i, &a) in acts.iter().enumerate() {
        let (ws, w) = take(&format!("layer{i}.weight"))?;
        let (bs, b) = take(&format!("layer{i}.bias"))?;
        layers.push((Tensor::new(ws, w)?, Tensor::new(bs, b)?, a));
    }
    let net = QNetwork::from_layers(input_shape, layers).map_err(|e| bad(format!("inconsistent network: {e}")))?;

    let mut states = Vec::new();
    for i in 0..net.n_layers() {
        let Ok((_, u)) = take(&format!("sn{i}.u")) else { continue };
        let (_, v) = take(&format!("sn{i}.v"))?;
        let (_, rho) = take(&format!("sn{i}.rho"))?;
        states.push(SpectralState {
            layer: i,
            u,
            v,
            rho: *rho.first().ok_or_else(|| bad(format!("empty radius for layer {i}")))?,
        });
    }
    let mut optim = OptimState {
        t,
        ..OptimState::default()
    };
    for k in 0..slots {
        optim.first.push(take(&format!("opt.first{k}"))?.1);
        optim.second.push(take(&format!("opt.second{k}"))?.1);
        optim.mean.push(take(&format!("opt.mean{k}"))?.1);
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(bad(format!("unexpected entry {extra}")));
    }
    Ok(Checkpoint {
        net,
        states,
        optim,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_qnet, ArchSpec};

    fn sample() -> Checkpoint {
        let arch = ArchSpec {
            n_conv: 1,
            conv_width: 2,
            fc_width: 5,
            n_actions: 3,
            obs_channels: 2,
            obs_height: 5,
            obs_width: 5,
        };
        let net = build_qnet(&arch, 4).unwrap();
        let mut optim = OptimState::zeros(&net.params());
        optim.t = 17;
        optim.first[0][0] = 0.125;
        optim.second[1][0] = f64::MIN_POSITIVE;
        let states = vec![SpectralState {
            layer: 1,
            u: vec![0.6, 0.8].into_iter().chain(std::iter::repeat_n(0.0, 16)).collect(),
            v: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            rho: 1.2345678901234567,
        }];
        let mut meta = BTreeMap::new();
        meta.insert("config".into(), "{\"a\": 1}".into());
        Checkpoint {
            net,
            states,
            optim,
            meta,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = encode(&ck).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_is_named() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(&bytes[..10]).is_err());
    }

    #[test]
    fn offsets_tile_payload() {
        let bytes = encode(&sample()).unwrap();
        let (_, entries, payload) = parse_manifest(&bytes).unwrap();
        assert!(entries.windows(2).all(|w| w[0].offset < w[1].offset));
        validate_layout(&entries, payload.len()).unwrap();
        let mut broken = entries.clone();
        broken[1].offset += 8;
        assert!(validate_layout(&broken, payload.len()).is_err());
    }
}
