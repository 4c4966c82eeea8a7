//! Checkpoint container: a plain-text header describing the topology,
//! followed by one CXT record per parameter block (real values stored in
//! the real component).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use num_complex::Complex32;

use crate::error::{Error, Result};
use crate::tensor::{decode_tensor, write_tensor, CTensor};

use super::{NetConfig, Network};

const HEADER_MAGIC: &str = "MRILAB-CHECKPOINT 1";
const HEADER_END: &str = "END";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub net: Network<f32>,
    /// Extra scalar metadata (learned log-lambda, noise variance, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, net: Network<f32>) -> Self {
        Self { kind: kind.into(), step, net, meta: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no '{key}' entry")))?
            .parse()
            .map_err(|_| Error::Format { offset: 0, msg: format!("bad number for '{key}'") })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode(&mut buf, ckpt).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn encode(buf: &mut Vec<u8>, ckpt: &Checkpoint) -> std::io::Result<()> {
    let cfg = ckpt.net.config();
    writeln!(buf, "{HEADER_MAGIC}")?;
    writeln!(buf, "kind={}", ckpt.kind)?;
    writeln!(buf, "step={}", ckpt.step)?;
    writeln!(buf, "seed={}", cfg.seed)?;
    writeln!(buf, "in_channels={}", cfg.in_channels)?;
    writeln!(buf, "out_channels={}", cfg.out_channels)?;
    let widths: Vec<String> = cfg.widths.iter().map(|w| w.to_string()).collect();
    writeln!(buf, "widths={}", widths.join(","))?;
    writeln!(buf, "kernel={}", cfg.kernel)?;
    writeln!(buf, "residual={}", cfg.residual)?;
    for (k, v) in &ckpt.meta {
        writeln!(buf, "meta.{k}={v}")?;
    }
    for b in ckpt.net.blocks() {
        writeln!(buf, "block={} {}x{}x{}", b.name, b.shape[0], b.shape[1], b.shape[2])?;
    }
    writeln!(buf, "{HEADER_END}")?;
    for b in ckpt.net.blocks() {
        let vals = &ckpt.net.params()[b.offset..b.offset + b.len()];
        let t = CTensor::new(
            b.shape.to_vec(),
            vals.iter().map(|v| Complex32::new(*v, 0.0)).collect(),
        )
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        write_tensor(buf, &t)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    let mut pos = 0usize;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| fmt(bytes.len(), "truncated checkpoint header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| fmt(pos, "header is not UTF-8".into()))?
            .to_string();
        pos += end + 1;
        if line == HEADER_END {
            break;
        }
        lines.push((pos, line));
    }
    if lines.first().map(|l| l.1.as_str()) != Some(HEADER_MAGIC) {
        return Err(fmt(0, "not a checkpoint file".into()));
    }
    let mut kv = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for (off, line) in &lines[1..] {
        let (k, v) = line.split_once('=').ok_or_else(|| fmt(*off, format!("bad header line '{line}'")))?;
        if let Some(mk) = k.strip_prefix("meta.") {
            meta.insert(mk.to_string(), v.to_string());
        } else if k != "block" {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| fmt(0, format!("missing header key '{k}'")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| fmt(0, format!("bad value for '{k}'"))) };
    let cfg = NetConfig {
        in_channels: num("in_channels")?,
        out_channels: num("out_channels")?,
        widths: get("widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| fmt(0, "bad widths".into())))
            .collect::<Result<_>>()?,
        kernel: num("kernel")?,
        residual: get("residual")? == "true",
        seed: get("seed")?.parse().map_err(|_| fmt(0, "bad seed".into()))?,
    };
    let mut net = Network::<f32>::zeros(&cfg)?;
    let blocks = net.blocks().to_vec();
    for b in &blocks {
        let (t, next) = decode_tensor(bytes, pos)?;
        if t.shape() != b.shape {
            return Err(fmt(pos, format!("block {} has shape {:?}", b.name, t.shape())));
        }
        for (dst, src) in net.params_mut()[b.offset..b.offset + b.len()].iter_mut().zip(t.data()) {
            *dst = src.re;
        }
        pos = next;
    }
    if pos != bytes.len() {
        return Err(fmt(pos, "trailing bytes after parameter blocks".into()));
    }
    Ok(Checkpoint {
        kind: get("kind")?,
        step: get("step")?.parse().map_err(|_| fmt(0, "bad step".into()))?,
        net,
        meta,
    })
}
