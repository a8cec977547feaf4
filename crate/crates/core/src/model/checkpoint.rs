//! Named-tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CLR1"
//! u32 entry count
//! per entry: u16 name len, name, u8 dtype (0 f32, 1 u8, 2 i64), u8 ndim, ndim × u32 dims, data
//! u32 flag count
//! per flag: u16 name len, name, u8 bits (0x01 frozen, 0x02 pw-then-dw, 0x04 colora factor)
//! ```
//!
//! The architecture travels as a `u8` entry named `__graph__` holding one
//! line per layer; merge counts are `i64` entries named
//! `{layer}.colora.merge_count`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{Layer, ModelGraph};
use crate::adapters::{CnnAdapterLayer, CoLoRALayer, DenseLoraLayer, Order};
use crate::conv::{ConvGeometry, Padding};
use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, DepthwiseKernel, PointwiseKernel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLR1";
const GRAPH_ENTRY: &str = "__graph__";

const FLAG_FROZEN: u8 = 0x01;
const FLAG_PW_THEN_DW: u8 = 0x02;
const FLAG_COLORA: u8 = 0x04;

#[derive(Clone, Debug, PartialEq)]
enum Entry {
    F32(Tensor),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_entry(buf: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize], data: &[u8]) -> Result<()> {
    put_name(buf, name)?;
    buf.push(dtype);
    buf.push(u8::try_from(dims.len()).map_err(|_| bad("too many dims"))?);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(data);
    Ok(())
}

fn geom_text(g: ConvGeometry) -> String {
    format!("{} {}", g.padding.as_str(), g.stride)
}

fn graph_text(g: &ModelGraph) -> String {
    let [h, w, c] = g.input_shape();
    let mut s = format!("input {h} {w} {c}\nhead_start {}\n", g.head_start());
    for l in g.layers() {
        let line = match l {
            Layer::Conv { name, geom, .. } => format!("conv {name} {}", geom_text(*geom)),
            Layer::CoLoRA { name, layer } => format!("colora {name} {}", geom_text(layer.geometry())),
            Layer::CnnAdapter { name, layer } => format!("adapter {name} {}", geom_text(layer.geometry())),
            Layer::Dense { name, .. } => format!("dense {name}"),
            Layer::DenseLora { name, .. } => format!("dense_lora {name}"),
            other => other.kind().to_string(),
        };
        s.push_str(&line);
        s.push('\n');
    }
    s
}

fn encode(g: &ModelGraph) -> Result<Vec<u8>> {
    let params = g.params();
    let merges: Vec<(String, u64)> = g
        .colora_layers()
        .map(|(n, l)| (format!("{n}.colora.merge_count"), l.merge_count()))
        .collect();
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    let count = 1 + params.len() + merges.len();
    buf.extend_from_slice(&(count as u32).to_le_bytes());

    let text = graph_text(g);
    put_entry(&mut buf, GRAPH_ENTRY, 1, &[text.len()], text.as_bytes())?;
    for (name, t) in &params {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        put_entry(&mut buf, name, 0, t.shape(), &bytes)?;
    }
    for (name, n) in &merges {
        put_entry(&mut buf, name, 2, &[1], &(*n as i64).to_le_bytes())?;
    }

    let orders: BTreeMap<String, Order> = g.colora_layers().map(|(n, l)| (n.to_string(), l.order())).collect();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, _) in &params {
        let mut bits = 0;
        if !g.is_trainable(name) {
            bits |= FLAG_FROZEN;
        }
        if let Some((layer, _)) = name.split_once(".colora.") {
            bits |= FLAG_COLORA;
            if orders.get(layer) == Some(&Order::PwThenDw) {
                bits |= FLAG_PW_THEN_DW;
            }
        }
        put_name(&mut buf, name)?;
        buf.push(bits);
    }
    Ok(buf)
}

pub fn save_checkpoint(g: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = encode(g)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("entry name is not UTF-8"))
    }
}

fn decode(buf: &[u8]) -> Result<(BTreeMap<String, Entry>, BTreeMap<String, u8>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| bad("file too short for magic"))? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, not a checkpoint"));
    }
    let count = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name = r.name()?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("dimension product overflows"))?;
        let entry = match dtype {
            0 => {
                let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("entry too large"))?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Entry::F32(Tensor::new(dims, data).map_err(|e| bad(format!("entry '{name}': {e}")))?)
            }
            1 => Entry::U8(r.take(n)?.to_vec()),
            2 => {
                let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("entry too large"))?)?;
                Entry::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            d => return Err(bad(format!("entry '{name}' has unknown dtype {d}"))),
        };
        if entries.insert(name.clone(), entry).is_some() {
            return Err(bad(format!("name collision on '{name}'")));
        }
    }
    let nflags = r.u32()?;
    let mut flags = BTreeMap::new();
    for _ in 0..nflags {
        let name = r.name()?;
        let bits = r.u8()?;
        if flags.insert(name.clone(), bits).is_some() {
            return Err(bad(format!("duplicate flags for '{name}'")));
        }
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((entries, flags))
}

struct Tensors {
    entries: BTreeMap<String, Entry>,
}

impl Tensors {
    fn f32(&mut self, name: &str) -> Result<Tensor> {
        match self.entries.remove(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(_) => Err(bad(format!("entry '{name}' is not f32"))),
            None => Err(bad(format!("missing tensor '{name}'"))),
        }
    }

    fn f32_opt(&mut self, name: &str) -> Result<Option<Tensor>> {
        if self.entries.contains_key(name) {
            self.f32(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn kernel(&mut self, name: &str) -> Result<ConvKernel> {
        let w = self.f32(&format!("{name}.weight"))?;
        let b = self.f32_opt(&format!("{name}.bias"))?;
        ConvKernel::new(w, b).map_err(|e| bad(format!("layer '{name}': {e}")))
    }
}

fn parse_geom(parts: &[&str]) -> Result<ConvGeometry> {
    let [pad, stride] = parts else {
        return Err(bad("expected padding and stride"));
    };
    Ok(ConvGeometry {
        padding: Padding::parse(pad).map_err(|e| bad(e.to_string()))?,
        stride: stride.parse().map_err(|_| bad(format!("bad stride '{stride}'")))?,
    })
}

fn rebuild(entries: BTreeMap<String, Entry>, flags: &BTreeMap<String, u8>) -> Result<ModelGraph> {
    let mut t = Tensors { entries };
    let text = match t.entries.remove(GRAPH_ENTRY) {
        Some(Entry::U8(b)) => String::from_utf8(b).map_err(|_| bad("graph text is not UTF-8"))?,
        _ => return Err(bad("missing graph description")),
    };
    let mut lines = text.lines();
    let nums = |line: Option<&str>, key: &str| -> Result<Vec<usize>> {
        let line = line.ok_or_else(|| bad(format!("missing '{key}' line")))?;
        let rest = line
            .strip_prefix(key)
            .ok_or_else(|| bad(format!("expected '{key}', got '{line}'")))?;
        rest.split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(format!("bad number in '{line}'"))))
            .collect()
    };
    let input = nums(lines.next(), "input")?;
    let [h, w, c] = input[..] else {
        return Err(bad("input line needs three dims"));
    };
    let head_start = match nums(lines.next(), "head_start")?[..] {
        [n] => n,
        _ => return Err(bad("bad head_start line")),
    };

    let mut layers = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let layer = match parts[..] {
            ["relu"] => Layer::Relu,
            ["maxpool2"] => Layer::MaxPool2,
            ["gap"] => Layer::GlobalAvgPool,
            ["flatten"] => Layer::Flatten,
            ["conv", name, ref g @ ..] => Layer::Conv {
                name: name.into(),
                kernel: t.kernel(name)?,
                geom: parse_geom(g)?,
            },
            ["colora", name, ref g @ ..] => {
                let kp_name = format!("{name}.colora.kp");
                let order = match flags.get(&kp_name) {
                    Some(bits) if bits & FLAG_PW_THEN_DW != 0 => Order::PwThenDw,
                    Some(_) => Order::DwThenPw,
                    None => return Err(bad(format!("no flags for '{kp_name}'"))),
                };
                let kp = PointwiseKernel::new(t.f32(&kp_name)?).map_err(|e| bad(e.to_string()))?;
                let kd = DepthwiseKernel::new(t.f32(&format!("{name}.colora.kd"))?)
                    .map_err(|e| bad(e.to_string()))?;
                let db = t.f32_opt(&format!("{name}.colora.db"))?;
                let mc_name = format!("{name}.colora.merge_count");
                let merges = match t.entries.remove(&mc_name) {
                    Some(Entry::I64(v)) if v.len() == 1 && v[0] >= 0 => v[0] as u64,
                    _ => return Err(bad(format!("missing or invalid '{mc_name}'"))),
                };
                let base = t.kernel(name)?;
                let layer = CoLoRALayer::from_parts(base, kp, kd, db, order, parse_geom(g)?, merges)
                    .map_err(|e| bad(format!("layer '{name}': {e}")))?;
                Layer::CoLoRA { name: name.into(), layer }
            }
            ["adapter", name, ref g @ ..] => {
                let base = t.kernel(name)?;
                let a = PointwiseKernel::new(t.f32(&format!("{name}.adapter.a"))?)
                    .map_err(|e| bad(e.to_string()))?;
                let s = t.f32(&format!("{name}.adapter.scale"))?;
                let sh = t.f32(&format!("{name}.adapter.shift"))?;
                if s.len() != 1 || sh.len() != 1 {
                    return Err(bad(format!("adapter '{name}' norm parameters must be scalars")));
                }
                let layer = CnnAdapterLayer::from_parts(base, a, s.data()[0], sh.data()[0], parse_geom(g)?)
                    .map_err(|e| bad(format!("layer '{name}': {e}")))?;
                Layer::CnnAdapter { name: name.into(), layer }
            }
            ["dense", name] => Layer::Dense {
                name: name.into(),
                weight: t.f32(&format!("{name}.weight"))?,
                bias: t.f32_opt(&format!("{name}.bias"))?,
            },
            ["dense_lora", name] => {
                let layer = DenseLoraLayer::from_parts(
                    t.f32(&format!("{name}.weight"))?,
                    t.f32_opt(&format!("{name}.bias"))?,
                    t.f32(&format!("{name}.lora.a"))?,
                    t.f32(&format!("{name}.lora.b"))?,
                )
                .map_err(|e| bad(format!("layer '{name}': {e}")))?;
                Layer::DenseLora { name: name.into(), layer }
            }
            _ => return Err(bad(format!("unrecognized graph line '{line}'"))),
        };
        layers.push(layer);
    }
    if let Some(extra) = t.entries.keys().next() {
        return Err(bad(format!("entry '{extra}' does not belong to any layer")));
    }
    let frozen: BTreeSet<String> = flags
        .iter()
        .filter(|(_, &b)| b & FLAG_FROZEN != 0)
        .map(|(n, _)| n.clone())
        .collect();
    let g = ModelGraph::new([h, w, c], layers, head_start)
        .and_then(|g| g.with_frozen(frozen))
        .map_err(|e| bad(format!("stored graph is invalid: {e}")))?;
    Ok(g)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (entries, flags) = decode(&buf)?;
    rebuild(entries, &flags)
}

impl ModelGraph {
    /// Copies a checkpoint's parameter values into this graph. Every name must
    /// exist here with an identical shape; the freeze mask is left alone.
    pub fn load_params_from(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let src = load_checkpoint(path)?;
        let theirs: BTreeMap<String, &Tensor> = src.params().into_iter().collect();
        let mine = self.param_names();
        if mine.len() != theirs.len() || mine.iter().any(|n| !theirs.contains_key(n)) {
            return Err(bad("checkpoint parameter names do not match the graph"));
        }
        for (name, _) in self.params() {
            let (a, b) = (self.param(&name).unwrap().shape(), theirs[&name].shape());
            if a != b {
                return Err(bad(format!("shape mismatch on '{name}': graph {a:?}, checkpoint {b:?}")));
            }
        }
        for (name, t) in self.params_mut() {
            t.data_mut().copy_from_slice(theirs[&name].data());
        }
        Ok(())
    }
}
