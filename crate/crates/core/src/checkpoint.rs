//! Binary container for checkpoints, projection bases, dream sets and streams.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SLOWFAST"
//! version  u32      currently 1
//! hash     string   config hash the artifact was produced under
//! seed     u64      run seed
//! count    u32      number of sections
//! section  repeated:
//!   tag    4 bytes  ASCII, e.g. "NETW", "BASI", "DREM", "ACCU", "STRM"
//!   len    u64      payload length in bytes
//!   body   len bytes
//! ```
//!
//! Strings are `u32` length + UTF-8 bytes. Tensors are `u32` rank, `rank × u64`
//! dimensions, then `f64` values bit-for-bit. See `docs/formats.md` for the
//! per-section payloads.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Head, LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SLOWFAST";
pub const VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.usize(x));
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| self.usize(d));
        t.data().iter().for_each(|&x| self.f64(x));
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

/// Cursor over a byte slice that reports absolute offsets on failure.
#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self::at(buf, 0)
    }

    pub fn at(buf: &'a [u8], base: u64) -> Self {
        Self { buf, pos: 0, base }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let at = self.offset();
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format {
            offset: at,
            msg: format!("count {v} does not fit in memory"),
        })
    }

    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let at = self.offset();
        let n = self.usize()?;
        let left = self.buf.len() - self.pos;
        if n.checked_mul(elem).is_none_or(|b| b > left) {
            return Err(Error::Format {
                offset: at,
                msg: format!("length {n} exceeds remaining {left} bytes"),
            });
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.offset();
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: "invalid utf-8".into(),
        })
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let at = self.offset();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format {
                offset: at,
                msg: format!("tensor rank {rank} unsupported"),
            });
        }
        let shape: Vec<usize> = (0..rank).map(|_| self.usize()).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Format {
                offset: at,
                msg: format!("tensor shape {shape:?} exceeds payload"),
            })?;
        let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data)
    }
}

/// A typed payload stored under a four-byte tag.
pub trait Section: Sized {
    const TAG: [u8; 4];
    fn encode(&self, w: &mut Writer);
    fn decode(r: &mut Reader<'_>) -> Result<Self>;
}

/// Provenance recorded in every container.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: Meta,
    sections: Vec<([u8; 4], Vec<u8>, u64)>,
}

impl Container {
    pub fn new(meta: Meta) -> Self {
        Self {
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push<T: Section>(&mut self, item: &T) {
        let mut w = Writer::new();
        item.encode(&mut w);
        self.sections.push((T::TAG, w.into_bytes(), 0));
    }

    /// All sections carrying `T`'s tag, in insertion order.
    pub fn all<T: Section>(&self) -> Result<Vec<T>> {
        self.sections
            .iter()
            .filter(|(tag, _, _)| *tag == T::TAG)
            .map(|(_, body, base)| {
                let mut r = Reader::at(body, *base);
                let v = T::decode(&mut r)?;
                if !r.is_done() {
                    return Err(r.fail("trailing bytes in section"));
                }
                Ok(v)
            })
            .collect()
    }

    pub fn first<T: Section>(&self) -> Result<T> {
        self.all::<T>()?.into_iter().next().ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("missing section {}", String::from_utf8_lossy(&T::TAG)),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.meta.config_hash);
        w.u64(self.meta.seed);
        w.u32(self.sections.len() as u32);
        for (tag, body, _) in &self.sections {
            w.bytes(tag);
            w.u64(body.len() as u64);
            w.bytes(body);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let at = r.offset();
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported version {version}"),
            });
        }
        let meta = Meta {
            config_hash: r.str()?,
            seed: r.u64()?,
        };
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4");
            let len = r.usize()?;
            let base = r.offset();
            let body = r.take(len)?.to_vec();
            sections.push((tag, body, base));
        }
        if !r.is_done() {
            return Err(r.fail("trailing bytes after last section"));
        }
        Ok(Self { meta, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Section for Network {
    const TAG: [u8; 4] = *b"NETW";

    fn encode(&self, w: &mut Writer) {
        w.usizes(self.input_shape());
        w.u64(self.seed());
        w.u32(self.layers().len() as u32);
        for layer in self.layers() {
            encode_spec(w, &layer.spec);
            for t in layer.params.iter().chain(&layer.buffers) {
                w.tensor(t);
            }
        }
        w.u32(self.heads().len() as u32);
        for (&task, head) in self.heads() {
            w.usize(task);
            w.tensor(&head.weight);
            w.tensor(&head.bias);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let input_shape = r.usizes()?;
        let seed = r.u64()?;
        let n_layers = r.u32()?;
        let mut specs = Vec::new();
        let mut tensors = Vec::new();
        for _ in 0..n_layers {
            let at = r.offset();
            let spec = decode_spec(r)?;
            let count = match spec {
                LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => 2,
                LayerSpec::BatchNorm { .. } => 4,
                LayerSpec::Relu | LayerSpec::Flatten => 0,
            };
            let ts = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            specs.push(spec);
            tensors.push((at, ts));
        }
        let at = r.offset();
        let mut net = Network::new(&input_shape, &specs, seed).map_err(|e| Error::Format {
            offset: at,
            msg: format!("invalid architecture: {e}"),
        })?;
        for (layer, (at, ts)) in net.layers_mut().iter_mut().zip(tensors) {
            for (slot, t) in layer.params.iter_mut().chain(layer.buffers.iter_mut()).zip(ts) {
                if slot.shape() != t.shape() {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("tensor shape {:?}, expected {:?}", t.shape(), slot.shape()),
                    });
                }
                *slot = t;
            }
        }
        let n_heads = r.u32()?;
        for _ in 0..n_heads {
            let task = r.usize()?;
            let at = r.offset();
            let head = Head {
                weight: r.tensor()?,
                bias: r.tensor()?,
            };
            net.set_head(task, head).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
        }
        Ok(net)
    }
}

fn encode_spec(w: &mut Writer, spec: &LayerSpec) {
    match *spec {
        LayerSpec::Linear { inputs, outputs } => {
            w.u8(0);
            w.usize(inputs);
            w.usize(outputs);
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            w.u8(1);
            for v in [in_channels, out_channels, kernel, stride, pad] {
                w.usize(v);
            }
        }
        LayerSpec::BatchNorm { channels } => {
            w.u8(2);
            w.usize(channels);
        }
        LayerSpec::Relu => w.u8(3),
        LayerSpec::Flatten => w.u8(4),
    }
}

fn decode_spec(r: &mut Reader<'_>) -> Result<LayerSpec> {
    let at = r.offset();
    Ok(match r.u8()? {
        0 => LayerSpec::Linear {
            inputs: r.usize()?,
            outputs: r.usize()?,
        },
        1 => LayerSpec::Conv2d {
            in_channels: r.usize()?,
            out_channels: r.usize()?,
            kernel: r.usize()?,
            stride: r.usize()?,
            pad: r.usize()?,
        },
        2 => LayerSpec::BatchNorm {
            channels: r.usize()?,
        },
        3 => LayerSpec::Relu,
        4 => LayerSpec::Flatten,
        k => {
            return Err(Error::Format {
                offset: at,
                msg: format!("unknown layer kind {k}"),
            })
        }
    })
}

/// Trunk, heads and batch-norm statistics with the run provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub meta: Meta,
}

impl Checkpoint {
    pub fn new(net: Network, config_hash: &str, seed: u64) -> Self {
        Self {
            net,
            meta: Meta {
                config_hash: config_hash.to_string(),
                seed,
            },
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.meta.clone());
        c.push(&self.net);
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?;
        Ok(Self {
            net: c.first()?,
            meta: c.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        Ok(Self {
            net: c.first()?,
            meta: c.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BnMode;

    fn sample_net() -> Network {
        let specs = LayerSpec::reference_conv_trunk(1, 4, 4);
        let mut net = Network::new(&[1, 4, 4], &specs, 11).unwrap();
        net.add_head(0, 2).unwrap();
        net.add_head(3, 5).unwrap();
        let x = Tensor::from_fn(&[4, 16], |i| (i as f64 * 0.13).cos());
        net.forward(&x, 0, BnMode::Train).unwrap();
        net
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let ck = Checkpoint::new(sample_net(), "abc123", 99);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let x = Tensor::from_fn(&[3, 16], |i| (i as f64).sin());
        let a = ck.net.predict(&x, 3).unwrap();
        let b = back.net.predict(&x, 3).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let bytes = Checkpoint::new(sample_net(), "h", 1).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        match Container::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
