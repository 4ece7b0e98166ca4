//! Low-rank adapters: `W0 + (scaling / r) · up · down`.
//!
//! Factor naming follows data flow rather than letters. For a frozen weight
//! of shape `out × in`, the `down` factor is `r × in` and is applied first;
//! the `up` factor is `out × r`. Their product has the shape of the frozen
//! weight, and it is scaled by `scaling / r`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Standard deviation of the Gaussian-initialized `down` factor.
pub const DOWN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scaling: f64,
    /// Backbone weight names that receive an adapter.
    pub target_layers: Vec<String>,
}

impl LoraConfig {
    /// Multiplier applied to `up · down`.
    pub fn factor(&self) -> f64 {
        self.scaling / self.rank as f64
    }

    /// Query and value projections of every block.
    pub fn query_value(rank: usize, scaling: f64, n_layers: usize) -> Self {
        LoraConfig {
            rank,
            scaling,
            target_layers: (0..n_layers)
                .flat_map(|l| [format!("blocks.{l}.attn.wq"), format!("blocks.{l}.attn.wv")])
                .collect(),
        }
    }

    /// Checks the config against the shapes of the weights it adapts.
    pub fn validate(&self, shapes: &BTreeMap<String, (usize, usize)>) -> Result<()> {
        let mut problems = Vec::new();
        if self.rank == 0 {
            problems.push("lora.rank must be positive".to_string());
        }
        if !(self.scaling > 0.0) || !self.scaling.is_finite() {
            problems.push(format!("lora.scaling must be positive, got {}", self.scaling));
        }
        if self.target_layers.is_empty() {
            problems.push("lora.target_layers must not be empty".to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.target_layers {
            if !seen.insert(id) {
                problems.push(format!("lora target `{id}` listed twice"));
            }
            match shapes.get(id) {
                None => problems.push(format!("lora target `{id}` is not a backbone weight")),
                Some(&(d, k)) if self.rank >= d.min(k) => problems.push(format!(
                    "lora.rank {} must be below min({d}, {k}) for `{id}`",
                    self.rank
                )),
                _ => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One adapted weight's factor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    /// `r × in`
    pub down: Matrix<T>,
    /// `out × r`
    pub up: Matrix<T>,
}

impl<T: Scalar> LoraPair<T> {
    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    /// Shape of the weight this pair adapts.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.up.rows(), self.down.cols())
    }

    fn check(&self, w0: &Matrix<T>, op: &'static str) -> Result<()> {
        if self.up.cols() != self.down.rows() || self.target_shape() != w0.shape() {
            return Err(Error::Shape {
                op,
                left: w0.shape(),
                right: self.target_shape(),
            });
        }
        Ok(())
    }

    /// `(scaling / r) · up · down`.
    pub fn delta(&self, scaling: f64) -> Result<Matrix<T>> {
        let factor = T::lit(scaling / self.rank() as f64);
        Ok(self.up.matmul(&self.down)?.scale(factor))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub config: LoraConfig,
    pub pairs: BTreeMap<String, LoraPair<T>>,
}

/// Gradients share the adapter's keyed layout.
pub type AdapterGrads<T> = LoraAdapter<T>;

impl<T: Scalar> LoraAdapter<T> {
    pub fn empty(config: LoraConfig) -> Self {
        LoraAdapter {
            config,
            pairs: BTreeMap::new(),
        }
    }

    pub fn pair(&self, layer: &str) -> Option<&LoraPair<T>> {
        self.pairs.get(layer)
    }

    /// `ΔW` per adapted layer.
    pub fn deltas(&self) -> Result<BTreeMap<String, Matrix<T>>> {
        self.pairs
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.delta(self.config.scaling)?)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            config: self.config.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        LoraPair {
                            down: p.down.cast(),
                            up: p.up.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for LoraAdapter<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        self.pairs
            .iter()
            .flat_map(|(k, p)| [(format!("{k}.down"), &p.down), (format!("{k}.up"), &p.up)])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        self.pairs
            .iter_mut()
            .flat_map(|(k, p)| [(format!("{k}.down"), &mut p.down), (format!("{k}.up"), &mut p.up)])
            .collect()
    }
}

/// Fresh adapter whose composed update is exactly zero.
pub fn init_adapter<T: Scalar>(
    config: &LoraConfig,
    backbone_shapes: &BTreeMap<String, (usize, usize)>,
    rng: &mut Rng,
) -> Result<LoraAdapter<T>> {
    config.validate(backbone_shapes)?;
    let mut targets: Vec<&String> = config.target_layers.iter().collect();
    targets.sort();
    let mut adapter = LoraAdapter::empty(config.clone());
    for id in targets {
        let (out, inp) = backbone_shapes[id];
        adapter.pairs.insert(
            id.clone(),
            LoraPair {
                down: Matrix::gaussian_init(rng, config.rank, inp, DOWN_INIT_STD),
                up: Matrix::zeros(out, config.rank),
            },
        );
    }
    Ok(adapter)
}

/// `W0·x + (scaling / r) · up · (down · x)` for column inputs `x` (`in × n`).
pub fn lora_forward<T: Scalar>(x: &Matrix<T>, w0: &Matrix<T>, pair: &LoraPair<T>, scaling: f64) -> Result<Matrix<T>> {
    pair.check(w0, "lora_forward")?;
    let mut h = w0.matmul(x)?;
    let low = pair.up.matmul(&pair.down.matmul(x)?)?;
    h.axpy(T::lit(scaling / pair.rank() as f64), &low)?;
    Ok(h)
}

/// `W0 + (scaling / r) · up · down`; `w0` is left untouched.
pub fn merge_adapter<T: Scalar>(w0: &Matrix<T>, pair: &LoraPair<T>, scaling: f64) -> Result<Matrix<T>> {
    pair.check(w0, "merge_adapter")?;
    w0.add(&pair.delta(scaling)?)
}

/// Σ r·(out + in) over all pairs.
pub fn param_count<T: Scalar>(adapter: &LoraAdapter<T>) -> usize {
    adapter
        .pairs
        .values()
        .map(|p| p.rank() * (p.up.rows() + p.down.cols()))
        .sum()
}

/// `dst + coeff · src`, factor by factor.
pub fn adapter_axpy<T: Scalar>(dst: &LoraAdapter<T>, src: &LoraAdapter<T>, coeff: T) -> Result<LoraAdapter<T>> {
    let mut out = dst.clone();
    out.axpy(coeff, src)?;
    Ok(out)
}

/// Numeric width of a serialized adapter payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireFormat {
    F32,
    F64,
}

impl WireFormat {
    pub fn bytes_per_param(self) -> usize {
        match self {
            WireFormat::F32 => 4,
            WireFormat::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        self.bytes_per_param() as u8
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            4 => Ok(WireFormat::F32),
            8 => Ok(WireFormat::F64),
            other => Err(Error::format("adapter", format!("unknown wire width {other}"))),
        }
    }
}

const ADAPTER_MAGIC: &[u8; 4] = b"FGLA";
const ADAPTER_VERSION: u16 = 1;

/// Serialized adapter: a shape header followed by the numeric payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedAdapter {
    pub bytes: Vec<u8>,
    /// Offset where the numeric payload starts.
    pub payload_offset: usize,
}

impl EncodedAdapter {
    pub fn payload_len(&self) -> usize {
        self.bytes.len() - self.payload_offset
    }
}

/// Layout: `FGLA`, u16 version, u8 wire width, f64 scaling, u32 rank,
/// u32 pair count, then per pair (u16 id length, id, u32 down rows/cols,
/// u32 up rows/cols), u64 payload length, then every pair's down values
/// followed by its up values. All integers little-endian.
pub fn encode_adapter<T: Scalar>(adapter: &LoraAdapter<T>, wire: WireFormat) -> EncodedAdapter {
    let mut b = Vec::new();
    b.extend_from_slice(ADAPTER_MAGIC);
    b.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    b.push(wire.code());
    b.extend_from_slice(&adapter.config.scaling.to_le_bytes());
    b.extend_from_slice(&(adapter.config.rank as u32).to_le_bytes());
    b.extend_from_slice(&(adapter.pairs.len() as u32).to_le_bytes());
    for (id, p) in &adapter.pairs {
        b.extend_from_slice(&(id.len() as u16).to_le_bytes());
        b.extend_from_slice(id.as_bytes());
        for dim in [p.down.rows(), p.down.cols(), p.up.rows(), p.up.cols()] {
            b.extend_from_slice(&(dim as u32).to_le_bytes());
        }
    }
    let payload = param_count(adapter) * wire.bytes_per_param();
    b.extend_from_slice(&(payload as u64).to_le_bytes());
    let payload_offset = b.len();
    for p in adapter.pairs.values() {
        for &v in p.down.as_slice().iter().chain(p.up.as_slice()) {
            match wire {
                WireFormat::F32 => b.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                WireFormat::F64 => b.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    EncodedAdapter {
        bytes: b,
        payload_offset,
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("adapter", "truncated input"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_adapter<T: Scalar>(bytes: &[u8]) -> Result<LoraAdapter<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != ADAPTER_MAGIC {
        return Err(Error::format("adapter", "bad magic"));
    }
    let version = c.u16()?;
    if version != ADAPTER_VERSION {
        return Err(Error::format("adapter", format!("unsupported version {version}")));
    }
    let wire = WireFormat::from_code(c.take(1)?[0])?;
    let scaling = c.f64()?;
    let rank = c.u32()?;
    let n_pairs = c.u32()?;
    let mut layout = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = c.u16()? as usize;
        let id = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::format("adapter", e.to_string()))?
            .to_string();
        let dims = [c.u32()?, c.u32()?, c.u32()?, c.u32()?];
        if dims[0] != rank || dims[3] != rank {
            return Err(Error::format(
                "adapter",
                format!("pair `{id}` does not have rank {rank}"),
            ));
        }
        layout.push((id, dims));
    }
    let payload = c.u64()?;
    let expected: usize = layout
        .iter()
        .map(|(_, d)| (d[0] * d[1] + d[2] * d[3]) * wire.bytes_per_param())
        .sum();
    if payload != expected || c.buf.len() - c.pos != payload {
        return Err(Error::format("adapter", "payload length does not match header"));
    }
    let mut read = |n: usize| -> Result<Vec<T>> {
        let w = wire.bytes_per_param();
        let raw = c.take(n * w)?;
        Ok(raw
            .chunks_exact(w)
            .map(|ch| match wire {
                WireFormat::F32 => T::lit(f32::from_le_bytes(ch.try_into().unwrap()) as f64),
                WireFormat::F64 => T::lit(f64::from_le_bytes(ch.try_into().unwrap())),
            })
            .collect())
    };
    let mut pairs = BTreeMap::new();
    for (id, d) in &layout {
        let down = Matrix::from_vec(d[0], d[1], read(d[0] * d[1])?)?;
        let up = Matrix::from_vec(d[2], d[3], read(d[2] * d[3])?)?;
        pairs.insert(id.clone(), LoraPair { down, up });
    }
    Ok(LoraAdapter {
        config: LoraConfig {
            rank,
            scaling,
            target_layers: layout.into_iter().map(|(id, _)| id).collect(),
        },
        pairs,
    })
}
