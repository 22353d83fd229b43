//! Top-q sparsification with error feedback, sparse arithmetic, wire encoding
//! and closed-form expectations for the size of aggregated sparse vectors.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bits needed to address one of `n_d` entries.
pub fn index_bits(n_d: usize) -> u32 {
    if n_d <= 1 {
        0
    } else {
        usize::BITS - (n_d - 1).leading_zeros()
    }
}

/// `floor(n_d q)`, robust to representation error in `q`.
pub fn n_active(n_d: usize, q: f64) -> usize {
    ((n_d as f64) * q + 1e-9).floor() as usize
}

fn check_ratio(q: f64, n_d: usize) -> Result<usize> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sparsification ratio {q} outside (0, 1]")));
    }
    match n_active(n_d, q) {
        0 => Err(Error::DegenerateRatio { q, dim: n_d }),
        n => Ok(n),
    }
}

/// Index/value sparse vector with strictly increasing indices and nonzero values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient<T> {
    pub n_d: usize,
    pub indices: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Scalar> SparseGradient<T> {
    pub fn empty(n_d: usize) -> Self {
        Self { n_d, indices: Vec::new(), values: Vec::new() }
    }

    /// Keeps every exactly-nonzero entry of `dense`.
    pub fn from_dense(dense: &[T]) -> Self {
        let mut out = Self::empty(dense.len());
        for (i, &v) in dense.iter().enumerate() {
            if v != T::zero() {
                out.indices.push(i as u32);
                out.values.push(v);
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn index_bits(&self) -> u32 {
        index_bits(self.n_d)
    }

    pub fn wire_bits(&self, elem_bits: u32) -> u64 {
        self.nnz() as u64 * u64::from(elem_bits + self.index_bits())
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_d];
        self.add_into(&mut out);
        out
    }

    pub fn add_into(&self, dense: &mut [T]) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            dense[i as usize] += v;
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.values {
            *v *= k;
        }
        if k == T::zero() {
            self.indices.clear();
            self.values.clear();
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.indices.len() == self.values.len()
            && self.indices.windows(2).all(|w| w[0] < w[1])
            && self.indices.last().is_none_or(|&i| (i as usize) < self.n_d)
            && self.values.iter().all(|v| *v != T::zero())
    }
}

/// Keeps the `floor(n_d q)` largest-magnitude entries; equal magnitudes prefer
/// the lower index. Exact zeros among them are not stored.
pub fn top_q<T: Scalar>(vec: &[T], q: f64) -> Result<SparseGradient<T>> {
    let n_a = check_ratio(q, vec.len())?;
    if n_a >= vec.len() {
        return Ok(SparseGradient::from_dense(vec));
    }
    let rank = |a: &u32, b: &u32| {
        let (x, y) = (vec[*a as usize].abs(), vec[*b as usize].abs());
        y.partial_cmp(&x).unwrap_or(Ordering::Equal).then(a.cmp(b))
    };
    let mut order: Vec<u32> = (0..vec.len() as u32).collect();
    order.select_nth_unstable_by(n_a - 1, rank);
    let mut kept: Vec<u32> = order[..n_a].iter().copied().filter(|&i| vec[i as usize] != T::zero()).collect();
    kept.sort_unstable();
    let values = kept.iter().map(|&i| vec[i as usize]).collect();
    Ok(SparseGradient { n_d: vec.len(), indices: kept, values })
}

/// Per-satellite accumulated sparsification error.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualState<T> {
    pub delta: Vec<T>,
}

impl<T: Scalar> ResidualState<T> {
    pub fn zeros(n_d: usize) -> Self {
        Self { delta: vec![T::zero(); n_d] }
    }

    pub fn reset(&mut self) {
        self.delta.iter_mut().for_each(|d| *d = T::zero());
    }
}

/// Error-feedback sparsification: `acc = g + delta`, emit `Top_q(acc)`, keep the rest in `delta`.
pub fn compress_gradient<T: Scalar>(g: &[T], state: &mut ResidualState<T>, q: f64) -> Result<SparseGradient<T>> {
    if state.delta.is_empty() {
        state.delta = vec![T::zero(); g.len()];
    }
    if state.delta.len() != g.len() {
        return Err(Error::DimensionMismatch { expected: state.delta.len(), got: g.len() });
    }
    for (d, &x) in state.delta.iter_mut().zip(g) {
        *d += x;
    }
    let out = top_q(&state.delta, q)?;
    for &i in &out.indices {
        state.delta[i as usize] = T::zero();
    }
    Ok(out)
}

/// Merge of two sparse vectors; entries that cancel exactly are dropped.
pub fn sparse_add<T: Scalar>(a: &SparseGradient<T>, b: &SparseGradient<T>) -> Result<SparseGradient<T>> {
    if a.n_d != b.n_d {
        return Err(Error::DimensionMismatch { expected: a.n_d, got: b.n_d });
    }
    let mut out = SparseGradient::empty(a.n_d);
    out.indices.reserve(a.nnz() + b.nnz());
    out.values.reserve(a.nnz() + b.nnz());
    let (mut i, mut j) = (0, 0);
    let mut push = |idx: u32, v: T| {
        if v != T::zero() {
            out.indices.push(idx);
            out.values.push(v);
        }
    };
    while i < a.nnz() || j < b.nnz() {
        let ia = a.indices.get(i).copied().unwrap_or(u32::MAX);
        let ib = b.indices.get(j).copied().unwrap_or(u32::MAX);
        match ia.cmp(&ib) {
            Ordering::Less => {
                push(ia, a.values[i]);
                i += 1;
            }
            Ordering::Greater => {
                push(ib, b.values[j]);
                j += 1;
            }
            Ordering::Equal => {
                push(ia, a.values[i] + b.values[j]);
                i += 1;
                j += 1;
            }
        }
    }
    Ok(out)
}

/// Gradient compressor applied at the end of local training.
#[derive(Debug, Clone, PartialEq)]
pub enum Compressor<T> {
    Identity,
    TopQ { q: f64, residual: ResidualState<T> },
}

impl<T: Scalar> Compressor<T> {
    pub fn top_q(q: f64) -> Self {
        Compressor::TopQ { q, residual: ResidualState::default() }
    }

    pub fn compress(&mut self, g: Vec<T>) -> Result<Payload<T>> {
        match self {
            Compressor::Identity => Ok(Payload::Dense(g)),
            Compressor::TopQ { q, residual } => Ok(Payload::Sparse(compress_gradient(&g, residual, *q)?)),
        }
    }
}

/// A gradient on the wire, either dense or sparse.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload<T> {
    Dense(Vec<T>),
    Sparse(SparseGradient<T>),
}

impl<T: Scalar> Payload<T> {
    pub fn zeros_like(&self) -> Self {
        match self {
            Payload::Dense(v) => Payload::Dense(vec![T::zero(); v.len()]),
            Payload::Sparse(s) => Payload::Sparse(SparseGradient::empty(s.n_d)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Payload::Dense(v) => v.len(),
            Payload::Sparse(s) => s.n_d,
        }
    }

    /// Dense vectors carry every element without indices.
    pub fn wire_bits(&self, elem_bits: u32) -> u64 {
        match self {
            Payload::Dense(v) => v.len() as u64 * u64::from(elem_bits),
            Payload::Sparse(s) => s.wire_bits(elem_bits),
        }
    }

    pub fn to_dense(&self) -> Vec<T> {
        match self {
            Payload::Dense(v) => v.clone(),
            Payload::Sparse(s) => s.to_dense(),
        }
    }

    pub fn scale(&mut self, k: T) {
        match self {
            Payload::Dense(v) => v.iter_mut().for_each(|x| *x *= k),
            Payload::Sparse(s) => s.scale(k),
        }
    }

    /// Sum of two payloads; stays sparse only if both are sparse.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(match (self, other) {
            (Payload::Sparse(a), Payload::Sparse(b)) => Payload::Sparse(sparse_add(a, b)?),
            (Payload::Dense(a), b) | (b, Payload::Dense(a)) => {
                let mut out = a.clone();
                match b {
                    Payload::Dense(v) => out.iter_mut().zip(v).for_each(|(o, x)| *o += *x),
                    Payload::Sparse(s) => s.add_into(&mut out),
                }
                Payload::Dense(out)
            }
        })
    }
}

/// Expected support size of a sum of `l` vectors with independent uniformly
/// random supports of size `floor(n_d q)`.
pub fn expected_nnz(n_d: usize, q: f64, l: u32) -> f64 {
    let n = n_d as f64;
    let p = n_active(n_d, q) as f64 / n;
    n - n * (1.0 - p).powi(l as i32)
}

/// Expected bits sent along an `h`-hop chain where hop `j` carries the sum of `j` sparse vectors.
pub fn expected_total_bits(n_d: usize, elem_bits: u32, q: f64, h: u32) -> f64 {
    let n = n_d as f64;
    let n_a = n_active(n_d, q) as f64;
    let per_entry = f64::from(elem_bits + index_bits(n_d));
    let tail = (1.0 - n_a / n).powi(h as i32 + 1);
    n * per_entry * (f64::from(h) + 1.0 - (n / n_a) * (1.0 - tail))
}

/// Sparse replacement for `ceil(K_p / 2)` gradient transmissions in the aggregation-time estimate.
pub fn sparse_routing_size(n_d: usize, elem_bits: u32, q: f64, k_p: usize) -> f64 {
    expected_total_bits(n_d, elem_bits, q, k_p.div_ceil(2) as u32)
}

const HEADER_BYTES: usize = 9;

fn check_elem_bits(bits: u32) -> Result<()> {
    match bits {
        16 | 32 | 64 => Ok(()),
        other => Err(Error::Malformed(format!("unsupported element width {other}"))),
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u128,
    fill: u32,
}

impl BitWriter {
    fn push(&mut self, value: u64, bits: u32) {
        if bits == 0 {
            return;
        }
        let masked = if bits == 64 { value } else { value & ((1u64 << bits) - 1) };
        self.acc |= u128::from(masked) << self.fill;
        self.fill += bits;
        while self.fill >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.fill -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.fill > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u128,
    fill: u32,
}

impl BitReader<'_> {
    fn pull(&mut self, bits: u32) -> Result<u64> {
        if bits == 0 {
            return Ok(0);
        }
        while self.fill < bits {
            let byte = *self.data.get(self.pos).ok_or_else(|| Error::Malformed("truncated payload".into()))?;
            self.acc |= u128::from(byte) << self.fill;
            self.pos += 1;
            self.fill += 8;
        }
        let v = if bits == 64 { self.acc as u64 } else { (self.acc as u64) & ((1u64 << bits) - 1) };
        self.acc >>= bits;
        self.fill -= bits;
        Ok(v)
    }
}

fn value_bits<T: Scalar>(v: T, elem_bits: u32) -> u64 {
    match elem_bits {
        16 => u64::from(half::f16::from_f64(v.as_f64()).to_bits()),
        32 => u64::from((v.as_f64() as f32).to_bits()),
        _ => v.as_f64().to_bits(),
    }
}

fn bits_value<T: Scalar>(bits: u64, elem_bits: u32) -> T {
    let x = match elem_bits {
        16 => half::f16::from_bits(bits as u16).to_f64(),
        32 => f64::from(f32::from_bits(bits as u32)),
        _ => f64::from_bits(bits),
    };
    T::lit(x)
}

/// Packed `(index, value)` pairs, LSB first; exactly `ceil(nnz (w + idx) / 8)` bytes.
pub fn encode_entries<T: Scalar>(g: &SparseGradient<T>, elem_bits: u32) -> Result<Vec<u8>> {
    check_elem_bits(elem_bits)?;
    let idx_bits = g.index_bits();
    let mut w = BitWriter { out: Vec::with_capacity((g.wire_bits(elem_bits) as usize).div_ceil(8)), acc: 0, fill: 0 };
    for (&i, &v) in g.indices.iter().zip(&g.values) {
        w.push(u64::from(i), idx_bits);
        w.push(value_bits(v, elem_bits), elem_bits);
    }
    Ok(w.finish())
}

/// Header (`n_d` u32 LE, count u32 LE, element width u8) followed by the packed entries.
pub fn encode<T: Scalar>(g: &SparseGradient<T>, elem_bits: u32) -> Result<Vec<u8>> {
    let n_d = u32::try_from(g.n_d).map_err(|_| Error::Malformed("dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_BYTES);
    out.extend_from_slice(&n_d.to_le_bytes());
    out.extend_from_slice(&(g.nnz() as u32).to_le_bytes());
    out.push(elem_bits as u8);
    out.extend(encode_entries(g, elem_bits)?);
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(SparseGradient<T>, u32)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Malformed("missing header".into()));
    }
    let n_d = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let elem_bits = u32::from(bytes[8]);
    check_elem_bits(elem_bits)?;
    let idx_bits = index_bits(n_d);
    let expected = (count as u64 * u64::from(elem_bits + idx_bits)).div_ceil(8) as usize;
    if bytes.len() - HEADER_BYTES != expected {
        return Err(Error::Malformed(format!("expected {expected} payload bytes, got {}", bytes.len() - HEADER_BYTES)));
    }
    let mut r = BitReader { data: &bytes[HEADER_BYTES..], pos: 0, acc: 0, fill: 0 };
    let mut g = SparseGradient::empty(n_d);
    for _ in 0..count {
        g.indices.push(r.pull(idx_bits)? as u32);
        g.values.push(bits_value(r.pull(elem_bits)?, elem_bits));
    }
    if !g.is_well_formed() {
        return Err(Error::Malformed("indices not strictly increasing, out of range, or zero values".into()));
    }
    Ok((g, elem_bits))
}
