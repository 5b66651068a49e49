//! Dataset plumbing: the NTF binary tensor format, bit reduction and uniform
//! dequantization, a synthetic Gaussian-mixture image generator, and the
//! shuffled batch source used by training.
//!
//! NTF layout (all integers little-endian, independent of host):
//!
//! ```text
//! bytes 0..4   magic "NTF1"
//! byte  4      dtype: 0 = f32, 1 = f64, 2 = u8
//! byte  5      ndim
//! then         ndim x u32 dims
//! then         row-major payload, little-endian per element
//! ```
//!
//! A scalar is ndim = 0 with a single payload element. The payload length
//! must equal the dim product times the element size exactly.

use crate::error::{Error, Result};
use crate::linalg::cholesky_inplace;
use crate::rng::{self, STREAM_DEQUANT, STREAM_SHUFFLE, STREAM_SYNTH};
use crate::tensor::Tensor;
use crate::Real;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

pub const NTF_MAGIC: [u8; 4] = *b"NTF1";

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum NtfData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl NtfData {
    pub fn len(&self) -> usize {
        match self {
            NtfData::F32(v) => v.len(),
            NtfData::F64(v) => v.len(),
            NtfData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn elem_size(&self) -> usize {
        match self {
            NtfData::F32(_) => 4,
            NtfData::F64(_) => 8,
            NtfData::U8(_) => 1,
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            NtfData::F32(_) => DTYPE_F32,
            NtfData::F64(_) => DTYPE_F64,
            NtfData::U8(_) => DTYPE_U8,
        }
    }
}

/// An in-memory NTF file: dims plus typed payload.
#[derive(Clone, Debug, PartialEq)]
pub struct NtfTensor {
    dims: Vec<usize>,
    data: NtfData,
}

fn dim_product(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |p, &d| p.checked_mul(d))
}

impl NtfTensor {
    pub fn new(dims: Vec<usize>, data: NtfData) -> Result<NtfTensor> {
        let expect = dim_product(&dims)
            .ok_or_else(|| Error::Data(format!("dims {dims:?} overflow the element count")))?;
        if expect != data.len() {
            return Err(Error::Data(format!(
                "dims {:?} need {} elements, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(NtfTensor { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &NtfData {
        &self.data
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            NtfData::U8(v) => Ok(v),
            other => Err(Error::Data(format!(
                "expected a u8 dataset, got dtype code {}",
                other.dtype_code()
            ))),
        }
    }

    /// Wrap a crate tensor for writing (dtype follows the build's `Real`).
    pub fn from_real(t: &Tensor) -> NtfTensor {
        let dims = t.shape().to_vec();
        #[cfg(not(feature = "real32"))]
        let data = NtfData::F64(t.data().to_vec());
        #[cfg(feature = "real32")]
        let data = NtfData::F32(t.data().to_vec());
        NtfTensor { dims, data }
    }

    /// Convert to the crate element type (u8 and mismatched-width floats are
    /// cast).
    pub fn to_real(&self) -> Result<Tensor> {
        let vals: Vec<Real> = match &self.data {
            NtfData::F32(v) => v.iter().map(|&x| x as Real).collect(),
            NtfData::F64(v) => v.iter().map(|&x| x as Real).collect(),
            NtfData::U8(v) => v.iter().map(|&x| x as Real).collect(),
        };
        Tensor::new(self.dims.clone(), vals)
    }
}

pub fn ntf_to_bytes(t: &NtfTensor) -> Result<Vec<u8>> {
    if t.dims.len() > u8::MAX as usize {
        return Err(Error::Data(format!(
            "too many dimensions for the format: {}",
            t.dims.len()
        )));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.dims.len() + t.data.len() * t.data.elem_size());
    out.extend_from_slice(&NTF_MAGIC);
    out.push(t.data.dtype_code());
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Data(format!("dimension {d} exceeds the format's u32 limit")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.data {
        NtfData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        NtfData::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        NtfData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

pub fn ntf_from_bytes(bytes: &[u8]) -> Result<NtfTensor> {
    ntf_parse(bytes, true).map(|(t, _)| t)
}

/// Parse one tensor from the front of `bytes`, returning it plus the number
/// of bytes consumed. Container formats with trailing records use this.
pub(crate) fn ntf_take(bytes: &[u8]) -> Result<(NtfTensor, usize)> {
    ntf_parse(bytes, false)
}

fn ntf_parse(bytes: &[u8], exact: bool) -> Result<(NtfTensor, usize)> {
    let fail = |offset: usize, what: &str| -> Error {
        Error::Data(format!("{what} at byte {offset}"))
    };
    if bytes.len() < 6 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if bytes[..4] != NTF_MAGIC {
        return Err(fail(
            0,
            &format!(
                "bad magic {:02X} {:02X} {:02X} {:02X} (expected 4E 54 46 31)",
                bytes[0], bytes[1], bytes[2], bytes[3]
            ),
        ));
    }
    let dtype = bytes[4];
    let ndim = bytes[5] as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut off = 6;
    for _ in 0..ndim {
        if off + 4 > bytes.len() {
            return Err(fail(off, "truncated dimension list"));
        }
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        dims.push(d as usize);
        off += 4;
    }
    let count = dim_product(&dims).ok_or_else(|| fail(6, "dimension product overflows"))?;
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        DTYPE_U8 => 1,
        other => return Err(fail(4, &format!("unknown dtype code {other}"))),
    };
    let need = count
        .checked_mul(elem)
        .ok_or_else(|| fail(6, "payload size overflows"))?;
    let have = bytes.len() - off;
    if have < need || (exact && have != need) {
        return Err(fail(
            off,
            &format!("payload is {have} bytes, dims require {need}"),
        ));
    }
    let body = &bytes[off..off + need];
    let data = match dtype {
        DTYPE_F32 => NtfData::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DTYPE_F64 => NtfData::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => NtfData::U8(body.to_vec()),
    };
    Ok((NtfTensor { dims, data }, off + need))
}

pub fn ntf_write(path: impl AsRef<Path>, t: &NtfTensor) -> Result<()> {
    std::fs::write(path, ntf_to_bytes(t)?).map_err(Error::Io)
}

pub fn ntf_read(path: impl AsRef<Path>) -> Result<NtfTensor> {
    let bytes = std::fs::read(path).map_err(Error::Io)?;
    ntf_from_bytes(&bytes)
}

/// Floor-reduce full-range 8-bit pixels to `bits` bits: x >> (8 - bits).
pub fn reduce_bits(x: &[u8], bits: u32) -> Result<Vec<u8>> {
    check_bits(bits)?;
    Ok(x.iter().map(|&v| v >> (8 - bits)).collect())
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > 8 {
        return Err(Error::Config(format!("bits must be in 1..=8, got {bits}")));
    }
    Ok(())
}

/// Uniform dequantization of already bit-reduced pixels: y = (x + u) / 2^bits
/// with u ~ Uniform[0,1), so y lands in [0,1).
pub fn dequantize<R: Rng>(
    x: &[u8],
    shape: &[usize],
    bits: u32,
    rng: &mut R,
) -> Result<Tensor> {
    check_bits(bits)?;
    let expect = dim_product(shape)
        .ok_or_else(|| Error::Data(format!("shape {shape:?} overflows the element count")))?;
    if expect != x.len() {
        return Err(Error::Data(format!(
            "shape {:?} needs {} pixels, got {}",
            shape,
            expect,
            x.len()
        )));
    }
    let limit = 1u16 << bits;
    let scale = 1.0 / limit as Real;
    let mut vals = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        if (v as u16) >= limit {
            return Err(Error::Data(format!(
                "pixel {v} at index {i} is out of range for {bits}-bit data; \
                 reduce_bits first"
            )));
        }
        let u: f64 = rng.gen();
        vals.push((v as Real + u as Real) * scale);
    }
    Tensor::new(shape.to_vec(), vals)
}

/// Anything the training loop can pull minibatches from. Batches must be a
/// pure function of the iteration number so that checkpoint resume replays
/// the identical sequence.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sample_shape(&self) -> (usize, usize, usize);
    fn batch(&self, iter: u64, batch_size: usize) -> Result<Tensor>;
}

/// Synthetic stand-in for an image dataset: a mixture of `modes` Gaussians
/// with smooth (RBF-kernel) spatial correlation and cross-channel mixing,
/// quantized to full-range 8-bit pixels. Deterministic in `seed`.
pub fn synth_gaussian_mixture(
    n: usize,
    shape: (usize, usize, usize),
    modes: usize,
    seed: u64,
) -> Result<NtfTensor> {
    let (c, h, w) = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "sample shape {c}x{h}x{w} has a zero extent"
        )));
    }
    if modes == 0 {
        return Err(Error::Config("modes must be at least 1".into()));
    }
    let sp = h * w;
    let mut r = rng::stream(seed, STREAM_SYNTH, 0);

    // Spatial factor: L with L L^T = RBF kernel over the pixel grid.
    let ell = (h.max(w) as Real) / 4.0;
    let mut k = vec![0.0 as Real; sp * sp];
    for p in 0..sp {
        let (py, px) = ((p / w) as Real, (p % w) as Real);
        for q in 0..sp {
            let (qy, qx) = ((q / w) as Real, (q % w) as Real);
            let d2 = (py - qy).powi(2) + (px - qx).powi(2);
            k[p * sp + q] = (-d2 / (2.0 * ell * ell)).exp();
        }
        k[p * sp + p] += 1e-6;
    }
    cholesky_inplace(&mut k, sp)?;
    let spatial_t = Tensor::new(vec![sp, sp], k)?.permuted(&[1, 0])?;

    // Channel mixer: identity plus a mild random coupling.
    let mut mix = Tensor::eye(c);
    for v in mix.data_mut() {
        *v += 0.3 * r.sample::<f64, _>(StandardNormal) as Real;
    }

    // Mode means: spread across the pixel range, with a per-channel offset.
    let mode_mean = |m: usize, ch: usize| -> Real {
        let base = 255.0 * (m as Real + 1.0) / (modes as Real + 1.0);
        let offset = if ch % 2 == 0 { -12.0 } else { 12.0 };
        base + offset
    };
    const FIELD_STD: Real = 18.0;

    let mut pixels = Vec::with_capacity(n * c * sp);
    for _ in 0..n {
        let m = r.gen_range(0..modes);
        let eps: Vec<Real> = (0..c * sp)
            .map(|_| r.sample::<f64, _>(StandardNormal) as Real)
            .collect();
        let eps = Tensor::new(vec![c, sp], eps)?;
        // Rows gain spatial correlation via L^T on the right, then channels
        // are mixed: field = mix . eps . L^T.
        let correlated = crate::tensor::matmul(&eps, &spatial_t)?;
        let field = crate::tensor::matmul(&mix, &correlated)?;
        for ch in 0..c {
            let mean = mode_mean(m, ch);
            for p in 0..sp {
                let v = mean + FIELD_STD * field.at(&[ch, p]);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    NtfTensor::new(vec![n, c, h, w], NtfData::U8(pixels))
}

/// Two well-separated 2-d Gaussian modes, equal weight, as a (n,2,1,1)
/// tensor of continuous points. The shape density-normalization checks and
/// small training-trend runs use.
pub fn synth_two_mode_points(n: usize, seed: u64) -> Result<Tensor> {
    const MEANS: [[Real; 2]; 2] = [[-3.0, -2.0], [3.0, 2.0]];
    const STDS: [Real; 2] = [0.3, 0.3];
    let mut r = rng::stream(seed, STREAM_SYNTH, 1);
    let mut vals = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let m = r.gen_range(0..2);
        for axis in 0..2 {
            let e = r.sample::<f64, _>(StandardNormal) as Real;
            vals.push(MEANS[m][axis] + STDS[axis] * e);
        }
    }
    Tensor::new(vec![n, 2, 1, 1], vals)
}

/// Shuffled, dequantizing batch server over a u8 NTF dataset.
///
/// Batches are a pure function of the iteration number: epoch shuffles are
/// keyed by (seed, epoch) and dequantization noise by (seed, iteration), so
/// training can resume from any checkpoint bit-exactly and workers can fetch
/// batches independently.
pub struct ImageBatchSource {
    data: Vec<u8>, // already reduced to `bits`
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    bits: u32,
    seed: u64,
}

impl ImageBatchSource {
    pub fn new(file: &NtfTensor, bits: u32, seed: u64) -> Result<ImageBatchSource> {
        let raw = file.as_u8()?;
        let dims = file.dims();
        if dims.len() != 4 {
            return Err(Error::Data(format!(
                "expected an (N,c,h,w) dataset, got dims {dims:?}"
            )));
        }
        let data = reduce_bits(raw, bits)?;
        Ok(ImageBatchSource {
            data,
            n: dims[0],
            c: dims[1],
            h: dims[2],
            w: dims[3],
            bits,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> Result<usize> {
        if batch_size == 0 || batch_size > self.n {
            return Err(Error::Data(format!(
                "batch size {batch_size} is outside 1..={}",
                self.n
            )));
        }
        Ok(self.n / batch_size)
    }

    /// The batch for one training iteration, dequantized to [0,1).
    pub fn batch(&self, iter: u64, batch_size: usize) -> Result<Tensor> {
        let per_epoch = self.batches_per_epoch(batch_size)? as u64;
        let epoch = iter / per_epoch;
        let slot = (iter % per_epoch) as usize;

        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng::stream(self.seed, STREAM_SHUFFLE, epoch));
        let chosen = &order[slot * batch_size..(slot + 1) * batch_size];

        let chw = self.c * self.h * self.w;
        let mut raw = Vec::with_capacity(batch_size * chw);
        for &idx in chosen {
            raw.extend_from_slice(&self.data[idx * chw..(idx + 1) * chw]);
        }
        dequantize(
            &raw,
            &[batch_size, self.c, self.h, self.w],
            self.bits,
            &mut rng::stream(self.seed, STREAM_DEQUANT, iter),
        )
    }

    /// Rows [start, start+count) in stored order, dequantized with noise
    /// keyed by (`noise_seed`, `start`) — a fixed draw for evaluation that
    /// stays consistent when the dataset is walked in chunks.
    pub fn rows(&self, start: usize, count: usize, noise_seed: u64) -> Result<Tensor> {
        if start + count > self.n {
            return Err(Error::Data(format!(
                "rows {start}..{} exceed the dataset size {}",
                start + count,
                self.n
            )));
        }
        let chw = self.c * self.h * self.w;
        let raw = &self.data[start * chw..(start + count) * chw];
        dequantize(
            raw,
            &[count, self.c, self.h, self.w],
            self.bits,
            &mut rng::stream(noise_seed, STREAM_DEQUANT, start as u64),
        )
    }
}

impl BatchSource for ImageBatchSource {
    fn len(&self) -> usize {
        self.n
    }

    fn sample_shape(&self) -> (usize, usize, usize) {
        ImageBatchSource::sample_shape(self)
    }

    fn batch(&self, iter: u64, batch_size: usize) -> Result<Tensor> {
        ImageBatchSource::batch(self, iter, batch_size)
    }
}

/// Batch server over an in-memory tensor of continuous points — no
/// quantization, no noise. Epoch shuffles follow the same (seed, epoch)
/// stream scheme as [`ImageBatchSource`].
pub struct PointSource {
    data: Tensor, // (n, c, h, w)
    seed: u64,
}

impl PointSource {
    pub fn new(data: Tensor, seed: u64) -> Result<PointSource> {
        if data.shape().len() != 4 {
            return Err(Error::Data(format!(
                "expected an (N,c,h,w) tensor, got shape {:?}",
                data.shape()
            )));
        }
        Ok(PointSource { data, seed })
    }
}

impl BatchSource for PointSource {
    fn len(&self) -> usize {
        self.data.shape()[0]
    }

    fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    fn batch(&self, iter: u64, batch_size: usize) -> Result<Tensor> {
        let n = self.len();
        if batch_size == 0 || batch_size > n {
            return Err(Error::Data(format!(
                "batch size {batch_size} is outside 1..={n}"
            )));
        }
        let per_epoch = (n / batch_size) as u64;
        let epoch = iter / per_epoch;
        let slot = (iter % per_epoch) as usize;

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.seed, STREAM_SHUFFLE, epoch));
        let chosen = &order[slot * batch_size..(slot + 1) * batch_size];

        let (c, h, w) = BatchSource::sample_shape(self);
        let chw = c * h * w;
        let mut vals = Vec::with_capacity(batch_size * chw);
        for &idx in chosen {
            vals.extend_from_slice(&self.data.data()[idx * chw..(idx + 1) * chw]);
        }
        Tensor::new(vec![batch_size, c, h, w], vals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// An "RNG" that always produces the same uniform value; next_u64 is
    /// chosen so rand's [0,1) float conversion yields exactly `u`.
    struct ConstUniform(u64);

    impl ConstUniform {
        fn emitting(u: f64) -> ConstUniform {
            // rand 0.8 builds a f64 in [0,1) from the top 53 bits.
            ConstUniform(((u * (1u64 << 53) as f64) as u64) << 11)
        }
    }

    impl RngCore for ConstUniform {
        fn next_u32(&mut self) -> u32 {
            (self.0 >> 32) as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for b in dest {
                *b = 0;
            }
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            self.fill_bytes(dest);
            Ok(())
        }
    }

    #[test]
    fn ntf_round_trip_is_bitwise() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..48).map(|_| r.gen_range(-8.0..8.0)).collect();
        let t = NtfTensor::new(vec![3, 4, 4], NtfData::F64(vals.clone())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ntf");
        ntf_write(&path, &t).unwrap();
        let back = ntf_read(&path).unwrap();
        assert_eq!(back.dims(), &[3, 4, 4]);
        match back.data() {
            NtfData::F64(v) => {
                for (a, b) in vals.iter().zip(v) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("dtype changed in round trip"),
        }

        // f32 and u8 payloads round-trip too.
        let t = NtfTensor::new(vec![2, 3], NtfData::F32(vec![0.5, -1.0, 3.25, 0.0, 1e-8, 9.0]))
            .unwrap();
        assert_eq!(ntf_from_bytes(&ntf_to_bytes(&t).unwrap()).unwrap(), t);
        let t = NtfTensor::new(vec![4], NtfData::U8(vec![0, 127, 128, 255])).unwrap();
        assert_eq!(ntf_from_bytes(&ntf_to_bytes(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn ntf_scalar_round_trip() {
        let t = NtfTensor::new(vec![], NtfData::F64(vec![42.5])).unwrap();
        let bytes = ntf_to_bytes(&t).unwrap();
        assert_eq!(bytes.len(), 6 + 8);
        let back = ntf_from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_real().unwrap().item().unwrap(), 42.5);
    }

    #[test]
    fn ntf_header_layout_is_frozen() {
        let t = NtfTensor::new(vec![10, 1, 8, 8], NtfData::U8(vec![7u8; 640])).unwrap();
        let bytes = ntf_to_bytes(&t).unwrap();
        assert_eq!(&bytes[..6], &[0x4E, 0x54, 0x46, 0x31, 0x02, 0x04]);
        assert_eq!(&bytes[6..10], &10u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &8u32.to_le_bytes());
        assert_eq!(&bytes[18..22], &8u32.to_le_bytes());
        assert_eq!(bytes.len(), 22 + 640);
    }

    #[test]
    fn ntf_rejects_malformed_files_with_offsets() {
        let good = ntf_to_bytes(
            &NtfTensor::new(vec![2, 2], NtfData::U8(vec![1, 2, 3, 4])).unwrap(),
        )
        .unwrap();

        let assert_err = |bytes: &[u8], needle: &str| {
            let msg = match ntf_from_bytes(bytes) {
                Ok(_) => panic!("expected parse failure for {needle}"),
                Err(e) => e.to_string(),
            };
            assert!(msg.contains(needle), "message {msg:?} lacks {needle:?}");
        };

        assert_err(&good[..3], "at byte 3");

        let mut bad = good.clone();
        bad[0] = 0x4D;
        assert_err(&bad, "bad magic");
        assert_err(&bad, "at byte 0");

        let mut bad = good.clone();
        bad[4] = 9;
        assert_err(&bad, "unknown dtype code 9");
        assert_err(&bad, "at byte 4");

        // Truncated dims: claim 4 dims but provide bytes for fewer.
        let mut bad = good[..10].to_vec();
        bad[5] = 4;
        assert_err(&bad, "truncated dimension list");

        // Payload shorter than the dims demand.
        let bad = &good[..good.len() - 1];
        assert_err(bad, "payload is 3 bytes, dims require 4");

        // Dim product overflowing 64 bits is rejected before allocation.
        let mut bad = Vec::from(NTF_MAGIC);
        bad.push(DTYPE_U8);
        bad.push(3);
        for _ in 0..3 {
            bad.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert_err(&bad, "overflows");
    }

    #[test]
    fn dequantize_formula_is_frozen() {
        // (0 + 0.5) / 256
        let mut half = ConstUniform::emitting(0.5);
        let y = dequantize(&[0], &[1], 8, &mut half).unwrap();
        assert_eq!(y.data()[0], 0.001953125);

        // 5-bit pipeline: 255 floors to 31, so y lands in [31/32, 1).
        let reduced = reduce_bits(&[255], 5).unwrap();
        assert_eq!(reduced, vec![31]);
        let mut half = ConstUniform::emitting(0.5);
        let y = dequantize(&reduced, &[1], 5, &mut half).unwrap();
        assert_eq!(y.data()[0], 31.5 / 32.0);
        assert!(y.data()[0] >= 31.0 / 32.0 && y.data()[0] < 1.0);

        // 7 >> 3 floors to 0, not rounds to 1.
        assert_eq!(reduce_bits(&[7], 5).unwrap(), vec![0]);
    }

    #[test]
    fn dequantize_outputs_cover_exactly_the_unit_interval() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let pixels: Vec<u8> = (0..4096).map(|_| r.gen()).collect();
        let y = dequantize(&pixels, &[4096], 8, &mut r).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..1.0).contains(&v)));

        // Unreduced values under a smaller bit depth are a data error.
        let err = match dequantize(&[32], &[1], 5, &mut r) {
            Ok(_) => panic!("expected out-of-range error"),
            Err(e) => e.to_string(),
        };
        assert!(err.contains("out of range"), "got {err}");
    }

    #[test]
    fn synth_is_deterministic_and_mixture_shaped() {
        let a = synth_gaussian_mixture(64, (1, 2, 2), 2, 5).unwrap();
        let b = synth_gaussian_mixture(64, (1, 2, 2), 2, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_gaussian_mixture(64, (1, 2, 2), 2, 6).unwrap();
        assert_ne!(a, c);

        let empty = synth_gaussian_mixture(0, (3, 4, 4), 2, 5).unwrap();
        assert_eq!(empty.dims(), &[0, 3, 4, 4]);
        assert!(empty.data().is_empty());

        assert!(synth_gaussian_mixture(4, (1, 2, 2), 0, 5).is_err());

        // With two modes at pixel means ~73 and ~158, the sample mean sits
        // strictly between them.
        let big = synth_gaussian_mixture(4000, (1, 2, 2), 2, 7).unwrap();
        let pix = big.as_u8().unwrap();
        let mean = pix.iter().map(|&v| v as f64).sum::<f64>() / pix.len() as f64;
        assert!(mean > 85.0 && mean < 150.0, "mixture mean {mean}");
    }

    #[test]
    fn batch_source_covers_each_epoch_exactly_once() {
        // Pixel value = sample index, so a batch reveals which rows it drew.
        let n = 8;
        let file = NtfTensor::new(
            vec![n, 1, 1, 1],
            NtfData::U8((0..n as u8).map(|i| i * 8).collect()),
        )
        .unwrap();
        let src = ImageBatchSource::new(&file, 8, 123).unwrap();
        assert_eq!(src.batches_per_epoch(4).unwrap(), 2);

        let recover = |t: &Tensor| -> Vec<u8> {
            t.data().iter().map(|&v| (v * 256.0) as u8 / 8).collect()
        };
        let mut epoch0: Vec<u8> = [src.batch(0, 4).unwrap(), src.batch(1, 4).unwrap()]
            .iter()
            .flat_map(|t| recover(t))
            .collect();
        epoch0.sort_unstable();
        assert_eq!(epoch0, (0..n as u8).collect::<Vec<_>>());

        // Determinism: rebuilding the source reproduces batches bitwise.
        let src2 = ImageBatchSource::new(&file, 8, 123).unwrap();
        assert_eq!(src.batch(3, 4).unwrap().data(), src2.batch(3, 4).unwrap().data());

        // Different epochs see different orders (with n=8 a collision is
        // astronomically unlikely under distinct shuffle streams).
        let e0: Vec<u8> = recover(&src.batch(0, 8).unwrap());
        let e1: Vec<u8> = recover(&src.batch(1, 8).unwrap());
        assert_ne!(e0, e1);
        let mut s0 = e0.clone();
        let mut s1 = e1.clone();
        s0.sort_unstable();
        s1.sort_unstable();
        assert_eq!(s0, s1);
    }

    #[test]
    fn two_mode_points_and_point_batches() {
        let pts = synth_two_mode_points(2000, 9).unwrap();
        assert_eq!(pts.shape(), &[2000, 2, 1, 1]);
        assert_eq!(pts.data(), synth_two_mode_points(2000, 9).unwrap().data());
        // Equal-weight modes at x = ±3 put the overall mean near 0 and the
        // |x| mean near 3.
        let xs: Vec<Real> = (0..2000).map(|i| pts.at(&[i, 0, 0, 0])).collect();
        let mean = xs.iter().sum::<Real>() / 2000.0;
        let mean_abs = xs.iter().map(|v| v.abs()).sum::<Real>() / 2000.0;
        assert!(mean.abs() < 0.3, "mode balance off: mean {mean}");
        assert!((mean_abs - 3.0).abs() < 0.3, "mode spread off: {mean_abs}");

        let src = PointSource::new(pts.clone(), 42).unwrap();
        assert_eq!(BatchSource::len(&src), 2000);
        assert_eq!(BatchSource::sample_shape(&src), (2, 1, 1));
        let b0 = src.batch(0, 64).unwrap();
        assert_eq!(b0.shape(), &[64, 2, 1, 1]);
        // Every batch row is one of the original points.
        let row = &b0.data()[..2];
        assert!((0..2000).any(|i| pts.at(&[i, 0, 0, 0]) == row[0]
            && pts.at(&[i, 1, 0, 0]) == row[1]));
        assert_eq!(
            src.batch(5, 64).unwrap().data(),
            src.batch(5, 64).unwrap().data()
        );
    }

    #[test]
    fn bpd_is_insensitive_to_the_dequantization_draw() {
        use crate::model::{build_model, FlowConfig, PermutationKind};

        let file = synth_gaussian_mixture(64, (1, 2, 2), 2, 11).unwrap();
        let src = ImageBatchSource::new(&file, 8, 0).unwrap();

        let cfg = FlowConfig {
            levels: 1,
            steps: 2,
            coupling_channels: 6,
            permutation: PermutationKind::Woodbury,
            in_shape: (1, 2, 2),
            bits: 8,
            d_c: Some(vec![2]),
            d_s: Some(vec![1]),
            d_h: None,
            d_w: None,
        };
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut model = build_model(cfg, &mut r).unwrap();
        model.initialize_actnorms(&src.rows(0, 64, 0).unwrap()).unwrap();
        model.perturb_params(&mut r, 0.05);

        let mut lo = Real::INFINITY;
        let mut hi = Real::NEG_INFINITY;
        for noise_seed in 0..64 {
            let x = src.rows(0, 64, noise_seed).unwrap();
            let (_, bpd) = model.log_likelihood(&x).unwrap();
            let mean = bpd.data().iter().sum::<Real>() / 64.0;
            lo = lo.min(mean);
            hi = hi.max(mean);
        }
        assert!(
            hi - lo < 0.01,
            "bpd moved {} across dequantization draws",
            hi - lo
        );
    }
}
