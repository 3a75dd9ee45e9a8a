//! `VOL1` binary volume format.
//!
//! Layout (little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `VOL1`                            |
//! | 1     | kind: 0 scalar, 1 probability, 2 labels |
//! | 1     | dtype: 0 f32, 1 u16                     |
//! | 2     | reserved, must be 0                     |
//! | 4×4   | K, D, H, W as u32                       |
//! | ...   | payload in C order, channel-major       |
//!
//! Scalar volumes carry `K = 1`. Label maps store their class count in `K`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, ProbVolume, ScalarVolume};

pub const MAGIC: [u8; 4] = *b"VOL1";
pub const HEADER_LEN: usize = 24;
/// Largest payload accepted by the reader.
pub const MAX_PAYLOAD: u64 = 4 << 30;

/// Channel sums of an f32 probability payload are accepted as normalized within this.
const FILE_NORMALIZED_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Scalar = 0,
    Prob = 1,
    Label = 2,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Scalar => "scalar",
            Kind::Prob => "prob",
            Kind::Label => "label",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Prob(ProbVolume),
    Label(LabelMap),
}

impl Volume {
    pub fn kind(&self) -> Kind {
        match self {
            Volume::Scalar(_) => Kind::Scalar,
            Volume::Prob(_) => Kind::Prob,
            Volume::Label(_) => Kind::Label,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Volume::Scalar(v) => v.dims(),
            Volume::Prob(v) => v.dims(),
            Volume::Label(v) => v.dims(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(v) => Ok(v),
            other => Err(Error::KindMismatch { expected: "scalar", found: other.kind().name() }),
        }
    }

    pub fn into_prob(self) -> Result<ProbVolume> {
        match self {
            Volume::Prob(v) => Ok(v),
            other => Err(Error::KindMismatch { expected: "prob", found: other.kind().name() }),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            Volume::Label(v) => Ok(v),
            other => Err(Error::KindMismatch { expected: "label", found: other.kind().name() }),
        }
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Scalar(v)
    }
}

impl From<ProbVolume> for Volume {
    fn from(v: ProbVolume) -> Self {
        Volume::Prob(v)
    }
}

impl From<LabelMap> for Volume {
    fn from(v: LabelMap) -> Self {
        Volume::Label(v)
    }
}

fn u32_dim(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::shape(format!("{what}={v} does not fit in u32")))
}

fn header(kind: Kind, k: usize, dims: Dims) -> Result<[u8; HEADER_LEN]> {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4] = kind as u8;
    h[5] = if kind == Kind::Label { 1 } else { 0 };
    let fields = [
        u32_dim(k, "K")?,
        u32_dim(dims.d, "D")?,
        u32_dim(dims.h, "H")?,
        u32_dim(dims.w, "W")?,
    ];
    for (j, f) in fields.iter().enumerate() {
        h[8 + 4 * j..12 + 4 * j].copy_from_slice(&f.to_le_bytes());
    }
    Ok(h)
}

/// Serializes a volume to bytes. Values are narrowed to f32 for scalar and
/// probability volumes.
pub fn encode(volume: &Volume) -> Result<Vec<u8>> {
    let (kind, k, dims) = match volume {
        Volume::Scalar(v) => (Kind::Scalar, 1, v.dims()),
        Volume::Prob(v) => (Kind::Prob, v.k(), v.dims()),
        Volume::Label(v) => (Kind::Label, v.k(), v.dims()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * k * dims.len());
    out.extend_from_slice(&header(kind, k, dims)?);
    match volume {
        Volume::Scalar(v) => v.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Volume::Prob(v) => v.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Volume::Label(v) => v.data().iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

struct Header {
    kind: Kind,
    k: u32,
    dims: [u32; 3],
}

impl Header {
    fn parse(h: &[u8; HEADER_LEN]) -> Result<Self> {
        let magic: [u8; 4] = h[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let kind = match h[4] {
            0 => Kind::Scalar,
            1 => Kind::Prob,
            2 => Kind::Label,
            other => return Err(Error::BadHeader { field: "kind", value: other as u32 }),
        };
        let dtype = h[5];
        let expected_dtype = if kind == Kind::Label { 1 } else { 0 };
        if dtype != expected_dtype {
            return Err(Error::BadHeader { field: "dtype", value: dtype as u32 });
        }
        let reserved = u16::from_le_bytes([h[6], h[7]]);
        if reserved != 0 {
            return Err(Error::BadHeader { field: "reserved", value: reserved as u32 });
        }
        let f = |j: usize| u32::from_le_bytes(h[8 + 4 * j..12 + 4 * j].try_into().unwrap());
        let (k, d, hh, w) = (f(0), f(1), f(2), f(3));
        let hdr = Header { kind, k, dims: [d, hh, w] };
        if hdr.payload_len().is_none() {
            return Err(Error::DimOverflow { dims: [k, d, hh, w] });
        }
        match kind {
            Kind::Scalar if k != 1 => return Err(Error::BadHeader { field: "K", value: k }),
            Kind::Prob if k < 2 => return Err(Error::BadHeader { field: "K", value: k }),
            Kind::Label if k == 0 || k > u16::MAX as u32 + 1 => {
                return Err(Error::BadHeader { field: "K", value: k })
            }
            _ => {}
        }
        Ok(hdr)
    }

    fn elem_size(&self) -> u64 {
        if self.kind == Kind::Label {
            2
        } else {
            4
        }
    }

    /// Payload size in bytes, `None` past the 4 GiB limit.
    fn payload_len(&self) -> Option<u64> {
        let channels = if self.kind == Kind::Label { 1 } else { self.k as u64 };
        let n = [channels, self.dims[0] as u64, self.dims[1] as u64, self.dims[2] as u64]
            .iter()
            .try_fold(self.elem_size(), |acc, &x| acc.checked_mul(x))?;
        (n <= MAX_PAYLOAD).then_some(n)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic { found: bytes[..4].try_into().unwrap() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let hdr = Header::parse(bytes[..HEADER_LEN].try_into().unwrap())?;
    let expected = hdr.payload_len().unwrap();
    let payload = &bytes[HEADER_LEN..];
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated { expected, found: payload.len() as u64 });
    }
    if (payload.len() as u64) > expected {
        return Err(Error::shape(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - expected
        )));
    }
    decode_payload(&hdr, payload)
}

fn decode_payload(hdr: &Header, payload: &[u8]) -> Result<Volume> {
    let dims = Dims::new(hdr.dims[0] as usize, hdr.dims[1] as usize, hdr.dims[2] as usize);
    let k = hdr.k as usize;
    match hdr.kind {
        Kind::Label => {
            let data = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            Ok(Volume::Label(LabelMap::new(k, dims, data)?))
        }
        Kind::Scalar | Kind::Prob => {
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if hdr.kind == Kind::Scalar {
                Ok(Volume::Scalar(ScalarVolume::new(dims, data)?))
            } else {
                Ok(Volume::Prob(ProbVolume::new(k, dims, data)?.detect_normalized(FILE_NORMALIZED_TOL)))
            }
        }
    }
}

pub fn write_vol1(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(volume)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `VOL1` file; the header is validated before the payload is allocated.
pub fn read_vol1(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = f.read(&mut head[got..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got >= 4 && head[..4] != MAGIC {
        return Err(Error::BadMagic { found: head[..4].try_into().unwrap() });
    }
    if got < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, found: got as u64 });
    }
    let hdr = Header::parse(&head)?;
    let expected = hdr.payload_len().unwrap();
    let actual = f.metadata().map_err(|e| Error::io(path, e))?.len().saturating_sub(HEADER_LEN as u64);
    if actual < expected {
        return Err(Error::Truncated { expected, found: actual });
    }
    let mut payload = Vec::with_capacity(expected as usize);
    f.take(expected).read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated { expected, found: payload.len() as u64 });
    }
    decode_payload(&hdr, &payload)
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    read_vol1(path)?.into_scalar()
}

pub fn read_prob(path: impl AsRef<Path>) -> Result<ProbVolume> {
    read_vol1(path)?.into_prob()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_vol1(path)?.into_labels()
}
