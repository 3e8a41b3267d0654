//! Named parameter tensors and the `SCWT` weight snapshot container.
//!
//! Snapshot layout (all integers little-endian):
//!
//! ```text
//! "SCWT"                    4 bytes magic
//! version                   u32
//! repeated until EOF:
//!   name_len                u32
//!   name                    name_len bytes of UTF-8
//!   rank                    u32
//!   dims                    rank × u64
//!   values                  prod(dims) × f64
//! ```

use std::io::{Read, Write};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{xavier_uniform, ConvGeom, ConvParams};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SCWT";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Flat registry of every learnable tensor in a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor {
            name: name.into(),
            dims,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Serialize as an `SCWT` snapshot.
    pub fn write_snapshot(&self, mut out: impl Write) -> Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name)?;
            out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &t.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_snapshot(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_snapshot_bytes(&bytes)
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::Format("missing SCWT magic".into()));
        }
        let version = cur.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
                .to_string();
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            store.add(name, dims, data);
        }
        Ok(store)
    }

    /// Overwrite values from another store with identical names and dims.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.tensors.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "snapshot has {} tensors, model expects {}",
                other.tensors.len(),
                self.tensors.len()
            )));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.name != theirs.name || mine.dims != theirs.dims {
                return Err(Error::Format(format!(
                    "snapshot tensor {} {:?} does not match model tensor {} {:?}",
                    theirs.name, theirs.dims, mine.name, mine.dims
                )));
            }
            mine.data.clone_from(&theirs.data);
        }
        Ok(())
    }

    /// Hex SHA-256 of the snapshot bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_snapshot_bytes()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated snapshot".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Handle to a convolution whose weight and bias live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub geom: ConvGeom,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    /// Glorot-uniform weights, zero bias.
    pub fn xavier(store: &mut ParamStore, name: &str, geom: ConvGeom, rng: &mut impl Rng) -> Self {
        let w = xavier_uniform(geom.weight_len(), geom.fan_in(), geom.fan_out(), rng);
        Self::with_values(store, name, geom, w, vec![0.0; geom.out_channels])
    }

    pub fn zeros(store: &mut ParamStore, name: &str, geom: ConvGeom) -> Self {
        Self::with_values(store, name, geom, vec![0.0; geom.weight_len()], vec![0.0; geom.out_channels])
    }

    pub fn with_values(
        store: &mut ParamStore,
        name: &str,
        geom: ConvGeom,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w],
            weight,
        );
        let bias = store.add(format!("{name}.bias"), vec![geom.out_channels], bias);
        Self { geom, weight, bias }
    }

    /// Snapshot of the current values as standalone [`ConvParams`].
    pub fn params(&self, store: &ParamStore) -> ConvParams {
        ConvParams {
            geom: self.geom,
            weight: store.get(self.weight).data.clone(),
            bias: store.get(self.bias).data.clone(),
        }
    }

    pub fn set(&self, store: &mut ParamStore, p: &ConvParams) {
        assert_eq!(p.geom, self.geom, "conv geometry mismatch");
        store.get_mut(self.weight).data.clone_from(&p.weight);
        store.get_mut(self.bias).data.clone_from(&p.bias);
    }
}

/// Per-channel affine normalization `y = gamma * x + beta` (statistics frozen at identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn identity(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![channels], vec![1.0; channels]);
        let beta = store.add(format!("{name}.beta"), vec![channels], vec![0.0; channels]);
        Self { channels, gamma, beta }
    }
}
