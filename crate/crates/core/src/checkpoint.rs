//! Binary checkpoint of a network's parameters and buffers.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   8 bytes   "ANCHCKPT"
//! version u32       1
//! count   u32       number of entries
//! entry*  name_len u32, name (UTF-8), ndim u32, dims u64 × ndim,
//!         values f64 × product(dims)
//! ```
//!
//! Entries are every `ParamStore` entry in store order, then
//! `W_bn_{i}.running_mean` / `W_bn_{i}.running_var` for each batch norm,
//! then optionally `input.mean` and `input.std` (shape `[3]`) holding the
//! normalization the network was trained with.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ANCHCKPT";
pub const VERSION: u32 = 1;

pub type Normalization = ([f64; 3], [f64; 3]);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: IndexMap<String, Tensor>,
}

fn bn_buffer_names(i: usize) -> (String, String) {
    (
        format!("W_bn_{}.running_mean", i + 1),
        format!("W_bn_{}.running_var", i + 1),
    )
}

impl Checkpoint {
    pub fn from_network(net: &Network, norm: Option<&Normalization>) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (name, p) in net.params().iter() {
            let mut t = p.tensor.clone();
            t.clear_grad();
            entries.insert(name.to_string(), t);
        }
        for (i, st) in net.bn_states().iter().enumerate() {
            let (m, v) = bn_buffer_names(i);
            let c = st.channels();
            entries.insert(m, Tensor::from_vec(&[c], st.running_mean.clone())?);
            entries.insert(v, Tensor::from_vec(&[c], st.running_var.clone())?);
        }
        if let Some((means, stds)) = norm {
            entries.insert("input.mean".into(), Tensor::from_vec(&[3], means.to_vec())?);
            entries.insert("input.std".into(), Tensor::from_vec(&[3], stds.to_vec())?);
        }
        Ok(Checkpoint { entries })
    }

    pub fn normalization(&self) -> Option<Normalization> {
        let m = self.entries.get("input.mean")?;
        let s = self.entries.get("input.std")?;
        let arr = |t: &Tensor| -> Option<[f64; 3]> { t.data().try_into().ok() };
        Some((arr(m)?, arr(s)?))
    }

    /// Copies stored values into `net`; names and shapes must match exactly.
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        let expected = Checkpoint::from_network(net, None)?;
        for (name, t) in &expected.entries {
            let stored = self
                .entries
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, network expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
        }
        let extra = self
            .entries
            .keys()
            .find(|k| !expected.entries.contains_key(*k) && !k.starts_with("input."));
        if let Some(k) = extra {
            return Err(Error::Checkpoint(format!("unexpected entry `{k}`")));
        }
        for (name, p) in net.params_mut().iter_mut() {
            p.tensor.data_mut().copy_from_slice(self.entries[name].data());
            p.tensor.clear_grad();
        }
        for (i, st) in net.bn_states_mut().iter_mut().enumerate() {
            let (m, v) = bn_buffer_names(i);
            st.running_mean.copy_from_slice(self.entries[&m].data());
            st.running_var.copy_from_slice(self.entries[&v].data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
            if numel.saturating_mul(8) > bytes.len() {
                return Err(Error::Checkpoint(format!("`{name}` claims more data than the file holds")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::NetworkSpec;

    fn tiny() -> Network {
        Network::build(&NetworkSpec::plain(3, 4, 3).with_input(8, 8).with_sections(2), 7).unwrap()
    }

    #[test]
    fn round_trip_restores_network() {
        let mut a = tiny();
        a.bn_states_mut()[1].running_mean[2] = 0.25;
        let norm = ([0.1, 0.2, 0.3], [1.0, 2.0, 3.0]);
        let ck = Checkpoint::from_network(&a, Some(&norm)).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.normalization(), Some(norm));

        let mut b = Network::build(a.spec(), 99).unwrap();
        back.apply(&mut b).unwrap();
        assert_eq!(b.params().get("W_conv_G").unwrap(), a.params().get("W_conv_G").unwrap());
        assert_eq!(b.bn_states(), a.bn_states());
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::from_network(&tiny(), None).unwrap().to_bytes();
        assert_eq!(&bytes[..8], b"ANCHCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = Checkpoint::from_network(&tiny(), None).unwrap().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let ck = Checkpoint::from_network(&tiny(), None).unwrap();
        let mut wide =
            Network::build(&NetworkSpec::plain(3, 5, 3).with_input(8, 8).with_sections(2), 0).unwrap();
        assert!(ck.apply(&mut wide).is_err());
        let mut deeper =
            Network::build(&NetworkSpec::plain(4, 4, 3).with_input(8, 8).with_sections(2), 0).unwrap();
        assert!(ck.apply(&mut deeper).is_err());
    }
}
