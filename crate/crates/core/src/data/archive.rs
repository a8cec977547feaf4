//! `.cot1` arrays: `"COT1"`, u8 dtype (0 f32, 1 u8, 2 i64), u8 ndim,
//! ndim × u32 dims, then the raw little-endian payload. A dataset directory
//! holds `{split}_images.cot1`, `{split}_labels.cot1` and
//! `{split}_manifest.txt` (one sample id per line, in row order).

use std::path::Path;

use super::{DatasetSplits, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const COT1_MAGIC: &[u8; 4] = b"COT1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawArray {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn elem_size(dtype: u8) -> Result<usize> {
    match dtype {
        0 => Ok(4),
        1 => Ok(1),
        2 => Ok(8),
        d => Err(Error::Dataset(format!("unknown dtype code {d}"))),
    }
}

impl RawArray {
    pub fn new(dtype: u8, dims: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n * elem_size(dtype)? != bytes.len() {
            return Err(Error::Dataset(format!(
                "payload of {} bytes does not match dims {dims:?}",
                bytes.len()
            )));
        }
        Ok(RawArray { dtype, dims, bytes })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = COT1_MAGIC.to_vec();
        buf.push(self.dtype);
        buf.push(u8::try_from(self.dims.len()).map_err(|_| Error::Dataset("too many dims".into()))?);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Dataset("dimension exceeds u32".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&self.bytes);
        Ok(buf)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Dataset(m.to_string());
        if buf.len() < 6 || &buf[..4] != COT1_MAGIC {
            return Err(err("bad magic, not a .cot1 array"));
        }
        let dtype = buf[4];
        let ndim = buf[5] as usize;
        let head = 6 + 4 * ndim;
        if buf.len() < head {
            return Err(err("truncated header"));
        }
        let dims: Vec<usize> = buf[6..head]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(elem_size(dtype)?, |a, &d| a.checked_mul(d))
            .ok_or_else(|| err("dimension product overflows"))?;
        if buf.len() - head != n {
            return Err(Error::Dataset(format!(
                "payload is {} bytes, dims {dims:?} need {n}",
                buf.len() - head
            )));
        }
        Ok(RawArray { dtype, dims, bytes: buf[head..].to_vec() })
    }
}

pub fn read_cot1(path: impl AsRef<Path>) -> Result<RawArray> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RawArray::decode(&buf).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn write_cot1(path: impl AsRef<Path>, arr: &RawArray) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, arr.encode()?).map_err(|e| Error::io(path, e))
}

fn images_from_raw(raw: &RawArray) -> Result<Tensor> {
    if raw.dims.len() != 4 {
        return Err(Error::Dataset(format!("images must be 4-D, got dims {:?}", raw.dims)));
    }
    let data: Vec<f32> = match raw.dtype {
        1 => raw.bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        0 => raw.bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        d => return Err(Error::Dataset(format!("images must be u8 or f32, got dtype {d}"))),
    };
    Tensor::new(raw.dims.clone(), data).map_err(|e| Error::Dataset(format!("images: {e}")))
}

fn labels_from_raw(raw: &RawArray) -> Result<Vec<usize>> {
    if raw.dims.len() != 1 {
        return Err(Error::Dataset(format!("labels must be 1-D, got dims {:?}", raw.dims)));
    }
    match raw.dtype {
        1 => Ok(raw.bytes.iter().map(|&b| b as usize).collect()),
        2 => raw
            .bytes
            .chunks_exact(8)
            .map(|c| {
                let v = i64::from_le_bytes(c.try_into().unwrap());
                usize::try_from(v).map_err(|_| Error::Dataset(format!("negative label {v}")))
            })
            .collect(),
        d => Err(Error::Dataset(format!("labels must be u8 or i64, got dtype {d}"))),
    }
}

fn load_split(dir: &Path, name: &str, num_classes: usize) -> Result<Split> {
    let images = images_from_raw(&read_cot1(dir.join(format!("{name}_images.cot1")))?)?;
    let labels = labels_from_raw(&read_cot1(dir.join(format!("{name}_labels.cot1")))?)?;
    let mpath = dir.join(format!("{name}_manifest.txt"));
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let ids: Vec<String> = text.lines().map(str::to_string).collect();
    Split::new(images, labels, ids, num_classes).map_err(|e| Error::Dataset(format!("{name} split: {e}")))
}

/// Loads `train`, `val` and `test` from `dir`. With `num_classes = None` the
/// class count is one more than the largest label seen.
pub fn load_dataset(dir: impl AsRef<Path>, num_classes: Option<usize>) -> Result<DatasetSplits> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("dataset directory {} not found", dir.display())));
    }
    let k = match num_classes {
        Some(k) => k,
        None => {
            let mut max = 0;
            for name in ["train", "val", "test"] {
                let raw = read_cot1(dir.join(format!("{name}_labels.cot1")))?;
                max = labels_from_raw(&raw)?.into_iter().fold(max, usize::max);
            }
            max + 1
        }
    };
    DatasetSplits::new(
        load_split(dir, "train", k)?,
        load_split(dir, "val", k)?,
        load_split(dir, "test", k)?,
        k,
    )
}

/// Quantizes to u8 (`round(255·v)`, clamped) and writes the archive layout.
/// Images already on the 1/255 grid round-trip exactly.
pub fn save_split(dir: &Path, name: &str, split: &Split) -> Result<()> {
    let pixels: Vec<u8> = split
        .images()
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_cot1(
        dir.join(format!("{name}_images.cot1")),
        &RawArray::new(1, split.images().shape().to_vec(), pixels)?,
    )?;
    let labels: Vec<u8> = split.labels().iter().flat_map(|&l| (l as i64).to_le_bytes()).collect();
    write_cot1(
        dir.join(format!("{name}_labels.cot1")),
        &RawArray::new(2, vec![split.len()], labels)?,
    )?;
    let mut manifest = split.ids().join("\n");
    manifest.push('\n');
    let mpath = dir.join(format!("{name}_manifest.txt"));
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &DatasetSplits) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_split(dir, "train", &data.train)?;
    save_split(dir, "val", &data.val)?;
    save_split(dir, "test", &data.test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_and_corruption() {
        let a = RawArray::new(2, vec![3], (0..24).collect()).unwrap();
        let buf = a.encode().unwrap();
        assert_eq!(RawArray::decode(&buf).unwrap(), a);
        assert!(RawArray::decode(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(RawArray::decode(&bad).is_err());
        assert!(RawArray::new(0, vec![2], vec![0; 7]).is_err());
    }

    #[test]
    fn pixel_255_is_one() {
        let raw = RawArray::new(1, vec![1, 1, 2, 1], vec![255, 0]).unwrap();
        let t = images_from_raw(&raw).unwrap();
        assert_eq!(t.data(), [1.0, 0.0]);
    }
}
