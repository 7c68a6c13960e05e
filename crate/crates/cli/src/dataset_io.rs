//! LFG1 dataset file format (binary, little-endian).
//!
//! Layout: magic "LFG1"; seven u32 header fields K, S, P, n_train, n_val,
//! n_test, seed; then samples in split order (train, val, test), each as
//! u16 label, u16 patch row, u16 patch col, 3*S*S f32 image values, S*S u8
//! mask bytes.

use crate::error::{CliError, Result};
use loupe_core::data::{Dataset, DatasetSpec, SyntheticSample};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LFG1";

pub fn write_lfg1(path: &Path, ds: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    for v in [
        ds.spec.classes as u32,
        ds.spec.image_size as u32,
        ds.spec.patch_size as u32,
        ds.train.len() as u32,
        ds.val.len() as u32,
        ds.test.len() as u32,
        ds.spec.seed,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for sample in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        w.write_all(&(sample.label as u16).to_le_bytes())?;
        w.write_all(&(sample.patch_origin.0 as u16).to_le_bytes())?;
        w.write_all(&(sample.patch_origin.1 as u16).to_le_bytes())?;
        for &v in &sample.image {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&sample.mask)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

pub fn read_lfg1(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Io(format!("opening {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CliError::Config(format!(
            "{} is not an LFG1 dataset (bad magic {magic:?})",
            path.display()
        )));
    }
    let classes = read_u32(&mut r)? as usize;
    let image_size = read_u32(&mut r)? as usize;
    let patch_size = read_u32(&mut r)? as usize;
    let n_train = read_u32(&mut r)? as usize;
    let n_val = read_u32(&mut r)? as usize;
    let n_test = read_u32(&mut r)? as usize;
    let seed = read_u32(&mut r)?;
    if classes == 0 || image_size == 0 {
        return Err(CliError::Config("corrupt LFG1 header".into()));
    }

    let s = image_size;
    let mut read_sample = |what: &str| -> Result<SyntheticSample> {
        let label = read_u16(&mut r)? as usize;
        let row = read_u16(&mut r)? as usize;
        let col = read_u16(&mut r)? as usize;
        if label >= classes {
            return Err(CliError::Config(format!(
                "corrupt LFG1 {what} sample: label {label} >= {classes}"
            )));
        }
        let mut image = vec![0.0f32; 3 * s * s];
        let mut buf = [0u8; 4];
        for v in image.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        let mut mask = vec![0u8; s * s];
        r.read_exact(&mut mask)?;
        Ok(SyntheticSample {
            image,
            label,
            mask,
            patch_origin: (row, col),
            size: s,
        })
    };

    let train: Vec<_> = (0..n_train)
        .map(|_| read_sample("train"))
        .collect::<Result<_>>()?;
    let val: Vec<_> = (0..n_val)
        .map(|_| read_sample("val"))
        .collect::<Result<_>>()?;
    let test: Vec<_> = (0..n_test)
        .map(|_| read_sample("test"))
        .collect::<Result<_>>()?;
    let mut end = [0u8; 1];
    if r.read(&mut end)? != 0 {
        return Err(CliError::Config(format!(
            "{}: trailing bytes after the last sample",
            path.display()
        )));
    }

    Ok(Dataset {
        spec: DatasetSpec {
            classes,
            image_size,
            patch_size,
            n_train,
            n_val,
            n_test,
            background_noise_scale: 1.0, // not stored in the format; unused after generation
            seed,
        },
        train,
        val,
        test,
    })
}
