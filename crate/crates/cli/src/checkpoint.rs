//! Checkpoint format: a directory holding a text manifest, one raw
//! little-endian f32 blob, and the resolved config echo.
//!
//!   manifest.txt  "loupe-checkpoint v1" header, then one line per array:
//!                 `<name> <d0>x<d1>x<d2>x<d3> <byte offset>`
//!   params.bin    all arrays concatenated, f32 little-endian
//!   config.txt    resolved key = value RunConfig
//!
//! Writes go to a sibling `.tmp` directory that is renamed into place, so an
//! interrupted run never leaves a partial checkpoint under the final name.

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use loupe_core::graph::Shape;
use loupe_core::params::ParamSet;
use std::fmt::Write as _;
use std::path::Path;

const HEADER: &str = "loupe-checkpoint v1";

pub fn save(dir: &Path, params: &ParamSet<f32>, cfg: &RunConfig) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;

    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut blob: Vec<u8> = Vec::new();
    for p in params.iter() {
        let _ = writeln!(
            manifest,
            "{} {}x{}x{}x{} {}",
            p.name,
            p.shape.0[0],
            p.shape.0[1],
            p.shape.0[2],
            p.shape.0[3],
            blob.len()
        );
        for &v in &p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(tmp.join("manifest.txt"), manifest)?;
    std::fs::write(tmp.join("params.bin"), blob)?;
    std::fs::write(tmp.join("config.txt"), cfg.to_key_values())?;

    // swap: old (if any) moves aside before the rename, then is dropped
    let stale = dir.with_extension("stale");
    if stale.exists() {
        std::fs::remove_dir_all(&stale)?;
    }
    if dir.exists() {
        std::fs::rename(dir, &stale)?;
    }
    std::fs::rename(&tmp, dir)?;
    if stale.exists() {
        std::fs::remove_dir_all(&stale)?;
    }
    Ok(())
}

pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub config: RunConfig,
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| CliError::Io(format!("reading {}: {e}", dir.display())))?;
    let blob = std::fs::read(dir.join("params.bin"))?;
    let config = RunConfig::load(&dir.join("config.txt"))?;

    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(CliError::Config(format!(
            "{}: not a checkpoint (bad manifest header)",
            dir.display()
        )));
    }
    let mut params = ParamSet::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, shape_s, offset_s) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(CliError::Config(format!(
                    "corrupt manifest line: `{line}`"
                )))
            }
        };
        let dims: Vec<usize> = shape_s
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CliError::Config(format!("corrupt shape in manifest: `{shape_s}`")))?;
        if dims.len() != 4 {
            return Err(CliError::Config(format!(
                "manifest shape must have 4 dims: `{shape_s}`"
            )));
        }
        let shape = Shape([dims[0], dims[1], dims[2], dims[3]]);
        let offset: usize = offset_s
            .parse()
            .map_err(|_| CliError::Config(format!("corrupt offset in manifest: `{offset_s}`")))?;
        let nbytes = shape.numel() * 4;
        let end = offset
            .checked_add(nbytes)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| {
                CliError::Config(format!(
                    "manifest entry {name} overruns params.bin ({} bytes)",
                    blob.len()
                ))
            })?;
        let data: Vec<f32> = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(name, shape, data);
    }
    Ok(Checkpoint { params, config })
}
