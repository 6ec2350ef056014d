//! Model checkpoint format, all little-endian:
//!
//! | size | field |
//! |---|---|
//! | 4 | magic `IHPM` |
//! | 4 | version (`u32`, = 1) |
//! | 4 | kind: 1 heatmap model, 2 direct regressor |
//! | 24 | six `u32` architecture fields (see below) |
//! | 4 | tensor count `n` |
//! | per tensor | rank `r`, then `r` `u32` dimensions |
//! | 8 per value | parameters, `f64`, tensors in table order |
//!
//! Architecture fields: heatmap model `joints, volumetric, hidden, radius,
//! depth_hidden, depth_radius`; regressor `joints, depth, height, width,
//! hidden, pool`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::io::{dim_u32, Cursor, FORMAT_VERSION};

use super::model::{ModelConfig, Tensor, ToyModel};
use super::regress::{Regressor, RegressorConfig};
use super::Model;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IHPM";

const KIND_HEATMAP: u32 = 1;
const KIND_REGRESSOR: u32 = 2;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_checkpoint<W: Write>(model: &Model, mut sink: W) -> Result<u64> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let (kind, arch, tensors, params) = match model {
        Model::Heatmap(m) => {
            let c = m.config();
            let arch = [m.joints(), m.is_volumetric() as usize, c.hidden, c.radius, c.depth_hidden, c.depth_radius];
            (KIND_HEATMAP, arch, m.tensors(), m.parameters())
        }
        Model::Regression(r) => {
            let (g, c) = (r.grid(), r.config());
            let arch = [g.joints, g.depth, g.height, g.width, c.hidden, c.pool];
            (KIND_REGRESSOR, arch, r.tensors(), r.parameters())
        }
    };
    put_u32(&mut out, kind);
    for a in arch {
        put_u32(&mut out, dim_u32(a, "architecture field")?);
    }
    put_u32(&mut out, dim_u32(tensors.len(), "tensor count")?);
    for t in &tensors {
        put_u32(&mut out, dim_u32(t.shape.len(), "tensor rank")?);
        for &d in &t.shape {
            put_u32(&mut out, dim_u32(d, "tensor dimension")?);
        }
    }
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    sink.write_all(&out)?;
    sink.flush()?;
    Ok(out.len() as u64)
}

pub fn read_checkpoint<R: Read>(source: R) -> Result<Model> {
    let mut cur = Cursor::new(source);
    cur.expect_magic(&CHECKPOINT_MAGIC)?;
    let kind_at = cur.offset();
    let kind = cur.u32("model kind")?;
    let mut arch = [0usize; 6];
    for a in &mut arch {
        *a = cur.u32("architecture field")? as usize;
    }
    let expected: Vec<Tensor> = match kind {
        KIND_HEATMAP => {
            if arch[1] > 1 {
                return Err(Error::format(kind_at + 8, "volumetric flag must be 0 or 1"));
            }
            let cfg = ModelConfig { hidden: arch[2], radius: arch[3], depth_hidden: arch[4], depth_radius: arch[5] };
            cfg.validate()?;
            ToyModel::tensor_table(arch[0], arch[1] == 1, &cfg)
        }
        KIND_REGRESSOR => {
            let grid = GridSpec::new(arch[0], arch[1], arch[2], arch[3])?;
            let cfg = RegressorConfig { hidden: arch[4], pool: arch[5] };
            cfg.validate()?;
            Regressor::tensor_table(&grid, &cfg)
        }
        other => return Err(Error::format(kind_at, format!("unknown model kind {other}"))),
    };
    let count_at = cur.offset();
    let count = cur.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::format(
            count_at,
            format!("tensor count {count} does not match architecture ({})", expected.len()),
        ));
    }
    for t in &expected {
        let at = cur.offset();
        let rank = cur.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.u32("tensor dimension")? as usize);
        }
        if shape != t.shape {
            return Err(Error::format(
                at,
                format!("tensor {} has shape {shape:?}, expected {:?}", t.name, t.shape),
            ));
        }
    }
    let n: usize = expected.iter().map(Tensor::len).sum();
    let params = cur.finite_values(n, "parameter")?;
    cur.expect_end()?;
    Ok(match kind {
        KIND_HEATMAP => {
            let cfg = ModelConfig { hidden: arch[2], radius: arch[3], depth_hidden: arch[4], depth_radius: arch[5] };
            Model::Heatmap(ToyModel::from_parameters(arch[0], arch[1] == 1, cfg, params)?)
        }
        _ => {
            let grid = GridSpec::new(arch[0], arch[1], arch[2], arch[3])?;
            let cfg = RegressorConfig { hidden: arch[4], pool: arch[5] };
            Model::Regression(Regressor::from_parameters(grid, cfg, params)?)
        }
    })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<u64> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
