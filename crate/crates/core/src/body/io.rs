//! Template file (`CATBODY1`) and Wavefront OBJ mesh I/O.
//!
//! Template layout, all little-endian: magic `CATBODY1`; `u64` V, J, F;
//! then `f64 vertices[V*3]`, `u32 faces[F*3]`, `f64 shape_dirs[V*3*10]`,
//! `f64 expr_dirs[V*3*10]`, `f64 joint_regressor[J*V]`,
//! `f64 skin_weights[V*J]`, `i64 parents[J]` (root `-1`), and `u8
//! labels[V]` (0 body, 1 left hand, 2 right hand, 3 face). Rest joints are
//! recomputed from the regressor on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::template::RawTemplate;
use super::{BodyTemplate, Component, NUM_BETAS, NUM_EXPRESSION};
use crate::error::{Error, Result};
use crate::tensor::geometry::ROOT_PARENT;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CATBODY1";

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

impl BodyTemplate {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let (v, j) = (self.num_vertices(), self.num_joints());
        w.write_all(MAGIC)?;
        for n in [v, j, self.faces.len()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        write_f64s(w, self.vertices.data())?;
        for i in self.faces.iter().flatten() {
            w.write_all(&i.to_le_bytes())?;
        }
        write_f64s(w, self.shape_dirs.data())?;
        write_f64s(w, self.expr_dirs.data())?;
        write_f64s(w, self.joint_regressor.data())?;
        write_f64s(w, self.skin_weights.data())?;
        for &p in self.parents.iter() {
            let p = if p == ROOT_PARENT { -1i64 } else { p as i64 };
            w.write_all(&p.to_le_bytes())?;
        }
        let labels: Vec<u8> = self.vertex_labels.iter().map(|c| c.code()).collect();
        w.write_all(&labels)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a CATBODY1 template".into()));
        }
        let v = read_u64(r)? as usize;
        let j = read_u64(r)? as usize;
        let f = read_u64(r)? as usize;
        if v == 0 || j == 0 || v > 1 << 24 || j > 1 << 16 || f > 1 << 26 {
            return Err(Error::Format(format!("implausible sizes V={v} J={j} F={f}")));
        }
        let vertices = Tensor::new([v, 3], read_f64s(r, 3 * v)?)?;
        let mut fbuf = vec![0u8; 12 * f];
        r.read_exact(&mut fbuf)?;
        let faces = fbuf
            .chunks_exact(12)
            .map(|c| std::array::from_fn(|k| u32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
            .collect();
        let shape_dirs = Tensor::new([3 * v, NUM_BETAS], read_f64s(r, 3 * v * NUM_BETAS)?)?;
        let expr_dirs = Tensor::new([3 * v, NUM_EXPRESSION], read_f64s(r, 3 * v * NUM_EXPRESSION)?)?;
        let joint_regressor = Tensor::new([j, v], read_f64s(r, j * v)?)?;
        let skin_weights = Tensor::new([v, j], read_f64s(r, v * j)?)?;
        let mut parents = Vec::with_capacity(j);
        for _ in 0..j {
            let p = read_u64(r)? as i64;
            parents.push(if p < 0 { ROOT_PARENT } else { p as usize });
        }
        let mut labels = vec![0u8; v];
        r.read_exact(&mut labels)?;
        let vertex_labels = labels
            .into_iter()
            .map(|c| Component::from_code(c).ok_or_else(|| Error::Format(format!("bad component label {c}"))))
            .collect::<Result<_>>()?;
        BodyTemplate::assemble(RawTemplate {
            vertices,
            faces,
            shape_dirs,
            expr_dirs,
            joint_regressor,
            skin_weights,
            parents,
            vertex_labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// ASCII OBJ with `v` lines (6 decimals) and 1-based `f` lines.
pub fn write_obj(w: &mut impl Write, vertices: &Tensor, faces: &[[u32; 3]]) -> Result<()> {
    if vertices.ndim() != 2 || vertices.shape()[1] != 3 {
        return Err(Error::invalid("write_obj", format!("vertices shape {:?}", vertices.shape())));
    }
    for p in vertices.data().chunks(3) {
        writeln!(w, "v {:.6} {:.6} {:.6}", p[0], p[1], p[2])?;
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Parses the `v`/`f` subset written by [`write_obj`] (0-based faces).
pub fn parse_obj(r: impl BufRead) -> Result<(Vec<[f64; 3]>, Vec<[u32; 3]>)> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let bad = || Error::Format(format!("obj line {}: {line:?}", n + 1));
        match it.next() {
            Some("v") => {
                let p: Vec<f64> = it.map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                verts.push(<[f64; 3]>::try_from(&p[..3.min(p.len())]).map_err(|_| bad())?);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or("");
                        head.parse::<u32>().ok().filter(|&i| i >= 1).map(|i| i - 1).ok_or_else(bad)
                    })
                    .collect::<Result<_>>()?;
                faces.push(<[u32; 3]>::try_from(&idx[..]).map_err(|_| bad())?);
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<(Vec<[f64; 3]>, Vec<[u32; 3]>)> {
    parse_obj(BufReader::new(File::open(path)?))
}
