//! Bit-exact binary containers: occupancy masks (SVOX), latent codes
//! (SVLZ), and checkpoints (SVCK).
//!
//! All integers are little-endian fixed width. Readers check every declared
//! length against the bytes actually present before allocating, so a
//! corrupted header cannot trigger an outsized allocation, and they demand
//! the file end exactly where the payload does. Write-then-read is bitwise
//! exact for all three formats.

use crate::error::{FormatError, SvxError, SvxResult};
use crate::matrix::Matrix;
use crate::model::{LatentCode, LatentPosterior};
use crate::voxel::{Coordinate, Dims, VoxelGrid};
use std::fs;
use std::path::Path;

pub const SVOX_MAGIC: &[u8; 6] = b"SVOX1\0";
pub const SVLZ_MAGIC: &[u8; 6] = b"SVLZ1\0";
pub const SVCK_MAGIC: &[u8; 6] = b"SVCK1\0";

/// Upper bound on voxels a reader will materialize as a dense grid. The
/// biggest grid the engine targets is 640x640x832 ≈ 3.4e8 voxels; anything
/// an order of magnitude past that is a corrupt header, not data.
const MAX_DENSE_VOXELS: u64 = 1 << 30;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { need: n, have: self.remaining() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &'static [u8; 6], name: &'static str) -> Result<(), FormatError> {
        let found = self.take(6)?;
        if found != expected {
            return Err(FormatError::BadMagic { expected: name, found: found.to_vec() });
        }
        Ok(())
    }

    fn finish(self) -> Result<(), FormatError> {
        if self.remaining() != 0 {
            return Err(FormatError::TrailingData { extra: self.remaining() });
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_coords(
    r: &mut Reader,
    n: usize,
    extent: Dims,
) -> Result<Vec<Coordinate>, FormatError> {
    let (eh, ew, ed) = extent.as_tuple();
    let mut coords = Vec::with_capacity(n);
    let mut prev: Option<(u32, u32, u32)> = None;
    for i in 0..n {
        let x = r.u32()?;
        let y = r.u32()?;
        let z = r.u32()?;
        if x >= eh || y >= ew || z >= ed {
            return Err(FormatError::CoordOutOfRange { index: i, coord: (x, y, z) });
        }
        if let Some(p) = prev {
            if (x, y, z) <= p {
                return Err(FormatError::UnsortedCoords { index: i });
            }
        }
        prev = Some((x, y, z));
        coords.push(Coordinate::new(x, y, z));
    }
    Ok(coords)
}

// ---------------------------------------------------------------------------
// SVOX: binary occupancy masks

/// Magic, u32 H/W/D, u32 N, then N sorted (x, y, z) u32 triples: 22 + 12N
/// bytes total.
pub fn write_svox_bytes(grid: &VoxelGrid) -> Vec<u8> {
    let (h, w, d) = grid.dims().as_tuple();
    let coords = grid.active_coords();
    let mut out = Vec::with_capacity(22 + 12 * coords.len());
    out.extend_from_slice(SVOX_MAGIC);
    push_u32(&mut out, h);
    push_u32(&mut out, w);
    push_u32(&mut out, d);
    push_u32(&mut out, coords.len() as u32);
    for c in coords {
        push_u32(&mut out, c.x);
        push_u32(&mut out, c.y);
        push_u32(&mut out, c.z);
    }
    out
}

/// Header and coordinate list without materializing a dense grid.
pub fn read_svox_coords_bytes(bytes: &[u8]) -> SvxResult<(Dims, Vec<Coordinate>)> {
    let mut r = Reader::new(bytes);
    r.magic(SVOX_MAGIC, "SVOX1")?;
    let h = r.u32()?;
    let w = r.u32()?;
    let d = r.u32()?;
    let n = r.u32()? as usize;
    let need = n.checked_mul(12).ok_or(FormatError::Oversized {
        detail: format!("{n} coordinates"),
    })?;
    if r.remaining() < need {
        return Err(FormatError::Truncated { need, have: r.remaining() }.into());
    }
    let dims = Dims::new(h, w, d);
    let coords = read_coords(&mut r, n, dims)?;
    r.finish()?;
    Ok((dims, coords))
}

pub fn read_svox_bytes(bytes: &[u8]) -> SvxResult<VoxelGrid> {
    let (dims, coords) = read_svox_coords_bytes(bytes)?;
    if dims.voxels() > MAX_DENSE_VOXELS {
        return Err(FormatError::Oversized {
            detail: format!("{}x{}x{} voxels", dims.as_tuple().0, dims.as_tuple().1, dims.as_tuple().2),
        }
        .into());
    }
    let mut g = VoxelGrid::new(dims);
    for c in coords {
        g.set_coord(c, 1);
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// SVLZ: latent posterior + sampled code

/// Magic, u32 H/W/D, u32 stride, u32 c, u64 N (34-byte header), N sorted
/// coordinate triples on the latent lattice, then mu, logvar, z as N×c f32
/// row-major.
pub fn write_latent_bytes(post: &LatentPosterior, code: &LatentCode) -> SvxResult<Vec<u8>> {
    if post.coords != code.coords || post.dims != code.dims {
        return Err(SvxError::ShapeMismatch {
            op: "write_latent",
            expected: format!("{} shared tokens", post.coords.len()),
            got: format!("{} code tokens", code.coords.len()),
        });
    }
    let n = post.coords.len();
    if n == 0 {
        return Err(FormatError::EmptyLatent.into());
    }
    let c = post.mu.cols();
    let fields: [(&Matrix<f32>, &'static str); 3] =
        [(&post.mu, "mu"), (&post.logvar, "logvar"), (&code.z, "z")];
    for (m, field) in fields {
        if m.shape() != (n, c) {
            return Err(SvxError::ShapeMismatch {
                op: "write_latent",
                expected: format!("{n}x{c}"),
                got: format!("{}x{}", m.rows(), m.cols()),
            });
        }
        if let Some(i) = m.data().iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFiniteValue { field, index: i }.into());
        }
    }
    let (h, w, d) = post.dims.as_tuple();
    let mut out = Vec::with_capacity(34 + 12 * n + 12 * n * c);
    out.extend_from_slice(SVLZ_MAGIC);
    push_u32(&mut out, h);
    push_u32(&mut out, w);
    push_u32(&mut out, d);
    push_u32(&mut out, code.stride);
    push_u32(&mut out, c as u32);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for co in &post.coords {
        push_u32(&mut out, co.x);
        push_u32(&mut out, co.y);
        push_u32(&mut out, co.z);
    }
    for m in [&post.mu, &post.logvar, &code.z] {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_latent_bytes(bytes: &[u8]) -> SvxResult<(LatentPosterior, LatentCode)> {
    let mut r = Reader::new(bytes);
    r.magic(SVLZ_MAGIC, "SVLZ1")?;
    let h = r.u32()?;
    let w = r.u32()?;
    let d = r.u32()?;
    let stride = r.u32()?;
    let c = r.u32()? as usize;
    let n64 = r.u64()?;
    if n64 == 0 {
        return Err(FormatError::EmptyLatent.into());
    }
    if stride == 0 || c == 0 {
        return Err(FormatError::Oversized {
            detail: format!("stride {stride}, {c} channels"),
        }
        .into());
    }
    let n = usize::try_from(n64).map_err(|_| FormatError::Oversized {
        detail: format!("{n64} tokens"),
    })?;
    let need = n
        .checked_mul(12 + 12 * c)
        .ok_or(FormatError::Oversized { detail: format!("{n} tokens x {c} channels") })?;
    if r.remaining() < need {
        return Err(FormatError::Truncated { need, have: r.remaining() }.into());
    }
    let dims = Dims::new(h, w, d);
    let coords = read_coords(&mut r, n, dims.extent_at(stride))?;
    let mut mats: Vec<Matrix<f32>> = Vec::with_capacity(3);
    for field in ["mu", "logvar", "z"] {
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(FormatError::NonFiniteValue { field, index: i }.into());
            }
            data.push(v);
        }
        mats.push(Matrix::from_vec(n, c, data)?);
    }
    r.finish()?;
    let z = mats.pop().unwrap();
    let logvar = mats.pop().unwrap();
    let mu = mats.pop().unwrap();
    let post = LatentPosterior { coords: coords.clone(), mu, logvar, dims };
    let code = LatentCode { coords, z, dims, stride };
    Ok((post, code))
}

// ---------------------------------------------------------------------------
// SVCK: named-tensor checkpoints

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    /// Tensor extents; rank = dims.len(). Matrices store [rows, cols].
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CheckpointFile {
    pub entries: Vec<CheckpointEntry>,
    /// key=value lines; the training layer decides what they mean.
    pub config_text: String,
}

/// Magic, u32 entry count, per entry u16 name length + name + u8 rank +
/// rank u32 extents + f32 payload, then u32 config length + config text.
pub fn write_checkpoint_bytes(ck: &CheckpointFile) -> SvxResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SVCK_MAGIC);
    push_u32(&mut out, ck.entries.len() as u32);
    let mut seen: std::collections::HashSet<&str> = std::collections::HashSet::new();
    for e in &ck.entries {
        if e.name.is_empty() || e.name.len() > u16::MAX as usize {
            return Err(FormatError::BadName { detail: format!("length {}", e.name.len()) }.into());
        }
        if !seen.insert(&e.name) {
            return Err(FormatError::DuplicateEntry { name: e.name.clone() }.into());
        }
        if e.dims.len() > u8::MAX as usize {
            return Err(FormatError::BadName {
                detail: format!("{}: rank {}", e.name, e.dims.len()),
            }
            .into());
        }
        let count = e.dims.iter().map(|&d| d as u64).product::<u64>();
        if count != e.data.len() as u64 {
            return Err(FormatError::ShapeDisagreement {
                name: e.name.clone(),
                expected: format!("{count} values"),
                got: format!("{}", e.data.len()),
            }
            .into());
        }
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            push_u32(&mut out, d);
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    push_u32(&mut out, ck.config_text.len() as u32);
    out.extend_from_slice(ck.config_text.as_bytes());
    Ok(out)
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> SvxResult<CheckpointFile> {
    let mut r = Reader::new(bytes);
    r.magic(SVCK_MAGIC, "SVCK1")?;
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::BadName { detail: "not utf-8".to_string() })?
            .to_string();
        if name.is_empty() {
            return Err(FormatError::BadName { detail: "empty".to_string() }.into());
        }
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateEntry { name }.into());
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let count64 = dims.iter().map(|&d| d as u64).product::<u64>();
        let bytes_needed = count64.saturating_mul(4);
        if bytes_needed > r.remaining() as u64 {
            return Err(FormatError::Truncated {
                need: bytes_needed.min(usize::MAX as u64) as usize,
                have: r.remaining(),
            }
            .into());
        }
        let mut data = Vec::with_capacity(count64 as usize);
        for _ in 0..count64 {
            data.push(r.f32()?);
        }
        entries.push(CheckpointEntry { name, dims, data });
    }
    let cfg_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| FormatError::BadConfigLine { line: "config text not utf-8".to_string() })?
        .to_string();
    r.finish()?;
    Ok(CheckpointFile { entries, config_text })
}

// ---------------------------------------------------------------------------
// Path wrappers

pub fn read_file(path: &Path) -> SvxResult<Vec<u8>> {
    fs::read(path).map_err(|e| SvxError::Io { path: path.to_path_buf(), detail: e.to_string() })
}

fn write_file(path: &Path, bytes: &[u8]) -> SvxResult<()> {
    fs::write(path, bytes)
        .map_err(|e| SvxError::Io { path: path.to_path_buf(), detail: e.to_string() })
}

pub fn write_svox(path: &Path, grid: &VoxelGrid) -> SvxResult<()> {
    write_file(path, &write_svox_bytes(grid))
}

pub fn read_svox(path: &Path) -> SvxResult<VoxelGrid> {
    read_svox_bytes(&read_file(path)?)
}

pub fn read_svox_coords(path: &Path) -> SvxResult<(Dims, Vec<Coordinate>)> {
    read_svox_coords_bytes(&read_file(path)?)
}

pub fn write_latent(path: &Path, post: &LatentPosterior, code: &LatentCode) -> SvxResult<()> {
    write_file(path, &write_latent_bytes(post, code)?)
}

pub fn read_latent(path: &Path) -> SvxResult<(LatentPosterior, LatentCode)> {
    read_latent_bytes(&read_file(path)?)
}

pub fn write_checkpoint(path: &Path, ck: &CheckpointFile) -> SvxResult<()> {
    write_file(path, &write_checkpoint_bytes(ck)?)
}

pub fn read_checkpoint(path: &Path) -> SvxResult<CheckpointFile> {
    read_checkpoint_bytes(&read_file(path)?)
}
