//! `PHN1` phantom files.
//!
//! Little-endian layout:
//!
//! ```text
//! "PHN1"
//! u32 dim_x, u32 dim_y, u32 dim_z
//! f32 voxel_size
//! u32 bundle_count
//! SH block:   voxel_count x 45 f32   (real even-order basis, l then m = -l..l; see `sh`)
//! peak block: voxel_count x (u8 count, 3 x 3 f32; unused slots are zero)
//! per bundle: voxel_count u8 mask, u16 name length, UTF-8 name
//! ```
//!
//! Voxels are ordered x fastest. Ground-truth streamlines are stored separately as `STL1`.

use std::path::Path;

use super::{PeakField, PeakSet, Phantom, ShField, TractMask, VoxelGrid, MAX_PEAKS, SH_COEFFS};
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PHN1";

pub fn encode_phantom(p: &Phantom) -> Result<Vec<u8>> {
    let n = p.grid.len();
    let mut w = Writer::new();
    w.bytes(MAGIC);
    for d in p.grid.dims {
        w.u32(d as u32);
    }
    w.f32(p.grid.voxel_size as f32);
    w.u32(p.masks.len() as u32);
    w.f32s(&p.sh.coeffs);
    for ps in &p.peaks.peaks {
        w.u8(ps.len() as u8);
        for d in ps.raw() {
            w.f32s(d);
        }
    }
    for m in &p.masks {
        debug_assert_eq!(m.voxels.len(), n);
        w.bytes(&m.voxels);
        w.str16(&m.bundle_name)?;
    }
    Ok(w.into_bytes())
}

/// Decode a phantom; `ground_truth` is left empty (one empty set per bundle).
pub fn decode_phantom(bytes: &[u8]) -> Result<Phantom> {
    let mut r = Reader::new("PHN1", bytes);
    r.magic(MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let at = r.offset();
    let voxel_size = r.f32()? as f64;
    let grid = VoxelGrid::new(dims, voxel_size).map_err(|e| Error::Decode {
        format: "PHN1",
        offset: at,
        message: e.to_string(),
    })?;
    let bundles = r.u32()? as usize;
    let n = grid.len();
    let coeffs = r.f32s(n * SH_COEFFS)?;
    let mut peaks = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let count = r.u8()? as usize;
        if count > MAX_PEAKS {
            return Err(r.error(format!("peak count {count} exceeds {MAX_PEAKS}")));
        }
        let flat = r.f32s(3 * MAX_PEAKS)?;
        let dirs: Vec<[f32; 3]> = flat.chunks_exact(3).take(count).map(|c| [c[0], c[1], c[2]]).collect();
        peaks.push(PeakSet::new(&dirs).map_err(|e| Error::Decode {
            format: "PHN1",
            offset: at,
            message: e.to_string(),
        })?);
    }
    let mut masks = Vec::with_capacity(bundles);
    for _ in 0..bundles {
        let at = r.offset();
        let voxels = r.take(n)?.to_vec();
        let name = r.str16()?;
        masks.push(TractMask::new(name, voxels, &grid).map_err(|e| Error::Decode {
            format: "PHN1",
            offset: at,
            message: e.to_string(),
        })?);
    }
    r.finish()?;
    Ok(Phantom {
        grid,
        sh: ShField { coeffs },
        peaks: PeakField { peaks },
        ground_truth: vec![Vec::new(); masks.len()],
        masks,
    })
}

pub fn write_phantom(path: &Path, p: &Phantom) -> Result<()> {
    binio::write_file(path, &encode_phantom(p)?)
}

pub fn read_phantom(path: &Path) -> Result<Phantom> {
    decode_phantom(&binio::read_file(path)?)
}
