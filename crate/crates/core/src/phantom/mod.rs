//! Procedural diffusion phantoms.
//!
//! A phantom is a voxel grid carrying, per voxel, up to three fiber peak directions and the
//! 45 even-order SH coefficients synthesized from them, plus one binary mask and a set of
//! ground-truth streamlines per bundle. Bundles are tubes around analytic centerlines.
//!
//! Voxel `(x, y, z)` has linear index `x + dims[0] * (y + dims[1] * z)` and its center at
//! continuous coordinate `(x, y, z)`; the grid spans `[-0.5, dims - 0.5]` on each axis.

mod io;
pub mod sh;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::Streamline;
use crate::rng;
use crate::vec3::{self, V3};

pub use io::{decode_phantom, encode_phantom, read_phantom, write_phantom};
pub use sh::{sh_basis, sh_project_peaks, SH_COEFFS};

pub const MAX_PEAKS: usize = 3;
/// Peaks closer than this angle (degrees, up to sign) are merged into one.
const PEAK_MERGE_DEG: f64 = 15.0;
/// Centerlines are discretized with segments no longer than this (voxels).
const CENTERLINE_SPACING: f64 = 0.1;
/// Spacing of ground-truth streamline points (voxels).
const GT_SPACING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub voxel_size: f64,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        if dims.iter().any(|&d| d < 8) {
            return Err(Error::Phantom(format!("grid dims must each be >= 8, got {dims:?}")));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::Phantom(format!("voxel size must be > 0, got {voxel_size}")));
        }
        Ok(Self { dims, voxel_size })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn index_signed(&self, x: i64, y: i64, z: i64) -> Option<usize> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some(self.index(x, y, z))
    }

    /// Voxel containing `pos`, if inside the grid.
    pub fn nearest_voxel(&self, pos: V3) -> Option<usize> {
        if pos.iter().any(|c| !c.is_finite()) {
            return None;
        }
        self.index_signed(pos[0].round() as i64, pos[1].round() as i64, pos[2].round() as i64)
    }

    pub fn center(&self, idx: usize) -> V3 {
        let [x, y, z] = self.coords(idx);
        [x as f64, y as f64, z as f64]
    }

    /// Visit the (up to) eight trilinear corners of `pos` that lie inside the grid with their
    /// weights. Corners outside the grid contribute zero.
    #[inline]
    pub fn trilinear(&self, pos: V3, mut visit: impl FnMut(usize, f64)) {
        if pos.iter().any(|c| !c.is_finite()) {
            return;
        }
        let base = [pos[0].floor(), pos[1].floor(), pos[2].floor()];
        let frac = [pos[0] - base[0], pos[1] - base[1], pos[2] - base[2]];
        let b = [base[0] as i64, base[1] as i64, base[2] as i64];
        for corner in 0..8 {
            let dx = corner & 1;
            let dy = (corner >> 1) & 1;
            let dz = (corner >> 2) & 1;
            let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
            if w == 0.0 {
                continue;
            }
            if let Some(idx) = self.index_signed(b[0] + dx as i64, b[1] + dy as i64, b[2] + dz as i64) {
                visit(idx, w);
            }
        }
    }
}

/// Up to three unit peak directions for one voxel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PeakSet {
    count: u8,
    dirs: [[f32; 3]; MAX_PEAKS],
}

impl PeakSet {
    pub fn new(peaks: &[[f32; 3]]) -> Result<Self> {
        if peaks.len() > MAX_PEAKS {
            return Err(Error::Phantom(format!("at most {MAX_PEAKS} peaks per voxel")));
        }
        let mut s = PeakSet::default();
        for (i, p) in peaks.iter().enumerate() {
            let n = vec3::norm(vec3::from_f32(*p));
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Phantom(format!("peak {p:?} is not unit length")));
            }
            s.dirs[i] = *p;
        }
        s.count = peaks.len() as u8;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn as_slice(&self) -> &[[f32; 3]] {
        &self.dirs[..self.count as usize]
    }

    pub fn to_f64(&self) -> Vec<V3> {
        self.as_slice().iter().map(|&p| vec3::from_f32(p)).collect()
    }

    pub(crate) fn raw(&self) -> &[[f32; 3]; MAX_PEAKS] {
        &self.dirs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakField {
    pub peaks: Vec<PeakSet>,
}

/// 45 f32 coefficients per voxel, voxel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ShField {
    pub coeffs: Vec<f32>,
}

impl ShField {
    pub fn voxel(&self, idx: usize) -> &[f32] {
        &self.coeffs[idx * SH_COEFFS..(idx + 1) * SH_COEFFS]
    }

    /// Trilinear interpolation of all coefficients at `pos` into `out` (zero-filled outside).
    pub fn sample_into(&self, grid: &VoxelGrid, pos: V3, out: &mut [f32]) {
        debug_assert_eq!(out.len(), SH_COEFFS);
        let mut acc = [0.0f64; SH_COEFFS];
        grid.trilinear(pos, |idx, w| {
            for (a, &c) in acc.iter_mut().zip(self.voxel(idx)) {
                *a += w * c as f64;
            }
        });
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }

    pub fn sample(&self, grid: &VoxelGrid, pos: V3) -> [f32; SH_COEFFS] {
        let mut out = [0.0; SH_COEFFS];
        self.sample_into(grid, pos, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TractMask {
    pub bundle_name: String,
    pub voxels: Vec<u8>,
}

impl TractMask {
    pub fn new(bundle_name: impl Into<String>, voxels: Vec<u8>, grid: &VoxelGrid) -> Result<Self> {
        let bundle_name = bundle_name.into();
        if voxels.len() != grid.len() {
            return Err(Error::shape("tract mask", grid.len(), voxels.len()));
        }
        if voxels.iter().any(|&v| v > 1) {
            return Err(Error::Phantom(format!("mask {bundle_name} is not binary")));
        }
        if !voxels.contains(&1) {
            return Err(Error::Phantom(format!("mask {bundle_name} is empty")));
        }
        Ok(Self { bundle_name, voxels })
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.voxels[idx] == 1
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.voxels.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i)
    }

    /// Trilinear interpolation of the binary mask (zero-filled outside the grid).
    pub fn sample(&self, grid: &VoxelGrid, pos: V3) -> f64 {
        let mut acc = 0.0;
        grid.trilinear(pos, |idx, w| acc += w * self.voxels[idx] as f64);
        acc
    }

    /// Whether the voxel containing `pos` is in the mask.
    pub fn contains_point(&self, grid: &VoxelGrid, pos: V3) -> bool {
        grid.nearest_voxel(pos).is_some_and(|i| self.contains(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BundleGeometry {
    /// Straight segment from `start` to `end`.
    StraightTube { start: V3, end: V3 },
    /// Circular arc around `center` in the plane orthogonal to `normal`, measured from the
    /// `reference` direction.
    Arc {
        center: V3,
        normal: V3,
        reference: V3,
        curvature_radius: f64,
        start_deg: f64,
        end_deg: f64,
    },
    /// Helix winding around `axis` from `origin`.
    Helix {
        origin: V3,
        axis: V3,
        helix_radius: f64,
        pitch: f64,
        turns: f64,
    },
    /// Two straight tubes through a shared `center`; expands to bundles `<name>_a`, `<name>_b`.
    CrossingPair {
        center: V3,
        dir_a: V3,
        dir_b: V3,
        half_length: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleSpec {
    pub name: String,
    pub geometry: BundleGeometry,
    /// Tube radius in voxels.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid: VoxelGrid,
    pub bundles: Vec<BundleSpec>,
    pub rng_seed: u64,
    /// Ground-truth streamlines generated per bundle (the centerline plus offset copies).
    pub streamlines_per_bundle: usize,
}

impl PhantomSpec {
    /// One straight tube along +x through the middle of a 48x16x16 grid.
    pub fn straight_tube(seed: u64) -> Self {
        Self {
            grid: VoxelGrid { dims: [48, 16, 16], voxel_size: 1.0 },
            bundles: vec![BundleSpec {
                name: "tube".into(),
                geometry: BundleGeometry::StraightTube {
                    start: [4.0, 7.5, 7.5],
                    end: [43.0, 7.5, 7.5],
                },
                radius: 2.0,
            }],
            rng_seed: seed,
            streamlines_per_bundle: 20,
        }
    }

    /// An x-aligned and a y-aligned tube crossing at the grid center.
    pub fn crossing(seed: u64) -> Self {
        Self {
            grid: VoxelGrid { dims: [48, 48, 12], voxel_size: 1.0 },
            bundles: vec![BundleSpec {
                name: "cross".into(),
                geometry: BundleGeometry::CrossingPair {
                    center: [23.5, 23.5, 5.5],
                    dir_a: [1.0, 0.0, 0.0],
                    dir_b: [0.0, 1.0, 0.0],
                    half_length: 19.5,
                },
                radius: 2.0,
            }],
            rng_seed: seed,
            streamlines_per_bundle: 20,
        }
    }

    /// An arc and a helix, exercising curved geometry.
    pub fn curved(seed: u64) -> Self {
        Self {
            grid: VoxelGrid { dims: [40, 40, 32], voxel_size: 1.0 },
            bundles: vec![
                BundleSpec {
                    name: "arc".into(),
                    geometry: BundleGeometry::Arc {
                        center: [19.5, 19.5, 8.0],
                        normal: [0.0, 0.0, 1.0],
                        reference: [1.0, 0.0, 0.0],
                        curvature_radius: 14.0,
                        start_deg: 0.0,
                        end_deg: 180.0,
                    },
                    radius: 2.0,
                },
                BundleSpec {
                    name: "helix".into(),
                    geometry: BundleGeometry::Helix {
                        origin: [19.5, 19.5, 14.0],
                        axis: [0.0, 0.0, 1.0],
                        helix_radius: 6.0,
                        pitch: 8.0,
                        turns: 1.5,
                    },
                    radius: 1.5,
                },
            ],
            rng_seed: seed,
            streamlines_per_bundle: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub grid: VoxelGrid,
    pub sh: ShField,
    pub peaks: PeakField,
    pub masks: Vec<TractMask>,
    /// Ground-truth streamlines aligned with `masks`.
    pub ground_truth: Vec<Vec<Streamline>>,
}

impl Phantom {
    pub fn bundle_index(&self, name: &str) -> Result<usize> {
        self.masks
            .iter()
            .position(|m| m.bundle_name == name)
            .ok_or_else(|| Error::UnknownBundle(name.to_string()))
    }

    pub fn bundle_names(&self) -> Vec<String> {
        self.masks.iter().map(|m| m.bundle_name.clone()).collect()
    }

    /// Peaks of the voxel containing `pos` (empty outside the grid).
    pub fn peaks_at(&self, pos: V3) -> &[[f32; 3]] {
        match self.grid.nearest_voxel(pos) {
            Some(i) => self.peaks.peaks[i].as_slice(),
            None => &[],
        }
    }
}

/// Discretized tube centerline.
struct Tube {
    name: String,
    points: Vec<V3>,
    radius: f64,
}

fn expand_bundles(spec: &PhantomSpec) -> Result<Vec<Tube>> {
    let mut tubes = Vec::new();
    for b in &spec.bundles {
        if !(b.radius >= 1.0) {
            return Err(Error::Phantom(format!(
                "bundle {}: tube radius must be >= 1 voxel, got {}",
                b.name, b.radius
            )));
        }
        match &b.geometry {
            BundleGeometry::StraightTube { start, end } => {
                tubes.push(Tube { name: b.name.clone(), points: straight(*start, *end)?, radius: b.radius });
            }
            BundleGeometry::CrossingPair { center, dir_a, dir_b, half_length } => {
                for (suffix, dir) in [("a", dir_a), ("b", dir_b)] {
                    let d = vec3::normalize(*dir)
                        .ok_or_else(|| Error::Phantom(format!("bundle {}: zero direction", b.name)))?;
                    let start = vec3::sub(*center, vec3::scale(d, *half_length));
                    let end = vec3::add(*center, vec3::scale(d, *half_length));
                    tubes.push(Tube {
                        name: format!("{}_{suffix}", b.name),
                        points: straight(start, end)?,
                        radius: b.radius,
                    });
                }
            }
            BundleGeometry::Arc { center, normal, reference, curvature_radius, start_deg, end_deg } => {
                let n = vec3::normalize(*normal)
                    .ok_or_else(|| Error::Phantom(format!("bundle {}: zero normal", b.name)))?;
                let r0 = vec3::sub(*reference, vec3::scale(n, vec3::dot(*reference, n)));
                let u = vec3::normalize(r0)
                    .ok_or_else(|| Error::Phantom(format!("bundle {}: reference parallel to normal", b.name)))?;
                let v = vec3::cross(n, u);
                let (a0, a1) = (start_deg.to_radians(), end_deg.to_radians());
                let length = (a1 - a0).abs() * curvature_radius;
                if !(length > 0.0) {
                    return Err(Error::Phantom(format!("bundle {}: degenerate arc", b.name)));
                }
                let steps = (length / CENTERLINE_SPACING).ceil() as usize;
                let points = (0..=steps)
                    .map(|i| {
                        let a = a0 + (a1 - a0) * i as f64 / steps as f64;
                        vec3::add(
                            *center,
                            vec3::add(vec3::scale(u, curvature_radius * a.cos()), vec3::scale(v, curvature_radius * a.sin())),
                        )
                    })
                    .collect();
                tubes.push(Tube { name: b.name.clone(), points, radius: b.radius });
            }
            BundleGeometry::Helix { origin, axis, helix_radius, pitch, turns } => {
                let ax = vec3::normalize(*axis)
                    .ok_or_else(|| Error::Phantom(format!("bundle {}: zero axis", b.name)))?;
                let u = vec3::any_perpendicular(ax);
                let v = vec3::cross(ax, u);
                let total_angle = 2.0 * std::f64::consts::PI * turns;
                let per_radian = ((helix_radius * helix_radius) + (pitch / (2.0 * std::f64::consts::PI)).powi(2)).sqrt();
                let length = total_angle.abs() * per_radian;
                if !(length > 0.0) {
                    return Err(Error::Phantom(format!("bundle {}: degenerate helix", b.name)));
                }
                let steps = (length / CENTERLINE_SPACING).ceil() as usize;
                let points = (0..=steps)
                    .map(|i| {
                        let a = total_angle * i as f64 / steps as f64;
                        let rise = pitch * a / (2.0 * std::f64::consts::PI);
                        vec3::add(
                            vec3::add(*origin, vec3::scale(ax, rise)),
                            vec3::add(vec3::scale(u, helix_radius * a.cos()), vec3::scale(v, helix_radius * a.sin())),
                        )
                    })
                    .collect();
                tubes.push(Tube { name: b.name.clone(), points, radius: b.radius });
            }
        }
    }
    let mut names: Vec<&str> = tubes.iter().map(|t| t.name.as_str()).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Phantom("bundle names must be unique".into()));
    }
    if tubes.is_empty() {
        return Err(Error::Phantom("phantom needs at least one bundle".into()));
    }
    Ok(tubes)
}

fn straight(start: V3, end: V3) -> Result<Vec<V3>> {
    let length = vec3::dist(start, end);
    if !(length > 0.0) {
        return Err(Error::Phantom("straight tube has zero length".into()));
    }
    let steps = (length / CENTERLINE_SPACING).ceil() as usize;
    Ok((0..=steps)
        .map(|i| vec3::add(start, vec3::scale(vec3::sub(end, start), i as f64 / steps as f64)))
        .collect())
}

fn closest_on_segment(p: V3, a: V3, b: V3) -> (f64, V3) {
    let ab = vec3::sub(b, a);
    let len2 = vec3::dot(ab, ab);
    let t = if len2 > 0.0 { (vec3::dot(vec3::sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let c = vec3::add(a, vec3::scale(ab, t));
    (vec3::dist(p, c), c)
}

/// Rasterize a tube: per voxel, the distance to the centerline and the local tangent.
fn rasterize(grid: &VoxelGrid, tube: &Tube) -> (Vec<u8>, Vec<Option<V3>>) {
    let n = grid.len();
    let mut best = vec![f64::INFINITY; n];
    let mut tangent: Vec<Option<V3>> = vec![None; n];
    let reach = tube.radius.ceil() as i64 + 1;
    for w in tube.points.windows(2) {
        let t = match vec3::normalize(vec3::sub(w[1], w[0])) {
            Some(t) => t,
            None => continue,
        };
        let lo: Vec<i64> = (0..3).map(|a| w[0][a].min(w[1][a]).floor() as i64 - reach).collect();
        let hi: Vec<i64> = (0..3).map(|a| w[0][a].max(w[1][a]).ceil() as i64 + reach).collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let Some(idx) = grid.index_signed(x, y, z) else { continue };
                    let (d, _) = closest_on_segment([x as f64, y as f64, z as f64], w[0], w[1]);
                    if d < best[idx] {
                        best[idx] = d;
                        tangent[idx] = Some(t);
                    }
                }
            }
        }
    }
    let mut mask = vec![0u8; n];
    for i in 0..n {
        if best[i] <= tube.radius {
            mask[i] = 1;
        } else {
            tangent[i] = None;
        }
    }
    (mask, tangent)
}

/// Parallel-transport frames along a polyline: `(tangent, normal, binormal)` per point.
fn transport_frames(points: &[V3]) -> Vec<(V3, V3, V3)> {
    let n = points.len();
    let tangent_at = |i: usize| -> V3 {
        let (a, b) = if i + 1 < n { (points[i], points[i + 1]) } else { (points[i - 1], points[i]) };
        vec3::normalize(vec3::sub(b, a)).unwrap_or([1.0, 0.0, 0.0])
    };
    let mut frames = Vec::with_capacity(n);
    let t0 = tangent_at(0);
    let mut nrm = vec3::any_perpendicular(t0);
    for i in 0..n {
        let t = tangent_at(i);
        let projected = vec3::sub(nrm, vec3::scale(t, vec3::dot(nrm, t)));
        nrm = vec3::normalize(projected).unwrap_or_else(|| vec3::any_perpendicular(t));
        frames.push((t, nrm, vec3::cross(t, nrm)));
    }
    frames
}

fn resample_polyline(points: &[V3], spacing: f64) -> Vec<V3> {
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + vec3::dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    let k = ((total / spacing).ceil() as usize).max(1) + 1;
    let mut out = Vec::with_capacity(k);
    let mut seg = 0;
    for i in 0..k {
        let target = total * i as f64 / (k - 1) as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(vec3::add(points[seg], vec3::scale(vec3::sub(points[seg + 1], points[seg]), t)));
    }
    out
}

fn ground_truth(
    grid: &VoxelGrid,
    tube: &Tube,
    mask: &[u8],
    count: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<Streamline>> {
    let center = resample_polyline(&tube.points, GT_SPACING);
    let frames = transport_frames(&center);
    // Points within this distance of the centerline always round to an in-mask voxel.
    let max_offset = (tube.radius - 0.9).max(0.0);
    let inside = |pts: &[V3]| {
        pts.iter().all(|&p| grid.nearest_voxel(p).is_some_and(|i| mask[i] == 1))
    };
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let (mut rho, phi) = if k == 0 {
            (0.0, 0.0)
        } else {
            let u: f64 = rng.random();
            (max_offset * u.sqrt(), rng.random::<f64>() * 2.0 * std::f64::consts::PI)
        };
        loop {
            let pts: Vec<V3> = center
                .iter()
                .zip(&frames)
                .map(|(&c, &(_, nrm, bin))| {
                    vec3::add(c, vec3::add(vec3::scale(nrm, rho * phi.cos()), vec3::scale(bin, rho * phi.sin())))
                })
                .collect();
            if inside(&pts) {
                out.push(Streamline::from_f64(&pts)?);
                break;
            }
            if rho == 0.0 {
                return Err(Error::Phantom(format!("centerline of {} leaves its own mask", tube.name)));
            }
            rho = if rho < 1e-3 { 0.0 } else { rho * 0.5 };
        }
    }
    Ok(out)
}

/// Build a phantom. Deterministic in `spec.rng_seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let grid = VoxelGrid::new(spec.grid.dims, spec.grid.voxel_size)?;
    if spec.streamlines_per_bundle < 15 {
        return Err(Error::Phantom(format!(
            "need at least 15 ground-truth streamlines per bundle, got {}",
            spec.streamlines_per_bundle
        )));
    }
    let tubes = expand_bundles(spec)?;
    for t in &tubes {
        for p in &t.points {
            for a in 0..3 {
                if p[a] - t.radius < -0.5 || p[a] + t.radius > grid.dims[a] as f64 - 0.5 {
                    return Err(Error::Phantom(format!(
                        "bundle {} extends outside the grid at {p:?} (radius {})",
                        t.name, t.radius
                    )));
                }
            }
        }
    }

    let cos_merge = PEAK_MERGE_DEG.to_radians().cos();
    let mut peak_lists: Vec<Vec<V3>> = vec![Vec::new(); grid.len()];
    let mut masks = Vec::with_capacity(tubes.len());
    let mut raw_masks = Vec::with_capacity(tubes.len());
    for t in &tubes {
        let (mask, tangent) = rasterize(&grid, t);
        for (i, tan) in tangent.iter().enumerate() {
            let Some(tan) = tan else { continue };
            let list = &mut peak_lists[i];
            if list.len() < MAX_PEAKS && list.iter().all(|p| vec3::dot(*p, *tan).abs() < cos_merge) {
                list.push(*tan);
            }
        }
        masks.push(TractMask::new(t.name.clone(), mask.clone(), &grid)?);
        raw_masks.push(mask);
    }

    let mut peaks = Vec::with_capacity(grid.len());
    let mut coeffs = vec![0.0f32; grid.len() * SH_COEFFS];
    for (i, list) in peak_lists.iter().enumerate() {
        let f32s: Vec<[f32; 3]> = list.iter().map(|&p| unit_f32(p)).collect();
        peaks.push(PeakSet::new(&f32s)?);
        if !list.is_empty() {
            let c = sh_project_peaks(list);
            for (dst, src) in coeffs[i * SH_COEFFS..(i + 1) * SH_COEFFS].iter_mut().zip(c) {
                *dst = src as f32;
            }
        }
    }

    let mut gt = Vec::with_capacity(tubes.len());
    for (bi, t) in tubes.iter().enumerate() {
        let mut r = rng::stream_indexed(spec.rng_seed, "phantom.gt", bi as u64);
        gt.push(ground_truth(&grid, t, &raw_masks[bi], spec.streamlines_per_bundle, &mut r)?);
    }

    Ok(Phantom {
        grid,
        sh: ShField { coeffs },
        peaks: PeakField { peaks },
        masks,
        ground_truth: gt,
    })
}

/// f32 unit vector whose f64 norm is within 1e-6 of one.
fn unit_f32(p: V3) -> [f32; 3] {
    vec3::to_f32(vec3::normalize(p).expect("tangent is unit"))
}
