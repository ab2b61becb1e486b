//! Streamlines and the distances used to compare them.
//!
//! Coordinates are voxel coordinates (voxel `i` has its center at coordinate `i`). Distances
//! between streamlines are reported in millimetres: points are scaled by the voxel size
//! before the mean direct-flip (MDF) distance is taken.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::vec3::{self, V3};

/// Point count every streamline is resampled to before MDF comparisons.
pub const MDF_POINTS: usize = 20;

/// Default size of a reference set.
pub const REFERENCE_COUNT: usize = 15;

const STL_MAGIC: &[u8; 4] = b"STL1";

#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    points: Vec<[f32; 3]>,
}

impl Streamline {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "streamline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("streamline coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn from_f64(points: &[V3]) -> Result<Self> {
        Self::new(points.iter().map(|&p| vec3::to_f32(p)).collect())
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> V3 {
        vec3::from_f32(self.points[i])
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| vec3::dist(vec3::from_f32(w[0]), vec3::from_f32(w[1])))
            .sum()
    }
}

/// Resample to `k` points equally spaced by arc length. Endpoints are copied exactly.
pub fn resample(s: &Streamline, k: usize) -> Result<Streamline> {
    let pts = resample_f64(s, k)?;
    let mut out: Vec<[f32; 3]> = pts.iter().map(|&p| vec3::to_f32(p)).collect();
    out[0] = s.points[0];
    out[k - 1] = s.points[s.points.len() - 1];
    Ok(Streamline { points: out })
}

fn resample_f64(s: &Streamline, k: usize) -> Result<Vec<V3>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("resample needs k >= 2, got {k}")));
    }
    let pts: Vec<V3> = s.points.iter().map(|&p| vec3::from_f32(p)).collect();
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + vec3::dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total <= 1e-12 {
        return Err(Error::InvalidArgument("cannot resample a zero-length streamline".into()));
    }
    let mut out = Vec::with_capacity(k);
    let mut seg = 0;
    for i in 0..k {
        if i == k - 1 {
            out.push(pts[pts.len() - 1]);
            break;
        }
        let target = total * i as f64 / (k - 1) as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(vec3::add(pts[seg], vec3::scale(vec3::sub(pts[seg + 1], pts[seg]), t)));
    }
    Ok(out)
}

/// A streamline resampled to the canonical point count and scaled to millimetres, ready for
/// repeated MDF evaluation.
#[derive(Debug, Clone)]
pub struct MdfPoints {
    pts: Vec<V3>,
}

impl MdfPoints {
    pub fn new(s: &Streamline, voxel_size: f64) -> Result<Self> {
        let pts = resample_f64(s, MDF_POINTS)?;
        Ok(Self {
            pts: pts.into_iter().map(|p| vec3::scale(p, voxel_size)).collect(),
        })
    }

    /// Uses the points as given (no resampling).
    pub fn exact(s: &Streamline, voxel_size: f64) -> Self {
        Self {
            pts: (0..s.len()).map(|i| vec3::scale(s.point(i), voxel_size)).collect(),
        }
    }

    pub fn distance(&self, other: &MdfPoints) -> Result<f64> {
        if self.pts.len() != other.pts.len() {
            return Err(Error::shape("mdf", self.pts.len(), other.pts.len()));
        }
        Ok(mdf_points(&self.pts, &other.pts))
    }
}

fn mdf_points(a: &[V3], b: &[V3]) -> f64 {
    let k = a.len();
    let mut direct = 0.0;
    let mut flipped = 0.0;
    for i in 0..k {
        direct += vec3::dist(a[i], b[i]);
        flipped += vec3::dist(a[i], b[k - 1 - i]);
    }
    direct.min(flipped) / k as f64
}

/// MDF distance in mm between two streamlines that already share a point count.
pub fn mdf(a: &Streamline, b: &Streamline, voxel_size: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mdf point count", a.len(), b.len()));
    }
    MdfPoints::exact(a, voxel_size).distance(&MdfPoints::exact(b, voxel_size))
}

/// MDF after resampling both streamlines to [`MDF_POINTS`].
pub fn mdf_canonical(a: &Streamline, b: &Streamline, voxel_size: f64) -> Result<f64> {
    MdfPoints::new(a, voxel_size)?.distance(&MdfPoints::new(b, voxel_size)?)
}

#[derive(Debug, Clone)]
pub struct ReferenceSet {
    /// Canonically resampled reference streamlines in selection order.
    pub streamlines: Vec<Streamline>,
    /// Pool indices in selection order.
    pub indices: Vec<usize>,
    pub voxel_size: f64,
    mdf_points: Vec<MdfPoints>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    /// Smallest MDF (mm) from `s` to any reference.
    pub fn min_distance(&self, s: &Streamline) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty reference set".into()));
        }
        let p = MdfPoints::new(s, self.voxel_size)?;
        self.min_distance_points(&p)
    }

    pub fn min_distance_points(&self, p: &MdfPoints) -> Result<f64> {
        let mut best = f64::INFINITY;
        for r in &self.mdf_points {
            best = best.min(p.distance(r)?);
        }
        Ok(best)
    }
}

/// Pairwise MDF matrix (mm) over canonically resampled streamlines.
pub fn mdf_matrix(pool: &[MdfPoints]) -> Vec<Vec<f64>> {
    let n = pool.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = mdf_points(&pool[i].pts, &pool[j].pts);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Pool element with the smallest summed MDF to every other element (ties: lowest index).
pub fn medoid_index(pool: &[Streamline], voxel_size: f64) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("medoid of an empty pool".into()));
    }
    let pts = pool
        .iter()
        .map(|s| MdfPoints::new(s, voxel_size))
        .collect::<Result<Vec<_>>>()?;
    let d = mdf_matrix(&pts);
    let mut best = 0;
    let mut best_sum = f64::INFINITY;
    for (i, row) in d.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if sum < best_sum {
            best_sum = sum;
            best = i;
        }
    }
    Ok(best)
}

/// Greedy max-min selection of `n` streamlines starting from `start_index`. Each step adds the
/// pool element whose minimum MDF to the selected set is largest; ties go to the lowest index.
pub fn farthest_sample(
    pool: &[Streamline],
    n: usize,
    start_index: usize,
    voxel_size: f64,
) -> Result<ReferenceSet> {
    if n > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} streamlines from a pool of {}",
            pool.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("reference set size must be positive".into()));
    }
    if start_index >= pool.len() {
        return Err(Error::InvalidArgument(format!(
            "start index {start_index} out of range for pool of {}",
            pool.len()
        )));
    }
    let pts = pool
        .iter()
        .map(|s| MdfPoints::new(s, voxel_size))
        .collect::<Result<Vec<_>>>()?;
    let mut selected = vec![start_index];
    let mut min_d: Vec<f64> = pts.iter().map(|p| mdf_points(&p.pts, &pts[start_index].pts)).collect();
    let mut taken = vec![false; pool.len()];
    taken[start_index] = true;
    while selected.len() < n {
        let mut best: Option<usize> = None;
        for i in 0..pool.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if min_d[i] <= min_d[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("pool has unselected elements");
        taken[b] = true;
        selected.push(b);
        for i in 0..pool.len() {
            let d = mdf_points(&pts[i].pts, &pts[b].pts);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    let streamlines = selected
        .iter()
        .map(|&i| resample(&pool[i], MDF_POINTS))
        .collect::<Result<Vec<_>>>()?;
    let mdf_points = selected.iter().map(|&i| pts[i].clone()).collect();
    Ok(ReferenceSet {
        streamlines,
        indices: selected,
        voxel_size,
        mdf_points,
    })
}

/// Reference set starting from the pool medoid.
pub fn reference_set(pool: &[Streamline], n: usize, voxel_size: f64) -> Result<ReferenceSet> {
    let start = medoid_index(pool, voxel_size)?;
    farthest_sample(pool, n, start, voxel_size)
}

/// `STL1` layout: magic, u32 count, then (only when count > 0) f32 voxel size, then per
/// streamline a u32 point count followed by x,y,z f32 triples. Little-endian.
pub fn encode_streamlines(streamlines: &[Streamline], voxel_size: f32) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(STL_MAGIC);
    let count = u32::try_from(streamlines.len())
        .map_err(|_| Error::InvalidArgument("too many streamlines".into()))?;
    w.u32(count);
    if count > 0 {
        w.f32(voxel_size);
    }
    for s in streamlines {
        w.u32(s.len() as u32);
        for p in &s.points {
            w.f32s(p);
        }
    }
    Ok(w.into_bytes())
}

/// Returns the streamlines and the stored voxel size (1.0 for an empty file).
pub fn decode_streamlines(bytes: &[u8]) -> Result<(Vec<Streamline>, f32)> {
    let mut r = Reader::new("STL1", bytes);
    r.magic(STL_MAGIC)?;
    let count = r.u32()? as usize;
    let voxel_size = if count > 0 { r.f32()? } else { 1.0 };
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let at = r.offset();
        let n = r.u32()? as usize;
        let flat = r.f32s(n.checked_mul(3).ok_or_else(|| r.error("point count overflow"))?)?;
        let points: Vec<[f32; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let s = Streamline::new(points).map_err(|e| Error::Decode {
            format: "STL1",
            offset: at,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    r.finish()?;
    Ok((out, voxel_size))
}

pub fn write_streamlines(path: &Path, streamlines: &[Streamline], voxel_size: f32) -> Result<()> {
    binio::write_file(path, &encode_streamlines(streamlines, voxel_size)?)
}

pub fn read_streamlines(path: &Path) -> Result<(Vec<Streamline>, f32)> {
    decode_streamlines(&binio::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(offset: f32, n: usize) -> Streamline {
        Streamline::new((0..n).map(|i| [i as f32, offset, 0.0]).collect()).unwrap()
    }

    #[test]
    fn resample_straight_segment() {
        let s = Streamline::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let r = resample(&s, 3).unwrap();
        assert_eq!(r.points(), &[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn resample_uniform_is_identity() {
        let s = line(2.5, 20);
        let r = resample(&s, 20).unwrap();
        for (a, b) in s.points().iter().zip(r.points()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn resample_preserves_endpoints_exactly() {
        let s = Streamline::new(vec![[0.1, 0.2, 0.3], [1.7, 0.9, 0.1], [3.3, 2.1, 1.9]]).unwrap();
        let r = resample(&s, 7).unwrap();
        assert_eq!(r.points()[0], s.points()[0]);
        assert_eq!(r.points()[6], s.points()[2]);
    }

    #[test]
    fn resample_rejects_degenerate() {
        let s = Streamline::new(vec![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        assert!(resample(&s, 5).is_err());
        assert!(resample(&line(0.0, 3), 1).is_err());
    }

    #[test]
    fn mdf_basics() {
        let a = line(0.0, 20);
        assert_eq!(mdf(&a, &a, 1.0).unwrap(), 0.0);
        assert!(mdf(&a, &a.reversed(), 1.0).unwrap() < 1e-12);
        let b = line(3.0, 20);
        assert!((mdf(&a, &b, 1.0).unwrap() - 3.0).abs() < 1e-12);
        assert!((mdf(&a, &b, 2.0).unwrap() - 6.0).abs() < 1e-12);
        assert!(mdf(&a, &line(0.0, 19), 1.0).is_err());
    }

    #[test]
    fn farthest_sample_parallel_lines() {
        let pool = vec![line(0.0, 10), line(1.0, 10), line(10.0, 10)];
        let refs = farthest_sample(&pool, 2, 0, 1.0).unwrap();
        assert_eq!(refs.indices, vec![0, 2]);
        let all = farthest_sample(&pool, 3, 0, 1.0).unwrap();
        assert_eq!(all.indices, vec![0, 2, 1]);
        assert!(farthest_sample(&pool, 4, 0, 1.0).is_err());
    }

    #[test]
    fn empty_file_is_eight_bytes() {
        let bytes = encode_streamlines(&[], 1.0).unwrap();
        assert_eq!(bytes.len(), 8);
        let (s, _) = decode_streamlines(&bytes).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn truncated_file_errors() {
        let bytes = encode_streamlines(&[line(1.0, 5)], 1.25).unwrap();
        for cut in [3, 9, 15, bytes.len() - 1] {
            match decode_streamlines(&bytes[..cut]) {
                Err(Error::Decode { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    fn arb_streamline() -> impl Strategy<Value = Streamline> {
        prop::collection::vec(prop::array::uniform3(-50.0f32..50.0), 2..30)
            .prop_map(|p| Streamline::new(p).unwrap())
    }

    proptest! {
        #[test]
        fn stl_roundtrip_bit_exact(set in prop::collection::vec(arb_streamline(), 0..8), vs in 0.1f32..3.0) {
            let bytes = encode_streamlines(&set, vs).unwrap();
            let (back, vs2) = decode_streamlines(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            if !set.is_empty() {
                prop_assert_eq!(vs.to_bits(), vs2.to_bits());
            }
            prop_assert_eq!(encode_streamlines(&back, vs2).unwrap().len(), bytes.len());
        }

        #[test]
        fn mdf_symmetric_and_reversal_invariant(a in arb_streamline(), b in arb_streamline()) {
            prop_assume!(a.arc_length() > 1e-3 && b.arc_length() > 1e-3);
            let ab = mdf_canonical(&a, &b, 1.0).unwrap();
            let ba = mdf_canonical(&b, &a, 1.0).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9);
            let rr = mdf_canonical(&a.reversed(), &b.reversed(), 1.0).unwrap();
            prop_assert!((ab - rr).abs() <= 1e-6);
        }
    }
}
