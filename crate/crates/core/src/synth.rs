//! Seeded generator of vessel-like tubular tree masks.
//!
//! Trees grow from a boundary-adjacent root by repeated segment extension
//! and two-way branching; the mask is the union of tubes rasterized by
//! exact Euclidean distance to each centerline segment. Everything is a
//! pure function of the parameters, so a seed fully determines a sample.

use crate::error::{FormatError, SvxError, SvxResult};
use crate::io;
use crate::voxel::{Coordinate, Dims, VoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct TreeParams {
    pub dims: Dims,
    /// Tube radius at the root, in voxels.
    pub root_radius: f64,
    /// Multiplier applied to the radius at every branching, in (0, 1].
    pub radius_decay: f64,
    /// Segment length bounds in voxels, sampled uniformly.
    pub len_range: (f64, f64),
    /// Probability that a node splits into two children instead of
    /// continuing as one.
    pub branch_prob: f64,
    /// Maximum number of segments along any root-to-leaf path.
    pub max_depth: usize,
    /// Largest angle, in radians, between a parent direction and a child's.
    pub jitter: f64,
    /// Extra segments bridging random branch points, creating loops.
    /// Zero for ordinary trees; nonzero only to manufacture β₁ > 0 cases.
    pub loop_bridges: usize,
    pub seed: u64,
}

impl TreeParams {
    /// Defaults that fill a 64³ grid with a sparse (well under 10%) tree.
    pub fn desk(seed: u64) -> TreeParams {
        TreeParams {
            dims: Dims::new(64, 64, 64),
            root_radius: 2.5,
            radius_decay: 0.85,
            len_range: (10.0, 22.0),
            branch_prob: 0.35,
            max_depth: 6,
            jitter: 0.5,
            loop_bridges: 0,
            seed,
        }
    }

    pub fn validate(&self) -> SvxResult<()> {
        let (h, w, d) = self.dims.as_tuple();
        if !self.dims.divisible_by(8) || h == 0 {
            return Err(SvxError::DimsNotDivisibleBy8 { dims: self.dims.as_tuple() });
        }
        let detail = |msg: String| Err(SvxError::DegenerateTreeParams { detail: msg });
        if !self.root_radius.is_finite() || self.root_radius < 1.0 {
            return detail(format!("root radius {} below 1 voxel", self.root_radius));
        }
        let min_dim = h.min(w).min(d) as f64;
        if 2.0 * self.root_radius > min_dim - 1.0 {
            return detail(format!(
                "root radius {} too large for {}x{}x{} grid",
                self.root_radius, h, w, d
            ));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0) {
            return detail(format!("radius decay {} outside (0, 1]", self.radius_decay));
        }
        let (lo, hi) = self.len_range;
        if !(lo.is_finite() && hi.is_finite() && 1.0 <= lo && lo <= hi) {
            return detail(format!("segment length range ({lo}, {hi}) invalid"));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return detail(format!("branch probability {} outside [0, 1]", self.branch_prob));
        }
        if self.max_depth == 0 {
            return detail("max depth must be at least 1".to_string());
        }
        if !self.jitter.is_finite() || self.jitter < 0.0 {
            return detail(format!("jitter angle {} invalid", self.jitter));
        }
        Ok(())
    }
}

/// One straight centerline piece. A zero-length segment (a == b) is a ball,
/// which is how aneurysm blobs are represented.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Healthy,
    Aneurysm,
    Stenosis,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Aneurysm => "aneurysm",
            Label::Stenosis => "stenosis",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "healthy" => Some(Label::Healthy),
            "aneurysm" => Some(Label::Aneurysm),
            "stenosis" => Some(Label::Stenosis),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VesselSample {
    pub mask: VoxelGrid,
    /// Centerline geometry; the mask is always exactly its rasterization.
    pub segments: Vec<Segment>,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    AneurysmBlob,
    StenosisPinch,
}

// ---------------------------------------------------------------------------
// Rasterization

fn dist_point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if denom == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / denom).clamp(0.0, 1.0)
    };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    let dz = ap[2] - t * ab[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Voxel centers within `radius` of the segment ab (inclusive), clipped to
/// the grid and returned in ascending lexicographic order. Scans only the
/// segment's bounding box.
pub fn rasterize_tube(dims: Dims, a: [f64; 3], b: [f64; 3], radius: f64) -> Vec<Coordinate> {
    debug_assert!(radius >= 1.0, "tube radius {radius} below one voxel");
    let (h, w, d) = dims.as_tuple();
    let lo = |i: usize| (a[i].min(b[i]) - radius).floor().max(0.0) as u32;
    let hi = |i: usize, n: u32| ((a[i].max(b[i]) + radius).ceil() as i64).min(n as i64 - 1) as u32;
    if h == 0 || w == 0 || d == 0 {
        return Vec::new();
    }
    let (x0, x1) = (lo(0), hi(0, h));
    let (y0, y1) = (lo(1), hi(1, w));
    let (z0, z1) = (lo(2), hi(2, d));
    let mut out = Vec::new();
    for x in x0..=x1 {
        for y in y0..=y1 {
            for z in z0..=z1 {
                let p = [x as f64, y as f64, z as f64];
                if dist_point_segment(p, a, b) <= radius {
                    out.push(Coordinate::new(x, y, z));
                }
            }
        }
    }
    out
}

/// Union of all segment tubes as a dense grid.
pub fn rasterize_segments(dims: Dims, segments: &[Segment]) -> VoxelGrid {
    let mut g = VoxelGrid::new(dims);
    for s in segments {
        for c in rasterize_tube(dims, s.a, s.b, s.radius) {
            g.set_coord(c, 1);
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Tree growth

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Rotate `dir` away from itself by a uniform angle in [0, max_angle],
/// around a uniform azimuth.
fn jittered<R: Rng>(rng: &mut R, dir: [f64; 3], max_angle: f64) -> [f64; 3] {
    if max_angle <= 0.0 {
        return dir;
    }
    let theta = rng.gen_range(0.0..=max_angle);
    let phi = rng.gen_range(0.0..TAU);
    // Any axis not parallel to dir seeds the orthonormal frame; the least
    // aligned one is safest.
    let axis = if dir[0].abs() <= dir[1].abs() && dir[0].abs() <= dir[2].abs() {
        [1.0, 0.0, 0.0]
    } else if dir[1].abs() <= dir[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let e1 = normalize(cross(dir, axis));
    let e2 = cross(dir, e1);
    let (s, c) = theta.sin_cos();
    normalize([
        dir[0] * c + (e1[0] * phi.cos() + e2[0] * phi.sin()) * s,
        dir[1] * c + (e1[1] * phi.cos() + e2[1] * phi.sin()) * s,
        dir[2] * c + (e1[2] * phi.cos() + e2[2] * phi.sin()) * s,
    ])
}

/// Grow a connected tree and rasterize it. Children start exactly at their
/// parent's endpoint and every tube has radius ≥ 1, so the union is a single
/// 26-connected component by construction.
pub fn generate_tree(params: &TreeParams) -> SvxResult<VesselSample> {
    params.validate()?;
    let (h, w, d) = params.dims.as_tuple();
    let ext = [h as f64, w as f64, d as f64];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // Root sits one radius in from a random face so the tube touches the
    // boundary, pointing inward.
    let face = rng.gen_range(0..6usize);
    let axis = face / 2;
    let high = face % 2 == 1;
    let clamp_box = |p: f64, i: usize, r: f64| p.clamp(r, ext[i] - 1.0 - r);
    let mut start = [0.0; 3];
    for i in 0..3 {
        start[i] = if i == axis {
            if high { ext[i] - 1.0 - params.root_radius } else { params.root_radius }
        } else {
            clamp_box(rng.gen_range(0.0..ext[i]), i, params.root_radius)
        };
    }
    let mut inward = [0.0; 3];
    inward[axis] = if high { -1.0 } else { 1.0 };
    let root_dir = jittered(&mut rng, inward, params.jitter);

    let mut segments = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((start, root_dir, params.root_radius, 0usize));
    while let Some((a, dir, radius, depth)) = queue.pop_front() {
        let len = rng.gen_range(params.len_range.0..=params.len_range.1);
        let mut b = [0.0; 3];
        for i in 0..3 {
            b[i] = clamp_box(a[i] + dir[i] * len, i, radius);
        }
        segments.push(Segment { a, b, radius });
        if depth + 1 >= params.max_depth {
            continue;
        }
        if rng.gen_bool(params.branch_prob) {
            let r = (radius * params.radius_decay).max(1.0);
            for _ in 0..2 {
                let child_dir = jittered(&mut rng, dir, params.jitter);
                queue.push_back((b, child_dir, r, depth + 1));
            }
        } else {
            let child_dir = jittered(&mut rng, dir, params.jitter);
            queue.push_back((b, child_dir, radius, depth + 1));
        }
    }

    for _ in 0..params.loop_bridges {
        if segments.len() < 2 {
            break;
        }
        let i = rng.gen_range(0..segments.len());
        let j = rng.gen_range(0..segments.len());
        let (pa, ra) = (segments[i].b, segments[i].radius);
        let (pb, rb) = (segments[j].b, segments[j].radius);
        if pa != pb {
            segments.push(Segment { a: pa, b: pb, radius: ra.min(rb).max(1.0) });
        }
    }

    let mask = rasterize_segments(params.dims, &segments);
    Ok(VesselSample { mask, segments, label: Label::Healthy })
}

// ---------------------------------------------------------------------------
// Anomalies

const STENOSIS_ATTEMPTS: usize = 10;

/// Deterministic anomaly injection. Aneurysm blobs are unioned in as
/// zero-length segments; stenoses re-rasterize a short window of one
/// segment at half its radius. Both keep the mask equal to its segments'
/// rasterization.
pub fn add_anomaly(
    sample: &VesselSample,
    kind: AnomalyKind,
    seed: u64,
) -> SvxResult<VesselSample> {
    if sample.segments.is_empty() {
        return Err(SvxError::EmptyInput("segments"));
    }
    let dims = sample.mask.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        AnomalyKind::AneurysmBlob => {
            let s = &sample.segments[rng.gen_range(0..sample.segments.len())];
            let t = rng.gen_range(0.25..=0.75);
            let center = [
                s.a[0] + t * (s.b[0] - s.a[0]),
                s.a[1] + t * (s.b[1] - s.a[1]),
                s.a[2] + t * (s.b[2] - s.a[2]),
            ];
            let blob = rng.gen_range(2.0..=3.0) * s.radius;
            let mut segments = sample.segments.clone();
            segments.push(Segment { a: center, b: center, radius: blob });
            let mask = rasterize_segments(dims, &segments);
            Ok(VesselSample { mask, segments, label: Label::Aneurysm })
        }
        AnomalyKind::StenosisPinch => {
            let before = sample.mask.active_count();
            for _ in 0..STENOSIS_ATTEMPTS {
                let si = rng.gen_range(0..sample.segments.len());
                let s = &sample.segments[si];
                // A pinch below radius 1 would break the tube's own
                // connectivity guarantee, so thin segments are never
                // eligible; the draw still counts as an attempt.
                if s.radius < 2.0 {
                    continue;
                }
                let dl = [s.b[0] - s.a[0], s.b[1] - s.a[1], s.b[2] - s.a[2]];
                let norm = (dl[0] * dl[0] + dl[1] * dl[1] + dl[2] * dl[2]).sqrt();
                // Window long enough that the neighbors' spherical end caps
                // cannot refill it.
                let window = (2.0 * s.radius + 2.0).min(norm * 0.5);
                if window <= 1.0 {
                    continue;
                }
                let s0 = rng.gen_range(0.0..=(norm - window));
                let at = |dist: f64| {
                    [
                        s.a[0] + dl[0] / norm * dist,
                        s.a[1] + dl[1] / norm * dist,
                        s.a[2] + dl[2] / norm * dist,
                    ]
                };
                let (p1, p2) = (at(s0), at(s0 + window));
                let mut segments = sample.segments.clone();
                segments.splice(
                    si..=si,
                    [
                        Segment { a: s.a, b: p1, radius: s.radius },
                        Segment { a: p1, b: p2, radius: s.radius / 2.0 },
                        Segment { a: p2, b: s.b, radius: s.radius },
                    ],
                );
                let mask = rasterize_segments(dims, &segments);
                let shrank = mask.active_count() < before;
                if shrank && crate::metrics::betti_numbers(&mask).b0 == 1 {
                    return Ok(VesselSample { mask, segments, label: Label::Stenosis });
                }
            }
            Err(SvxError::StenosisFailed { attempts: STENOSIS_ATTEMPTS })
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset files

/// Write each sample as `<name>.svox` plus a `labels.csv` manifest of
/// `filename,label` lines. Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[(String, VesselSample)]) -> SvxResult<PathBuf> {
    std::fs::create_dir_all(dir)
        .map_err(|e| SvxError::Io { path: dir.to_path_buf(), detail: e.to_string() })?;
    let mut manifest = String::new();
    for (name, sample) in samples {
        let file = format!("{name}.svox");
        io::write_svox(&dir.join(&file), &sample.mask)?;
        manifest.push_str(&format!("{file},{}\n", sample.label.as_str()));
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, manifest)
        .map_err(|e| SvxError::Io { path: path.clone(), detail: e.to_string() })?;
    Ok(path)
}

pub fn read_label_manifest(path: &Path) -> SvxResult<Vec<(String, Label)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SvxError::Io { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || FormatError::BadConfigLine { line: line.to_string() };
        let (file, label) = line.split_once(',').ok_or_else(bad)?;
        out.push((file.to_string(), Label::parse(label.trim()).ok_or_else(bad)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::betti_numbers;

    fn straight_tube(radius: f64) -> VesselSample {
        let dims = Dims::new(32, 32, 32);
        let segments =
            vec![Segment { a: [4.0, 16.0, 16.0], b: [27.0, 16.0, 16.0], radius }];
        let mask = rasterize_segments(dims, &segments);
        VesselSample { mask, segments, label: Label::Healthy }
    }

    #[test]
    fn rejects_degenerate_params() {
        let base = TreeParams::desk(0);
        let cases: Vec<(&str, TreeParams)> = vec![
            ("radius", TreeParams { root_radius: 0.5, ..base.clone() }),
            ("radius vs grid", TreeParams { root_radius: 40.0, ..base.clone() }),
            ("decay", TreeParams { radius_decay: 0.0, ..base.clone() }),
            ("lengths", TreeParams { len_range: (9.0, 3.0), ..base.clone() }),
            ("probability", TreeParams { branch_prob: 1.5, ..base.clone() }),
            ("depth", TreeParams { max_depth: 0, ..base.clone() }),
            ("jitter", TreeParams { jitter: -0.1, ..base.clone() }),
        ];
        for (what, p) in cases {
            assert!(
                matches!(generate_tree(&p), Err(SvxError::DegenerateTreeParams { .. })),
                "{what} accepted"
            );
        }
        let p = TreeParams { dims: Dims::new(60, 64, 64), ..base };
        assert!(matches!(generate_tree(&p), Err(SvxError::DimsNotDivisibleBy8 { .. })));
    }

    #[test]
    fn branchless_depth_one_is_a_single_tube() {
        let p = TreeParams { branch_prob: 0.0, max_depth: 1, ..TreeParams::desk(7) };
        let s = generate_tree(&p).unwrap();
        assert_eq!(s.segments.len(), 1);
        assert_eq!(s.label, Label::Healthy);
        let b = betti_numbers(&s.mask);
        assert_eq!((b.b0, b.b1, b.b2), (1, 0, 0));
        assert_eq!(s.mask, rasterize_segments(p.dims, &s.segments));
    }

    #[test]
    fn same_seed_reproduces_the_sample() {
        let p = TreeParams::desk(42);
        let a = generate_tree(&p).unwrap();
        let b = generate_tree(&p).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.segments, b.segments);
        let c = generate_tree(&TreeParams::desk(43)).unwrap();
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn fifty_seeds_stay_connected_and_sparse() {
        for seed in 0..50 {
            let p = TreeParams::desk(seed);
            let s = generate_tree(&p).unwrap();
            let b = betti_numbers(&s.mask);
            assert_eq!(b.b0, 1, "seed {seed}: {} components", b.b0);
            let frac = s.mask.active_count() as f64 / p.dims.voxels() as f64;
            assert!(frac < 0.10, "seed {seed}: foreground fraction {frac}");
            assert_eq!(s.mask, rasterize_segments(p.dims, &s.segments), "seed {seed}");
        }
    }

    #[test]
    fn point_ball_matches_exhaustive_scan() {
        let dims = Dims::new(16, 16, 16);
        let center = [8.0, 8.0, 8.0];
        let got = rasterize_tube(dims, center, center, 1.0);
        assert_eq!(got.len(), 7);
        for c in &got {
            let d = dist_point_segment([c.x as f64, c.y as f64, c.z as f64], center, center);
            assert!(d <= 1.0);
        }
        // Center plus the six face neighbors, nothing else.
        assert!(got.contains(&Coordinate::new(8, 8, 8)));
        assert!(got.contains(&Coordinate::new(7, 8, 8)));
        assert!(!got.contains(&Coordinate::new(7, 7, 8)));

        // Clipped at the corner: only the in-bounds part survives.
        let corner = rasterize_tube(dims, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 1.0);
        assert_eq!(corner.len(), 4);
    }

    #[test]
    fn tube_matches_full_scan_oracle() {
        let dims = Dims::new(24, 24, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut pt = || {
                [
                    rng.gen_range(0.0..24.0),
                    rng.gen_range(0.0..24.0),
                    rng.gen_range(0.0..24.0),
                ]
            };
            let (a, b) = (pt(), pt());
            let radius = rng.gen_range(1.0..4.0);
            let got = rasterize_tube(dims, a, b, radius);
            let mut oracle = Vec::new();
            for x in 0..24 {
                for y in 0..24 {
                    for z in 0..24 {
                        let p = [x as f64, y as f64, z as f64];
                        if dist_point_segment(p, a, b) <= radius {
                            oracle.push(Coordinate::new(x, y, z));
                        }
                    }
                }
            }
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn axis_tube_is_connected_and_contains_endpoints() {
        let dims = Dims::new(16, 16, 16);
        let set = rasterize_tube(dims, [3.0, 8.0, 8.0], [8.0, 8.0, 8.0], 1.0);
        assert!(set.contains(&Coordinate::new(3, 8, 8)));
        assert!(set.contains(&Coordinate::new(8, 8, 8)));
        let mut g = VoxelGrid::new(dims);
        for c in set {
            g.set_coord(c, 1);
        }
        assert_eq!(betti_numbers(&g).b0, 1);
    }

    #[test]
    fn aneurysm_adds_foreground_and_stays_connected() {
        let tube = straight_tube(2.0);
        let before = tube.mask.active_count();
        let a = add_anomaly(&tube, AnomalyKind::AneurysmBlob, 3).unwrap();
        assert!(a.mask.active_count() > before);
        assert_eq!(betti_numbers(&a.mask).b0, 1);
        assert_eq!(a.label, Label::Aneurysm);
        assert_eq!(a.mask, rasterize_segments(tube.mask.dims(), &a.segments));
        let again = add_anomaly(&tube, AnomalyKind::AneurysmBlob, 3).unwrap();
        assert_eq!(a.mask, again.mask);
    }

    #[test]
    fn stenosis_removes_foreground_and_stays_connected() {
        let tube = straight_tube(3.0);
        let before = tube.mask.active_count();
        let s = add_anomaly(&tube, AnomalyKind::StenosisPinch, 4).unwrap();
        assert!(s.mask.active_count() < before);
        assert_eq!(betti_numbers(&s.mask).b0, 1);
        assert_eq!(s.label, Label::Stenosis);
        assert_eq!(s.mask, rasterize_segments(tube.mask.dims(), &s.segments));
        // The pinched window really is thinner: its midpoint's cross section
        // lost the outer shell.
        let pinched = &s.segments[1];
        assert!(pinched.radius <= 1.5 + 1e-12);
        let again = add_anomaly(&tube, AnomalyKind::StenosisPinch, 4).unwrap();
        assert_eq!(s.mask, again.mask);
    }

    #[test]
    fn stenosis_fails_cleanly_on_thin_trees() {
        let tube = straight_tube(1.0);
        let err = add_anomaly(&tube, AnomalyKind::StenosisPinch, 1);
        assert!(matches!(err, Err(SvxError::StenosisFailed { attempts: 10 })));
    }

    #[test]
    fn loop_bridges_raise_beta1() {
        let p = TreeParams {
            branch_prob: 1.0,
            max_depth: 4,
            loop_bridges: 3,
            ..TreeParams::desk(11)
        };
        let s = generate_tree(&p).unwrap();
        let b = betti_numbers(&s.mask);
        assert_eq!(b.b0, 1);
        assert!(b.b1 >= 1, "expected a loop, got b1 = {}", b.b1);
    }

    #[test]
    fn manifest_round_trips_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let p = TreeParams { max_depth: 2, ..TreeParams::desk(1) };
        let healthy = generate_tree(&p).unwrap();
        let sick = add_anomaly(&healthy, AnomalyKind::AneurysmBlob, 9).unwrap();
        let samples = vec![("a".to_string(), healthy), ("b".to_string(), sick)];
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        let labels = read_label_manifest(&manifest).unwrap();
        assert_eq!(
            labels,
            vec![
                ("a.svox".to_string(), Label::Healthy),
                ("b.svox".to_string(), Label::Aneurysm)
            ]
        );
        let mask = io::read_svox(&dir.path().join("a.svox")).unwrap();
        assert_eq!(mask, samples[0].1.mask);

        let junk = dir.path().join("bad.csv");
        std::fs::write(&junk, "a.svox,melanoma\n").unwrap();
        assert!(matches!(
            read_label_manifest(&junk),
            Err(SvxError::Format(FormatError::BadConfigLine { .. }))
        ));
    }
}
