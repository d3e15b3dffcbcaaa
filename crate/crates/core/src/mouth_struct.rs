//! Mouth interior construction: teeth trajectory from a lip ring, molar
//! extension by reflection about the arc's pseudo-center, palate and floor
//! rows, and the rigid per-part vertex offsets that animate them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::linalg::Vec3;
use crate::scalar::Real;

/// Points per teeth trajectory before extension.
pub const TRAJECTORY_LEN: usize = 15;
/// Points reflected on each side.
pub const REFLECTED_PER_SIDE: usize = 5;
/// Points per extended trajectory.
pub const EXTENDED_LEN: usize = TRAJECTORY_LEN + 2 * REFLECTED_PER_SIDE;
/// Minimum |sin| between the two bisectors.
pub const BISECTOR_MIN_SIN: f64 = 1e-6;

pub const UPPER_PART_NAME: &str = "mouth_upper";
pub const LOWER_PART_NAME: &str = "mouth_lower";

/// Fifteen ordered points on one horizontal (constant-y) plane.
#[derive(Clone, Debug, PartialEq)]
pub struct TeethTrajectory<T> {
    points: Vec<Vec3<T>>,
}

impl<T: Real> TeethTrajectory<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Result<Self> {
        if points.len() != TRAJECTORY_LEN {
            return Err(Error::Invalid(format!(
                "teeth trajectory needs {TRAJECTORY_LEN} points, got {}",
                points.len()
            )));
        }
        let y = points[0].y;
        if points.iter().any(|p| (p.y - y).abs() > T::lit(1e-9)) {
            return Err(Error::Invalid("teeth trajectory points must share y".into()));
        }
        if points.windows(2).any(|w| (w[1] - w[0]).norm() == T::zero()) {
            return Err(Error::Invalid("consecutive trajectory points coincide".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    pub fn y(&self) -> T {
        self.points[0].y
    }
}

/// A 2D point in the xz-plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanePoint<T> {
    pub x: T,
    pub z: T,
}

impl<T: Real> PlanePoint<T> {
    fn of(v: Vec3<T>) -> Self {
        Self { x: v.x, z: v.z }
    }
}

/// Intersection of the perpendicular bisectors of the first and last segments.
pub fn pseudo_center<T: Real>(traj: &TeethTrajectory<T>) -> Result<PlanePoint<T>> {
    let p = traj.points();
    let bisector = |a: Vec3<T>, b: Vec3<T>| {
        let half = T::lit(0.5);
        let mid = (a + b) * half;
        // Perpendicular to (b - a) within the xz-plane.
        let dir = (-(b.z - a.z), b.x - a.x);
        ((mid.x, mid.z), dir)
    };
    let ((m1x, m1z), (d1x, d1z)) = bisector(p[0], p[1]);
    let n = TRAJECTORY_LEN;
    let ((m2x, m2z), (d2x, d2z)) = bisector(p[n - 2], p[n - 1]);
    let cross = d1x * d2z - d1z * d2x;
    let norms = (d1x * d1x + d1z * d1z).sqrt() * (d2x * d2x + d2z * d2z).sqrt();
    let sin = cross / norms;
    if !(sin.abs() > T::lit(BISECTOR_MIN_SIN)) {
        return Err(Error::ParallelBisectors(sin.to_f64_lossy()));
    }
    // m1 + s d1 = m2 + t d2
    let (rx, rz) = (m2x - m1x, m2z - m1z);
    let s = (rx * d2z - rz * d2x) / cross;
    Ok(PlanePoint {
        x: m1x + s * d1x,
        z: m1z + s * d1z,
    })
}

/// Mirror image of `p` across the in-plane line through `center` and `on_axis`.
/// The y coordinate is kept.
pub fn reflect_across<T: Real>(p: Vec3<T>, center: PlanePoint<T>, on_axis: Vec3<T>) -> Result<Vec3<T>> {
    let (ax, az) = (on_axis.x - center.x, on_axis.z - center.z);
    let len = (ax * ax + az * az).sqrt();
    if !(len > T::lit(1e-12)) {
        return Err(Error::DegenerateAxis);
    }
    let (ux, uz) = (ax / len, az / len);
    let (px, pz) = (p.x - center.x, p.z - center.z);
    let along = px * ux + pz * uz;
    let two = T::lit(2.0);
    Ok(Vec3::new(
        center.x + two * along * ux - px,
        p.y,
        center.z + two * along * uz - pz,
    ))
}

/// Reflected molar points: left side (reflections of v5..v1 about C–v0),
/// then right side (reflections of v13..v9 about C–v14).
pub fn extend_trajectory<T: Real>(traj: &TeethTrajectory<T>, c: PlanePoint<T>) -> Result<Vec<Vec3<T>>> {
    let p = traj.points();
    let last = TRAJECTORY_LEN - 1;
    let mut out = Vec::with_capacity(2 * REFLECTED_PER_SIDE);
    for i in (1..=REFLECTED_PER_SIDE).rev() {
        out.push(reflect_across(p[i], c, p[0])?);
    }
    for i in 1..=REFLECTED_PER_SIDE {
        out.push(reflect_across(p[last - i], c, p[last])?);
    }
    Ok(out)
}

/// The full 25-point polyline `v'_L5..v'_L1, v_0..v_14, v'_R1..v'_R5`.
pub fn assemble_extended<T: Real>(traj: &TeethTrajectory<T>, reflected: &[Vec3<T>]) -> Vec<Vec3<T>> {
    let (left, right) = reflected.split_at(REFLECTED_PER_SIDE);
    left.iter()
        .chain(traj.points())
        .chain(right)
        .copied()
        .collect()
}

/// Resamples an ordered lip ring to 15 points evenly spaced by arc length,
/// flattened onto the ring's mean height.
pub fn extract_trajectory<T: Real>(ring: &[Vec3<T>]) -> Result<TeethTrajectory<T>> {
    if ring.len() < TRAJECTORY_LEN {
        return Err(Error::Invalid(format!(
            "lip ring needs at least {TRAJECTORY_LEN} vertices, got {}",
            ring.len()
        )));
    }
    let y = ring.iter().map(|p| p.y).sum::<T>() / T::from_usize_lossy(ring.len());
    let flat: Vec<Vec3<T>> = ring.iter().map(|p| Vec3::new(p.x, y, p.z)).collect();
    let mut cum = vec![T::zero()];
    for w in flat.windows(2) {
        let l = *cum.last().unwrap() + (w[1] - w[0]).norm();
        cum.push(l);
    }
    let total = *cum.last().unwrap();
    if !(total > T::zero()) {
        return Err(Error::Invalid("lip ring has zero length".into()));
    }
    let mut seg = 0;
    let mut points = Vec::with_capacity(TRAJECTORY_LEN);
    for k in 0..TRAJECTORY_LEN {
        let target = total * T::from_usize_lossy(k) / T::from_usize_lossy(TRAJECTORY_LEN - 1);
        if k == TRAJECTORY_LEN - 1 {
            points.push(*flat.last().unwrap());
            continue;
        }
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let t = if span > T::zero() {
            (target - cum[seg]) / span
        } else {
            T::zero()
        };
        points.push(flat[seg] + (flat[seg + 1] - flat[seg]) * t);
    }
    TeethTrajectory::new(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MouthPart {
    Upper,
    Lower,
}

impl MouthPart {
    pub fn label(self) -> &'static str {
        match self {
            MouthPart::Upper => "UPPER",
            MouthPart::Lower => "LOWER",
        }
    }

    pub fn part_name(self) -> &'static str {
        match self {
            MouthPart::Upper => UPPER_PART_NAME,
            MouthPart::Lower => LOWER_PART_NAME,
        }
    }
}

/// New vertices and faces for the mouth interior, indexed as if appended to
/// the source mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MouthAugmentation<T> {
    pub base_vertex_count: usize,
    pub new_vertices: Vec<Vec3<T>>,
    pub new_faces: Vec<[usize; 3]>,
    pub part_label: Vec<MouthPart>,
    pub upper_vertex_ids: Vec<usize>,
    pub lower_vertex_ids: Vec<usize>,
}

/// Faces produced per ring: two triangles per strip quad plus one fan
/// triangle per shifted-row segment.
pub const fn faces_per_ring() -> usize {
    let quads = EXTENDED_LEN - 1;
    2 * quads + quads
}

/// Vertices per ring: teeth row, shifted row and fan apex.
pub const fn vertices_per_ring() -> usize {
    2 * EXTENDED_LEN + 1
}

/// Builds the teeth strip and palate/floor fan for both lip rings.
pub fn build_mouth_structure<T: Real>(
    mesh: &TriMesh<T>,
    upper_ring: &[usize],
    lower_ring: &[usize],
    depth: T,
) -> Result<MouthAugmentation<T>> {
    if !(depth > T::zero()) {
        return Err(Error::Invalid("mouth depth must be positive".into()));
    }
    let nv = mesh.vertices.len();
    let mut aug = MouthAugmentation {
        base_vertex_count: nv,
        new_vertices: Vec::new(),
        new_faces: Vec::new(),
        part_label: Vec::new(),
        upper_vertex_ids: Vec::new(),
        lower_vertex_ids: Vec::new(),
    };
    for (ring, part) in [(upper_ring, MouthPart::Upper), (lower_ring, MouthPart::Lower)] {
        if let Some(&bad) = ring.iter().find(|&&v| v >= nv) {
            return Err(Error::InvalidMesh(format!("ring vertex {bad} out of range")));
        }
        let pts: Vec<Vec3<T>> = ring.iter().map(|&v| mesh.vertices[v]).collect();
        let traj = extract_trajectory(&pts)?;
        let c = pseudo_center(&traj)?;
        let reflected = extend_trajectory(&traj, c)?;
        let teeth = assemble_extended(&traj, &reflected);

        // Backward: from the arc midpoint toward the pseudo-center.
        let mid = PlanePoint::of(traj.points()[TRAJECTORY_LEN / 2]);
        let (bx, bz) = (c.x - mid.x, c.z - mid.z);
        let blen = (bx * bx + bz * bz).sqrt();
        if !(blen > T::lit(1e-12)) {
            return Err(Error::DegenerateAxis);
        }
        let back = Vec3::new(bx / blen, T::zero(), bz / blen) * depth;
        let shifted: Vec<Vec3<T>> = teeth.iter().map(|&p| p + back).collect();
        let apex = shifted.iter().fold(Vec3::zero(), |a, &p| a + p)
            * (T::one() / T::from_usize_lossy(shifted.len()));

        let first = nv + aug.new_vertices.len();
        let row_a = |i: usize| first + i;
        let row_b = |i: usize| first + EXTENDED_LEN + i;
        let apex_id = first + 2 * EXTENDED_LEN;
        aug.new_vertices.extend(&teeth);
        aug.new_vertices.extend(&shifted);
        aug.new_vertices.push(apex);
        let ids = first..first + vertices_per_ring();
        match part {
            MouthPart::Upper => aug.upper_vertex_ids.extend(ids),
            MouthPart::Lower => aug.lower_vertex_ids.extend(ids),
        }

        let mut faces = Vec::with_capacity(faces_per_ring());
        for i in 0..EXTENDED_LEN - 1 {
            let (a0, a1, b0, b1) = (row_a(i), row_a(i + 1), row_b(i), row_b(i + 1));
            if i % 2 == 0 {
                faces.push([a0, a1, b1]);
                faces.push([a0, b1, b0]);
            } else {
                faces.push([a0, a1, b0]);
                faces.push([a1, b1, b0]);
            }
        }
        for i in 0..EXTENDED_LEN - 1 {
            faces.push([apex_id, row_b(i + 1), row_b(i)]);
        }
        // Palate normals face down into the mouth, floor normals face up.
        let at = |id: usize| aug.new_vertices[id - nv];
        let want_up = part == MouthPart::Lower;
        for f in &mut faces {
            let [p0, p1, p2] = f.map(at);
            if ((p1 - p0).cross(p2 - p0).y > T::zero()) != want_up {
                f.swap(1, 2);
            }
        }
        aug.part_label.extend(std::iter::repeat_n(part, faces.len()));
        aug.new_faces.extend(faces);
    }
    Ok(aug)
}

/// Part ids and vertex sets of the mouth after splicing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MouthParts {
    pub upper_part: usize,
    pub lower_part: usize,
    pub upper_vertex_ids: Vec<usize>,
    pub lower_vertex_ids: Vec<usize>,
}

impl MouthParts {
    pub fn part_ids(&self) -> [usize; 2] {
        [self.upper_part, self.lower_part]
    }

    pub fn which(&self, part: usize) -> Option<MouthPart> {
        if part == self.upper_part {
            Some(MouthPart::Upper)
        } else if part == self.lower_part {
            Some(MouthPart::Lower)
        } else {
            None
        }
    }
}

/// Appends the augmentation to `mesh` as two new parts.
pub fn splice<T: Real>(mesh: &TriMesh<T>, aug: &MouthAugmentation<T>) -> Result<(TriMesh<T>, MouthParts)> {
    if aug.base_vertex_count != mesh.vertices.len() {
        return Err(Error::InvalidMesh(format!(
            "augmentation built for {} vertices, mesh has {}",
            aug.base_vertex_count,
            mesh.vertices.len()
        )));
    }
    let mut out = mesh.clone();
    let upper_part = out.part_names.len();
    let lower_part = upper_part + 1;
    out.part_names.push(UPPER_PART_NAME.into());
    out.part_names.push(LOWER_PART_NAME.into());
    out.vertices.extend(&aug.new_vertices);
    out.faces.extend(&aug.new_faces);
    out.part_of_face.extend(aug.part_label.iter().map(|p| match p {
        MouthPart::Upper => upper_part,
        MouthPart::Lower => lower_part,
    }));
    out.validate()?;
    Ok((
        out,
        MouthParts {
            upper_part,
            lower_part,
            upper_vertex_ids: aug.upper_vertex_ids.clone(),
            lower_vertex_ids: aug.lower_vertex_ids.clone(),
        },
    ))
}

/// Translates every upper-mouth vertex by `dv_upper` and every lower-mouth
/// vertex by `dv_lower`; other vertices are untouched.
pub fn apply_part_offsets<T: Real>(
    mesh: &TriMesh<T>,
    parts: &MouthParts,
    dv_upper: Vec3<T>,
    dv_lower: Vec3<T>,
) -> TriMesh<T> {
    let mut out = mesh.clone();
    apply_part_offsets_in_place(&mut out, parts, dv_upper, dv_lower);
    out
}

pub fn apply_part_offsets_in_place<T: Real>(
    mesh: &mut TriMesh<T>,
    parts: &MouthParts,
    dv_upper: Vec3<T>,
    dv_lower: Vec3<T>,
) {
    for &v in &parts.upper_vertex_ids {
        mesh.vertices[v] += dv_upper;
    }
    for &v in &parts.lower_vertex_ids {
        mesh.vertices[v] += dv_lower;
    }
}

/// Adjoint of [`apply_part_offsets`]: per-vertex gradients summed over each part.
pub fn apply_part_offsets_backward<T: Real>(parts: &MouthParts, d_vertices: &[Vec3<T>]) -> (Vec3<T>, Vec3<T>) {
    let sum = |ids: &[usize]| ids.iter().fold(Vec3::zero(), |acc, &v| acc + d_vertices[v]);
    (sum(&parts.upper_vertex_ids), sum(&parts.lower_vertex_ids))
}

pub const DIFF_OPS: &[&str] = &["mouth_struct.apply_part_offsets"];

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(center: (f64, f64), radius: f64, start_deg: f64, span_deg: f64, y: f64) -> Vec<Vec3<f64>> {
        (0..TRAJECTORY_LEN)
            .map(|i| {
                let a = (start_deg + span_deg * i as f64 / (TRAJECTORY_LEN - 1) as f64).to_radians();
                Vec3::new(center.0 + radius * a.cos(), y, center.1 + radius * a.sin())
            })
            .collect()
    }

    #[test]
    fn pseudo_center_of_circle() {
        let traj = TeethTrajectory::new(arc((0.1, -0.3), 2.0, 40.0, 100.0, 0.5)).unwrap();
        let c = pseudo_center(&traj).unwrap();
        assert!((c.x - 0.1).abs() < 1e-9 && (c.z + 0.3).abs() < 1e-9);
        let traj = TeethTrajectory::new(arc((0.0, 0.0), 1.0, 20.0, 140.0, 0.0)).unwrap();
        let c = pseudo_center(&traj).unwrap();
        assert!(c.x.abs() < 1e-12 && c.z.abs() < 1e-12);
    }

    #[test]
    fn collinear_points_have_parallel_bisectors() {
        let pts = (0..15).map(|i| Vec3::new(i as f64, 0.0, 0.5 * i as f64)).collect();
        let traj = TeethTrajectory::new(pts).unwrap();
        assert!(matches!(pseudo_center(&traj), Err(Error::ParallelBisectors(_))));
    }

    #[test]
    fn trajectory_validation() {
        let mut pts = arc((0.0, 0.0), 1.0, 0.0, 90.0, 0.0);
        pts[3].y = 0.1;
        assert!(TeethTrajectory::new(pts).is_err());
        assert!(TeethTrajectory::new(arc((0.0, 0.0), 1.0, 0.0, 90.0, 0.0)[..14].to_vec()).is_err());
    }

    #[test]
    fn extension_stays_on_circle() {
        let (cx, cz, r) = (0.1, -0.3, 2.0);
        let traj = TeethTrajectory::new(arc((cx, cz), r, 40.0, 100.0, 0.5)).unwrap();
        let c = pseudo_center(&traj).unwrap();
        let ext = extend_trajectory(&traj, c).unwrap();
        assert_eq!(ext.len(), 10);
        for p in &ext {
            assert!(((p.x - cx).hypot(p.z - cz) - r).abs() < 1e-9);
            assert_eq!(p.y, 0.5);
        }
        // Extended points continue the arc at the same angular spacing.
        let full = assemble_extended(&traj, &ext);
        let step = (100.0f64 / 14.0).to_radians();
        for w in full.windows(2) {
            let a0 = (w[0].z - cz).atan2(w[0].x - cx);
            let a1 = (w[1].z - cz).atan2(w[1].x - cx);
            let d = (a1 - a0).rem_euclid(std::f64::consts::TAU);
            assert!((d - step).abs() < 1e-9, "{d} vs {step}");
        }
    }

    #[test]
    fn reflection_fixed_line_and_involution() {
        let c = PlanePoint { x: 0.2, z: -0.1 };
        let axis = Vec3::new(1.2, 0.3, 0.9);
        let on = Vec3::new(0.2 + 0.5 * 1.0, 0.7, -0.1 + 0.5 * 1.0);
        let r = reflect_across(on, c, axis).unwrap();
        assert!((r - on).max_abs() < 1e-12);
        let p = Vec3::new(-0.4, 0.3, 0.8);
        let twice = reflect_across(reflect_across(p, c, axis).unwrap(), c, axis).unwrap();
        assert!((twice - p).max_abs() < 1e-12);
        let same = Vec3::new(0.2, 5.0, -0.1);
        assert!(matches!(reflect_across(p, c, same), Err(Error::DegenerateAxis)));
    }

    /// Two rings of a symmetric mouth on a flat grid.
    fn ring_mesh() -> (TriMesh<f64>, Vec<usize>, Vec<usize>) {
        let mut v = Vec::new();
        let n = 21;
        for row in 0..2 {
            let y = if row == 0 { 0.05 } else { -0.05 };
            for i in 0..n {
                let a = (60.0 + 60.0 * i as f64 / (n - 1) as f64).to_radians();
                v.push(Vec3::new(0.5 * a.cos(), y, 0.5 * a.sin()));
            }
        }
        let mut faces = Vec::new();
        for i in 0..n - 1 {
            faces.push([i, i + 1, n + i]);
            faces.push([i + 1, n + i + 1, n + i]);
        }
        let m = TriMesh::single_part(v, faces).unwrap();
        // Rings run from +x to -x; order does not matter for symmetry.
        (m, (0..n).collect(), (n..2 * n).collect())
    }

    #[test]
    fn augmentation_counts_and_labels() {
        let (m, up, lo) = ring_mesh();
        let aug = build_mouth_structure(&m, &up, &lo, 0.02).unwrap();
        let quads = EXTENDED_LEN - 1;
        assert_eq!(aug.new_faces.len(), 2 * quads * 2 + 2 * quads);
        assert_eq!(aug.new_faces.len(), 144);
        assert_eq!(aug.new_vertices.len(), 2 * vertices_per_ring());
        let (spliced, parts) = splice(&m, &aug).unwrap();
        for (f, label) in aug.new_faces.iter().zip(&aug.part_label) {
            let ids = match label {
                MouthPart::Upper => &parts.upper_vertex_ids,
                MouthPart::Lower => &parts.lower_vertex_ids,
            };
            assert!(f.iter().all(|v| ids.contains(v)));
        }
        let nf = m.num_faces();
        for fi in nf..spliced.num_faces() {
            assert!(spliced.face_area(fi) > 1e-12, "face {fi} degenerate");
            let n = spliced.face_frame(fi).unwrap().rotation.col(2);
            let upper = spliced.part_of_face[fi] == parts.upper_part;
            assert!(if upper { n.y < 0.0 } else { n.y > 0.0 });
        }
    }

    #[test]
    fn augmentation_is_mirror_symmetric() {
        let (m, up, lo) = ring_mesh();
        let aug = build_mouth_structure(&m, &up, &lo, 0.03).unwrap();
        // Mirror plane x = 0 (the ring centroid).
        for p in &aug.new_vertices {
            let mirrored = Vec3::new(-p.x, p.y, p.z);
            let best = aug
                .new_vertices
                .iter()
                .map(|q| (*q - mirrored).max_abs())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-9, "no mirror partner for {p:?}: {best}");
        }
    }

    #[test]
    fn rows_stay_on_ring_height() {
        let (m, up, lo) = ring_mesh();
        let aug = build_mouth_structure(&m, &up, &lo, 0.03).unwrap();
        for (k, p) in aug.new_vertices.iter().enumerate() {
            let y = if k < vertices_per_ring() { 0.05 } else { -0.05 };
            assert!((p.y - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_depth_rejected() {
        let (m, up, lo) = ring_mesh();
        assert!(build_mouth_structure(&m, &up, &lo, 0.0).is_err());
        assert!(build_mouth_structure(&m, &up[..10], &lo, 0.02).is_err());
    }

    #[test]
    fn part_offsets_translate_rigidly() {
        let (m, up, lo) = ring_mesh();
        let aug = build_mouth_structure(&m, &up, &lo, 0.02).unwrap();
        let (spliced, parts) = splice(&m, &aug).unwrap();
        let same = apply_part_offsets(&spliced, &parts, Vec3::zero(), Vec3::zero());
        assert_eq!(same, spliced);
        let dv = Vec3::new(0.0, 0.01, 0.0);
        let moved = apply_part_offsets(&spliced, &parts, dv, Vec3::zero());
        for fi in 0..spliced.num_faces() {
            let a = spliced.face_frame(fi).unwrap();
            let b = moved.face_frame(fi).unwrap();
            if spliced.part_of_face[fi] == parts.upper_part {
                assert!((b.center - a.center - dv).max_abs() < 1e-15);
                assert!((b.scale - a.scale).abs() < 1e-15);
                for j in 0..3 {
                    assert!((b.rotation.col(j) - a.rotation.col(j)).max_abs() < 1e-12);
                }
            } else {
                assert_eq!(a, b);
            }
        }
        let ids = &parts.upper_vertex_ids;
        for &i in ids {
            for &j in ids {
                let d0 = (spliced.vertices[i] - spliced.vertices[j]).norm();
                let d1 = (moved.vertices[i] - moved.vertices[j]).norm();
                assert!((d0 - d1).abs() < 1e-15);
            }
        }
    }
}
