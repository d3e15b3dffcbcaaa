//! Adaptive pre-allocation: measure how far each part's splats drift from
//! the mesh during warmup, then split parts into rigid and flexible sets
//! around the mean drift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::scalar::Real;
use crate::splats::SplatSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaceSet {
    Rigid,
    Flexible,
    Mouth,
}

impl FaceSet {
    pub fn index(self) -> usize {
        match self {
            FaceSet::Rigid => 0,
            FaceSet::Flexible => 1,
            FaceSet::Mouth => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FaceSet::Rigid => "RIGID",
            FaceSet::Flexible => "FLEXIBLE",
            FaceSet::Mouth => "MOUTH",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "RIGID" => Ok(FaceSet::Rigid),
            "FLEXIBLE" => Ok(FaceSet::Flexible),
            "MOUTH" => Ok(FaceSet::Mouth),
            other => Err(Error::Parse(format!("unknown face set {other:?}"))),
        }
    }
}

/// Face-set membership of every face plus the per-part evidence behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceSetAssignment {
    pub set_of_face: Vec<FaceSet>,
    pub part_sets: Vec<FaceSet>,
    /// Distance of every non-mouth part; `None` for mouth parts or before the split.
    pub part_distances: Vec<Option<f64>>,
    pub tau_part: Option<f64>,
}

impl FaceSetAssignment {
    /// Warmup state: mouth parts in the mouth set, everything else rigid.
    pub fn warmup<T: Real>(mesh: &TriMesh<T>, mouth_parts: &[usize]) -> Self {
        let part_sets: Vec<FaceSet> = (0..mesh.num_parts())
            .map(|p| {
                if mouth_parts.contains(&p) {
                    FaceSet::Mouth
                } else {
                    FaceSet::Rigid
                }
            })
            .collect();
        Self {
            set_of_face: mesh.part_of_face.iter().map(|&p| part_sets[p]).collect(),
            part_distances: vec![None; part_sets.len()],
            part_sets,
            tau_part: None,
        }
    }

    pub fn count_faces(&self, set: FaceSet) -> usize {
        self.set_of_face.iter().filter(|&&s| s == set).count()
    }
}

/// Mean over the part's faces of the mean offset norm of the splats bound
/// to each face. Faces without splats contribute zero and are returned.
pub fn part_distance_detail<T: Real>(
    set: &SplatSet<T>,
    mesh: &TriMesh<T>,
    part: usize,
) -> Result<(T, Vec<usize>)> {
    let faces: Vec<usize> = (0..mesh.num_faces())
        .filter(|&f| mesh.part_of_face[f] == part)
        .collect();
    if faces.is_empty() {
        return Err(Error::EmptyPart(part));
    }
    let mut sum = T::zero();
    let mut empty = Vec::new();
    for &f in &faces {
        let bound = set.bound_to(f);
        if bound.is_empty() {
            empty.push(f);
            continue;
        }
        let face_sum: T = bound.iter().map(|&i| set.splats[i].mu_local.norm()).sum();
        sum += face_sum / T::from_usize_lossy(bound.len());
    }
    Ok((sum / T::from_usize_lossy(faces.len()), empty))
}

pub fn part_distance<T: Real>(set: &SplatSet<T>, mesh: &TriMesh<T>, part: usize) -> Result<T> {
    Ok(part_distance_detail(set, mesh, part)?.0)
}

/// Threshold rule: parts strictly below the mean distance of non-mouth
/// parts are rigid, strictly above are flexible, ties are rigid.
pub fn assign_sets(distances: &[f64], mouth_parts: &[usize], part_of_face: &[usize]) -> Result<FaceSetAssignment> {
    let non_mouth: Vec<usize> = (0..distances.len())
        .filter(|p| !mouth_parts.contains(p))
        .collect();
    if non_mouth.len() < 2 {
        return Err(Error::TooFewParts(non_mouth.len()));
    }
    let tau = non_mouth.iter().map(|&p| distances[p]).sum::<f64>() / non_mouth.len() as f64;
    let part_sets: Vec<FaceSet> = (0..distances.len())
        .map(|p| {
            if mouth_parts.contains(&p) {
                FaceSet::Mouth
            } else if distances[p] > tau {
                FaceSet::Flexible
            } else {
                FaceSet::Rigid
            }
        })
        .collect();
    if let Some(&bad) = part_of_face.iter().find(|&&p| p >= part_sets.len()) {
        return Err(Error::InvalidPartMask(format!("face part {bad} has no distance")));
    }
    Ok(FaceSetAssignment {
        set_of_face: part_of_face.iter().map(|&p| part_sets[p]).collect(),
        part_distances: (0..distances.len())
            .map(|p| (!mouth_parts.contains(&p)).then_some(distances[p]))
            .collect(),
        part_sets,
        tau_part: Some(tau),
    })
}

/// What happened at the pre-allocation barrier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApsEvent {
    pub step: u64,
    pub part_names: Vec<String>,
    pub assignment: FaceSetAssignment,
    /// Splats in the rigid, flexible and mouth sets after assignment.
    pub splat_counts: [usize; 3],
    /// Faces that had no bound splat when distances were measured.
    pub empty_faces: Vec<usize>,
}

impl ApsEvent {
    /// Line-oriented `key=value` report.
    pub fn to_lines(&self) -> Vec<String> {
        let a = &self.assignment;
        let mut lines = vec![format!("aps_step={}", self.step)];
        for (p, name) in self.part_names.iter().enumerate() {
            let d = a.part_distances[p].map_or("none".to_string(), |d| format!("{d:e}"));
            lines.push(format!(
                "part={p} name={name} distance={d} set={}",
                a.part_sets[p].name()
            ));
        }
        lines.push(format!("tau_part={:e}", a.tau_part.unwrap_or(f64::NAN)));
        lines.push(format!(
            "splats_rigid={} splats_flexible={} splats_mouth={} splats_total={}",
            self.splat_counts[0],
            self.splat_counts[1],
            self.splat_counts[2],
            self.splat_counts.iter().sum::<usize>()
        ));
        if !self.empty_faces.is_empty() {
            lines.push(format!("warning=empty_faces count={}", self.empty_faces.len()));
        }
        lines
    }
}

/// One-shot pre-allocation barrier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApsStage {
    pub scheduled_step: u64,
    pub ran_at: Option<u64>,
}

impl ApsStage {
    pub fn new(scheduled_step: u64) -> Self {
        Self {
            scheduled_step,
            ran_at: None,
        }
    }

    pub fn is_due(&self, step: u64) -> bool {
        self.ran_at.is_none() && step >= self.scheduled_step
    }

    /// Measures every part and replaces the warmup assignment.
    pub fn run<T: Real>(
        &mut self,
        step: u64,
        set: &SplatSet<T>,
        mesh: &TriMesh<T>,
        mouth_parts: &[usize],
    ) -> Result<(FaceSetAssignment, ApsEvent)> {
        if let Some(at) = self.ran_at {
            return Err(Error::AlreadyRan(at));
        }
        if step != self.scheduled_step {
            return Err(Error::Invalid(format!(
                "pre-allocation scheduled at step {} but invoked at {step}",
                self.scheduled_step
            )));
        }
        let mut distances = vec![0.0; mesh.num_parts()];
        let mut empty_faces = Vec::new();
        for (p, d) in distances.iter_mut().enumerate() {
            if mouth_parts.contains(&p) {
                continue;
            }
            let (dist, empty) = part_distance_detail(set, mesh, p)?;
            *d = dist.to_f64_lossy();
            empty_faces.extend(empty);
        }
        let assignment = assign_sets(&distances, mouth_parts, &mesh.part_of_face)?;
        let mut splat_counts = [0; 3];
        for &f in &set.binding {
            splat_counts[assignment.set_of_face[f].index()] += 1;
        }
        self.ran_at = Some(step);
        let event = ApsEvent {
            step,
            part_names: mesh.part_names.clone(),
            assignment: assignment.clone(),
            splat_counts,
            empty_faces,
        };
        Ok((assignment, event))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Quat, Vec3};
    use crate::splats::Splat;

    fn splat(r: f64) -> Splat<f64> {
        Splat {
            mu_local: Vec3::new(0.0, r * 0.6, r * 0.8),
            rot: Quat::identity(),
            log_scale: Vec3::zero(),
            color: Vec3::zero(),
            opacity_logit: 0.0,
        }
    }

    /// Four faces: part 0 = faces {0, 1}, part 1 = face {2}, part 2 = face {3}.
    fn mesh() -> TriMesh<f64> {
        let v = (0..6).map(|i| Vec3::new(i as f64, (i * i) as f64 * 0.1, 0.0)).collect();
        TriMesh::new(
            v,
            vec![[0, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 5]],
            vec![0, 0, 1, 2],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn distance_examples() {
        let m = mesh();
        let zero = SplatSet::new(vec![splat(0.0); 4], vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(part_distance(&zero, &m, 0).unwrap(), 0.0);
        let set = SplatSet::new(vec![splat(0.1), splat(0.3), splat(0.5)], vec![0, 1, 1], 4).unwrap();
        assert!((part_distance(&set, &m, 0).unwrap() - 0.25).abs() < 1e-12);
        let (d, empty) = part_distance_detail(&set, &m, 1).unwrap();
        assert_eq!((d, empty), (0.0, vec![2]));
        let doubled = SplatSet::new(vec![splat(0.2), splat(0.6), splat(1.0)], vec![0, 1, 1], 4).unwrap();
        assert!((part_distance(&doubled, &m, 0).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(part_distance(&set, &m, 7), Err(Error::EmptyPart(7))));
    }

    #[test]
    fn threshold_examples() {
        let a = assign_sets(&[0.05, 0.50], &[], &[0, 1, 1]).unwrap();
        assert!((a.tau_part.unwrap() - 0.275).abs() < 1e-12);
        assert_eq!(a.part_sets, vec![FaceSet::Rigid, FaceSet::Flexible]);
        assert_eq!(a.set_of_face, vec![FaceSet::Rigid, FaceSet::Flexible, FaceSet::Flexible]);
        let tie = assign_sets(&[0.3, 0.3, 0.3], &[], &[0, 1, 2]).unwrap();
        assert!(tie.part_sets.iter().all(|s| *s == FaceSet::Rigid));
        let with_mouth = assign_sets(&[0.05, 0.5, 9.0], &[2], &[0, 1, 2]).unwrap();
        assert_eq!(with_mouth.part_sets[2], FaceSet::Mouth);
        assert!((with_mouth.tau_part.unwrap() - 0.275).abs() < 1e-12);
        assert!(matches!(assign_sets(&[0.1, 0.2], &[1], &[0, 1]), Err(Error::TooFewParts(1))));
    }

    #[test]
    fn stage_runs_once() {
        let m = mesh();
        let set = SplatSet::new(vec![splat(0.01), splat(0.02), splat(0.5), splat(0.01)], vec![0, 1, 2, 3], 4).unwrap();
        let mut stage = ApsStage::new(10);
        assert!(stage.run(9, &set, &m, &[]).is_err());
        let (a, ev) = stage.run(10, &set, &m, &[]).unwrap();
        assert_eq!(a.part_sets, vec![FaceSet::Rigid, FaceSet::Flexible, FaceSet::Rigid]);
        assert_eq!(ev.splat_counts, [3, 1, 0]);
        assert!(ev.to_lines().iter().any(|l| l.starts_with("tau_part=")));
        assert!(matches!(stage.run(10, &set, &m, &[]), Err(Error::AlreadyRan(10))));
    }

    #[test]
    fn warmup_is_rigid_except_mouth() {
        let a = FaceSetAssignment::warmup(&mesh(), &[2]);
        assert_eq!(a.set_of_face, vec![FaceSet::Rigid, FaceSet::Rigid, FaceSet::Rigid, FaceSet::Mouth]);
    }
}
