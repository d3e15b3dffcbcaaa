//! File formats: OBJ meshes, part-mask and ring sidecars, binary PPM
//! images, rig-parameter sidecars and scene directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::image::Image;
use crate::linalg::Vec3;
use crate::renderer::Camera;
use crate::rig_synth::{build_rig, BlendRig, RigParams, Scene, SceneSpec};
use crate::trainer::TrainData;

/// Version written into every structured-text sidecar.
pub const FORMAT_VERSION: u32 = 1;

fn parse_err(what: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{what} line {line}: {msg}"))
}

/// Vertices and triangles of an OBJ document. Only `v` and `f` records are
/// read; texture and normal indices in `f` are ignored, negative indices
/// count from the end. Faces with more than three corners are rejected.
pub fn parse_obj(text: &str) -> Result<(Vec<Vec3<f64>>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| parse_err("obj", i + 1, e)))
                    .collect::<Result<_>>()?;
                if c.len() != 3 || !c.iter().all(|v| v.is_finite()) {
                    return Err(parse_err("obj", i + 1, "vertex needs three finite coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = tok
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let v: i64 = head.parse().map_err(|e| parse_err("obj", i + 1, e))?;
                        let n = vertices.len() as i64;
                        let k = if v < 0 { n + v } else { v - 1 };
                        if v == 0 || k < 0 || k >= n {
                            return Err(parse_err("obj", i + 1, format!("vertex index {v} out of range")));
                        }
                        Ok(k as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(parse_err("obj", i + 1, format!("{}-gon; only triangles are supported", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

/// OBJ text with shortest round-trip decimal coordinates and 1-based indices.
pub fn write_obj(mesh: &TriMesh<f64>) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartEntry {
    name: String,
    faces: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartFile {
    version: u32,
    part: Vec<PartEntry>,
}

fn check_version(version: u32, what: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!("{what}: unsupported version {version}")));
    }
    Ok(())
}

/// Part-mask sidecar: one `[[part]]` table per part, in id order.
pub fn write_parts(mesh: &TriMesh<f64>) -> String {
    let file = PartFile {
        version: FORMAT_VERSION,
        part: mesh
            .part_names
            .iter()
            .zip(mesh.faces_by_part())
            .map(|(name, faces)| PartEntry {
                name: name.clone(),
                faces,
            })
            .collect(),
    };
    toml::to_string(&file).expect("part file serializes")
}

/// Face-to-part labels and part names; the lists must partition `0..num_faces`.
pub fn parse_parts(text: &str, num_faces: usize) -> Result<(Vec<usize>, Vec<String>)> {
    let file: PartFile = toml::from_str(text).map_err(|e| Error::Parse(format!("part mask: {e}")))?;
    check_version(file.version, "part mask")?;
    let mut part_of_face = vec![usize::MAX; num_faces];
    for (p, entry) in file.part.iter().enumerate() {
        for &f in &entry.faces {
            let slot = part_of_face
                .get_mut(f)
                .ok_or_else(|| Error::InvalidPartMask(format!("part {} lists face {f} of {num_faces}", entry.name)))?;
            if *slot != usize::MAX {
                return Err(Error::InvalidPartMask(format!("face {f} listed twice")));
            }
            *slot = p;
        }
    }
    if let Some(f) = part_of_face.iter().position(|&p| p == usize::MAX) {
        return Err(Error::InvalidPartMask(format!("face {f} belongs to no part")));
    }
    Ok((part_of_face, file.part.into_iter().map(|e| e.name).collect()))
}

/// Reads an OBJ and, when given, its part mask; otherwise one part `all`.
pub fn load_mesh(obj: &Path, parts: Option<&Path>) -> Result<TriMesh<f64>> {
    let (vertices, faces) = parse_obj(&std::fs::read_to_string(obj)?)?;
    match parts {
        Some(p) => {
            let (part_of_face, names) = parse_parts(&std::fs::read_to_string(p)?, faces.len())?;
            TriMesh::new(vertices, faces, part_of_face, names)
        }
        None => TriMesh::single_part(vertices, faces),
    }
}

pub fn save_mesh(mesh: &TriMesh<f64>, obj: &Path, parts: &Path) -> Result<()> {
    std::fs::write(obj, write_obj(mesh))?;
    std::fs::write(parts, write_parts(mesh))?;
    Ok(())
}

/// Lip-ring vertex ids for mouth augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rings {
    pub version: u32,
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
    /// Backward shift of the teeth row; tools fall back to their own default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
}

impl Rings {
    pub fn new(upper: Vec<usize>, lower: Vec<usize>) -> Self {
        Self {
            version: FORMAT_VERSION,
            upper,
            lower,
            depth: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("rings: {e}")))?;
        check_version(r.version, "rings")?;
        Ok(r)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("rings serialize")
    }
}

/// `floor(clamp(v, 0, 1) * 255 + 0.5)`; NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(image: &Image<f64>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| quantize(v)));
    out
}

/// Decodes a P6 image into `[0, 1]` values (`byte / maxval`).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image<f64>> {
    let err = |m: &str| Error::Parse(format!("ppm: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(err("not a binary P6 file"));
    }
    let mut num = || -> Result<usize> { token()?.parse().map_err(|_| err("bad header number")) };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if !(1..=255).contains(&maxval) {
        return Err(err("only maxval 1..=255 is supported"));
    }
    // exactly one whitespace byte separates the header from the samples
    let start = pos + 1;
    let n = w * h * 3;
    if bytes.len() < start + n {
        return Err(err("truncated pixel data"));
    }
    let maxval = maxval as f64;
    let data = bytes[start..start + n].iter().map(|&b| b as f64 / maxval).collect();
    Image::from_data(w, h, data)
}

pub fn write_ppm(path: &Path, image: &Image<f64>) -> Result<()> {
    std::fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image<f64>> {
    decode_ppm(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    version: u32,
    frame: Vec<RigParams>,
}

/// Rig-parameter sidecar: one `[[frame]]` table per frame.
pub fn write_params(params: &[RigParams]) -> String {
    toml::to_string(&ParamsFile {
        version: FORMAT_VERSION,
        frame: params.to_vec(),
    })
    .expect("params serialize")
}

pub fn parse_params(text: &str) -> Result<Vec<RigParams>> {
    let f: ParamsFile = toml::from_str(text).map_err(|e| Error::Parse(format!("params: {e}")))?;
    check_version(f.version, "params")?;
    Ok(f.frame)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    seed: u64,
    spec: SceneSpec,
}

pub const SCENE_FILE: &str = "scene.toml";
pub const PARAMS_FILE: &str = "params.toml";
pub const FRAMES_DIR: &str = "frames";

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("frame_{index:04}.ppm"))
}

/// Writes `scene.toml`, `params.toml` and `frames/frame_NNNN.ppm`.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir.join(FRAMES_DIR))?;
    let file = SceneFile {
        version: FORMAT_VERSION,
        seed: scene.seed,
        spec: scene.spec.clone(),
    };
    std::fs::write(dir.join(SCENE_FILE), toml::to_string(&file).expect("scene serializes"))?;
    std::fs::write(dir.join(PARAMS_FILE), write_params(&scene.params))?;
    for (i, img) in scene.images.iter().enumerate() {
        write_ppm(&frame_path(dir, i), img)?;
    }
    Ok(())
}

/// A scene read back from disk: the rig is rebuilt from the spec and the
/// targets are the quantized frames.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub rig: BlendRig,
    pub camera: Camera<f64>,
    pub params: Vec<RigParams>,
    pub images: Vec<Image<f64>>,
}

impl LoadedScene {
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            rig: &self.rig,
            camera: &self.camera,
            params: &self.params,
            images: &self.images,
            background: Vec3::from_array(self.spec.background),
        }
    }
}

pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Parse(format!("scene spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let text = std::fs::read_to_string(dir.join(SCENE_FILE))?;
    let file: SceneFile = toml::from_str(&text).map_err(|e| Error::Parse(format!("{SCENE_FILE}: {e}")))?;
    check_version(file.version, SCENE_FILE)?;
    file.spec.validate()?;
    let params = parse_params(&std::fs::read_to_string(dir.join(PARAMS_FILE))?)?;
    let images = (0..params.len())
        .map(|i| read_ppm(&frame_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    let rig = build_rig(&file.spec)?;
    for (i, p) in params.iter().enumerate() {
        if p.expr.len() != rig.expr_dim() || p.pose.len() != rig.pose_dim() {
            return Err(Error::DimensionMismatch(format!("frame {i} parameters do not fit the rig")));
        }
    }
    let (w, h) = (file.spec.width, file.spec.height);
    if let Some(i) = images.iter().position(|im| im.width != w || im.height != h) {
        return Err(Error::ShapeMismatch(format!("frame {i} is not {w}x{h}")));
    }
    Ok(LoadedScene {
        camera: file.spec.camera()?,
        spec: file.spec,
        seed: file.seed,
        rig,
        params,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> TriMesh<f64> {
        TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 0.1, 0.0),
                Vec3::new(1.0 / 3.0, -2.5e-7, 7.0),
            ],
            vec![[0, 1, 2], [0, 1, 3], [1, 2, 3], [0, 2, 3]],
            vec![1, 0, 1, 0],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let mesh = tetra();
        let text = write_obj(&mesh);
        let (v, f) = parse_obj(&text).unwrap();
        assert_eq!(v, mesh.vertices);
        assert_eq!(f, mesh.faces);
        let (p, names) = parse_parts(&write_parts(&mesh), 4).unwrap();
        assert_eq!(p, mesh.part_of_face);
        assert_eq!(names, mesh.part_names);
    }

    #[test]
    fn obj_subset_details() {
        let text = "# c\nv 0 0 0\nv 1 0 0 1.0\nvt 0 0\nv 0 1 0\nf 1/1/1 2//2 -1\n";
        let (v, f) = parse_obj(text).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(f, vec![[0, 1, 2]]);
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
        assert!(parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n").is_err());
        assert!(parse_obj("v 0 0\n").is_err());
    }

    #[test]
    fn part_mask_must_partition() {
        let ok = "version = 1\n[[part]]\nname = \"a\"\nfaces = [0]\n[[part]]\nname = \"b\"\nfaces = [1]\n";
        assert!(parse_parts(ok, 2).is_ok());
        assert!(matches!(parse_parts(ok, 3), Err(Error::InvalidPartMask(_))));
        let dup = "version = 1\n[[part]]\nname = \"a\"\nfaces = [0, 1]\n[[part]]\nname = \"b\"\nfaces = [1]\n";
        assert!(matches!(parse_parts(dup, 2), Err(Error::InvalidPartMask(_))));
        assert!(matches!(parse_parts(ok, 1), Err(Error::InvalidPartMask(_))));
        assert!(parse_parts("version = 2\npart = []\n", 0).is_err());
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(f64::NAN), 0);
        // 0.5/255 sits exactly on the rounding boundary of 0 and 1
        assert_eq!(quantize(1.0 / 510.0 + 1e-12), 1);
    }

    #[test]
    fn ppm_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 15) as f64 / 255.0).collect();
        let img = Image::from_data(2, 3, data).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n2 3\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_ppm(&back), bytes);
        let commented = [b"P6 # note\n2 3\n255\n".as_slice(), &bytes[11..]].concat();
        assert_eq!(decode_ppm(&commented).unwrap(), img);
        assert!(decode_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let p = vec![
            RigParams {
                expr: vec![0.1, -1.0 / 3.0],
                pose: vec![1e-300],
                rot: [0.5, -0.25, 2.0f64.sqrt()],
                trans: [0.0, -0.0, 1e20],
                t: 0.05,
            },
            RigParams::neutral(2, 1),
        ];
        assert_eq!(parse_params(&write_params(&p)).unwrap(), p);
    }

    #[test]
    fn rings_round_trip() {
        let mut r = Rings::new(vec![3, 1, 2], vec![9, 8]);
        assert_eq!(Rings::parse(&r.to_text()).unwrap(), r);
        r.depth = Some(0.25);
        assert_eq!(Rings::parse(&r.to_text()).unwrap(), r);
        assert!(Rings::parse("version = 1\nupper = []\n").is_err());
    }
}
