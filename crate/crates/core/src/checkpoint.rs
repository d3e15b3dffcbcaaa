//! GAVT checkpoint: little-endian binary snapshot of a [`TrainState`].
//!
//! ```text
//! "GAVT"  u32 version  u32 num_faces  u32 num_splats
//! num_splats x 14 f64   splat records (see Splat::to_params)
//! num_splats x u32      binding
//! sections until EOF:   [u8; 4] tag, u64 payload length, payload
//! ```
//!
//! Sections: `DEFN` deformation networks (optional), `ASGN` face-set
//! assignment, `OPTM` optimizer moments, `TRST` trainer counters. Unknown
//! tags are skipped.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::aps::{ApsEvent, ApsStage, FaceSet, FaceSetAssignment};
use crate::deform_net::{DeformMLP, PartNets, PosEncoding};
use crate::error::{Error, Result};
use crate::splats::{Splat, SplatSet, PARAMS_PER_SPLAT};
use crate::trainer::{Moments, TrainState};

pub const MAGIC: &[u8; 4] = b"GAVT";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::BadCheckpoint(msg.into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("count fits in u32");
        self.0.write_u32::<LE>(v).expect("vec write");
    }
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).expect("vec write");
    }
    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).expect("vec write");
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        self.u8(v.is_some().into());
        self.f64(v.unwrap_or(0.0));
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        self.u8(v.is_some().into());
        self.u64(v.unwrap_or(0));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend(s.as_bytes());
    }
    fn section(&mut self, tag: &[u8; 4], payload: Writer) {
        self.0.extend(tag);
        self.u64(payload.0.len() as u64);
        self.0.extend(payload.0);
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl<'a> Reader<'a> {
    fn new(b: &'a [u8]) -> Self {
        Self(Cursor::new(b))
    }
    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }
    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(|_| bad("truncated"))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(self.0.read_u32::<LE>().map_err(|_| bad("truncated"))? as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(|_| bad("truncated"))
    }
    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().map_err(|_| bad("truncated"))
    }
    /// Length prefix, checked against the bytes left so corrupt counts fail fast.
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.remaining() {
            return Err(bad("length prefix exceeds the data"));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(bad(format!("flag byte {v}"))),
        }
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        let some = self.flag()?;
        let v = self.f64()?;
        Ok(some.then_some(v))
    }
    fn opt_u64(&mut self) -> Result<Option<u64>> {
        let some = self.flag()?;
        let v = self.u64()?;
        Ok(some.then_some(v))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        if n > self.remaining() {
            return Err(bad("string length exceeds the data"));
        }
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
        String::from_utf8(buf).map_err(|_| bad("string is not utf-8"))
    }
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(bad("section length exceeds the data"));
        }
        let start = self.0.position() as usize;
        self.0.set_position((start + n) as u64);
        Ok(&self.0.get_ref()[start..start + n])
    }
}

fn set_code(s: FaceSet) -> u8 {
    s.index() as u8
}

fn set_from(code: u8) -> Result<FaceSet> {
    match code {
        0 => Ok(FaceSet::Rigid),
        1 => Ok(FaceSet::Flexible),
        2 => Ok(FaceSet::Mouth),
        v => Err(bad(format!("face-set code {v}"))),
    }
}

fn write_net(w: &mut Writer, net: &DeformMLP<f64>) {
    w.u32(net.expr_dim);
    w.u32(net.pose_dim);
    w.u32(net.encoding.num_freqs);
    w.u8(net.encoding.include_input.into());
    w.u32(net.widths().len());
    net.widths().iter().for_each(|&v| w.u32(v));
    w.f64s(net.params());
}

fn read_net(r: &mut Reader) -> Result<DeformMLP<f64>> {
    let expr_dim = r.u32()?;
    let pose_dim = r.u32()?;
    let encoding = PosEncoding {
        num_freqs: r.u32()?,
        include_input: r.flag()?,
    };
    let n = r.u32()?;
    if n * 4 > r.remaining() {
        return Err(bad("network width count exceeds the data"));
    }
    let widths = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let params = r.f64s()?;
    DeformMLP::from_parts(expr_dim, pose_dim, encoding, widths, params).map_err(|e| bad(e.to_string()))
}

fn write_assignment(w: &mut Writer, a: &FaceSetAssignment) {
    w.u32(a.set_of_face.len());
    a.set_of_face.iter().for_each(|&s| w.u8(set_code(s)));
    w.u32(a.part_sets.len());
    for (s, d) in a.part_sets.iter().zip(&a.part_distances) {
        w.u8(set_code(*s));
        w.opt_f64(*d);
    }
    w.opt_f64(a.tau_part);
}

fn read_assignment(r: &mut Reader) -> Result<FaceSetAssignment> {
    let nf = r.u32()?;
    if nf > r.remaining() {
        return Err(bad("face count exceeds the data"));
    }
    let set_of_face = (0..nf).map(|_| set_from(r.u8()?)).collect::<Result<Vec<_>>>()?;
    let np = r.u32()?;
    let mut part_sets = Vec::new();
    let mut part_distances = Vec::new();
    for _ in 0..np {
        part_sets.push(set_from(r.u8()?)?);
        part_distances.push(r.opt_f64()?);
    }
    Ok(FaceSetAssignment {
        set_of_face,
        part_sets,
        part_distances,
        tau_part: r.opt_f64()?,
    })
}

fn write_usizes(w: &mut Writer, v: &[usize]) {
    w.u64(v.len() as u64);
    v.iter().for_each(|&x| w.u32(x));
}

fn read_usizes(r: &mut Reader) -> Result<Vec<usize>> {
    let n = r.len(4)?;
    (0..n).map(|_| r.u32()).collect()
}

fn write_event(w: &mut Writer, e: &ApsEvent) {
    w.u64(e.step);
    w.u32(e.part_names.len());
    e.part_names.iter().for_each(|s| w.str(s));
    write_assignment(w, &e.assignment);
    e.splat_counts.iter().for_each(|&c| w.u64(c as u64));
    write_usizes(w, &e.empty_faces);
}

fn read_event(r: &mut Reader) -> Result<ApsEvent> {
    let step = r.u64()?;
    let n = r.u32()?;
    if n > r.remaining() {
        return Err(bad("part-name count exceeds the data"));
    }
    let part_names = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let assignment = read_assignment(r)?;
    let mut splat_counts = [0; 3];
    for c in &mut splat_counts {
        *c = r.u64()? as usize;
    }
    Ok(ApsEvent {
        step,
        part_names,
        assignment,
        splat_counts,
        empty_faces: read_usizes(r)?,
    })
}

/// Serializes the full trainer state.
pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend(MAGIC);
    w.0.write_u32::<LE>(VERSION).expect("vec write");
    w.u32(state.num_faces);
    w.u32(state.splats.len());
    for s in &state.splats.splats {
        s.to_params().iter().for_each(|&v| w.f64(v));
    }
    state.splats.binding.iter().for_each(|&f| w.u32(f));

    if let Some(nets) = &state.nets {
        let mut p = Writer::default();
        write_net(&mut p, &nets.upper);
        write_net(&mut p, &nets.lower);
        w.section(b"DEFN", p);
    }
    let mut p = Writer::default();
    write_assignment(&mut p, &state.assignment);
    w.section(b"ASGN", p);

    let mut p = Writer::default();
    for m in std::iter::once(&state.splat_moments).chain(&state.net_moments) {
        p.f64s(&m.m);
        p.f64s(&m.v);
    }
    w.section(b"OPTM", p);

    let mut p = Writer::default();
    p.u64(state.step);
    p.u64(state.aps.scheduled_step);
    p.opt_u64(state.aps.ran_at);
    write_usizes(&mut p, &state.mouth_parts);
    p.f64s(&state.grad_accum);
    p.u64(state.grad_count.len() as u64);
    state.grad_count.iter().for_each(|&c| p.u32(c as usize));
    p.u8(state.aps_event.is_some().into());
    if let Some(e) = &state.aps_event {
        write_event(&mut p, e);
    }
    w.section(b"TRST", p);
    w.0
}

/// Parses a checkpoint written by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    let mut magic = [0u8; 4];
    r.0.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("missing GAVT magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let num_faces = r.u32()?;
    let n = r.u32()?;
    if n.saturating_mul(PARAMS_PER_SPLAT * 8 + 4) > r.remaining() {
        return Err(bad("splat count exceeds the data"));
    }
    let mut splats = Vec::with_capacity(n);
    let mut p = [0.0; PARAMS_PER_SPLAT];
    for _ in 0..n {
        for v in &mut p {
            *v = r.f64()?;
        }
        splats.push(Splat::from_params(&p));
    }
    let binding = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let splats = SplatSet::new(splats, binding, num_faces).map_err(|e| bad(e.to_string()))?;

    let (mut nets, mut assignment, mut moments, mut trst) = (None, None, None, None);
    while r.remaining() > 0 {
        let tag: [u8; 4] = r.bytes(4)?.try_into().expect("four bytes");
        let len = r.u64()? as usize;
        let mut s = Reader::new(r.bytes(len)?);
        match &tag {
            b"DEFN" => nets = Some((read_net(&mut s)?, read_net(&mut s)?)),
            b"ASGN" => assignment = Some(read_assignment(&mut s)?),
            b"OPTM" => {
                let mut read = || -> Result<Moments> {
                    Ok(Moments {
                        m: s.f64s()?,
                        v: s.f64s()?,
                    })
                };
                moments = Some((read()?, read()?, read()?));
            }
            b"TRST" => {
                let step = s.u64()?;
                let aps = ApsStage {
                    scheduled_step: s.u64()?,
                    ran_at: s.opt_u64()?,
                };
                let mouth_parts = read_usizes(&mut s)?;
                let grad_accum = s.f64s()?;
                let nc = s.len(4)?;
                let grad_count = (0..nc).map(|_| s.u32().map(|c| c as u32)).collect::<Result<Vec<_>>>()?;
                let event = if s.flag()? { Some(read_event(&mut s)?) } else { None };
                trst = Some((step, aps, mouth_parts, grad_accum, grad_count, event));
            }
            _ => continue,
        }
        if s.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes in section {}", s.remaining(), String::from_utf8_lossy(&tag))));
        }
    }
    let assignment = assignment.ok_or_else(|| bad("missing ASGN section"))?;
    let (splat_moments, m_upper, m_lower) = moments.ok_or_else(|| bad("missing OPTM section"))?;
    let (step, aps, mouth_parts, grad_accum, grad_count, aps_event) = trst.ok_or_else(|| bad("missing TRST section"))?;

    let per_splat = n * PARAMS_PER_SPLAT;
    if splat_moments.m.len() != per_splat || splat_moments.v.len() != per_splat {
        return Err(bad("optimizer moments do not match the splat count"));
    }
    if grad_accum.len() != n || grad_count.len() != n {
        return Err(bad("densification statistics do not match the splat count"));
    }
    if assignment.set_of_face.len() != num_faces {
        return Err(bad("assignment does not match the face count"));
    }
    let nets = nets.map(|(upper, lower)| PartNets { upper, lower });
    let net_sizes = nets
        .as_ref()
        .map_or([0, 0], |n| [n.upper.num_params(), n.lower.num_params()]);
    for (m, size) in [&m_upper, &m_lower].into_iter().zip(net_sizes) {
        if m.m.len() != size || m.v.len() != size {
            return Err(bad("network moments do not match the network size"));
        }
    }
    Ok(TrainState {
        step,
        splats,
        num_faces,
        splat_moments,
        nets,
        net_moments: [m_upper, m_lower],
        mouth_parts,
        assignment,
        aps,
        aps_event,
        grad_accum,
        grad_count,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_bytes(state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig_synth::{generate_scene, SceneSpec};
    use crate::trainer::{fit, TrainConfig, TrainData};

    fn trained_state() -> TrainState {
        let mut spec = SceneSpec::ablation();
        spec.width = 24;
        spec.height = 24;
        spec.frames = 3;
        let scene = generate_scene(&spec, 3).unwrap();
        let cfg = TrainConfig {
            total_steps: 4,
            aps_step: 2,
            deform_hidden: vec![4],
            log_interval: 0,
            ..TrainConfig::default()
        };
        fit(&cfg, &TrainData::from_scene(&scene)).unwrap().state
    }

    #[test]
    fn round_trip_is_exact() {
        let state = trained_state();
        assert!(state.nets.is_some() && state.aps_event.is_some());
        let bytes = to_bytes(&state);
        assert_eq!(&bytes[..4], MAGIC);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&trained_state());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(from_bytes(&wrong_magic), Err(Error::BadCheckpoint(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(from_bytes(&wrong_version), Err(Error::BadCheckpoint(_))));
        for cut in [3, 10, 100, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::BadCheckpoint(_))), "cut at {cut}");
        }
    }

    #[test]
    fn unknown_sections_are_skipped() {
        let state = trained_state();
        let mut bytes = to_bytes(&state);
        bytes.extend(b"XTRA");
        bytes.extend(3u64.to_le_bytes());
        bytes.extend([1, 2, 3]);
        assert_eq!(from_bytes(&bytes).unwrap(), state);
    }
}
