//! Scene files, ground-truth sidecars and detection output.
//!
//! Point clouds come as whitespace text (`x y z [f1 … fF]` per line) or as
//! little-endian binary: magic `SPD3`, `u32` version, `u32` point count N,
//! `u32` feature count F, then `N·(3+F)` `f32` values row by row. Ground
//! truth lives next to the cloud in `<scene>.gt.txt` with one
//! `cx cy cz w l h theta class` line per box.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::matrix::Matrix;
use crate::voxel::PointCloud;

pub const BINARY_MAGIC: &[u8; 4] = b"SPD3";
pub const BINARY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Text,
    Binary,
}

impl CloudFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Text => "txt",
            Self::Binary => "spd3",
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") => Ok(Self::Text),
            Some("spd3") => Ok(Self::Binary),
            _ => Err(Error::Parse(format!("unknown point-cloud format for {}", path.display()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub cloud: PointCloud,
    /// Boxes with class ids.
    pub gt: Vec<(Box3D, usize)>,
}

impl SceneRecord {
    pub fn validate(&self, n_class: usize) -> Result<()> {
        for (b, c) in &self.gt {
            b.validate()?;
            if *c >= n_class {
                return Err(Error::invalid(format!(
                    "scene {}: class {c} out of range for {n_class} classes",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }
}

fn parse_floats(line: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("line {n}: bad number `{t}`"))))
        .collect::<Result<_>>()?;
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Parse(format!("line {n}: non-finite value {x}")));
    }
    Ok(v)
}

/// Parses the text point format.
pub fn read_text_cloud(r: impl Read) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut feats: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let v = parse_floats(&line, i + 1)?;
        if v.len() < 3 {
            return Err(Error::Parse(format!("line {}: need at least x y z", i + 1)));
        }
        match width {
            None => width = Some(v.len() - 3),
            Some(w) if w != v.len() - 3 => {
                return Err(Error::Parse(format!("line {}: expected {} features, found {}", i + 1, w, v.len() - 3)))
            }
            _ => {}
        }
        positions.push([v[0], v[1], v[2]]);
        feats.extend_from_slice(&v[3..]);
    }
    let features = match width {
        Some(w) if w > 0 => Some(Matrix::from_vec(positions.len(), w, feats)?),
        _ => None,
    };
    PointCloud::new(positions, features)
}

pub fn write_text_cloud(cloud: &PointCloud, mut w: impl Write) -> Result<()> {
    for (i, p) in cloud.positions.iter().enumerate() {
        write!(w, "{:?} {:?} {:?}", p[0], p[1], p[2])?;
        if let Some(f) = &cloud.features {
            for v in f.row(i) {
                write!(w, " {v:?}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Parse("truncated binary header".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Parses the binary point format.
pub fn read_binary_cloud(mut r: impl Read) -> Result<PointCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Parse("missing SPD3 magic".into()))?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Parse("bad magic: not an SPD3 file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != BINARY_VERSION {
        return Err(Error::Parse(format!("unsupported SPD3 version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let f = read_u32(&mut r)? as usize;
    let total =
        n.checked_mul(3 + f).and_then(|v| v.checked_mul(4)).ok_or_else(|| Error::Parse("SPD3 size overflow".into()))?;
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() != total {
        return Err(Error::Parse(format!("SPD3 payload has {} bytes, header implies {total}", buf.len())));
    }
    let vals: Vec<f64> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse("SPD3 payload contains non-finite values".into()));
    }
    let mut positions = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * f);
    for row in vals.chunks_exact(3 + f) {
        positions.push([row[0], row[1], row[2]]);
        feats.extend_from_slice(&row[3..]);
    }
    let features = if f > 0 { Some(Matrix::from_vec(n, f, feats)?) } else { None };
    PointCloud::new(positions, features)
}

pub fn write_binary_cloud(cloud: &PointCloud, mut w: impl Write) -> Result<()> {
    let f = cloud.feature_width();
    w.write_all(BINARY_MAGIC)?;
    for v in [BINARY_VERSION, cloud.len() as u32, f as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for (i, p) in cloud.positions.iter().enumerate() {
        for &v in p {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        if let Some(m) = &cloud.features {
            for &v in m.row(i) {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Parses a ground-truth sidecar.
pub fn read_boxes(r: impl Read) -> Result<Vec<(Box3D, usize)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let v = parse_floats(&line, i + 1)?;
        if v.len() != 8 || v[7] < 0.0 || v[7].fract() != 0.0 {
            return Err(Error::Parse(format!("line {}: expected `cx cy cz w l h theta class`", i + 1)));
        }
        let b = Box3D::from_array([v[0], v[1], v[2], v[3], v[4], v[5], v[6]])
            .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push((b, v[7] as usize));
    }
    Ok(out)
}

pub fn write_boxes(boxes: &[(Box3D, usize)], mut w: impl Write) -> Result<()> {
    for (b, c) in boxes {
        let a = b.to_array();
        writeln!(w, "{:?} {:?} {:?} {:?} {:?} {:?} {:?} {c}", a[0], a[1], a[2], a[3], a[4], a[5], a[6])?;
    }
    Ok(())
}

pub fn sidecar_path(cloud: &Path) -> PathBuf {
    let stem = cloud.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    cloud.with_file_name(format!("{stem}.gt.txt"))
}

/// Reads a cloud and its sidecar (if present) into a scene.
pub fn ingest(path: &Path, format: CloudFormat) -> Result<SceneRecord> {
    let file = std::fs::File::open(path)?;
    let cloud = match format {
        CloudFormat::Text => read_text_cloud(file),
        CloudFormat::Binary => read_binary_cloud(file),
    }
    .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let side = sidecar_path(path);
    let gt = if side.exists() { read_boxes(std::fs::File::open(&side)?)? } else { Vec::new() };
    let scene_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
    Ok(SceneRecord { scene_id, cloud, gt })
}

/// Writes a scene as `<dir>/<scene_id>.<ext>` plus its sidecar.
pub fn write_scene(dir: &Path, scene: &SceneRecord, format: CloudFormat) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.{}", scene.scene_id, format.extension()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    match format {
        CloudFormat::Text => write_text_cloud(&scene.cloud, &mut w)?,
        CloudFormat::Binary => write_binary_cloud(&scene.cloud, &mut w)?,
    }
    w.flush()?;
    let mut g = std::io::BufWriter::new(std::fs::File::create(sidecar_path(&path))?);
    write_boxes(&scene.gt, &mut g)?;
    g.flush()?;
    Ok(path)
}

/// Every scene in `dir`, sorted by file name.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<SceneRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            !name.ends_with(".gt.txt") && CloudFormat::from_path(p).is_ok()
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| ingest(p, CloudFormat::from_path(p)?)).collect()
}

/// One output box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: String,
    pub class: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Detection {
    pub fn new(scene_id: &str, class: usize, score: f64, b: &Box3D) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            class,
            score,
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            w: b.w,
            l: b.l,
            h: b.h,
            theta: b.theta,
        }
    }

    pub fn bbox(&self) -> Result<Box3D> {
        Box3D::from_array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.theta])
    }
}

/// Line-delimited JSON, one detection per line.
pub fn write_detections(dets: &[Detection], mut w: impl Write) -> Result<()> {
    for d in dets {
        let line = serde_json::to_string(d).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_detections(r: impl Read) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_an_empty_cloud() {
        let c = read_text_cloud(&b""[..]).unwrap();
        assert!(c.is_empty());
        assert!(read_boxes(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn three_points_parse_exactly() {
        let c = read_text_cloud(&b"0.1 0.2 0.3 1\n-1 2.5 3 0\n4 5 6 0.5\n"[..]).unwrap();
        assert_eq!(c.positions, vec![[0.1, 0.2, 0.3], [-1.0, 2.5, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(c.features.unwrap().as_slice(), &[1.0, 0.0, 0.5]);
    }

    #[test]
    fn malformed_inputs_fail() {
        assert!(read_text_cloud(&b"1 2\n"[..]).is_err());
        assert!(read_text_cloud(&b"1 2 nan\n"[..]).is_err());
        assert!(read_text_cloud(&b"1 2 3 4\n1 2 3\n"[..]).is_err());
        assert!(read_binary_cloud(&b"XXXX"[..]).is_err());
        let mut bad = b"SPD3".to_vec();
        bad.extend_from_slice(&1u32.to_le_bytes());
        bad.extend_from_slice(&2u32.to_le_bytes());
        bad.extend_from_slice(&0u32.to_le_bytes());
        assert!(read_binary_cloud(&bad[..]).is_err());
    }

    #[test]
    fn binary_and_text_agree() {
        let cloud = PointCloud::new(
            vec![[0.125, -3.5, 2.0], [1.0 / 3.0, 0.7, 0.1]],
            Some(Matrix::from_vec(2, 1, vec![0.25, 0.9]).unwrap()),
        )
        .unwrap();
        let mut bin = Vec::new();
        write_binary_cloud(&cloud, &mut bin).unwrap();
        let b = read_binary_cloud(&bin[..]).unwrap();
        let mut txt = Vec::new();
        write_text_cloud(&b, &mut txt).unwrap();
        let t = read_text_cloud(&txt[..]).unwrap();
        assert_eq!(b, t);
        for (p, q) in cloud.positions.iter().zip(&b.positions) {
            for k in 0..3 {
                assert_eq!(p[k] as f32, q[k] as f32);
            }
        }
    }

    #[test]
    fn detections_round_trip() {
        let b = Box3D::new([1.0, 2.0, 3.0], [0.5, 0.6, 0.7], 0.3).unwrap();
        let d = vec![Detection::new("s0", 2, 0.75, &b)];
        let mut buf = Vec::new();
        write_detections(&d, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("{\"scene_id\":\"s0\",\"class\":2,"));
        assert_eq!(read_detections(&buf[..]).unwrap(), d);
    }
}
