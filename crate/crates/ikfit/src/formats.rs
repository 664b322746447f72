//! File formats: JSON documents for skeletons, rigs, configs, poses, and
//! reports; CSV tables for marker frames, detections, and correspondence
//! tables. Parse errors carry file and line. See docs/FORMATS.md in the
//! repository for examples of every format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cameras::CameraRig;
use crate::error::{Error, Result};
use crate::mapping::{CorrespondenceEntry, CorrespondenceTable, SourceKind};
use crate::residuals::{Detection, MarkerFrame, MultiviewFrame};
use crate::skeleton::{Body, PoseState, ScaleGroup, Site, Skeleton};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Write `bytes` to `path` atomically: a temp file in the same directory is
/// renamed into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile_in(dir, path)?;
    tmp.1.write_all(bytes).map_err(|e| io_err(&tmp.0, e))?;
    tmp.1.sync_all().map_err(|e| io_err(&tmp.0, e))?;
    drop(tmp.1);
    fs::rename(&tmp.0, path).map_err(|e| io_err(path, e))
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(std::path::PathBuf, fs::File)> {
    let stem = target
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".into());
    for attempt in 0..100 {
        let candidate = dir.join(format!(".{stem}.tmp{attempt}"));
        match fs::OpenOptions::new().write(true).create_new(true).open(&candidate) {
            Ok(f) => return Ok((candidate, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&candidate, e)),
        }
    }
    Err(Error::Io {
        path: dir.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "no free temp name"),
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// On-disk skeleton document; validated into a `Skeleton` on load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkeletonDoc {
    pub bodies: Vec<Body>,
    pub sites: Vec<Site>,
    #[serde(default)]
    pub scale_groups: Vec<ScaleGroup>,
}

impl SkeletonDoc {
    pub fn from_skeleton(skel: &Skeleton) -> Self {
        SkeletonDoc {
            bodies: skel.bodies().to_vec(),
            sites: skel.sites().to_vec(),
            scale_groups: skel.scale_groups().to_vec(),
        }
    }

    pub fn into_skeleton(self) -> Result<Skeleton> {
        Skeleton::new(self.bodies, self.sites, self.scale_groups)
    }
}

pub fn load_skeleton(path: &Path) -> Result<Skeleton> {
    load_json::<SkeletonDoc>(path)?.into_skeleton()
}

pub fn save_skeleton(path: &Path, skel: &Skeleton) -> Result<()> {
    save_json(path, &SkeletonDoc::from_skeleton(skel))
}

pub fn load_rig(path: &Path) -> Result<CameraRig> {
    load_json::<CameraRig>(path)?.reindex()
}

pub fn save_rig(path: &Path, rig: &CameraRig) -> Result<()> {
    save_json(path, rig)
}

/// One solved or ground-truth pose tagged with its frame id.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    pub frame: u64,
    pub pose: PoseState,
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseRecord>> {
    load_json(path)
}

pub fn save_poses(path: &Path, poses: &[PoseRecord]) -> Result<()> {
    save_json(path, &poses.to_vec())
}

struct CsvReader<'a> {
    path: &'a Path,
    header: Vec<String>,
}

impl<'a> CsvReader<'a> {
    fn parse_err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.display().to_string(),
            line,
            message: message.into(),
        }
    }

    fn fields(&self, line_no: usize, line: &str) -> Result<Vec<String>> {
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != self.header.len() {
            return Err(self.parse_err(
                line_no,
                format!("expected {} fields, found {}", self.header.len(), fields.len()),
            ));
        }
        Ok(fields)
    }

    fn number(&self, line_no: usize, name: &str, raw: &str) -> Result<f64> {
        raw.parse::<f64>()
            .map_err(|_| self.parse_err(line_no, format!("invalid {name} value '{raw}'")))
    }

    fn index(&self, line_no: usize, name: &str, raw: &str) -> Result<u64> {
        raw.parse::<u64>()
            .map_err(|_| self.parse_err(line_no, format!("invalid {name} value '{raw}'")))
    }
}

fn open_csv<'a>(path: &'a Path, expected_header: &[&str]) -> Result<(CsvReader<'a>, Vec<(usize, String)>)> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (header_line, header_raw) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        message: "empty file".into(),
    })?;
    let header: Vec<String> = header_raw.split(',').map(|f| f.trim().to_string()).collect();
    if header != expected_header {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: header_line,
            message: format!(
                "expected header '{}', found '{header_raw}'",
                expected_header.join(",")
            ),
        });
    }
    Ok((CsvReader { path, header }, lines.collect()))
}

/// Marker-frame table: `frame,site,x,y,z,confidence`, meters.
pub fn load_marker_frames(path: &Path) -> Result<Vec<(u64, MarkerFrame)>> {
    let (reader, rows) = open_csv(path, &["frame", "site", "x", "y", "z", "confidence"])?;
    let mut frames: BTreeMap<u64, Vec<(String, Vector3<f64>, f64)>> = BTreeMap::new();
    for (line_no, row) in rows {
        let f = reader.fields(line_no, &row)?;
        let frame = reader.index(line_no, "frame", &f[0])?;
        let x = reader.number(line_no, "x", &f[2])?;
        let y = reader.number(line_no, "y", &f[3])?;
        let z = reader.number(line_no, "z", &f[4])?;
        let confidence = reader.number(line_no, "confidence", &f[5])?;
        frames
            .entry(frame)
            .or_default()
            .push((f[1].clone(), Vector3::new(x, y, z), confidence));
    }
    frames
        .into_iter()
        .map(|(id, entries)| Ok((id, MarkerFrame::new(entries)?)))
        .collect()
}

pub fn save_marker_frames(path: &Path, frames: &[(u64, MarkerFrame)]) -> Result<()> {
    let mut out = String::from("frame,site,x,y,z,confidence\n");
    for (id, frame) in frames {
        for (site, p) in frame.targets() {
            out.push_str(&format!(
                "{id},{site},{},{},{},{}\n",
                fmt(p.x),
                fmt(p.y),
                fmt(p.z),
                fmt(frame.confidence(site))
            ));
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Detection table: `frame,camera,site,u,v,confidence`, pixels.
pub fn load_detection_frames(path: &Path) -> Result<Vec<(u64, MultiviewFrame)>> {
    let (reader, rows) = open_csv(path, &["frame", "camera", "site", "u", "v", "confidence"])?;
    let mut frames: BTreeMap<u64, MultiviewFrame> = BTreeMap::new();
    for (line_no, row) in rows {
        let f = reader.fields(line_no, &row)?;
        let frame = reader.index(line_no, "frame", &f[0])?;
        let u = reader.number(line_no, "u", &f[3])?;
        let v = reader.number(line_no, "v", &f[4])?;
        let confidence = reader.number(line_no, "confidence", &f[5])?;
        if !confidence.is_finite() || confidence < 0.0 {
            return Err(reader.parse_err(line_no, format!("confidence must be >= 0, got {confidence}")));
        }
        frames.entry(frame).or_default().insert(
            &f[1],
            &f[2],
            Detection { pixel: Vector2::new(u, v), confidence },
        );
    }
    Ok(frames.into_iter().collect())
}

pub fn save_detection_frames(path: &Path, frames: &[(u64, MultiviewFrame)]) -> Result<()> {
    let mut out = String::from("frame,camera,site,u,v,confidence\n");
    for (id, frame) in frames {
        for (camera, detections) in frame.views() {
            for (site, d) in detections {
                out.push_str(&format!(
                    "{id},{camera},{site},{},{},{}\n",
                    fmt(d.pixel.x),
                    fmt(d.pixel.y),
                    fmt(d.confidence)
                ));
            }
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Correspondence table: `external_id,kind,site,weight` with kind one of
/// `vertex` or `regressed_keypoint`.
pub fn load_correspondences(path: &Path) -> Result<CorrespondenceTable> {
    let (reader, rows) = open_csv(path, &["external_id", "kind", "site", "weight"])?;
    let mut entries = Vec::new();
    for (line_no, row) in rows {
        let f = reader.fields(line_no, &row)?;
        let kind = match f[1].as_str() {
            "vertex" => SourceKind::Vertex,
            "regressed_keypoint" => SourceKind::RegressedKeypoint,
            other => {
                return Err(reader.parse_err(
                    line_no,
                    format!("kind must be 'vertex' or 'regressed_keypoint', got '{other}'"),
                ))
            }
        };
        entries.push(CorrespondenceEntry {
            external_id: f[0].clone(),
            kind,
            site: f[2].clone(),
            weight: reader.number(line_no, "weight", &f[3])?,
        });
    }
    CorrespondenceTable::new(entries)
}

pub fn save_correspondences(path: &Path, table: &CorrespondenceTable) -> Result<()> {
    let mut out = String::from("external_id,kind,site,weight\n");
    for e in table.entries() {
        let kind = match e.kind {
            SourceKind::Vertex => "vertex",
            SourceKind::RegressedKeypoint => "regressed_keypoint",
        };
        out.push_str(&format!("{},{kind},{},{}\n", e.external_id, e.site, fmt(e.weight)));
    }
    write_atomic(path, out.as_bytes())
}

/// Shortest decimal that round-trips through f64.
fn fmt(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains(['.', 'e', 'n', 'i']) {
        s.push_str(".0");
    }
    s
}
