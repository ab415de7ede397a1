//! File formats: little-endian binaries for score maps, label and superpixel
//! images, lidar scans, ground truth, labeled points and map snapshots;
//! CSV velocity streams; TOML calibration; PNM conversion for inspection.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::ego_motion::VelocitySample;
use crate::geometry::{FisheyeIntrinsics, RigidTransform};
use crate::motion_correction::{LidarPacket, LidarPoint, LidarScan};
use crate::occlusion::LabeledPoint;
use crate::octree::{SemanticOctree, SemanticVoxel, VoxelKey};
use crate::semantic::{LabelImage, ScoreMap, SuperpixelMap};

pub const SCORE_MAGIC: [u8; 4] = *b"SFSC";
pub const LABEL_MAGIC: [u8; 4] = *b"SFLB";
pub const SUPERPIXEL_MAGIC: [u8; 4] = *b"SFSP";
pub const SCAN_MAGIC: [u8; 4] = *b"SFLS";
pub const TRUTH_MAGIC: [u8; 4] = *b"SFGT";
pub const LABELED_MAGIC: [u8; 4] = *b"SFLP";
pub const MAP_MAGIC: [u8; 4] = *b"SFMP";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

impl IoError {
    fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    fn config(path: &Path, message: impl Into<String>) -> Self {
        IoError::Config {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(bytes).map_err(io)?;
    w.flush().map_err(io)
}

// ---------------------------------------------------------------------------
// Byte-level helpers

#[derive(Default)]
struct Out(Vec<u8>);

impl Out {
    fn magic(&mut self, m: [u8; 4]) -> &mut Self {
        self.0.extend_from_slice(&m);
        self
    }
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn i32(&mut self, v: i32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn f32(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
        self
    }
    fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> In<'a> {
    fn new(buf: &'a [u8], path: &'a Path, magic: [u8; 4]) -> Result<Self, IoError> {
        if buf.len() < 4 || buf[..4] != magic {
            return Err(IoError::format(
                path,
                format!("bad magic, expected {}", String::from_utf8_lossy(&magic)),
            ));
        }
        Ok(Self { buf, pos: 4, path })
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        let end = self.pos + N;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| IoError::format(self.path, "truncated file"))?;
        self.pos = end;
        Ok(s.try_into().expect("slice length"))
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn i32(&mut self) -> Result<i32, IoError> {
        Ok(i32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    /// Rejects a declared element count that cannot fit in the rest of the
    /// buffer, before anything is allocated for it.
    fn expect_remaining(&self, count: usize, elem: usize) -> Result<(), IoError> {
        let need = count.checked_mul(elem);
        if need.is_none_or(|n| n > self.buf.len() - self.pos) {
            return Err(IoError::format(self.path, "truncated file"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.pos != self.buf.len() {
            return Err(IoError::format(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Images

pub fn encode_score_map(s: &ScoreMap) -> Vec<u8> {
    let mut o = Out::default();
    o.magic(SCORE_MAGIC)
        .u32(s.classes() as u32)
        .u32(s.height() as u32)
        .u32(s.width() as u32);
    o.0.reserve(s.as_slice().len() * 4);
    for v in s.as_slice() {
        o.0.extend_from_slice(&v.to_le_bytes());
    }
    o.0
}

pub fn decode_score_map(buf: &[u8], path: &Path) -> Result<ScoreMap, IoError> {
    let mut r = In::new(buf, path, SCORE_MAGIC)?;
    let (c, n, m) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let len = c.saturating_mul(n).saturating_mul(m);
    r.expect_remaining(len, 4)?;
    let mut scores = Vec::with_capacity(len);
    for _ in 0..len {
        scores.push(r.f32()?);
    }
    r.finish()?;
    ScoreMap::new(c, n, m, scores).map_err(|e| IoError::format(path, e.to_string()))
}

fn encode_ids(magic: [u8; 4], c: usize, n: usize, m: usize, ids: &[u32]) -> Vec<u8> {
    let mut o = Out::default();
    o.magic(magic).u32(c as u32).u32(n as u32).u32(m as u32);
    for &id in ids {
        o.u32(id);
    }
    o.0
}

fn decode_ids(
    buf: &[u8],
    path: &Path,
    magic: [u8; 4],
) -> Result<(usize, usize, usize, Vec<u32>), IoError> {
    let mut r = In::new(buf, path, magic)?;
    let (c, n, m) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    r.expect_remaining(n.saturating_mul(m), 4)?;
    let ids = (0..n * m).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok((c, n, m, ids))
}

/// Label image with its class count in the header.
pub fn encode_label_image(l: &LabelImage, classes: usize) -> Vec<u8> {
    encode_ids(LABEL_MAGIC, classes, l.height, l.width, &l.labels)
}

pub fn decode_label_image(buf: &[u8], path: &Path) -> Result<(LabelImage, usize), IoError> {
    let (c, height, width, labels) = decode_ids(buf, path, LABEL_MAGIC)?;
    let l = LabelImage {
        height,
        width,
        labels,
    };
    l.validate(c).map_err(|e| IoError::format(path, e.to_string()))?;
    Ok((l, c))
}

pub fn encode_superpixels(sp: &SuperpixelMap) -> Vec<u8> {
    encode_ids(SUPERPIXEL_MAGIC, sp.count, sp.height, sp.width, &sp.ids)
}

pub fn decode_superpixels(buf: &[u8], path: &Path) -> Result<SuperpixelMap, IoError> {
    let (count, height, width, ids) = decode_ids(buf, path, SUPERPIXEL_MAGIC)?;
    let sp = SuperpixelMap {
        height,
        width,
        ids,
        count,
    };
    sp.validate().map_err(|e| IoError::format(path, e.to_string()))?;
    Ok(sp)
}

/// 16-bit grayscale PGM of an id image; lossless for ids below 65536.
pub fn ids_to_pgm(width: usize, height: usize, ids: &[u32]) -> Result<Vec<u8>, String> {
    if let Some(id) = ids.iter().find(|&&i| i > u16::MAX as u32) {
        return Err(format!("id {id} does not fit a 16-bit PGM"));
    }
    if ids.len() != width * height {
        return Err("image size mismatch".into());
    }
    // The pnm encoder only writes 8-bit samples; 16-bit PGM is big-endian.
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &i in ids {
        out.extend_from_slice(&(i as u16).to_be_bytes());
    }
    Ok(out)
}

/// Reads an 8- or 16-bit PGM back into ids.
pub fn pgm_to_ids(buf: &[u8]) -> Result<(usize, usize, Vec<u32>), String> {
    let img = image::load_from_memory_with_format(buf, image::ImageFormat::Pnm)
        .map_err(|e| e.to_string())?;
    let g = img.to_luma16();
    let ids = if matches!(img, image::DynamicImage::ImageLuma8(_)) {
        img.to_luma8().into_raw().into_iter().map(u32::from).collect()
    } else {
        g.as_raw().iter().map(|&v| v as u32).collect()
    };
    Ok((g.width() as usize, g.height() as usize, ids))
}

/// Colorized label image; `palette[id]` per pixel.
pub fn labels_to_rgb(l: &LabelImage, palette: &[[u8; 3]]) -> Result<RgbImage, String> {
    let mut img = RgbImage::new(l.width as u32, l.height as u32);
    for (px, &id) in img.pixels_mut().zip(&l.labels) {
        let c = palette
            .get(id as usize)
            .ok_or_else(|| format!("no palette color for class {id}"))?;
        px.0 = *c;
    }
    Ok(img)
}

/// Inverse of [`labels_to_rgb`]; needs a palette with distinct colors.
pub fn rgb_to_labels(img: &RgbImage, palette: &[[u8; 3]]) -> Result<LabelImage, String> {
    let labels = img
        .pixels()
        .map(|p| {
            palette
                .iter()
                .position(|c| *c == p.0)
                .map(|i| i as u32)
                .ok_or_else(|| format!("color {:?} is not in the palette", p.0))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabelImage {
        height: img.height() as usize,
        width: img.width() as usize,
        labels,
    })
}

pub fn rgb_to_ppm(img: &RgbImage) -> Result<Vec<u8>, String> {
    encode_pnm(
        &image::DynamicImage::ImageRgb8(img.clone()),
        image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary),
    )
}

pub fn gray_to_pgm(img: &image::GrayImage) -> Result<Vec<u8>, String> {
    encode_pnm(
        &image::DynamicImage::ImageLuma8(img.clone()),
        image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary),
    )
}

pub fn ppm_to_rgb(buf: &[u8]) -> Result<RgbImage, String> {
    image::load_from_memory_with_format(buf, image::ImageFormat::Pnm)
        .map(|i| i.to_rgb8())
        .map_err(|e| e.to_string())
}

fn encode_pnm(
    img: &image::DynamicImage,
    subtype: image::codecs::pnm::PnmSubtype,
) -> Result<Vec<u8>, String> {
    // Zero-sized images are legal PNM but rejected by the encoder.
    if img.width() == 0 || img.height() == 0 {
        let magic = match subtype {
            image::codecs::pnm::PnmSubtype::Pixmap(_) => "P6",
            _ => "P5",
        };
        return Ok(format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes());
    }
    let mut out = Vec::new();
    image::codecs::pnm::PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .encode(img.as_bytes(), img.width(), img.height(), img.color().into())
        .map_err(|e| e.to_string())?;
    Ok(out)
}

/// Argmax of a score map, colorized; for inspection only.
pub fn score_map_to_rgb(s: &ScoreMap, palette: &[[u8; 3]]) -> Result<RgbImage, String> {
    labels_to_rgb(&crate::semantic::argmax_labels(s), palette)
}

// ---------------------------------------------------------------------------
// Lidar

pub fn encode_scan(scan: &LidarScan) -> Vec<u8> {
    let mut o = Out::default();
    o.magic(SCAN_MAGIC).u32(scan.packets.len() as u32);
    for pk in &scan.packets {
        o.f64(pk.t).u32(pk.points.len() as u32);
        for p in &pk.points {
            o.f32(p.p.x).f32(p.p.y).f32(p.p.z).u8(p.ring).f32(p.azimuth as f64);
        }
    }
    o.0
}

pub fn decode_scan(buf: &[u8], path: &Path) -> Result<LidarScan, IoError> {
    let mut r = In::new(buf, path, SCAN_MAGIC)?;
    let n = r.u32()? as usize;
    r.expect_remaining(n, 12)?;
    let mut packets = Vec::with_capacity(n);
    for _ in 0..n {
        let t = r.f64()?;
        let m = r.u32()? as usize;
        r.expect_remaining(m, 17)?;
        let mut points = Vec::with_capacity(m);
        for _ in 0..m {
            let p = Vector3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
            let ring = r.u8()?;
            let azimuth = r.f32()?;
            points.push(LidarPoint { p, ring, azimuth });
        }
        packets.push(LidarPacket { t, points });
    }
    r.finish()?;
    let scan = LidarScan { packets };
    scan.validate().map_err(|e| IoError::format(path, e.to_string()))?;
    Ok(scan)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanCsvRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    ring: u8,
    azimuth: f32,
}

/// CSV with columns `t,x,y,z,ring,azimuth`; consecutive rows with the same
/// `t` form one packet.
pub fn scan_from_csv(text: &str, path: &Path) -> Result<LidarScan, IoError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut packets: Vec<LidarPacket> = Vec::new();
    for row in rdr.deserialize::<ScanCsvRow>() {
        let row = row.map_err(|e| IoError::format(path, e.to_string()))?;
        let pt = LidarPoint {
            p: Vector3::new(row.x, row.y, row.z),
            ring: row.ring,
            azimuth: row.azimuth,
        };
        match packets.last_mut() {
            Some(pk) if pk.t == row.t => pk.points.push(pt),
            _ => packets.push(LidarPacket {
                t: row.t,
                points: vec![pt],
            }),
        }
    }
    let scan = LidarScan { packets };
    scan.validate().map_err(|e| IoError::format(path, e.to_string()))?;
    Ok(scan)
}

pub fn scan_to_csv(scan: &LidarScan) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for pk in &scan.packets {
        for p in &pk.points {
            w.serialize(ScanCsvRow {
                t: pk.t,
                x: p.p.x,
                y: p.p.y,
                z: p.p.z,
                ring: p.ring,
                azimuth: p.azimuth,
            })
            .expect("in-memory csv");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

/// Ground-truth source class per lidar point, in scan storage order.
pub fn encode_truth(labels: &[u32]) -> Vec<u8> {
    let mut o = Out::default();
    o.magic(TRUTH_MAGIC).u32(labels.len() as u32);
    for &l in labels {
        o.u32(l);
    }
    o.0
}

pub fn decode_truth(buf: &[u8], path: &Path) -> Result<Vec<u32>, IoError> {
    let mut r = In::new(buf, path, TRUTH_MAGIC)?;
    let n = r.u32()? as usize;
    r.expect_remaining(n, 4)?;
    let v = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(v)
}

// ---------------------------------------------------------------------------
// Labeled points

/// Labeled points of one scan seen by one camera. Positions are in the
/// lidar frame at `t_ref`; `index` is the point's position in the scan's
/// storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub scan: u32,
    pub camera: u32,
    pub t_ref: f64,
    pub classes: usize,
    pub points: Vec<LabeledRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub packet: u32,
    pub index: u32,
    pub xyz: Vector3<f64>,
    pub probs: Vec<f64>,
    pub uv: Vector2<f64>,
    pub cov_uv: Matrix2<f64>,
}

impl LabeledRecord {
    pub fn from_point(p: &LabeledPoint, flat_index: u32, probs: Vec<f64>) -> Self {
        Self {
            packet: p.packet as u32,
            index: flat_index,
            xyz: p.mean_xyz,
            probs,
            uv: p.mean_uv,
            cov_uv: p.cov_uv,
        }
    }
}

pub fn encode_labeled(c: &LabeledCloud) -> Vec<u8> {
    let mut o = Out::default();
    o.magic(LABELED_MAGIC)
        .u32(c.classes as u32)
        .u32(c.points.len() as u32)
        .u32(c.scan)
        .u32(c.camera)
        .f64(c.t_ref);
    for p in &c.points {
        o.u32(p.packet).u32(p.index);
        o.f32(p.xyz.x).f32(p.xyz.y).f32(p.xyz.z);
        for &q in &p.probs {
            o.f32(q);
        }
        o.f32(p.uv.x).f32(p.uv.y);
        o.f32(p.cov_uv[(0, 0)]).f32(p.cov_uv[(0, 1)]).f32(p.cov_uv[(1, 1)]);
    }
    o.0
}

pub fn decode_labeled(buf: &[u8], path: &Path) -> Result<LabeledCloud, IoError> {
    let mut r = In::new(buf, path, LABELED_MAGIC)?;
    let classes = r.u32()? as usize;
    let n = r.u32()? as usize;
    let scan = r.u32()?;
    let camera = r.u32()?;
    let t_ref = r.f64()?;
    r.expect_remaining(n, 4 * (10 + classes))?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let packet = r.u32()?;
        let index = r.u32()?;
        let xyz = Vector3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
        let probs = (0..classes)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>, _>>()?;
        let uv = Vector2::new(r.f32()? as f64, r.f32()? as f64);
        let (a, b, d) = (r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
        points.push(LabeledRecord {
            packet,
            index,
            xyz,
            probs,
            uv,
            cov_uv: Matrix2::new(a, b, b, d),
        });
    }
    r.finish()?;
    Ok(LabeledCloud {
        scan,
        camera,
        t_ref,
        classes,
        points,
    })
}

pub fn labeled_to_csv(c: &LabeledCloud, class_names: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["packet", "index", "x", "y", "z"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(class_names.iter().map(|n| format!("p_{n}")));
    header.extend(["u", "v", "cov_uu", "cov_uv", "cov_vv"].iter().map(|s| s.to_string()));
    w.write_record(&header).expect("in-memory csv");
    for p in &c.points {
        let mut rec = vec![
            p.packet.to_string(),
            p.index.to_string(),
            p.xyz.x.to_string(),
            p.xyz.y.to_string(),
            p.xyz.z.to_string(),
        ];
        rec.extend(p.probs.iter().map(|q| q.to_string()));
        rec.extend(
            [p.uv.x, p.uv.y, p.cov_uv[(0, 0)], p.cov_uv[(0, 1)], p.cov_uv[(1, 1)]]
                .iter()
                .map(|q| q.to_string()),
        );
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

// ---------------------------------------------------------------------------
// Map snapshot

pub fn encode_map(map: &SemanticOctree) -> Vec<u8> {
    let c = map.classes();
    let voxels = map.sorted_voxels();
    let mut o = Out::default();
    o.magic(MAP_MAGIC)
        .f64(map.resolution())
        .u32(c as u32)
        .u32(voxels.len() as u32);
    for (k, v) in voxels {
        o.i32(k.ix).i32(k.iy).i32(k.iz).f32(v.log_odds);
        for q in v.class_probs(c) {
            o.f32(q);
        }
    }
    o.0
}

/// Voxels of a snapshot; resolution and class count come from the header,
/// the remaining octree parameters from `params`.
pub fn decode_map(
    buf: &[u8],
    path: &Path,
    mut params: crate::octree::OctreeParams,
) -> Result<SemanticOctree, IoError> {
    let mut r = In::new(buf, path, MAP_MAGIC)?;
    params.resolution = r.f64()?;
    let c = r.u32()? as usize;
    let n = r.u32()? as usize;
    r.expect_remaining(n, 16 + 4 * c)?;
    let mut map =
        SemanticOctree::new(params, c).map_err(|e| IoError::format(path, e.to_string()))?;
    for _ in 0..n {
        let key = VoxelKey::new(r.i32()?, r.i32()?, r.i32()?);
        let log_odds = r.f32()? as f64;
        let probs = (0..c)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>, _>>()?;
        map.set(
            key,
            SemanticVoxel {
                log_odds,
                semantics: Some(probs.into_boxed_slice()),
                observation_count: 0,
            },
        );
    }
    r.finish()?;
    Ok(map)
}

/// Occupied voxels as CSV: center, key, occupancy, argmax class, probs.
pub fn map_to_csv(map: &SemanticOctree, class_names: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["x", "y", "z", "ix", "iy", "iz", "occupancy", "class"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(class_names.iter().map(|n| format!("p_{n}")));
    w.write_record(&header).expect("in-memory csv");
    for p in map.to_point_cloud() {
        let k = crate::classes::argmax(&p.class_probs);
        let mut rec = vec![
            format!("{:.4}", p.center.x),
            format!("{:.4}", p.center.y),
            format!("{:.4}", p.center.z),
            p.key.ix.to_string(),
            p.key.iy.to_string(),
            p.key.iz.to_string(),
            format!("{:.6}", p.occupancy),
            class_names.get(k).cloned().unwrap_or_else(|| k.to_string()),
        ];
        rec.extend(p.class_probs.iter().map(|q| format!("{q:.6}")));
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

/// `x y z r g b` per occupied voxel, colored by its most likely class.
pub fn map_to_colored_points(map: &SemanticOctree, palette: &[[u8; 3]]) -> String {
    let mut s = String::new();
    for p in map.to_point_cloud() {
        let [r, g, b] = palette
            .get(crate::classes::argmax(&p.class_probs))
            .copied()
            .unwrap_or([0, 0, 0]);
        s.push_str(&format!(
            "{:.4} {:.4} {:.4} {r} {g} {b}\n",
            p.center.x, p.center.y, p.center.z
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Velocity stream

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VelocityRow {
    t: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    wx: f64,
    wy: f64,
    wz: f64,
}

pub fn velocity_from_csv(text: &str, path: &Path) -> Result<Vec<VelocitySample>, IoError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<VelocityRow>().enumerate() {
        let r = row.map_err(|e| IoError::format(path, e.to_string()))?;
        let vals = [r.t, r.vx, r.vy, r.vz, r.wx, r.wy, r.wz];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(IoError::format(path, format!("non-finite value in row {}", i + 1)));
        }
        out.push(VelocitySample {
            t: r.t,
            v: Vector3::new(r.vx, r.vy, r.vz),
            w: Vector3::new(r.wx, r.wy, r.wz),
        });
    }
    if out.is_empty() {
        return Err(IoError::format(path, "empty velocity stream"));
    }
    if let Some(i) = out.windows(2).position(|w| !(w[1].t > w[0].t)) {
        return Err(IoError::format(
            path,
            format!("timestamps not strictly ascending at row {}", i + 2),
        ));
    }
    Ok(out)
}

pub fn velocity_to_csv(stream: &[VelocitySample]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in stream {
        w.serialize(VelocityRow {
            t: s.t,
            vx: s.v.x,
            vy: s.v.y,
            vz: s.v.z,
            wx: s.w.x,
            wy: s.w.y,
            wz: s.w.z,
        })
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

// ---------------------------------------------------------------------------
// Calibration

/// Calibration file layout. Transforms are row-major 4x4; `cam_from_ld`
/// maps lidar-frame points into the camera frame (x right, y down, z along
/// the optical axis) and `veh_from_ld` maps them into the vehicle frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub lidar: LidarCalibration,
    pub camera: Vec<CameraCalibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarCalibration {
    pub veh_from_ld: [[f64; 4]; 4],
    /// Horizontal angular resolution, degrees.
    pub theta_h_deg: f64,
    /// Vertical angular resolution (ring spacing), degrees.
    pub theta_v_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraCalibration {
    pub id: u32,
    pub cam_from_ld: [[f64; 4]; 4],
    pub intrinsics: FisheyeIntrinsics,
}

/// Validated calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub veh_from_ld: RigidTransform,
    pub theta_h: f64,
    pub theta_v: f64,
    pub cameras: Vec<Camera>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub cam_from_ld: RigidTransform,
    pub intrinsics: FisheyeIntrinsics,
}

impl Calibration {
    pub fn from_file(f: &CalibrationFile, path: &Path) -> Result<Self, IoError> {
        let bad = |m: String| IoError::config(path, m);
        let veh_from_ld = RigidTransform::from_row_major(&f.lidar.veh_from_ld)
            .map_err(|e| bad(format!("lidar.veh_from_ld: {e}")))?;
        for (name, v) in [("theta_h_deg", f.lidar.theta_h_deg), ("theta_v_deg", f.lidar.theta_v_deg)] {
            if !(v > 0.0 && v < 90.0) {
                return Err(bad(format!("lidar.{name} must be in (0, 90)")));
            }
        }
        if f.camera.is_empty() {
            return Err(bad("at least one camera is required".into()));
        }
        let mut cameras = Vec::with_capacity(f.camera.len());
        for (i, c) in f.camera.iter().enumerate() {
            if f.camera[..i].iter().any(|o| o.id == c.id) {
                return Err(bad(format!("duplicate camera id {}", c.id)));
            }
            let cam_from_ld = RigidTransform::from_row_major(&c.cam_from_ld)
                .map_err(|e| bad(format!("camera {}: cam_from_ld: {e}", c.id)))?;
            c.intrinsics
                .validate()
                .map_err(|e| bad(format!("camera {}: {e}", c.id)))?;
            cameras.push(Camera {
                id: c.id,
                cam_from_ld,
                intrinsics: c.intrinsics,
            });
        }
        Ok(Self {
            veh_from_ld,
            theta_h: f.lidar.theta_h_deg.to_radians(),
            theta_v: f.lidar.theta_v_deg.to_radians(),
            cameras,
        })
    }

    pub fn to_file(&self) -> CalibrationFile {
        CalibrationFile {
            lidar: LidarCalibration {
                veh_from_ld: self.veh_from_ld.to_row_major(),
                theta_h_deg: self.theta_h.to_degrees(),
                theta_v_deg: self.theta_v.to_degrees(),
            },
            camera: self
                .cameras
                .iter()
                .map(|c| CameraCalibration {
                    id: c.id,
                    cam_from_ld: c.cam_from_ld.to_row_major(),
                    intrinsics: c.intrinsics,
                })
                .collect(),
        }
    }

    pub fn camera(&self, id: u32) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let f: CalibrationFile = parse_toml(&read_text(path)?, path)?;
        Self::from_file(&f, path)
    }
}

pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T, IoError> {
    toml::from_str(text).map_err(|e| IoError::config(path, e.to_string().trim_end().to_string()))
}

pub fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config types serialize to toml")
}

/// Upper triangle helper for 3x3 covariances in CSV exports.
pub fn upper3(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::{Observation, OctreeParams};

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn score_map_round_trip_and_truncation() {
        let s = ScoreMap::new(3, 2, 2, (0..12).map(|i| i as f32 * 0.5 - 2.0).collect()).unwrap();
        let buf = encode_score_map(&s);
        assert_eq!(buf.len(), 16 + 48);
        assert_eq!(decode_score_map(&buf, p()).unwrap(), s);
        assert!(decode_score_map(&buf[..buf.len() - 1], p()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode_score_map(&bad, p()).is_err());
        let mut huge = buf;
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_score_map(&huge, p()).is_err());
    }

    #[test]
    fn label_and_superpixel_round_trip_through_pgm() {
        let l = LabelImage {
            height: 2,
            width: 3,
            labels: vec![0, 1, 2, 2, 1, 0],
        };
        let (back, c) = decode_label_image(&encode_label_image(&l, 3), p()).unwrap();
        assert_eq!((back.clone(), c), (l.clone(), 3));
        let pgm = ids_to_pgm(3, 2, &l.labels).unwrap();
        let (w, h, ids) = pgm_to_ids(&pgm).unwrap();
        assert_eq!((w, h, ids), (3, 2, l.labels.clone()));
        let palette = [[1, 2, 3], [4, 5, 6], [7, 8, 9]];
        let rgb = labels_to_rgb(&l, &palette).unwrap();
        let rgb = ppm_to_rgb(&rgb_to_ppm(&rgb).unwrap()).unwrap();
        assert_eq!(rgb_to_labels(&rgb, &palette).unwrap(), l);

        let sp = crate::semantic::grid_superpixels(5, 4, 2);
        assert_eq!(decode_superpixels(&encode_superpixels(&sp), p()).unwrap(), sp);
        assert!(ids_to_pgm(1, 1, &[70_000]).is_err());
    }

    #[test]
    fn empty_raster_is_header_only() {
        let img = RgbImage::new(0, 0);
        assert_eq!(rgb_to_ppm(&img).unwrap(), b"P6\n0 0\n255\n");
    }

    #[test]
    fn scan_round_trips() {
        let scan = LidarScan {
            packets: vec![
                LidarPacket {
                    t: 1.0,
                    points: vec![LidarPoint {
                        p: Vector3::new(1.5, -2.25, 0.5),
                        ring: 3,
                        azimuth: 0.25,
                    }],
                },
                LidarPacket {
                    t: 1.001,
                    points: vec![
                        LidarPoint {
                            p: Vector3::new(0.5, 0.5, 0.5),
                            ring: 0,
                            azimuth: 1.0,
                        },
                        LidarPoint {
                            p: Vector3::new(-4.0, 8.0, 1.0),
                            ring: 15,
                            azimuth: 2.0,
                        },
                    ],
                },
            ],
        };
        assert_eq!(decode_scan(&encode_scan(&scan), p()).unwrap(), scan);
        assert_eq!(scan_from_csv(&scan_to_csv(&scan), p()).unwrap(), scan);
        assert_eq!(decode_truth(&encode_truth(&[3, 1, 4]), p()).unwrap(), vec![3, 1, 4]);
    }

    #[test]
    fn labeled_round_trip() {
        let c = LabeledCloud {
            scan: 4,
            camera: 1,
            t_ref: 12.5,
            classes: 2,
            points: vec![LabeledRecord {
                packet: 3,
                index: 99,
                xyz: Vector3::new(1.0, 2.0, 3.0),
                probs: vec![0.25, 0.75],
                uv: Vector2::new(10.5, 20.25),
                cov_uv: Matrix2::new(2.0, 0.5, 0.5, 1.0),
            }],
        };
        assert_eq!(decode_labeled(&encode_labeled(&c), p()).unwrap(), c);
        let csv = labeled_to_csv(&c, &["a".into(), "b".into()]);
        assert!(csv.starts_with("packet,index,x,y,z,p_a,p_b,u,v"));
    }

    #[test]
    fn map_round_trip() {
        let mut m = SemanticOctree::new(OctreeParams::default(), 2).unwrap();
        m.apply(VoxelKey::new(1, -2, 3), Observation::Hit, Some(&[0.75, 0.25]));
        m.apply(VoxelKey::new(0, 0, 0), Observation::Miss, None);
        let buf = encode_map(&m);
        let back = decode_map(&buf, p(), OctreeParams::default()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(encode_map(&back), buf);
        assert!(map_to_csv(&back, &["a".into(), "b".into()]).contains("0.150"));
        assert_eq!(map_to_colored_points(&back, &[[9, 9, 9], [0, 0, 0]]).lines().count(), 1);
    }

    #[test]
    fn velocity_csv_validation() {
        let ok = "t,vx,vy,vz,wx,wy,wz\n0,1,0,0,0,0,0.1\n0.01,1,0,0,0,0,0.1\n";
        let s = velocity_from_csv(ok, p()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(velocity_from_csv(&velocity_to_csv(&s), p()).unwrap(), s);
        assert!(velocity_from_csv("t,vx,vy,vz,wx,wy\n0,1,0,0,0,0\n", p()).is_err());
        assert!(velocity_from_csv("t,vx,vy,vz,wx,wy,wz\n0,1,0,0,0,0,0\n0,1,0,0,0,0,0\n", p()).is_err());
    }

    #[test]
    fn calibration_rejects_missing_keys() {
        let calib = Calibration {
            veh_from_ld: RigidTransform::translation(0.0, 0.0, 1.8),
            theta_h: 0.1f64.to_radians(),
            theta_v: 2f64.to_radians(),
            cameras: vec![Camera {
                id: 0,
                cam_from_ld: RigidTransform::identity(),
                intrinsics: FisheyeIntrinsics::ideal(500.0, 64, 48),
            }],
        };
        let text = to_toml(&calib.to_file());
        let back: CalibrationFile = parse_toml(&text, p()).unwrap();
        let back = Calibration::from_file(&back, p()).unwrap();
        assert_eq!(back.cameras, calib.cameras);
        assert!((back.theta_v - calib.theta_v).abs() < 1e-15);
        let missing = text.replace("theta_h_deg", "# theta_h_deg");
        assert!(matches!(
            parse_toml::<CalibrationFile>(&missing, p()),
            Err(IoError::Config { .. })
        ));
        let no_k4: String = text.lines().filter(|l| !l.starts_with("k4")).collect::<Vec<_>>().join("\n");
        assert!(parse_toml::<CalibrationFile>(&no_k4, p()).is_err());
    }
}
