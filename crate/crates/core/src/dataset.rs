//! On-disk formats for scans, poses and box annotations.
//!
//! * `NNNNNN.xyzl` — little-endian `u32` count followed by `count` records of
//!   `(f32 x, f32 y, f32 z, u32 label)`.
//! * pose file — one line per frame, 12 numbers, row-major `[R | t]`.
//! * box file — `frame class cx cy cz ex ey ez yaw` per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Frame, Obb, Point3, Pose, Vec3};

const RECORD_BYTES: usize = 16;

pub fn write_xyzl(path: &Path, points: &[Point3], labels: &[u32]) -> Result<()> {
    if points.len() != labels.len() {
        return Err(Error::param("point/label count mismatch"));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(points.len() as u32).to_le_bytes())?;
    for (p, l) in points.iter().zip(labels) {
        for v in [p.x, p.y, p.z] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_xyzl(path: &Path) -> Result<(Vec<Point3>, Vec<u32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::input(path, e.to_string()))?
        .read_to_end(&mut bytes)?;
    parse_xyzl(&bytes).map_err(|e| Error::input(path, e.to_string()))
}

pub fn parse_xyzl(bytes: &[u8]) -> Result<(Vec<Point3>, Vec<u32>)> {
    let header: [u8; 4] = bytes
        .get(..4)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| Error::format("xyzl file shorter than its header"))?;
    let count = u32::from_le_bytes(header) as usize;
    let body = &bytes[4..];
    if body.len() != count * RECORD_BYTES {
        return Err(Error::format(format!(
            "xyzl header says {count} points but body holds {} bytes",
            body.len()
        )));
    }
    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for rec in body.chunks_exact(RECORD_BYTES) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
        points.push(Point3::new(f(0), f(4), f(8)));
        labels.push(u32::from_le_bytes(rec[12..16].try_into().unwrap()));
    }
    Ok((points, labels))
}

pub fn frame_file_name(index: u64) -> String {
    format!("{index:06}.xyzl")
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for pose in poses {
        let line: Vec<String> = pose.to_row_major().iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let file = fs::File::open(path).map_err(|e| Error::input(path, e.to_string()))?;
    let mut poses = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| Error::input(path, format!("line {}: {e}", lineno + 1)))?;
        let arr: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| {
            Error::input(path, format!("line {}: expected 12 values, got {}", lineno + 1, v.len()))
        })?;
        let pose = Pose::from_row_major(&arr)
            .map_err(|e| Error::input(path, format!("line {}: {e}", lineno + 1)))?;
        poses.push(pose);
    }
    Ok(poses)
}

/// One annotated box in the sensor frame of `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxAnnotation {
    pub frame: u64,
    pub obb: Obb,
    pub yaw: f64,
}

pub fn write_boxes(path: &Path, boxes: &[BoxAnnotation]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for b in boxes {
        let c = b.obb.pose.translation;
        let e = b.obb.extents();
        writeln!(
            w,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            b.frame, b.obb.class_id, c.x, c.y, c.z, e.x, e.y, e.z, b.yaw
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxAnnotation>> {
    let file = fs::File::open(path).map_err(|e| Error::input(path, e.to_string()))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::input(path, format!("line {}: {msg}", lineno + 1));
        if fields.len() != 9 {
            return Err(bad(format!("expected 9 fields, got {}", fields.len())));
        }
        let frame: u64 = fields[0].parse().map_err(|e| bad(format!("{e}")))?;
        let class: u32 = fields[1].parse().map_err(|e| bad(format!("{e}")))?;
        let nums: Vec<f64> = fields[2..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("{e}")))?;
        let obb = Obb::from_annotation(
            Point3::new(nums[0], nums[1], nums[2]),
            Vec3::new(nums[3], nums[4], nums[5]),
            nums[6],
            class,
        )
        .map_err(|e| bad(e.to_string()))?;
        out.push(BoxAnnotation {
            frame,
            obb,
            yaw: nums[6],
        });
    }
    Ok(out)
}

/// A directory of `NNNNNN.xyzl` scans plus a pose file.
#[derive(Debug, Clone)]
pub struct FrameSource {
    frames: Vec<(u64, PathBuf)>,
    poses: Vec<Pose>,
}

impl FrameSource {
    pub fn open(frame_dir: &Path, pose_file: &Path) -> Result<Self> {
        let entries = fs::read_dir(frame_dir).map_err(|e| Error::input(frame_dir, e.to_string()))?;
        let mut frames = Vec::new();
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("xyzl") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let index: u64 = stem
                .parse()
                .map_err(|_| Error::input(&path, "frame file name is not a frame index"))?;
            frames.push((index, path));
        }
        if frames.is_empty() {
            return Err(Error::input(frame_dir, "no .xyzl frame files found"));
        }
        frames.sort();
        if !pose_file.exists() {
            return Err(Error::input(pose_file, "pose file not found"));
        }
        let poses = read_poses(pose_file)?;
        if let Some((idx, path)) = frames.iter().find(|(i, _)| *i as usize >= poses.len()) {
            return Err(Error::input(
                path,
                format!("frame {idx} has no pose ({} poses in file)", poses.len()),
            ));
        }
        Ok(Self { frames, poses })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.frames.iter().map(|(i, _)| *i)
    }

    pub fn pose(&self, index: u64) -> Option<&Pose> {
        self.poses.get(index as usize)
    }

    pub fn load(&self, position: usize) -> Result<Frame> {
        let (index, path) = &self.frames[position];
        let (points, labels) = read_xyzl(path)?;
        Frame::new(*index, points, labels, self.poses[*index as usize])
            .map_err(|e| Error::input(path, e.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        (0..self.frames.len()).map(|i| self.load(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyzl_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000003.xyzl");
        let pts = vec![Point3::new(0.5, -1.25, 3.0), Point3::new(1e-3, 2.0, -7.5)];
        write_xyzl(&path, &pts, &[4, 7]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 4 + 2 * 16);
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        let (p, l) = read_xyzl(&path).unwrap();
        assert_eq!(l, vec![4, 7]);
        assert_eq!(p[0], pts[0]);
        assert_eq!(p[1].x, 1e-3f32 as f64);
    }

    #[test]
    fn truncated_xyzl_is_rejected() {
        let mut bytes = 3u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[0u8; 20]);
        assert!(matches!(parse_xyzl(&bytes), Err(Error::Format(_))));
        assert!(parse_xyzl(&[1, 2]).is_err());
    }

    #[test]
    fn poses_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let poses = vec![
            Pose::identity(),
            Pose::from_yaw(0.25, Vec3::new(3.0, -1.0, 1.7)),
        ];
        write_poses(&path, &poses).unwrap();
        let back = read_poses(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in poses.iter().zip(&back) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-8);
            assert!((a.translation - b.translation).norm() < 1e-8);
        }
    }

    #[test]
    fn bad_pose_line_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        let err = read_poses(&path).unwrap_err();
        assert!(err.to_string().contains("poses.txt"), "{err}");
    }

    #[test]
    fn boxes_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.txt");
        let obb = Obb::from_annotation(
            Point3::new(4.0, -2.0, 0.8),
            Vec3::new(4.2, 1.8, 1.5),
            0.3,
            2,
        )
        .unwrap();
        write_boxes(&path, &[BoxAnnotation { frame: 6, obb, yaw: 0.3 }]).unwrap();
        let back = read_boxes(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].frame, 6);
        assert_eq!(back[0].obb.class_id, 2);
        assert!((back[0].obb.extents() - obb.extents()).norm() < 1e-6);
    }

    #[test]
    fn frame_source_errors() {
        let dir = tempfile::tempdir().unwrap();
        let poses = dir.path().join("poses.txt");
        assert!(matches!(
            FrameSource::open(dir.path(), &poses),
            Err(Error::Input { .. })
        ));
        write_xyzl(&dir.path().join(frame_file_name(0)), &[Point3::origin()], &[0]).unwrap();
        let err = FrameSource::open(dir.path(), &poses).unwrap_err();
        assert!(err.to_string().contains("poses.txt"), "{err}");
        write_poses(&poses, &[Pose::identity()]).unwrap();
        let src = FrameSource::open(dir.path(), &poses).unwrap();
        assert_eq!(src.len(), 1);
        assert_eq!(src.load(0).unwrap().len(), 1);
    }
}
