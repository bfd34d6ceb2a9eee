//! Dataset directory layout:
//!
//! ```text
//! meta.json        fps, resolution, frame count, background, lip width
//! poses.json       per-frame quaternion, translation and intrinsics
//! tracks.json      2-D keypoint tracks
//! template.json    head-local landmark template (optional)
//! cond.csv         frame, lip_0.., then the 52 blendshape columns
//! frames/NNNNNN.png
//! masks/face_NNNNNN.png, masks/neck_NNNNNN.png (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, HeadPose};
use crate::error::{Error, Result};
use crate::face_sync::{windowed_lip_features, BlendshapeCoeffs, ConditioningPipeline, BLENDSHAPE_NAMES};
use crate::frame::{FrameBuffer, RegionMask};
use crate::head_sync::{KeypointTracks, LandmarkTemplate};
use crate::synth_scene::{emit_tracks, SyntheticScene, TrackNoise};
use crate::trainer::TrainingSample;

pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    #[serde(default)]
    pub background: [f64; 3],
    pub lip_width: usize,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    rotation_wxyz: [f64; 4],
    translation: [f64; 3],
    focal: f64,
    cx: f64,
    cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    frames: Vec<PoseRecord>,
}

/// Per-frame camera: pose and intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameCamera {
    pub pose: HeadPose,
    pub intr: CameraIntrinsics,
}

/// Per-frame conditioning inputs as stored in `cond.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondTable {
    pub lip: Vec<Vec<f64>>,
    pub blendshapes: Vec<BlendshapeCoeffs>,
}

impl CondTable {
    pub fn len(&self) -> usize {
        self.lip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lip.is_empty()
    }

    /// Field conditioning for every frame.
    pub fn features(&self, pipeline: &ConditioningPipeline, lip_window: usize) -> Result<Vec<crate::ConditioningFeatures>> {
        (0..self.len())
            .map(|i| pipeline.features(&windowed_lip_features(&self.lip, i, lip_window)?, &self.blendshapes[i]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub cameras: Vec<FrameCamera>,
    pub tracks: KeypointTracks,
    pub template: Option<LandmarkTemplate>,
    pub cond: CondTable,
    pub frames: Vec<FrameBuffer>,
    pub face_masks: Option<Vec<RegionMask>>,
    pub neck_masks: Option<Vec<RegionMask>>,
}

pub fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let m: DatasetMeta = read_json(path)?;
    if m.width == 0 || m.height == 0 || m.frames == 0 || !(m.fps > 0.0) {
        return Err(Error::format(path, "resolution, frame count and fps must be positive"));
    }
    if m.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::format(path, "background outside [0, 1]"));
    }
    Ok(m)
}

pub fn read_cameras(path: &Path) -> Result<Vec<FrameCamera>> {
    let file: PoseFile = read_json(path)?;
    file.frames
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let pose = HeadPose::from_wxyz(r.rotation_wxyz, r.translation)
                .map_err(|e| Error::format(path, format!("frame {i}: {e}")))?;
            let intr = CameraIntrinsics::new(r.focal, r.cx, r.cy)
                .map_err(|e| Error::format(path, format!("frame {i}: {e}")))?;
            Ok(FrameCamera { pose, intr })
        })
        .collect()
}

pub fn write_cameras(path: &Path, cameras: &[FrameCamera]) -> Result<()> {
    let frames = cameras
        .iter()
        .map(|c| PoseRecord {
            rotation_wxyz: c.pose.wxyz(),
            translation: c.pose.translation.into(),
            focal: c.intr.focal,
            cx: c.intr.cx,
            cy: c.intr.cy,
        })
        .collect();
    write_json(path, &PoseFile { frames })
}

pub fn read_tracks(path: &Path) -> Result<KeypointTracks> {
    let t: KeypointTracks = read_json(path)?;
    t.validate().map_err(|e| Error::format(path, e))?;
    Ok(t)
}

pub fn write_tracks(path: &Path, tracks: &KeypointTracks) -> Result<()> {
    write_json(path, tracks)
}

pub fn read_template(path: &Path) -> Result<LandmarkTemplate> {
    let t: LandmarkTemplate = read_json(path)?;
    t.validate().map_err(|e| Error::format(path, e))?;
    Ok(t)
}

pub fn write_template(path: &Path, template: &LandmarkTemplate) -> Result<()> {
    write_json(path, template)
}

pub fn read_cond(path: &Path, lip_width: usize) -> Result<CondTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let header = rdr.headers().map_err(|e| Error::format(path, e))?.clone();
    let expected = cond_header(lip_width);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::format(
            path,
            format!("expected {} columns: frame, lip_0..lip_{}, then the blendshape names", expected.len(), lip_width.saturating_sub(1)),
        ));
    }
    let mut lip = Vec::new();
    let mut blendshapes = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("row {row}: {e}")))?;
        if vals[0] != row as f64 {
            return Err(Error::format(path, format!("row {row} has frame index {}", vals[0])));
        }
        lip.push(vals[1..1 + lip_width].to_vec());
        blendshapes.push(
            BlendshapeCoeffs::new(vals[1 + lip_width..].to_vec()).map_err(|e| Error::format(path, format!("row {row}: {e}")))?,
        );
    }
    Ok(CondTable { lip, blendshapes })
}

fn cond_header(lip_width: usize) -> Vec<String> {
    let mut h = vec!["frame".to_string()];
    h.extend((0..lip_width).map(|i| format!("lip_{i}")));
    h.extend(BLENDSHAPE_NAMES.iter().map(|s| s.to_string()));
    h
}

pub fn write_cond(path: &Path, cond: &CondTable) -> Result<()> {
    let lip_width = cond.lip.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(cond_header(lip_width)).map_err(|e| Error::format(path, e))?;
    for (i, (l, b)) in cond.lip.iter().zip(&cond.blendshapes).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(l.iter().chain(b.values()).map(|v| v.to_string()));
        w.write_record(rec).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// PNG frames `NNNNNN.png` in index order, starting at zero.
pub fn read_frames(dir: &Path) -> Result<Vec<FrameBuffer>> {
    let count = count_indexed(dir, "")?;
    (0..count)
        .into_par_iter()
        .map(|i| FrameBuffer::load_png(dir.join(frame_name(i))))
        .collect()
}

fn count_indexed(dir: &Path, prefix: &str) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let name = e.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(".png")) {
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                n += 1;
            }
        }
    }
    for i in 0..n {
        let p = dir.join(format!("{prefix}{}", frame_name(i)));
        if !p.exists() {
            return Err(Error::format(p, "frame sequence has a gap"));
        }
    }
    Ok(n)
}

pub fn write_frames(dir: &Path, frames: &[FrameBuffer]) -> Result<()> {
    create_dir(dir)?;
    frames
        .par_iter()
        .enumerate()
        .try_for_each(|(i, f)| f.save_png(dir.join(frame_name(i))))
}

fn read_masks(dir: &Path, prefix: &str, count: usize) -> Result<Option<Vec<RegionMask>>> {
    if !dir.join(format!("{prefix}{}", frame_name(0))).exists() {
        return Ok(None);
    }
    (0..count)
        .into_par_iter()
        .map(|i| RegionMask::load_png(dir.join(format!("{prefix}{}", frame_name(i)))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn check_count(path: PathBuf, what: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::format(path, format!("{found} {what} but meta.json declares {expected} frames")))
    }
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.meta.frames
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = read_meta(&dir.join("meta.json"))?;
        let n = meta.frames;
        let cameras = read_cameras(&dir.join("poses.json"))?;
        check_count(dir.join("poses.json"), "poses", n, cameras.len())?;
        let tracks = read_tracks(&dir.join("tracks.json"))?;
        check_count(dir.join("tracks.json"), "track frames", n, tracks.num_frames())?;
        let template_path = dir.join("template.json");
        let template = if template_path.exists() {
            Some(read_template(&template_path)?)
        } else {
            None
        };
        let cond = read_cond(&dir.join("cond.csv"), meta.lip_width)?;
        check_count(dir.join("cond.csv"), "conditioning rows", n, cond.len())?;
        let frames = read_frames(&dir.join("frames"))?;
        check_count(dir.join("frames"), "frame images", n, frames.len())?;
        for (i, f) in frames.iter().enumerate() {
            if f.dims() != (meta.width, meta.height) {
                return Err(Error::format(
                    dir.join("frames").join(frame_name(i)),
                    format!("{:?} differs from meta.json resolution", f.dims()),
                ));
            }
        }
        let masks = dir.join("masks");
        let (face_masks, neck_masks) = if masks.is_dir() {
            (read_masks(&masks, "face_", n)?, read_masks(&masks, "neck_", n)?)
        } else {
            (None, None)
        };
        Ok(Self {
            meta,
            cameras,
            tracks,
            template,
            cond,
            frames,
            face_masks,
            neck_masks,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        write_cameras(&dir.join("poses.json"), &self.cameras)?;
        write_tracks(&dir.join("tracks.json"), &self.tracks)?;
        if let Some(t) = &self.template {
            write_template(&dir.join("template.json"), t)?;
        }
        write_cond(&dir.join("cond.csv"), &self.cond)?;
        write_frames(&dir.join("frames"), &self.frames)?;
        let masks = dir.join("masks");
        for (prefix, set) in [("face_", &self.face_masks), ("neck_", &self.neck_masks)] {
            if let Some(set) = set {
                create_dir(&masks)?;
                set.par_iter()
                    .enumerate()
                    .try_for_each(|(i, m)| m.save_png(masks.join(format!("{prefix}{}", frame_name(i)))))?;
            }
        }
        Ok(())
    }

    /// Dataset of a synthetic scene: ground-truth cameras, tracks with
    /// `noise`, conditioning signals, frames and masks.
    pub fn from_scene(scene: &SyntheticScene, noise: &TrackNoise, seed: u64) -> Result<Self> {
        let spec = &scene.spec;
        let n = scene.trajectory.len();
        let renders: Vec<_> = (0..n)
            .into_par_iter()
            .map(|i| scene.reference_render(i, spec.width, spec.height))
            .collect::<Result<_>>()?;
        let (tracks, _) = emit_tracks(scene, noise, seed)?;
        let intr = scene.intr_at(spec.width, spec.height)?;
        Ok(Self {
            meta: DatasetMeta {
                fps: DEFAULT_FPS,
                width: spec.width,
                height: spec.height,
                frames: n,
                background: spec.background,
                lip_width: spec.lip_width,
            },
            cameras: scene.trajectory.iter().map(|&pose| FrameCamera { pose, intr }).collect(),
            tracks,
            template: Some(scene.template()),
            cond: CondTable {
                lip: (0..n).map(|i| scene.lip_features(i)).collect(),
                blendshapes: (0..n).map(|i| scene.blendshapes(i)).collect(),
            },
            face_masks: Some(renders.iter().map(|r| r.face_mask.clone()).collect()),
            neck_masks: Some(renders.iter().map(|r| r.neck_mask.clone()).collect()),
            frames: renders.into_iter().map(|r| r.image).collect(),
        })
    }

    pub fn training_samples(&self, pipeline: &ConditioningPipeline, lip_window: usize) -> Result<Vec<TrainingSample>> {
        let cond = self.cond.features(pipeline, lip_window)?;
        Ok(self
            .frames
            .iter()
            .zip(&self.cameras)
            .zip(cond)
            .map(|((frame, cam), cond)| TrainingSample {
                frame: frame.clone(),
                pose: cam.pose,
                intr: cam.intr,
                cond,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_scene::{generate_scene, SceneSpec};

    fn small_scene() -> SyntheticScene {
        let spec = SceneSpec {
            frames: 4,
            width: 16,
            height: 12,
            ..Default::default()
        };
        generate_scene(&spec, 2).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::from_scene(&small_scene(), &TrackNoise::default(), 0).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.tracks, ds.tracks);
        assert_eq!(back.template, ds.template);
        assert_eq!(back.cond, ds.cond);
        assert_eq!(back.face_masks, ds.face_masks);
        for (a, b) in back.cameras.iter().zip(&ds.cameras) {
            assert_eq!(a.intr, b.intr);
            assert!((a.pose.translation - b.pose.translation).norm() == 0.0);
            assert!(a.pose.rotation().angle_to(b.pose.rotation()) < 1e-12);
        }
        for (a, b) in back.frames.iter().zip(&ds.frames) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_poses_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::from_scene(&small_scene(), &TrackNoise::default(), 0)
            .unwrap()
            .save(dir.path())
            .unwrap();
        fs::remove_file(dir.path().join("poses.json")).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("poses.json"), "{err}");
    }

    #[test]
    fn inconsistent_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::from_scene(&small_scene(), &TrackNoise::default(), 0).unwrap();
        ds.cameras.pop();
        ds.save(dir.path()).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("poses.json") && err.contains("3 poses"), "{err}");
    }
}
