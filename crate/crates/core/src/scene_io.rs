//! Scene-directory ingestion and emission: frame-ordered PNGs under
//! `images/` plus a `cameras.txt` holding one line per frame with the
//! intrinsics and the world-to-camera 3x4 extrinsics, and a scene
//! description as JSON plus a binary point blob.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Rotation, Translation};
use crate::imaging::{load_png, save_png, Image};
use crate::synth::{Camera, Scene, TextureWave, TexturedPlane};

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const IMAGES_DIR: &str = "images";

/// One frame of a scene directory: identity plus full camera model. A frame
/// may have a camera line without a stored image (a render target, for
/// example); `has_image` records which, and the camera's `h`/`w` are zero
/// when no image backs them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub frame_id: u64,
    pub camera: Camera,
    pub has_image: bool,
}

/// A loaded scene directory; frames keep the order of `cameras.txt`.
#[derive(Debug, Clone)]
pub struct SceneDir {
    pub root: PathBuf,
    pub frames: Vec<SceneFrame>,
}

fn image_file_name(frame_id: u64) -> String {
    format!("frame_{frame_id:06}.png")
}

/// Shortest-round-trip text for one camera: id, fx fy cx cy, then the 3x4
/// `[R | t]` row-major. Parsing recovers every float bitwise.
pub fn format_camera_line(frame_id: u64, cam: &Camera) -> String {
    let k = &cam.k;
    let r = cam.pose.r.row_major();
    let t = cam.pose.t.vector();
    format!(
        "{frame_id} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        k.fx, k.fy, k.cx, k.cy,
        r[0], r[1], r[2], t.x,
        r[3], r[4], r[5], t.y,
        r[6], r[7], r[8], t.z,
    )
}

/// Parses one camera line; `h`/`w` come from the frame's image, so the
/// caller supplies them.
pub fn parse_camera_line(line: &str, h: usize, w: usize) -> Result<SceneFrame> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 17 {
        return Err(Error::MalformedFile {
            path: CAMERAS_FILE.into(),
            reason: format!("camera line needs 17 fields, got {}", fields.len()),
        });
    }
    let bad = |what: &str| Error::MalformedFile {
        path: CAMERAS_FILE.into(),
        reason: format!("unparseable {what} in line {line:?}"),
    };
    let frame_id: u64 = fields[0].parse().map_err(|_| bad("frame id"))?;
    let mut vals = [0.0f64; 16];
    for (i, v) in vals.iter_mut().enumerate() {
        *v = fields[i + 1].parse().map_err(|_| bad("float"))?;
    }
    let k = Intrinsics::new(vals[0], vals[1], vals[2], vals[3])?;
    let m = Matrix3::new(
        vals[4], vals[5], vals[6],
        vals[8], vals[9], vals[10],
        vals[12], vals[13], vals[14],
    );
    let pose = Pose::new(
        Rotation::try_from_matrix(m)?,
        Translation::new(vals[7], vals[11], vals[15]),
    );
    Ok(SceneFrame {
        frame_id,
        camera: Camera { k, pose, h, w },
        has_image: true,
    })
}

/// Writes a scene directory: every entry becomes one PNG and one camera
/// line, in the given order.
pub fn save_scene_dir(root: &Path, frames: &[SceneFrame], images: &[Image]) -> Result<()> {
    if frames.len() != images.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} camera frames but {} images",
            frames.len(),
            images.len()
        )));
    }
    let img_dir = root.join(IMAGES_DIR);
    std::fs::create_dir_all(&img_dir)?;
    let mut lines = String::new();
    for (frame, img) in frames.iter().zip(images) {
        save_png(img, &img_dir.join(image_file_name(frame.frame_id)))?;
        lines.push_str(&format_camera_line(frame.frame_id, &frame.camera));
        lines.push('\n');
    }
    std::fs::write(root.join(CAMERAS_FILE), lines)?;
    Ok(())
}

impl SceneDir {
    /// Reads `cameras.txt` and checks that every listed frame has its image
    /// and no stray images exist.
    pub fn load(root: &Path) -> Result<SceneDir> {
        let cams_path = root.join(CAMERAS_FILE);
        let text = std::fs::read_to_string(&cams_path).map_err(|e| Error::MalformedFile {
            path: cams_path.display().to_string(),
            reason: e.to_string(),
        })?;
        let img_dir = root.join(IMAGES_DIR);
        let mut frames = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut frame = parse_camera_line(line, 0, 0).map_err(|e| match e {
                Error::MalformedFile { reason, .. } => Error::MalformedFile {
                    path: cams_path.display().to_string(),
                    reason: format!("line {}: {reason}", ln + 1),
                },
                other => other,
            })?;
            let img_path = img_dir.join(image_file_name(frame.frame_id));
            match image::image_dimensions(&img_path) {
                Ok((w, h)) => {
                    frame.camera.h = h as usize;
                    frame.camera.w = w as usize;
                }
                Err(_) => {
                    frame.camera.h = 0;
                    frame.camera.w = 0;
                    frame.has_image = false;
                }
            }
            frames.push(frame);
        }
        if frames.is_empty() {
            return Err(Error::MalformedFile {
                path: cams_path.display().to_string(),
                reason: "no camera lines".into(),
            });
        }
        // Every stored image must be listed; target-only frames may lack one.
        if img_dir.is_dir() {
            for entry in std::fs::read_dir(&img_dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|x| x == "png")
                    && !frames
                        .iter()
                        .any(|f| image_file_name(f.frame_id) == path.file_name().unwrap().to_string_lossy())
                {
                    return Err(Error::MalformedFile {
                        path: path.display().to_string(),
                        reason: "image has no camera line".into(),
                    });
                }
            }
        }
        Ok(SceneDir {
            root: root.to_path_buf(),
            frames,
        })
    }

    pub fn image_path(&self, frame_id: u64) -> PathBuf {
        self.root.join(IMAGES_DIR).join(image_file_name(frame_id))
    }

    pub fn load_image(&self, index: usize) -> Result<Image> {
        let frame = self.frames.get(index).ok_or_else(|| {
            Error::BadRange(format!(
                "frame index {index} out of range ({} frames)",
                self.frames.len()
            ))
        })?;
        if !frame.has_image {
            return Err(Error::MalformedFile {
                path: self.image_path(frame.frame_id).display().to_string(),
                reason: format!("frame {} has no stored image", frame.frame_id),
            });
        }
        load_png(&self.image_path(frame.frame_id))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WaveJson {
    amp: [f64; 3],
    freq_u: f64,
    freq_v: f64,
    phase: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlaneJson {
    origin: [f64; 3],
    axis_u: [f64; 3],
    axis_v: [f64; 3],
    half_extent_u: f64,
    half_extent_v: f64,
    base_color: [f64; 3],
    waves: Vec<WaveJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneJson {
    seed: u64,
    n_points: usize,
    colors: Vec<[f64; 3]>,
    planes: Vec<PlaneJson>,
}

fn vec3_to_arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Writes a scene as `<stem>.json` (everything but point coordinates) and
/// `<stem>.bin` (point xyz triplets, f64 little-endian).
pub fn save_scene(scene: &Scene, json_path: &Path, points_path: &Path) -> Result<()> {
    let desc = SceneJson {
        seed: scene.seed,
        n_points: scene.points.len(),
        colors: scene.colors.clone(),
        planes: scene
            .planes
            .iter()
            .map(|p| PlaneJson {
                origin: vec3_to_arr(&p.origin),
                axis_u: vec3_to_arr(&p.axis_u),
                axis_v: vec3_to_arr(&p.axis_v),
                half_extent_u: p.half_extent_u,
                half_extent_v: p.half_extent_v,
                base_color: p.base_color,
                waves: p
                    .waves
                    .iter()
                    .map(|w| WaveJson {
                        amp: w.amp,
                        freq_u: w.freq_u,
                        freq_v: w.freq_v,
                        phase: w.phase,
                    })
                    .collect(),
            })
            .collect(),
    };
    std::fs::write(
        json_path,
        serde_json::to_string_pretty(&desc).expect("scene serializes"),
    )?;
    let mut blob = std::fs::File::create(points_path)?;
    for p in &scene.points {
        for v in [p.x, p.y, p.z] {
            blob.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_scene(json_path: &Path, points_path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::MalformedFile {
        path: json_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let desc: SceneJson = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: json_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut raw = Vec::new();
    std::fs::File::open(points_path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::MalformedFile {
            path: points_path.display().to_string(),
            reason: e.to_string(),
        })?;
    if raw.len() != desc.n_points * 24 {
        return Err(Error::MalformedFile {
            path: points_path.display().to_string(),
            reason: format!(
                "expected {} bytes for {} points, found {}",
                desc.n_points * 24,
                desc.n_points,
                raw.len()
            ),
        });
    }
    let mut points = Vec::with_capacity(desc.n_points);
    for i in 0..desc.n_points {
        let f = |k: usize| {
            f64::from_le_bytes(raw[i * 24 + k * 8..i * 24 + (k + 1) * 8].try_into().unwrap())
        };
        points.push(Vector3::new(f(0), f(1), f(2)));
    }
    Ok(Scene {
        seed: desc.seed,
        points,
        colors: desc.colors,
        planes: desc
            .planes
            .into_iter()
            .map(|p| TexturedPlane {
                origin: Vector3::from(p.origin),
                axis_u: Vector3::from(p.axis_u),
                axis_v: Vector3::from(p.axis_v),
                half_extent_u: p.half_extent_u,
                half_extent_v: p.half_extent_v,
                base_color: p.base_color,
                waves: p
                    .waves
                    .into_iter()
                    .map(|w| TextureWave {
                        amp: w.amp,
                        freq_u: w.freq_u,
                        freq_v: w.freq_v,
                        phase: w.phase,
                    })
                    .collect(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_scene, render_gt, SceneKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_camera(rng: &mut ChaCha8Rng, hw: usize) -> Camera {
        let r = crate::geometry::random_rotation(rng);
        Camera {
            k: Intrinsics::new(
                50.0 + rng.random::<f64>() * 50.0,
                50.0 + rng.random::<f64>() * 50.0,
                hw as f64 / 2.0 + rng.random::<f64>(),
                hw as f64 / 2.0 + rng.random::<f64>(),
            )
            .unwrap(),
            pose: Pose::new(
                r,
                Translation::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ),
            ),
            h: hw,
            w: hw,
        }
    }

    #[test]
    fn camera_line_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in 0..100 {
            let cam = random_camera(&mut rng, 64);
            let line = format_camera_line(id, &cam);
            let frame = parse_camera_line(&line, 64, 64).unwrap();
            assert_eq!(frame.frame_id, id);
            assert_eq!(frame.camera.k, cam.k);
            assert_eq!(frame.camera.pose.r.matrix(), cam.pose.r.matrix());
            assert_eq!(frame.camera.pose.t.vector(), cam.pose.t.vector());
            assert_eq!(format_camera_line(id, &frame.camera), line);
        }
    }

    #[test]
    fn line_field_count_enforced() {
        assert!(matches!(
            parse_camera_line("0 1 2 3", 8, 8),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn nonpositive_focal_rejected() {
        let cam = random_camera(&mut ChaCha8Rng::seed_from_u64(2), 32);
        let line = format_camera_line(0, &cam).replacen(
            &format!("{}", cam.k.fx),
            "-5.0",
            1,
        );
        assert!(parse_camera_line(&line, 32, 32).is_err());
    }

    fn sample_dir(root: &Path) -> Vec<SceneFrame> {
        let scene = make_scene(3, SceneKind::TexturedPlane, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<SceneFrame> = (0..3)
            .map(|i| {
                let mut cam = random_camera(&mut rng, 32);
                // Keep the scene in front of the camera for the render.
                cam.pose = Pose::new(
                    Rotation::identity(),
                    Translation::new(0.1 * i as f64, 0.0, 0.0),
                );
                SceneFrame {
                    frame_id: i as u64 * 7,
                    camera: cam,
                    has_image: true,
                }
            })
            .collect();
        let images: Vec<Image> = frames
            .iter()
            .map(|f| render_gt(&scene, &f.camera).unwrap().0)
            .collect();
        save_scene_dir(root, &frames, &images).unwrap();
        frames
    }

    #[test]
    fn scene_dir_round_trips() {
        let dir = tempdir().unwrap();
        let written = sample_dir(dir.path());
        let loaded = SceneDir::load(dir.path()).unwrap();
        assert_eq!(loaded.frames.len(), written.len());
        for (a, b) in loaded.frames.iter().zip(&written) {
            assert_eq!(a, b);
        }
        let img = loaded.load_image(1).unwrap();
        assert_eq!((img.h(), img.w()), (32, 32));

        // Write -> read -> write reproduces cameras.txt byte for byte.
        let first = std::fs::read(dir.path().join(CAMERAS_FILE)).unwrap();
        let dir2 = tempdir().unwrap();
        let images: Vec<Image> = (0..loaded.frames.len())
            .map(|i| loaded.load_image(i).unwrap())
            .collect();
        save_scene_dir(dir2.path(), &loaded.frames, &images).unwrap();
        let second = std::fs::read(dir2.path().join(CAMERAS_FILE)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_cameras_file_is_diagnosed() {
        let dir = tempdir().unwrap();
        let err = SceneDir::load(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(CAMERAS_FILE), "diagnostic was {msg}");
    }

    #[test]
    fn missing_image_loads_as_target_only_frame() {
        let dir = tempdir().unwrap();
        sample_dir(dir.path());
        std::fs::remove_file(dir.path().join(IMAGES_DIR).join("frame_000007.png")).unwrap();
        let loaded = SceneDir::load(dir.path()).unwrap();
        assert!(!loaded.frames[1].has_image);
        assert_eq!(loaded.frames[1].camera.h, 0);
        let err = loaded.load_image(1).unwrap_err();
        assert!(err.to_string().contains("frame_000007"), "got {err}");
    }

    #[test]
    fn stray_image_is_diagnosed() {
        let dir = tempdir().unwrap();
        sample_dir(dir.path());
        let extra = dir.path().join(IMAGES_DIR).join("frame_000099.png");
        let img = Image::constant(8, 8, [0.2; 3]).unwrap();
        save_png(&img, &extra).unwrap();
        assert!(SceneDir::load(dir.path()).is_err());
    }

    #[test]
    fn scene_blob_round_trips() {
        let scene = make_scene(11, SceneKind::Points, 40).unwrap();
        let dir = tempdir().unwrap();
        let j = dir.path().join("scene.json");
        let b = dir.path().join("scene.bin");
        save_scene(&scene, &j, &b).unwrap();
        let back = load_scene(&j, &b).unwrap();
        assert_eq!(back.seed, scene.seed);
        assert_eq!(back.points, scene.points);
        assert_eq!(back.colors, scene.colors);
        assert_eq!(back.planes, scene.planes);
    }

    #[test]
    fn truncated_blob_is_diagnosed() {
        let scene = make_scene(12, SceneKind::Points, 10).unwrap();
        let dir = tempdir().unwrap();
        let j = dir.path().join("scene.json");
        let b = dir.path().join("scene.bin");
        save_scene(&scene, &j, &b).unwrap();
        let raw = std::fs::read(&b).unwrap();
        std::fs::write(&b, &raw[..raw.len() - 8]).unwrap();
        assert!(matches!(
            load_scene(&j, &b),
            Err(Error::MalformedFile { .. })
        ));
    }
}
