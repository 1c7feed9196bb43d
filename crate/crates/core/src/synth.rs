//! Synthetic scenes with exact ground truth: images, depth, flow,
//! covisibility and overlap for verification of every other module.
//!
//! Planes are rendered by analytic ray-plane intersection, so depths and
//! correspondences are exact to machine precision; point clouds are splatted
//! with a small z-buffered radius.

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{invert, project, unproject, Intrinsics, Pose, Rotation, Translation};
use crate::imaging::{ConfidenceMask, DepthMap, FlowField, FlowResolution, Image};

/// All generated geometry stays inside this box (world frame).
pub const SCENE_BOUND_XY: f64 = 4.5;
pub const SCENE_BOUND_Z_MIN: f64 = 0.5;
pub const SCENE_BOUND_Z_MAX: f64 = 8.0;

/// Relative depth tolerance of the covisibility occlusion test.
const OCCLUSION_REL_TOL: f64 = 0.01;

/// Point splat radius in pixels.
const SPLAT_RADIUS: f64 = 1.5;

/// Pinhole camera with an image size, posed world-to-camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub k: Intrinsics,
    pub pose: Pose,
    pub h: usize,
    pub w: usize,
}

/// Ordered cameras with their source frame ids.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub frame_ids: Vec<u64>,
}

/// Smoothly textured bounded plane; color is a sum of sinusoids over the
/// in-plane coordinates, identical from every viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedPlane {
    pub origin: Vector3<f64>,
    /// Orthonormal in-plane axes; the normal is their cross product.
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_extent_u: f64,
    pub half_extent_v: f64,
    pub base_color: [f64; 3],
    pub waves: Vec<TextureWave>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureWave {
    pub amp: [f64; 3],
    pub freq_u: f64,
    pub freq_v: f64,
    pub phase: f64,
}

impl TexturedPlane {
    pub fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v)
    }

    /// Texture color at in-plane coordinates.
    pub fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let mut rgb = self.base_color;
        for w in &self.waves {
            let s = (2.0 * std::f64::consts::PI * (w.freq_u * u + w.freq_v * v) + w.phase).sin();
            for c in 0..3 {
                rgb[c] += w.amp[c] * s;
            }
        }
        [
            rgb[0].clamp(0.0, 1.0),
            rgb[1].clamp(0.0, 1.0),
            rgb[2].clamp(0.0, 1.0),
        ]
    }

    /// Depth along the ray of pixel `(x, y)` where it hits this plane, plus
    /// the in-plane hit coordinates; `None` when the ray misses.
    fn intersect(&self, cam: &Camera, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        let center = camera_center(cam);
        // Direction scaled so the ray parameter equals camera-frame depth.
        let dir = cam
            .pose
            .r
            .transpose()
            .apply(&(cam.k.inv_matrix() * Vector3::new(x, y, 1.0)));
        let n = self.normal();
        let denom = n.dot(&dir);
        if denom.abs() < 1e-14 {
            return None;
        }
        let depth = n.dot(&(self.origin - center)) / denom;
        if depth <= 1e-9 {
            return None;
        }
        let hit = center + dir * depth;
        let rel = hit - self.origin;
        let u = rel.dot(&self.axis_u);
        let v = rel.dot(&self.axis_v);
        if u.abs() > self.half_extent_u || v.abs() > self.half_extent_v {
            return None;
        }
        Some((depth, u, v))
    }
}

/// World contents plus the seed that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub planes: Vec<TexturedPlane>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Points,
    TexturedPlane,
}

/// World-frame position of the camera's optical center.
pub fn camera_center(cam: &Camera) -> Vector3<f64> {
    -(cam.pose.r.transpose().apply(cam.pose.t.vector()))
}

fn random_unit_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

fn random_plane(rng: &mut ChaCha8Rng) -> TexturedPlane {
    let origin = Vector3::new(
        random_unit_range(rng, -0.3, 0.3),
        random_unit_range(rng, -0.3, 0.3),
        random_unit_range(rng, 2.5, 4.0),
    );
    // Mostly fronto-parallel with a mild random tilt.
    let n = Vector3::new(
        random_unit_range(rng, -0.25, 0.25),
        random_unit_range(rng, -0.25, 0.25),
        -1.0,
    )
    .normalize();
    let axis_u = Vector3::new(0.0, 1.0, 0.0).cross(&n).normalize();
    let axis_v = n.cross(&axis_u);
    let extent = 2.2 * origin.z;
    TexturedPlane {
        origin,
        axis_u,
        axis_v,
        half_extent_u: extent,
        half_extent_v: extent,
        base_color: [
            random_unit_range(rng, 0.45, 0.55),
            random_unit_range(rng, 0.45, 0.55),
            random_unit_range(rng, 0.45, 0.55),
        ],
        // Log-spaced frequency ladder with spread orientations: every viewing
        // direction sees several distinct wavelengths, so no depth offset can
        // re-align all of them at once and correspondence stays unambiguous.
        waves: (0..6)
            .map(|i| {
                let freq = 0.5 * 8.0f64.powf(i as f64 / 5.0);
                let angle = (i as f64 + rng.random::<f64>()) * std::f64::consts::PI / 6.0;
                let amp = std::array::from_fn(|_| {
                    let r = random_unit_range(rng, -1.0, 1.0);
                    r.signum() * (0.04 + 0.04 * r.abs())
                });
                TextureWave {
                    amp,
                    freq_u: freq * angle.cos(),
                    freq_v: freq * angle.sin(),
                    phase: random_unit_range(rng, 0.0, std::f64::consts::TAU),
                }
            })
            .collect(),
    }
}

/// Deterministic scene from a seed: either a random color point cloud or a
/// textured plane carrying `n` coplanar sample points.
pub fn make_scene(seed: u64, kind: SceneKind, n: usize) -> Result<Scene> {
    if n == 0 {
        return Err(Error::EmptyInput("scene needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SceneKind::Points => {
            let mut points = Vec::with_capacity(n);
            let mut colors = Vec::with_capacity(n);
            for _ in 0..n {
                points.push(Vector3::new(
                    random_unit_range(&mut rng, -1.5, 1.5),
                    random_unit_range(&mut rng, -1.5, 1.5),
                    random_unit_range(&mut rng, 2.0, 5.0),
                ));
                colors.push([
                    random_unit_range(&mut rng, 0.1, 0.9),
                    random_unit_range(&mut rng, 0.1, 0.9),
                    random_unit_range(&mut rng, 0.1, 0.9),
                ]);
            }
            Ok(Scene {
                seed,
                points,
                colors,
                planes: Vec::new(),
            })
        }
        SceneKind::TexturedPlane => {
            let plane = random_plane(&mut rng);
            let mut points = Vec::with_capacity(n);
            let mut colors = Vec::with_capacity(n);
            for _ in 0..n {
                // Samples stay near the plane center so they remain inside
                // the declared scene bound despite the tilt.
                let u = random_unit_range(&mut rng, -2.0, 2.0);
                let v = random_unit_range(&mut rng, -2.0, 2.0);
                points.push(plane.origin + plane.axis_u * u + plane.axis_v * v);
                colors.push(plane.color_at(u, v));
            }
            Ok(Scene {
                seed,
                points,
                colors,
                planes: vec![plane],
            })
        }
    }
}

/// Two-plane scene with a foreground occluder in front of a backdrop;
/// produces genuine occlusion for covisibility tests.
pub fn make_occluded_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backdrop = random_plane(&mut rng);
    backdrop.origin.z = random_unit_range(&mut rng, 3.5, 4.0);
    let mut fore = random_plane(&mut rng);
    fore.origin = Vector3::new(
        random_unit_range(&mut rng, -0.4, 0.4),
        random_unit_range(&mut rng, -0.4, 0.4),
        random_unit_range(&mut rng, 1.8, 2.2),
    );
    fore.half_extent_u = random_unit_range(&mut rng, 0.5, 0.8);
    fore.half_extent_v = random_unit_range(&mut rng, 0.5, 0.8);
    Scene {
        seed,
        points: vec![backdrop.origin],
        colors: vec![backdrop.base_color],
        planes: vec![backdrop, fore],
    }
}

/// Lateral camera track: `n` cameras stepping `baseline` along x, every one
/// aimed at a shared point inside the scene volume. The convergent aim keeps
/// the whole target view covered by its neighbors, which a parallel track
/// cannot do at the image borders.
pub fn make_rig(seed: u64, n: usize, image_size: usize, baseline: f64) -> Result<CameraRig> {
    if n == 0 {
        return Err(Error::EmptyInput("rig needs at least one camera".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = image_size as f64;
    let c = (image_size as f64 - 1.0) / 2.0;
    let k = Intrinsics::new(f, f, c, c)?;
    let look_at = Vector3::new(
        random_unit_range(&mut rng, -0.1, 0.1),
        random_unit_range(&mut rng, -0.1, 0.1),
        random_unit_range(&mut rng, 3.0, 3.5),
    );
    let mut cameras = Vec::with_capacity(n);
    let mut frame_ids = Vec::with_capacity(n);
    let span = (n - 1) as f64 * baseline;
    for i in 0..n {
        // Track centered on x = 0 so both ends keep the scene in frame.
        let center = Vector3::new(i as f64 * baseline - span / 2.0, 0.0, 0.0);
        let cam_z = (look_at - center).normalize();
        let cam_x = Vector3::new(0.0, 1.0, 0.0).cross(&cam_z).normalize();
        let cam_y = cam_z.cross(&cam_x);
        let m = Matrix3::from_rows(&[cam_x.transpose(), cam_y.transpose(), cam_z.transpose()]);
        let r = Rotation::try_from_matrix(m)?;
        let t = -r.apply(&center);
        cameras.push(Camera {
            k,
            pose: Pose::new(r, Translation::new(t.x, t.y, t.z)),
            h: image_size,
            w: image_size,
        });
        frame_ids.push(i as u64);
    }
    Ok(CameraRig { cameras, frame_ids })
}

/// Exactly fronto-parallel plane at depth `d`, axis-aligned; closed-form
/// disparity makes it the reference fixture for flow tests.
pub fn fronto_plane(d: f64, half_extent: f64, seed: u64) -> TexturedPlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plane = random_plane(&mut rng);
    plane.origin = Vector3::new(0.0, 0.0, d);
    plane.axis_u = Vector3::new(1.0, 0.0, 0.0);
    plane.axis_v = Vector3::new(0.0, -1.0, 0.0);
    plane.half_extent_u = half_extent;
    plane.half_extent_v = half_extent;
    plane
}

/// Nearest analytic surface depth along the pixel ray, ignoring point splats.
pub fn query_depth(scene: &Scene, cam: &Camera, x: f64, y: f64) -> Option<f64> {
    scene
        .planes
        .iter()
        .filter_map(|p| p.intersect(cam, x, y).map(|(d, _, _)| d))
        .min_by(|a, b| a.total_cmp(b))
}

/// Renders the scene: analytic plane shading plus z-buffered point splats.
/// Background pixels are black with invalid depth.
pub fn render_gt(scene: &Scene, cam: &Camera) -> Result<(Image, DepthMap)> {
    let (h, w) = (cam.h, cam.w);
    let mut color = Array3::zeros((h, w, 3));
    let mut depth = Array2::from_elem((h, w), f64::INFINITY);
    let mut valid = Array2::from_elem((h, w), false);

    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(f64, [f64; 3])> = None;
            for plane in &scene.planes {
                if let Some((d, u, v)) = plane.intersect(cam, x as f64, y as f64) {
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, plane.color_at(u, v)));
                    }
                }
            }
            if let Some((d, rgb)) = best {
                depth[(y, x)] = d;
                valid[(y, x)] = true;
                for c in 0..3 {
                    color[(y, x, c)] = rgb[c];
                }
            }
        }
    }

    for (p, rgb) in scene.points.iter().zip(scene.colors.iter()) {
        let Ok((px, z)) = project(&cam.k, &cam.pose, p) else {
            continue;
        };
        let x_lo = ((px.x - SPLAT_RADIUS).ceil().max(0.0)) as usize;
        let x_hi = ((px.x + SPLAT_RADIUS).floor().min((w - 1) as f64)) as i64;
        let y_lo = ((px.y - SPLAT_RADIUS).ceil().max(0.0)) as usize;
        let y_hi = ((px.y + SPLAT_RADIUS).floor().min((h - 1) as f64)) as i64;
        if x_hi < x_lo as i64 || y_hi < y_lo as i64 {
            continue;
        }
        for y in y_lo..=(y_hi as usize) {
            for x in x_lo..=(x_hi as usize) {
                let dx = x as f64 - px.x;
                let dy = y as f64 - px.y;
                if dx * dx + dy * dy > SPLAT_RADIUS * SPLAT_RADIUS {
                    continue;
                }
                if z < depth[(y, x)] {
                    depth[(y, x)] = z;
                    valid[(y, x)] = true;
                    for c in 0..3 {
                        color[(y, x, c)] = rgb[c];
                    }
                }
            }
        }
    }

    if !valid.iter().any(|&v| v) {
        return Err(Error::EmptyView);
    }
    let depth = depth.mapv(|d| if d.is_finite() { d } else { 0.0 });
    let depth = Array2::from_shape_fn((h, w), |(y, x)| {
        if valid[(y, x)] {
            depth[(y, x)]
        } else {
            1.0
        }
    });
    Ok((
        Image::new(color)?,
        DepthMap::new(
            Array2::from_shape_fn((h, w), |(y, x)| if valid[(y, x)] { depth[(y, x)] } else { 1.0 }),
            valid,
        )?,
    ))
}

/// Maps a pixel of `cam1` with known depth into `cam2`; returns the target
/// pixel and its depth in camera 2.
pub fn reproject_pixel(
    cam1: &Camera,
    cam2: &Camera,
    x: f64,
    y: f64,
    depth: f64,
) -> Result<(Vector2<f64>, f64)> {
    let local = unproject(&cam1.k, &Vector2::new(x, y), depth)?;
    let world = invert(&cam1.pose).transform(&local);
    project(&cam2.k, &cam2.pose, &world)
}

/// Exact flow at a continuous pixel of view 1, via analytic scene depth.
/// `None` when no surface is hit or the reprojection falls behind camera 2.
pub fn gt_flow_at(
    scene: &Scene,
    cam1: &Camera,
    cam2: &Camera,
    x: f64,
    y: f64,
) -> Option<(f64, f64)> {
    let d = query_depth(scene, cam1, x, y)?;
    let (px, _) = reproject_pixel(cam1, cam2, x, y, d).ok()?;
    Some((px.x - x, px.y - y))
}

/// Dense ground-truth flow from view 1 to view 2 with a covisibility mask.
///
/// A pixel is covisible when it has a rendered depth, reprojects inside view
/// 2 in front of the camera, and is not occluded there: its depth in camera 2
/// must match the nearest view-2 surface within 1% relative tolerance.
pub fn gt_flow(
    scene: &Scene,
    cam1: &Camera,
    cam2: &Camera,
) -> Result<(FlowField, ConfidenceMask)> {
    let (_, depth1) = render_gt(scene, cam1)?;
    let (_, depth2) = render_gt(scene, cam2)?;
    let (h, w) = (cam1.h, cam1.w);
    let mut flow = Array3::zeros((h, w, 2));
    let mut covis = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if !depth1.valid[(y, x)] {
                continue;
            }
            let d = depth1.depth[(y, x)];
            let Ok((px, z2)) = reproject_pixel(cam1, cam2, x as f64, y as f64, d) else {
                continue;
            };
            // Tiny slack keeps border pixels in frame despite the float
            // round trip through unproject/project.
            let eps = 1e-9;
            if px.x < -eps
                || px.x > (cam2.w - 1) as f64 + eps
                || px.y < -eps
                || px.y > (cam2.h - 1) as f64 + eps
            {
                continue;
            }
            let px = Vector2::new(
                px.x.clamp(0.0, (cam2.w - 1) as f64),
                px.y.clamp(0.0, (cam2.h - 1) as f64),
            );
            // Occlusion: compare against the analytic surface when present,
            // else the splat z-buffer at the nearest pixel.
            let occluder = query_depth(scene, cam2, px.x, px.y).or_else(|| {
                let xi = px.x.round() as usize;
                let yi = px.y.round() as usize;
                depth2.valid[(yi, xi)].then(|| depth2.depth[(yi, xi)])
            });
            let visible = match occluder {
                Some(front) => z2 <= front * (1.0 + OCCLUSION_REL_TOL),
                None => true,
            };
            if visible {
                flow[(y, x, 0)] = px.x - x as f64;
                flow[(y, x, 1)] = px.y - y as f64;
                covis[(y, x)] = true;
            }
        }
    }
    Ok((
        FlowField::new(flow, FlowResolution::Full)?,
        ConfidenceMask { data: covis },
    ))
}

/// Brute-force covisible fractions and the combined overlap score
/// `1/(o12^-1 + o21^-1 - 1)`. Fractions are over rendered pixels of each
/// view, so a frame-filling scene seen by identical cameras scores exactly 1.
pub fn overlap_oracle(scene: &Scene, cam1: &Camera, cam2: &Camera) -> Result<(f64, f64, f64)> {
    let ratio = |a: &Camera, b: &Camera| -> Result<f64> {
        let (_, d) = render_gt(scene, a)?;
        let (_, covis) = gt_flow(scene, a, b)?;
        let rendered = d.valid.iter().filter(|&&v| v).count();
        if rendered == 0 {
            return Err(Error::EmptyView);
        }
        Ok(covis.count() as f64 / rendered as f64)
    };
    let o12 = ratio(cam1, cam2)?;
    let o21 = ratio(cam2, cam1)?;
    if o12 <= 0.0 || o21 <= 0.0 {
        return Err(Error::ZeroOverlap);
    }
    Ok((o12, o21, 1.0 / (1.0 / o12 + 1.0 / o21 - 1.0)))
}
