//! Epipolar attention renderer: depth candidates per target ray are
//! projected into both context views, pixel-aligned features and colors are
//! gathered there, and a softmax over feature agreement turns them into a
//! color and an expected depth.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{project, unproject, Intrinsics, Pose};
use crate::imaging::{bilinear_sample, DepthMap, Image};
use crate::pyramid::FeatureMap;
use crate::weights::{seeded_uniform, Tensor, WeightStore};

/// A batch of target rays to render with shared camera geometry.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub k_target: Intrinsics,
    /// Target-to-context transforms.
    pub p_1t: Pose,
    pub p_2t: Pose,
    pub pixels: Vec<(f64, f64)>,
    pub near: f64,
    pub far: f64,
    pub s: usize,
}

impl RayBatch {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::BadRange(format!(
                "need 0 < near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        if self.s < 2 {
            return Err(Error::BadRange(format!("need at least 2 samples, got {}", self.s)));
        }
        Ok(())
    }
}

/// One depth candidate seen from one context view.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub px: f64,
    pub py: f64,
    pub feature: Vec<f64>,
    pub color: [f64; 3],
    /// In front of the context camera and inside its image bounds.
    pub visible: bool,
}

/// All candidates of one target ray.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub pixel: (f64, f64),
    pub depths: Vec<f64>,
    pub view1: Vec<Candidate>,
    pub view2: Vec<Candidate>,
}

pub type EpipolarSampleSet = Vec<RaySamples>;

/// A context view: its image, feature map, and the stride tying the two
/// coordinate systems together.
#[derive(Debug, Clone)]
pub struct ContextView<'a> {
    pub image: &'a Image,
    pub features: &'a FeatureMap,
    pub k: Intrinsics,
}

/// How candidate agreement is scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoringMode {
    /// Negative squared feature distance; needs no trained weights and makes
    /// renderer correctness testable against synthetic oracles.
    Oracle,
    /// Channel-weighted feature agreement with learned weights.
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RendererParams {
    pub mode: ScoringMode,
    pub c: usize,
    /// Softmax temperature over candidate scores; small values sharpen the
    /// distribution toward the best-agreeing depth.
    pub sharpness: f64,
    pub score_a: Vec<f64>,
    pub score_b: f64,
    pub gate_w: Vec<f64>,
    pub gate_b: f64,
}

impl RendererParams {
    pub fn oracle(c: usize) -> Self {
        RendererParams {
            mode: ScoringMode::Oracle,
            c,
            sharpness: 0.005,
            score_a: vec![1.0; c],
            score_b: 0.0,
            gate_w: vec![0.0; c],
            gate_b: 0.0,
        }
    }

    pub fn seeded(seed: u64, c: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / c as f64).sqrt();
        RendererParams {
            mode: ScoringMode::Learned,
            c,
            sharpness: 1.0,
            score_a: seeded_uniform(&mut rng, c, scale),
            score_b: (rng.random::<f32>() * 0.1) as f64,
            gate_w: seeded_uniform(&mut rng, c, scale),
            gate_b: 0.0,
        }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        vec![
            Tensor::new(&format!("{prefix}.score_a"), vec![self.c], self.score_a.clone()).unwrap(),
            Tensor::new(&format!("{prefix}.score_b"), vec![1], vec![self.score_b]).unwrap(),
            Tensor::new(&format!("{prefix}.gate_w"), vec![self.c], self.gate_w.clone()).unwrap(),
            Tensor::new(&format!("{prefix}.gate_b"), vec![1], vec![self.gate_b]).unwrap(),
        ]
    }

    pub fn from_store(
        store: &WeightStore,
        prefix: &str,
        c: usize,
        mode: ScoringMode,
        sharpness: f64,
    ) -> Result<Self> {
        let grab = |name: &str| -> Result<Vec<f64>> {
            Ok(store.get(&format!("{prefix}.{name}"))?.data.clone())
        };
        let score_a = grab("score_a")?;
        let gate_w = grab("gate_w")?;
        if score_a.len() != c || gate_w.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "renderer tensors inconsistent with channel width {c}"
            )));
        }
        Ok(RendererParams {
            mode,
            c,
            sharpness,
            score_a,
            score_b: grab("score_b")?[0],
            gate_w,
            gate_b: grab("gate_b")?[0],
        })
    }
}

/// Pixel-aligned features for oracle-mode rendering: each cell holds the
/// colors of the surrounding (2*radius+1)^2 window, border-clamped. Window
/// agreement disambiguates matches that single colors cannot.
pub fn window_features(img: &Image, radius: usize) -> FeatureMap {
    let (h, w) = (img.h(), img.w());
    let side = 2 * radius + 1;
    let mut data = Array3::zeros((h, w, 3 * side * side));
    let r = radius as i64;
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let px = img.pixel(yy, xx);
                    for c in 0..3 {
                        data[(y, x, k)] = px[c];
                        k += 1;
                    }
                }
            }
        }
    }
    FeatureMap::new(data).expect("window features from a valid image are valid")
}

/// `s` strictly increasing depth candidates in `[near, far]`. Uniform mode
/// takes bin midpoints; stratified mode draws one point per bin.
pub fn sample_depths(near: f64, far: f64, s: usize, stratified: bool, seed: u64) -> Result<Vec<f64>> {
    if !(near > 0.0 && near < far) {
        return Err(Error::BadRange(format!("need 0 < near < far, got [{near}, {far}]")));
    }
    if s < 2 {
        return Err(Error::BadRange(format!("need at least 2 samples, got {s}")));
    }
    let width = (far - near) / s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let frac = if stratified { rng.random::<f64>() } else { 0.5 };
        out.push(near + (i as f64 + frac) * width);
    }
    Ok(out)
}

fn gather_view(
    ctx: &ContextView,
    p_kt: &Pose,
    k_target: &Intrinsics,
    pixel: (f64, f64),
    depths: &[f64],
) -> Vec<Candidate> {
    let h = ctx.image.h() as f64;
    let w = ctx.image.w() as f64;
    let stride_x = w / ctx.features.w() as f64;
    let stride_y = h / ctx.features.h() as f64;
    let c = ctx.features.c();
    let pix = nalgebra::Vector2::new(pixel.0, pixel.1);
    depths
        .iter()
        .map(|&d| {
            let projected = unproject(k_target, &pix, d)
                .and_then(|x_t| project(&ctx.k, p_kt, &x_t));
            match projected {
                Ok((p, _)) => {
                    let inside = p.x >= 0.0 && p.x <= w - 1.0 && p.y >= 0.0 && p.y <= h - 1.0;
                    let (color, _) = bilinear_sample(ctx.image, p.x, p.y);
                    let fx = (p.x + 0.5) / stride_x - 0.5;
                    let fy = (p.y + 0.5) / stride_y - 0.5;
                    let (feature, _) = ctx.features.sample(fx, fy);
                    Candidate { px: p.x, py: p.y, feature, color, visible: inside }
                }
                Err(_) => Candidate {
                    px: f64::NAN,
                    py: f64::NAN,
                    feature: vec![0.0; c],
                    color: [0.0; 3],
                    visible: false,
                },
            }
        })
        .collect()
}

/// Projects every (ray, depth) candidate into both context views and gathers
/// pixel-aligned colors and features there. Candidates behind a camera are
/// flagged invisible, never fatal.
pub fn epipolar_gather(
    rays: &RayBatch,
    ctx1: &ContextView,
    ctx2: &ContextView,
    depths: &[f64],
) -> Result<EpipolarSampleSet> {
    rays.validate()?;
    if depths.len() != rays.s {
        return Err(Error::DimensionMismatch(format!(
            "{} depths supplied for {} samples per ray",
            depths.len(),
            rays.s
        )));
    }
    Ok(rays
        .pixels
        .iter()
        .map(|&pixel| RaySamples {
            pixel,
            depths: depths.to_vec(),
            view1: gather_view(ctx1, &rays.p_1t, &rays.k_target, pixel, depths),
            view2: gather_view(ctx2, &rays.p_2t, &rays.k_target, pixel, depths),
        })
        .collect())
}

fn agreement_score(a: &[f64], b: &[f64], p: &RendererParams) -> f64 {
    match p.mode {
        ScoringMode::Oracle => {
            let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            -d2
        }
        ScoringMode::Learned => {
            let mut s = p.score_b;
            for ((&x, &y), &w) in a.iter().zip(b.iter()).zip(p.score_a.iter()) {
                s += w * x * y;
            }
            s
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Attention-weights one ray's candidates into a color and expected depth.
///
/// Candidates visible in both views are scored by feature agreement and
/// softmax-weighted; when none are, single-view candidates share weight
/// uniformly. Colors mix through a gate that falls back to the only visible
/// view.
pub fn render_pixel(ray: &RaySamples, p: &RendererParams) -> Result<([f64; 3], f64, Vec<f64>)> {
    let s = ray.depths.len();
    let both: Vec<usize> = (0..s)
        .filter(|&i| ray.view1[i].visible && ray.view2[i].visible)
        .collect();
    let single: Vec<usize> = (0..s)
        .filter(|&i| ray.view1[i].visible ^ ray.view2[i].visible)
        .collect();
    let eligible = if !both.is_empty() { &both } else { &single };
    if eligible.is_empty() {
        return Err(Error::AllOccluded);
    }
    let scores: Vec<f64> = eligible
        .iter()
        .map(|&i| {
            if both.is_empty() {
                0.0
            } else {
                agreement_score(&ray.view1[i].feature, &ray.view2[i].feature, p)
            }
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&v| ((v - max) / p.sharpness).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut weights = vec![0.0; s];
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for (&i, &e) in eligible.iter().zip(exps.iter()) {
        let w = e / z;
        weights[i] = w;
        let (c1, c2) = (&ray.view1[i], &ray.view2[i]);
        let mixed = match (c1.visible, c2.visible) {
            (true, true) => {
                let g = match p.mode {
                    ScoringMode::Oracle => 0.5,
                    ScoringMode::Learned => {
                        let mut x = p.gate_b;
                        for ((&a, &b), &gw) in
                            c1.feature.iter().zip(c2.feature.iter()).zip(p.gate_w.iter())
                        {
                            x += gw * (a - b);
                        }
                        sigmoid(x)
                    }
                };
                [
                    g * c1.color[0] + (1.0 - g) * c2.color[0],
                    g * c1.color[1] + (1.0 - g) * c2.color[1],
                    g * c1.color[2] + (1.0 - g) * c2.color[2],
                ]
            }
            (true, false) => c1.color,
            (false, true) => c2.color,
            (false, false) => unreachable!("ineligible candidate weighted"),
        };
        for ch in 0..3 {
            color[ch] += w * mixed[ch];
        }
        depth += w * ray.depths[i];
    }
    Ok((color, depth, weights))
}

/// Renders a full target frame: a map of [`render_pixel`] over the grid.
/// Rays with no visible candidate come back black with an invalid depth.
pub fn render_image(
    k_target: &Intrinsics,
    h: usize,
    w: usize,
    p_1t: &Pose,
    p_2t: &Pose,
    ctx1: &ContextView,
    ctx2: &ContextView,
    params: &RendererParams,
    near: f64,
    far: f64,
    s: usize,
) -> Result<(Image, DepthMap)> {
    let depths = sample_depths(near, far, s, false, 0)?;
    let mut color = Array3::zeros((h, w, 3));
    let mut depth = Array2::from_elem((h, w), 1.0);
    let mut valid = Array2::from_elem((h, w), false);
    // Row batches keep the gather allocation bounded.
    for y in 0..h {
        let rays = RayBatch {
            k_target: *k_target,
            p_1t: p_1t.clone(),
            p_2t: p_2t.clone(),
            pixels: (0..w).map(|x| (x as f64, y as f64)).collect(),
            near,
            far,
            s,
        };
        let gathered = epipolar_gather(&rays, ctx1, ctx2, &depths)?;
        for (x, ray) in gathered.iter().enumerate() {
            match render_pixel(ray, params) {
                Ok((rgb, d, _)) => {
                    for ch in 0..3 {
                        color[(y, x, ch)] = rgb[ch].clamp(0.0, 1.0);
                    }
                    depth[(y, x)] = d;
                    valid[(y, x)] = true;
                }
                Err(Error::AllOccluded) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok((Image::new(color)?, DepthMap::new(depth, valid)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        epipolar_distance, epipolar_line, essential_from_pose, fundamental_from_essential,
        invert, Rotation, Translation,
    };
    use crate::imaging::psnr;
    use crate::pyramid::{extract_pyramid, PyramidParams};
    use crate::synth::{fronto_plane, query_depth, render_gt, Camera, Scene};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn plane_scene() -> Scene {
        Scene {
            seed: 0,
            points: vec![Vector3::new(0.0, 0.0, 3.0)],
            colors: vec![[0.5; 3]],
            planes: vec![fronto_plane(3.0, 12.0, 21)],
        }
    }

    fn camera_at(tx: f64, hw: usize) -> Camera {
        let f = hw as f64;
        let c = (hw as f64 - 1.0) / 2.0;
        Camera {
            k: Intrinsics::new(f, f, c, c).unwrap(),
            pose: Pose::new(Rotation::identity(), Translation::new(-tx, 0.0, 0.0)),
            h: hw,
            w: hw,
        }
    }

    struct Prepared {
        image: Image,
        features: FeatureMap,
        k: Intrinsics,
    }

    fn prepare(scene: &Scene, cam: &Camera) -> Prepared {
        let (image, _) = render_gt(scene, cam).unwrap();
        let pyr = extract_pyramid(&image, &PyramidParams::raw_patch()).unwrap();
        Prepared { image, features: pyr.finest().clone(), k: cam.k }
    }

    /// Pixel-aligned color features: the classic photo-consistency setup the
    /// oracle scoring mode is meant for.
    fn prepare_color(scene: &Scene, cam: &Camera) -> Prepared {
        let (image, _) = render_gt(scene, cam).unwrap();
        let features = FeatureMap::new(image.data().clone()).unwrap();
        Prepared { image, features, k: cam.k }
    }

    fn ctx<'a>(p: &'a Prepared) -> ContextView<'a> {
        ContextView { image: &p.image, features: &p.features, k: p.k }
    }

    #[test]
    fn uniform_depths_are_bin_midpoints() {
        let d = sample_depths(1.0, 2.0, 2, false, 0).unwrap();
        assert_eq!(d, vec![1.25, 1.75]);
        let d64 = sample_depths(0.1, 20.0, 64, false, 0).unwrap();
        assert_eq!(d64.len(), 64);
        assert!(d64.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stratified_depths_stay_in_their_bins() {
        for seed in 0..20 {
            let s = 16;
            let d = sample_depths(0.5, 8.5, s, true, seed).unwrap();
            let width = 8.0 / s as f64;
            for (i, &v) in d.iter().enumerate() {
                let lo = 0.5 + i as f64 * width;
                assert!(v >= lo && v < lo + width, "seed {seed} sample {i} out of bin");
            }
            assert!(d.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn bad_depth_ranges_rejected() {
        assert!(matches!(sample_depths(2.0, 1.0, 4, false, 0), Err(Error::BadRange(_))));
        assert!(matches!(sample_depths(1.0, 2.0, 1, false, 0), Err(Error::BadRange(_))));
    }

    #[test]
    fn identity_pose_projects_to_own_pixel() {
        let scene = plane_scene();
        let cam = camera_at(0.0, 32);
        let p = prepare(&scene, &cam);
        let rays = RayBatch {
            k_target: cam.k,
            p_1t: Pose::identity(),
            p_2t: Pose::identity(),
            pixels: vec![(5.0, 7.0), (16.5, 20.25)],
            near: 0.5,
            far: 10.0,
            s: 8,
        };
        let depths = sample_depths(0.5, 10.0, 8, false, 0).unwrap();
        let set = epipolar_gather(&rays, &ctx(&p), &ctx(&p), &depths).unwrap();
        for ray in &set {
            for cand in ray.view1.iter().chain(ray.view2.iter()) {
                assert_abs_diff_eq!(cand.px, ray.pixel.0, epsilon = 1e-9);
                assert_abs_diff_eq!(cand.py, ray.pixel.1, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn candidates_lie_on_epipolar_lines() {
        let scene = plane_scene();
        let cam_t = camera_at(0.0, 32);
        let cam_1 = camera_at(0.4, 32);
        let cam_2 = camera_at(-0.3, 32);
        let p1 = prepare(&scene, &cam_1);
        let p2 = prepare(&scene, &cam_2);
        let p_1t = crate::geometry::compose(&cam_1.pose, &invert(&cam_t.pose));
        let p_2t = crate::geometry::compose(&cam_2.pose, &invert(&cam_t.pose));
        let rays = RayBatch {
            k_target: cam_t.k,
            p_1t: p_1t.clone(),
            p_2t: p_2t.clone(),
            pixels: vec![(3.0, 4.0), (15.0, 16.0), (28.0, 9.0)],
            near: 0.5,
            far: 10.0,
            s: 16,
        };
        let depths = sample_depths(0.5, 10.0, 16, false, 0).unwrap();
        let set = epipolar_gather(&rays, &ctx(&p1), &ctx(&p2), &depths).unwrap();
        for (pose, pick) in [(&p_1t, 0usize), (&p_2t, 1usize)] {
            let e = essential_from_pose(pose).unwrap();
            let f = fundamental_from_essential(&e, &cam_t.k, &cam_1.k);
            for ray in &set {
                let line =
                    epipolar_line(&f, &nalgebra::Vector2::new(ray.pixel.0, ray.pixel.1)).unwrap();
                let view = if pick == 0 { &ray.view1 } else { &ray.view2 };
                for cand in view.iter().filter(|c| c.visible) {
                    let d = epipolar_distance(&nalgebra::Vector2::new(cand.px, cand.py), &line);
                    assert!(d < 1e-6, "distance {d} off the epipolar line");
                }
            }
        }
    }

    #[test]
    fn true_depth_candidate_gathers_ground_truth_color() {
        let scene = plane_scene();
        let cam_t = camera_at(0.0, 64);
        // Baseline chosen so the true-depth projection lands on an exact
        // pixel center (disparity f * tx / d = 5 px).
        let cam_1 = camera_at(5.0 * 3.0 / 64.0, 64);
        let p1 = prepare(&scene, &cam_1);
        let pixel = (31.0, 30.0);
        let gt_depth = query_depth(&scene, &cam_t, pixel.0, pixel.1).unwrap();
        let rays = RayBatch {
            k_target: cam_t.k,
            p_1t: crate::geometry::compose(&cam_1.pose, &invert(&cam_t.pose)),
            p_2t: Pose::identity(),
            pixels: vec![pixel],
            near: gt_depth,
            far: gt_depth + 1.0,
            s: 2,
        };
        // First stratified-free sample sits at gt_depth + 0.25; instead pass
        // the exact depth directly.
        let set = epipolar_gather(&rays, &ctx(&p1), &ctx(&p1), &[gt_depth, gt_depth + 0.5])
            .unwrap();
        let cand = &set[0].view1[0];
        assert!(cand.visible);
        let gt = render_gt(&scene, &cam_t).unwrap().0;
        let want = gt.pixel(pixel.1 as usize, pixel.0 as usize);
        for ch in 0..3 {
            assert_abs_diff_eq!(cand.color[ch], want[ch], epsilon = 1e-3);
        }
    }

    #[test]
    fn behind_camera_candidates_flagged_not_fatal() {
        let scene = plane_scene();
        let cam = camera_at(0.0, 32);
        let p = prepare(&scene, &cam);
        // Context rotated 180 degrees: everything in front of the target is
        // behind it.
        let flipped = Pose::new(Rotation::ry(std::f64::consts::PI), Translation::new(0.0, 0.0, 0.0));
        let rays = RayBatch {
            k_target: cam.k,
            p_1t: flipped,
            p_2t: Pose::identity(),
            pixels: vec![(16.0, 16.0)],
            near: 1.0,
            far: 5.0,
            s: 4,
        };
        let depths = sample_depths(1.0, 5.0, 4, false, 0).unwrap();
        let set = epipolar_gather(&rays, &ctx(&p), &ctx(&p), &depths).unwrap();
        assert!(set[0].view1.iter().all(|c| !c.visible));
        assert!(set[0].view2.iter().all(|c| c.visible));
    }

    #[test]
    fn rigged_one_hot_weights_select_candidate() {
        let mk = |_d: f64, col: f64| Candidate {
            px: 1.0,
            py: 1.0,
            feature: vec![col],
            color: [col; 3],
            visible: true,
        };
        let ray = RaySamples {
            pixel: (0.0, 0.0),
            depths: vec![1.0, 2.0, 3.0],
            view1: vec![mk(1.0, 0.2), mk(2.0, 0.9), mk(3.0, 0.4)],
            view2: vec![mk(1.0, 0.8), mk(2.0, 0.9), mk(3.0, 0.1)],
        };
        // Oracle scoring with tiny temperature: candidate 1 agrees exactly.
        let mut p = RendererParams::oracle(1);
        p.sharpness = 1e-3;
        let (color, depth, weights) = render_pixel(&ray, &p).unwrap();
        assert_abs_diff_eq!(weights[1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(depth, 2.0, epsilon = 1e-3);
        for ch in 0..3 {
            assert_abs_diff_eq!(color[ch], 0.9, epsilon = 1e-3);
        }
        assert_abs_diff_eq!(weights.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn uniform_scores_mean_depth_and_color() {
        let mk = |col: f64| Candidate {
            px: 1.0,
            py: 1.0,
            feature: vec![0.5],
            color: [col; 3],
            visible: true,
        };
        let ray = RaySamples {
            pixel: (0.0, 0.0),
            depths: vec![1.0, 2.0, 3.0],
            view1: vec![mk(0.2), mk(0.4), mk(0.6)],
            view2: vec![mk(0.2), mk(0.4), mk(0.6)],
        };
        let p = RendererParams::oracle(1);
        let (color, depth, weights) = render_pixel(&ray, &p).unwrap();
        assert_abs_diff_eq!(depth, 2.0, epsilon = 1e-12);
        for ch in 0..3 {
            assert_abs_diff_eq!(color[ch], 0.4, epsilon = 1e-12);
        }
        for w in &weights {
            assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_occluded_reported() {
        let mk = || Candidate {
            px: f64::NAN,
            py: f64::NAN,
            feature: vec![0.0],
            color: [0.0; 3],
            visible: false,
        };
        let ray = RaySamples {
            pixel: (0.0, 0.0),
            depths: vec![1.0, 2.0],
            view1: vec![mk(), mk()],
            view2: vec![mk(), mk()],
        };
        assert!(matches!(
            render_pixel(&ray, &RendererParams::oracle(1)),
            Err(Error::AllOccluded)
        ));
    }

    #[test]
    fn single_view_fallback_uses_visible_color() {
        let mk = |vis: bool, col: f64| Candidate {
            px: 1.0,
            py: 1.0,
            feature: vec![0.5],
            color: [col; 3],
            visible: vis,
        };
        let ray = RaySamples {
            pixel: (0.0, 0.0),
            depths: vec![1.0, 2.0],
            view1: vec![mk(true, 0.7), mk(false, 0.0)],
            view2: vec![mk(false, 0.0), mk(false, 0.0)],
        };
        let (color, depth, weights) = render_pixel(&ray, &RendererParams::oracle(1)).unwrap();
        assert_abs_diff_eq!(color[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(depth, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    /// Contexts flanking the target with the same pixel density but a wider
    /// sensor, so every target ray's surface point stays covisible.
    fn wide_context(tx: f64, f: f64, hw_ctx: usize) -> Camera {
        let c = (hw_ctx as f64 - 1.0) / 2.0;
        Camera {
            k: Intrinsics::new(f, f, c, c).unwrap(),
            pose: Pose::new(Rotation::identity(), Translation::new(-tx, 0.0, 0.0)),
            h: hw_ctx,
            w: hw_ctx,
        }
    }

    fn prepare_window(scene: &Scene, cam: &Camera) -> Prepared {
        let (image, _) = render_gt(scene, cam).unwrap();
        let features = window_features(&image, 1);
        Prepared { image, features, k: cam.k }
    }

    #[test]
    fn oracle_render_recovers_depth_and_color() {
        // Low-frequency texture: wavelengths stay well above the pixel pitch
        // at this small test resolution, keeping bilinear gather accurate.
        let mut plane = fronto_plane(3.0, 12.0, 21);
        for wave in &mut plane.waves {
            wave.freq_u *= 0.25;
            wave.freq_v *= 0.25;
        }
        let scene = Scene {
            seed: 0,
            points: vec![Vector3::new(0.0, 0.0, 3.0)],
            colors: vec![[0.5; 3]],
            planes: vec![plane],
        };
        let hw = 32;
        let cam_t = camera_at(0.0, hw);
        let cam_1 = wide_context(0.3, hw as f64, 48);
        let cam_2 = wide_context(-0.3, hw as f64, 48);
        let p1 = prepare_window(&scene, &cam_1);
        let p2 = prepare_window(&scene, &cam_2);
        let p_1t = crate::geometry::compose(&cam_1.pose, &invert(&cam_t.pose));
        let p_2t = crate::geometry::compose(&cam_2.pose, &invert(&cam_t.pose));
        let (near, far, s) = (1.0, 8.0, 32);
        let params = RendererParams::oracle(p1.features.c());
        let (img, depth) = render_image(
            &cam_t.k, hw, hw, &p_1t, &p_2t, &ctx(&p1), &ctx(&p2), &params, near, far, s,
        )
        .unwrap();
        let (gt_img, _) = render_gt(&scene, &cam_t).unwrap();
        let bin = (far - near) / s as f64;
        let mut in_bin = 0;
        let mut total = 0;
        for y in 0..hw {
            for x in 0..hw {
                let gt_d = query_depth(&scene, &cam_t, x as f64, y as f64).unwrap();
                assert!(depth.valid[(y, x)]);
                total += 1;
                if (depth.depth[(y, x)] - gt_d).abs() <= bin {
                    in_bin += 1;
                }
            }
        }
        assert!(
            in_bin as f64 >= 0.95 * total as f64,
            "depth within one bin on {in_bin}/{total} rays"
        );
        let q = psnr(&img, &gt_img).unwrap();
        assert!(q >= 40.0, "oracle render PSNR {q} dB");
    }

    #[test]
    fn self_view_render_reproduces_context() {
        let scene = plane_scene();
        let hw = 32;
        let cam_1 = camera_at(0.0, hw);
        let cam_2 = camera_at(-0.25, hw);
        let p1 = prepare_color(&scene, &cam_1);
        let p2 = prepare_color(&scene, &cam_2);
        // Target camera coincides with context 1.
        let p_1t = Pose::identity();
        let p_2t = crate::geometry::compose(&cam_2.pose, &invert(&cam_1.pose));
        let params = RendererParams::oracle(p1.features.c());
        let (img, _) = render_image(
            &cam_1.k, hw, hw, &p_1t, &p_2t, &ctx(&p1), &ctx(&p2), &params, 1.0, 8.0, 32,
        )
        .unwrap();
        let q = psnr(&img, &p1.image).unwrap();
        assert!(q >= 35.0, "self-view PSNR {q} dB");
    }

    #[test]
    fn learned_scoring_stays_finite_and_normalized() {
        let scene = plane_scene();
        let hw = 32;
        let cam_t = camera_at(0.1, hw);
        let cam_1 = camera_at(0.4, hw);
        let cam_2 = camera_at(-0.2, hw);
        let p1 = prepare(&scene, &cam_1);
        let p2 = prepare(&scene, &cam_2);
        let rays = RayBatch {
            k_target: cam_t.k,
            p_1t: crate::geometry::compose(&cam_1.pose, &invert(&cam_t.pose)),
            p_2t: crate::geometry::compose(&cam_2.pose, &invert(&cam_t.pose)),
            pixels: (0..hw).map(|i| (i as f64, (i * 7 % hw) as f64)).collect(),
            near: 1.0,
            far: 8.0,
            s: 16,
        };
        let depths = sample_depths(1.0, 8.0, 16, false, 0).unwrap();
        let set = epipolar_gather(&rays, &ctx(&p1), &ctx(&p2), &depths).unwrap();
        let params = RendererParams::seeded(7, p1.features.c());
        for ray in &set {
            let (color, depth, weights) = render_pixel(ray, &params).unwrap();
            assert!(color.iter().all(|v| v.is_finite()));
            assert!((1.0..=8.0).contains(&depth));
            assert_abs_diff_eq!(weights.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            let lo = ray
                .view1
                .iter()
                .chain(ray.view2.iter())
                .filter(|c| c.visible)
                .flat_map(|c| c.color.iter())
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let hi = ray
                .view1
                .iter()
                .chain(ray.view2.iter())
                .filter(|c| c.visible)
                .flat_map(|c| c.color.iter())
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            for v in color.iter() {
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "color outside candidate hull");
            }
        }
    }

    #[test]
    fn renderer_params_round_trip() {
        let p = RendererParams::seeded(11, 48);
        let store = WeightStore::new(11, p.to_tensors("renderer"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        store.save(&path).unwrap();
        let loaded = WeightStore::load(&path).unwrap();
        let q = RendererParams::from_store(&loaded, "renderer", 48, ScoringMode::Learned, 1.0)
            .unwrap();
        assert_eq!(p, q);
    }
}
