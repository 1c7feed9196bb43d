//! The user-facing commands: synthetic scene emission, pair matching with
//! artifacts, target-view rendering, dataset evaluation, and a self-check
//! suite. Every command is deterministic given a config and seed.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::Vector2;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{
    classify, overlap_score, pair_overlap_from_matcher, summarize, PairRecord, SummaryBlock,
};
use crate::geometry::{
    compose, epipolar_line, essential_from_pose, fundamental_from_essential, geodesic_distance,
    invert, translation_angular_error, Pose,
};
use crate::imaging::{
    mse, psnr, save_depth_png16, save_mask_png, save_png, ssim, ConfidenceMask, Image,
};
use crate::losses::{loss_img, loss_pose, total_loss, LossReport};
use crate::matching::write_flo;
use crate::pipeline::{estimate_pose, match_pair, PipelineParams};
use crate::pyramid::extract_pyramid;
use crate::renderer::{render_image, window_features, ContextView, RendererParams};
use crate::scene_io::{save_scene, save_scene_dir, SceneDir, SceneFrame};
use crate::synth::{make_rig, make_scene, render_gt, SceneKind};

pub const DEFAULT_SYNTH_FRAMES: usize = 3;
pub const DEFAULT_SYNTH_BASELINE: f64 = 0.3;

/// Generates a synthetic scene, renders every rig camera, and writes the
/// directory in the ingestion format plus the scene description itself.
pub fn cmd_synth(
    seed: u64,
    out_dir: &Path,
    n_frames: usize,
    baseline: f64,
    cfg: &Config,
) -> Result<SceneDir> {
    if n_frames < 3 {
        return Err(Error::BadRange(format!(
            "need at least 3 frames, asked for {n_frames}"
        )));
    }
    cfg.validate()?;
    let scene = make_scene(seed, SceneKind::TexturedPlane, 32)?;
    let rig = make_rig(seed, n_frames, cfg.image_size, baseline)?;
    let mut frames = Vec::with_capacity(n_frames);
    let mut images = Vec::with_capacity(n_frames);
    for (cam, &fid) in rig.cameras.iter().zip(&rig.frame_ids) {
        let (img, _) = render_gt(&scene, cam)?;
        frames.push(SceneFrame { frame_id: fid, camera: *cam, has_image: true });
        images.push(img);
    }
    save_scene_dir(out_dir, &frames, &images)?;
    save_scene(&scene, &out_dir.join("scene.json"), &out_dir.join("points.bin"))?;
    SceneDir::load(out_dir)
}

fn out_or(out: Option<&Path>, fallback: &Path) -> PathBuf {
    out.map(|p| p.to_path_buf()).unwrap_or_else(|| fallback.to_path_buf())
}

/// GT relative pose mapping frame `a` coordinates into frame `b`.
fn gt_relative(sd: &SceneDir, a: usize, b: usize) -> Pose {
    compose(&sd.frames[b].camera.pose, &invert(&sd.frames[a].camera.pose))
}

/// Burns epipolar lines of a sparse grid of first-image pixels into a copy
/// of the second image.
pub fn epipolar_overlay(img2: &Image, pose_12: &Pose, sd: &SceneDir, i1: usize, i2: usize) -> Result<Image> {
    let f = fundamental_from_essential(
        &essential_from_pose(pose_12)?,
        &sd.frames[i1].camera.k,
        &sd.frames[i2].camera.k,
    );
    let (h, w) = (img2.h(), img2.w());
    let mut data = img2.data().clone();
    let (h1, w1) = (sd.frames[i1].camera.h, sd.frames[i1].camera.w);
    for gy in 0..5usize {
        for gx in 0..5usize {
            let p1 = Vector2::new(
                (gx as f64 + 0.5) * w1 as f64 / 5.0,
                (gy as f64 + 0.5) * h1 as f64 / 5.0,
            );
            let line = match epipolar_line(&f, &p1) {
                Ok(l) => l,
                Err(_) => continue,
            };
            // March along the dominant axis so the drawn trace is connected.
            if line.b.abs() >= line.a.abs() {
                for x in 0..w {
                    let y = (-(line.a * x as f64 + line.c) / line.b).round();
                    if y >= 0.0 && y < h as f64 {
                        data[(y as usize, x, 0)] = 1.0;
                        data[(y as usize, x, 1)] = 0.0;
                        data[(y as usize, x, 2)] = 0.0;
                    }
                }
            } else {
                for y in 0..h {
                    let x = (-(line.b * y as f64 + line.c) / line.a).round();
                    if x >= 0.0 && x < w as f64 {
                        data[(y, x as usize, 0)] = 1.0;
                        data[(y, x as usize, 1)] = 0.0;
                        data[(y, x as usize, 2)] = 0.0;
                    }
                }
            }
        }
    }
    Image::new(data)
}

/// Matches a frame pair and writes the pose, flow, confidence, and epipolar
/// overlay artifacts.
pub fn cmd_estimate(
    scene_dir: &Path,
    i1: usize,
    i2: usize,
    seed: u64,
    cfg: &Config,
    use_gt_pose: bool,
    out: Option<&Path>,
) -> Result<()> {
    let sd = SceneDir::load(scene_dir)?;
    if i1 >= sd.frames.len() || i2 >= sd.frames.len() {
        return Err(Error::BadRange(format!(
            "pair ({i1}, {i2}) out of range for {} frames",
            sd.frames.len()
        )));
    }
    let img1 = sd.load_image(i1)?;
    let img2 = sd.load_image(i2)?;
    let params = PipelineParams::seeded(seed, cfg)?;
    let (pose, flow, mask) = estimate_pose(&img1, &img2, &params, cfg)?;

    let out_dir = out_or(out, scene_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("pose.json"),
        serde_json::to_string_pretty(&pose.to_json()).expect("pose serializes"),
    )?;
    write_flo(&flow, &out_dir.join("flow.flo"))?;
    save_mask_png(&mask, &out_dir.join("mask.png"))?;
    let overlay_pose = if use_gt_pose { gt_relative(&sd, i1, i2) } else { pose };
    let overlay = epipolar_overlay(&img2, &overlay_pose, &sd, i1, i2)?;
    save_png(&overlay, &out_dir.join("overlay.png"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseSource {
    Gt,
    Estimated,
}

impl std::str::FromStr for PoseSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(PoseSource::Gt),
            "estimated" => Ok(PoseSource::Estimated),
            other => Err(Error::InvalidConfig(format!(
                "pose source must be gt or estimated, got {other:?}"
            ))),
        }
    }
}

/// Image metrics plus the loss breakdown for one rendered target.
#[derive(Debug, Serialize)]
pub struct RenderReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub loss: LossReport,
}

/// Renders the target frame from the two context frames.
///
/// The relative pose of the target w.r.t. the first context is always taken
/// from the camera file (the protocol provides it); the pose tying the two
/// contexts together comes from the camera file or from the estimator
/// according to `source`. The target image itself is touched only to compute
/// the report, which is skipped when the frame has no image.
pub fn cmd_render(
    scene_dir: &Path,
    i1: usize,
    i2: usize,
    it: usize,
    source: PoseSource,
    seed: u64,
    cfg: &Config,
    oracle_scoring: bool,
    out: Option<&Path>,
) -> Result<Option<RenderReport>> {
    let sd = SceneDir::load(scene_dir)?;
    let n = sd.frames.len();
    if i1 >= n || i2 >= n || it >= n {
        return Err(Error::BadRange(format!(
            "frames ({i1}, {i2}, {it}) out of range for {n} frames"
        )));
    }
    let img1 = sd.load_image(i1)?;
    let img2 = sd.load_image(i2)?;
    let params = PipelineParams::seeded(seed, cfg)?;

    let p_1t = gt_relative(&sd, it, i1);
    let (p_2t, pose_err) = match source {
        PoseSource::Gt => (gt_relative(&sd, it, i2), None),
        PoseSource::Estimated => {
            let (est, _, _) = estimate_pose(&img1, &img2, &params, cfg)?;
            (compose(&est, &p_1t), Some(loss_pose(&est, &gt_relative(&sd, i1, i2))))
        }
    };

    let pyr1;
    let pyr2;
    let win1;
    let win2;
    let (f1, f2, rparams) = if oracle_scoring {
        win1 = window_features(&img1, 1);
        win2 = window_features(&img2, 1);
        let rp = RendererParams::oracle(win1.c());
        (&win1, &win2, rp)
    } else {
        pyr1 = extract_pyramid(&img1, &params.pyramid)?;
        pyr2 = extract_pyramid(&img2, &params.pyramid)?;
        (pyr1.finest(), pyr2.finest(), params.renderer.clone())
    };
    let ctx1 = ContextView { image: &img1, features: f1, k: sd.frames[i1].camera.k };
    let ctx2 = ContextView { image: &img2, features: f2, k: sd.frames[i2].camera.k };

    // A target-only frame has no stored image to size the output by; the
    // contexts share the sensor in this format.
    let (h, w) = if sd.frames[it].has_image {
        (sd.frames[it].camera.h, sd.frames[it].camera.w)
    } else {
        (img1.h(), img1.w())
    };
    let (render, depth) = render_image(
        &sd.frames[it].camera.k,
        h,
        w,
        &p_1t,
        &p_2t,
        &ctx1,
        &ctx2,
        &rparams,
        cfg.near,
        cfg.far,
        cfg.depth_samples,
    )?;

    let out_dir = out_or(out, scene_dir);
    std::fs::create_dir_all(&out_dir)?;
    save_png(&render, &out_dir.join("render.png"))?;
    save_depth_png16(&depth, cfg.far, &out_dir.join("depth.png"))?;

    if !sd.frames[it].has_image {
        return Ok(None);
    }
    let target = sd.load_image(it)?;
    let all = ConfidenceMask::ones(target.h(), target.w());
    let l_img = loss_img(&render, &target, &all.data)?;
    let (l_rot, l_trans) = pose_err.unwrap_or((0.0, 0.0));
    let report = RenderReport {
        psnr: psnr(&render, &target)?,
        ssim: ssim(&render, &target)?,
        mse: mse(&render, &target)?,
        loss: total_loss(l_img, 0.0, l_rot, l_trans, 0.0, cfg.lambda_tri),
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(Some(report))
}

/// One evaluated scene: the record if it was usable, the reason otherwise.
fn eval_scene(
    scene_path: &Path,
    params: &PipelineParams,
    cfg: &Config,
    oracle_scoring: bool,
) -> Result<PairRecord> {
    let sd = SceneDir::load(scene_path)?;
    let n = sd.frames.len();
    let (i1, it, i2) = crate::eval::frame_skip_select(n)?;
    if i2 >= n {
        return Err(Error::BadRange(format!(
            "frame-skip selection ({i1}, {it}, {i2}) exceeds the {n} available frames"
        )));
    }
    let img1 = sd.load_image(i1)?;
    let img2 = sd.load_image(i2)?;
    let target = sd.load_image(it)?;

    let m = match_pair(&img1, &img2, params, cfg)?;
    let (o12, o21) = pair_overlap_from_matcher(&m.flow_12, &m.flow_21, &m.mask_12, &m.mask_21)?;
    let overlap = overlap_score(o12, o21)?;
    let split = classify(overlap, cfg.overlap_small, cfg.overlap_large);

    let gt_12 = gt_relative(&sd, i1, i2);
    let rot_err_deg = geodesic_distance(&m.pose.r, &gt_12.r).to_degrees();
    let trans_angular_deg =
        translation_angular_error(&m.pose.t, &gt_12.t).unwrap_or(180.0);
    let trans_abs_m = (m.pose.t.vector() - gt_12.t.vector()).norm();

    let p_1t = gt_relative(&sd, it, i1);
    let p_2t = compose(&m.pose, &p_1t);
    let pyr1;
    let pyr2;
    let win1;
    let win2;
    let (f1, f2, rparams) = if oracle_scoring {
        win1 = window_features(&img1, 1);
        win2 = window_features(&img2, 1);
        let rp = RendererParams::oracle(win1.c());
        (&win1, &win2, rp)
    } else {
        pyr1 = extract_pyramid(&img1, &params.pyramid)?;
        pyr2 = extract_pyramid(&img2, &params.pyramid)?;
        (pyr1.finest(), pyr2.finest(), params.renderer.clone())
    };
    let ctx1 = ContextView { image: &img1, features: f1, k: sd.frames[i1].camera.k };
    let ctx2 = ContextView { image: &img2, features: f2, k: sd.frames[i2].camera.k };
    let (render, _) = render_image(
        &sd.frames[it].camera.k,
        target.h(),
        target.w(),
        &p_1t,
        &p_2t,
        &ctx1,
        &ctx2,
        &rparams,
        cfg.near,
        cfg.far,
        cfg.depth_samples,
    )?;

    let scene_id = scene_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| scene_path.display().to_string());
    Ok(PairRecord {
        scene_id,
        i1,
        it,
        i2,
        overlap,
        split,
        rot_err_deg,
        trans_angular_deg,
        trans_abs_m,
        psnr: psnr(&render, &target)?,
        ssim: ssim(&render, &target)?,
        mse: mse(&render, &target)?,
    })
}

fn records_csv(records: &[PairRecord]) -> String {
    let mut s = String::from(
        "scene_id,i1,it,i2,overlap,split,rot_err_deg,trans_angular_deg,trans_abs_m,psnr,ssim,mse\n",
    );
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.scene_id, r.i1, r.it, r.i2, r.overlap, r.split, r.rot_err_deg,
            r.trans_angular_deg, r.trans_abs_m, r.psnr, r.ssim, r.mse,
        ));
    }
    s
}

fn summary_csv(blocks: &[SummaryBlock]) -> String {
    let mut s = String::from("split,metric,avg,median,std,count\n");
    for b in blocks {
        for (metric, m) in &b.metrics {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.split, metric, m.avg, m.median, m.std, m.count
            ));
        }
    }
    s
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub records: Vec<PairRecord>,
    pub blocks: Vec<SummaryBlock>,
    pub skipped: Vec<(String, String)>,
}

/// Evaluates every scene under `root` and writes the records and per-split
/// summaries as CSV and JSON. Malformed scenes are skipped and logged; the
/// call fails only when no scene survives.
pub fn cmd_eval(
    root: &Path,
    seed: u64,
    cfg: &Config,
    oracle_scoring: bool,
    jobs: usize,
    out: Option<&Path>,
    log: &mut dyn std::io::Write,
) -> Result<EvalOutcome> {
    let mut scene_paths: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(crate::scene_io::CAMERAS_FILE).is_file())
        .collect();
    scene_paths.sort();
    if scene_paths.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no scene directories under {}",
            root.display()
        )));
    }

    let params = PipelineParams::seeded(seed, cfg)?;
    let mut results: Vec<Option<Result<PairRecord>>> = (0..scene_paths.len()).map(|_| None).collect();
    if jobs <= 1 {
        for (i, p) in scene_paths.iter().enumerate() {
            results[i] = Some(eval_scene(p, &params, cfg, oracle_scoring));
        }
    } else {
        // Workers pull scene indices from a shared cursor; each owns cloned
        // pipeline state, and results land in their slots, so assembly order
        // never depends on scheduling.
        let cursor = AtomicUsize::new(0);
        let slots = Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(scene_paths.len()) {
                let params = params.clone();
                let cfg = cfg.clone();
                let cursor = &cursor;
                let slots = &slots;
                let scene_paths = &scene_paths;
                scope.spawn(move || loop {
                    let i = cursor.fetch_add(1, Ordering::SeqCst);
                    if i >= scene_paths.len() {
                        break;
                    }
                    let r = eval_scene(&scene_paths[i], &params, &cfg, oracle_scoring);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
    }

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (path, slot) in scene_paths.iter().zip(results) {
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match slot.expect("every slot filled") {
            Ok(rec) => records.push(rec),
            Err(e) => {
                writeln!(log, "skipping scene {name}: {e}")?;
                skipped.push((name, e.to_string()));
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("every scene failed evaluation".into()));
    }
    let blocks = summarize(&records)?;
    for split in ["small", "medium", "large"] {
        if !blocks.iter().any(|b| b.split == split) {
            writeln!(log, "split {split}: no pairs")?;
        }
    }

    let out_dir = out_or(out, root);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("records.csv"), records_csv(&records))?;
    std::fs::write(
        out_dir.join("records.json"),
        serde_json::to_string_pretty(&records).expect("records serialize"),
    )?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(&blocks))?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&blocks).expect("summary serializes"),
    )?;
    Ok(EvalOutcome { records, blocks, skipped })
}

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct CheckSummary {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn run_check(name: &str, f: impl FnOnce() -> Result<String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult { name: name.into(), ok: true, detail },
        Err(e) => CheckResult { name: name.into(), ok: false, detail: e.to_string() },
    }
}

fn ensure(cond: bool, msg: String) -> Result<String> {
    if cond {
        Ok(msg)
    } else {
        Err(Error::BadRange(msg))
    }
}

/// Runs the invariant and oracle suite; `weights` optionally points at a
/// parameter blob that must load cleanly.
pub fn cmd_check(seed: u64, weights: Option<&Path>) -> CheckSummary {
    use crate::geometry::{
        random_rotation, rot6d_to_rotation, rotation_to_rot6d, Rotation, Translation,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut checks = Vec::new();

    checks.push(run_check("rot6d_round_trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            let back = rot6d_to_rotation(&rotation_to_rot6d(&r))?;
            worst = worst.max((r.matrix() - back.matrix()).abs().max());
        }
        ensure(worst <= 1e-9, format!("max round-trip error {worst:.3e}"))
    }));

    checks.push(run_check("geodesic_known_angle", || {
        let a = Rotation::rx(30f64.to_radians());
        let b = Rotation::rx(75f64.to_radians());
        let err = (geodesic_distance(&a, &b).to_degrees() - 45.0).abs();
        ensure(err <= 1e-9, format!("|angle - 45| = {err:.3e} deg"))
    }));

    checks.push(run_check("compose_matches_matrix_product", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let p = Pose::new(
                random_rotation(&mut rng),
                Translation::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()),
            );
            let q = Pose::new(
                random_rotation(&mut rng),
                Translation::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()),
            );
            let d = (compose(&p, &q).matrix() - p.matrix() * q.matrix()).abs().max();
            worst = worst.max(d);
        }
        ensure(worst <= 1e-12, format!("max deviation {worst:.3e}"))
    }));

    checks.push(run_check("epipolar_constraint_on_synth", || {
        let scene = make_scene(seed.wrapping_add(2), SceneKind::Points, 40)?;
        let rig = make_rig(seed.wrapping_add(2), 2, 64, 0.25)?;
        let (c1, c2) = (&rig.cameras[0], &rig.cameras[1]);
        let pose_12 = compose(&c2.pose, &invert(&c1.pose));
        let f = fundamental_from_essential(&essential_from_pose(&pose_12)?, &c1.k, &c2.k);
        let mut worst: f64 = 0.0;
        let mut used = 0;
        for p in &scene.points {
            let Ok((px1, _)) = crate::geometry::project(&c1.k, &c1.pose, p) else { continue };
            let Ok((px2, _)) = crate::geometry::project(&c2.k, &c2.pose, p) else { continue };
            let line = epipolar_line(&f, &px1)?;
            worst = worst.max(crate::geometry::epipolar_distance(&px2, &line));
            used += 1;
        }
        ensure(
            used > 10 && worst <= 1e-6,
            format!("max point-to-line distance {worst:.3e} px over {used} points"),
        )
    }));

    checks.push(run_check("cost_volume_matches_brute_force", || {
        use crate::correlation::build_cost_volume;
        use crate::pyramid::FeatureMap;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let mut f1 = FeatureMap::new(ndarray::Array3::from_shape_fn((4, 5, 8), |_| {
            rng.random::<f64>() - 0.5
        }))?;
        let mut f2 = FeatureMap::new(ndarray::Array3::from_shape_fn((3, 6, 8), |_| {
            rng.random::<f64>() - 0.5
        }))?;
        f1.normalize();
        f2.normalize();
        let c = build_cost_volume(&f1, &f2)?;
        let mut worst: f64 = 0.0;
        for y1 in 0..4 {
            for x1 in 0..5 {
                for y2 in 0..3 {
                    for x2 in 0..6 {
                        let mut dot = 0.0;
                        for k in 0..8 {
                            dot += f1.data()[(y1, x1, k)] * f2.data()[(y2, x2, k)];
                        }
                        worst = worst.max((c.at(y1, x1, y2, x2) - dot).abs());
                    }
                }
            }
        }
        ensure(worst <= 1e-12, format!("max deviation {worst:.3e}"))
    }));

    checks.push(run_check("cyclic_mask_tau_zero", || {
        use crate::imaging::{FlowField, FlowResolution};
        use crate::matching::cyclic_mask;
        let mut fwd = ndarray::Array3::zeros((4, 4, 2));
        fwd[(1, 1, 0)] = 1.0;
        let fwd = FlowField::new(fwd, FlowResolution::Feature)?;
        let bwd = FlowField::zeros(4, 4, FlowResolution::Feature);
        let tight = cyclic_mask(&fwd, &bwd, 0.0)?;
        let loose = cyclic_mask(&fwd, &bwd, 2.0)?;
        ensure(
            tight.count() <= loose.count(),
            format!("tau=0 keeps {} cells, tau=2 keeps {}", tight.count(), loose.count()),
        )
    }));

    checks.push(run_check("loss_zero_at_ground_truth", || {
        let (scene, c1, c2) = loss_rig(seed.wrapping_add(4));
        let gt = compose(&c2.pose, &invert(&c1.pose));
        let (l_rot, l_trans) = loss_pose(&gt, &gt);
        let (f12, m12) = crate::synth::gt_flow(&scene, &c1, &c2)?;
        let (f21, m21) = crate::synth::gt_flow(&scene, &c2, &c1)?;
        let (img1, d1) = render_gt(&scene, &c1)?;
        let (img2, _) = render_gt(&scene, &c2)?;
        let l_match = crate::losses::loss_match(&f12, &f21, &m12, &m21, &img1, &img2)?;
        let coords: Vec<(usize, usize)> = (4..44).step_by(8).flat_map(|y| {
            (4..44).step_by(8).map(move |x| (y, x))
        }).collect();
        let l_tri = crate::losses::loss_tri(
            &d1, &Pose::identity(), &gt, &c1.k, &c2.k, &f12, &m12, &coords, 1.0,
        )?;
        ensure(
            l_rot + l_trans == 0.0 && l_tri < 1e-6 && l_match < 1e-3,
            format!("l_pose {} l_tri {l_tri:.2e} l_match {l_match:.2e}", l_rot + l_trans),
        )
    }));

    checks.push(run_check("gradient_check", || {
        use crate::geometry::Rot6D;
        use crate::losses::{grad_check, grad_geodesic_rot6d, grad_translation_l2};
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
        let mut worst: f64 = 0.0;
        let mut used = 0;
        while used < 20 {
            let gt = random_rotation(&mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let Ok(r6) = Rot6D::from_slice(&x) else { continue };
            let Ok(g) = grad_geodesic_rot6d(&r6, &gt) else { continue };
            let f = |v: &[f64]| {
                Rot6D::from_slice(v)
                    .and_then(|r6| rot6d_to_rotation(&r6))
                    .map(|r| geodesic_distance(&r, &gt))
                    .unwrap_or(f64::NAN)
            };
            let rel = grad_check(f, &x, &g, 1e-6);
            if !rel.is_finite() {
                continue;
            }
            worst = worst.max(rel);
            used += 1;
        }
        let t_gt = Translation::new(0.3, -0.2, 0.9);
        let t = Translation::new(-0.5, 0.4, 0.1);
        let g = grad_translation_l2(&t, &t_gt);
        let f = |v: &[f64]| (nalgebra::Vector3::new(v[0], v[1], v[2]) - t_gt.0).norm_squared();
        let rel_t = grad_check(f, &[t.0.x, t.0.y, t.0.z], &g, 1e-6);
        worst = worst.max(rel_t);
        ensure(worst <= 1e-4, format!("max relative error {worst:.3e}"))
    }));

    checks.push(run_check("renderer_weights_normalized", || {
        use crate::renderer::{epipolar_gather, render_pixel, sample_depths, RayBatch};
        let (scene, c1, c2) = loss_rig(seed.wrapping_add(6));
        let (img1, _) = render_gt(&scene, &c1)?;
        let (img2, _) = render_gt(&scene, &c2)?;
        let w1 = window_features(&img1, 1);
        let w2 = window_features(&img2, 1);
        let ctx1 = ContextView { image: &img1, features: &w1, k: c1.k };
        let ctx2 = ContextView { image: &img2, features: &w2, k: c2.k };
        let rays = RayBatch {
            k_target: c1.k,
            p_1t: Pose::identity(),
            p_2t: compose(&c2.pose, &invert(&c1.pose)),
            pixels: (4..44).step_by(5).map(|i| (i as f64, i as f64)).collect(),
            near: 1.0,
            far: 8.0,
            s: 16,
        };
        let depths = sample_depths(1.0, 8.0, 16, false, 0)?;
        let set = epipolar_gather(&rays, &ctx1, &ctx2, &depths)?;
        let p = RendererParams::oracle(w1.c());
        let mut worst: f64 = 0.0;
        for ray in &set {
            let (_, _, weights) = render_pixel(ray, &p)?;
            worst = worst.max((weights.iter().sum::<f64>() - 1.0).abs());
        }
        ensure(worst <= 1e-9, format!("max |sum - 1| = {worst:.3e}"))
    }));

    checks.push(run_check("weights_blob", || {
        let cfg = Config { image_size: 64, ..Config::default() };
        let params = PipelineParams::seeded(seed, &cfg)?;
        if let Some(path) = weights {
            let store = crate::weights::WeightStore::load(path)?;
            return ensure(
                !store.tensors.is_empty(),
                format!("loaded {} tensors from {}", store.tensors.len(), path.display()),
            );
        }
        let dir = std::env::temp_dir().join(format!("coponerf-check-{seed}-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("params.bin");
        params.save(&path)?;
        let back = PipelineParams::load(&path, &cfg)?;
        let same = back == params;
        // A flipped header byte must be rejected, never half-loaded.
        let mut raw = std::fs::read(&path)?;
        raw[9] ^= 0xff;
        std::fs::write(&path, &raw)?;
        let corrupt_rejected = crate::weights::WeightStore::load(&path).is_err();
        std::fs::remove_dir_all(&dir).ok();
        ensure(
            same && corrupt_rejected,
            format!("round trip equal: {same}, corruption rejected: {corrupt_rejected}"),
        )
    }));

    let passed = checks.iter().all(|c| c.ok);
    CheckSummary { passed, checks }
}

/// Integer-disparity two-camera rig over a gently textured plane; ground
/// truth flow lands exactly on pixel centers.
fn loss_rig(seed: u64) -> (crate::synth::Scene, crate::synth::Camera, crate::synth::Camera) {
    use crate::geometry::Intrinsics;
    use crate::synth::{fronto_plane, Camera, Scene};
    let mut plane = fronto_plane(3.0, 12.0, seed);
    for wave in &mut plane.waves {
        wave.freq_u *= 0.25;
        wave.freq_v *= 0.25;
    }
    let scene = Scene {
        seed,
        points: vec![nalgebra::Vector3::new(0.0, 0.0, 3.0)],
        colors: vec![[0.5; 3]],
        planes: vec![plane],
    };
    let hw = 48;
    let f = hw as f64;
    let c = (hw as f64 - 1.0) / 2.0;
    let k = Intrinsics::new(f, f, c, c).unwrap();
    let cam1 = Camera {
        k,
        pose: Pose::identity(),
        h: hw,
        w: hw,
    };
    let cam2 = Camera {
        k,
        pose: Pose::new(
            crate::geometry::Rotation::identity(),
            crate::geometry::Translation::new(-0.25, 0.0, 0.0),
        ),
        h: hw,
        w: hw,
    };
    (scene, cam1, cam2)
}
