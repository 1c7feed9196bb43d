use coponerf::config::Config;
use coponerf::geometry::{compose, invert};
use coponerf::imaging::psnr;
use coponerf::renderer::{render_image, window_features, ContextView, RendererParams};
use coponerf::synth::{make_rig, make_scene, render_gt, SceneKind};

fn run(scale: f64, s: usize, near: f64, far: f64, report_map: bool) {
    let cfg = Config { image_size: 64, near, far, depth_samples: s, ..Config::default() };
    let mut psnrs = Vec::new();
    for seed in [3u64, 5, 9] {
        let mut scene = make_scene(seed, SceneKind::TexturedPlane, 32).unwrap();
        for plane in &mut scene.planes {
            for wave in &mut plane.waves {
                wave.freq_u *= scale;
                wave.freq_v *= scale;
            }
        }
        let rig = make_rig(seed, 3, 64, 0.25).unwrap();
        let (img1, _) = render_gt(&scene, &rig.cameras[0]).unwrap();
        let (img2, _) = render_gt(&scene, &rig.cameras[2]).unwrap();
        let (gt_t, _) = render_gt(&scene, &rig.cameras[1]).unwrap();
        let w1 = window_features(&img1, 1);
        let w2 = window_features(&img2, 1);
        let ctx1 = ContextView { image: &img1, features: &w1, k: rig.cameras[0].k };
        let ctx2 = ContextView { image: &img2, features: &w2, k: rig.cameras[2].k };
        let p_1t = compose(&rig.cameras[0].pose, &invert(&rig.cameras[1].pose));
        let p_2t = compose(&rig.cameras[2].pose, &invert(&rig.cameras[1].pose));
        let rp = RendererParams::oracle(w1.c());
        let (img, _) = render_image(
            &rig.cameras[1].k, 64, 64, &p_1t, &p_2t, &ctx1, &ctx2, &rp,
            cfg.near, cfg.far, cfg.depth_samples,
        )
        .unwrap();
        psnrs.push(psnr(&img, &gt_t).unwrap());
        if report_map && seed == 3 {
            // per-8-row band rms error and top offenders
            let mut worst: Vec<(f64, usize, usize)> = Vec::new();
            for band in 0..8 {
                let mut acc = 0.0;
                let mut n = 0;
                for y in band * 8..band * 8 + 8 {
                    for x in 0..64 {
                        let a = img.pixel(y, x);
                        let b = gt_t.pixel(y, x);
                        let e2: f64 = (0..3).map(|ch| (a[ch] - b[ch]) * (a[ch] - b[ch])).sum();
                        acc += e2;
                        n += 3;
                        worst.push((e2, y, x));
                    }
                }
                print!(" band{band}:{:.4}", (acc / n as f64).sqrt());
            }
            worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            println!();
            println!(
                "  worst: {:?}",
                worst[..6].iter().map(|(e, y, x)| format!("({y},{x})={:.3}", e.sqrt())).collect::<Vec<_>>()
            );
        }
    }
    println!(
        "scale {scale} S {s} [{near},{far}]: psnrs {:?}",
        psnrs.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>()
    );
}

fn main() {
    run(0.25, 64, 1.0, 8.0, true);
    run(1.0, 256, 1.0, 8.0, false);
    run(1.0, 512, 1.0, 8.0, false);
    run(0.25, 256, 1.0, 8.0, false);
    run(1.0, 256, 2.0, 5.0, false);
}
