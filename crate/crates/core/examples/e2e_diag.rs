use std::time::Instant;
use voxsr::fieldrecon::{reconstruct_scene, ReconConfig};
use voxsr::scenegen::{generate_scene, hemisphere_cameras, oracle_render, texture_corpus, CameraView};
use voxsr::teacher::{train_teacher, TeacherConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr_size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let grid_dim: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(256);

    let t0 = Instant::now();
    let corpus = texture_corpus(1000, 48, 64);
    let tcfg = TeacherConfig {
        feature_dim: 16,
        crop: 32,
        batch: 8,
        epochs: 10,
        lr: 1e-3,
        seed: 7,
        holdout: 6,
        lr_decay: 0.1,
    };
    let (teacher, tlog) = train_teacher(&corpus, &tcfg).unwrap();
    eprintln!(
        "teacher: {} steps, last L1 {:.4}, holdout psnr {:.2} dB  [{:.0}s]",
        tlog.steps,
        tlog.epoch_mean_l1.last().unwrap(),
        tlog.holdout_psnr_db,
        t0.elapsed().as_secs_f64()
    );

    let spec = generate_scene(42);
    let t1 = Instant::now();
    let views: Vec<CameraView> = hemisphere_cameras(42, 20, lr_size, lr_size, 1.25)
        .into_iter()
        .map(|camera| {
            // LR ground truth by the paper protocol: render HR, box filter
            let hr = oracle_render(&spec, &camera.scaled(4.0).unwrap());
            let image = hr.downsample_box(4).unwrap();
            CameraView { camera, image }
        })
        .collect();
    eprintln!("views rendered [{:.0}s]", t1.elapsed().as_secs_f64());

    let t2 = Instant::now();
    let cfg = ReconConfig {
        iterations: iters,
        batch_rays: batch,
        grid_dim,
        seed: 1,
        ..Default::default()
    };
    let (field, log) = reconstruct_scene(
        &views, &teacher, "diag-hash", "scene42", spec.bbox_min, spec.bbox_max, &cfg,
    )
    .unwrap();
    let dt = t2.elapsed().as_secs_f64();
    eprintln!(
        "recon: {} iters in {:.0}s ({:.3} s/iter), train psnr {:.2} dB",
        iters, dt, dt / iters as f64, log.train_psnr_db
    );
    for m in (0..iters).step_by((iters / 10).max(1)) {
        eprintln!("  iter {m}: photo {:.5} feat {:.4}", log.photo_loss[m], log.feat_loss[m]);
    }
    eprintln!(
        "  final: photo {:.5} feat {:.4} (feat first {:.4})",
        log.photo_loss.last().unwrap(),
        log.feat_loss.last().unwrap(),
        log.feat_loss[0]
    );
    let _ = field;
}
