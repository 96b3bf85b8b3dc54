use voxsr::img::Image;
use voxsr::scenegen::texture_corpus;
use voxsr::teacher::{train_teacher, TeacherConfig};

fn main() {
    let corpus: Vec<Image> = texture_corpus(20, 12, 36)
        .into_iter()
        .filter(|img| img.data.iter().all(|&v| v < 0.99))
        .take(1)
        .collect();
    let cfg = TeacherConfig {
        feature_dim: 8,
        crop: 32,
        batch: 1,
        epochs: 400,
        lr: 3e-3,
        seed: 5,
        holdout: 0,
        lr_decay: 0.05,
    };
    let (bundle, log) = train_teacher(&corpus, &cfg).unwrap();
    for (i, l) in log.epoch_mean_l1.iter().enumerate() {
        if i % 25 == 0 || i + 1 == log.epoch_mean_l1.len() {
            eprintln!("epoch {i}: crop L1 {l:.5}");
        }
    }
    let rec = bundle.reconstruct(&corpus[0]).unwrap();
    let l1 = rec.mean_abs_diff(&corpus[0]);
    eprintln!("full-image recon L1: {l1:.5}, holdout psnr {:.2}", log.holdout_psnr_db);
}
