use voxsr::diffmath::{backward_into_store, fd, ChunkGrads, Tape};
use voxsr::fieldrecon::*;
use voxsr::render::*;
use voxsr::scenegen::rng_from_seed;
use voxsr::teacher::{train_teacher, TeacherConfig};
use voxsr::voxelgrid::GridGeom;
use voxsr::diffmath::ParamStore;
use rand::Rng;

fn main() {
    let corpus = voxsr::scenegen::texture_corpus(77, 3, 36);
    let tcfg = TeacherConfig { feature_dim: 8, crop: 16, batch: 2, epochs: 1, lr: 1e-3, seed: 3, holdout: 1, lr_decay: 1.0 };
    let teacher = train_teacher(&corpus, &tcfg).unwrap().0;
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(4);
    let geom = GridGeom::new([6, 6, 6], [-1.0; 3], [1.0; 3]).unwrap();
    let cfg = ReconConfig { grid_dim: 6, ..Default::default() };
    let handle = FieldHandle::register(&mut store, "", geom, &teacher, "h", "s0", &cfg, &mut rng).unwrap();
    let mut field = DistilledFeatureField { store, handle };

    let mut rng = rng_from_seed(17);
    {
        let e = field.store.entry_mut(field.handle.density);
        for v in e.values.iter_mut() { *v = rng.random_range(-2.0..3.0); }
        let e = field.store.entry_mut(field.handle.feature);
        for v in e.values.iter_mut() { *v = rng.random_range(-0.5..0.5); }
    }
    let c2w = voxsr::camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0]);
    let cam = voxsr::camera::Camera::new(9, 9, 12.0, c2w, 0.5, 6.0).unwrap();
    let ray = cam.pixel_ray(4, 4);
    let target_rgb = [0.2, 0.5, 0.8];
    let target_feat: Vec<f64> = (0..field.handle.feature_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let opts = RenderOpts::training();

    let fc = FieldCtx { store: &field.store, field: &field.handle };
    let prep = prepare_ray(fc, &ray, &opts, false).unwrap().unwrap();
    eprintln!("K={} active={}", prep.samples.len(), prep.active.len());
    let mut tape = Tape::new();
    let losses = base_ray_loss_prepared(&mut tape, fc, &ray, &prep, &target_rgb, &target_feat, 0.5, &opts, 1.0).unwrap();
    eprintln!("loss = {}", tape.scalar(losses.total));
    backward_into_store(&mut tape, &mut field.store, losses.total).unwrap();

    let handle = field.handle.clone();
    let did = field.handle.density;
    for term in ["photo", "feat", "total"] {
        // analytic grads for this term alone
        field.store.zero_grads();
        let mut t2 = Tape::new();
        let fc2 = FieldCtx { store: &field.store, field: &handle };
        let l2 = base_ray_loss_prepared(&mut t2, fc2, &ray, &prep, &target_rgb, &target_feat, 0.5, &opts, 1.0).unwrap();
        let pick = |l: &voxsr::render::RayLosses| match term {
            "photo" => l.photo,
            "feat" => l.feat,
            _ => l.total,
        };
        let mut grads = ChunkGrads::new(&field.store);
        let target = pick(&l2);
        t2.backward(&field.store, target, &mut grads).unwrap();
        grads.merge_into(&mut field.store);
        let err = fd::max_grad_error(
            &mut field.store,
            &[did],
            |s| {
                let fcx = FieldCtx { store: s, field: &handle };
                let mut t = Tape::new();
                let l = base_ray_loss_prepared(&mut t, fcx, &ray, &prep, &target_rgb, &target_feat, 0.5, &opts, 1.0).unwrap();
                t.scalar(pick(&l))
            },
            1e-4,
        );
        eprintln!("density via {term}: max rel err {err:.3e}");
    }
}
