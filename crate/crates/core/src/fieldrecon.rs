//! Per-scene reconstruction of a distilled feature field from LR views:
//! density grid + feature grid + a small view-conditioning MLP, optimized
//! against a photometric loss plus a feature-distillation loss tied to the
//! frozen 2D teacher.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffmath::{
    Adam, AdamConfig, ChunkGrads, EntryId, FinalActivation, Mlp, MlpSpec, ParamStore, Tape,
};
use crate::img::Image;
use crate::metrics::{psnr, ssim, MetricsRecord};
use crate::render::{self, FieldCtx, RenderOpts};
use crate::scenegen::{rng_from_seed, CameraView};
use crate::teacher::{FeatureMap, TeacherBundle};
use crate::vec3::Vec3;
use crate::voxelgrid::{gather_neighbors, GridGeom, NeighborSample, VoxelGrid};
use crate::{Error, Result};

/// Voxel feature channels (the raw grid side, before view conditioning).
pub const C_RAW: usize = 12;
/// Frequencies in the direction encoding.
pub const PE_FREQS: usize = 4;
/// Raw density value grids initialize to (empty-scene prior).
pub const DENSITY_INIT: f64 = -5.0;
/// Length of [`posenc_dir`] output.
pub const PE_DIM: usize = 3 + 3 * 2 * PE_FREQS;

/// Sinusoidal direction encoding: raw direction plus sin/cos at 4 octaves.
pub fn posenc_dir(d: Vec3) -> Vec<f64> {
    let mut out = Vec::with_capacity(PE_DIM);
    out.extend_from_slice(&d);
    for k in 0..PE_FREQS {
        let s = (1u64 << k) as f64;
        for a in 0..3 {
            out.push((d[a] * s).sin());
            out.push((d[a] * s).cos());
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    /// Weight of the feature-distillation term.
    pub lambda: f64,
    pub grid_dim: usize,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    /// Final learning-rate factor of the exponential decay schedule.
    pub lr_decay: f64,
    pub seed: u64,
    /// Coarse-to-fine: start at grid_dim/4 and double twice during training.
    pub progressive: bool,
    pub density_shift: f64,
    /// Sampling step as a fraction of the voxel diagonal.
    pub step_frac: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            iterations: 5000,
            batch_rays: 1024,
            lambda: 0.5,
            grid_dim: 96,
            lr_grid: 0.1,
            lr_mlp: 1e-3,
            lr_decay: 0.1,
            seed: 0,
            progressive: true,
            density_shift: 0.0,
            step_frac: 0.5,
        }
    }
}

/// Widths of the view-conditioning MLP mapping `[voxel feature; encoded
/// direction]` to the view-dependent distilled feature.
pub fn featurenet_spec(feature_dim: usize) -> MlpSpec {
    MlpSpec::new(vec![C_RAW + PE_DIM, 64, 64, feature_dim], FinalActivation::None)
        .expect("static featurenet spec is valid")
}

/// Entry ids and metadata for one field inside some parameter store. The
/// store itself is owned by whoever is training or serving the field.
#[derive(Debug, Clone)]
pub struct FieldHandle {
    pub geom: GridGeom,
    pub density: EntryId,
    pub feature: EntryId,
    pub featurenet: Mlp,
    /// Frozen copy of the teacher decoder (the shared latent-space color
    /// head).
    pub decoder: Mlp,
    pub feature_dim: usize,
    pub density_shift: f64,
    /// Sampling step in world units, half the voxel diagonal by default.
    pub step_size: f64,
    pub teacher_hash: String,
    pub scene_id: String,
}

impl FieldHandle {
    /// Register a fresh field under `prefix` in `store`, copying the frozen
    /// decoder out of the teacher bundle.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        geom: GridGeom,
        teacher: &TeacherBundle,
        teacher_hash: &str,
        scene_id: &str,
        cfg: &ReconConfig,
        rng: &mut impl Rng,
    ) -> Result<FieldHandle> {
        let n = geom.num_voxels();
        let density = store.register(
            format!("{prefix}grid.density"),
            vec![geom.dims[0], geom.dims[1], geom.dims[2], 1],
            vec![DENSITY_INIT; n],
            cfg.lr_grid,
        )?;
        let feature = store.register(
            format!("{prefix}grid.feature"),
            vec![geom.dims[0], geom.dims[1], geom.dims[2], C_RAW],
            vec![0.0; n * C_RAW],
            cfg.lr_grid,
        )?;
        let featurenet = Mlp::register(
            store,
            &format!("{prefix}fnet"),
            featurenet_spec(teacher.feature_dim),
            cfg.lr_mlp,
            rng,
        )?;
        // frozen decoder copy
        let spec = teacher.decoder.spec.clone();
        let mut layers = Vec::with_capacity(teacher.decoder.layers.len());
        for (k, (wid, bid)) in teacher.decoder.layers.iter().enumerate() {
            let we = teacher.store.entry(*wid);
            let be = teacher.store.entry(*bid);
            let w = store.register(
                format!("{prefix}dec.l{k}.w"),
                we.shape.clone(),
                we.values.clone(),
                0.0,
            )?;
            let b = store.register(
                format!("{prefix}dec.l{k}.b"),
                be.shape.clone(),
                be.values.clone(),
                0.0,
            )?;
            store.set_frozen(w, true);
            store.set_frozen(b, true);
            layers.push((w, b));
        }
        let decoder = Mlp { spec, layers };
        let step_size = cfg.step_frac * geom.voxel_diagonal();
        Ok(FieldHandle {
            geom,
            density,
            feature,
            featurenet,
            decoder,
            feature_dim: teacher.feature_dim,
            density_shift: cfg.density_shift,
            step_size,
            teacher_hash: teacher_hash.to_string(),
            scene_id: scene_id.to_string(),
        })
    }

    /// Bind a handle to entries already present in `store` (after loading a
    /// checkpoint whose meta is `meta`).
    pub fn bind(store: &ParamStore, prefix: &str, meta: &serde_json::Value) -> Result<FieldHandle> {
        let geom: GridGeom = serde_json::from_value(
            meta.get("geom").cloned().ok_or_else(|| Error::Checkpoint("missing geom".into()))?,
        )?;
        let feature_dim = meta
            .get("feature_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("missing feature_dim".into()))? as usize;
        let density = store.id(&format!("{prefix}grid.density"))?;
        let feature = store.id(&format!("{prefix}grid.feature"))?;
        let featurenet = Mlp::bind(store, &format!("{prefix}fnet"), featurenet_spec(feature_dim))?;
        let decoder =
            Mlp::bind(store, &format!("{prefix}dec"), crate::teacher::decoder_spec(feature_dim))?;
        Ok(FieldHandle {
            geom,
            density,
            feature,
            featurenet,
            decoder,
            feature_dim,
            density_shift: meta.get("density_shift").and_then(|v| v.as_f64()).unwrap_or(0.0),
            step_size: meta
                .get("step_size")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Checkpoint("missing step_size".into()))?,
            teacher_hash: meta
                .get("teacher_hash")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string(),
            scene_id: meta
                .get("scene_id")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string(),
        })
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "field",
            "geom": self.geom,
            "feature_dim": self.feature_dim,
            "density_shift": self.density_shift,
            "step_size": self.step_size,
            "teacher_hash": self.teacher_hash,
            "scene_id": self.scene_id,
        })
    }

    /// View-dependent distilled feature from a raw voxel feature and a unit
    /// direction.
    pub fn featurenet_forward(
        &self,
        store: &ParamStore,
        f_raw: &[f64],
        d: Vec3,
    ) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(C_RAW + PE_DIM);
        input.extend_from_slice(f_raw);
        input.extend(posenc_dir(d));
        self.featurenet.forward(store, &input)
    }

    pub fn gather(&self, store: &ParamStore, xq: Vec3) -> Option<NeighborSample> {
        gather_neighbors(
            &self.geom,
            store.values(self.density),
            store.values(self.feature),
            C_RAW,
            self.density_shift,
            xq,
        )
    }

    /// Activated density at a world point (trilinear on raw, then the
    /// shifted softplus).
    pub fn density_at(&self, store: &ParamStore, p: Vec3) -> f64 {
        let cw = self.geom.cell(p);
        let raw = crate::voxelgrid::blend_corners(store.values(self.density), 1, &cw)[0];
        crate::voxelgrid::density_activation(raw, self.density_shift)
    }

    /// Entries trained during reconstruction (grids + featurenet).
    pub fn trainable_entries(&self) -> Vec<EntryId> {
        let mut v = vec![self.density, self.feature];
        v.extend(self.featurenet.entry_ids());
        v
    }
}

/// An owned field: handle plus its private parameter store.
pub struct DistilledFeatureField {
    pub store: ParamStore,
    pub handle: FieldHandle,
}

impl DistilledFeatureField {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_store(dir, &self.store, self.handle.meta())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<DistilledFeatureField> {
        let (store, meta) = checkpoint::load_store(dir)?;
        let handle = FieldHandle::bind(&store, "", &meta)?;
        Ok(DistilledFeatureField { store, handle })
    }

    pub fn ctx(&self) -> FieldCtx<'_> {
        FieldCtx { store: &self.store, field: &self.handle }
    }

    /// Density grid as an owning [`VoxelGrid`] (raw values).
    pub fn density_grid(&self) -> VoxelGrid {
        VoxelGrid::from_data(
            self.handle.geom.clone(),
            1,
            self.store.values(self.handle.density).to_vec(),
        )
        .expect("entry shape matches geom")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconLog {
    pub photo_loss: Vec<f64>,
    pub feat_loss: Vec<f64>,
    pub train_psnr_db: f64,
    pub iterations: usize,
}

/// Optimize a field against LR views per the combined loss
/// `L = L_photo + lambda * L_feat`, with stop-gradient on density inside the
/// feature render. Teacher features for each view are extracted once up
/// front. Returns the field and its loss curves.
pub fn reconstruct_scene(
    views: &[CameraView],
    teacher: &TeacherBundle,
    teacher_hash: &str,
    scene_id: &str,
    bbox_min: Vec3,
    bbox_max: Vec3,
    cfg: &ReconConfig,
) -> Result<(DistilledFeatureField, ReconLog)> {
    if views.len() < 8 {
        return Err(Error::InvalidConfig(format!(
            "need at least 8 posed views, got {}",
            views.len()
        )));
    }
    if !teacher.frozen {
        return Err(Error::InvalidConfig("teacher must be frozen before distillation".into()));
    }
    if cfg.lambda < 0.0 || cfg.iterations == 0 {
        return Err(Error::InvalidConfig("lambda must be >= 0 and iterations > 0".into()));
    }

    // pixel-aligned distillation targets, one map per view
    let feats: Vec<FeatureMap> =
        views.iter().map(|v| teacher.extract_features(&v.image)).collect::<Result<_>>()?;

    let mut rng = rng_from_seed(cfg.seed);
    let mut store = ParamStore::new();
    let start_dim = if cfg.progressive { (cfg.grid_dim / 4).max(8).min(cfg.grid_dim) } else { cfg.grid_dim };
    let geom = GridGeom::new([start_dim; 3], bbox_min, bbox_max)?;
    let mut handle =
        FieldHandle::register(&mut store, "", geom, teacher, teacher_hash, scene_id, cfg, &mut rng)?;

    let mut adam = Adam::new(&store, AdamConfig::default());
    let opts = RenderOpts::training();
    let mut photo_curve = Vec::new();
    let mut feat_curve = Vec::new();

    // progressive doubling at 20% and 40% of training
    let mut upscale_at: Vec<usize> = if cfg.progressive && start_dim < cfg.grid_dim {
        vec![cfg.iterations / 5, 2 * cfg.iterations / 5]
    } else {
        vec![]
    };
    upscale_at.reverse();

    const CHUNK: usize = 32;
    for iter in 0..cfg.iterations {
        if upscale_at.last() == Some(&iter) {
            upscale_at.pop();
            let new_dim = (handle.geom.dims[0] * 2).min(cfg.grid_dim);
            upscale_field(&mut store, &mut handle, &mut adam, new_dim, cfg)?;
        }

        // draw the batch up front so parallel chunks stay deterministic
        let picks: Vec<(usize, usize, usize)> = (0..cfg.batch_rays)
            .map(|_| {
                let vi = rng.random_range(0..views.len());
                let u = rng.random_range(0..views[vi].camera.width);
                let v = rng.random_range(0..views[vi].camera.height);
                (vi, u, v)
            })
            .collect();

        let inv_batch = 1.0 / cfg.batch_rays as f64;
        let fc = FieldCtx { store: &store, field: &handle };
        let results: Vec<(ChunkGrads, f64, f64)> = picks
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = ChunkGrads::new(fc.store);
                let mut tape = Tape::new();
                let (mut photo, mut feat) = (0.0, 0.0);
                for &(vi, u, v) in chunk {
                    let view = &views[vi];
                    let ray = view.camera.pixel_ray(u, v);
                    let target_rgb = view.image.get(u, v);
                    let target_feat = feats[vi].at(u, v);
                    if let Some(losses) = render::base_ray_loss(
                        &mut tape,
                        fc,
                        &ray,
                        &target_rgb,
                        target_feat,
                        cfg.lambda,
                        &opts,
                        inv_batch,
                    )
                    .expect("ray loss construction")
                    {
                        photo += tape.scalar(losses.photo);
                        feat += tape.scalar(losses.feat);
                        tape.backward(fc.store, losses.total_scaled, &mut grads)
                            .expect("backward");
                    }
                    tape.reset();
                }
                (grads, photo, feat)
            })
            .collect();

        let (mut photo, mut feat) = (0.0, 0.0);
        for (grads, p, f) in results {
            grads.merge_into(&mut store);
            photo += p;
            feat += f;
        }
        photo *= inv_batch;
        feat *= inv_batch;
        if !photo.is_finite() || !feat.is_finite() {
            return Err(Error::NonFiniteLoss(format!("reconstruction diverged at iter {iter}")));
        }
        photo_curve.push(photo);
        feat_curve.push(feat);

        adam.set_lr_scale(cfg.lr_decay.powf(iter as f64 / cfg.iterations as f64));
        adam.step(&mut store)?;
    }

    let field = DistilledFeatureField { store, handle };
    let train_psnr = eval_field(&field, views, 1.0, None)?.psnr_db;
    let log = ReconLog {
        photo_loss: photo_curve,
        feat_loss: feat_curve,
        train_psnr_db: train_psnr,
        iterations: cfg.iterations,
    };
    Ok((field, log))
}

fn upscale_field(
    store: &mut ParamStore,
    handle: &mut FieldHandle,
    adam: &mut Adam,
    new_dim: usize,
    cfg: &ReconConfig,
) -> Result<()> {
    let old_geom = handle.geom.clone();
    let new_geom = GridGeom::new([new_dim; 3], old_geom.bbox_min, old_geom.bbox_max)?;
    for (entry, ch) in [(handle.density, 1), (handle.feature, C_RAW)] {
        let grid = VoxelGrid::from_data(old_geom.clone(), ch, store.values(entry).to_vec())?;
        let up = grid.upsample([new_dim; 3])?;
        store.replace_values(entry, vec![new_dim, new_dim, new_dim, ch], up.data)?;
        adam.reset_entry(entry, store.entry(entry).len());
    }
    handle.geom = new_geom;
    handle.step_size = cfg.step_frac * handle.geom.voxel_diagonal();
    Ok(())
}

/// Render every view's camera scaled by `scale` and compare against the
/// provided ground truth (whose dims must match the scaled camera). `sr`
/// attaches the refiner.
pub fn eval_field(
    field: &DistilledFeatureField,
    views: &[CameraView],
    scale: f64,
    sr: Option<crate::render::SrCtx<'_>>,
) -> Result<MetricsRecord> {
    if scale <= 0.0 {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    let opts = RenderOpts::inference();
    let start = std::time::Instant::now();
    let mut per_psnr = Vec::with_capacity(views.len());
    let mut per_ssim = Vec::with_capacity(views.len());
    for view in views {
        let cam = view.camera.scaled(scale)?;
        if cam.width != view.image.width || cam.height != view.image.height {
            return Err(Error::InvalidArgument(format!(
                "ground truth {}x{} does not match scaled camera {}x{}",
                view.image.width, view.image.height, cam.width, cam.height
            )));
        }
        let rendered = render::render_image(field.ctx(), sr, &cam, &opts)?;
        per_psnr.push(psnr(&rendered, &view.image)?);
        per_ssim.push(ssim(&rendered, &view.image)?);
    }
    let n = views.len().max(1) as f64;
    Ok(MetricsRecord {
        scene_id: field.handle.scene_id.clone(),
        mode: if sr.is_some() { "sr".into() } else { "base".into() },
        scale,
        psnr_db: per_psnr.iter().sum::<f64>() / n,
        ssim: per_ssim.iter().sum::<f64>() / n,
        per_image_psnr: per_psnr,
        per_image_ssim: per_ssim,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Pair base cameras with replacement ground-truth images (for evaluating
/// at scales where GT comes from the oracle renderer).
pub fn views_with_images(views: &[CameraView], images: Vec<Image>) -> Vec<CameraView> {
    views
        .iter()
        .zip(images)
        .map(|(v, image)| CameraView { camera: v.camera.clone(), image })
        .collect()
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::scenegen::texture_corpus;
    use crate::teacher::{train_teacher, TeacherConfig};

    pub(crate) fn tiny_teacher() -> TeacherBundle {
        let corpus = texture_corpus(77, 3, 36);
        let cfg = TeacherConfig {
            feature_dim: 8,
            crop: 16,
            batch: 2,
            epochs: 1,
            lr: 1e-3,
            seed: 3,
            holdout: 1,
            lr_decay: 1.0,
        };
        train_teacher(&corpus, &cfg).unwrap().0
    }

    pub(crate) fn tiny_field(teacher: &TeacherBundle, seed: u64) -> DistilledFeatureField {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let geom = GridGeom::new([6, 6, 6], [-1.0; 3], [1.0; 3]).unwrap();
        let cfg = ReconConfig { grid_dim: 6, ..Default::default() };
        let handle =
            FieldHandle::register(&mut store, "", geom, teacher, "testhash", "s0", &cfg, &mut rng)
                .unwrap();
        DistilledFeatureField { store, handle }
    }
}
