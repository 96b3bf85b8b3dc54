//! Multi-scene training of the attention refiner: several frozen fields,
//! one scene drawn per iteration, supervised by HR views and HR teacher
//! feature maps.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::checkpoint::{self, Tensor, TensorSet};
use crate::diffmath::{Adam, AdamConfig, ChunkGrads, ParamStore, Tape};
use crate::fieldrecon::{DistilledFeatureField, FieldHandle};
use crate::img::Image;
use crate::metrics::{psnr, ssim};
use crate::render::{self, FieldCtx, RenderOpts};
use crate::scenegen::{oracle_render, rng_from_seed, CameraView, SceneSpec};
use crate::teacher::TeacherBundle;
use crate::voxelgridsr::{self, SrConfig, SrHandle, SrParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrTrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lambda: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub sr: SrConfig,
    /// When set, field grids and view MLPs keep receiving gradients during
    /// refiner training (experiment flag; off matches the off-the-shelf
    /// deployment).
    pub finetune_fields: bool,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        SrTrainConfig {
            iterations: 20_000,
            batch_rays: 1024,
            lambda: 0.5,
            lr: 1e-3,
            lr_decay: 0.1,
            seed: 0,
            sr: SrConfig::default(),
            finetune_fields: false,
        }
    }
}

/// HR teacher features stored compactly (f32) per view.
pub struct FeatureMapF32 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMapF32 {
    pub fn at(&self, u: usize, v: usize) -> Vec<f64> {
        let i = (v * self.width + u) * self.channels;
        self.data[i..i + self.channels].iter().map(|&x| x as f64).collect()
    }
}

pub struct BankScene {
    pub handle: FieldHandle,
    pub hr_views: Vec<CameraView>,
    pub hr_feats: Vec<FeatureMapF32>,
}

/// Frozen per-scene fields sharing one parameter store, plus their HR
/// supervision.
pub struct SceneBank {
    pub store: ParamStore,
    pub scenes: Vec<BankScene>,
    pub teacher_hash: String,
}

/// Assemble a bank from owned fields and HR views. All fields must carry the
/// same teacher hash (the shared-latent-space premise); HR teacher features
/// are computed once per view, cached under `feat_cache` when given.
pub fn build_bank(
    fields: Vec<DistilledFeatureField>,
    hr_views: Vec<Vec<CameraView>>,
    teacher: &TeacherBundle,
    feat_cache: Option<&Path>,
) -> Result<SceneBank> {
    if fields.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "refiner training needs at least 2 scenes for generalizability, got {}",
            fields.len()
        )));
    }
    if fields.len() != hr_views.len() {
        return Err(Error::InvalidConfig("fields and view sets must pair up".into()));
    }
    let teacher_hash = fields[0].handle.teacher_hash.clone();
    for f in &fields {
        if f.handle.teacher_hash != teacher_hash {
            return Err(Error::InvalidConfig(format!(
                "scene `{}` was distilled against a different teacher; a shared latent space \
                 requires one teacher for every scene",
                f.handle.scene_id
            )));
        }
    }

    let mut store = ParamStore::new();
    let mut scenes = Vec::with_capacity(fields.len());
    for (i, (field, views)) in fields.into_iter().zip(hr_views).enumerate() {
        let prefix = format!("s{i}.");
        // re-register every entry under the scene prefix, frozen
        for (_, e) in field.store.iter() {
            let id = store.register(
                format!("{prefix}{}", e.name),
                e.shape.clone(),
                e.values.clone(),
                e.lr,
            )?;
            store.set_frozen(id, true);
        }
        let handle = FieldHandle::bind(&store, &prefix, &field.handle.meta())?;
        let hr_feats = teacher_features_cached(teacher, &views, feat_cache, i)?;
        scenes.push(BankScene { handle, hr_views: views, hr_feats });
    }
    Ok(SceneBank { store, scenes, teacher_hash })
}

fn teacher_features_cached(
    teacher: &TeacherBundle,
    views: &[CameraView],
    cache_root: Option<&Path>,
    scene_index: usize,
) -> Result<Vec<FeatureMapF32>> {
    let cache_dir = cache_root.map(|p| p.join(format!("scene{scene_index}")));
    if let Some(dir) = &cache_dir {
        if dir.join("manifest.json").exists() {
            if let Ok((tensors, meta)) = checkpoint::load_tensors(dir) {
                let hash_ok = meta.get("corpus_fingerprint").and_then(|v| v.as_str())
                    == Some(teacher.corpus_fingerprint.as_str());
                if hash_ok && tensors.len() == views.len() {
                    let mut out = Vec::with_capacity(views.len());
                    for k in 0..views.len() {
                        let (shape, tensor) = tensors
                            .get(&format!("view{k}"))
                            .ok_or_else(|| Error::Checkpoint("missing cached view".into()))?;
                        let data = match tensor {
                            Tensor::F32(v) => v.clone(),
                            Tensor::F64(v) => v.iter().map(|&x| x as f32).collect(),
                        };
                        out.push(FeatureMapF32 {
                            width: shape[1],
                            height: shape[0],
                            channels: shape[2],
                            data,
                        });
                    }
                    return Ok(out);
                }
            }
        }
    }

    let maps: Vec<FeatureMapF32> = views
        .iter()
        .map(|v| {
            let fm = teacher.extract_features(&v.image)?;
            Ok(FeatureMapF32 {
                width: fm.width,
                height: fm.height,
                channels: fm.channels,
                data: fm.data.iter().map(|&x| x as f32).collect(),
            })
        })
        .collect::<Result<_>>()?;

    if let Some(dir) = &cache_dir {
        let mut tensors = TensorSet::new();
        for (k, m) in maps.iter().enumerate() {
            tensors.insert(
                format!("view{k}"),
                (vec![m.height, m.width, m.channels], Tensor::F32(m.data.clone())),
            );
        }
        checkpoint::save_tensors(
            dir,
            &tensors,
            serde_json::json!({ "corpus_fingerprint": teacher.corpus_fingerprint }),
        )?;
    }
    Ok(maps)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrTrainLog {
    pub photo_loss: Vec<f64>,
    pub feat_loss: Vec<f64>,
    pub scene_pick_counts: Vec<usize>,
    pub iterations: usize,
}

/// Build the SR-mode ray loss on the tape. Inactive samples keep the frozen
/// trilinear density; active samples get refined feature and density.
#[allow(clippy::too_many_arguments)]
pub fn sr_ray_loss(
    tape: &mut Tape,
    store: &ParamStore,
    field: &FieldHandle,
    sr: &SrHandle,
    ray: &crate::camera::Ray,
    target_rgb: &[f64; 3],
    target_feat: &[f64],
    lambda: f64,
    opts: &RenderOpts,
    scale: f64,
) -> Result<Option<render::RayLosses>> {
    let fc = FieldCtx { store, field };
    let Some(prep) = render::prepare_ray(fc, ray, opts, true)? else {
        return Ok(None);
    };
    let pe_buf = tape.leaf(crate::fieldrecon::posenc_dir(ray.dir));
    let mut corner_cache = HashMap::new();

    // per-sample density scalars: refined at active samples, trilinear
    // elsewhere
    let mut sigma_parts = Vec::with_capacity(prep.samples.len());
    let mut colors = Vec::with_capacity(prep.active.len());
    let mut feats = Vec::with_capacity(prep.active.len());
    let mut a_pos = 0usize;
    for i in 0..prep.samples.len() {
        if a_pos < prep.active.len() && prep.active[a_pos] as usize == i {
            a_pos += 1;
            let rt = voxelgridsr::refine_tape(
                tape,
                store,
                field,
                sr,
                &prep.cells[i],
                pe_buf,
                &mut corner_cache,
            )?;
            sigma_parts.push(rt.sigma);
            let c = field.decoder.forward_tape(tape, store, rt.feature)?;
            colors.push(c);
            feats.push(rt.feature);
        } else {
            let cw = &prep.cells[i];
            let raw = tape.grid_gather(store, field.density, cw.corners, cw.weights, 1);
            let shifted = tape.add_scalar(raw, field.density_shift);
            sigma_parts.push(tape.softplus(shifted));
        }
    }
    let sigma = tape.concat(sigma_parts);
    let color_payload = if colors.is_empty() { tape.leaf(vec![]) } else { tape.stack_rows(colors) };
    let feat_payload = if feats.is_empty() { tape.leaf(vec![]) } else { tape.stack_rows(feats) };

    let deltas = prep.samples.deltas.clone();
    let chat =
        tape.composite(sigma, deltas.clone(), color_payload, prep.active.clone(), opts.background(3))?;
    let sigma_sg = tape.stop_gradient(sigma);
    let fhat = tape.composite(
        sigma_sg,
        deltas,
        feat_payload,
        prep.active.clone(),
        vec![0.0; field.feature_dim],
    )?;

    let photo = tape.sq_diff_sum(chat, target_rgb.to_vec());
    let feat = tape.sq_diff_sum(fhat, target_feat.to_vec());
    let feat_weighted = tape.scale(feat, lambda);
    let total = tape.add(photo, feat_weighted);
    let total_scaled = tape.scale(total, scale);
    Ok(Some(render::RayLosses { photo, feat, total, total_scaled }))
}

/// Train the refiner across the bank: per iteration one scene is drawn
/// uniformly at random and a ray batch from its HR views supervises the
/// photometric and feature losses. Only refiner entries update; everything
/// else in the bank is frozen (unless `finetune_fields`).
pub fn train_sr(bank: &mut SceneBank, cfg: &SrTrainConfig) -> Result<(SrParams, SrTrainLog)> {
    if bank.scenes.len() < 2 {
        return Err(Error::InvalidConfig("scene bank must hold at least 2 scenes".into()));
    }
    let feature_dim = bank.scenes[0].handle.feature_dim;
    let mut rng = rng_from_seed(cfg.seed);
    let sr_handle = SrHandle::register(
        &mut bank.store,
        "sr.",
        feature_dim,
        cfg.sr,
        &bank.teacher_hash,
        cfg.lr,
        &mut rng,
    )?;
    if cfg.finetune_fields {
        for scene in &bank.scenes {
            for id in scene.handle.trainable_entries() {
                bank.store.set_frozen(id, false);
            }
        }
    }

    let mut adam = Adam::new(&bank.store, AdamConfig::default());
    let opts = RenderOpts::training();
    let mut photo_curve = Vec::with_capacity(cfg.iterations);
    let mut feat_curve = Vec::with_capacity(cfg.iterations);
    let mut pick_counts = vec![0usize; bank.scenes.len()];

    const CHUNK: usize = 16;
    for iter in 0..cfg.iterations {
        let si = rng.random_range(0..bank.scenes.len());
        pick_counts[si] += 1;
        let scene = &bank.scenes[si];
        let picks: Vec<(usize, usize, usize)> = (0..cfg.batch_rays)
            .map(|_| {
                let vi = rng.random_range(0..scene.hr_views.len());
                let u = rng.random_range(0..scene.hr_views[vi].camera.width);
                let v = rng.random_range(0..scene.hr_views[vi].camera.height);
                (vi, u, v)
            })
            .collect();

        let inv_batch = 1.0 / cfg.batch_rays as f64;
        let store_ref = &bank.store;
        let results: Vec<(ChunkGrads, f64, f64)> = picks
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = ChunkGrads::new(store_ref);
                let mut tape = Tape::new();
                let (mut photo, mut feat) = (0.0, 0.0);
                for &(vi, u, v) in chunk {
                    let view = &scene.hr_views[vi];
                    let ray = view.camera.pixel_ray(u, v);
                    let target_rgb = view.image.get(u, v);
                    let target_feat = scene.hr_feats[vi].at(u, v);
                    if let Some(losses) = sr_ray_loss(
                        &mut tape,
                        store_ref,
                        &scene.handle,
                        &sr_handle,
                        &ray,
                        &target_rgb,
                        &target_feat,
                        cfg.lambda,
                        &opts,
                        inv_batch,
                    )
                    .expect("sr ray loss")
                    {
                        photo += tape.scalar(losses.photo);
                        feat += tape.scalar(losses.feat);
                        tape.backward(store_ref, losses.total_scaled, &mut grads)
                            .expect("backward");
                    }
                    tape.reset();
                }
                (grads, photo, feat)
            })
            .collect();

        let (mut photo, mut feat) = (0.0, 0.0);
        for (grads, p, f) in results {
            grads.merge_into(&mut bank.store);
            photo += p;
            feat += f;
        }
        photo *= inv_batch;
        feat *= inv_batch;
        if !photo.is_finite() || !feat.is_finite() {
            return Err(Error::NonFiniteLoss(format!("refiner training diverged at iter {iter}")));
        }
        photo_curve.push(photo);
        feat_curve.push(feat);

        adam.set_lr_scale(cfg.lr_decay.powf(iter as f64 / cfg.iterations as f64));
        adam.step(&mut bank.store)?;
    }

    // extract an owned copy of the refiner entries
    let mut out_store = ParamStore::new();
    for (_, e) in bank.store.iter() {
        if let Some(name) = e.name.strip_prefix("sr.") {
            out_store.register(format!("sr.{name}"), e.shape.clone(), e.values.clone(), e.lr)?;
        }
    }
    let handle = SrHandle::bind(&out_store, "sr.", &sr_handle.meta())?;
    let params = SrParams { store: out_store, handle };
    let log = SrTrainLog {
        photo_loss: photo_curve,
        feat_loss: feat_curve,
        scene_pick_counts: pick_counts,
        iterations: cfg.iterations,
    };
    Ok((params, log))
}

/// One row of the held-out comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleRow {
    pub scale: f64,
    pub psnr_base: f64,
    pub psnr_sr: f64,
    pub ssim_base: f64,
    pub ssim_sr: f64,
}

pub fn scale_table_csv(rows: &[ScaleRow]) -> String {
    let mut s = String::from("scale,psnr_base,psnr_sr,ssim_base,ssim_sr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.6},{:.6}\n",
            r.scale, r.psnr_base, r.psnr_sr, r.ssim_base, r.ssim_sr
        ));
    }
    s
}

/// Evaluate base and SR renders of an unseen scene at several scales through
/// one code path: cameras scale continuously, ground truth comes from the
/// scene oracle at the scaled resolution.
pub fn held_out_eval(
    field: &DistilledFeatureField,
    sr: &SrParams,
    spec: &SceneSpec,
    base_cams: &[Camera],
    scales: &[f64],
) -> Result<Vec<ScaleRow>> {
    let opts = RenderOpts::inference();
    let mut rows = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut acc = ScaleRow { scale, psnr_base: 0.0, psnr_sr: 0.0, ssim_base: 0.0, ssim_sr: 0.0 };
        for cam in base_cams {
            let scaled = cam.scaled(scale)?;
            let gt = oracle_render(spec, &scaled);
            let base = render::render_image(field.ctx(), None, &scaled, &opts)?;
            let srimg = render::render_image(field.ctx(), Some(sr.ctx()), &scaled, &opts)?;
            acc.psnr_base += psnr(&base, &gt)?;
            acc.psnr_sr += psnr(&srimg, &gt)?;
            acc.ssim_base += ssim(&base, &gt)?;
            acc.ssim_sr += ssim(&srimg, &gt)?;
        }
        let n = base_cams.len().max(1) as f64;
        acc.psnr_base /= n;
        acc.psnr_sr /= n;
        acc.ssim_base /= n;
        acc.ssim_sr /= n;
        rows.push(acc);
    }
    Ok(rows)
}

/// Render base/SR/GT side-by-side strips for qualitative reports.
pub fn comparison_strip(
    field: &DistilledFeatureField,
    sr: &SrParams,
    spec: &SceneSpec,
    cam: &Camera,
) -> Result<Image> {
    let opts = RenderOpts::inference();
    let gt = oracle_render(spec, cam);
    let base = render::render_image(field.ctx(), None, cam, &opts)?;
    let srimg = render::render_image(field.ctx(), Some(sr.ctx()), cam, &opts)?;
    crate::img::hstack(&[&base, &srimg, &gt])
}
