//! 2D teacher: a small convolutional feature extractor producing
//! pixel-aligned feature maps, and a pointwise MLP decoder mapping features
//! back to RGB. Both train jointly as an autoencoder on procedural texture
//! images, then freeze. The decoder is reused verbatim as the radiance
//! field's color head, which is what ties every scene to one latent space.
//!
//! Encoder: 6 convolutions, 3x3 kernels, 32 hidden channels, two residual
//! connections, reflect padding, stride 1. Decoder: C -> 64x4 -> 3 with
//! ReLU hidden layers and a sigmoid output.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffmath::{
    Adam, AdamConfig, BufId, ChunkGrads, EntryId, FinalActivation, Mlp, MlpSpec, PadMode,
    ParamStore, Tape,
};
use crate::img::Image;
use crate::metrics::psnr;
use crate::scenegen::rng_from_seed;
use crate::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 16;
const HIDDEN_CH: usize = 32;
const DECODER_HIDDEN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub feature_dim: usize,
    /// Square crop size per training sample.
    pub crop: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Trailing images withheld from training for the held-out PSNR check.
    pub holdout: usize,
    /// Final learning-rate factor of the exponential decay schedule.
    pub lr_decay: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            feature_dim: DEFAULT_FEATURE_DIM,
            crop: 64,
            batch: 8,
            epochs: 50,
            lr: 1e-3,
            seed: 0,
            holdout: 16,
            lr_decay: 0.1,
        }
    }
}

/// Pixel-aligned feature map, `[v][u][c]` layout.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear feature lookup at continuous pixel coordinates.
    pub fn bilinear(&self, fu: f64, fv: f64) -> Vec<f64> {
        let x = (fu - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (fv - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = vec![0.0; self.channels];
        for c in 0..self.channels {
            let p00 = self.at(x0, y0)[c];
            let p10 = self.at(x1, y0)[c];
            let p01 = self.at(x0, y1)[c];
            let p11 = self.at(x1, y1)[c];
            let top = p00 + (p10 - p00) * fx;
            let bot = p01 + (p11 - p01) * fx;
            out[c] = top + (bot - top) * fy;
        }
        out
    }
}

/// Frozen feature extractor + decoder pair with its training fingerprint.
pub struct TeacherBundle {
    pub store: ParamStore,
    convs: Vec<(EntryId, EntryId)>,
    pub decoder: Mlp,
    pub feature_dim: usize,
    pub corpus_fingerprint: String,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherTrainLog {
    pub epoch_mean_l1: Vec<f64>,
    pub holdout_psnr_db: f64,
    pub steps: usize,
}

/// Channel widths of the 6 encoder convolutions.
fn conv_widths(feature_dim: usize) -> [(usize, usize); 6] {
    [
        (3, HIDDEN_CH),
        (HIDDEN_CH, HIDDEN_CH),
        (HIDDEN_CH, HIDDEN_CH),
        (HIDDEN_CH, HIDDEN_CH),
        (HIDDEN_CH, HIDDEN_CH),
        (HIDDEN_CH, feature_dim),
    ]
}

pub fn decoder_spec(feature_dim: usize) -> MlpSpec {
    MlpSpec::new(
        vec![feature_dim, DECODER_HIDDEN, DECODER_HIDDEN, DECODER_HIDDEN, DECODER_HIDDEN, 3],
        FinalActivation::Sigmoid,
    )
    .expect("static decoder spec is valid")
}

fn register_convs(
    store: &mut ParamStore,
    feature_dim: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<Vec<(EntryId, EntryId)>> {
    let mut convs = Vec::with_capacity(6);
    for (k, (cin, cout)) in conv_widths(feature_dim).iter().enumerate() {
        let fan_in = cin * 9;
        let fan_out = cout * 9;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
        let wid = store.register(format!("fe.c{k}.w"), vec![*cout, *cin, 3, 3], w, lr)?;
        let bid = store.register(format!("fe.c{k}.b"), vec![*cout], vec![0.0; *cout], lr)?;
        convs.push((wid, bid));
    }
    Ok(convs)
}

fn img_to_chw(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0; 3 * w * h];
    for v in 0..h {
        for u in 0..w {
            let p = img.get(u, v);
            for c in 0..3 {
                out[c * h * w + v * w + u] = p[c];
            }
        }
    }
    out
}

/// Encoder forward on a tape; returns the `[C][h][w]` feature buffer.
fn encoder_forward_tape(
    tape: &mut Tape,
    store: &ParamStore,
    convs: &[(EntryId, EntryId)],
    input: BufId,
    h: usize,
    w: usize,
    pad: PadMode,
    feature_dim: usize,
) -> Result<BufId> {
    let widths = conv_widths(feature_dim);
    let conv = |tape: &mut Tape, k: usize, x: BufId| -> Result<BufId> {
        let (cin, _) = widths[k];
        let padded = tape.pad2d(x, cin, h, w, pad);
        tape.conv2d_valid(store, convs[k].0, convs[k].1, padded, cin, h + 2, w + 2)
    };
    let c1 = conv(tape, 0, input)?;
    let h1 = tape.relu(c1);
    let c2 = conv(tape, 1, h1)?;
    let h2 = tape.relu(c2);
    let c3 = conv(tape, 2, h2)?;
    let r3 = tape.add(c3, h1);
    let h3 = tape.relu(r3);
    let c4 = conv(tape, 3, h3)?;
    let h4 = tape.relu(c4);
    let c5 = conv(tape, 4, h4)?;
    let r5 = tape.add(c5, h3);
    let h5 = tape.relu(r5);
    conv(tape, 5, h5)
}

impl TeacherBundle {
    /// Pixel-aligned features with reflect padding (the production path).
    pub fn extract_features(&self, image: &Image) -> Result<FeatureMap> {
        self.extract_features_padmode(image, PadMode::Reflect)
    }

    /// Padding-mode variant; circular padding exists for the translation
    /// equivariance check.
    pub fn extract_features_padmode(&self, image: &Image, pad: PadMode) -> Result<FeatureMap> {
        if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image values must lie in [0,1]".into()));
        }
        let (w, h) = (image.width, image.height);
        let chw = img_to_chw(image);
        let feat = self.encoder_plain(&chw, h, w, pad);
        // [C][h][w] -> [v][u][c]
        let c = self.feature_dim;
        let mut data = vec![0.0; w * h * c];
        for ch in 0..c {
            for v in 0..h {
                for u in 0..w {
                    data[(v * w + u) * c + ch] = feat[ch * h * w + v * w + u];
                }
            }
        }
        Ok(FeatureMap { width: w, height: h, channels: c, data })
    }

    /// Plain (tape-free) encoder forward for inference on full images.
    fn encoder_plain(&self, input: &[f64], h: usize, w: usize, pad: PadMode) -> Vec<f64> {
        let widths = conv_widths(self.feature_dim);
        let conv = |k: usize, x: &[f64]| -> Vec<f64> {
            let (cin, cout) = widths[k];
            let padded = pad2d_plain(x, cin, h, w, pad);
            conv2d_valid_plain(
                self.store.values(self.convs[k].0),
                self.store.values(self.convs[k].1),
                &padded,
                cin,
                cout,
                h + 2,
                w + 2,
            )
        };
        let relu = |mut x: Vec<f64>| {
            for v in x.iter_mut() {
                *v = v.max(0.0);
            }
            x
        };
        let add = |mut a: Vec<f64>, b: &[f64]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        };
        let h1 = relu(conv(0, input));
        let h2 = relu(conv(1, &h1));
        let h3 = relu(add(conv(2, &h2), &h1));
        let h4 = relu(conv(3, &h3));
        let h5 = relu(add(conv(4, &h4), &h3));
        conv(5, &h5)
    }

    /// Sigmoid-bounded RGB from one feature vector.
    pub fn decode_pixel(&self, f: &[f64]) -> Result<[f64; 3]> {
        let out = self.decoder.forward(&self.store, f)?;
        Ok([out[0], out[1], out[2]])
    }

    /// decode(extract(I)): the autoencoder reconstruction.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        let fm = self.extract_features(image)?;
        let mut out = Image::new(image.width, image.height);
        for v in 0..image.height {
            for u in 0..image.width {
                out.set(u, v, self.decode_pixel(fm.at(u, v))?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "teacher",
            "feature_dim": self.feature_dim,
            "hidden_channels": HIDDEN_CH,
            "corpus_fingerprint": self.corpus_fingerprint,
            "frozen": self.frozen,
        });
        checkpoint::save_store(dir, &self.store, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<TeacherBundle> {
        let (store, meta) = checkpoint::load_store(dir)?;
        let feature_dim = meta
            .get("feature_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("missing feature_dim".into()))? as usize;
        let mut convs = Vec::with_capacity(6);
        for k in 0..6 {
            convs.push((store.id(&format!("fe.c{k}.w"))?, store.id(&format!("fe.c{k}.b"))?));
        }
        let decoder = Mlp::bind(&store, "dec", decoder_spec(feature_dim))?;
        let frozen = meta.get("frozen").and_then(|v| v.as_bool()).unwrap_or(false);
        let corpus_fingerprint = meta
            .get("corpus_fingerprint")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        Ok(TeacherBundle { store, convs, decoder, feature_dim, corpus_fingerprint, frozen })
    }

    pub fn conv_entries(&self) -> &[(EntryId, EntryId)] {
        &self.convs
    }
}

fn pad2d_plain(x: &[f64], ch: usize, h: usize, w: usize, mode: PadMode) -> Vec<f64> {
    let (hp, wp) = (h + 2, w + 2);
    let mut out = vec![0.0; ch * hp * wp];
    let idx = |i: usize, n: usize| -> usize {
        match mode {
            PadMode::Reflect => {
                if i == 0 {
                    1.min(n - 1)
                } else if i > n {
                    n.saturating_sub(2)
                } else {
                    i - 1
                }
            }
            PadMode::Circular => (i + n - 1) % n,
        }
    };
    for c in 0..ch {
        for i in 0..hp {
            let si = idx(i, h);
            for j in 0..wp {
                let sj = idx(j, w);
                out[c * hp * wp + i * wp + j] = x[c * h * w + si * w + sj];
            }
        }
    }
    out
}

fn conv2d_valid_plain(
    wv: &[f64],
    bv: &[f64],
    x: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let (ho, wo) = (h - 2, wd - 2);
    let mut out = vec![0.0; out_ch * ho * wo];
    for o in 0..out_ch {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.fill(bv[o]);
        for c in 0..in_ch {
            let ker = &wv[(o * in_ch + c) * 9..(o * in_ch + c) * 9 + 9];
            let sp = &x[c * h * wd..(c + 1) * h * wd];
            for i in 0..ho {
                let row = &mut plane[i * wo..(i + 1) * wo];
                for (ka, kr) in ker.chunks_exact(3).enumerate() {
                    let srow = &sp[(i + ka) * wd..(i + ka) * wd + wo + 2];
                    for j in 0..wo {
                        row[j] += kr[0] * srow[j] + kr[1] * srow[j + 1] + kr[2] * srow[j + 2];
                    }
                }
            }
        }
    }
    out
}

/// Joint autoencoder training on random crops with L1 loss; returns the
/// frozen bundle and the training curve. Aborts on divergence.
pub fn train_teacher(
    corpus: &[Image],
    cfg: &TeacherConfig,
) -> Result<(TeacherBundle, TeacherTrainLog)> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("empty teacher corpus".into()));
    }
    let holdout = cfg.holdout.min(corpus.len().saturating_sub(1));
    let train = &corpus[..corpus.len() - holdout];
    let held = &corpus[corpus.len() - holdout..];
    for img in train {
        if img.width < cfg.crop.max(32) || img.height < cfg.crop.max(32) {
            return Err(Error::InvalidConfig(format!(
                "corpus image {}x{} smaller than crop {} (min 32)",
                img.width, img.height, cfg.crop
            )));
        }
    }

    let mut rng = rng_from_seed(cfg.seed);
    let mut store = ParamStore::new();
    let convs = register_convs(&mut store, cfg.feature_dim, cfg.lr, &mut rng)?;
    let decoder = Mlp::register(&mut store, "dec", decoder_spec(cfg.feature_dim), cfg.lr, &mut rng)?;

    let mut adam = Adam::new(&store, AdamConfig::default());
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut global_step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for step in 0..steps_per_epoch {
            let batch: Vec<usize> =
                order[step * cfg.batch..((step + 1) * cfg.batch).min(order.len())].to_vec();
            if batch.is_empty() {
                continue;
            }
            let mut grads = ChunkGrads::new(&store);
            let inv_batch = 1.0 / batch.len() as f64;
            for &img_idx in &batch {
                let img = &train[img_idx];
                let u0 = rng.random_range(0..=img.width - cfg.crop);
                let v0 = rng.random_range(0..=img.height - cfg.crop);
                let crop = crop_image(img, u0, v0, cfg.crop);
                let loss = crop_loss_tape(&mut tape, &store, &convs, &decoder, &crop, cfg)?;
                let val = tape.scalar(loss);
                if !val.is_finite() {
                    return Err(Error::NonFiniteLoss(format!(
                        "teacher loss diverged at epoch {epoch} (image {img_idx})"
                    )));
                }
                epoch_loss += val;
                epoch_count += 1;
                let scaled = tape.scale(loss, inv_batch);
                tape.backward(&store, scaled, &mut grads)?;
                tape.reset();
            }
            grads.merge_into(&mut store);
            adam.set_lr_scale(cfg.lr_decay.powf(global_step as f64 / total_steps as f64));
            adam.step(&mut store)?;
            global_step += 1;
        }
        epoch_losses.push(epoch_loss / epoch_count.max(1) as f64);
    }

    let ids: Vec<EntryId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.set_frozen(id, true);
    }

    let corpus_fingerprint = fingerprint(train);
    let bundle = TeacherBundle {
        store,
        convs,
        decoder,
        feature_dim: cfg.feature_dim,
        corpus_fingerprint,
        frozen: true,
    };

    let eval_set = if held.is_empty() { train } else { held };
    let mut total = 0.0;
    for img in eval_set {
        total += psnr(&bundle.reconstruct(img)?, img)?;
    }
    let holdout_psnr_db = total / eval_set.len() as f64;

    let log = TeacherTrainLog {
        epoch_mean_l1: epoch_losses,
        holdout_psnr_db,
        steps: cfg.epochs * steps_per_epoch,
    };
    Ok((bundle, log))
}

/// Mean L1 between decoded features and the crop itself, on the tape.
fn crop_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    convs: &[(EntryId, EntryId)],
    decoder: &Mlp,
    crop: &Image,
    cfg: &TeacherConfig,
) -> Result<BufId> {
    let s = crop.width;
    let input = tape.leaf(img_to_chw(crop));
    let feat =
        encoder_forward_tape(tape, store, convs, input, s, s, PadMode::Reflect, cfg.feature_dim)?;
    let mut pixel_outs = Vec::with_capacity(s * s);
    for v in 0..s {
        for u in 0..s {
            let f = tape.pixel_gather(feat, cfg.feature_dim, s, s, u, v);
            pixel_outs.push(decoder.forward_tape(tape, store, f)?);
        }
    }
    let stacked = tape.stack_rows(pixel_outs);
    let l1 = tape.abs_diff_sum(stacked, crop.data.clone());
    Ok(tape.scale(l1, 1.0 / (s * s * 3) as f64))
}

fn crop_image(img: &Image, u0: usize, v0: usize, size: usize) -> Image {
    let mut out = Image::new(size, size);
    for v in 0..size {
        for u in 0..size {
            out.set(u, v, img.get(u0 + u, v0 + v));
        }
    }
    out
}

fn shuffle(v: &mut [usize], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

fn fingerprint(images: &[Image]) -> String {
    let mut bytes = Vec::new();
    for img in images {
        bytes.extend_from_slice(&(img.width as u32).to_le_bytes());
        bytes.extend(img.to_u8());
    }
    checkpoint::content_hash(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::backward_into_store;
    use crate::scenegen::texture_corpus;

    fn tiny_cfg() -> TeacherConfig {
        TeacherConfig {
            feature_dim: 8,
            crop: 16,
            batch: 2,
            epochs: 2,
            lr: 1e-3,
            seed: 3,
            holdout: 1,
            lr_decay: 0.1,
        }
    }

    fn untrained_bundle(feature_dim: usize, seed: u64) -> TeacherBundle {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let convs = register_convs(&mut store, feature_dim, 1e-3, &mut rng).unwrap();
        let decoder =
            Mlp::register(&mut store, "dec", decoder_spec(feature_dim), 1e-3, &mut rng).unwrap();
        TeacherBundle {
            store,
            convs,
            decoder,
            feature_dim,
            corpus_fingerprint: String::new(),
            frozen: false,
        }
    }

    #[test]
    fn identical_inputs_identical_features() {
        let bundle = untrained_bundle(8, 1);
        let corpus = texture_corpus(5, 1, 24);
        let a = bundle.extract_features(&corpus[0]).unwrap();
        let b = bundle.extract_features(&corpus[0]).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.width, 24);
        assert_eq!(a.height, 24);
        assert_eq!(a.channels, 8);
    }

    #[test]
    fn rejects_out_of_range_input() {
        let bundle = untrained_bundle(8, 1);
        let mut img = Image::new(16, 16);
        img.data[0] = 2.0;
        assert!(bundle.extract_features(&img).is_err());
    }

    /// Circular shift with circular padding shifts the features circularly.
    #[test]
    fn circular_shift_equivariance() {
        let bundle = untrained_bundle(8, 2);
        let img = texture_corpus(9, 1, 20).pop().unwrap();
        let (dx, dy) = (5usize, 3usize);
        let mut shifted = Image::new(20, 20);
        for v in 0..20 {
            for u in 0..20 {
                shifted.set((u + dx) % 20, (v + dy) % 20, img.get(u, v));
            }
        }
        let fa = bundle.extract_features_padmode(&img, PadMode::Circular).unwrap();
        let fb = bundle.extract_features_padmode(&shifted, PadMode::Circular).unwrap();
        for v in 0..20 {
            for u in 0..20 {
                let a = fa.at(u, v);
                let b = fb.at((u + dx) % 20, (v + dy) % 20);
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    /// Tape and plain encoder paths agree.
    #[test]
    fn tape_and_plain_encoder_agree() {
        let bundle = untrained_bundle(8, 4);
        let img = texture_corpus(11, 1, 16).pop().unwrap();
        let chw = img_to_chw(&img);
        let plain = bundle.encoder_plain(&chw, 16, 16, PadMode::Reflect);
        let mut tape = Tape::new();
        let input = tape.leaf(chw);
        let feat = encoder_forward_tape(
            &mut tape,
            &bundle.store,
            &bundle.convs,
            input,
            16,
            16,
            PadMode::Reflect,
            8,
        )
        .unwrap();
        let tape_out = tape.value(feat);
        assert_eq!(tape_out.len(), plain.len());
        for (a, b) in tape_out.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Conv gradients against central finite differences on a tiny instance.
    #[test]
    fn conv_gradients_match_fd() {
        let mut rng = rng_from_seed(7);
        let mut store = ParamStore::new();
        let w = store
            .register(
                "c.w",
                vec![2, 2, 3, 3],
                (0..36).map(|_| rng.random_range(-0.5..0.5)).collect(),
                1e-3,
            )
            .unwrap();
        let b = store.register("c.b", vec![2], vec![0.1, -0.2], 1e-3).unwrap();
        let x: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();

        let forward = |s: &ParamStore| -> f64 {
            let padded = pad2d_plain(&x, 2, 6, 6, PadMode::Reflect);
            let out = conv2d_valid_plain(
                s.values(s.id("c.w").unwrap()),
                s.values(s.id("c.b").unwrap()),
                &padded,
                2,
                2,
                8,
                8,
            );
            out.iter().map(|v| v * v).sum()
        };

        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let padded = tape.pad2d(input, 2, 6, 6, PadMode::Reflect);
        let out = tape.conv2d_valid(&store, w, b, padded, 2, 8, 8).unwrap();
        let loss = tape.dot(out, out);
        backward_into_store(&mut tape, &mut store, loss).unwrap();

        let err = crate::diffmath::fd::max_grad_error(&mut store, &[w, b], forward, 1e-5);
        assert!(err < 1e-6, "conv fd mismatch {err}");
    }

    /// Overfit a 1-image corpus to near-zero train L1. The image is picked
    /// fully textured: pure-white pixels sit on the sigmoid asymptote and
    /// would put a slow-decaying floor under the L1.
    #[test]
    fn overfits_single_image() {
        let corpus: Vec<Image> = texture_corpus(20, 12, 36)
            .into_iter()
            .filter(|img| img.data.iter().all(|&v| v < 0.99))
            .take(1)
            .collect();
        assert_eq!(corpus.len(), 1, "expected a fully textured candidate");
        let cfg = TeacherConfig {
            feature_dim: 8,
            crop: 32,
            batch: 1,
            epochs: 200,
            lr: 3e-3,
            seed: 5,
            holdout: 0,
            lr_decay: 0.05,
        };
        let (_, log) = train_teacher(&corpus, &cfg).unwrap();
        let last = *log.epoch_mean_l1.last().unwrap();
        assert!(last < 0.01, "train L1 {last}");
    }

    #[test]
    fn fixed_seed_bitwise_identical_checkpoint() {
        let corpus = texture_corpus(31, 3, 36);
        let cfg = tiny_cfg();
        let (a, _) = train_teacher(&corpus, &cfg).unwrap();
        let (b, _) = train_teacher(&corpus, &cfg).unwrap();
        for ((_, ea), (_, eb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(ea.values, eb.values, "entry {}", ea.name);
        }
    }

    #[test]
    fn decode_pixel_bounded_and_save_load_round_trip() {
        let corpus = texture_corpus(41, 3, 36);
        let (bundle, _) = train_teacher(&corpus, &tiny_cfg()).unwrap();
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let f: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rgb = bundle.decode_pixel(&f).unwrap();
            assert!(rgb.iter().all(|v| *v > 0.0 && *v < 1.0));
        }

        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let loaded = TeacherBundle::load(dir.path()).unwrap();
        assert!(loaded.frozen);
        let img = texture_corpus(43, 1, 16).pop().unwrap();
        let fa = bundle.extract_features(&img).unwrap();
        let fb = loaded.extract_features(&img).unwrap();
        assert_eq!(fa.data, fb.data);

        // frozen-teacher contract: inference never mutates parameters
        let h1 = checkpoint::checkpoint_hash(dir.path()).unwrap();
        let _ = loaded.reconstruct(&img).unwrap();
        loaded.save(dir.path()).unwrap();
        let h2 = checkpoint::checkpoint_hash(dir.path()).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn rejects_empty_and_small_corpora() {
        assert!(train_teacher(&[], &tiny_cfg()).is_err());
        let tiny = vec![Image::new(8, 8); 3];
        assert!(train_teacher(&tiny, &tiny_cfg()).is_err());
    }
}
