//! Ultrasound landmark encoder: a small convolutional trunk with a
//! classification head (artery present) and a regression head (normalized
//! lateral position `l`). Pretrained on rendered frames; the trunk is the
//! feature extractor reused to initialize the policy's image encoder, and
//! the trained heads provide the landmark estimate used for guidance and
//! by the visual-servo baseline.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, PretrainConfig, RunConfig};
use crate::imaging::{render, UltrasoundFrame};
use crate::io::{ByteReader, ByteWriter, Checkpoint, CheckpointKind};
use crate::nn::{
    bce_with_logit, clip_grad_norm, init_params, parallel_grad, relu, relu_backward, sigmoid,
    ConvOp, DenseOp, Layout, SgdMomentum,
};
use crate::phantom::sample_phantom;
use crate::sim::SimWorld;
use crate::{Error, Result};

/// Number of fixed chunks for deterministic batch-parallel gradients.
pub const GRAD_CHUNKS: usize = 8;

/// Convolutional trunk: 3 stride-2 conv stages + 2 dense layers to a
/// feature vector. Shared between the perception heads and the policy's
/// ultrasound encoder (weights copied there as initialization).
#[derive(Debug, Clone)]
pub struct UsTrunk {
    pub conv1: ConvOp,
    pub conv2: ConvOp,
    pub conv3: ConvOp,
    pub dense1: DenseOp,
    pub dense2: DenseOp,
    pub in_h: usize,
    pub in_w: usize,
    pub feature_dim: usize,
}

/// Scratch activations for one trunk forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct TrunkActs {
    pub c1: Vec<f32>,
    pub c2: Vec<f32>,
    pub c3: Vec<f32>,
    pub d1: Vec<f32>,
    pub feature: Vec<f32>,
}

impl UsTrunk {
    pub fn build(
        layout: &mut Layout,
        prefix: &str,
        in_h: usize,
        in_w: usize,
        channels: [usize; 3],
        feature_dim: usize,
    ) -> UsTrunk {
        let conv1 = ConvOp::new(layout, &format!("{prefix}.conv1"), 1, channels[0], in_h, in_w);
        let conv2 = ConvOp::new(
            layout,
            &format!("{prefix}.conv2"),
            channels[0],
            channels[1],
            conv1.out_h(),
            conv1.out_w(),
        );
        let conv3 = ConvOp::new(
            layout,
            &format!("{prefix}.conv3"),
            channels[1],
            channels[2],
            conv2.out_h(),
            conv2.out_w(),
        );
        let flat = conv3.out_len();
        let dense1 = DenseOp::new(layout, &format!("{prefix}.dense1"), flat, feature_dim);
        let dense2 = DenseOp::new(layout, &format!("{prefix}.dense2"), feature_dim, feature_dim);
        UsTrunk {
            conv1,
            conv2,
            conv3,
            dense1,
            dense2,
            in_h,
            in_w,
            feature_dim,
        }
    }

    pub fn alloc_acts(&self) -> TrunkActs {
        TrunkActs {
            c1: vec![0.0; self.conv1.out_len()],
            c2: vec![0.0; self.conv2.out_len()],
            c3: vec![0.0; self.conv3.out_len()],
            d1: vec![0.0; self.dense1.out_dim],
            feature: vec![0.0; self.feature_dim],
        }
    }

    pub fn forward(&self, p: &[f32], image: &[f32], acts: &mut TrunkActs) {
        self.conv1.forward(p, image, &mut acts.c1);
        relu(&mut acts.c1);
        self.conv2.forward(p, &acts.c1, &mut acts.c2);
        relu(&mut acts.c2);
        self.conv3.forward(p, &acts.c2, &mut acts.c3);
        relu(&mut acts.c3);
        self.dense1.forward(p, &acts.c3, &mut acts.d1);
        relu(&mut acts.d1);
        self.dense2.forward(p, &acts.d1, &mut acts.feature);
    }

    /// Backward from a feature gradient; accumulates into `g`.
    pub fn backward(&self, p: &[f32], image: &[f32], acts: &TrunkActs, d_feature: &[f32], g: &mut [f32]) {
        let mut d_d1 = vec![0.0f32; self.dense1.out_dim];
        self.dense2
            .backward(p, &acts.d1, d_feature, Some(&mut d_d1), g);
        relu_backward(&acts.d1, &mut d_d1);
        let mut d_c3 = vec![0.0f32; self.conv3.out_len()];
        self.dense1.backward(p, &acts.c3, &d_d1, Some(&mut d_c3), g);
        relu_backward(&acts.c3, &mut d_c3);
        let mut d_c2 = vec![0.0f32; self.conv2.out_len()];
        self.conv3.backward(p, &acts.c2, &d_c3, Some(&mut d_c2), g);
        relu_backward(&acts.c2, &mut d_c2);
        let mut d_c1 = vec![0.0f32; self.conv1.out_len()];
        self.conv2.backward(p, &acts.c1, &d_c2, Some(&mut d_c1), g);
        relu_backward(&acts.c1, &mut d_c1);
        self.conv1.backward(p, image, &d_c1, None, g);
    }
}

/// Trained landmark encoder: trunk plus the two heads.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub trunk: UsTrunk,
    pub head_present: DenseOp,
    pub head_l: DenseOp,
    pub layout: Layout,
    pub params: Vec<f32>,
    pub config_hash: [u8; 32],
    pub seed: u64,
}

/// Landmark estimate for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkPrediction {
    pub present_prob: f32,
    /// Normalized lateral position, clamped to [0, 1]; meaningful only
    /// when `present_prob` clears the decision threshold.
    pub l_hat: f32,
}

fn build_arch(cfg: &PretrainConfig, h: usize, w: usize) -> (Layout, UsTrunk, DenseOp, DenseOp) {
    let mut layout = Layout::default();
    let trunk = UsTrunk::build(&mut layout, "us", h, w, cfg.conv_channels, cfg.feature_dim);
    let head_present = DenseOp::new(&mut layout, "head_present", cfg.feature_dim, 1);
    let head_l = DenseOp::new(&mut layout, "head_l", cfg.feature_dim, 1);
    (layout, trunk, head_present, head_l)
}

impl EncoderParams {
    pub fn new(cfg: &PretrainConfig, h: usize, w: usize, seed: u64, config_hash: [u8; 32]) -> EncoderParams {
        let (layout, trunk, head_present, head_l) = build_arch(cfg, h, w);
        let params = init_params(&layout, seed);
        EncoderParams {
            trunk,
            head_present,
            head_l,
            layout,
            params,
            config_hash,
            seed,
        }
    }

    /// Forward pass; `acts` is reusable scratch.
    pub fn predict_with(&self, frame: &[f32], acts: &mut TrunkActs) -> Result<LandmarkPrediction> {
        if frame.len() != self.trunk.in_h * self.trunk.in_w {
            return Err(Error::Domain(format!(
                "frame size {} does not match encoder input {}x{}",
                frame.len(),
                self.trunk.in_h,
                self.trunk.in_w
            )));
        }
        self.trunk.forward(&self.params, frame, acts);
        let mut logit = [0.0f32];
        self.head_present
            .forward(&self.params, &acts.feature, &mut logit);
        let mut l_raw = [0.0f32];
        self.head_l.forward(&self.params, &acts.feature, &mut l_raw);
        Ok(LandmarkPrediction {
            present_prob: sigmoid(logit[0]),
            l_hat: l_raw[0].clamp(0.0, 1.0),
        })
    }

    pub fn predict(&self, frame: &UltrasoundFrame) -> Result<LandmarkPrediction> {
        let mut acts = self.trunk.alloc_acts();
        let input: Vec<f32> = frame.pixels.iter().map(|p| p - 0.5).collect();
        self.predict_with(&input, &mut acts)
    }

    /// Pre-head feature vector; identical to the representation `predict`
    /// uses internally.
    pub fn features(&self, frame: &UltrasoundFrame) -> Result<Vec<f32>> {
        if frame.pixels.len() != self.trunk.in_h * self.trunk.in_w {
            return Err(Error::Domain("frame size mismatch".into()));
        }
        let mut acts = self.trunk.alloc_acts();
        let input: Vec<f32> = frame.pixels.iter().map(|p| p - 0.5).collect();
        self.trunk.forward(&self.params, &input, &mut acts);
        Ok(acts.feature)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Checkpoint {
            kind: CheckpointKind::PerceptionEncoder,
            seed: self.seed,
            config_hash: self.config_hash,
            use_pose: true,
            use_wrench: true,
            layout: self.layout.clone(),
            params: self.params.clone(),
        }
        .save(path)
    }

    pub fn load(path: &std::path::Path, cfg: &PretrainConfig, h: usize, w: usize) -> Result<EncoderParams> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != CheckpointKind::PerceptionEncoder {
            return Err(Error::Config("not a perception checkpoint".into()));
        }
        let (layout, trunk, head_present, head_l) = build_arch(cfg, h, w);
        if layout.len != ck.layout.len {
            return Err(Error::Config(
                "checkpoint layout does not match the configured architecture".into(),
            ));
        }
        Ok(EncoderParams {
            trunk,
            head_present,
            head_l,
            layout,
            params: ck.params,
            config_hash: ck.config_hash,
            seed: ck.seed,
        })
    }
}

/// One labeled pretraining record. Frames are stored quantized.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub frame: Vec<u8>,
    pub present: bool,
    pub l: f64,
}

/// Landmark dataset container ("SSPT").
pub struct LandmarkDataset {
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub width: usize,
    pub height: usize,
    pub records: Vec<LabeledFrame>,
}

const PRETRAIN_MAGIC: &[u8; 4] = b"SSPT";

impl LandmarkDataset {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.magic(PRETRAIN_MAGIC);
        w.u32(1);
        w.u64(self.seed);
        w.bytes(&self.config_hash);
        w.u32(self.width as u32);
        w.u32(self.height as u32);
        w.u32(self.records.len() as u32);
        for r in &self.records {
            w.bytes(&r.frame);
            w.u8(r.present as u8);
            w.f64(r.l);
        }
        w.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<LandmarkDataset> {
        let data = std::fs::read(path)?;
        let mut r = ByteReader::new(&data);
        r.expect_magic(PRETRAIN_MAGIC, "landmark dataset")?;
        let _v = r.u32()?;
        let seed = r.u64()?;
        let config_hash: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let frame = r.bytes(width * height)?.to_vec();
            let present = r.u8()? != 0;
            let l = r.f64()?;
            records.push(LabeledFrame { frame, present, l });
        }
        Ok(LandmarkDataset {
            seed,
            config_hash,
            width,
            height,
            records,
        })
    }
}

/// Render a labeled landmark dataset by sweeping probe placements over
/// freshly sampled phantoms: on/off-artery lateral offsets, pre/post
/// bifurcation slices, adequate and degraded contact forces.
pub fn generate_landmark_dataset(cfg: &RunConfig, seed: u64) -> Result<LandmarkDataset> {
    let mut records = Vec::with_capacity(cfg.pretrain.n_pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain-data", 0));
    for i in 0..cfg.pretrain.n_pairs {
        let phantom_seed = derive_seed(seed, "pretrain-phantom", i as u64);
        let spec = sample_phantom(phantom_seed, &cfg.phantom)?;
        let world = SimWorld::from_config(cfg, spec);
        let s = rng.gen_range(0.01..world.phantom.spec.skin_length - 0.01);
        let lateral: f64 = rng.gen_range(-0.028..0.028);
        let tilt: f64 = rng.gen_range(-0.06..0.06);
        let pen: f64 = rng.gen_range(0.0005..0.008);
        let pose = world.start_pose(s, lateral, -pen, tilt);
        let contact = world.phantom.contact_wrench(&pose, &[0.0; 6]);
        let (frame, truth) = render(
            &world.phantom,
            &pose,
            &contact,
            &world.probe,
            0.0,
            derive_seed(seed, "pretrain-render", i as u64),
        );
        records.push(LabeledFrame {
            frame: frame.to_u8(),
            present: truth.visible,
            l: truth.l,
        });
    }
    Ok(LandmarkDataset {
        seed,
        config_hash: cfg.data_hash(),
        width: cfg.probe.image_width_px,
        height: cfg.probe.image_height_px,
        records,
    })
}

/// Pretraining report: final losses and held-out metrics.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub final_train_loss: f64,
    pub val_mae_l: f64,
    pub val_accuracy: f64,
    /// Per-epoch (train loss, val MAE); the kept weights are the best
    /// val-MAE epoch.
    pub epochs: Vec<(f64, f64)>,
    pub best_epoch: usize,
}

struct Sample<'a> {
    frame: &'a [u8],
    present: f32,
    l: f32,
}

/// Pixel bytes to the zero-centered float input the encoder consumes.
pub fn frame_input(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|b| *b as f32 / 255.0 - 0.5).collect()
}

fn loss_and_grad(
    enc: &EncoderParams,
    sample: &Sample,
    regression_weight: f32,
    g: &mut [f32],
) -> f64 {
    let image = frame_input(sample.frame);
    let mut acts = enc.trunk.alloc_acts();
    enc.trunk.forward(&enc.params, &image, &mut acts);
    let mut logit = [0.0f32];
    enc.head_present
        .forward(&enc.params, &acts.feature, &mut logit);
    let mut l_raw = [0.0f32];
    enc.head_l.forward(&enc.params, &acts.feature, &mut l_raw);

    let (bce, d_logit) = bce_with_logit(logit[0], sample.present);
    let mut loss = bce as f64;
    // masked regression: absent samples contribute nothing
    let d_l = if sample.present > 0.5 {
        let err = l_raw[0] - sample.l;
        loss += (regression_weight * err * err) as f64;
        2.0 * regression_weight * err
    } else {
        0.0
    };

    let mut d_feature = vec![0.0f32; enc.trunk.feature_dim];
    enc.head_present
        .backward(&enc.params, &acts.feature, &[d_logit], Some(&mut d_feature), g);
    if d_l != 0.0 {
        let mut d_feat2 = vec![0.0f32; enc.trunk.feature_dim];
        enc.head_l
            .backward(&enc.params, &acts.feature, &[d_l], Some(&mut d_feat2), g);
        for (a, b) in d_feature.iter_mut().zip(d_feat2.iter()) {
            *a += b;
        }
    }
    enc.trunk
        .backward(&enc.params, &image, &acts, &d_feature, g);
    loss
}

/// Pretrain the encoder on the labeled dataset with momentum gradient
/// descent. Deterministic given the seed; faults on divergence.
pub fn pretrain(
    dataset: &LandmarkDataset,
    cfg: &PretrainConfig,
    rng_seed: u64,
) -> Result<(EncoderParams, PretrainReport)> {
    if dataset.records.is_empty() {
        return Err(Error::Config("pretrain dataset is empty".into()));
    }
    for r in &dataset.records {
        if r.present && !(0.0..=1.0).contains(&r.l) {
            return Err(Error::Config("label l outside [0,1]".into()));
        }
    }
    let mut enc = EncoderParams::new(
        cfg,
        dataset.height,
        dataset.width,
        derive_seed(rng_seed, "pretrain-init", 0),
        dataset.config_hash,
    );

    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, "pretrain-shuffle", 0));
    order.shuffle(&mut shuffle_rng);
    let n_val = ((dataset.records.len() as f64) * cfg.val_frac) as usize;
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut optim = SgdMomentum::new(enc.layout.len, cfg.lr as f32, cfg.momentum as f32);
    let mut epochs = Vec::new();
    let mut train_order = train_idx.to_vec();
    let mut final_train_loss = f64::NAN;
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    for epoch in 0..cfg.epochs {
        train_order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in train_order.chunks(cfg.batch) {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|i| {
                    let r = &dataset.records[*i];
                    Sample {
                        frame: &r.frame,
                        present: r.present as u8 as f32,
                        l: r.l as f32,
                    }
                })
                .collect();
            let reg_w = cfg.regression_weight as f32;
            let (mut grads, loss_sum) = parallel_grad(
                &samples,
                GRAD_CHUNKS,
                enc.layout.len,
                |s, g| loss_and_grad(&enc, s, reg_w, g),
            );
            let batch_loss = loss_sum / samples.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Fault(format!(
                    "pretraining diverged (epoch {epoch}): loss {batch_loss}"
                )));
            }
            let inv = 1.0 / samples.len() as f32;
            for g in grads.iter_mut() {
                *g *= inv;
            }
            clip_grad_norm(&mut grads, 10.0);
            optim.step(&mut enc.params, &grads);
            epoch_loss += batch_loss;
            batches += 1.0;
        }
        let (mae, _acc) = evaluate(&enc, dataset, val_idx)?;
        epochs.push((epoch_loss / batches, mae));
        final_train_loss = epoch_loss / batches;
        if best.as_ref().map(|(m, _, _)| mae < *m).unwrap_or(true) {
            best = Some((mae, epoch, enc.params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    enc.params = best_params;
    let (val_mae_l, val_accuracy) = evaluate(&enc, dataset, val_idx)?;
    Ok((
        enc,
        PretrainReport {
            final_train_loss,
            val_mae_l,
            val_accuracy,
            epochs,
            best_epoch,
        },
    ))
}

/// Held-out MAE on `l` (present samples) and presence accuracy.
pub fn evaluate(
    enc: &EncoderParams,
    dataset: &LandmarkDataset,
    indices: &[usize],
) -> Result<(f64, f64)> {
    let mut acts = enc.trunk.alloc_acts();
    let mut mae = 0.0;
    let mut n_present = 0usize;
    let mut correct = 0usize;
    for &i in indices {
        let r = &dataset.records[i];
        let image = frame_input(&r.frame);
        let pred = enc.predict_with(&image, &mut acts)?;
        if (pred.present_prob > 0.5) == r.present {
            correct += 1;
        }
        if r.present {
            mae += (pred.l_hat as f64 - r.l).abs();
            n_present += 1;
        }
    }
    Ok((
        if n_present > 0 {
            mae / n_present as f64
        } else {
            f64::NAN
        },
        correct as f64 / indices.len().max(1) as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            n_pairs: 64,
            val_frac: 0.2,
            epochs: 2,
            batch: 16,
            lr: 0.02,
            momentum: 0.9,
            conv_channels: [4, 8, 8],
            feature_dim: 16,
            regression_weight: 2.0,
        }
    }

    fn tiny_dataset(n: usize, seed: u64) -> LandmarkDataset {
        // synthetic frames: a dark vertical band whose column encodes l
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (64usize, 64usize);
        let mut records = Vec::new();
        for _ in 0..n {
            let present = rng.gen_bool(0.8);
            let l: f64 = rng.gen_range(0.15..0.85);
            let col = (l * w as f64) as usize;
            let mut frame = vec![140u8; w * h];
            for v in frame.iter_mut() {
                *v = (*v as i32 + rng.gen_range(-30..30)) as u8;
            }
            if present {
                for r in 20..32 {
                    for c in col.saturating_sub(3)..(col + 3).min(w) {
                        frame[r * w + c] = 10;
                    }
                }
            }
            records.push(LabeledFrame { frame, present, l });
        }
        LandmarkDataset {
            seed,
            config_hash: [0u8; 32],
            width: w,
            height: h,
            records,
        }
    }

    #[test]
    fn pretrain_is_bitwise_deterministic() {
        let ds = tiny_dataset(48, 9);
        let cfg = tiny_cfg();
        let (a, _) = pretrain(&ds, &cfg, 123).unwrap();
        let (b, _) = pretrain(&ds, &cfg, 123).unwrap();
        assert_eq!(a.params, b.params);
        let (c, _) = pretrain(&ds, &cfg, 124).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn loss_decreases_on_small_set() {
        let ds = tiny_dataset(64, 21);
        let mut cfg = tiny_cfg();
        cfg.epochs = 8;
        let (_, report) = pretrain(&ds, &cfg, 5).unwrap();
        let first = report.epochs.first().unwrap().0;
        let last = report.epochs.last().unwrap().0;
        assert!(
            last < first * 0.8,
            "loss did not decrease: {first:.4} -> {last:.4}"
        );
    }

    #[test]
    fn absent_batch_leaves_regression_head_untouched() {
        let ds = tiny_dataset(16, 33);
        let cfg = tiny_cfg();
        let enc = EncoderParams::new(&cfg, 64, 64, 1, [0u8; 32]);
        // all-absent sample: analytic gradient on the regression head must
        // be exactly zero
        let frame = vec![100u8; 64 * 64];
        let sample = Sample {
            frame: &frame,
            present: 0.0,
            l: 0.5,
        };
        let mut g = vec![0.0f32; enc.layout.len];
        loss_and_grad(&enc, &sample, 2.0, &mut g);
        let head = enc.layout.find("head_l.w").unwrap();
        let gh = &g[head.offset..head.offset + head.len()];
        assert!(gh.iter().all(|v| *v == 0.0));
        // and finite differences agree at a few coordinates
        let mut enc2 = enc.clone();
        let loss_of = |e: &EncoderParams| -> f64 {
            let mut gg = vec![0.0f32; e.layout.len];
            loss_and_grad(e, &sample, 2.0, &mut gg)
        };
        for k in [0usize, 3, 7] {
            let idx = head.offset + k;
            let orig = enc2.params[idx];
            enc2.params[idx] = orig + 0.05;
            let lp = loss_of(&enc2);
            enc2.params[idx] = orig - 0.05;
            let lm = loss_of(&enc2);
            enc2.params[idx] = orig;
            assert!((lp - lm).abs() < 1e-9, "fd {k}: {}", (lp - lm).abs());
        }
        drop(ds);
    }

    #[test]
    fn predict_rejects_wrong_dims() {
        let cfg = tiny_cfg();
        let enc = EncoderParams::new(&cfg, 64, 64, 1, [0u8; 32]);
        let frame = UltrasoundFrame {
            pixels: vec![0.0; 32 * 32],
            width: 32,
            height: 32,
            timestamp: 0.0,
        };
        assert!(matches!(enc.predict(&frame), Err(Error::Domain(_))));
    }

    #[test]
    fn predict_is_deterministic_and_features_match() {
        let cfg = tiny_cfg();
        let enc = EncoderParams::new(&cfg, 64, 64, 7, [0u8; 32]);
        let frame = UltrasoundFrame {
            pixels: (0..64 * 64).map(|i| (i % 97) as f32 / 96.0).collect(),
            width: 64,
            height: 64,
            timestamp: 0.0,
        };
        let a = enc.predict(&frame).unwrap();
        let b = enc.predict(&frame).unwrap();
        assert_eq!(a, b);
        let f1 = enc.features(&frame).unwrap();
        assert_eq!(f1.len(), cfg.feature_dim);
        // features are the pre-head representation used by predict
        let mut acts = enc.trunk.alloc_acts();
        let input: Vec<f32> = frame.pixels.iter().map(|p| p - 0.5).collect();
        enc.predict_with(&input, &mut acts).unwrap();
        assert_eq!(f1, acts.feature);
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let ds = LandmarkDataset {
            seed: 0,
            config_hash: [0u8; 32],
            width: 64,
            height: 64,
            records: vec![],
        };
        assert!(matches!(
            pretrain(&ds, &tiny_cfg(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let ds = tiny_dataset(10, 2);
        let dir = std::env::temp_dir().join("sonosim-perception-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("landmarks.bin");
        ds.save(&path).unwrap();
        let back = LandmarkDataset::load(&path).unwrap();
        assert_eq!(back.records.len(), 10);
        assert_eq!(back.records[3].frame, ds.records[3].frame);
        assert_eq!(back.records[3].present, ds.records[3].present);
        assert_eq!(back.records[3].l, ds.records[3].l);
    }
}
