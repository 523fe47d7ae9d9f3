//! The matching network: a shared convolutional extractor applied to both
//! images, a dense correlation between the two feature maps, and a
//! regression head that reads transform parameters off the correlation
//! volume.
//!
//! The final layer starts at exactly zero, so an untrained network predicts
//! the identity transform and training only ever learns a correction away
//! from it.

mod corr;
mod layers;

pub use corr::{channel_means, correlate, correlate_backward, l2norm_channels, l2norm_channels_backward};
pub use layers::{check_shape, conv_out_len, relu, relu_backward, BatchNorm2d, Conv2d, Linear, Param};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Array4, ArrayD, Axis, s};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::StageKind;

/// Feature-map side length the head is built for.
const FMAP_SIDE: usize = 15;
/// Extractor channel plan.
const EXTRACT_CHANNELS: [usize; 3] = [8, 16, 32];
/// Head channel plan after the correlation volume.
const HEAD_CHANNELS: [usize; 2] = [48, 32];

fn arch_string() -> String {
    format!(
        "ext(7x{}-3x{}-3x{})/corr{}/head(7x{}-5x{})/fc",
        EXTRACT_CHANNELS[0],
        EXTRACT_CHANNELS[1],
        EXTRACT_CHANNELS[2],
        FMAP_SIDE * FMAP_SIDE,
        HEAD_CHANNELS[0],
        HEAD_CHANNELS[1],
    )
}

/// First-layer stride for a supported canvas size. Three stride-halving
/// stages have to land on the 15x15 feature grid.
fn first_stride(canvas: usize) -> Result<usize> {
    match canvas {
        120 => Ok(2),
        240 => Ok(4),
        other => Err(Error::Config(format!(
            "canvas {other} is not supported by the network, use 120 or 240"
        ))),
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    bn_out: Option<Array4<f64>>,
}

impl ConvBlock {
    fn new(
        rng: &mut ChaCha12Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(rng, in_ch, out_ch, kernel, stride, pad),
            bn: BatchNorm2d::new(out_ch),
            bn_out: None,
        }
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = self.bn.forward_train(&self.conv.forward(x));
        let out = relu(&y);
        self.bn_out = Some(y);
        out
    }

    fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        relu(&self.bn.forward_eval(&self.conv.forward_eval(x)))
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let bn_out = self.bn_out.take().expect("block backward before forward");
        let d = relu_backward(&bn_out, dy);
        self.conv.backward(&self.bn.backward(&d))
    }
}

#[derive(Clone, Debug, Default)]
struct ForwardCache {
    fa_pre: Option<Array4<f64>>,
    fb_pre: Option<Array4<f64>>,
    fa: Option<Array4<f64>>,
    fb: Option<Array4<f64>>,
    corr_raw: Option<Array4<f64>>,
    corr_relu: Option<Array4<f64>>,
}

/// Parameter-regression network for one registration stage.
#[derive(Clone, Debug)]
pub struct MatchNet {
    pub kind: StageKind,
    pub canvas: usize,
    blocks: Vec<ConvBlock>,
    head: Vec<ConvBlock>,
    fc: Linear,
    cache: ForwardCache,
}

impl MatchNet {
    /// Fresh network with seeded initialization. The fully connected output
    /// layer starts at zero; everything else draws scaled normals.
    pub fn new(kind: StageKind, canvas: usize, seed: u64) -> Result<Self> {
        let s1 = first_stride(canvas)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let blocks = vec![
            ConvBlock::new(&mut rng, 1, EXTRACT_CHANNELS[0], 7, s1, 3),
            ConvBlock::new(&mut rng, EXTRACT_CHANNELS[0], EXTRACT_CHANNELS[1], 3, 2, 1),
            ConvBlock::new(&mut rng, EXTRACT_CHANNELS[1], EXTRACT_CHANNELS[2], 3, 2, 1),
        ];
        let corr_ch = FMAP_SIDE * FMAP_SIDE;
        let head = vec![
            ConvBlock::new(&mut rng, corr_ch, HEAD_CHANNELS[0], 7, 1, 0),
            ConvBlock::new(&mut rng, HEAD_CHANNELS[0], HEAD_CHANNELS[1], 5, 1, 0),
        ];
        // 15 -> 9 -> 5 under the two valid convolutions.
        let side = 5;
        let fc = Linear::new_zeroed(HEAD_CHANNELS[1] * side * side, kind.param_count());
        Ok(Self {
            kind,
            canvas,
            blocks,
            head,
            fc,
            cache: ForwardCache::default(),
        })
    }

    fn extract_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward_train(&y);
        }
        y
    }

    fn extract_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward_eval(&y);
        }
        y
    }

    fn head_train(&mut self, rn: &Array4<f64>) -> Array2<f64> {
        let mut y = rn.clone();
        for b in &mut self.head {
            y = b.forward_train(&y);
        }
        let (n, c, h, w) = y.dim();
        let flat = y.into_shape_with_order((n, c * h * w)).expect("head flatten");
        self.fc.forward(&flat)
    }

    fn head_eval(&self, rn: &Array4<f64>) -> Array2<f64> {
        let mut y = rn.clone();
        for b in &self.head {
            y = b.forward_eval(&y);
        }
        let (n, c, h, w) = y.dim();
        let flat = y.into_shape_with_order((n, c * h * w)).expect("head flatten");
        self.fc.forward_eval(&flat)
    }

    /// Training-mode forward: batch statistics in every normalization layer,
    /// caches kept for [`MatchNet::backward`]. `moving` and `fixed` are
    /// (N, 1, canvas, canvas) with intensities on a unit scale.
    pub fn forward_train(&mut self, moving: &Array4<f64>, fixed: &Array4<f64>) -> Array2<f64> {
        // One extractor pass over both stacks keeps the weights shared and
        // the batch statistics common to the two sides.
        let n = moving.dim().0;
        let joint = concatenate(Axis(0), &[moving.view(), fixed.view()]).expect("stack inputs");
        let feats = self.extract_train(&joint);
        let fa_pre = feats.slice(s![..n, .., .., ..]).to_owned();
        let fb_pre = feats.slice(s![n.., .., .., ..]).to_owned();
        let fa = l2norm_channels(&fa_pre);
        let fb = l2norm_channels(&fb_pre);
        let raw = correlate(&fa, &fb);
        let r = relu(&raw);
        let rn = l2norm_channels(&r);
        self.cache = ForwardCache {
            fa_pre: Some(fa_pre),
            fb_pre: Some(fb_pre),
            fa: Some(fa),
            fb: Some(fb),
            corr_raw: Some(raw),
            corr_relu: Some(r),
        };
        self.head_train(&rn)
    }

    /// Inference forward: running statistics, no caches.
    pub fn forward_eval(&self, moving: &Array4<f64>, fixed: &Array4<f64>) -> Array2<f64> {
        let fa = l2norm_channels(&self.extract_eval(moving));
        let fb = l2norm_channels(&self.extract_eval(fixed));
        let rn = l2norm_channels(&relu(&correlate(&fa, &fb)));
        self.head_eval(&rn)
    }

    /// Backpropagates a gradient on the predicted parameters, accumulating
    /// into every layer's parameter gradients.
    pub fn backward(&mut self, dtheta: &Array2<f64>) {
        let dflat = self.fc.backward(dtheta);
        let n = dflat.nrows();
        let side = 5;
        let mut d = dflat
            .into_shape_with_order((n, HEAD_CHANNELS[1], side, side))
            .expect("head unflatten");
        for b in self.head.iter_mut().rev() {
            d = b.backward(&d);
        }
        let corr_relu = self.cache.corr_relu.take().expect("backward before forward");
        let corr_raw = self.cache.corr_raw.take().expect("backward before forward");
        let fa = self.cache.fa.take().expect("backward before forward");
        let fb = self.cache.fb.take().expect("backward before forward");
        let fa_pre = self.cache.fa_pre.take().expect("backward before forward");
        let fb_pre = self.cache.fb_pre.take().expect("backward before forward");

        let dr = l2norm_channels_backward(&corr_relu, &d);
        let draw = relu_backward(&corr_raw, &dr);
        let (dfa_n, dfb_n) = correlate_backward(&fa, &fb, &draw);
        let dfa = l2norm_channels_backward(&fa_pre, &dfa_n);
        let dfb = l2norm_channels_backward(&fb_pre, &dfb_n);
        let mut dj = concatenate(Axis(0), &[dfa.view(), dfb.view()]).expect("stack grads");
        for b in self.blocks.iter_mut().rev() {
            dj = b.backward(&dj);
        }
    }

    /// Named learnable parameters in a stable order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("extractor.{i}.conv.weight"), &mut b.conv.weight));
            out.push((format!("extractor.{i}.conv.bias"), &mut b.conv.bias));
            out.push((format!("extractor.{i}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("extractor.{i}.bn.beta"), &mut b.bn.beta));
        }
        for (i, b) in self.head.iter_mut().enumerate() {
            out.push((format!("head.{i}.conv.weight"), &mut b.conv.weight));
            out.push((format!("head.{i}.conv.bias"), &mut b.conv.bias));
            out.push((format!("head.{i}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("head.{i}.bn.beta"), &mut b.bn.beta));
        }
        out.push(("fc.weight".into(), &mut self.fc.weight));
        out.push(("fc.bias".into(), &mut self.fc.bias));
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn running_stats(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.insert(format!("extractor.{i}.bn.running_mean"), b.bn.running_mean.to_vec());
            out.insert(format!("extractor.{i}.bn.running_var"), b.bn.running_var.to_vec());
        }
        for (i, b) in self.head.iter().enumerate() {
            out.insert(format!("head.{i}.bn.running_mean"), b.bn.running_mean.to_vec());
            out.insert(format!("head.{i}.bn.running_var"), b.bn.running_var.to_vec());
        }
        out
    }

    /// Serializes weights and running statistics to pretty JSON.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut params = BTreeMap::new();
        let mut me = self.clone();
        for (name, p) in me.params_mut() {
            params.insert(
                name,
                TensorRecord {
                    shape: p.value.shape().to_vec(),
                    data: p.value.iter().copied().collect(),
                },
            );
        }
        let record = CheckpointRecord {
            kind: self.kind,
            canvas: self.canvas,
            arch: arch_string(),
            params,
            running: self.running_stats(),
        };
        let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Restores a checkpoint written by [`MatchNet::save_checkpoint`],
    /// refusing files for a different stage or architecture.
    pub fn load_checkpoint(path: &Path, expected: StageKind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: CheckpointRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if record.kind != expected {
            return Err(Error::StageMismatch {
                expected: expected.name().to_string(),
                found: record.kind.name().to_string(),
            });
        }
        if record.arch != arch_string() {
            return Err(Error::Checkpoint(format!(
                "architecture {} does not match this build ({})",
                record.arch,
                arch_string()
            )));
        }
        let mut net = MatchNet::new(record.kind, record.canvas, 0)?;
        for (name, p) in net.params_mut() {
            let rec = record
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            check_shape(&name, p.value.shape(), &rec.shape)?;
            let arr = ArrayD::from_shape_vec(p.value.raw_dim(), rec.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {name} is not finite")));
            }
            p.value = arr;
        }
        let load_running = |name: String, target: &mut Array1<f64>| -> Result<()> {
            let vec = record
                .running
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
            if vec.len() != target.len() {
                return Err(Error::Checkpoint(format!(
                    "buffer {name} has length {}, expected {}",
                    vec.len(),
                    target.len()
                )));
            }
            *target = Array1::from_vec(vec.clone());
            Ok(())
        };
        for i in 0..net.blocks.len() {
            let mean_name = format!("extractor.{i}.bn.running_mean");
            let var_name = format!("extractor.{i}.bn.running_var");
            let mut mean = net.blocks[i].bn.running_mean.clone();
            let mut var = net.blocks[i].bn.running_var.clone();
            load_running(mean_name, &mut mean)?;
            load_running(var_name, &mut var)?;
            net.blocks[i].bn.running_mean = mean;
            net.blocks[i].bn.running_var = var;
        }
        for i in 0..net.head.len() {
            let mean_name = format!("head.{i}.bn.running_mean");
            let var_name = format!("head.{i}.bn.running_var");
            let mut mean = net.head[i].bn.running_mean.clone();
            let mut var = net.head[i].bn.running_var.clone();
            load_running(mean_name, &mut mean)?;
            load_running(var_name, &mut var)?;
            net.head[i].bn.running_mean = mean;
            net.head[i].bn.running_var = var;
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    kind: StageKind,
    canvas: usize,
    arch: String,
    params: BTreeMap<String, TensorRecord>,
    running: BTreeMap<String, Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn randu(rng: &mut ChaCha12Rng, n: usize, canvas: usize) -> Array4<f64> {
        Array::from_shape_fn((n, 1, canvas, canvas), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn feature_map_lands_on_the_expected_grid() {
        for canvas in [120usize, 240] {
            let net = MatchNet::new(StageKind::Affine, canvas, 1).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(2);
            let x = randu(&mut rng, 1, canvas);
            let f = net.extract_eval(&x);
            assert_eq!(f.dim(), (1, EXTRACT_CHANNELS[2], FMAP_SIDE, FMAP_SIDE));
        }
    }

    #[test]
    fn unsupported_canvas_is_a_config_error() {
        assert!(matches!(
            MatchNet::new(StageKind::Affine, 100, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn untrained_network_predicts_identity_parameters() {
        let net = MatchNet::new(StageKind::Tps, 120, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = randu(&mut rng, 2, 120);
        let b = randu(&mut rng, 2, 120);
        let theta = net.forward_eval(&a, &b);
        assert_eq!(theta.dim(), (2, 72));
        assert!(theta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let mut net = MatchNet::new(StageKind::Affine, 120, 5).unwrap();
        // Give the zero output layer some mass so its input gradient flows.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for v in net.fc.weight.value.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let a = randu(&mut rng, 2, 120);
        let b = randu(&mut rng, 2, 120);
        let probe = Array2::from_shape_fn((2, 6), |_| rng.gen_range(-1.0..1.0));

        net.zero_grads();
        let out = net.forward_train(&a, &b);
        assert_eq!(out.dim(), (2, 6));
        net.backward(&probe);

        // Spot-check a parameter from each depth of the network. Forward in
        // training mode so batch statistics match the analytic path.
        let eps = 1e-5;
        for name in [
            "extractor.0.conv.weight",
            "extractor.2.bn.gamma",
            "head.0.conv.weight",
            "fc.weight",
        ] {
            let flat = 3usize;
            let loss_at = |net: &MatchNet, delta: f64| {
                let mut n2 = net.clone();
                for (pname, p) in n2.params_mut() {
                    if pname == name {
                        p.value.as_slice_mut().unwrap()[flat] += delta;
                    }
                }
                let y = n2.forward_train(&a, &b);
                (&y * &probe).sum()
            };
            let fd = (loss_at(&net, eps) - loss_at(&net, -eps)) / (2.0 * eps);
            let mut got = f64::NAN;
            for (pname, p) in net.params_mut() {
                if pname == name {
                    got = p.grad.as_slice().unwrap()[flat];
                }
            }
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!(
                ((got - fd) / denom).abs() < 1e-3,
                "{name}: analytic {got:.6e} vs fd {fd:.6e}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_exactly() {
        let mut net = MatchNet::new(StageKind::Affine, 120, 7).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        // Push the network away from init so the test is not trivial.
        let a = randu(&mut rng, 2, 120);
        let b = randu(&mut rng, 2, 120);
        for v in net.fc.weight.value.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let _ = net.forward_train(&a, &b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        net.save_checkpoint(&path).unwrap();
        let restored = MatchNet::load_checkpoint(&path, StageKind::Affine).unwrap();

        let y0 = net.forward_eval(&a, &b);
        let y1 = restored.forward_eval(&a, &b);
        assert_eq!(y0, y1);
    }

    #[test]
    fn checkpoint_for_the_wrong_stage_is_refused() {
        let net = MatchNet::new(StageKind::Tps, 120, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        net.save_checkpoint(&path).unwrap();
        let err = MatchNet::load_checkpoint(&path, StageKind::Affine).unwrap_err();
        match err {
            Error::StageMismatch { expected, found } => {
                assert_eq!(expected, "affine");
                assert_eq!(found, "tps");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
