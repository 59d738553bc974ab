//! The three-head network: a small residual convolutional backbone that
//! produces a shared feature vector, followed by three parallel linear +
//! softmax heads — one over the whole class set and two over the 11 digit
//! classes.
//!
//! The backbone is a scaled-down stand-in for a full-size residual network:
//! a 3x3 stem, a 2x2 max pool, `channels_per_stage.len()` stages of residual
//! blocks (stride-2 transitions between stages), global average pooling, and
//! a linear projection to `feature_dim`. Full-scale shapes remain expressible
//! through [`BackboneConfig`]; the default is sized for CPU training.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ClassSet, CodecError, DIGIT_CLASSES};
use crate::tensor::{Element, Tape, Tensor, TensorError, ValueId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shape of the convolutional backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Input image size (height, width) in pixels.
    pub input_size: (usize, usize),
    pub channels_per_stage: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub residual: bool,
    /// Width of the shared feature vector consumed by all three heads.
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: (64, 64),
            channels_per_stage: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            residual: true,
            feature_dim: 128,
        }
    }
}

impl BackboneConfig {
    /// A smaller configuration for quick comparison sweeps on 32x32 renders.
    pub fn small_32() -> Self {
        BackboneConfig {
            input_size: (32, 32),
            channels_per_stage: vec![8, 16, 32],
            blocks_per_stage: vec![1, 1, 1],
            residual: true,
            feature_dim: 64,
        }
    }

    /// A tiny configuration used by gradient checks.
    pub fn tiny_16() -> Self {
        BackboneConfig {
            input_size: (16, 16),
            channels_per_stage: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            residual: true,
            feature_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels_per_stage.is_empty() {
            return Err(ModelError::Config("need at least one stage".into()));
        }
        if self.channels_per_stage.len() != self.blocks_per_stage.len() {
            return Err(ModelError::Config(format!(
                "{} channel entries but {} block entries",
                self.channels_per_stage.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.channels_per_stage.iter().any(|&c| c == 0)
            || self.blocks_per_stage.iter().any(|&b| b == 0)
        {
            return Err(ModelError::Config("stage sizes must be positive".into()));
        }
        if self.feature_dim < 8 {
            return Err(ModelError::Config(format!(
                "feature_dim {} below minimum 8",
                self.feature_dim
            )));
        }
        let (h, w) = self.final_spatial();
        if h == 0 || w == 0 {
            return Err(ModelError::Config(format!(
                "input {}x{} too small for {} stages",
                self.input_size.0,
                self.input_size.1,
                self.channels_per_stage.len()
            )));
        }
        Ok(())
    }

    /// Spatial size after the stem pool and all stage transitions.
    fn final_spatial(&self) -> (usize, usize) {
        let (mut h, mut w) = self.input_size;
        if h < 2 || w < 2 {
            return (0, 0);
        }
        // stem pool 2x2 stride 2
        h /= 2;
        w /= 2;
        // stride-2 transition into each stage after the first
        for _ in 1..self.channels_per_stage.len() {
            if h < 1 || w < 1 {
                return (0, 0);
            }
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }
}

/// The three output distributions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTriple {
    /// Distribution over the class set.
    pub p: Vec<f64>,
    /// Distribution over the first digit's 11 classes.
    pub p1: Vec<f64>,
    /// Distribution over the second digit's 11 classes.
    pub p2: Vec<f64>,
}

impl PredictionTriple {
    pub fn is_valid(&self, tol: f64) -> bool {
        let ok = |v: &[f64]| {
            v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
        };
        ok(&self.p) && ok(&self.p1) && ok(&self.p2)
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
}

/// Tape handles produced by one recorded forward pass.
pub struct ForwardIds {
    /// One id per parameter, aligned with [`Network::params`] order.
    pub params: Vec<ValueId>,
    pub features: ValueId,
    pub logits_holistic: ValueId,
    pub logits_digit1: ValueId,
    pub logits_digit2: ValueId,
}

/// The three-head classifier with its configuration and class set.
#[derive(Clone)]
pub struct Network<E: Element> {
    cfg: BackboneConfig,
    classes: ClassSet,
    params: Vec<Parameter<E>>,
    by_name: HashMap<String, usize>,
}

/// Builds a freshly initialized network. Weights use He fan-in scaling drawn
/// from a seeded stream, biases start at zero; the same `(cfg, seed)` always
/// produces bit-identical parameters.
pub fn build_network<E: Element>(
    cfg: BackboneConfig,
    classes: ClassSet,
    seed: u64,
) -> Result<Network<E>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<Parameter<E>> = Vec::new();

    let add_conv = |name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng,
                        params: &mut Vec<Parameter<E>>| {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data: Vec<E> = (0..cout * cin * k * k)
            .map(|_| E::from_f64(normal.sample(rng)))
            .collect();
        params.push(Parameter {
            name: format!("{name}.w"),
            value: Tensor::new(vec![cout, cin, k, k], data).unwrap(),
        });
        params.push(Parameter {
            name: format!("{name}.b"),
            value: Tensor::zeros(vec![cout]),
        });
    };
    let add_linear = |name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng,
                      params: &mut Vec<Parameter<E>>| {
        let std = (2.0 / din as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data: Vec<E> = (0..din * dout)
            .map(|_| E::from_f64(normal.sample(rng)))
            .collect();
        params.push(Parameter {
            name: format!("{name}.w"),
            value: Tensor::new(vec![din, dout], data).unwrap(),
        });
        params.push(Parameter {
            name: format!("{name}.b"),
            value: Tensor::zeros(vec![dout]),
        });
    };

    add_conv("stem", cfg.channels_per_stage[0], 3, 3, &mut rng, &mut params);
    for (i, (&ch, &blocks)) in cfg
        .channels_per_stage
        .iter()
        .zip(&cfg.blocks_per_stage)
        .enumerate()
    {
        for j in 0..blocks {
            let transition = i > 0 && j == 0;
            let cin = if transition {
                cfg.channels_per_stage[i - 1]
            } else {
                ch
            };
            add_conv(&format!("s{i}.b{j}.conv1"), ch, cin, 3, &mut rng, &mut params);
            add_conv(&format!("s{i}.b{j}.conv2"), ch, ch, 3, &mut rng, &mut params);
            if cfg.residual && transition {
                add_conv(&format!("s{i}.b{j}.short"), ch, cin, 1, &mut rng, &mut params);
            }
        }
    }
    let last_ch = *cfg.channels_per_stage.last().unwrap();
    add_linear("feat", last_ch, cfg.feature_dim, &mut rng, &mut params);
    add_linear("head_num", cfg.feature_dim, classes.len(), &mut rng, &mut params);
    add_linear("head_d1", cfg.feature_dim, DIGIT_CLASSES, &mut rng, &mut params);
    add_linear("head_d2", cfg.feature_dim, DIGIT_CLASSES, &mut rng, &mut params);

    let by_name = params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    Ok(Network {
        cfg,
        classes,
        params,
        by_name,
    })
}

impl<E: Element> Network<E> {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn params(&self) -> &[Parameter<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<E>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<E>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<E>> {
        self.by_name.get(name).map(|&i| &mut self.params[i])
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn validate_batch(&self, batch: &Tensor<E>) -> Result<(), ModelError> {
        let s = batch.shape();
        let (h, w) = self.cfg.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(ModelError::Input(format!(
                "batch shape {s:?} does not match [N,3,{h},{w}]"
            )));
        }
        let lo = E::from_f64(-1e-6);
        let hi = E::from_f64(1.0 + 1e-6);
        if !batch.data().iter().all(|&v| v >= lo && v <= hi) {
            return Err(ModelError::Input("pixel values must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`; with `track_grads` the
    /// parameter leaves request gradients (training mode).
    ///
    /// Pixels arrive in [0,1] and are centered to [-1,1] before the stem,
    /// which keeps freshly initialized activations near zero mean.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<E>,
        batch: &Tensor<E>,
        track_grads: bool,
    ) -> Result<ForwardIds, ModelError> {
        self.validate_batch(batch)?;
        let param_ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf(&p.value, track_grads))
            .collect();
        let id = |name: &str| param_ids[self.by_name[name]];

        let half = E::from_f64(0.5);
        let two = E::from_f64(2.0);
        let centered = Tensor::new(
            batch.shape().to_vec(),
            batch.data().iter().map(|&v| (v - half) * two).collect(),
        )
        .expect("same shape");
        let mut x = tape.leaf_owned(centered, false);
        let y = tape.conv2d(x, id("stem.w"), id("stem.b"), 1, 1)?;
        x = tape.relu(y);
        x = tape.maxpool2d(x, 2, 2)?;

        for (i, &blocks) in self.cfg.blocks_per_stage.iter().enumerate() {
            for j in 0..blocks {
                let transition = i > 0 && j == 0;
                let stride = if transition { 2 } else { 1 };
                let c1 = tape.conv2d(
                    x,
                    id(&format!("s{i}.b{j}.conv1.w")),
                    id(&format!("s{i}.b{j}.conv1.b")),
                    stride,
                    1,
                )?;
                let a1 = tape.relu(c1);
                let c2 = tape.conv2d(
                    a1,
                    id(&format!("s{i}.b{j}.conv2.w")),
                    id(&format!("s{i}.b{j}.conv2.b")),
                    1,
                    1,
                )?;
                if self.cfg.residual {
                    let shortcut = if transition {
                        tape.conv2d(
                            x,
                            id(&format!("s{i}.b{j}.short.w")),
                            id(&format!("s{i}.b{j}.short.b")),
                            2,
                            0,
                        )?
                    } else {
                        x
                    };
                    let summed = tape.add(c2, shortcut)?;
                    // 1/sqrt(2) keeps activation variance level across the
                    // merge; there are no normalization layers to absorb it.
                    let scaled = tape.scale(summed, E::from_f64(std::f64::consts::FRAC_1_SQRT_2));
                    x = tape.relu(scaled);
                } else {
                    x = tape.relu(c2);
                }
            }
        }

        let pooled = tape.global_avg_pool(x)?;
        let projected = tape.linear(pooled, id("feat.w"), id("feat.b"))?;
        let features = tape.relu(projected);

        let logits_holistic = tape.linear(features, id("head_num.w"), id("head_num.b"))?;
        let logits_digit1 = tape.linear(features, id("head_d1.w"), id("head_d1.b"))?;
        let logits_digit2 = tape.linear(features, id("head_d2.w"), id("head_d2.b"))?;

        Ok(ForwardIds {
            params: param_ids,
            features,
            logits_holistic,
            logits_digit1,
            logits_digit2,
        })
    }

    /// Inference: one prediction triple per batch image.
    pub fn forward(&self, batch: &Tensor<E>) -> Result<Vec<PredictionTriple>, ModelError> {
        let mut tape = Tape::new();
        let ids = self.forward_on_tape(&mut tape, batch, false)?;
        let p = tape.softmax(ids.logits_holistic)?;
        let p1 = tape.softmax(ids.logits_digit1)?;
        let p2 = tape.softmax(ids.logits_digit2)?;
        Ok(self.collect_triples(&tape, p, p1, p2))
    }

    /// The shared feature vectors for a batch, shape `[N, feature_dim]`.
    pub fn extract_features(&self, batch: &Tensor<E>) -> Result<Tensor<E>, ModelError> {
        let mut tape = Tape::new();
        let ids = self.forward_on_tape(&mut tape, batch, false)?;
        Ok(tape.value(ids.features))
    }

    /// Runs only the heads on externally supplied feature vectors.
    pub fn forward_from_features(
        &self,
        features: &Tensor<E>,
    ) -> Result<Vec<PredictionTriple>, ModelError> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.cfg.feature_dim {
            return Err(ModelError::Input(format!(
                "feature shape {s:?} does not match [N,{}]",
                self.cfg.feature_dim
            )));
        }
        let mut tape = Tape::new();
        let f = tape.leaf(features, false);
        let mut w = |name: &str| tape_leaf(&mut tape, self.param(name).unwrap());
        let (wn, bn) = (w("head_num.w"), w("head_num.b"));
        let (w1, b1) = (w("head_d1.w"), w("head_d1.b"));
        let (w2, b2) = (w("head_d2.w"), w("head_d2.b"));
        let ln = tape.linear(f, wn, bn)?;
        let l1 = tape.linear(f, w1, b1)?;
        let l2 = tape.linear(f, w2, b2)?;
        let p = tape.softmax(ln)?;
        let p1 = tape.softmax(l1)?;
        let p2 = tape.softmax(l2)?;
        Ok(self.collect_triples(&tape, p, p1, p2))
    }

    fn collect_triples(
        &self,
        tape: &Tape<E>,
        p: ValueId,
        p1: ValueId,
        p2: ValueId,
    ) -> Vec<PredictionTriple> {
        let n = tape.shape(p)[0];
        let k = self.classes.len();
        let pd = tape.data(p);
        let p1d = tape.data(p1);
        let p2d = tape.data(p2);
        (0..n)
            .map(|i| PredictionTriple {
                p: pd[i * k..][..k].iter().map(|v| v.as_f64()).collect(),
                p1: p1d[i * DIGIT_CLASSES..][..DIGIT_CLASSES]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
                p2: p2d[i * DIGIT_CLASSES..][..DIGIT_CLASSES]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
            })
            .collect()
    }

    // ── Checkpoints ──────────────────────────────────────────────────

    /// Writes a versioned, self-describing checkpoint. Parameter bytes are
    /// stored exactly, so a reload reproduces identical forward outputs.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        iteration: u64,
        loss_weights: Option<(f64, f64, f64)>,
    ) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            dtype: E::DTYPE.name().to_string(),
            config: self.cfg.clone(),
            classes: self.classes.to_token_list(),
            iteration,
            loss_weights,
            params: self
                .params
                .iter()
                .map(|p| ParamDesc {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| ModelError::Format(format!("encode header: {e}")))?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())?;
        file.write_all(&header_json)?;
        let mut blob = Vec::new();
        for p in &self.params {
            for &v in p.value.data() {
                v.write_le(&mut blob);
            }
        }
        file.write_all(&blob)?;
        Ok(())
    }

    /// Loads a checkpoint saved with the same element type.
    pub fn load_checkpoint(path: &Path) -> Result<(Network<E>, CheckpointMeta), ModelError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad checkpoint magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_json)
            .map_err(|e| ModelError::Format(format!("decode header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        if header.dtype != E::DTYPE.name() {
            return Err(ModelError::Format(format!(
                "checkpoint stores {} parameters but {} was requested",
                header.dtype,
                E::DTYPE.name()
            )));
        }

        let classes = ClassSet::from_token_list(&header.classes)?;
        let mut params = Vec::with_capacity(header.params.len());
        for desc in &header.params {
            let numel: usize = desc.shape.iter().product();
            let mut bytes = vec![0u8; numel * E::BYTES];
            file.read_exact(&mut bytes)?;
            let data: Vec<E> = bytes.chunks_exact(E::BYTES).map(E::read_le).collect();
            params.push(Parameter {
                name: desc.name.clone(),
                value: Tensor::new(desc.shape.clone(), data)
                    .map_err(|e| ModelError::Format(e.to_string()))?,
            });
        }
        let by_name = params
            .iter()
            .enumerate()
            .map(|(i, p): (usize, &Parameter<E>)| (p.name.clone(), i))
            .collect();
        let net = Network {
            cfg: header.config,
            classes,
            params,
            by_name,
        };
        net.cfg.validate()?;
        Ok((
            net,
            CheckpointMeta {
                iteration: header.iteration,
                loss_weights: header.loss_weights,
            },
        ))
    }
}

fn tape_leaf<E: Element>(tape: &mut Tape<E>, p: &Parameter<E>) -> ValueId {
    tape.leaf(&p.value, false)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"JNUMCKP1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dtype: String,
    config: BackboneConfig,
    classes: String,
    iteration: u64,
    loss_weights: Option<(f64, f64, f64)>,
    params: Vec<ParamDesc>,
}

#[derive(Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

/// Bookkeeping stored beside the parameters in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub loss_weights: Option<(f64, f64, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::JerseyLabel;
    use rand::Rng;

    fn classes_n(n: u8) -> ClassSet {
        ClassSet::from_number_range(1, n).unwrap()
    }

    fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 3, h, w], data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: Network<f64> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 7).unwrap();
        let b: Network<f64> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 7).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data());
        }
        let c: Network<f64> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 8).unwrap();
        assert_ne!(
            a.params()[0].value.data(),
            c.params()[0].value.data(),
            "different seeds should differ"
        );
    }

    #[test]
    fn head_widths_match_class_set() {
        let classes = ClassSet::from_number_range(1, 80).unwrap();
        assert_eq!(classes.len(), 81);
        let net: Network<f64> = build_network(BackboneConfig::tiny_16(), classes, 1).unwrap();
        assert_eq!(net.param("head_num.w").unwrap().value.shape(), &[16, 81]);
        assert_eq!(net.param("head_d1.w").unwrap().value.shape(), &[16, 11]);
        assert_eq!(net.param("head_d2.w").unwrap().value.shape(), &[16, 11]);
    }

    #[test]
    fn param_count_matches_closed_form() {
        // Hand-computed layer sum for the default config (64x64, stages
        // [16,32,64] x [2,2,2], residual, feature 128) over an 81-way set.
        let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
        let lin = |di: usize, do_: usize| di * do_ + do_;
        let expected = conv(16, 3, 3)
            // stage 0: two blocks of 16->16
            + 2 * (conv(16, 16, 3) + conv(16, 16, 3))
            // stage 1: transition block 16->32 with 1x1 shortcut, then 32->32
            + conv(32, 16, 3) + conv(32, 32, 3) + conv(32, 16, 1)
            + conv(32, 32, 3) + conv(32, 32, 3)
            // stage 2: transition block 32->64 with 1x1 shortcut, then 64->64
            + conv(64, 32, 3) + conv(64, 64, 3) + conv(64, 32, 1)
            + conv(64, 64, 3) + conv(64, 64, 3)
            + lin(64, 128)
            + lin(128, 81) + lin(128, 11) + lin(128, 11);

        let classes = ClassSet::from_number_range(1, 80).unwrap();
        let net: Network<f32> = build_network(BackboneConfig::default(), classes, 3).unwrap();
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn forward_rows_are_distributions() {
        let net: Network<f64> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 5).unwrap();
        let batch = random_batch(3, 16, 16, 11);
        let preds = net.forward(&batch).unwrap();
        assert_eq!(preds.len(), 3);
        for t in &preds {
            assert!(t.is_valid(1e-5));
            assert_eq!(t.p.len(), 13);
            assert_eq!(t.p1.len(), 11);
        }
    }

    #[test]
    fn duplicate_images_get_identical_outputs() {
        let net: Network<f64> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 5).unwrap();
        let one = random_batch(1, 16, 16, 13);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let batch = Tensor::new(vec![2, 3, 16, 16], data).unwrap();
        let preds = net.forward(&batch).unwrap();
        assert_eq!(preds[0], preds[1]);
    }

    #[test]
    fn initial_holistic_loss_near_uniform() {
        // Freshly initialized heads should be near uniform: the holistic
        // cross-entropy stays within +/-15% of ln(K), measured over 100
        // random inputs across 5 seeds.
        let classes = ClassSet::from_number_range(1, 80).unwrap();
        let ln_k = (classes.len() as f64).ln();
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..5 {
            let net: Network<f64> =
                build_network(BackboneConfig::small_32(), classes.clone(), seed).unwrap();
            let batch = random_batch(20, 32, 32, 100 + seed);
            let preds = net.forward(&batch).unwrap();
            for (i, t) in preds.iter().enumerate() {
                let target = (i * 7) % classes.len();
                total += crate::loss::cross_entropy_onehot(&t.p, target);
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(
            (mean - ln_k).abs() < 0.15 * ln_k,
            "mean initial loss {mean} vs ln(81)={ln_k}"
        );
    }

    #[test]
    fn features_have_configured_width_and_determine_outputs() {
        let net: Network<f64> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 5).unwrap();
        let batch = random_batch(2, 16, 16, 17);
        let feats = net.extract_features(&batch).unwrap();
        assert_eq!(feats.shape(), &[2, 16]);

        // Identical pixels -> identical features.
        let feats2 = net.extract_features(&batch).unwrap();
        assert_eq!(feats.data(), feats2.data());

        // Heads applied to the extracted features reproduce forward().
        let direct = net.forward(&batch).unwrap();
        let via_features = net.forward_from_features(&feats).unwrap();
        assert_eq!(direct, via_features);
    }

    #[test]
    fn zeroed_features_give_softmax_of_bias() {
        let mut net: Network<f64> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 5).unwrap();
        // Give the holistic head a non-trivial bias so the check is not
        // vacuously uniform.
        let k = net.classes().len();
        {
            let b = net.param_mut("head_num.b").unwrap();
            for (i, v) in b.value.data_mut().iter_mut().enumerate() {
                *v = (i as f64) * 0.1 - 0.5;
            }
        }
        let zeros = Tensor::zeros(vec![1, 16]);
        let preds = net.forward_from_features(&zeros).unwrap();

        let bias = net.param("head_num.b").unwrap().value.data().to_vec();
        let m = bias.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = bias.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for i in 0..k {
            assert!(
                (preds[0].p[i] - exps[i] / sum).abs() < 1e-12,
                "closed-form softmax(bias) mismatch at {i}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net: Network<f32> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 5).unwrap();
        net.save_checkpoint(&path, 42, Some((0.3, 0.35, 0.35))).unwrap();

        let (loaded, meta) = Network::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(meta.iteration, 42);
        assert_eq!(meta.loss_weights, Some((0.3, 0.35, 0.35)));
        assert_eq!(loaded.classes(), net.classes());

        let batch = {
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let data: Vec<f32> = (0..2 * 3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::new(vec![2, 3, 16, 16], data).unwrap()
        };
        let a = net.forward(&batch).unwrap();
        let b = loaded.forward(&batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_dtype_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net: Network<f32> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 5).unwrap();
        net.save_checkpoint(&path, 0, None).unwrap();
        assert!(matches!(
            Network::<f64>::load_checkpoint(&path),
            Err(ModelError::Format(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let classes = classes_n(12);
        let mut cfg = BackboneConfig::default();
        cfg.blocks_per_stage = vec![2, 2];
        assert!(matches!(
            build_network::<f64>(cfg, classes.clone(), 0),
            Err(ModelError::Config(_))
        ));

        let mut cfg = BackboneConfig::default();
        cfg.feature_dim = 4;
        assert!(matches!(
            build_network::<f64>(cfg, classes.clone(), 0),
            Err(ModelError::Config(_))
        ));

        let mut cfg = BackboneConfig::default();
        cfg.input_size = (1, 1);
        assert!(matches!(
            build_network::<f64>(cfg, classes, 0),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        let net: Network<f64> =
            build_network(BackboneConfig::tiny_16(), classes_n(12), 5).unwrap();
        let batch = random_batch(1, 32, 32, 3);
        assert!(matches!(net.forward(&batch), Err(ModelError::Input(_))));
    }

    #[test]
    fn null_is_class_zero_everywhere() {
        let classes = classes_n(9);
        assert_eq!(classes.label_at(0).unwrap(), JerseyLabel::NULL);
    }
}
