//! The collusion classifier: a fixed convolutional architecture over square
//! grayscale rasters, trained with minibatch gradient descent.
//!
//! Layer stack: Conv(8,3x3)+ReLU, MaxPool 2x2, Conv(16,3x3)+ReLU,
//! MaxPool 2x2, Conv(32,3x3)+ReLU, Flatten, Dense(128)+ReLU, Dense(64)+ReLU,
//! Dense(32)+ReLU, Dense(1)+Sigmoid. Valid padding and stride 1 throughout;
//! on a 64x64 input the flatten width is 12*12*32 = 4608.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::ClassLabel;
use crate::nn::{
    bce_loss, Conv2d, Dense, Gradients, Layer, MaxPool2d, Network, NnError, OptimizerConfig,
    OptimizerState, Tensor,
};
use crate::raster::GrayscaleImage;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("model file checksum mismatch (truncated or corrupted)")]
    ChecksumMismatch,
    #[error("malformed model file: {0}")]
    Malformed(String),
}

const MAGIC: &[u8; 4] = b"RGSN";
const FORMAT_VERSION: u32 = 1;

/// Smallest input edge for which the conv/pool chain stays non-empty.
pub const MIN_INPUT_SIZE: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            validation_fraction: 0.10,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InsufficientData("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InsufficientData("batch_size must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(ModelError::InsufficientData(
                "validation_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// CSV columns: epoch,loss,train_acc,val_acc.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_accuracy, e.validation_accuracy
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// The classifier network plus its input contract.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub network: Network,
    pub input_size: usize,
    pub threshold: f64,
}

/// Trainable slots of the fixed architecture, in network order.
enum Slot {
    Conv { filters: usize, in_channels: usize },
    Hidden { outputs: usize, inputs: usize },
    Output { inputs: usize },
}

fn architecture(input_size: usize, mut init: impl FnMut(Slot) -> Layer) -> Network {
    // Shape chain under valid conv (k=3) and floor 2x2 pooling.
    let c3 = ((input_size - 2) / 2 - 2) / 2 - 2;
    let flat = 32 * c3 * c3;
    Network::new(vec![
        init(Slot::Conv { filters: 8, in_channels: 1 }),
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d::new(2)),
        init(Slot::Conv { filters: 16, in_channels: 8 }),
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d::new(2)),
        init(Slot::Conv { filters: 32, in_channels: 16 }),
        Layer::Relu,
        Layer::Flatten,
        init(Slot::Hidden { outputs: 128, inputs: flat }),
        Layer::Relu,
        init(Slot::Hidden { outputs: 64, inputs: 128 }),
        Layer::Relu,
        init(Slot::Hidden { outputs: 32, inputs: 64 }),
        Layer::Relu,
        init(Slot::Output { inputs: 32 }),
        Layer::Sigmoid,
    ])
}

impl CnnModel {
    /// Seeded initialization: He-uniform for ReLU layers, Xavier-uniform for
    /// the sigmoid output, zero biases.
    pub fn new(input_size: usize, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        if input_size < MIN_INPUT_SIZE {
            return Err(NnError::ShapeMismatch(format!(
                "input size {input_size} below minimum {MIN_INPUT_SIZE}"
            ))
            .into());
        }
        let network = architecture(input_size, |slot| match slot {
            Slot::Conv {
                filters,
                in_channels,
            } => Layer::Conv2d(Conv2d::he_init(filters, in_channels, 3, rng)),
            Slot::Hidden { outputs, inputs } => Layer::Dense(Dense::he_init(outputs, inputs, rng)),
            Slot::Output { inputs } => Layer::Dense(Dense::xavier_init(1, inputs, rng)),
        });
        network.check_shapes(&[1, input_size, input_size])?;
        Ok(CnnModel {
            network,
            input_size,
            threshold: 0.5,
        })
    }

    /// All-zero weights; the sigmoid output is then exactly 0.5 everywhere.
    pub fn zeroed(input_size: usize) -> Result<Self, ModelError> {
        if input_size < MIN_INPUT_SIZE {
            return Err(NnError::ShapeMismatch(format!(
                "input size {input_size} below minimum {MIN_INPUT_SIZE}"
            ))
            .into());
        }
        let network = architecture(input_size, |slot| match slot {
            Slot::Conv {
                filters,
                in_channels,
            } => Layer::Conv2d(Conv2d::zeros(filters, in_channels, 3)),
            Slot::Hidden { outputs, inputs } => Layer::Dense(Dense::zeros(outputs, inputs)),
            Slot::Output { inputs } => Layer::Dense(Dense::zeros(1, inputs)),
        });
        Ok(CnnModel {
            network,
            input_size,
            threshold: 0.5,
        })
    }

    /// Flatten width implied by the input size (4608 for 64x64).
    pub fn flatten_width(&self) -> usize {
        let c3 = ((self.input_size - 2) / 2 - 2) / 2 - 2;
        32 * c3 * c3
    }

    fn image_tensor(&self, img: &GrayscaleImage) -> Result<Tensor, ModelError> {
        if img.width != self.input_size || img.height != self.input_size {
            return Err(NnError::ShapeMismatch(format!(
                "image is {}x{}, model expects {}x{}",
                img.width, img.height, self.input_size, self.input_size
            ))
            .into());
        }
        Ok(Tensor::from_vec(
            vec![1, self.input_size, self.input_size],
            img.pixels.clone(),
        ))
    }

    /// Sigmoid probability of collusion plus the thresholded class
    /// (collusive iff probability >= threshold).
    pub fn predict(&self, img: &GrayscaleImage) -> Result<(f64, ClassLabel), ModelError> {
        let x = self.image_tensor(img)?;
        let p = self.network.predict(&x)?;
        let label = if p >= self.threshold {
            ClassLabel::Collusive
        } else {
            ClassLabel::Competitive
        };
        Ok((p, label))
    }
}

/// Train the classifier on labeled images.
///
/// The validation subset is drawn once per run from the seed and held fixed
/// across epochs; each epoch reshuffles the training items, walks minibatches
/// of `batch_size` (last batch may be smaller), and applies one optimizer
/// step per batch on the mean gradient. Gradients accumulate in sample-index
/// order, so the result is bit-reproducible for a given seed.
pub fn train(
    images: &[(GrayscaleImage, ClassLabel)],
    cfg: &TrainConfig,
) -> Result<(CnnModel, TrainReport), ModelError> {
    cfg.validate()?;
    let n_collusive = images
        .iter()
        .filter(|(_, l)| *l == ClassLabel::Collusive)
        .count();
    let n_competitive = images.len() - n_collusive;
    if n_collusive < 2 || n_competitive < 2 {
        return Err(ModelError::InsufficientData(format!(
            "need at least 2 images per class, got {n_collusive} collusive / {n_competitive} competitive"
        )));
    }
    let input_size = images[0].0.width;
    for (img, _) in images {
        if img.width != input_size || img.height != input_size {
            return Err(NnError::ShapeMismatch(format!(
                "image sizes differ: {}x{} vs {input_size}x{input_size}",
                img.width, img.height
            ))
            .into());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CnnModel::new(input_size, &mut rng)?;
    model.threshold = cfg.threshold;

    // Fixed validation split for the whole run.
    let mut indices: Vec<usize> = (0..images.len()).collect();
    indices.shuffle(&mut rng);
    let n_val = ((images.len() as f64) * cfg.validation_fraction)
        .round()
        .max(1.0) as usize;
    if n_val >= images.len() {
        return Err(ModelError::InsufficientData(
            "validation split leaves no training items".into(),
        ));
    }
    let (val_idx, train_idx) = indices.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let tensors: Vec<Tensor> = images
        .iter()
        .map(|(img, _)| model.image_tensor(img))
        .collect::<Result<_, _>>()?;
    let labels: Vec<f64> = images
        .iter()
        .map(|(_, l)| f64::from(l.as_binary()))
        .collect();

    let mut opt_state = OptimizerState::new();
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;

        for batch in train_idx.chunks(cfg.batch_size) {
            let mut acc = Gradients::zeros_like(&model.network);
            for &i in batch {
                let tape = model.network.forward_tape(&tensors[i])?;
                let p = tape.output();
                let (loss, grads) = model.network.backward_from_tape(&tape, labels[i]);
                loss_sum += loss;
                let predicted = p >= cfg.threshold;
                if predicted == (labels[i] == 1.0) {
                    correct += 1;
                }
                acc.add_assign(&grads);
            }
            acc.scale(1.0 / batch.len() as f64);
            crate::nn::step(&mut model.network, &acc, &mut opt_state, &cfg.optimizer);
        }

        let mut val_correct = 0usize;
        for &i in &val_idx {
            let p = model.network.predict(&tensors[i])?;
            if (p >= cfg.threshold) == (labels[i] == 1.0) {
                val_correct += 1;
            }
        }

        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            validation_accuracy: val_correct as f64 / val_idx.len() as f64,
        });
    }

    Ok((model, report))
}

// --- serialization -----------------------------------------------------

// Layout (all little-endian): magic "RGSN", format version u32, input_size
// u32, threshold f64, layer count u32, layer descriptors with their f64
// parameters, SHA-256 of everything preceding.

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        push_f64(buf, v);
    }
}

pub fn save_model(model: &CnnModel, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, model.input_size as u32);
    push_f64(&mut buf, model.threshold);
    push_u32(&mut buf, model.network.layers.len() as u32);
    for layer in &model.network.layers {
        match layer {
            Layer::Conv2d(l) => {
                buf.push(0);
                push_u32(&mut buf, l.filters as u32);
                push_u32(&mut buf, l.in_channels as u32);
                push_u32(&mut buf, l.kernel as u32);
                push_f64s(&mut buf, l.weights.data());
                push_f64s(&mut buf, &l.bias);
            }
            Layer::Relu => buf.push(1),
            Layer::MaxPool2d(l) => {
                buf.push(2);
                push_u32(&mut buf, l.size as u32);
            }
            Layer::Flatten => buf.push(3),
            Layer::Dense(l) => {
                buf.push(4);
                push_u32(&mut buf, l.outputs as u32);
                push_u32(&mut buf, l.inputs as u32);
                push_f64s(&mut buf, l.weights.data());
                push_f64s(&mut buf, &l.bias);
            }
            Layer::Sigmoid => buf.push(5),
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&buf)?;
    file.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Malformed("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_model(path: &Path) -> Result<CnnModel, ModelError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < MAGIC.len() + 4 + 32 {
        return Err(ModelError::ChecksumMismatch);
    }
    if &raw[..4] != MAGIC {
        return Err(ModelError::Malformed("bad magic, not a model file".into()));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version > FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, checksum) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(ModelError::ChecksumMismatch);
    }

    let mut cur = Cursor { buf: body, pos: 8 };
    let input_size = cur.u32()? as usize;
    let threshold = cur.f64()?;
    let n_layers = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = cur.u8()?;
        let layer = match kind {
            0 => {
                let filters = cur.u32()? as usize;
                let in_channels = cur.u32()? as usize;
                let kernel = cur.u32()? as usize;
                let weights = cur.f64s(filters * in_channels * kernel * kernel)?;
                let bias = cur.f64s(filters)?;
                Layer::Conv2d(Conv2d {
                    weights: Tensor::from_vec(vec![filters, in_channels, kernel, kernel], weights),
                    bias,
                    filters,
                    in_channels,
                    kernel,
                })
            }
            1 => Layer::Relu,
            2 => Layer::MaxPool2d(MaxPool2d::new(cur.u32()? as usize)),
            3 => Layer::Flatten,
            4 => {
                let outputs = cur.u32()? as usize;
                let inputs = cur.u32()? as usize;
                let weights = cur.f64s(outputs * inputs)?;
                let bias = cur.f64s(outputs)?;
                Layer::Dense(Dense {
                    weights: Tensor::from_vec(vec![outputs, inputs], weights),
                    bias,
                    inputs,
                    outputs,
                })
            }
            5 => Layer::Sigmoid,
            other => {
                return Err(ModelError::Malformed(format!(
                    "unknown layer kind {other}"
                )))
            }
        };
        layers.push(layer);
    }
    if cur.pos != body.len() {
        return Err(ModelError::Malformed("trailing bytes after layers".into()));
    }
    let network = Network::new(layers);
    network.check_shapes(&[1, input_size, input_size])?;
    Ok(CnnModel {
        network,
        input_size,
        threshold,
    })
}

/// Mean binary cross-entropy of a model over labeled images.
pub fn mean_loss(
    model: &CnnModel,
    images: &[(GrayscaleImage, ClassLabel)],
) -> Result<f64, ModelError> {
    let mut sum = 0.0;
    for (img, label) in images {
        let (p, _) = model.predict(img)?;
        sum += bce_loss(p, f64::from(label.as_binary()));
    }
    Ok(sum / images.len() as f64)
}
