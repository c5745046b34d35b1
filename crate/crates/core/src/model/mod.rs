//! Classifier network, the full defended/undefended pipeline, and training.

mod checkpoint;
mod train;

pub use checkpoint::{
    checkpoint_of, load_pipeline, read_checkpoint, save_pipeline, write_checkpoint, Checkpoint, CheckpointHeader,
    DictionaryRef, FrontendHeader, TensorEntry, CHECKPOINT_MAGIC,
};
pub use train::{cyclic_lr, evaluate, train, EpochStats, LrSchedule, TrainConfig, TrainHistory, TrainMode};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ConvGeometry, Gradients, SurrogateRegistry, Tape, Var};
use crate::dictlearn::Dictionary;
use crate::error::{Error, Result};
use crate::frontend::{hwc_to_chw, Decoder, Encoder, FrontendConfig};
use crate::nn::{init_rng, Bound, ConvLayer, DenseLayer, ParamStore};
use crate::patches::CHANNELS;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Input standardization `(x − mean) / std`, then stem conv, residual blocks,
/// global average pool, dense logits. With `stem_channels = 0` and no blocks
/// the network is a single dense layer on the flattened image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub seed: u64,
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            blocks: vec![
                BlockSpec { channels: 16, stride: 1 },
                BlockSpec { channels: 32, stride: 2 },
                BlockSpec { channels: 64, stride: 2 },
            ],
            num_classes: 10,
            seed: 0,
            input_mean: 0.5,
            input_std: 0.25,
        }
    }
}

impl ClassifierConfig {
    pub fn linear(num_classes: usize) -> Self {
        Self {
            stem_channels: 0,
            blocks: Vec::new(),
            num_classes,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    first: ConvLayer,
    second: ConvLayer,
    shortcut: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
enum Body {
    Linear,
    Conv { stem: ConvLayer, blocks: Vec<ResidualBlock> },
}

#[derive(Clone, Debug)]
pub struct Classifier<F> {
    config: ClassifierConfig,
    image_size: usize,
    params: ParamStore<F>,
    body: Body,
    head: DenseLayer,
}

impl<F: Float> Classifier<F> {
    pub fn new(config: &ClassifierConfig, image_size: usize) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        if !(config.input_std > 0.0 && config.input_mean.is_finite()) {
            return Err(Error::Config("input_std must be positive".into()));
        }
        if config.stem_channels == 0 && !config.blocks.is_empty() {
            return Err(Error::Config("residual blocks need a stem".into()));
        }
        let mut rng = init_rng(config.seed, 2);
        let mut params = ParamStore::new();
        let (body, features) = if config.stem_channels == 0 {
            (Body::Linear, CHANNELS * image_size * image_size)
        } else {
            let k3 = |stride| ConvGeometry::new(stride, 1);
            let stem = ConvLayer::new(&mut params, "stem", CHANNELS, config.stem_channels, 3, k3(1), &mut rng);
            let mut c_in = config.stem_channels;
            let mut blocks = Vec::new();
            for (i, b) in config.blocks.iter().enumerate() {
                if b.channels == 0 || b.stride == 0 {
                    return Err(Error::Config("block channels and stride must be >= 1".into()));
                }
                let name = format!("block{i}");
                let first = ConvLayer::new(&mut params, &format!("{name}.conv1"), c_in, b.channels, 3, k3(b.stride), &mut rng);
                let second = ConvLayer::new(&mut params, &format!("{name}.conv2"), b.channels, b.channels, 3, k3(1), &mut rng);
                // damp the residual branch so the un-normalized stack starts
                // close to its shortcut path
                params
                    .get_mut(second.weight)
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w *= F::of(0.25));
                let shortcut = (b.stride != 1 || b.channels != c_in).then(|| {
                    ConvLayer::new(
                        &mut params,
                        &format!("{name}.shortcut"),
                        c_in,
                        b.channels,
                        1,
                        ConvGeometry::new(b.stride, 0),
                        &mut rng,
                    )
                });
                blocks.push(ResidualBlock { first, second, shortcut });
                c_in = b.channels;
            }
            (Body::Conv { stem, blocks }, c_in)
        };
        let head = DenseLayer::new(&mut params, "head", features, config.num_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            image_size,
            params,
            body,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// `[3, N, N] → [num_classes]` logits.
    pub fn forward(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let n = self.image_size;
        let shape = tape.shape(x);
        if shape != [CHANNELS, n, n] {
            return Err(Error::shape("classifier", shape, &[CHANNELS, n, n]));
        }
        let shift = tape.constant(Tensor::full(vec![CHANNELS, n, n], F::of(self.config.input_mean)));
        let x = tape.sub(x, shift)?;
        let x = tape.scale(x, F::of(1.0 / self.config.input_std));
        let features = match &self.body {
            Body::Linear => tape.reshape(x, vec![CHANNELS * n * n])?,
            Body::Conv { stem, blocks } => {
                let y = stem.forward(tape, p, x)?;
                let mut h = tape.relu(y);
                for b in blocks {
                    let y = b.first.forward(tape, p, h)?;
                    let y = tape.relu(y);
                    let y = b.second.forward(tape, p, y)?;
                    let skip = match &b.shortcut {
                        Some(s) => s.forward(tape, p, h)?,
                        None => h,
                    };
                    let y = tape.add(y, skip)?;
                    h = tape.relu(y);
                }
                tape.global_avg_pool(h)?
            }
        };
        self.head.forward(tape, p, features)
    }
}

/// Encoder (frozen) plus trainable decoder.
#[derive(Clone, Debug)]
pub struct Frontend<F> {
    pub config: FrontendConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
}

impl<F: Float> Frontend<F> {
    pub fn new(dictionary: Dictionary, image_size: usize, config: &FrontendConfig, seed: u64) -> Result<Self> {
        let encoder = Encoder::from_config(dictionary, image_size, config)?;
        let decoder = Decoder::new(&config.decoder, *encoder.grid(), encoder.num_atoms(), seed)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }
}

/// Optional frontend followed by the classifier.
#[derive(Clone, Debug)]
pub struct Pipeline<F> {
    image_size: usize,
    frontend: Option<Frontend<F>>,
    classifier: Classifier<F>,
}

/// Tape handles for a bound pipeline.
#[derive(Clone, Debug)]
pub struct PipelineBound {
    decoder: Option<Bound>,
    classifier: Bound,
}

impl PipelineBound {
    /// Parameter gradients, grouped like [`Pipeline::param_stores`].
    pub fn collect_grads<F: Float>(&self, pipeline: &Pipeline<F>, grads: &mut Gradients<F>) -> Vec<Vec<Tensor<F>>> {
        let mut out = Vec::new();
        if let (Some(f), Some(b)) = (&pipeline.frontend, &self.decoder) {
            out.push(f.decoder.params().collect_grads(b, grads));
        }
        out.push(pipeline.classifier.params().collect_grads(&self.classifier, grads));
        out
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub input: Var,
    pub quantized: Option<Var>,
    pub logits: Var,
}

impl<F: Float> Pipeline<F> {
    pub fn natural(image_size: usize, classifier: &ClassifierConfig) -> Result<Self> {
        Ok(Self {
            image_size,
            frontend: None,
            classifier: Classifier::new(classifier, image_size)?,
        })
    }

    pub fn defended(
        image_size: usize,
        dictionary: Dictionary,
        frontend: &FrontendConfig,
        classifier: &ClassifierConfig,
    ) -> Result<Self> {
        Ok(Self {
            image_size,
            frontend: Some(Frontend::new(dictionary, image_size, frontend, classifier.seed)?),
            classifier: Classifier::new(classifier, image_size)?,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, CHANNELS]
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn frontend(&self) -> Option<&Frontend<F>> {
        self.frontend.as_ref()
    }

    pub fn frontend_mut(&mut self) -> Option<&mut Frontend<F>> {
        self.frontend.as_mut()
    }

    pub fn classifier(&self) -> &Classifier<F> {
        &self.classifier
    }

    /// Trainable parameter stores: decoder (if any), then classifier.
    pub fn param_stores(&self) -> Vec<&ParamStore<F>> {
        let mut v = Vec::new();
        if let Some(f) = &self.frontend {
            v.push(f.decoder.params());
        }
        v.push(self.classifier.params());
        v
    }

    pub fn param_stores_mut(&mut self) -> Vec<&mut ParamStore<F>> {
        let mut v = Vec::new();
        if let Some(f) = &mut self.frontend {
            v.push(f.decoder.params_mut());
        }
        v.push(self.classifier.params_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> PipelineBound {
        PipelineBound {
            decoder: self
                .frontend
                .as_ref()
                .map(|f| f.decoder.params().bind(tape, trainable)),
            classifier: self.classifier.params().bind(tape, trainable),
        }
    }

    /// Records the pipeline on `tape` for a channel-first image node.
    pub fn forward(&self, tape: &mut Tape<F>, p: &PipelineBound, x_chw: Var) -> Result<ForwardVars> {
        let (features, quantized) = match (&self.frontend, &p.decoder) {
            (Some(f), Some(dp)) => {
                let enc = f.encoder.forward(tape, x_chw)?;
                (f.decoder.forward(tape, dp, enc.quantized)?, Some(enc.quantized))
            }
            _ => (x_chw, None),
        };
        let logits = self.classifier.forward(tape, &p.classifier, features)?;
        Ok(ForwardVars {
            input: x_chw,
            quantized,
            logits,
        })
    }

    /// Logits for an `[N, N, 3]` image.
    pub fn logits(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        image.check_shape("pipeline", &self.image_shape())?;
        let mut tape = Tape::new();
        let x = tape.constant(hwc_to_chw(image)?);
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn predict(&self, image: &Tensor<F>) -> Result<usize> {
        Ok(self.logits(image)?.argmax())
    }

    /// Loss and its gradient with respect to an `[N, N, 3]` input, with the
    /// given backward rules for the encoder stages.
    pub fn input_gradient(
        &self,
        image: &Tensor<F>,
        label: usize,
        loss: LossKind,
        surrogates: &SurrogateRegistry,
    ) -> Result<InputGradient<F>> {
        image.check_shape("pipeline", &self.image_shape())?;
        let mut tape = Tape::with_surrogates(surrogates.clone());
        let x = tape.var(hwc_to_chw(image)?);
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, x)?;
        let l = match loss {
            LossKind::CrossEntropy => tape.cross_entropy(out.logits, label)?,
            LossKind::CwMargin => tape.cw_margin(out.logits, label)?,
        };
        let grads = tape.backward(l)?;
        let g = match grads.get(x) {
            Some(g) => crate::frontend::chw_to_hwc(g)?,
            None => Tensor::zeros(self.image_shape().to_vec()),
        };
        Ok(InputGradient {
            loss: tape.value(l).item()?,
            logits: tape.value(out.logits).clone(),
            gradient: g,
        })
    }

    /// Hash of the architecture and frozen dictionary, embedded in
    /// checkpoints and reports.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image_size.to_le_bytes());
        h.update(serde_json::to_vec(&self.classifier.config).expect("config serializes"));
        if let Some(f) = &self.frontend {
            h.update(serde_json::to_vec(&f.config).expect("config serializes"));
            for v in f.encoder.dictionary().columns() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Largest wrong logit minus the true logit.
    CwMargin,
}

#[derive(Clone, Debug)]
pub struct InputGradient<F> {
    pub loss: F,
    pub logits: Tensor<F>,
    pub gradient: Tensor<F>,
}
