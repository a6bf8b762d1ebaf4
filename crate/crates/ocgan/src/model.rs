//! The five networks and their latent geometry.
//!
//! - Encoder: three 5×5 stride-2 convolutions (channels ×2 per layer, batch
//!   norm + leaky ReLU), final convolution capped with `tanh` so the latent
//!   support is the open box `(-1,1)^d`.
//! - Decoder/generator: the mirrored transposed convolutions, ending in a
//!   sigmoid so reconstructions live in `[0,1]`.
//! - Visual discriminator and classifier: the same three-convolution trunk
//!   (with their own base widths) plus a single-logit dense head.
//! - Latent discriminator: a fully connected stack on the flattened latent.
//!
//! All heads emit raw logits; binary cross entropy is always computed in
//! logit form.

use ndarray::{Array1, Array4, Axis};
use thiserror::Error;

use crate::nn::{LayerSpec, Mode, Net, ParameterStore};
use crate::rng;
use crate::Real;

const KERNEL: usize = 5;
const STRIDE: usize = 2;
const PAD: usize = 2;

/// Initialization standard deviation for all convolution and dense kernels.
pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("shape mismatch: expected {expected}, got {got:?}")]
    Shape { expected: String, got: Vec<usize> },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_side: usize,
    pub ae_base_channels: usize,
    pub vis_disc_base_channels: usize,
    pub classifier_base_channels: usize,
    pub leaky_slope: f64,
    pub latent_disc_widths: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_side: 28,
            ae_base_channels: 64,
            vis_disc_base_channels: 12,
            classifier_base_channels: 64,
            leaky_slope: 0.2,
            latent_disc_widths: vec![128, 64, 32, 16],
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    /// Reduced configuration for gradient-checking and other fast tests.
    pub fn tiny() -> Self {
        Self {
            input_side: 8,
            ae_base_channels: 4,
            vis_disc_base_channels: 4,
            classifier_base_channels: 4,
            latent_disc_widths: vec![16, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_side < 8 {
            return Err(ModelError::Architecture(format!(
                "input side {} is too small for three stride-2 reductions",
                self.input_side
            )));
        }
        for (label, c) in [
            ("ae_base_channels", self.ae_base_channels),
            ("vis_disc_base_channels", self.vis_disc_base_channels),
            ("classifier_base_channels", self.classifier_base_channels),
        ] {
            if c < 1 {
                return Err(ModelError::Architecture(format!("{label} must be >= 1")));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::Architecture(format!(
                "leaky_slope must lie in (0,1), got {}",
                self.leaky_slope
            )));
        }
        if self.latent_disc_widths.is_empty() || self.latent_disc_widths.iter().any(|&w| w == 0) {
            return Err(ModelError::Architecture(
                "latent_disc_widths must be nonempty and strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Spatial geometry of the encoder output, the paper's `d = flat_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub side: usize,
    pub flat_dim: usize,
}

impl LatentShape {
    pub fn dims(&self, batch: usize) -> (usize, usize, usize, usize) {
        (batch, self.channels, self.side, self.side)
    }
}

/// Latent tensor `(batch, channels, side, side)`; encoder outputs and
/// uniform samples keep every entry strictly inside `(-1,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch<R: Real> {
    pub data: Array4<R>,
}

impl<R: Real> LatentBatch<R> {
    pub fn len(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which of the five networks, for selective initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Encoder,
    Decoder,
    LatentDisc,
    VisualDisc,
    Classifier,
}

impl NetKind {
    pub const ALL: [NetKind; 5] = [
        NetKind::Encoder,
        NetKind::Decoder,
        NetKind::LatentDisc,
        NetKind::VisualDisc,
        NetKind::Classifier,
    ];
}

/// Static description of the five networks for one configuration.
#[derive(Debug, Clone)]
pub struct Networks {
    pub config: ModelConfig,
    pub latent: LatentShape,
    pub encoder: Net,
    pub decoder: Net,
    pub latent_disc: Net,
    pub visual_disc: Net,
    pub classifier: Net,
    /// Spatial sides through the encoder, input first.
    pub sides: Vec<usize>,
}

/// Shared trunk of the visual discriminator and classifier:
/// 1 -> base -> 2*base -> 4*base, batch norm + ReLU after every convolution.
fn conv_trunk(net: &mut Net, base: usize) -> usize {
    let chans = [1, base, 2 * base, 4 * base];
    for i in 0..3 {
        net.push(
            format!("conv{i}"),
            LayerSpec::Conv {
                in_ch: chans[i],
                out_ch: chans[i + 1],
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            },
        );
        net.push(format!("bn{i}"), LayerSpec::BatchNorm { features: chans[i + 1] });
        net.push(format!("act{i}"), LayerSpec::Relu);
    }
    chans[3]
}

/// Derive the network stack for a configuration.
pub fn networks(config: &ModelConfig) -> Result<Networks, ModelError> {
    config.validate()?;
    let geom = crate::nn::ConvGeom {
        kernel: KERNEL,
        stride: STRIDE,
        pad: PAD,
    };
    let mut sides = vec![config.input_side];
    for _ in 0..3 {
        sides.push(geom.out_side(*sides.last().unwrap()));
    }
    if *sides.last().unwrap() == 0 {
        return Err(ModelError::Architecture(
            "encoder output collapsed to zero spatial size".into(),
        ));
    }
    let base = config.ae_base_channels;
    let latent = LatentShape {
        channels: 4 * base,
        side: sides[3],
        flat_dim: 4 * base * sides[3] * sides[3],
    };

    // Encoder: conv/bn/lrelu twice, then conv + tanh onto the latent box.
    let mut encoder = Net::new("enc");
    let enc_chans = [1, base, 2 * base, 4 * base];
    for i in 0..3 {
        encoder.push(
            format!("conv{i}"),
            LayerSpec::Conv {
                in_ch: enc_chans[i],
                out_ch: enc_chans[i + 1],
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            },
        );
        if i < 2 {
            encoder.push(
                format!("bn{i}"),
                LayerSpec::BatchNorm { features: enc_chans[i + 1] },
            );
            encoder.push(
                format!("act{i}"),
                LayerSpec::LeakyRelu { slope: config.leaky_slope },
            );
        }
    }
    encoder.push("tanh", LayerSpec::Tanh);

    // Decoder mirrors the encoder; out_pad recovers the exact sides.
    let mut decoder = Net::new("dec");
    let dec_chans = [4 * base, 2 * base, base, 1];
    for i in 0..3 {
        let in_side = sides[3 - i];
        let target = sides[2 - i];
        let out_pad = target - ((in_side - 1) * STRIDE + KERNEL - 2 * PAD);
        decoder.push(
            format!("convt{i}"),
            LayerSpec::ConvT {
                in_ch: dec_chans[i],
                out_ch: dec_chans[i + 1],
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
                out_pad,
            },
        );
        if i < 2 {
            decoder.push(
                format!("bn{i}"),
                LayerSpec::BatchNorm { features: dec_chans[i + 1] },
            );
            decoder.push(
                format!("act{i}"),
                LayerSpec::LeakyRelu { slope: config.leaky_slope },
            );
        }
    }
    decoder.push("sigmoid", LayerSpec::Sigmoid);

    // Latent discriminator: dense stack on the flattened latent.
    let mut latent_disc = Net::new("dl");
    latent_disc.push("flatten", LayerSpec::Flatten);
    let mut prev = latent.flat_dim;
    for (i, &width) in config.latent_disc_widths.iter().enumerate() {
        latent_disc.push(
            format!("fc{i}"),
            LayerSpec::Dense { in_dim: prev, out_dim: width },
        );
        latent_disc.push(format!("bn{i}"), LayerSpec::BatchNorm { features: width });
        latent_disc.push(format!("act{i}"), LayerSpec::Relu);
        prev = width;
    }
    latent_disc.push("head", LayerSpec::Dense { in_dim: prev, out_dim: 1 });

    // Visual discriminator and classifier share the trunk shape.
    let mut visual_disc = Net::new("dv");
    let dv_out = conv_trunk(&mut visual_disc, config.vis_disc_base_channels);
    visual_disc.push("flatten", LayerSpec::Flatten);
    visual_disc.push(
        "head",
        LayerSpec::Dense { in_dim: dv_out * sides[3] * sides[3], out_dim: 1 },
    );

    let mut classifier = Net::new("cls");
    let cls_out = conv_trunk(&mut classifier, config.classifier_base_channels);
    classifier.push("flatten", LayerSpec::Flatten);
    classifier.push(
        "head",
        LayerSpec::Dense { in_dim: cls_out * sides[3] * sides[3], out_dim: 1 },
    );

    Ok(Networks {
        config: config.clone(),
        latent,
        encoder,
        decoder,
        latent_disc,
        visual_disc,
        classifier,
        sides,
    })
}

impl Networks {
    pub fn net(&self, kind: NetKind) -> &Net {
        match kind {
            NetKind::Encoder => &self.encoder,
            NetKind::Decoder => &self.decoder,
            NetKind::LatentDisc => &self.latent_disc,
            NetKind::VisualDisc => &self.visual_disc,
            NetKind::Classifier => &self.classifier,
        }
    }

    /// Initialize parameters for the given networks. Each network draws from
    /// its own named stream, so a subset build (ablations) leaves the others'
    /// initializations unchanged.
    pub fn init_params<R: Real>(&self, store: &mut ParameterStore<R>, kinds: &[NetKind]) {
        for &kind in kinds {
            let net = self.net(kind);
            let mut stream =
                rng::stream(self.config.init_seed, &format!("init/{}", net.name()));
            net.init_params(store, &mut stream, WEIGHT_INIT_STD);
        }
    }

    fn check_image_shape<R: Real>(&self, images: &Array4<R>) -> Result<(), ModelError> {
        let d = images.dim();
        if d.1 != 1 || d.2 != self.config.input_side || d.3 != self.config.input_side {
            return Err(ModelError::Shape {
                expected: format!("(batch, 1, {0}, {0})", self.config.input_side),
                got: vec![d.0, d.1, d.2, d.3],
            });
        }
        Ok(())
    }

    fn check_latent_shape<R: Real>(&self, latent: &LatentBatch<R>) -> Result<(), ModelError> {
        let d = latent.data.dim();
        if d.1 != self.latent.channels || d.2 != self.latent.side || d.3 != self.latent.side {
            return Err(ModelError::Shape {
                expected: format!(
                    "(batch, {}, {}, {})",
                    self.latent.channels, self.latent.side, self.latent.side
                ),
                got: vec![d.0, d.1, d.2, d.3],
            });
        }
        Ok(())
    }

    /// Evaluation-mode encoding; every output entry lies in `(-1,1)`.
    pub fn encode<R: Real>(
        &self,
        store: &ParameterStore<R>,
        images: &Array4<R>,
    ) -> Result<LatentBatch<R>, ModelError> {
        self.check_image_shape(images)?;
        let out = self
            .encoder
            .forward(store, images.clone().into_dyn(), Mode::Eval);
        Ok(LatentBatch {
            data: out.into_dimensionality().expect("latent rank"),
        })
    }

    /// Evaluation-mode decoding; every output entry lies in `[0,1]`.
    pub fn decode<R: Real>(
        &self,
        store: &ParameterStore<R>,
        latent: &LatentBatch<R>,
    ) -> Result<Array4<R>, ModelError> {
        self.check_latent_shape(latent)?;
        let out = self
            .decoder
            .forward(store, latent.data.clone().into_dyn(), Mode::Eval);
        Ok(out.into_dimensionality().expect("image rank"))
    }

    /// Evaluation-mode latent-discriminator logits, one per batch element.
    pub fn discriminate_latent<R: Real>(
        &self,
        store: &ParameterStore<R>,
        latent: &LatentBatch<R>,
    ) -> Result<Array1<R>, ModelError> {
        self.check_latent_shape(latent)?;
        let out = self
            .latent_disc
            .forward(store, latent.data.clone().into_dyn(), Mode::Eval);
        Ok(crate::nn::squeeze_logits(out))
    }

    /// Evaluation-mode visual-discriminator logits.
    pub fn discriminate_visual<R: Real>(
        &self,
        store: &ParameterStore<R>,
        images: &Array4<R>,
    ) -> Result<Array1<R>, ModelError> {
        self.check_image_shape(images)?;
        let out = self
            .visual_disc
            .forward(store, images.clone().into_dyn(), Mode::Eval);
        Ok(crate::nn::squeeze_logits(out))
    }

    /// Evaluation-mode classifier logits.
    pub fn classify<R: Real>(
        &self,
        store: &ParameterStore<R>,
        images: &Array4<R>,
    ) -> Result<Array1<R>, ModelError> {
        self.check_image_shape(images)?;
        let out = self
            .classifier
            .forward(store, images.clone().into_dyn(), Mode::Eval);
        Ok(crate::nn::squeeze_logits(out))
    }
}

/// Build all five networks' parameters for a configuration.
pub fn build<R: Real>(config: &ModelConfig) -> Result<(ParameterStore<R>, LatentShape), ModelError> {
    let nets = networks(config)?;
    let mut store = ParameterStore::new();
    nets.init_params(&mut store, &NetKind::ALL);
    Ok((store, nets.latent))
}

/// Per-image reconstruction MSE in evaluation mode, no noise, chunked so
/// memory stays bounded on large test sets.
pub fn reconstruction_errors<R: Real>(
    nets: &Networks,
    store: &ParameterStore<R>,
    images: &Array4<R>,
) -> Vec<f64> {
    const CHUNK: usize = 256;
    let n = images.len_of(Axis(0));
    let per_image = images.len() / n.max(1);
    let mut errors = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let chunk = images.slice(ndarray::s![start..end, .., .., ..]);
        let latent = nets
            .encoder
            .forward(store, chunk.to_owned().into_dyn(), Mode::Eval);
        let recon = nets.decoder.forward(store, latent, Mode::Eval);
        let recon = recon
            .into_dimensionality::<ndarray::Ix4>()
            .expect("image rank");
        for i in 0..end - start {
            let a = chunk.index_axis(Axis(0), i);
            let b = recon.index_axis(Axis(0), i);
            let sum: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| {
                    let d = (x - y).as_f64();
                    d * d
                })
                .sum();
            errors.push(sum / per_image as f64);
        }
        start = end;
    }
    errors
}

/// Seeded i.i.d. uniform latent samples, entries strictly inside `(-1,1)`.
pub fn sample_uniform_latent<R: Real>(
    shape: &LatentShape,
    count: usize,
    seed: u64,
) -> LatentBatch<R> {
    let mut stream = rng::stream(seed, "latent/uniform");
    sample_uniform_latent_with(shape, count, &mut stream)
}

pub(crate) fn sample_uniform_latent_with<R: Real>(
    shape: &LatentShape,
    count: usize,
    stream: &mut rand_chacha::ChaCha8Rng,
) -> LatentBatch<R> {
    let data = rng::uniform_open::<R>(
        stream,
        &[count, shape.channels, shape.side, shape.side],
        -1.0,
        1.0,
    );
    LatentBatch {
        data: data.into_dimensionality().expect("rank 4"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_latent_geometry() {
        // 28 -> 14 -> 7 -> 4 with 256 channels: flat_dim 4096 > 784 inputs.
        let (_, latent) = build::<f32>(&ModelConfig::default()).unwrap();
        assert_eq!(latent.channels, 256);
        assert_eq!(latent.side, 4);
        assert_eq!(latent.flat_dim, 4096);
        assert!(latent.flat_dim > 28 * 28);
    }

    #[test]
    fn base8_latent_geometry() {
        let config = ModelConfig {
            ae_base_channels: 8,
            ..ModelConfig::default()
        };
        let nets = networks(&config).unwrap();
        assert_eq!(nets.latent.channels, 32);
        assert_eq!(nets.latent.side, 4);
        assert_eq!(nets.latent.flat_dim, 512);
        assert_eq!(nets.sides, vec![28, 14, 7, 4]);
    }

    #[test]
    fn build_is_deterministic() {
        let config = ModelConfig::tiny();
        let (a, _) = build::<f32>(&config).unwrap();
        let (b, _) = build::<f32>(&config).unwrap();
        assert!(a.bitwise_eq_prefix(&b, ""));
    }

    #[test]
    fn too_small_input_side_is_rejected() {
        let config = ModelConfig {
            input_side: 7,
            ..ModelConfig::default()
        };
        assert!(matches!(
            build::<f32>(&config),
            Err(ModelError::Architecture(_))
        ));
    }

    #[test]
    fn encoder_output_is_inside_open_box() {
        let config = ModelConfig::tiny();
        let nets = networks(&config).unwrap();
        let (store, _) = build::<f32>(&config).unwrap();
        let images = Array4::<f32>::zeros((2, 1, 8, 8));
        let latent = nets.encode(&store, &images).unwrap();
        assert!(latent.data.iter().all(|&v| v > -1.0 && v < 1.0));
        assert!(latent.data.iter().all(|v| v.is_finite()));
        assert_eq!(latent.data.dim(), (2, nets.latent.channels, 1, 1));
    }

    #[test]
    fn decoder_output_is_in_unit_interval() {
        let config = ModelConfig::tiny();
        let nets = networks(&config).unwrap();
        let (store, latent) = build::<f32>(&config).unwrap();
        let z = sample_uniform_latent::<f32>(&latent, 3, 7);
        let images = nets.decode(&store, &z).unwrap();
        assert_eq!(images.dim(), (3, 1, 8, 8));
        assert!(images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // All-zeros latent also decodes to something finite.
        let z0 = LatentBatch {
            data: Array4::<f32>::zeros(latent.dims(1)),
        };
        assert!(nets.decode(&store, &z0).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn logit_heads_have_one_logit_per_example() {
        let config = ModelConfig::tiny();
        let nets = networks(&config).unwrap();
        let (store, latent) = build::<f32>(&config).unwrap();
        let z = sample_uniform_latent::<f32>(&latent, 8, 3);
        let zl = nets.discriminate_latent(&store, &z).unwrap();
        assert_eq!(zl.len(), 8);
        assert!(zl.iter().all(|v| v.is_finite()));
        let images = nets.decode(&store, &z).unwrap();
        let zv = nets.discriminate_visual(&store, &images).unwrap();
        let zc = nets.classify(&store, &images).unwrap();
        assert_eq!(zv.len(), 8);
        assert_eq!(zc.len(), 8);
        assert!(zv.iter().all(|v| v.is_finite()));
        assert!(zc.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_is_permutation_equivariant() {
        let config = ModelConfig::tiny();
        let nets = networks(&config).unwrap();
        let (store, latent) = build::<f32>(&config).unwrap();
        let z = sample_uniform_latent::<f32>(&latent, 4, 11);
        let logits = nets.discriminate_latent(&store, &z).unwrap();
        // Reverse the batch and compare.
        let mut rev = z.data.clone();
        for i in 0..4 {
            rev.index_axis_mut(Axis(0), i)
                .assign(&z.data.index_axis(Axis(0), 3 - i));
        }
        let rev_logits = nets
            .discriminate_latent(&store, &LatentBatch { data: rev })
            .unwrap();
        for i in 0..4 {
            assert_eq!(logits[i], rev_logits[3 - i]);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let config = ModelConfig::tiny();
        let nets = networks(&config).unwrap();
        let (store, _) = build::<f32>(&config).unwrap();
        let wrong = Array4::<f32>::zeros((1, 1, 9, 9));
        assert!(matches!(
            nets.encode(&store, &wrong),
            Err(ModelError::Shape { .. })
        ));
    }

    #[test]
    fn uniform_sampler_is_seeded() {
        let latent = LatentShape { channels: 2, side: 3, flat_dim: 18 };
        let a = sample_uniform_latent::<f32>(&latent, 5, 21);
        let b = sample_uniform_latent::<f32>(&latent, 5, 21);
        assert_eq!(a.data, b.data);
    }
}
