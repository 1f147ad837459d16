//! The end-to-end transmitter/receiver: backbone → aggregator → power
//! normalization → AWGN → receiver rescale → feature decoder → reconstructor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{sigma_from_snr, NoiseDraw};
use crate::datamodel::{derive_stage_shapes, ModelConfig, SegMask};
use crate::decoder::{argmax_mask, softmax, Decoder, DecoderCache};
use crate::encoder::{
    power_denormalize, power_normalize, rescaled_channel_backward, Aggregator, AggregatorCache, PowerScale,
};
use crate::error::{config_err, Error, Result};
use crate::params::{join, Parameters};
use crate::swin::{Backbone, BackboneCache};
use crate::tensor::{Scalar, Tensor};

/// Channel condition for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChannelState {
    Noiseless,
    Awgn { snr_db: f64, seed: u64 },
}

impl ChannelState {
    /// Unit-power noise realization for a transmitted tensor of `shape`.
    pub fn noise<F: Scalar>(&self, shape: &[usize]) -> Result<Option<Tensor<F>>> {
        match *self {
            ChannelState::Noiseless => Ok(None),
            ChannelState::Awgn { snr_db, seed } => {
                let sigma = sigma_from_snr(snr_db, 1.0)?;
                if sigma == 0.0 {
                    return Ok(None);
                }
                Ok(Some(NoiseDraw::new(shape, sigma, seed).realization))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct IsscModel<F> {
    pub config: ModelConfig,
    pub backbone: Backbone<F>,
    pub aggregator: Aggregator<F>,
    pub decoder: Decoder<F>,
}

pub struct ForwardCache<F> {
    backbone: BackboneCache<F>,
    aggregator: AggregatorCache<F>,
    x: Tensor<F>,
    scale: PowerScale<F>,
    noise: Option<Tensor<F>>,
    decoder: DecoderCache<F>,
}

/// Transmitter output: the normalized channel input and its per-item gains.
#[derive(Clone, Debug)]
pub struct Encoded<F> {
    pub x_hat: Tensor<F>,
    pub scale: PowerScale<F>,
}

impl<F: Scalar> IsscModel<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config, &mut rng)?;
        let aggregator = Aggregator::new(config.concat_channels(), config.k, &mut rng);
        let decoder = Decoder::new(config.k, config.n_cls, &mut rng);
        Ok(IsscModel { config: config.clone(), backbone, aggregator, decoder })
    }

    fn check_input(&self, image: &Tensor<F>) -> Result<()> {
        let (_, h, w, c) = image.dims4()?;
        if (h, w, c) != (self.config.height, self.config.width, 3) {
            return Err(config_err!(
                "model built for {}x{}x3 inputs, got {h}x{w}x{c}",
                self.config.height,
                self.config.width
            ));
        }
        Ok(())
    }

    /// Transmitter: semantic features `x`, power normalized.
    pub fn encode(&self, image: &Tensor<F>) -> Result<Encoded<F>> {
        self.check_input(image)?;
        let feats = self.backbone.forward(image)?;
        let x = self.aggregator.forward(&feats)?;
        let (x_hat, scale) = power_normalize(&x)?;
        Ok(Encoded { x_hat, scale })
    }

    /// Channel plus receiver rescale: `ŷ = (x̂ + ρ) / gain`.
    pub fn receive(&self, encoded: &Encoded<F>, channel: ChannelState) -> Result<Tensor<F>> {
        let mut y = encoded.x_hat.clone();
        if let Some(noise) = channel.noise::<F>(y.shape())? {
            y.add_assign(&noise);
        }
        Ok(power_denormalize(&y, &encoded.scale))
    }

    /// Receiver: class probabilities from rescaled received features.
    pub fn decode(&self, received: &Tensor<F>) -> Result<Tensor<F>> {
        let f = self.decoder.feature_decode(received)?;
        self.decoder.reconstruct_probs(&f)
    }

    /// Full pipeline returning probabilities and the argmax mask.
    pub fn issc_forward(&self, image: &Tensor<F>, channel: ChannelState) -> Result<(Tensor<F>, SegMask)> {
        let enc = self.encode(image)?;
        let probs = self.decode(&self.receive(&enc, channel)?)?;
        if !probs.all_finite() {
            return Err(Error::Numerical { layer: "reconstructor".into(), detail: "non-finite probabilities".into() });
        }
        let mask = argmax_mask(&probs)?;
        Ok((probs, mask))
    }

    /// Logits with a fixed unit-power noise realization (None = noiseless), caching for backward.
    pub fn forward_train(&self, image: &Tensor<F>, noise: Option<&Tensor<F>>) -> Result<(Tensor<F>, ForwardCache<F>)> {
        self.check_input(image)?;
        let (feats, bcache) = self.backbone.forward_cached(image)?;
        let (x, acache) = self.aggregator.forward_cached(&feats)?;
        let (mut y, scale) = power_normalize(&x)?;
        if let Some(n) = noise {
            y.add_assign(n);
        }
        let y = power_denormalize(&y, &scale);
        let (logits, dcache) = self.decoder.forward_cached(&y)?;
        let noise = noise.cloned();
        Ok((logits, ForwardCache { backbone: bcache, aggregator: acache, x, scale, noise, decoder: dcache }))
    }

    /// Gradients of a scalar loss given `dL/dlogits`, in a model-shaped container.
    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: &Tensor<F>) -> Result<IsscModel<F>> {
        let mut grad = self.zeros_like();
        let dy = self.decoder.backward(&cache.decoder, dlogits, &mut grad.decoder)?;
        let dx = rescaled_channel_backward(&cache.x, &cache.scale, cache.noise.as_ref(), &dy);
        let dfeats = self.aggregator.backward(&cache.aggregator, &dx, &mut grad.aggregator)?;
        self.backbone.backward(&cache.backbone, &dfeats, &mut grad.backbone)?;
        Ok(grad)
    }

    /// Stage output shapes as the backbone actually produces them.
    pub fn probe_stage_shapes(&self) -> Result<[(usize, usize, usize); 4]> {
        let img = Tensor::zeros(&[1, self.config.height, self.config.width, 3]);
        let feats = self.backbone.forward(&img)?;
        let mut out = [(0, 0, 0); 4];
        for (o, f) in out.iter_mut().zip(&feats) {
            let (_, h, w, c) = f.dims4()?;
            *o = (h, w, c);
        }
        debug_assert_eq!(Some(out), derive_stage_shapes(&self.config).ok());
        Ok(out)
    }

    pub fn cast<G: Scalar>(&self) -> IsscModel<G> {
        let mut out = IsscModel::<G>::new(&self.config, 0).expect("config already validated");
        let src = self.named_params();
        let mut i = 0;
        out.visit_mut("", &mut |name, t| {
            debug_assert_eq!(name, src[i].0);
            *t = src[i].1.cast();
            i += 1;
        });
        out
    }
}

impl<F: Scalar> Parameters<F> for IsscModel<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.backbone.visit(prefix, f);
        self.aggregator.visit(&join(prefix, "aggregator"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.backbone.visit_mut(prefix, f);
        self.aggregator.visit_mut(&join(prefix, "aggregator"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Logits → probabilities (separate so callers can reuse the logits).
pub fn probabilities<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let mut p = logits.clone();
    softmax(&mut p);
    p
}
