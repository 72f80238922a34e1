//! The full localization network: frontend, encoder, gated decoder and the
//! two output heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderOutput, GcaConfig};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::frontend::{ela_batch, Frontend, FrontendConfig};
use crate::nn::{ParamStore, Session};
use crate::tensor::{Float, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub gca: GcaConfig,
    pub deep_supervision: bool,
    /// Channel layer norm inside the decoder conv blocks. Without it the
    /// deeper decoder nodes grow large activations and saturate the heads.
    pub decoder_norm: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::default(),
            gca: GcaConfig::default(),
            deep_supervision: true,
            decoder_norm: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.gca.validate()?;
        if self.encoder.in_channels != self.frontend.out_channels() {
            return Err(Error::Config(format!(
                "encoder.in_channels is {} but the frontend emits {} channels",
                self.encoder.in_channels,
                self.frontend.out_channels()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub frontend: Frontend,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

pub struct NetworkOutput {
    /// N×1×H×W forgery probabilities.
    pub map: Var,
    /// N×1×1×1 image-level probability.
    pub class_prob: Var,
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutput,
}

impl Network {
    /// Builds the network and its freshly initialized parameters.
    pub fn new<T: Float>(config: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let frontend = Frontend::new(&mut store, &config.frontend, &mut rng)?;
        let encoder = Encoder::new(&mut store, &config.encoder, &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            &config.encoder.stage_channels,
            &config.gca,
            config.deep_supervision,
            config.decoder_norm,
            &mut rng,
        )?;
        let net = Self {
            config: config.clone(),
            frontend,
            encoder,
            decoder,
        };
        Ok((net, store))
    }

    /// ELA residual for a batch, in the element type of the session.
    pub fn ela_input<T: Float>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ela_batch(&images.cast(), self.config.frontend.ela_quality)?.cast())
    }

    /// Forward pass on an N×3×H×W batch with a precomputed ELA residual.
    pub fn forward_with_ela<T: Float>(
        &self,
        s: &mut Session<T>,
        images: Tensor<T>,
        ela: Tensor<T>,
    ) -> Result<NetworkOutput> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::InvalidShape {
                op: "network_forward",
                shape: images.shape().to_vec(),
                reason: "expected N×3×H×W images".into(),
            });
        }
        self.config.encoder.check_input(h, w)?;
        let x = s.input(images);
        let e = s.input(ela);
        let feats = self.frontend.forward(s, x, e)?;
        let encoder = self.encoder.forward(s, feats)?;
        let decoder = self.decoder.forward(s, &encoder)?;
        let class_prob = s.graph.sigmoid(encoder.class_logit);
        Ok(NetworkOutput {
            map: decoder.map,
            class_prob,
            encoder,
            decoder,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, images: Tensor<T>) -> Result<NetworkOutput> {
        let ela = self.ela_input(&images)?;
        self.forward_with_ela(s, images, ela)
    }

    /// Inference without gradient tracking: returns the N×1×H×W map and
    /// the N image-level probabilities.
    pub fn predict<T: Float>(&self, store: &ParamStore<T>, images: Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let mut s = Session::new(store, false);
        let out = self.forward(&mut s, images)?;
        let map = s.graph.value(out.map).clone();
        let probs = s.graph.value(out.class_prob).data().to_vec();
        Ok((map, probs))
    }

    /// Re-applies parameter constraints after an optimizer step.
    pub fn project<T: Float>(&self, store: &mut ParamStore<T>) {
        self.frontend.project(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn output_shapes_and_ranges() {
        let (net, store) = Network::new::<f32>(&NetworkConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut rng);
        let (map, probs) = net.predict(&store, img).unwrap();
        assert_eq!(map.shape(), &[2, 1, 64, 64]);
        assert!(map.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(probs.len(), 2);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let (net, store) = Network::new::<f32>(&NetworkConfig::default(), 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let img = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
            net.predict(&store, img).unwrap()
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.data(), b.data());
        assert_eq!(pa, pb);
    }

    #[test]
    fn rejects_mismatched_encoder_width() {
        let mut cfg = NetworkConfig::default();
        cfg.frontend.ela_filters = 8;
        assert!(matches!(Network::new::<f32>(&cfg, 0), Err(Error::Config(_))));
    }
}
