//! Content-suppression first layer: learnable RGB convolutions, fixed SRM
//! residuals, constrained (Bayar) convolutions and an error-level-analysis
//! branch, concatenated along channels.

pub mod bayar;
pub mod jpeg;
pub mod srm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamId, ParamStore, Session};
use crate::tensor::{Float, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub ela_quality: u32,
    pub rgb_filters: usize,
    pub ela_filters: usize,
    pub srm_filters: usize,
    pub bayar_filters: usize,
    pub bayar_kernel: usize,
    /// Fixed multiplier on the ELA residual before its convolutions.
    /// Residuals are a few gray levels, far below the RGB range.
    pub ela_gain: f64,
    /// Fixed multiplier on the SRM and Bayar responses.
    pub residual_gain: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            ela_quality: 90,
            rgb_filters: 16,
            ela_filters: 32,
            srm_filters: 3,
            bayar_filters: 3,
            bayar_kernel: 5,
            ela_gain: 64.0,
            residual_gain: 8.0,
        }
    }
}

impl FrontendConfig {
    pub fn out_channels(&self) -> usize {
        self.rgb_filters + self.srm_filters + self.bayar_filters + self.ela_filters
    }

    pub fn validate(&self) -> Result<()> {
        if self.srm_filters != srm::KERNELS.len() {
            return Err(Error::Config(format!(
                "srm_filters must be {} (one per fixed kernel)",
                srm::KERNELS.len()
            )));
        }
        if self.bayar_kernel % 2 == 0 || self.bayar_kernel < 3 {
            return Err(Error::Config("bayar_kernel must be odd and ≥ 3".into()));
        }
        if !(1..=100).contains(&self.ela_quality) {
            return Err(Error::InvalidQuality(self.ela_quality));
        }
        if !(self.ela_gain > 0.0 && self.ela_gain.is_finite() && self.residual_gain > 0.0 && self.residual_gain.is_finite()) {
            return Err(Error::Config("frontend gains must be positive and finite".into()));
        }
        if self.rgb_filters == 0 || self.ela_filters == 0 || self.bayar_filters == 0 {
            return Err(Error::Config("frontend filter counts must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters of the frontend layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Frontend {
    pub config: FrontendConfig,
    pub rgb: [Conv2d; 2],
    pub srm: ParamId,
    pub bayar: ParamId,
    pub ela: [Conv2d; 2],
}

/// Output of [`Frontend::forward_parts`], one variable per branch.
pub struct FrontendParts {
    pub rgb: Var,
    pub srm: Var,
    pub bayar: Var,
    pub ela: Var,
}

impl Frontend {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        config: &FrontendConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (r, e) = (config.rgb_filters, config.ela_filters);
        let rgb = [
            Conv2d::new(store, "frontend.rgb.0", 3, r, 3, 1, 1, Init::He, rng),
            Conv2d::new(store, "frontend.rgb.1", r, r, 3, 1, 1, Init::He, rng),
        ];
        let srm = store.add("frontend.srm.weight", srm::weights(3), false);
        let k = config.bayar_kernel;
        let bayar = store.add(
            "frontend.bayar.weight",
            bayar::init(config.bayar_filters, 3, k, rng),
            true,
        );
        let ela = [
            Conv2d::new(store, "frontend.ela.0", 3, e, 3, 1, 1, Init::He, rng),
            Conv2d::new(store, "frontend.ela.1", e, e, 3, 1, 1, Init::He, rng),
        ];
        Ok(Self {
            config: config.clone(),
            rgb,
            srm,
            bayar,
            ela,
        })
    }

    /// `image` is N×3×H×W, `ela` the matching ELA residual (see
    /// [`ela_batch`]), which is treated as a constant input.
    pub fn forward_parts<T: Float>(
        &self,
        s: &mut Session<T>,
        image: Var,
        ela: Var,
    ) -> Result<FrontendParts> {
        let h = self.rgb[0].forward(s, image)?;
        let h = s.graph.relu(h);
        let h = self.rgb[1].forward(s, h)?;
        let rgb = s.graph.relu(h);

        let gain = self.config.residual_gain;
        let w = s.param(self.srm);
        let srm = s.graph.residual_conv2d(image, w)?;
        let srm = s.graph.scale(srm, gain);
        let w = s.param(self.bayar);
        let bayar = s.graph.residual_conv2d(image, w)?;
        let bayar = s.graph.scale(bayar, gain);

        let ela = s.graph.scale(ela, self.config.ela_gain);
        let h = self.ela[0].forward(s, ela)?;
        let h = s.graph.relu(h);
        let h = self.ela[1].forward(s, h)?;
        let ela = s.graph.relu(h);
        Ok(FrontendParts {
            rgb,
            srm,
            bayar,
            ela,
        })
    }

    /// Concatenated `[rgb, srm, bayar, ela]` feature map.
    pub fn forward<T: Float>(&self, s: &mut Session<T>, image: Var, ela: Var) -> Result<Var> {
        let p = self.forward_parts(s, image, ela)?;
        s.graph.concat_channels(&[p.rgb, p.srm, p.bayar, p.ela])
    }

    /// Re-applies the Bayar constraint to the stored weights.
    pub fn project<T: Float>(&self, store: &mut ParamStore<T>) {
        bayar::project(&mut store.get_mut(self.bayar).value);
    }

    pub fn bayar_violation<T: Float>(&self, store: &ParamStore<T>) -> f64 {
        bayar::constraint_violation(store.value(self.bayar))
    }
}

/// ELA residual of every image in an N×3×H×W batch.
pub fn ela_batch(images: &Tensor<f32>, quality: u32) -> Result<Tensor<f32>> {
    let (n, c, h, w) = images.dims4()?;
    let plan = jpeg::JpegPlan::new(quality)?;
    let mut out = Vec::with_capacity(images.numel());
    for i in 0..n {
        let img = Tensor::new(&[c, h, w], images.image(i).to_vec())?;
        let rt = jpeg::roundtrip_with_plan(&img, &plan)?;
        out.extend(img.data().iter().zip(rt.data()).map(|(&a, &b)| (a - b).abs()));
    }
    Tensor::new(images.shape(), out)
}
