//! Regional grasp functions from a normalized patch to a rotation heatmap.

pub mod antipodal;
pub mod gated;
pub mod normals;

pub use antipodal::predict_antipodal;
pub use gated::{gated_forward, plain_forward, predict_gated, FeatureGrid, GatedNet, NetShape};
pub use normals::{plane_fit_normals, FnNormals, SceneSurface, SurfaceOracle};

use crate::codec::{AnchorSet, RotationHeatmap};
use crate::error::{NgsError, Result};
use crate::ngs::NormalizedPatch;

pub const DEFAULT_FRICTION_MU: f64 = 0.8;
pub const DEFAULT_MAX_PAIRS: usize = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictorParams {
    pub friction_mu: f64,
    /// Upper bound on point pairs examined per patch.
    pub max_pairs: usize,
    pub seed: u64,
    pub w_gripper: f64,
}

impl Default for PredictorParams {
    fn default() -> Self {
        Self { friction_mu: DEFAULT_FRICTION_MU, max_pairs: DEFAULT_MAX_PAIRS, seed: 0, w_gripper: 0.1 }
    }
}

impl PredictorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.friction_mu > 0.0 && self.friction_mu.is_finite()) {
            return Err(NgsError::Config(format!("friction coefficient must be positive, got {}", self.friction_mu)));
        }
        if !(self.w_gripper > 0.0) {
            return Err(NgsError::Config(format!("gripper width must be positive, got {}", self.w_gripper)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    Antipodal(PredictorParams),
    Gated { params: PredictorParams, net: GatedNet },
}

impl Predictor {
    pub fn params(&self) -> &PredictorParams {
        match self {
            Predictor::Antipodal(p) | Predictor::Gated { params: p, .. } => p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if let Predictor::Gated { net, .. } = self {
            net.validate()?;
        }
        Ok(())
    }

    /// Heatmap for one patch. The oracle only informs the antipodal predictor.
    pub fn predict(
        &self,
        patch: &NormalizedPatch,
        anchors: &AnchorSet,
        oracle: Option<&dyn SurfaceOracle>,
    ) -> Result<RotationHeatmap> {
        match self {
            Predictor::Antipodal(p) => Ok(predict_antipodal(patch, p, anchors, oracle)),
            Predictor::Gated { params, net } => predict_gated(patch, net, anchors, params.w_gripper / patch.ctx.w_ref),
        }
    }
}
