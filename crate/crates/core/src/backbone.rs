//! Multi-stage convolutional encoders for the prior and current branches.

use ddatr_tensor::kernels::conv_out_extent;
use ddatr_tensor::{ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{Conv, Init, Norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            widths: vec![16, 32, 64, 128],
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(ModelError::Config("at least two encoder stages are required".into()));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(ModelError::Config("channel widths must be positive".into()));
        }
        if self.image_size >> self.widths.len() == 0 {
            return Err(ModelError::Config(format!(
                "image size {} too small for {} stages",
                self.image_size,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// Spatial extent at the output of stage `m` (1-based); 0 is the image.
    pub fn extent(&self, m: usize) -> usize {
        (0..m).fold(self.image_size, |e, _| conv_out_extent(e, 3, 2, 1).unwrap_or(0))
    }

    /// `[C, H, W]` entering stage `m`.
    pub fn input_shape(&self, m: usize) -> Vec<usize> {
        let c = if m == 1 { self.in_channels } else { self.widths[m - 2] };
        let e = self.extent(m - 1);
        vec![c, e, e]
    }

    pub fn output_shape(&self, m: usize) -> Vec<usize> {
        let e = self.extent(m);
        vec![self.widths[m - 1], e, e]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Prior,
    Current,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Prior => "prior",
            Branch::Current => "current",
        }
    }
}

/// `conv3×3 → IN → relu → conv3×3/2 → IN → relu`.
#[derive(Clone, Copy, Debug)]
pub struct Stage {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
}

impl Stage {
    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.norm1.instance(self.conv1.forward(x)?)?.relu()?;
        Ok(self.norm2.joint(self.conv2.forward(h)?)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub branch: Branch,
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        branch: Branch,
        config: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages());
        for m in 1..=config.stages() {
            let c_in = config.input_shape(m)[0];
            let c = config.widths[m - 1];
            let name = format!("{}.stage{m}", branch.name());
            stages.push(Stage {
                conv1: Conv::new(store, &format!("{name}.conv1"), c_in, c, 3, 1, Init::He, rng),
                norm1: Norm::new(store, &format!("{name}.norm1"), c),
                conv2: Conv::new(store, &format!("{name}.conv2"), c, c, 3, 2, Init::He, rng),
                norm2: Norm::new(store, &format!("{name}.norm2"), c),
            });
        }
        Ok(Self {
            branch,
            config: config.clone(),
            stages,
        })
    }

    /// Same parameters viewed as another branch.
    pub fn shared_as(&self, branch: Branch) -> Self {
        Self {
            branch,
            ..self.clone()
        }
    }

    /// Stage `m` (1-based) applied to the image (m = 1) or the fused output of
    /// stage `m − 1`.
    pub fn stage_forward<'g, T: Scalar>(&self, m: usize, x: Var<'g, T>) -> Result<Var<'g, T>> {
        if m == 0 || m > self.stages.len() {
            return Err(ModelError::Contract(format!("stage {m} outside 1..={}", self.stages.len())));
        }
        let expected = self.config.input_shape(m);
        let actual = x.shape();
        if actual != expected {
            return Err(ModelError::StageGeometry {
                branch: self.branch.name(),
                stage: m,
                expected,
                actual,
            });
        }
        self.stages[m - 1].forward(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddatr_tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometry() {
        let c = BackboneConfig::default();
        assert_eq!(c.output_shape(1), vec![16, 16, 16]);
        assert_eq!(c.output_shape(4), vec![128, 2, 2]);
        assert_eq!(c.input_shape(3), vec![32, 8, 8]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = BackboneConfig::default();
        c.widths = vec![8];
        assert!(c.validate().is_err());
        c.widths = vec![8, 8, 8, 8, 8, 8];
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_one_output_shape_and_zero_image() {
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig::default();
        let b = Backbone::new(&mut store, Branch::Current, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 32, 32]));
        let y = b.stage_forward(1, x).unwrap();
        assert_eq!(y.shape(), vec![16, 16, 16]);
        assert!(y.to_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_geometry_names_branch_and_stage() {
        let mut store = ParamStore::<f32>::new();
        let b = Backbone::new(&mut store, Branch::Prior, &BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let g = Graph::with_params(&store);
        let err = b.stage_forward(2, g.constant(Tensor::zeros(&[1, 32, 32]))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("prior") && msg.contains("stage 2"), "{msg}");
    }
}
