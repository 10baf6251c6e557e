//! Layers shared by both stages: named conv layers and the VGG-16 conv1..conv5 trunk.

use rand::Rng;

use crate::config::Tap;
use crate::error::Result;
use crate::tensor::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Maps an image in `[0, 1]` to the zero-centred range the network sees.
pub fn normalize_input<T: Scalar>(image: &Tensor<f32>) -> Tensor<T> {
    Tensor::from_fn(image.shape().to_vec(), |i| T::of((image.data()[i] as f64 - 0.5) * 2.0))
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He fan-in normal, used for backbone convolutions.
    He,
    Gaussian(f64),
}

/// A convolution with `same` padding and stride 1, registered as
/// `<name>.weight` and `<name>.bias`.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel, kernel];
        let w = match init {
            Init::He => init::he_normal(&shape, rng),
            Init::Gaussian(std) => init::gaussian(&shape, std, rng),
        };
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([cout]))?;
        Ok(ConvLayer { name: name.to_string(), weight, bias, cin, cout, kernel })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, 1, self.kernel / 2)
    }

    pub fn numel(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }
}

/// A fully connected layer registered as `<name>.weight` `[out, in]` and `<name>.bias`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), init::gaussian(&[fan_out, fan_in], std, rng))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([fan_out]))?;
        Ok(LinearLayer { weight, bias, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Layer names of the trunk, grouped by stage. A 2×2 max pool follows every
/// stage except the last.
pub const BACKBONE_STAGES: [&[&str]; 5] = [
    &["conv1_1", "conv1_2"],
    &["conv2_1", "conv2_2"],
    &["conv3_1", "conv3_2", "conv3_3"],
    &["conv4_1", "conv4_2", "conv4_3"],
    &["conv5_1", "conv5_2", "conv5_3"],
];

/// Parameter-name prefixes selecting exactly the trunk layers (`conv4_3.` but
/// not `conv4_3_seg.`).
pub fn backbone_prefixes() -> Vec<String> {
    BACKBONE_STAGES.iter().flat_map(|s| s.iter()).map(|n| format!("{n}.")).collect()
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Vec<ConvLayer>>,
}

/// Post-ReLU activations of the tapped layers.
#[derive(Clone, Copy, Debug)]
pub struct BackboneTaps {
    pub conv4_3: Var,
    pub conv5_1: Var,
    pub conv5_2: Var,
    pub conv5_3: Var,
}

impl BackboneTaps {
    pub fn get(&self, tap: Tap) -> Var {
        match tap {
            Tap::Conv4_3 => self.conv4_3,
            Tap::Conv5_1 => self.conv5_1,
            Tap::Conv5_2 => self.conv5_2,
            Tap::Conv5_3 => self.conv5_3,
        }
    }
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, channels: [usize; 5], rng: &mut R) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::new();
        for (names, &cout) in BACKBONE_STAGES.iter().zip(&channels) {
            let mut stage = Vec::new();
            for name in names.iter() {
                stage.push(ConvLayer::new(store, name, cin, cout, 3, Init::He, rng)?);
                cin = cout;
            }
            stages.push(stage);
        }
        Ok(Backbone { stages })
    }

    pub fn out_channels(&self, tap: Tap) -> usize {
        let stage = if tap == Tap::Conv4_3 { 3 } else { 4 };
        self.stages[stage][0].cout
    }

    pub fn numel(&self) -> usize {
        self.stages.iter().flatten().map(ConvLayer::numel).sum()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Result<BackboneTaps> {
        let mut x = input;
        let mut conv4_3 = None;
        let mut conv5 = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            for layer in stage {
                let y = layer.forward(g, store, x)?;
                x = g.relu(y)?;
                if si == 4 {
                    conv5.push(x);
                }
            }
            if si == 3 {
                conv4_3 = Some(x);
            }
            if si < 4 {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(BackboneTaps {
            conv4_3: conv4_3.expect("stage 4 ran"),
            conv5_1: conv5[0],
            conv5_2: conv5[1],
            conv5_3: conv5[2],
        })
    }
}
