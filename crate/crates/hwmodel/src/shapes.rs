//! Layer lists fed to the cost model.

use rowquant::model::{LayerDims, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub name: String,
    pub dims: LayerDims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub name: String,
    pub layers: Vec<LayerShape>,
}

impl ModelShape {
    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.dims.macs()).sum()
    }

    pub fn from_model(model: &Model) -> Self {
        let layers = model
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, dims)| LayerShape {
                name: format!("layer{i}"),
                dims,
            })
            .collect();
        Self {
            name: model.arch.to_string(),
            layers,
        }
    }

    /// Looks up a built-in shape by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "resnet18" | "resnet-18" => Some(resnet18()),
            _ => None,
        }
    }
}

fn conv(name: &str, out_c: usize, in_c: usize, k: usize, out_hw: usize) -> LayerShape {
    LayerShape {
        name: name.to_string(),
        dims: LayerDims {
            rows: out_c,
            fan_in: in_c * k * k,
            positions: out_hw * out_hw,
        },
    }
}

/// ResNet-18 at 224x224 with 1000 classes (about 1.81 GMAC). Every
/// convolution, the 1x1 downsampling shortcuts and the classifier.
pub fn resnet18() -> ModelShape {
    let mut layers = vec![conv("conv1", 64, 3, 7, 112)];
    for b in 0..4 {
        layers.push(conv(&format!("layer1.{}", b), 64, 64, 3, 56));
    }
    let stages = [(2, 128, 28), (3, 256, 14), (4, 512, 7)];
    for (stage, width, hw) in stages {
        let prev = width / 2;
        layers.push(conv(&format!("layer{stage}.0"), width, prev, 3, hw));
        for b in 1..4 {
            layers.push(conv(&format!("layer{stage}.{b}"), width, width, 3, hw));
        }
        layers.push(conv(&format!("layer{stage}.down"), width, prev, 1, hw));
    }
    layers.push(LayerShape {
        name: "fc".into(),
        dims: LayerDims {
            rows: 1000,
            fan_in: 512,
            positions: 1,
        },
    });
    ModelShape {
        name: "resnet18".into(),
        layers,
    }
}
