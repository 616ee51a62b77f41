use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::layers::ConvGeom;

/// Width of the basic subnetwork output.
pub const N_OUTPUTS: usize = 5;
/// RISI ratio categories.
pub const N_CATEGORIES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// `[nx, ny, nz]` of each input volume.
    pub input_dims: [usize; 3],
    /// Both scans of a pair enter as channels of one volume.
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// The first stage keeps resolution, later stages halve it.
    pub stages: Vec<StageConfig>,
    pub outputs: usize,
    pub risi_inputs: usize,
    pub risi_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dims: [24, 32, 24],
            in_channels: 2,
            stem_channels: 8,
            stem_stride: 2,
            stages: [8, 16, 32, 64]
                .iter()
                .map(|&channels| StageConfig { channels, blocks: 1 })
                .collect(),
            outputs: N_OUTPUTS,
            risi_inputs: 2 * N_OUTPUTS,
            risi_classes: N_CATEGORIES,
        }
    }
}

impl EncoderConfig {
    /// Two residual blocks on a 6x8x6 input: cheap enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            input_dims: [6, 8, 6],
            stem_channels: 3,
            stem_stride: 1,
            stages: vec![
                StageConfig { channels: 3, blocks: 1 },
                StageConfig { channels: 4, blocks: 1 },
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.outputs != N_OUTPUTS {
            return bad(format!(
                "basic subnetwork must emit {N_OUTPUTS} outputs, got {}",
                self.outputs
            ));
        }
        if self.risi_inputs != 2 * N_OUTPUTS || self.risi_classes != N_CATEGORIES {
            return bad(format!(
                "RISI head must map {} -> {}, got {} -> {}",
                2 * N_OUTPUTS,
                N_CATEGORIES,
                self.risi_inputs,
                self.risi_classes
            ));
        }
        if self.in_channels != 2 {
            return bad(format!("pairs enter as 2 channels, got {}", self.in_channels));
        }
        if self.input_dims.contains(&0) || self.stem_channels == 0 || self.stem_stride == 0 {
            return bad("input dims, stem channels and stride must be positive".into());
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0) {
            return bad("need at least one stage, each with positive channels and blocks".into());
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map(|s| s.channels).unwrap_or(self.stem_channels)
    }
}

/// One named parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvLayer {
    pub geom: ConvGeom,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct BnLayer {
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
    /// Index into the running-statistics table.
    pub slot: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Block {
    pub a: ConvBn,
    pub b: ConvBn,
    pub shortcut: Option<ConvBn>,
}

/// Resolved architecture: layer geometry plus parameter offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub(crate) stem: ConvBn,
    pub(crate) blocks: Vec<Block>,
    pub(crate) fc_w: usize,
    pub(crate) fc_b: usize,
    pub(crate) risi_w: usize,
    pub(crate) risi_b: usize,
    pub final_channels: usize,
    pub final_dims: [usize; 3],
    pub tensors: Vec<TensorSpec>,
    pub n_params: usize,
    /// Channel count of every batch-norm layer, in forward order.
    pub bn_channels: Vec<usize>,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    next: usize,
    bn_channels: Vec<usize>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.next;
        self.tensors.push(TensorSpec {
            name,
            shape,
            offset,
            len,
        });
        self.next += len;
        offset
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, in_dims: [usize; 3]) -> ConvBn {
        let geom = ConvGeom::new(cin, cout, k, stride, in_dims);
        let w = self.add(format!("{name}.conv"), vec![cout, cin, k, k, k]);
        let gamma = self.add(format!("{name}.bn.gamma"), vec![cout]);
        let beta = self.add(format!("{name}.bn.beta"), vec![cout]);
        let slot = self.bn_channels.len();
        self.bn_channels.push(cout);
        ConvBn {
            conv: ConvLayer { geom, w },
            bn: BnLayer {
                channels: cout,
                gamma,
                beta,
                slot,
            },
        }
    }
}

impl Architecture {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            tensors: Vec::new(),
            next: 0,
            bn_channels: Vec::new(),
        };
        let stem = b.conv_bn(
            "stem",
            cfg.in_channels,
            cfg.stem_channels,
            3,
            cfg.stem_stride,
            cfg.input_dims,
        );
        let mut dims = stem.conv.geom.out_dims;
        let mut cin = cfg.stem_channels;
        let mut blocks = Vec::new();
        for (si, stage) in cfg.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{}", si + 1, bi + 1);
                let a = b.conv_bn(&format!("{name}.a"), cin, stage.channels, 3, stride, dims);
                let mid = a.conv.geom.out_dims;
                let bb = b.conv_bn(&format!("{name}.b"), stage.channels, stage.channels, 3, 1, mid);
                let shortcut = (stride != 1 || cin != stage.channels)
                    .then(|| b.conv_bn(&format!("{name}.shortcut"), cin, stage.channels, 1, stride, dims));
                if let Some(sc) = &shortcut {
                    if sc.conv.geom.out_dims != mid {
                        return Err(NetError::Config(format!(
                            "{name}: shortcut dims {:?} != {mid:?}",
                            sc.conv.geom.out_dims
                        )));
                    }
                }
                blocks.push(Block { a, b: bb, shortcut });
                dims = mid;
                cin = stage.channels;
            }
        }
        let fc_w = b.add("head.fc.weight".into(), vec![cfg.outputs, cin]);
        let fc_b = b.add("head.fc.bias".into(), vec![cfg.outputs]);
        let risi_w = b.add("risi.fc.weight".into(), vec![cfg.risi_classes, cfg.risi_inputs]);
        let risi_b = b.add("risi.fc.bias".into(), vec![cfg.risi_classes]);
        Ok(Self {
            stem,
            blocks,
            fc_w,
            fc_b,
            risi_w,
            risi_b,
            final_channels: cin,
            final_dims: dims,
            n_params: b.next,
            tensors: b.tensors,
            bn_channels: b.bn_channels,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Offsets of the two fully connected heads, which are linear in the
    /// encoder features.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.fc_w..self.n_params
    }

    /// Forward multiply-accumulate count for one pair.
    pub fn macs_per_pair(&self) -> usize {
        let conv = |c: &ConvBn| c.conv.geom.weight_len() * c.conv.geom.out_voxels();
        let mut total = conv(&self.stem);
        for b in &self.blocks {
            total += conv(&b.a) + conv(&b.b) + b.shortcut.as_ref().map(conv).unwrap_or(0);
        }
        total
    }
}
