//! ResNet-style encoder: 7x7 stem, max-pool, three bottleneck stages.
//!
//! Skips come off at full, half, quarter and eighth resolution; the stage-3
//! output at S/16 feeds the bottleneck branches. Channel counts scale from
//! the full-size `[64, 256, 512, 1024]` ladder.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::kernels::PoolSpec;
use crate::tape::NodeId;
use crate::tensor::Scalar;

use super::{BnPlan, ConvPlan, DeclaredParam, Forward};

/// Classic 1x1 -> 3x3 -> 1x1 bottleneck block with a projection shortcut
/// when the shape changes.
pub struct BottleneckPlan {
    conv1: ConvPlan,
    bn1: BnPlan,
    conv2: ConvPlan,
    bn2: BnPlan,
    conv3: ConvPlan,
    bn3: BnPlan,
    shortcut: Option<(ConvPlan, BnPlan)>,
}

impl BottleneckPlan {
    /// Builds a free-standing block (used by block-scope tests and checks).
    pub fn standalone(name: &str, cin: usize, mid: usize, cout: usize, stride: usize) -> Self {
        Self::new(name, cin, mid, cout, stride)
    }

    pub(crate) fn new(name: &str, cin: usize, mid: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                ConvPlan::new(format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0, 1, false),
                BnPlan::new(format!("{name}.shortcut.bn"), cout),
            )
        });
        BottleneckPlan {
            conv1: ConvPlan::new(format!("{name}.conv1"), cin, mid, 1, 1, 0, 1, false),
            bn1: BnPlan::new(format!("{name}.bn1"), mid),
            conv2: ConvPlan::new(format!("{name}.conv2"), mid, mid, 3, stride, 1, 1, false),
            bn2: BnPlan::new(format!("{name}.bn2"), mid),
            conv3: ConvPlan::new(format!("{name}.conv3"), mid, cout, 1, 1, 0, 1, false),
            bn3: BnPlan::new(format!("{name}.bn3"), cout),
            shortcut,
        }
    }

    pub fn declare(&self, out: &mut Vec<DeclaredParam>) {
        self.conv1.declare(out);
        self.bn1.declare(out);
        self.conv2.declare(out);
        self.bn2.declare(out);
        self.conv3.declare(out);
        self.bn3.declare(out);
        if let Some((c, b)) = &self.shortcut {
            c.declare(out);
            b.declare(out);
        }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv1.forward(fwd, x)?;
        let y = self.bn1.forward(fwd, y)?;
        let y = fwd.tape.relu(y)?;
        let y = self.conv2.forward(fwd, y)?;
        let y = self.bn2.forward(fwd, y)?;
        let y = fwd.tape.relu(y)?;
        let y = self.conv3.forward(fwd, y)?;
        let y = self.bn3.forward(fwd, y)?;
        let sc = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(fwd, x)?;
                bn.forward(fwd, s)?
            }
            None => x,
        };
        let sum = fwd.tape.add(y, sc)?;
        fwd.tape.relu(sum)
    }
}

/// Skip taps and the bottleneck feature map produced by the encoder.
pub struct EncoderOut {
    /// Stem output at S/2.
    pub s1: NodeId,
    /// Stage-1 output at S/4.
    pub s2: NodeId,
    /// Stage-2 output at S/8.
    pub s3: NodeId,
    /// Stage-3 output at S/16.
    pub bottleneck: NodeId,
}

pub struct EncoderPlan {
    stem_conv: ConvPlan,
    stem_bn: BnPlan,
    stages: Vec<Vec<BottleneckPlan>>,
}

impl EncoderPlan {
    pub(crate) fn new(cfg: &ModelConfig) -> Self {
        let stem = cfg.channels(64);
        let mids = [cfg.channels(64), cfg.channels(128), cfg.channels(256)];
        let outs = [cfg.channels(256), cfg.channels(512), cfg.channels(1024)];
        let mut stages = Vec::with_capacity(3);
        let mut cin = stem;
        for s in 0..3 {
            let depth = cfg.stage_depths[s];
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BottleneckPlan::new(
                    &format!("encoder.stage{}.block{}", s + 1, b + 1),
                    cin,
                    mids[s],
                    outs[s],
                    stride,
                ));
                cin = outs[s];
            }
            stages.push(blocks);
        }
        EncoderPlan {
            stem_conv: ConvPlan::new("encoder.stem.conv", 3, stem, 7, 2, 3, 1, false),
            stem_bn: BnPlan::new("encoder.stem.bn", stem),
            stages,
        }
    }

    pub(crate) fn declare(&self, out: &mut Vec<DeclaredParam>) {
        self.stem_conv.declare(out);
        self.stem_bn.declare(out);
        for stage in &self.stages {
            for block in stage {
                block.declare(out);
            }
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        image: NodeId,
    ) -> Result<EncoderOut> {
        let y = self.stem_conv.forward(fwd, image)?;
        let y = self.stem_bn.forward(fwd, y)?;
        let s1 = fwd.tape.relu(y)?;
        let mut x = fwd.tape.maxpool2d(s1, &PoolSpec::new(3, 2, 1))?;
        let mut taps = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(fwd, x)?;
            }
            taps.push(x);
        }
        Ok(EncoderOut {
            s1,
            s2: taps[0],
            s3: taps[1],
            bottleneck: taps[2],
        })
    }
}
