//! Decoder side: residual blocks and the upsample-concat-refine stage.

use crate::error::Result;
use crate::tape::NodeId;
use crate::tensor::Scalar;

use super::{BnPlan, ConvPlan, DeclaredParam, Forward};

/// Two 3x3 conv+BN layers with an identity mapping; the shortcut becomes a
/// 1x1 conv + BN projection when the channel count changes.
pub struct ResidualBlockPlan {
    conv1: ConvPlan,
    bn1: BnPlan,
    conv2: ConvPlan,
    bn2: BnPlan,
    shortcut: Option<(ConvPlan, BnPlan)>,
}

impl ResidualBlockPlan {
    pub(crate) fn new(name: &str, cin: usize, cout: usize) -> Self {
        let shortcut = (cin != cout).then(|| {
            (
                ConvPlan::new(format!("{name}.shortcut.conv"), cin, cout, 1, 1, 0, 1, false),
                BnPlan::new(format!("{name}.shortcut.bn"), cout),
            )
        });
        ResidualBlockPlan {
            conv1: ConvPlan::new(format!("{name}.conv1"), cin, cout, 3, 1, 1, 1, false),
            bn1: BnPlan::new(format!("{name}.bn1"), cout),
            conv2: ConvPlan::new(format!("{name}.conv2"), cout, cout, 3, 1, 1, 1, false),
            bn2: BnPlan::new(format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    /// A standalone residual block (used directly by tests).
    pub fn standalone(name: &str, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout)
    }

    /// True when the shortcut is a pure identity (no parameters).
    pub fn identity_shortcut(&self) -> bool {
        self.shortcut.is_none()
    }

    pub fn declare(&self, out: &mut Vec<DeclaredParam>) {
        self.conv1.declare(out);
        self.bn1.declare(out);
        self.conv2.declare(out);
        self.bn2.declare(out);
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

/// One decoder stage: bilinear 2x upsampling, concatenation with the skip
/// feature map, then two residual blocks emitting `cout` channels.
pub struct DecoderPlan {
    res1: ResidualBlockPlan,
    res2: ResidualBlockPlan,
}

impl DecoderPlan {
    /// Builds a free-standing stage (used by block-scope tests and checks).
    pub fn standalone(name: &str, cin: usize, cout: usize) -> Self {
        Self::new(name.to_string(), cin, cout)
    }

    pub(crate) fn new(name: String, cin: usize, cout: usize) -> Self {
        DecoderPlan {
            res1: ResidualBlockPlan::new(&format!("{name}.res1"), cin, cout),
            res2: ResidualBlockPlan::new(&format!("{name}.res2"), cout, cout),
        }
    }

    pub fn declare(&self, out: &mut Vec<DeclaredParam>) {
        self.res1.declare(out);
        self.res2.declare(out);
    }

    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        x: NodeId,
        skip: NodeId,
    ) -> Result<NodeId> {
        let up = fwd.tape.upsample2x(x)?;
        // concat validates that the upsampled map matches the skip spatially
        let cat = fwd.tape.concat_channels(&[up, skip])?;
        let y = self.res1.forward(fwd, cat)?;
        self.res2.forward(fwd, y)
    }
}
