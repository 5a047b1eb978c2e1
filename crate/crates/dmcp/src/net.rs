//! Declarative network specification and forward-pass construction.
//!
//! A [`NetworkSpec`] is an ordered list of layer descriptors. Prunable conv
//! layers are assigned gate identities; layers whose output channels must
//! match (residual-block outputs joined by element-wise sums, depthwise
//! convolutions tied to their producer) share one gate. Three forward
//! builders operate over shared weight storage: the full unpruned pass, the
//! fused pass (marginal scaling after every batch norm), and the sliced pass
//! (channel prefixes per gate, gradients scattered back into the shared
//! tensors).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{GroupsMode, LayerShape};
use crate::error::{Error, Result};
use crate::gate::{GateMode, GateParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Identity of a gate; layers sharing a gate share architecture parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateId(pub usize);

fn default_true() -> bool {
    true
}

/// A convolution followed by batch norm and an optional ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub depthwise: bool,
    #[serde(default = "default_true")]
    pub relu: bool,
    pub gate: GateId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv(ConvLayer),
    /// Identity-shortcut block: out = relu(body(x) + x). The last body conv
    /// must share the gate of the block input so the sum stays shape-consistent.
    Residual { body: Vec<ConvLayer> },
    GlobalPool,
    Classifier { num_classes: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub input_size: usize,
    /// Channel groups per gate; `None` marks a plain (unprunable) network,
    /// e.g. a standalone pruned model trained from scratch.
    pub gate_groups: Option<usize>,
    pub layers: Vec<Layer>,
}

/// Per-layer retained-group counts, keyed by gate identity; the discrete
/// output of sampling and the input to sliced forwards.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubStructure {
    counts: Vec<usize>,
}

impl SubStructure {
    pub fn new(counts: Vec<usize>) -> Self {
        SubStructure { counts }
    }

    pub fn full(net: &NetworkSpec) -> Self {
        let g = net.gate_groups.unwrap_or(1);
        SubStructure { counts: vec![g; net.num_gates()] }
    }

    pub fn minimal(net: &NetworkSpec) -> Self {
        SubStructure { counts: vec![1; net.num_gates()] }
    }

    /// One chain draw per gate, independently.
    pub fn sample<R: Rng>(net: &NetworkSpec, gates: &[GateParams], rng: &mut R) -> Self {
        let counts = gates.iter().map(|g| g.sample_group_count(rng)).collect();
        let _ = net;
        SubStructure { counts }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn groups_of(&self, gate: GateId) -> usize {
        self.counts[gate.0]
    }

    pub fn is_full(&self, net: &NetworkSpec) -> bool {
        net.gate_groups.map_or(true, |g| self.counts.iter().all(|&c| c == g))
    }

    /// Checks entry count and per-gate bounds against a network.
    pub fn validate_for(&self, net: &NetworkSpec) -> Result<()> {
        let n = net.num_gates();
        if self.counts.len() != n {
            return Err(Error::Validation(format!(
                "sub-structure has {} gate entries, network {} declares {n}",
                self.counts.len(),
                net.name
            )));
        }
        let g = net.gate_groups.ok_or_else(|| {
            Error::Validation(format!("network {} is not gated; sub-structures do not apply", net.name))
        })?;
        for (i, &c) in self.counts.iter().enumerate() {
            if c < 1 || c > g {
                return Err(Error::Validation(format!(
                    "gate {i} retained groups {c} outside [1, {g}]"
                )));
            }
        }
        Ok(())
    }
}

/// Resolved shape/channel info for one FLOPs-bearing layer (convs and the
/// classifier, which counts as a 1x1 conv on a 1x1 map).
#[derive(Clone, Debug)]
pub struct FlopLayer {
    pub name: String,
    pub shape: LayerShape,
    /// Gate controlling input channels; `None` means fixed (image input).
    pub in_gate: Option<GateId>,
    /// Gate controlling output channels; `None` means fixed (classifier).
    pub out_gate: Option<GateId>,
}

impl NetworkSpec {
    pub fn num_gates(&self) -> usize {
        self.conv_layers().iter().map(|c| c.gate.0 + 1).max().unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Classifier { num_classes } => Some(*num_classes),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// All conv layers in network order.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => v.push(c),
                Layer::Residual { body } => v.extend(body.iter()),
                _ => {}
            }
        }
        v
    }

    /// (num_groups, group_size) per gate. Requires a gated network.
    pub fn gate_dims(&self) -> Result<Vec<(usize, usize)>> {
        let g = self
            .gate_groups
            .ok_or_else(|| Error::Validation(format!("network {} is not gated", self.name)))?;
        let mut dims = vec![None; self.num_gates()];
        for c in self.conv_layers() {
            dims[c.gate.0] = Some((g, c.out_channels / g));
        }
        dims.into_iter()
            .enumerate()
            .map(|(i, d)| d.ok_or_else(|| Error::Validation(format!("gate {i} is declared but gates no layer"))))
            .collect()
    }

    /// Fresh gates for this network.
    pub fn make_gates<R: Rng>(&self, mode: GateMode, init_keep_prob: f64, rng: &mut R) -> Result<Vec<GateParams>> {
        Ok(self
            .gate_dims()?
            .into_iter()
            .map(|(g, gs)| GateParams::init(g, gs, init_keep_prob, mode, rng))
            .collect())
    }

    /// Gates saturated fully open (marginals exactly 1).
    pub fn saturated_gates(&self, mode: GateMode) -> Result<Vec<GateParams>> {
        Ok(self
            .gate_dims()?
            .into_iter()
            .map(|(g, gs)| GateParams::saturated(g, gs, mode))
            .collect())
    }

    /// Structural validation. Returns advisory warnings; hard violations
    /// are errors naming the offending layers.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::Validation("input channels and size must be positive".into()));
        }
        let n_layers = self.layers.len();
        if n_layers < 3 {
            return Err(Error::Validation("expected at least one conv, a global pool, and a classifier".into()));
        }
        match (&self.layers[n_layers - 2], &self.layers[n_layers - 1]) {
            (Layer::GlobalPool, Layer::Classifier { num_classes }) => {
                if *num_classes < 2 {
                    return Err(Error::Validation("classifier needs at least 2 classes".into()));
                }
            }
            _ => {
                return Err(Error::Validation(
                    "network must end with a global pool followed by a classifier".into(),
                ))
            }
        }
        for layer in &self.layers[..n_layers - 2] {
            if matches!(layer, Layer::GlobalPool | Layer::Classifier { .. }) {
                return Err(Error::Validation("pool/classifier layers only allowed at the end".into()));
            }
        }

        // Gate id density and per-gate channel agreement.
        let convs = self.conv_layers();
        let num_gates = self.num_gates();
        let mut gate_owner: Vec<Option<&ConvLayer>> = vec![None; num_gates];
        for c in &convs {
            match gate_owner[c.gate.0] {
                None => gate_owner[c.gate.0] = Some(c),
                Some(first) if first.out_channels != c.out_channels => {
                    return Err(Error::Validation(format!(
                        "layers `{}` and `{}` share gate {} but have {} vs {} output channels",
                        first.name, c.name, c.gate.0, first.out_channels, c.out_channels
                    )));
                }
                _ => {}
            }
        }
        for (i, owner) in gate_owner.iter().enumerate() {
            if owner.is_none() {
                return Err(Error::Validation(format!("gate {i} is never assigned to a layer")));
            }
        }

        // Walk the graph: producer gates, channel continuity, spatial sizes.
        let mut cur_channels = self.input_channels;
        let mut cur_gate: Option<GateId> = None;
        let mut spatial = self.input_size;
        let conv_step = |c: &ConvLayer, in_ch: usize, in_gate: Option<GateId>, spatial: &mut usize| -> Result<()> {
            if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                return Err(Error::Validation(format!("layer `{}`: kernel/stride/channels must be positive", c.name)));
            }
            if c.kernel > *spatial + 2 * c.padding {
                return Err(Error::Validation(format!(
                    "layer `{}`: kernel {} exceeds padded input extent {}",
                    c.name,
                    c.kernel,
                    *spatial + 2 * c.padding
                )));
            }
            if c.depthwise {
                if c.out_channels != in_ch {
                    return Err(Error::Validation(format!(
                        "depthwise layer `{}` must preserve channels ({} in, {} out)",
                        c.name, in_ch, c.out_channels
                    )));
                }
                match in_gate {
                    Some(g) if g == c.gate => {}
                    Some(g) => {
                        return Err(Error::Validation(format!(
                            "depthwise layer `{}` must share its producer's gate {} (has {})",
                            c.name, g.0, c.gate.0
                        )));
                    }
                    None => {
                        return Err(Error::Validation(format!(
                            "depthwise layer `{}` cannot consume the ungated image input",
                            c.name
                        )));
                    }
                }
            }
            *spatial = (*spatial + 2 * c.padding - c.kernel) / c.stride + 1;
            Ok(())
        };
        for layer in &self.layers[..n_layers - 2] {
            match layer {
                Layer::Conv(c) => {
                    conv_step(c, cur_channels, cur_gate, &mut spatial)?;
                    cur_channels = c.out_channels;
                    cur_gate = Some(c.gate);
                }
                Layer::Residual { body } => {
                    if body.is_empty() {
                        return Err(Error::Validation("residual block with empty body".into()));
                    }
                    let block_gate = cur_gate.ok_or_else(|| {
                        Error::Validation("residual block cannot take the raw image as its shortcut".into())
                    })?;
                    let block_spatial = spatial;
                    let mut body_spatial = spatial;
                    let mut body_ch = cur_channels;
                    let mut body_gate = Some(block_gate);
                    for c in body {
                        conv_step(c, body_ch, body_gate, &mut body_spatial)?;
                        body_ch = c.out_channels;
                        body_gate = Some(c.gate);
                    }
                    let last = body.last().unwrap();
                    if last.gate != block_gate {
                        return Err(Error::Validation(format!(
                            "residual body output `{}` (gate {}) must share the block input gate {} \
                             so the element-wise sum stays consistent",
                            last.name, last.gate.0, block_gate.0
                        )));
                    }
                    if body_ch != cur_channels {
                        return Err(Error::Validation(format!(
                            "residual body output `{}` has {} channels, shortcut has {}",
                            last.name, body_ch, cur_channels
                        )));
                    }
                    if body_spatial != block_spatial {
                        return Err(Error::Validation(format!(
                            "residual body changes spatial extent {} -> {}",
                            block_spatial, body_spatial
                        )));
                    }
                }
                _ => unreachable!(),
            }
        }
        if spatial == 0 {
            return Err(Error::Validation("spatial extent collapsed to zero before the pool".into()));
        }

        if let Some(g) = self.gate_groups {
            if g == 0 {
                return Err(Error::Validation("gate_groups must be positive".into()));
            }
            for c in &convs {
                if c.out_channels % g != 0 {
                    return Err(Error::Validation(format!(
                        "layer `{}`: {} channels not divisible into {} groups",
                        c.name, c.out_channels, g
                    )));
                }
                if g < 10 && c.out_channels >= 10 {
                    warnings.push(format!(
                        "layer `{}` uses only {g} groups for {} channels; 10 or more groups are expected",
                        c.name, c.out_channels
                    ));
                }
            }
        }
        Ok(warnings)
    }

    /// Flattened FLOPs-bearing layers with resolved spatial extents and
    /// channel sources; rejects gate wiring gaps.
    pub fn flop_layers(&self) -> Result<Vec<FlopLayer>> {
        fn push_conv(out: &mut Vec<FlopLayer>, c: &ConvLayer, spatial: &mut usize, in_ch: usize, in_gate: Option<GateId>) {
            let shape = LayerShape {
                spatial_in: *spatial,
                kernel: c.kernel,
                padding: c.padding,
                stride: c.stride,
                groups_mode: if c.depthwise { GroupsMode::Depthwise } else { GroupsMode::Normal },
                max_in_channels: in_ch,
                max_out_channels: c.out_channels,
            };
            *spatial = (*spatial + 2 * c.padding - c.kernel) / c.stride + 1;
            out.push(FlopLayer { name: c.name.clone(), shape, in_gate, out_gate: Some(c.gate) });
        }
        let mut out = Vec::new();
        let mut spatial = self.input_size;
        let mut cur_channels = self.input_channels;
        let mut cur_gate: Option<GateId> = None;
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    push_conv(&mut out, c, &mut spatial, cur_channels, cur_gate);
                    cur_channels = c.out_channels;
                    cur_gate = Some(c.gate);
                }
                Layer::Residual { body } => {
                    let mut body_ch = cur_channels;
                    let mut body_gate = cur_gate;
                    let mut body_spatial = spatial;
                    for c in body {
                        if body_gate.is_none() {
                            return Err(Error::Validation(format!(
                                "layer `{}` has no input-channel source",
                                c.name
                            )));
                        }
                        push_conv(&mut out, c, &mut body_spatial, body_ch, body_gate);
                        body_ch = c.out_channels;
                        body_gate = Some(c.gate);
                    }
                }
                Layer::GlobalPool => spatial = 1,
                Layer::Classifier { num_classes } => {
                    let shape = LayerShape {
                        spatial_in: 1,
                        kernel: 1,
                        padding: 0,
                        stride: 1,
                        groups_mode: GroupsMode::Normal,
                        max_in_channels: cur_channels,
                        max_out_channels: *num_classes,
                    };
                    out.push(FlopLayer {
                        name: "classifier".into(),
                        shape,
                        in_gate: cur_gate,
                        out_gate: None,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Standalone network with each gate's channels fixed to a sampled
    /// sub-structure; used to train pruned models from scratch.
    pub fn shrink_to(&self, sub: &SubStructure) -> Result<NetworkSpec> {
        sub.validate_for(self)?;
        let dims = self.gate_dims()?;
        let shrink = |c: &ConvLayer| ConvLayer {
            out_channels: sub.groups_of(c.gate) * dims[c.gate.0].1,
            ..c.clone()
        };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(shrink(c)),
                Layer::Residual { body } => Layer::Residual { body: body.iter().map(shrink).collect() },
                other => other.clone(),
            })
            .collect();
        Ok(NetworkSpec {
            name: format!("{}-pruned", self.name),
            input_channels: self.input_channels,
            input_size: self.input_size,
            gate_groups: None,
            layers,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(doc: &str) -> Result<NetworkSpec> {
        let net: NetworkSpec = toml::from_str(doc).map_err(|e| Error::Parse(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }
}

/// The three reference architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Plain6,
    Residual3,
    Dwsep,
}

impl NetKind {
    pub fn parse(s: &str) -> Option<NetKind> {
        match s {
            "plain6" => Some(NetKind::Plain6),
            "residual3" => Some(NetKind::Residual3),
            "dwsep" => Some(NetKind::Dwsep),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Plain6 => "plain6",
            NetKind::Residual3 => "residual3",
            NetKind::Dwsep => "dwsep",
        }
    }
}

fn conv(name: &str, out_channels: usize, kernel: usize, stride: usize, padding: usize, gate: usize) -> ConvLayer {
    ConvLayer {
        name: name.into(),
        out_channels,
        kernel,
        stride,
        padding,
        depthwise: false,
        relu: true,
        gate: GateId(gate),
    }
}

fn dwconv(name: &str, channels: usize, stride: usize, gate: usize) -> ConvLayer {
    ConvLayer {
        name: name.into(),
        out_channels: channels,
        kernel: 3,
        stride,
        padding: 1,
        depthwise: true,
        relu: true,
        gate: GateId(gate),
    }
}

/// Builds one of the shipped desk-scale reference networks.
pub fn reference_net(kind: NetKind, num_classes: usize, input_size: usize) -> NetworkSpec {
    let layers = match kind {
        NetKind::Plain6 => vec![
            Layer::Conv(conv("conv1", 20, 3, 1, 1, 0)),
            Layer::Conv(conv("conv2", 20, 3, 1, 1, 1)),
            Layer::Conv(conv("conv3", 40, 3, 2, 1, 2)),
            Layer::Conv(conv("conv4", 40, 3, 1, 1, 3)),
            Layer::Conv(conv("conv5", 40, 3, 2, 1, 4)),
            Layer::Conv(conv("conv6", 40, 3, 1, 1, 5)),
            Layer::GlobalPool,
            Layer::Classifier { num_classes },
        ],
        NetKind::Residual3 => vec![
            Layer::Conv(conv("conv0", 20, 3, 1, 1, 0)),
            Layer::Residual {
                body: vec![conv("res1.conv1", 20, 3, 1, 1, 1), ConvLayer { relu: false, ..conv("res1.conv2", 20, 3, 1, 1, 0) }],
            },
            Layer::Residual {
                body: vec![conv("res2.conv1", 20, 3, 1, 1, 2), ConvLayer { relu: false, ..conv("res2.conv2", 20, 3, 1, 1, 0) }],
            },
            Layer::Conv(conv("trans", 40, 3, 2, 1, 3)),
            Layer::Residual {
                body: vec![conv("res3.conv1", 40, 3, 1, 1, 4), ConvLayer { relu: false, ..conv("res3.conv2", 40, 3, 1, 1, 3) }],
            },
            Layer::GlobalPool,
            Layer::Classifier { num_classes },
        ],
        NetKind::Dwsep => vec![
            Layer::Conv(conv("conv0", 20, 3, 1, 1, 0)),
            Layer::Conv(dwconv("dw1", 20, 1, 0)),
            Layer::Conv(conv("pw1", 40, 1, 1, 0, 1)),
            Layer::Conv(dwconv("dw2", 40, 2, 1)),
            Layer::Conv(conv("pw2", 40, 1, 1, 0, 2)),
            Layer::GlobalPool,
            Layer::Classifier { num_classes },
        ],
    };
    NetworkSpec {
        name: kind.name().into(),
        input_channels: 3,
        input_size,
        gate_groups: Some(10),
        layers,
    }
}

// ---------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------

/// Running batch-norm statistics, shared across sub-structure widths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    fn new(channels: usize) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct ConvParamIds {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

/// All trainable weights of a network plus batch-norm running state.
/// Gradients accumulate in each tensor's grad slot until an optimizer step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    bn_stats: Vec<BnStats>,
}

impl NetParams {
    /// He-uniform init for conv/linear weights; gamma 1, beta 0.
    pub fn init<R: Rng>(net: &NetworkSpec, rng: &mut R) -> Self {
        fn add_conv<R: Rng>(p: &mut NetParams, c: &ConvLayer, in_ch: usize, rng: &mut R) {
            let cin_per_group = if c.depthwise { 1 } else { in_ch };
            let fan_in = (cin_per_group * c.kernel * c.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            p.names.push(format!("{}.weight", c.name));
            p.tensors.push(Tensor::uniform(vec![c.out_channels, cin_per_group, c.kernel, c.kernel], bound, rng));
            p.names.push(format!("{}.bn.gamma", c.name));
            p.tensors.push(Tensor::full(vec![c.out_channels], 1.0));
            p.names.push(format!("{}.bn.beta", c.name));
            p.tensors.push(Tensor::zeros(vec![c.out_channels]));
            p.bn_stats.push(BnStats::new(c.out_channels));
        }
        let mut p = NetParams { names: Vec::new(), tensors: Vec::new(), bn_stats: Vec::new() };
        let mut in_ch = net.input_channels;
        for layer in &net.layers {
            match layer {
                Layer::Conv(c) => {
                    add_conv(&mut p, c, in_ch, rng);
                    in_ch = c.out_channels;
                }
                Layer::Residual { body } => {
                    let mut body_in = in_ch;
                    for c in body {
                        add_conv(&mut p, c, body_in, rng);
                        body_in = c.out_channels;
                    }
                }
                Layer::GlobalPool => {}
                Layer::Classifier { num_classes } => {
                    let bound = (6.0 / in_ch as f64).sqrt();
                    p.names.push("classifier.weight".into());
                    p.tensors.push(Tensor::uniform(vec![*num_classes, in_ch], bound, rng));
                    p.names.push("classifier.bias".into());
                    p.tensors.push(Tensor::zeros(vec![*num_classes]));
                }
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }

    fn conv_ids(&self) -> Vec<ConvParamIds> {
        // Layout: triples of (weight, gamma, beta) per conv, then the
        // classifier pair at the end.
        let n_conv = self.bn_stats.len();
        (0..n_conv)
            .map(|i| ConvParamIds {
                weight: ParamId(3 * i),
                gamma: ParamId(3 * i + 1),
                beta: ParamId(3 * i + 2),
                bn: i,
            })
            .collect()
    }

    fn fc_ids(&self) -> (ParamId, ParamId) {
        let n = self.tensors.len();
        (ParamId(n - 2), ParamId(n - 1))
    }
}

// ---------------------------------------------------------------------
// Forward construction
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPhase {
    /// Batch statistics; optionally updates running averages.
    Train { update_running: bool },
    /// Running statistics.
    Eval,
}

/// Which of the three passes to build.
#[derive(Clone, Copy)]
pub enum ForwardMode<'a> {
    /// Unpruned network, no marginal scaling.
    Full,
    /// Full width with marginal scaling after every batch norm; records
    /// architecture parameters on the tape.
    Fused(&'a [GateParams]),
    /// Channel prefixes per gate over the shared weights.
    Sliced(&'a SubStructure),
}

enum SliceSpec {
    Full,
    Conv { oc: usize, ic: usize, full_ic: usize, kk: usize },
    Vector { n: usize },
    LinearCols { cols: usize, full_cols: usize, rows: usize },
}

struct Binding {
    param: ParamId,
    var: Var,
    slice: SliceSpec,
}

/// Tape under construction plus grad-scatter bookkeeping.
struct PassState {
    tape: Tape,
    bindings: Vec<Binding>,
    alpha_vars: Vec<Option<Var>>,
    marginal_vars: Vec<Option<Var>>,
}

/// A recorded forward pass: the tape, the logits, and the bookkeeping
/// needed to scatter gradients back into shared parameter storage.
pub struct BuiltForward {
    pub tape: Tape,
    pub logits: Var,
    bindings: Vec<Binding>,
    alpha_vars: Vec<Option<Var>>,
    marginal_vars: Vec<Option<Var>>,
}

impl BuiltForward {
    /// Adds each bound weight's tape gradient into the shared tensor's grad
    /// slot, mapping sliced entries back to their prefix positions.
    pub fn accumulate_param_grads(&self, params: &mut NetParams) {
        for b in &self.bindings {
            let src = self.tape.grad(b.var);
            let dst = params.tensor_mut(b.param).grad_mut();
            match &b.slice {
                SliceSpec::Full => {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                SliceSpec::Conv { oc, ic, full_ic, kk } => {
                    for o in 0..*oc {
                        let src_base = o * ic * kk;
                        let dst_base = o * full_ic * kk;
                        for i in 0..ic * kk {
                            dst[dst_base + i] += src[src_base + i];
                        }
                    }
                }
                SliceSpec::Vector { n } => {
                    for i in 0..*n {
                        dst[i] += src[i];
                    }
                }
                SliceSpec::LinearCols { cols, full_cols, rows } => {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dst[r * full_cols + c] += src[r * cols + c];
                        }
                    }
                }
            }
        }
    }

    /// Adds architecture-parameter tape gradients into the gates. Only
    /// meaningful for fused passes.
    pub fn accumulate_alpha_grads(&self, gates: &mut [GateParams]) {
        for (gate, var) in gates.iter_mut().zip(&self.alpha_vars) {
            if let Some(v) = var {
                let src = self.tape.grad(*v);
                for (g, s) in gate.grad_mut().iter_mut().zip(src) {
                    *g += s;
                }
            }
        }
    }

    /// Per-gate marginal-probability nodes of a fused pass, for budget
    /// terms that must share the same tape.
    pub fn marginal_var(&self, gate: GateId) -> Option<Var> {
        self.marginal_vars[gate.0]
    }
}

fn gather_conv_prefix(full: &Tensor, oc: usize, ic: usize) -> Vec<f64> {
    let s = full.shape();
    let (full_ic, k) = (s[1], s[2]);
    let kk = k * k;
    let mut out = Vec::with_capacity(oc * ic * kk);
    for o in 0..oc {
        let base = o * full_ic * kk;
        out.extend_from_slice(&full.data()[base..base + ic * kk]);
    }
    out
}

/// Builds one forward pass over shared weights. The caller owns the tape
/// afterwards and attaches whatever loss it needs.
pub fn build_forward(
    net: &NetworkSpec,
    params: &mut NetParams,
    input: &Tensor,
    mode: ForwardMode,
    bn: BnPhase,
) -> Result<BuiltForward> {
    if input.shape().len() != 4 || input.shape()[1] != net.input_channels || input.shape()[2] != net.input_size || input.shape()[3] != net.input_size {
        return Err(Error::Shape {
            op: "build_forward",
            detail: format!(
                "input {:?} does not match network ({} channels, {} spatial)",
                input.shape(),
                net.input_channels,
                net.input_size
            ),
        });
    }
    if let ForwardMode::Sliced(sub) = &mode {
        sub.validate_for(net)?;
    }
    if let ForwardMode::Fused(gates) = &mode {
        let dims = net.gate_dims()?;
        if gates.len() != dims.len() {
            return Err(Error::Validation(format!("{} gates supplied, network declares {}", gates.len(), dims.len())));
        }
        for (i, ((g, gs), gate)) in dims.iter().zip(*gates).enumerate() {
            if gate.num_groups() != *g || gate.group_size() != *gs {
                return Err(Error::Validation(format!(
                    "gate {i} dims ({}, {}) do not match network ({g}, {gs})",
                    gate.num_groups(),
                    gate.group_size()
                )));
            }
        }
    }

    let num_gates = net.num_gates();
    let gate_dims = net.gate_dims().ok();
    let mut fw = PassState {
        tape: Tape::new(),
        bindings: Vec::new(),
        alpha_vars: vec![None; num_gates],
        marginal_vars: vec![None; num_gates],
    };
    let x0 = fw.tape.leaf(input);

    let conv_ids = params.conv_ids();
    let (fc_w, fc_b) = params.fc_ids();
    let mut conv_idx = 0usize;

    // Channel count a gate materializes in this pass.
    let out_width = |gate: GateId, full: usize| -> usize {
        match &mode {
            ForwardMode::Sliced(sub) => {
                let gs = gate_dims.as_ref().expect("sliced mode requires gated net")[gate.0].1;
                sub.groups_of(gate) * gs
            }
            _ => full,
        }
    };

    struct Cursor {
        var: Var,
        channels: usize,
        gate: Option<GateId>,
    }

    let run_conv = |fw: &mut PassState,
                        params: &mut NetParams,
                        c: &ConvLayer,
                        cur: &Cursor,
                        idx: usize|
     -> Result<Cursor> {
        let ids = &conv_ids[idx];
        let c_out = out_width(c.gate, c.out_channels);
        let c_in = cur.channels;
        let full_w = params.tensor(ids.weight);
        let full_oc = full_w.shape()[0];
        let full_ic = full_w.shape()[1];
        let k = full_w.shape()[2];
        let (groups, w_var) = if c.depthwise {
            let sliced = c_out < full_oc;
            let var = if sliced {
                let data = full_w.data()[..c_out * k * k].to_vec();
                let v = fw.tape.leaf_from(data, vec![c_out, 1, k, k]);
                fw.bindings.push(Binding {
                    param: ids.weight,
                    var: v,
                    slice: SliceSpec::Conv { oc: c_out, ic: 1, full_ic: 1, kk: k * k },
                });
                v
            } else {
                let v = fw.tape.leaf(full_w);
                fw.bindings.push(Binding { param: ids.weight, var: v, slice: SliceSpec::Full });
                v
            };
            (c_out, var)
        } else {
            let sliced = c_out < full_oc || c_in < full_ic;
            let var = if sliced {
                let data = gather_conv_prefix(full_w, c_out, c_in);
                let v = fw.tape.leaf_from(data, vec![c_out, c_in, k, k]);
                fw.bindings.push(Binding {
                    param: ids.weight,
                    var: v,
                    slice: SliceSpec::Conv { oc: c_out, ic: c_in, full_ic, kk: k * k },
                });
                v
            } else {
                let v = fw.tape.leaf(full_w);
                fw.bindings.push(Binding { param: ids.weight, var: v, slice: SliceSpec::Full });
                v
            };
            (1, var)
        };
        let conv_out = fw.tape.conv2d(cur.var, w_var, c.stride, c.padding, groups)?;

        // Batch norm over the materialized prefix.
        let full_c = params.tensor(ids.gamma).len();
        let (g_var, b_var) = if c_out < full_c {
            let g = fw.tape.leaf_from(params.tensor(ids.gamma).data()[..c_out].to_vec(), vec![c_out]);
            let b = fw.tape.leaf_from(params.tensor(ids.beta).data()[..c_out].to_vec(), vec![c_out]);
            fw.bindings.push(Binding { param: ids.gamma, var: g, slice: SliceSpec::Vector { n: c_out } });
            fw.bindings.push(Binding { param: ids.beta, var: b, slice: SliceSpec::Vector { n: c_out } });
            (g, b)
        } else {
            let g = fw.tape.leaf(params.tensor(ids.gamma));
            let b = fw.tape.leaf(params.tensor(ids.beta));
            fw.bindings.push(Binding { param: ids.gamma, var: g, slice: SliceSpec::Full });
            fw.bindings.push(Binding { param: ids.beta, var: b, slice: SliceSpec::Full });
            (g, b)
        };
        let mut y = match bn {
            BnPhase::Train { update_running } => {
                let (y, batch) = fw.tape.batch_norm_train(conv_out, g_var, b_var, BN_EPS)?;
                if update_running {
                    let stats = &mut params.bn_stats[ids.bn];
                    for i in 0..c_out {
                        stats.mean[i] = (1.0 - BN_MOMENTUM) * stats.mean[i] + BN_MOMENTUM * batch.mean[i];
                        stats.var[i] = (1.0 - BN_MOMENTUM) * stats.var[i] + BN_MOMENTUM * batch.var_unbiased[i];
                    }
                }
                y
            }
            BnPhase::Eval => {
                let stats = &params.bn_stats[ids.bn];
                fw.tape.batch_norm_eval(conv_out, g_var, b_var, BN_EPS, &stats.mean[..c_out], &stats.var[..c_out])?
            }
        };

        // Marginal scaling directly after the batch norm, before ReLU.
        if let ForwardMode::Fused(gates) = &mode {
            let gate = &gates[c.gate.0];
            let m_var = match fw.marginal_vars[c.gate.0] {
                Some(v) => v,
                None => {
                    let a = fw.tape.leaf_from(gate.alpha().to_vec(), vec![gate.alpha().len()]);
                    fw.alpha_vars[c.gate.0] = Some(a);
                    let m = match gate.mode() {
                        GateMode::Markov => fw.tape.markov_marginals(a),
                        GateMode::Bernoulli => fw.tape.bernoulli_marginals(a),
                    };
                    fw.marginal_vars[c.gate.0] = Some(m);
                    m
                }
            };
            y = fw.tape.fuse_channels(y, m_var, gates[c.gate.0].group_size())?;
        }

        if c.relu {
            y = fw.tape.relu(y);
        }
        Ok(Cursor { var: y, channels: c_out, gate: Some(c.gate) })
    };

    let mut cur = Cursor { var: x0, channels: net.input_channels, gate: None };
    let mut pooled: Option<Var> = None;
    let mut logits: Option<Var> = None;
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                cur = run_conv(&mut fw, params, c, &cur, conv_idx)?;
                conv_idx += 1;
            }
            Layer::Residual { body } => {
                let shortcut = Cursor { var: cur.var, channels: cur.channels, gate: cur.gate };
                let mut inner = Cursor { var: cur.var, channels: cur.channels, gate: cur.gate };
                for c in body {
                    inner = run_conv(&mut fw, params, c, &inner, conv_idx)?;
                    conv_idx += 1;
                }
                let summed = fw.tape.add(inner.var, shortcut.var)?;
                let out = fw.tape.relu(summed);
                cur = Cursor { var: out, channels: inner.channels, gate: inner.gate };
            }
            Layer::GlobalPool => {
                pooled = Some(fw.tape.global_avg_pool(cur.var)?);
            }
            Layer::Classifier { num_classes } => {
                let features = pooled.ok_or_else(|| Error::Validation("classifier without preceding pool".into()))?;
                let full_fc = params.tensor(fc_w);
                let full_cols = full_fc.shape()[1];
                let w_var = if cur.channels < full_cols {
                    let mut data = Vec::with_capacity(num_classes * cur.channels);
                    for r in 0..*num_classes {
                        data.extend_from_slice(&full_fc.data()[r * full_cols..r * full_cols + cur.channels]);
                    }
                    let v = fw.tape.leaf_from(data, vec![*num_classes, cur.channels]);
                    fw.bindings.push(Binding {
                        param: fc_w,
                        var: v,
                        slice: SliceSpec::LinearCols { cols: cur.channels, full_cols, rows: *num_classes },
                    });
                    v
                } else {
                    let v = fw.tape.leaf(full_fc);
                    fw.bindings.push(Binding { param: fc_w, var: v, slice: SliceSpec::Full });
                    v
                };
                let b_var = fw.tape.leaf(params.tensor(fc_b));
                fw.bindings.push(Binding { param: fc_b, var: b_var, slice: SliceSpec::Full });
                logits = Some(fw.tape.linear(features, w_var, b_var)?);
            }
        }
    }
    let logits = logits.ok_or_else(|| Error::Validation("network has no classifier layer".into()))?;
    Ok(BuiltForward {
        tape: fw.tape,
        logits,
        bindings: fw.bindings,
        alpha_vars: fw.alpha_vars,
        marginal_vars: fw.marginal_vars,
    })
}

/// Eval-mode classification accuracy under an optional sub-structure.
pub fn accuracy(
    net: &NetworkSpec,
    params: &mut NetParams,
    sub: Option<&SubStructure>,
    images: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let mode = match sub {
        Some(s) => ForwardMode::Sliced(s),
        None => ForwardMode::Full,
    };
    let fw = build_forward(net, params, images, mode, BnPhase::Eval)?;
    let logits = fw.tape.value(fw.logits);
    let k = net.num_classes();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_input(n: usize, net: &NetworkSpec, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(vec![n, net.input_channels, net.input_size, net.input_size], 1.0, rng)
    }

    #[test]
    fn reference_nets_validate() {
        for kind in [NetKind::Plain6, NetKind::Residual3, NetKind::Dwsep] {
            let net = reference_net(kind, 4, 12);
            let warnings = net.validate().unwrap();
            assert!(warnings.is_empty(), "{kind:?}: {warnings:?}");
        }
    }

    #[test]
    fn validate_rejects_mismatched_residual_gate() {
        let mut net = reference_net(NetKind::Residual3, 4, 12);
        if let Layer::Residual { body } = &mut net.layers[1] {
            body[1].gate = GateId(1);
        }
        let err = net.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("res1.conv2"), "{msg}");
    }

    #[test]
    fn validate_rejects_shared_gate_channel_mismatch() {
        let mut net = reference_net(NetKind::Plain6, 4, 12);
        if let Layer::Conv(c) = &mut net.layers[1] {
            c.gate = GateId(0);
            c.out_channels = 40;
        }
        // conv2 now claims gate 0 with 40 channels while conv1 has 20; it
        // also changes downstream shapes, so the gate check must fire first.
        let err = net.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv1") && msg.contains("conv2"), "{msg}");
    }

    #[test]
    fn validate_warns_on_few_groups() {
        let mut net = reference_net(NetKind::Plain6, 4, 12);
        net.gate_groups = Some(5);
        let warnings = net.validate().unwrap();
        assert!(!warnings.is_empty());
        assert!(warnings[0].contains("groups"));
    }

    #[test]
    fn toml_round_trip() {
        let net = reference_net(NetKind::Residual3, 4, 12);
        let doc = net.to_toml().unwrap();
        let back = NetworkSpec::from_toml(&doc).unwrap();
        assert_eq!(back.name, net.name);
        assert_eq!(back.num_gates(), net.num_gates());
        assert_eq!(back.flop_layers().unwrap().len(), net.flop_layers().unwrap().len());
    }

    #[test]
    fn full_forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = reference_net(NetKind::Plain6, 4, 12);
        let mut params = NetParams::init(&net, &mut rng);
        let input = toy_input(3, &net, &mut rng);
        let a = build_forward(&net, &mut params, &input, ForwardMode::Full, BnPhase::Eval).unwrap();
        let b = build_forward(&net, &mut params, &input, ForwardMode::Full, BnPhase::Eval).unwrap();
        assert_eq!(a.tape.shape(a.logits), &[3, 4]);
        assert_eq!(a.tape.value(a.logits), b.tape.value(b.logits));
    }

    #[test]
    fn sliced_max_equals_full_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [NetKind::Plain6, NetKind::Residual3, NetKind::Dwsep] {
            let net = reference_net(kind, 4, 12);
            let mut params = NetParams::init(&net, &mut rng);
            let input = toy_input(2, &net, &mut rng);
            let full = build_forward(&net, &mut params, &input, ForwardMode::Full, BnPhase::Eval).unwrap();
            let sub = SubStructure::full(&net);
            let sliced = build_forward(&net, &mut params, &input, ForwardMode::Sliced(&sub), BnPhase::Eval).unwrap();
            assert_eq!(full.tape.value(full.logits), sliced.tape.value(sliced.logits));
        }
    }

    #[test]
    fn min_arch_produces_finite_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [NetKind::Plain6, NetKind::Residual3, NetKind::Dwsep] {
            let net = reference_net(kind, 4, 12);
            let mut params = NetParams::init(&net, &mut rng);
            let input = toy_input(2, &net, &mut rng);
            let sub = SubStructure::minimal(&net);
            let fw = build_forward(&net, &mut params, &input, ForwardMode::Sliced(&sub), BnPhase::Train { update_running: false }).unwrap();
            assert!(fw.tape.value(fw.logits).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fused_with_saturated_gates_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [NetKind::Plain6, NetKind::Residual3, NetKind::Dwsep] {
            let net = reference_net(kind, 4, 12);
            let mut params = NetParams::init(&net, &mut rng);
            let input = toy_input(2, &net, &mut rng);
            let gates = net.saturated_gates(GateMode::Markov).unwrap();
            let full = build_forward(&net, &mut params, &input, ForwardMode::Full, BnPhase::Eval).unwrap();
            let fused = build_forward(&net, &mut params, &input, ForwardMode::Fused(&gates), BnPhase::Eval).unwrap();
            for (a, b) in full.tape.value(full.logits).iter().zip(fused.tape.value(fused.logits)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sliced_gradients_stay_in_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = reference_net(NetKind::Plain6, 4, 12);
        let mut params = NetParams::init(&net, &mut rng);
        let input = toy_input(2, &net, &mut rng);
        let mut counts = vec![10; net.num_gates()];
        counts[0] = 4;
        counts[2] = 7;
        let sub = SubStructure::new(counts);
        let mut fw = build_forward(&net, &mut params, &input, ForwardMode::Sliced(&sub), BnPhase::Train { update_running: false }).unwrap();
        let loss = fw.tape.cross_entropy(fw.logits, &[0, 1]).unwrap();
        fw.tape.backward(loss).unwrap();
        fw.accumulate_param_grads(&mut params);

        // conv1 weight: [20, 3, 3, 3]; only the first 4*2=8 output channels
        // may carry gradient.
        let w = params.tensor(ParamId(0));
        let grad = w.grad().unwrap();
        let per_oc = 3 * 9;
        let keep = 8;
        assert!(grad[..keep * per_oc].iter().any(|&g| g != 0.0));
        assert!(grad[keep * per_oc..].iter().all(|&g| g == 0.0));

        // conv2 weight: [20, 20, 3, 3]; out prefix 10*2=20 (full) but input
        // prefix is 8, so channels 8.. of each filter stay zero.
        let w2 = params.tensor(ParamId(3));
        let g2 = w2.grad().unwrap();
        for oc in 0..20 {
            let base = oc * 20 * 9;
            assert!(g2[base + 8 * 9..base + 20 * 9].iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn shrink_to_builds_plain_net() {
        let net = reference_net(NetKind::Residual3, 4, 12);
        let mut counts = vec![10; net.num_gates()];
        counts[0] = 3;
        counts[3] = 5;
        let sub = SubStructure::new(counts);
        let small = net.shrink_to(&sub).unwrap();
        assert!(small.gate_groups.is_none());
        small.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = NetParams::init(&small, &mut rng);
        let input = toy_input(2, &small, &mut rng);
        let fw = build_forward(&small, &mut params, &input, ForwardMode::Full, BnPhase::Train { update_running: true }).unwrap();
        assert_eq!(fw.tape.shape(fw.logits), &[2, 4]);
    }
}
