//! Expected-channel and expected-FLOPs accounting, and the training losses.
//!
//! FLOPs are multiply-accumulate counts. A layer's expected cost is
//! E(out) * E(in)/groups * #channel_op, with groups = E(in) for depthwise
//! convolutions (the ratio is exactly 1); the network cost is the sum over
//! conv layers plus the classifier counted as a 1x1 conv on a 1x1 map.
//! Everything is recordable on a tape so the budget loss differentiates
//! w.r.t. the architecture parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateParams;
use crate::net::{NetworkSpec, SubStructure};
use crate::tape::{budget_loss_value, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupsMode {
    Normal,
    Depthwise,
}

/// How the per-channel spatial term is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialTerm {
    /// Standard MAC counting: out_h * out_w * k * k. Matches the loop-nest
    /// oracle and the exact per-structure counts.
    #[default]
    Standard,
    /// Single spatial factor with padding counted once:
    /// ((S_I + S_P - S_K)/stride + 1) * k * k. Kept for fidelity runs.
    PaperLiteral,
}

/// Geometry of one FLOPs-bearing layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerShape {
    pub spatial_in: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
    pub groups_mode: GroupsMode,
    pub max_in_channels: usize,
    pub max_out_channels: usize,
}

impl LayerShape {
    pub fn out_spatial(&self) -> usize {
        (self.spatial_in + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Per-(in,out)-channel-pair MAC count.
    pub fn channel_op(&self, term: SpatialTerm) -> f64 {
        let kk = (self.kernel * self.kernel) as f64;
        match term {
            SpatialTerm::Standard => {
                let s = self.out_spatial() as f64;
                s * s * kk
            }
            SpatialTerm::PaperLiteral => {
                let s = (self.spatial_in + self.padding - self.kernel) as f64 / self.stride as f64 + 1.0;
                s * kk
            }
        }
    }
}

/// FLOPs target, tolerance margin, and loss balance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub flops_target: u64,
    pub gamma: f64,
    pub lambda_reg: f64,
    #[serde(default)]
    pub spatial_term: SpatialTerm,
}

impl BudgetConfig {
    /// Paper-default margin and balance: gamma 0.95, lambda 0.1.
    pub fn new(flops_target: u64) -> Self {
        BudgetConfig { flops_target, gamma: 0.95, lambda_reg: 0.1, spatial_term: SpatialTerm::Standard }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flops_target == 0 {
            return Err(Error::Config { field: "flops_target".into(), detail: "must be positive".into() });
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config { field: "gamma".into(), detail: format!("{} not in (0, 1)", self.gamma) });
        }
        if self.lambda_reg < 0.0 {
            return Err(Error::Config { field: "lambda_reg".into(), detail: "must be non-negative".into() });
        }
        Ok(())
    }
}

/// Expected channel count of a gate: group_size * sum of marginals,
/// recorded on the tape.
pub fn expected_channels(tape: &mut Tape, marginals: Var, group_size: usize) -> Var {
    let s = tape.sum(marginals);
    tape.scale_const(s, group_size as f64)
}

/// Expected FLOPs of one layer from expected in/out channel scalars.
pub fn expected_layer_flops(tape: &mut Tape, shape: &LayerShape, e_in: Var, e_out: Var, term: SpatialTerm) -> Result<Var> {
    let cop = shape.channel_op(term);
    match shape.groups_mode {
        // groups = E(in) makes E(in)/groups exactly 1.
        GroupsMode::Depthwise => Ok(tape.scale_const(e_out, cop)),
        GroupsMode::Normal => {
            let prod = tape.mul(e_in, e_out)?;
            Ok(tape.scale_const(prod, cop))
        }
    }
}

/// Expected FLOPs of the whole network on an existing tape, reusing the
/// per-gate marginal nodes of a fused forward so gradients flow to the
/// architecture parameters exactly once.
pub fn expected_network_flops_on_tape(
    tape: &mut Tape,
    net: &NetworkSpec,
    marginal_vars: &[Option<Var>],
    term: SpatialTerm,
) -> Result<Var> {
    let dims = net.gate_dims()?;
    let mut e_channels: Vec<Option<Var>> = vec![None; dims.len()];
    let mut gate_channels = |tape: &mut Tape, g: usize| -> Result<Var> {
        if e_channels[g].is_none() {
            let m = marginal_vars[g].ok_or_else(|| {
                Error::Validation(format!("gate {g} has no marginal node on this tape"))
            })?;
            e_channels[g] = Some(expected_channels(tape, m, dims[g].1));
        }
        Ok(e_channels[g].unwrap())
    };
    let mut total: Option<Var> = None;
    for layer in net.flop_layers()? {
        let e_out = match layer.out_gate {
            Some(g) => gate_channels(tape, g.0)?,
            None => tape.scalar_leaf(layer.shape.max_out_channels as f64),
        };
        let e_in = match layer.in_gate {
            Some(g) => gate_channels(tape, g.0)?,
            None => tape.scalar_leaf(layer.shape.max_in_channels as f64),
        };
        let f = expected_layer_flops(tape, &layer.shape, e_in, e_out, term)?;
        total = Some(match total {
            Some(t) => tape.add(t, f)?,
            None => f,
        });
    }
    total.ok_or_else(|| Error::Validation("network has no FLOPs-bearing layers".into()))
}

/// Plain-value expected FLOPs under the gates' current marginals.
pub fn expected_network_flops_value(net: &NetworkSpec, gates: &[GateParams], term: SpatialTerm) -> Result<f64> {
    let dims = net.gate_dims()?;
    if gates.len() != dims.len() {
        return Err(Error::Validation(format!("{} gates for {} gate slots", gates.len(), dims.len())));
    }
    let e: Vec<f64> = gates.iter().map(|g| g.group_size() as f64 * g.expected_groups()).collect();
    network_flops_walk(net, &|g| e[g], term)
}

/// Exact FLOPs of a discrete sub-structure (integer channel counts).
pub fn exact_network_flops(net: &NetworkSpec, sub: &SubStructure) -> Result<u64> {
    sub.validate_for(net)?;
    let dims = net.gate_dims()?;
    let f = network_flops_walk(
        net,
        &|g| (sub.groups_of(crate::net::GateId(g)) * dims[g].1) as f64,
        SpatialTerm::Standard,
    )?;
    Ok(f.round() as u64)
}

fn network_flops_walk(net: &NetworkSpec, gate_channels: &dyn Fn(usize) -> f64, term: SpatialTerm) -> Result<f64> {
    let mut total = 0.0;
    for layer in net.flop_layers()? {
        let e_out = match layer.out_gate {
            Some(g) => gate_channels(g.0),
            None => layer.shape.max_out_channels as f64,
        };
        let cop = layer.shape.channel_op(term);
        total += match layer.shape.groups_mode {
            GroupsMode::Depthwise => e_out * cop,
            GroupsMode::Normal => {
                let e_in = match layer.in_gate {
                    Some(g) => gate_channels(g.0),
                    None => layer.shape.max_in_channels as f64,
                };
                e_in * e_out * cop
            }
        };
    }
    Ok(total)
}

/// The stage-2 loss: cls_loss + lambda_reg * budget_loss.
pub fn arch_loss(tape: &mut Tape, cls_loss: Var, e_flops: Var, cfg: &BudgetConfig) -> Result<(Var, Var)> {
    let reg = tape.budget_loss(e_flops, cfg.flops_target as f64, cfg.gamma)?;
    let scaled = tape.scale_const(reg, cfg.lambda_reg);
    let total = tape.add(cls_loss, scaled)?;
    Ok((total, reg))
}

/// The stage-1 loss is the classification loss alone; the identity exists
/// to make the stage asymmetry explicit at call sites.
pub fn weight_loss(cls_loss: Var) -> Var {
    cls_loss
}

/// Plain-value budget loss (tape-free), for reports and tests.
pub fn budget_loss_of(e_flops: f64, cfg: &BudgetConfig) -> f64 {
    budget_loss_value(e_flops, cfg.flops_target as f64, cfg.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::GateMode;
    use crate::net::{reference_net, NetKind};

    fn shape(spatial_in: usize, kernel: usize, padding: usize, stride: usize, mode: GroupsMode) -> LayerShape {
        LayerShape {
            spatial_in,
            kernel,
            padding,
            stride,
            groups_mode: mode,
            max_in_channels: 8,
            max_out_channels: 16,
        }
    }

    #[test]
    fn expected_channels_examples() {
        let mut tape = Tape::new();
        let full = tape.leaf_from(vec![1.0; 10], vec![10]);
        let e = expected_channels(&mut tape, full, 4);
        assert_eq!(tape.scalar(e), 40.0);

        let m = tape.leaf_from(vec![1.0, 0.5, 0.25], vec![3]);
        let e2 = expected_channels(&mut tape, m, 4);
        assert!((tape.scalar(e2) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn layer_flops_normal_matches_hand_count() {
        // 4x4 output map, 3x3 kernel: 16 * 8 * (4*4*3*3) = 18432
        let mut tape = Tape::new();
        let s = shape(4, 3, 1, 1, GroupsMode::Normal);
        assert_eq!(s.out_spatial(), 4);
        let e_in = tape.scalar_leaf(8.0);
        let e_out = tape.scalar_leaf(16.0);
        let f = expected_layer_flops(&mut tape, &s, e_in, e_out, SpatialTerm::Standard).unwrap();
        assert_eq!(tape.scalar(f), 18432.0);
    }

    #[test]
    fn layer_flops_depthwise_ignores_e_in() {
        let mut tape = Tape::new();
        let s = shape(4, 3, 1, 1, GroupsMode::Depthwise);
        let e_out = tape.scalar_leaf(16.0);
        let a = tape.scalar_leaf(2.0);
        let b = tape.scalar_leaf(1000.0);
        let fa = expected_layer_flops(&mut tape, &s, a, e_out, SpatialTerm::Standard).unwrap();
        let fb = expected_layer_flops(&mut tape, &s, b, e_out, SpatialTerm::Standard).unwrap();
        assert_eq!(tape.scalar(fa), tape.scalar(fb));
    }

    #[test]
    fn layer_flops_linear_in_e_out() {
        let mut tape = Tape::new();
        let s = shape(6, 3, 1, 2, GroupsMode::Normal);
        let e_in = tape.scalar_leaf(8.0);
        let e1 = tape.scalar_leaf(16.0);
        let e2 = tape.scalar_leaf(32.0);
        let f1 = expected_layer_flops(&mut tape, &s, e_in, e1, SpatialTerm::Standard).unwrap();
        let f2 = expected_layer_flops(&mut tape, &s, e_in, e2, SpatialTerm::Standard).unwrap();
        assert_eq!(tape.scalar(f2), 2.0 * tape.scalar(f1));
    }

    #[test]
    fn paper_literal_spatial_term_differs() {
        let s = shape(8, 3, 1, 1, GroupsMode::Normal);
        // standard: 8x8 output -> 64 * 9; literal: (8+1-3)/1+1 = 7 -> 7 * 9
        assert_eq!(s.channel_op(SpatialTerm::Standard), 576.0);
        assert_eq!(s.channel_op(SpatialTerm::PaperLiteral), 63.0);
    }

    #[test]
    fn saturated_gates_give_exact_full_flops() {
        for kind in [NetKind::Plain6, NetKind::Residual3, NetKind::Dwsep] {
            let net = reference_net(kind, 4, 12);
            let gates = net.saturated_gates(GateMode::Markov).unwrap();
            let expected = expected_network_flops_value(&net, &gates, SpatialTerm::Standard).unwrap();
            let exact = exact_network_flops(&net, &SubStructure::full(&net)).unwrap();
            assert_eq!(expected, exact as f64, "{kind:?}");
        }
    }

    #[test]
    fn single_layer_sum_matches_layer_value() {
        let net = reference_net(NetKind::Plain6, 4, 12);
        let gates = net.saturated_gates(GateMode::Markov).unwrap();
        let layers = net.flop_layers().unwrap();
        let total = expected_network_flops_value(&net, &gates, SpatialTerm::Standard).unwrap();
        let by_hand: f64 = layers
            .iter()
            .map(|l| {
                let e_out = l.shape.max_out_channels as f64;
                let e_in = l.shape.max_in_channels as f64;
                e_in * e_out * l.shape.channel_op(SpatialTerm::Standard)
            })
            .sum();
        assert_eq!(total, by_hand);
    }

    #[test]
    fn budget_config_validation() {
        assert!(BudgetConfig::new(1000).validate().is_ok());
        assert!(BudgetConfig { gamma: 1.0, ..BudgetConfig::new(1000) }.validate().is_err());
        assert!(BudgetConfig { lambda_reg: -0.1, ..BudgetConfig::new(1000) }.validate().is_err());
        assert!(BudgetConfig::new(0).validate().is_err());
    }

    #[test]
    fn budget_loss_examples() {
        let cfg = BudgetConfig::new(100);
        assert_eq!(budget_loss_of(97.0, &cfg), 0.0);
        assert!((budget_loss_of(110.0, &cfg) - 10.0f64.ln()).abs() < 1e-12);
        assert!((budget_loss_of(90.0, &cfg) - 10.0f64.ln()).abs() < 1e-12);
    }
}
