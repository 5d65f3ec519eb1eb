//! Assembly of full networks from a [`NetworkConfig`].
//!
//! Layout for a 32x32 input:
//!
//! ```text
//! 3x3 conv -> block 0 -> avgpool 2x2 -> dropout
//!          -> block 1 -> avgpool 2x2 -> dropout
//!          -> block 2 -> BN -> ReLU -> global avgpool -> linear
//! ```
//!
//! The first unit of a block projects to the block width when the incoming
//! channel count differs. In the `R` variant the input of blocks 1 and 2 is
//! concatenated in front of their output, so the classifier sees the pooled
//! features of all three blocks in block order.

pub mod config;
pub mod params;
mod table;

use std::ops::Range;

use rand::Rng;

pub use config::{parse_kv_lines, NetworkConfig, Variant};
pub use params::{collect_grads, ParamId, ParamKind, ParamSpec, ParamStore, Session};
pub use table::{deployment_table, write_deployment_csv, DeploymentRow};

use crate::copa::{CoPaUnit, CoPaUnitSpec, PathwaySpec, ResidualUnit};
use crate::error::{Error, Result};
use crate::tensor::{Real, RoutingMask, Tape, Tensor, Var};
use params::{BnLayer, ConvLayer};

#[derive(Clone, Debug)]
pub enum Unit {
    Competitive(CoPaUnit),
    Residual(ResidualUnit),
}

impl Unit {
    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, capture: bool) -> Result<(Var, Option<RoutingMask>)> {
        match self {
            Unit::Competitive(u) => u.forward(s, x, capture),
            Unit::Residual(u) => Ok((u.forward(s, x)?, None)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub units: Vec<Unit>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Block {
    /// Competitive units of the block (empty for a residual baseline).
    pub fn copa_units(&self) -> Vec<CoPaUnit> {
        self.units
            .iter()
            .filter_map(|u| match u {
                Unit::Competitive(c) => Some(c.clone()),
                Unit::Residual(_) => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub stem: ConvLayer,
    pub blocks: Vec<Block>,
    pub head_bn: BnLayer,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    /// Channel ranges of the classifier input contributed by each block.
    pub classifier_layout: Vec<Range<usize>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub training: bool,
    pub track_grads: bool,
    /// Block whose routing masks are captured.
    pub capture_block: Option<usize>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            training: true,
            track_grads: true,
            capture_block: None,
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

pub struct ForwardPass {
    pub logits: Var,
    pub bindings: Vec<Option<Var>>,
    /// Masks of the captured block, one per unit with `unit` set to the
    /// unit's position in the block.
    pub routing: Vec<RoutingMask>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub network: Network,
    pub params: ParamStore<T>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum UnitStyle {
    Competitive,
    Residual,
}

impl<T: Real> Model<T> {
    /// Builds a competitive pathway network with zero-valued parameters.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        Self::assemble(config, UnitStyle::Competitive)
    }

    /// Builds the same layout from plain pre-activation residual units
    /// (one pathway each, no max merge), ignoring `k`.
    pub fn build_residual_baseline(config: &NetworkConfig) -> Result<Self> {
        Self::assemble(config, UnitStyle::Residual)
    }

    fn assemble(config: &NetworkConfig, style: UnitStyle) -> Result<Self> {
        config.validate()?;
        let units = config.units_per_stage()?;
        let widths = config.stage_widths();
        let mids = config.stage_mids();
        let mut store = ParamStore::new();

        let stem = ConvLayer::register(&mut store, "stem.conv", config.input_channels, widths[0], 3, 1)?;
        let mut blocks = Vec::with_capacity(3);
        let mut channels = widths[0];
        let mut layout = Vec::new();
        for (s, (&width, &mid)) in widths.iter().zip(&mids).enumerate() {
            let block_in = channels;
            let mut unit_list = Vec::with_capacity(units);
            for u in 0..units {
                let pathway = PathwaySpec {
                    kind: config.pathway,
                    in_channels: if u == 0 { block_in } else { width },
                    mid_channels: mid,
                    out_channels: width,
                    stride: 1,
                };
                let prefix = format!("block{s}.unit{u}");
                let unit = match style {
                    UnitStyle::Competitive => Unit::Competitive(CoPaUnit::register(
                        CoPaUnitSpec {
                            pathways: config.k,
                            pathway,
                        },
                        &mut store,
                        &prefix,
                    )?),
                    UnitStyle::Residual => Unit::Residual(ResidualUnit::register(pathway, &mut store, &prefix)?),
                };
                unit_list.push(unit);
            }
            channels = match config.variant {
                Variant::R if s > 0 => block_in + width,
                _ => width,
            };
            if config.variant == Variant::R {
                let start = layout.last().map_or(0, |r: &Range<usize>| r.end);
                layout.push(start..start + width);
            }
            blocks.push(Block {
                units: unit_list,
                in_channels: block_in,
                out_channels: channels,
            });
        }
        if config.variant == Variant::Plain {
            layout.push(0..channels);
        }
        let head_bn = BnLayer::register(&mut store, "head.bn", channels)?;
        let fc_weight = store.register(
            "head.fc.weight".into(),
            &[channels, config.num_classes],
            ParamKind::LinearWeight,
        )?;
        let fc_bias = store.register("head.fc.bias".into(), &[config.num_classes], ParamKind::LinearBias)?;
        Ok(Self {
            config: config.clone(),
            network: Network {
                stem,
                blocks,
                head_bn,
                fc_weight,
                fc_bias,
                classifier_layout: layout,
            },
            params: store,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Parameter totals grouped by top-level prefix (`stem`, `block0`, ...,
    /// `head`), in registration order.
    pub fn stage_parameter_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for spec in self.params.specs() {
            let stage = spec.name.split('.').next().unwrap_or("").to_string();
            match out.last_mut() {
                Some((name, n)) if *name == stage => *n += spec.numel(),
                _ => out.push((stage, spec.numel())),
            }
        }
        out
    }

    pub fn classifier_in_channels(&self) -> usize {
        self.params.spec(self.network.fc_weight).shape[0]
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        input: Tensor<T>,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let shape = input.shape().to_vec();
        let expect = [self.config.input_channels, self.config.input_size, self.config.input_size];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::config(format!(
                "model expects N x {} x {} x {} input, got {:?}",
                expect[0], expect[1], expect[2], shape
            )));
        }
        if let Some(b) = opts.capture_block {
            if b >= self.network.blocks.len() {
                return Err(Error::usage(format!("no block {b} to capture")));
            }
        }
        let dropout = self.config.dropout_rate;
        let variant = self.config.variant;
        let net = &self.network;
        let mut s = Session::new(tape, &mut self.params, opts.training, opts.track_grads);
        let mut routing = Vec::new();

        s.tape.set_scope("stem");
        let x = s.tape.constant(input);
        let mut x = s.conv(x, &net.stem)?;
        let last = net.blocks.len() - 1;
        for (b, block) in net.blocks.iter().enumerate() {
            let block_input = x;
            let capture = opts.capture_block == Some(b);
            for (u, unit) in block.units.iter().enumerate() {
                s.tape.set_scope(&format!("block{b}.unit{u}"));
                let (y, mask) = unit.forward(&mut s, x, capture)?;
                if let Some(mut mask) = mask {
                    mask.unit = u;
                    routing.push(mask);
                }
                x = y;
            }
            s.tape.set_scope(&format!("block{b}.transition"));
            if variant == Variant::R && b > 0 {
                x = s.tape.concat_channels(&[block_input, x])?;
            }
            if b < last {
                x = s.tape.avg_pool2d(x, 2, 2)?;
                x = s.tape.dropout(x, dropout, opts.training, rng)?;
            }
        }
        s.tape.set_scope("head");
        x = s.batch_norm(x, &net.head_bn)?;
        x = s.tape.relu(x);
        x = s.tape.global_avg_pool(x)?;
        let w = s.param(net.fc_weight);
        let bias = s.param(net.fc_bias);
        let logits = s.tape.linear(x, w, bias)?;
        Ok(ForwardPass {
            logits,
            bindings: s.into_bindings(),
            routing,
        })
    }

    /// Eval-mode logits without gradient tracking.
    pub fn predict(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, ForwardOptions::eval(), &mut NoRng)?;
        Ok(tape.value(pass.logits).clone())
    }
}

/// Stand-in RNG for eval passes, where dropout never samples.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode forward drew a random number")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode forward drew a random number")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("eval-mode forward drew a random number")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage3_has_180_maps_at_unit_width() {
        let m: Model<f32> = Model::build(&NetworkConfig::with_units(2, 2, 1)).unwrap();
        assert_eq!(m.network.blocks[2].out_channels, 180);
        assert_eq!(m.classifier_in_channels(), 180);
    }

    #[test]
    fn r_variant_classifier_sees_all_blocks() {
        let cfg = NetworkConfig {
            variant: Variant::R,
            ..NetworkConfig::with_units(1, 2, 1)
        };
        let m: Model<f32> = Model::build(&cfg).unwrap();
        assert_eq!(m.classifier_in_channels(), 45 + 90 + 180);
        assert_eq!(m.network.classifier_layout, vec![0..45, 45..135, 135..315]);
        assert_eq!(m.network.blocks[2].in_channels, 135);
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let cfg = NetworkConfig::with_units(2, 3, 1);
        let a: Model<f32> = Model::build(&cfg).unwrap();
        let b: Model<f32> = Model::build(&cfg).unwrap();
        assert_eq!(a.params.specs(), b.params.specs());
        let mut names: Vec<_> = a.params.specs().iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), a.params.len());
    }

    #[test]
    fn forward_produces_class_logits() {
        let cfg = NetworkConfig {
            input_size: 8,
            ..NetworkConfig::with_units(1, 2, 1)
        };
        let mut m: Model<f64> = Model::build(&cfg).unwrap();
        let logits = m.predict(Tensor::zeros(&[2, 3, 8, 8])).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
    }
}
