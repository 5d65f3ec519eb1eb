//! Competitive pathway units.
//!
//! A unit runs `K` pre-activation residual pathways on one input and merges
//! `shortcut(x) + h_k(x)` by an elementwise maximum. The shortcut is the
//! identity, or a single 1x1 projection shared by all pathways when the
//! channel count or resolution changes.

use crate::error::{Error, Result};
use crate::model::params::{BnLayer, ConvLayer, ParamStore, Session};
use crate::tensor::{Real, RoutingMask, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathwayKind {
    /// 1x1 reduce, 3x3, 1x1 expand.
    Bottleneck,
    /// Two 3x3 convolutions.
    Basic,
}

impl PathwayKind {
    pub fn convs(self) -> usize {
        match self {
            PathwayKind::Bottleneck => 3,
            PathwayKind::Basic => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathwaySpec {
    pub kind: PathwayKind,
    pub in_channels: usize,
    /// Width of the inner layers (ignored for basic pathways).
    pub mid_channels: usize,
    pub out_channels: usize,
    /// Stride of the 3x3 convolution.
    pub stride: usize,
}

impl PathwaySpec {
    /// `(in, out, kernel, stride)` for each convolution, in order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize, usize, usize)> {
        match self.kind {
            PathwayKind::Bottleneck => vec![
                (self.in_channels, self.mid_channels, 1, 1),
                (self.mid_channels, self.mid_channels, 3, self.stride),
                (self.mid_channels, self.out_channels, 1, 1),
            ],
            PathwayKind::Basic => vec![
                (self.in_channels, self.out_channels, 3, self.stride),
                (self.out_channels, self.out_channels, 3, 1),
            ],
        }
    }

    /// Trainable scalars in one pathway (convolutions plus BN scale/shift).
    pub fn parameter_count(&self) -> usize {
        self.conv_shapes()
            .iter()
            .map(|&(i, o, k, _)| i * o * k * k + 2 * i)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoPaUnitSpec {
    /// Number of competing pathways (the opponent factor).
    pub pathways: usize,
    pub pathway: PathwaySpec,
}

impl CoPaUnitSpec {
    pub fn needs_projection(&self) -> bool {
        self.pathway.in_channels != self.pathway.out_channels || self.pathway.stride != 1
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pathway;
        if self.pathways == 0 || self.pathways > u8::MAX as usize {
            return Err(Error::config(format!(
                "a unit needs between 1 and 255 pathways, got {}",
                self.pathways
            )));
        }
        if p.in_channels == 0 || p.out_channels == 0 || p.mid_channels == 0 {
            return Err(Error::config(format!("zero channel count in {p:?}")));
        }
        if p.stride != 1 && p.stride != 2 {
            return Err(Error::config(format!("stride {} is not 1 or 2", p.stride)));
        }
        Ok(())
    }

    pub fn projection_parameter_count(&self) -> usize {
        if self.needs_projection() {
            self.pathway.in_channels * self.pathway.out_channels
        } else {
            0
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.pathways * self.pathway.parameter_count() + self.projection_parameter_count()
    }
}

/// BN -> ReLU -> conv.
#[derive(Clone, Copy, Debug)]
pub struct PreActConv {
    pub bn: BnLayer,
    pub conv: ConvLayer,
}

/// One residual transformation `h(x)`; its output is added to the shortcut
/// with no normalization after the last convolution.
#[derive(Clone, Debug)]
pub struct Pathway {
    pub layers: Vec<PreActConv>,
}

impl Pathway {
    pub fn register<T: Real>(spec: &PathwaySpec, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        let layers = spec
            .conv_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, k, stride))| {
                Ok(PreActConv {
                    bn: BnLayer::register(store, &format!("{prefix}.bn{i}"), cin)?,
                    conv: ConvLayer::register(store, &format!("{prefix}.conv{i}"), cin, cout, k, stride)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = s.batch_norm(h, &layer.bn)?;
            h = s.tape.relu(h);
            h = s.conv(h, &layer.conv)?;
        }
        Ok(h)
    }
}

fn register_projection<T: Real>(
    spec: &CoPaUnitSpec,
    store: &mut ParamStore<T>,
    prefix: &str,
) -> Result<Option<ConvLayer>> {
    if !spec.needs_projection() {
        return Ok(None);
    }
    let p = &spec.pathway;
    ConvLayer::register(store, &format!("{prefix}.proj"), p.in_channels, p.out_channels, 1, p.stride).map(Some)
}

fn check_input<T: Real>(s: &Session<'_, T>, x: Var, spec: &CoPaUnitSpec) -> Result<()> {
    let shape = s.tape.value(x).shape();
    if shape.len() != 4 || shape[1] != spec.pathway.in_channels {
        return Err(Error::config(format!(
            "unit expects {} input channels, got input {:?}",
            spec.pathway.in_channels, shape
        )));
    }
    Ok(())
}

fn shortcut<T: Real>(s: &mut Session<'_, T>, projection: &Option<ConvLayer>, x: Var) -> Result<Var> {
    match projection {
        Some(p) => s.conv(x, p),
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct CoPaUnit {
    pub spec: CoPaUnitSpec,
    pub pathways: Vec<Pathway>,
    pub projection: Option<ConvLayer>,
}

impl CoPaUnit {
    pub fn register<T: Real>(spec: CoPaUnitSpec, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let pathways = (0..spec.pathways)
            .map(|k| Pathway::register(&spec.pathway, store, &format!("{prefix}.path{k}")))
            .collect::<Result<_>>()?;
        let projection = register_projection(&spec, store, prefix)?;
        Ok(Self {
            spec,
            pathways,
            projection,
        })
    }

    /// `max_k (shortcut(x) + h_k(x))`. A single-pathway unit skips the merge
    /// and returns no mask.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        capture: bool,
    ) -> Result<(Var, Option<RoutingMask>)> {
        check_input(s, x, &self.spec)?;
        let base = shortcut(s, &self.projection, x)?;
        let mut candidates = Vec::with_capacity(self.pathways.len());
        for pathway in &self.pathways {
            let h = pathway.forward(s, x)?;
            candidates.push(s.tape.add(base, h)?);
        }
        if candidates.len() == 1 {
            return Ok((candidates[0], None));
        }
        s.tape.max_k(&candidates, capture)
    }

    /// Runs pathway `k` alone: `h_k(x)`.
    pub fn residual<T: Real>(&self, s: &mut Session<'_, T>, k: usize, x: Var) -> Result<Var> {
        check_input(s, x, &self.spec)?;
        self.pathways
            .get(k)
            .ok_or_else(|| Error::usage(format!("pathway {k} out of range")))?
            .forward(s, x)
    }
}

/// Plain pre-activation residual unit `shortcut(x) + h(x)`, the
/// single-pathway baseline.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub spec: PathwaySpec,
    pub pathway: Pathway,
    pub projection: Option<ConvLayer>,
}

impl ResidualUnit {
    /// Parameter names follow the CoPa layout with one pathway, so values
    /// can be exchanged with a `K = 1` competitive unit.
    pub fn register<T: Real>(spec: PathwaySpec, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        let unit_spec = CoPaUnitSpec { pathways: 1, pathway: spec };
        unit_spec.validate()?;
        let pathway = Pathway::register(&spec, store, &format!("{prefix}.path0"))?;
        let projection = register_projection(&unit_spec, store, prefix)?;
        Ok(Self {
            spec,
            pathway,
            projection,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        check_input(s, x, &CoPaUnitSpec { pathways: 1, pathway: self.spec })?;
        let base = shortcut(s, &self.projection, x)?;
        let h = self.pathway.forward(s, x)?;
        s.tape.add(base, h)
    }
}

/// Rebuilds the output of a stack of identity-shortcut units from its input
/// and recorded routing masks, adding only each element's winning residual:
/// `y_{l+1}[i] = y_l[i] + h_l^{w_l[i]}(y_l)[i]`.
///
/// Runs in eval mode so that recomputing the pathways leaves batch-norm
/// statistics untouched.
pub fn compose_winners<T: Real>(
    s: &mut Session<'_, T>,
    x0: &Tensor<T>,
    units: &[CoPaUnit],
    masks: &[RoutingMask],
) -> Result<Tensor<T>> {
    if s.training {
        return Err(Error::usage("compose_winners requires an eval-mode session"));
    }
    if masks.len() != units.len() {
        return Err(Error::usage(format!(
            "{} masks supplied for {} units",
            masks.len(),
            units.len()
        )));
    }
    let mut y = x0.clone();
    for (unit, mask) in units.iter().zip(masks) {
        if unit.projection.is_some() {
            return Err(Error::usage("compose_winners needs identity shortcuts"));
        }
        if mask.shape != y.shape() || mask.pathways != unit.pathways.len() {
            return Err(Error::usage(format!(
                "mask {:?} with {} pathways does not fit activation {:?} with {} pathways",
                mask.shape,
                mask.pathways,
                y.shape(),
                unit.pathways.len()
            )));
        }
        let input = s.tape.constant(y.clone());
        let residuals = (0..unit.pathways.len())
            .map(|k| {
                let h = unit.residual(s, k, input)?;
                Ok(s.tape.value(h).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let w = mask.winners[i] as usize;
            if w >= residuals.len() {
                return Err(Error::usage(format!("mask entry {w} out of range")));
            }
            *v = *v + residuals[w][i];
        }
    }
    Ok(y)
}
