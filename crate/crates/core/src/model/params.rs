//! Named parameter registry and the per-pass binding of parameters to a tape.

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
}

impl ParamKind {
    /// Whether L2 weight decay applies (convolution and linear weights only).
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every trainable tensor of a model plus its batch-norm running statistics,
/// in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            specs: Vec::new(),
            values: Vec::new(),
            bn_names: Vec::new(),
            bn: Vec::new(),
        }
    }

    pub fn register(&mut self, name: String, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        if self.specs.iter().any(|s| s.name == name) {
            return Err(Error::config(format!("parameter {name} registered twice")));
        }
        self.values.push(Tensor::zeros(shape));
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            kind,
        });
        Ok(ParamId(self.specs.len() - 1))
    }

    pub fn register_bn(&mut self, name: String, channels: usize) -> BnId {
        self.bn_names.push(name);
        self.bn.push(BatchNormState::new(channels));
        BnId(self.bn.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    /// Scalar parameter count (running statistics excluded).
    pub fn count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Copies values of identically named and shaped parameters (and
    /// running statistics) from `other`.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, spec) in self.specs.iter().enumerate() {
            let j = other
                .find(&spec.name)
                .ok_or_else(|| Error::config(format!("parameter {} missing in source", spec.name)))?;
            if other.specs[j.0].shape != spec.shape {
                return Err(Error::config(format!("parameter {} has a different shape", spec.name)));
            }
            self.values[i] = other.values[j.0].clone();
        }
        for (i, name) in self.bn_names.iter().enumerate() {
            let j = other
                .bn_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::config(format!("batch norm {name} missing in source")))?;
            self.bn[i] = other.bn[j].clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

impl ConvLayer {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            ParamKind::ConvWeight,
        )?;
        Ok(Self {
            weight,
            stride,
            padding: kernel / 2,
        })
    }
}

impl BnLayer {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), &[channels], ParamKind::BnGamma)?,
            beta: store.register(format!("{name}.beta"), &[channels], ParamKind::BnBeta)?,
            state: store.register_bn(name.to_string(), channels),
        })
    }
}

/// One forward pass of a model: parameters are placed on the tape the first
/// time they are used, and batch-norm layers update running statistics in
/// training mode.
pub struct Session<'a, T> {
    pub tape: &'a mut Tape<T>,
    params: &'a [Tensor<T>],
    bn: &'a mut [BatchNormState<T>],
    bound: Vec<Option<Var>>,
    pub training: bool,
    track_grads: bool,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, training: bool, track_grads: bool) -> Self {
        let bound = vec![None; store.values.len()];
        Self {
            tape,
            params: &store.values,
            bn: &mut store.bn,
            bound,
            training,
            track_grads,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params[id.0].clone();
        let v = if self.track_grads {
            self.tape.variable(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn conv(&mut self, x: Var, layer: &ConvLayer) -> Result<Var> {
        let w = self.param(layer.weight);
        self.tape.conv2d(x, w, layer.stride, layer.padding)
    }

    pub fn batch_norm(&mut self, x: Var, layer: &BnLayer) -> Result<Var> {
        let g = self.param(layer.gamma);
        let b = self.param(layer.beta);
        self.tape
            .batch_norm(x, g, b, &mut self.bn[layer.state.0], self.training)
    }

    /// Tape variables of the parameters used in this pass, by parameter id.
    pub fn into_bindings(self) -> Vec<Option<Var>> {
        self.bound
    }
}

/// Reads parameter gradients off a tape after `backward`. Parameters that
/// did not take part in the pass get zero gradients.
pub fn collect_grads<T: Real>(store: &ParamStore<T>, tape: &Tape<T>, bindings: &[Option<Var>]) -> Vec<Tensor<T>> {
    store
        .ids()
        .map(|id| {
            bindings[id.0]
                .and_then(|v| tape.grad(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(&store.spec(id).shape))
        })
        .collect()
}
