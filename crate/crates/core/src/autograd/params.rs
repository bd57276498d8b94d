use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub momentum: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, value: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != value.len() {
            return Err(Error::ShapeMismatch {
                what: "parameter value".into(),
                expected: dims,
                got: vec![value.len()],
            });
        }
        Ok(Self {
            name: name.into(),
            dims,
            grad: vec![0.0; numel],
            momentum: vec![0.0; numel],
            value,
        })
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Named parameters addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: Parameter) -> Result<ParamId> {
        if self.find(&param.name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    /// Convolution kernel `[volume, c_out, c_in]`, uniform in ±1/√(c_in·volume).
    pub fn add_conv(
        &mut self,
        name: impl Into<String>,
        volume: usize,
        c_out: usize,
        c_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / ((c_in * volume).max(1) as f64).sqrt();
        let value = (0..volume * c_out * c_in)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(Parameter::new(name, vec![volume, c_out, c_in], value)?)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, dims: Vec<usize>, fill: f64) -> Result<ParamId> {
        let n = dims.iter().product();
        self.add(Parameter::new(name, dims, vec![fill; n])?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }
}
