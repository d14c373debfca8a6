use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub gradient: Matrix,
    pub frozen: bool,
}

/// Owns every trainable tensor of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let gradient = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            gradient,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn gradient(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].gradient
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces the value of `name` after checking its shape.
    pub fn load_value(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::load_value",
                format!("{:?} for `{name}`", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }
}
