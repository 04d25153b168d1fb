use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Named parameters, iterated in sorted name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("malformed parameter name {name:?}")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Replaces an existing parameter with a tensor of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Places every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), true))).collect() }
    }

    /// All parameters concatenated in name order as one rank-1 tensor.
    pub fn flatten(&self) -> Tensor<T> {
        let data: Vec<T> = self.params.values().flat_map(|v| v.data().iter().copied()).collect();
        let n = data.len();
        Tensor::from_vec([n], data).expect("length matches")
    }

    /// Binds slices of the rank-1 tape variable `flat` (laid out as by
    /// [`flatten`](Self::flatten)) under the parameter names.
    pub fn bind_flat(&self, tape: &mut Tape<T>, flat: Var) -> Result<Bound> {
        let n = self.parameter_count();
        if tape.shape(flat) != [n] {
            return Err(Error::Shape(format!("flat parameters must be [{n}], got {:?}", tape.shape(flat))));
        }
        let mut vars = BTreeMap::new();
        let mut offset = 0;
        for (k, v) in &self.params {
            let piece = tape.slice(flat, 0, offset, v.numel())?;
            vars.insert(k.clone(), tape.reshape(piece, v.shape())?);
            offset += v.numel();
        }
        Ok(Bound { vars })
    }

    /// Same as [`bind`](Self::bind) but without gradients.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect() }
    }
}

/// Parameter name to tape variable, produced by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Joins a parameter path prefix and a leaf name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
