use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Float, Tensor};

/// Named parameter tensors of one network, in construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// Single-precision parameters, the type every trained network uses.
pub type ModelParams = ParamStore<f32>;

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Shape(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Copy of the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Put every tensor on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Check that names and shapes agree with `specs` exactly.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            match self.tensors.get(&s.name) {
                None => {
                    return Err(Error::structure(
                        s.layer(),
                        format!("missing parameter `{}`", s.name),
                    ))
                }
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::structure(
                        s.layer(),
                        format!(
                            "parameter `{}` has shape {:?}, expected {:?}",
                            s.name,
                            t.shape(),
                            s.shape
                        ),
                    ))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::structure(extra.clone(), format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Graph variables for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| {
            let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
            Error::structure(layer, format!("parameter `{name}` not bound"))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Bind another network's parameters under `prefix`.
    pub fn merged(mut self, prefix: &str, other: &Bound) -> Self {
        for (k, v) in &other.vars {
            self.vars.insert(format!("{prefix}{k}"), *v);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn layer(&self) -> &str {
        self.name.rsplit_once('.').map_or(&self.name, |(l, _)| l)
    }
}

/// Instantiate `specs`; each tensor draws from its own `(seed, name)` stream.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ModelParams> {
    let mut store = ModelParams::new();
    for s in specs {
        let t = match s.init {
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::full(&s.shape, 1.0),
            Init::Uniform(b) => {
                let mut r = rng::stream(seed, &format!("init/{}", s.name), 0);
                Tensor::from_fn(&s.shape, |_| r.random_range(-b..b) as f32)
            }
        };
        store.insert(s.name.clone(), t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: "a.weight".into(),
                shape: vec![2, 3],
                init: Init::Uniform(0.5),
            },
            ParamSpec {
                name: "a.bias".into(),
                shape: vec![2],
                init: Init::Zeros,
            },
        ]
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let a = init_params(&specs(), 3).unwrap();
        let b = init_params(&specs(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.get("a.weight").unwrap().data().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(a.num_params(), 8);
        a.check_against(&specs()).unwrap();
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut p = init_params(&specs(), 3).unwrap();
        *p.get_mut("a.bias").unwrap() = Tensor::zeros(&[3]);
        match p.check_against(&specs()) {
            Err(Error::Structure { layer, .. }) => assert_eq!(layer, "a"),
            other => panic!("{other:?}"),
        }
    }
}
