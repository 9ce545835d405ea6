//! Named parameter storage and per-tape parameter binding.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{relative_error, GradCheck};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// Tensors are reference counted so binding them to a tape never copies.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(value));
        Ok(ParamId(self.names.len() - 1))
    }

    /// Uniform(-s, s) initialization with `s = 1 / sqrt(fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
        self.add(name, Tensor::from_vec(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), &**t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Replaces every tensor with the same-named, same-shaped one from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            let name = &self.names[i];
            let j = other
                .index
                .get(name)
                .ok_or_else(|| Error::Mismatch(format!("missing parameter `{name}`")))?;
            let src = &other.tensors[*j];
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Mismatch(format!(
                    "parameter `{name}`: expected shape {:?}, found {:?}",
                    self.tensors[i].shape(),
                    src.shape()
                )));
            }
            self.tensors[i] = Arc::clone(src);
        }
        Ok(())
    }
}

/// Binds parameters to one tape on first use.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t, 'p> Binder<'t, 'p> {
    /// `trainable` marks parameters as requiring gradients.
    pub fn new(tape: &'t Tape, store: &'p ParamStore, trainable: bool) -> Self {
        Binder {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.tape.leaf_shared(self.store.shared(id), self.trainable))
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn grads(&self) -> Grads {
        let vars = self.vars.borrow();
        Grads(
            vars.iter()
                .map(|v| v.and_then(|v| v.grad()))
                .collect(),
        )
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]; `None` means zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Option<Tensor>>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0[id.0].as_ref()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            let Some(t) = theirs else { continue };
            match mine {
                Some(m) => m
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += scale * b),
                None => {
                    let mut c = t.clone();
                    c.data_mut().iter_mut().for_each(|v| *v *= scale);
                    *mine = Some(c);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(Tensor::sum_of_squares)
            .sum::<f64>()
            .sqrt()
    }
}

/// Finite-difference check of the gradient of `f` w.r.t. every parameter in
/// `store`. Parameters `f` never binds get a zero analytic gradient.
pub fn check_param_grads<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t, 'p> Fn(&Binder<'t, 'p>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let binder = Binder::new(&tape, store, true);
    let out = f(&binder)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = binder
        .grads()
        .0
        .into_iter()
        .zip(&store.tensors)
        .map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, s, false);
        Ok(f(&binder)?.value().item())
    };
    let mut numeric = Vec::with_capacity(store.len());
    let mut max_rel_err: f64 = 0.0;
    let mut worst = (0, 0);
    for i in 0..store.len() {
        let id = ParamId(i);
        let mut num = Tensor::zeros(store.get(id).shape());
        for j in 0..num.len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * step);
            num.data_mut()[j] = n;
            let err = relative_error(analytic[i].data()[j], n);
            if err > max_rel_err {
                max_rel_err = err;
                worst = (i, j);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}
