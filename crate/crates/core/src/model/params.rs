//! Named parameter storage, deterministic initialization and per-tape
//! binding.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Normal with std [`INIT_STD`], resampled outside two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
    Value(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter declarations. Layer helpers use the same
/// suffixes as the matching [`Ctx`] methods.
#[derive(Clone, Debug, Default)]
pub struct SpecList(pub Vec<ParamSpec>);

impl SpecList {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// `{p}.w` `[i, o]` and `{p}.b` `[o]`. With `zero` both start at zero.
    pub fn linear(&mut self, p: &str, i: usize, o: usize, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::TruncNormal };
        self.push(format!("{p}.w"), &[i, o], init);
        self.push(format!("{p}.b"), &[o], Init::Zeros);
    }

    pub fn layer_norm(&mut self, p: &str, c: usize) {
        self.push(format!("{p}.g"), &[c], Init::Ones);
        self.push(format!("{p}.b"), &[c], Init::Zeros);
    }

    pub fn mhsa(&mut self, p: &str, c: usize) {
        self.linear(&format!("{p}.qkv"), c, 3 * c, false);
        self.linear(&format!("{p}.proj"), c, c, false);
    }

    pub fn ffn(&mut self, p: &str, c: usize, hidden: usize) {
        self.linear(&format!("{p}.fc1"), c, hidden, false);
        self.linear(&format!("{p}.fc2"), hidden, c, false);
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn trunc_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let d = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let x: f64 = d.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        })
        .collect()
}

/// Model weights by name, in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Arc<Tensor>>,
}

impl ParamStore {
    /// Initializes every declared tensor. Each name draws from its own
    /// ChaCha stream, so a tensor's initial value depends only on
    /// `(seed, name, shape)` and not on what else is declared.
    pub fn init(specs: &SpecList, seed: u64) -> Result<Self> {
        let mut tensors = IndexMap::with_capacity(specs.0.len());
        for s in &specs.0 {
            let n: usize = s.shape.iter().product();
            let t = match &s.init {
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::full(s.shape.clone(), 1.0),
                Init::TruncNormal => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(fnv1a(&s.name));
                    Tensor::new(s.shape.clone(), trunc_normal(&mut rng, n))?
                }
                Init::Value(v) => {
                    if v.shape() != s.shape.as_slice() {
                        return Err(Error::shape("param init", v.shape(), &s.shape));
                    }
                    v.clone()
                }
            };
            if tensors.insert(s.name.clone(), Arc::new(t)).is_some() {
                return Err(Error::invalid("param init", format!("duplicate parameter {}", s.name)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn from_tensors(items: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self {
            tensors: items.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    /// Mutable access in declaration order (copies a tensor only if it is
    /// still shared with a live tape).
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut().map(Arc::make_mut)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid("param set", format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("param set", slot.shape(), value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Checks that `other` has exactly the same names and shapes, naming
    /// the first difference.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::Format(format!("missing parameter {name}"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Format(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Format(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    fn shared(&self, i: usize) -> Arc<Tensor> {
        self.tensors[i].clone()
    }
}

/// A tape plus lazily bound parameters of one store. Parameters are leaves
/// sharing the store's buffers; with `trainable` they receive gradients.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    trainable: bool,
    bound: Vec<Option<Var>>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    /// Wraps an existing tape, e.g. one owned by a gradient checker.
    pub fn from_tape(tape: Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    /// Runs `f` with a context over `tape`, binding the listed parameters
    /// to existing variables instead of the store's values.
    pub fn scoped<R>(
        tape: &mut Tape,
        store: &'s ParamStore,
        bind: &[(&str, Var)],
        f: impl FnOnce(&mut Ctx<'s>) -> Result<R>,
    ) -> Result<R> {
        let mut ctx = Ctx::from_tape(std::mem::take(tape), store, false);
        let r = bind.iter().try_for_each(|&(n, v)| ctx.bind(n, v)).and_then(|_| f(&mut ctx));
        *tape = ctx.tape;
        r
    }

    /// Uses `v` for parameter `name` from now on.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter {name}")))?;
        if self.tape.shape(v) != self.store.tensors[i].shape() {
            return Err(Error::shape("param bind", self.tape.shape(v), self.store.tensors[i].shape()));
        }
        self.bound[i] = Some(v);
        Ok(())
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.index_of(name).is_some()
    }

    /// Tape variable for parameter `name`.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter {name}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let t = self.store.shared(i);
        let v = if self.trainable {
            self.tape.param_shared(t)
        } else {
            self.tape.constant_shared(t)
        };
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Backpropagates `loss` and returns one gradient per stored parameter
    /// (zeros for parameters the loss never touched).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Tensor>> {
        let mut g = self.tape.backward(loss)?;
        Ok(self
            .store
            .iter()
            .zip(&self.bound)
            .map(|((_, t), b)| {
                b.and_then(|v| g.take(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect())
    }

    pub fn linear(&mut self, x: Var, p: &str) -> Result<Var> {
        let w = self.p(&format!("{p}.w"))?;
        let b = self.p(&format!("{p}.b"))?;
        self.tape.linear(x, w, Some(b))
    }

    pub fn layer_norm(&mut self, x: Var, p: &str) -> Result<Var> {
        let g = self.p(&format!("{p}.g"))?;
        let b = self.p(&format!("{p}.b"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Multi-head self-attention over rows of `x[T, C]`. Also returns the
    /// post-softmax attention `[T, T]` of each head.
    pub fn mhsa(&mut self, x: Var, p: &str, heads: usize) -> Result<(Var, Vec<Var>)> {
        let c = self.tape.shape(x)[1];
        let d = c / heads;
        let qkv = self.linear(x, &format!("{p}.qkv"))?;
        let mut outs = Vec::with_capacity(heads);
        let mut maps = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = self.tape.narrow(qkv, 1, h * d, d)?;
            let k = self.tape.narrow(qkv, 1, c + h * d, d)?;
            let v = self.tape.narrow(qkv, 1, 2 * c + h * d, d)?;
            let s = self.tape.matmul_t(q, k, false, true)?;
            let s = self.tape.scale(s, 1.0 / (d as f64).sqrt())?;
            let a = self.tape.softmax(s, 1)?;
            outs.push(self.tape.matmul(a, v)?);
            maps.push(a);
        }
        let o = if heads == 1 { outs[0] } else { self.tape.concat(&outs, 1)? };
        Ok((self.linear(o, &format!("{p}.proj"))?, maps))
    }

    pub fn ffn(&mut self, x: Var, p: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{p}.fc1"))?;
        let h = self.tape.gelu(h)?;
        self.linear(h, &format!("{p}.fc2"))
    }
}
