use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|name, _| !name.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// FNV-1a over names and value bits of the frozen parameters.
    pub fn frozen_fingerprint(&self) -> u64 {
        self.fingerprint(|p| !p.trainable)
    }

    pub fn fingerprint(&self, include: impl Fn(&Param) -> bool) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, p) in self.params.iter().filter(|(_, p)| include(p)) {
            eat(name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Puts every parameter on the tape; trainable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), p.trainable)))
            .collect();
        Bindings { vars }
    }

    /// Like [`ParamStore::bind`], but nothing requires gradients.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.constant(p.value.clone())))
            .collect();
        Bindings { vars }
    }
}

impl ParamStore {
    /// Trainable parameter names in binding order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Binds trainable parameters to caller-provided variables, given in
    /// [`trainable_names`](Self::trainable_names) order, and the rest as
    /// constants. Used for finite-difference checks of whole models.
    pub fn bind_with(&self, tape: &mut Tape, trainable: &[Var]) -> Result<Bindings> {
        let mut given = trainable.iter();
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            let v = if p.trainable {
                *given.next().ok_or_else(|| {
                    Error::Config("fewer variables than trainable parameters".into())
                })?
            } else {
                tape.constant(p.value.clone())
            };
            vars.insert(name.clone(), v);
        }
        if given.next().is_some() {
            return Err(Error::Config(
                "more variables than trainable parameters".into(),
            ));
        }
        Ok(Bindings { vars })
    }
}

/// Parameter name to tape variable.
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every trainable parameter after a backward sweep.
    /// Parameters the loss did not reach get a zero gradient.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(name, _)| store.is_trainable(name))
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
