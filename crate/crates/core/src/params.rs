//! Named parameter storage, parameter groups, and binding onto a tape.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::TensorMap;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const GROUP_VIT: &str = "vit";
pub const GROUP_VIDEO_CONV: &str = "video_conv";
pub const GROUP_ADAPTER: &str = "adapter";
pub const GROUP_DECODER: &str = "decoder";
pub const GROUP_VISUAL_EXPERT: &str = "visual_expert";

pub const ALL_GROUPS: [&str; 5] = [
    GROUP_VIT,
    GROUP_VIDEO_CONV,
    GROUP_ADAPTER,
    GROUP_DECODER,
    GROUP_VISUAL_EXPERT,
];

/// Parameter group a tensor belongs to, by name. `None` for metadata tensors,
/// which are never trained.
pub fn group_of(name: &str) -> Option<&'static str> {
    let head = name.split('.').next()?;
    match head {
        "vit" => Some(GROUP_VIT),
        "video" => Some(GROUP_VIDEO_CONV),
        "adapter" => Some(GROUP_ADAPTER),
        "dec" if name.ends_with(".vis") => Some(GROUP_VISUAL_EXPERT),
        "dec" => Some(GROUP_DECODER),
        _ => None,
    }
}

pub fn check_group(name: &str) -> Result<&'static str> {
    ALL_GROUPS
        .iter()
        .copied()
        .find(|g| *g == name)
        .ok_or_else(|| Error::UnknownGroup(name.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: TensorMap,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: TensorMap) -> Self {
        Self { tensors }
    }

    pub fn as_map(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn into_map(self) -> TensorMap {
        self.tensors
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Groups that own at least one tensor.
    pub fn groups(&self) -> BTreeSet<&'static str> {
        self.names().filter_map(group_of).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Gaussian initialization with the given standard deviation.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: Scalar) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std as f64).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng) as Scalar).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

enum Source<'a> {
    Store {
        store: &'a ParamStore,
        trainable: Option<&'a BTreeSet<String>>,
    },
    Fixed,
}

/// A tape plus a resolver from parameter names to tape variables.
///
/// Parameters are bound on first use, so a forward pass only copies the
/// tensors it touches. Parameters outside the trainable groups are bound as
/// constants and never receive gradients.
pub struct Graph<'a> {
    tape: &'a mut Tape,
    source: Source<'a>,
    bound: HashMap<String, Var>,
}

impl<'a> Graph<'a> {
    /// Every stored parameter is trainable.
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            source: Source::Store {
                store,
                trainable: None,
            },
            bound: HashMap::new(),
        }
    }

    /// Only parameters in `groups` are trainable.
    pub fn with_trainable(tape: &'a mut Tape, store: &'a ParamStore, groups: &'a BTreeSet<String>) -> Self {
        Self {
            tape,
            source: Source::Store {
                store,
                trainable: Some(groups),
            },
            bound: HashMap::new(),
        }
    }

    /// Parameters already recorded on `tape`, e.g. by a gradient check.
    pub fn from_bound(tape: &'a mut Tape, bound: HashMap<String, Var>) -> Self {
        Self {
            tape,
            source: Source::Fixed,
            bound,
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.contains_key(name)
            || matches!(self.source, Source::Store { store, .. } if store.contains(name))
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let Source::Store { store, trainable } = self.source else {
            return Err(Error::MissingParam(name.to_string()));
        };
        let t = store.get(name)?.clone();
        let train = match (trainable, group_of(name)) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(set), Some(g)) => set.contains(g),
        };
        let v = if train {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        self.tape
    }
}

/// Collects `names` from `store` as gradient-check inputs, in order.
pub fn collect(store: &ParamStore, names: &[String]) -> Result<Vec<Tensor>> {
    names.iter().map(|n| store.get(n).cloned()).collect()
}

/// Rebuilds a name → var map from parallel slices.
pub fn bind_names(names: &[String], vars: &[Var]) -> HashMap<String, Var> {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

/// Tensor names of `store` grouped by parameter group.
pub fn names_by_group(store: &ParamStore) -> BTreeMap<&'static str, Vec<String>> {
    let mut out: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
    for name in store.names() {
        if let Some(g) = group_of(name) {
            out.entry(g).or_default().push(name.to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_prefix() {
        assert_eq!(group_of("vit.0.attn.q.w"), Some(GROUP_VIT));
        assert_eq!(group_of("adapter.conv.w"), Some(GROUP_ADAPTER));
        assert_eq!(group_of("video.conv.b"), Some(GROUP_VIDEO_CONV));
        assert_eq!(group_of("dec.1.attn.q.vis"), Some(GROUP_VISUAL_EXPERT));
        assert_eq!(group_of("dec.1.attn.q.lang"), Some(GROUP_DECODER));
        assert_eq!(group_of("dec.embed"), Some(GROUP_DECODER));
        assert_eq!(group_of("meta.config"), None);
        assert!(matches!(check_group("llm"), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::new();
        store.insert("vit.a", Tensor::ones(&[2]));
        store.insert("dec.b", Tensor::ones(&[2]));
        let groups: BTreeSet<String> = ["decoder".to_string()].into();
        let mut tape = Tape::new();
        let mut g = Graph::with_trainable(&mut tape, &store, &groups);
        let a = g.p("vit.a").unwrap();
        let b = g.p("dec.b").unwrap();
        assert!(!g.requires_grad(a));
        assert!(g.requires_grad(b));
        assert_eq!(g.p("vit.a").unwrap(), a);
        assert!(g.p("nope").is_err());
    }
}
