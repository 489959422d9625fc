//! Named parameter collections, the student/teacher pair, and the binder
//! that places parameters into an autodiff [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Namespaces that the EMA teacher mirrors. Dynamics networks live on the
/// student side only.
pub const TEACHER_NAMESPACES: [&str; 2] = ["encoder.", "head."];

pub fn is_teacher_tracked(name: &str) -> bool {
    TEACHER_NAMESPACES.iter().any(|ns| name.starts_with(ns))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
    /// Whether gradients may be taken with respect to this collection.
    pub trainable: bool,
}

impl ParamStore {
    pub fn new(trainable: bool) -> Self {
        Self { tensors: BTreeMap::new(), trainable }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Mat {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
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

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
            trainable: self.trainable,
        }
    }

    /// Adds `N(0, std²)` noise to every parameter. Used to move a freshly
    /// initialized model away from its zero-initialized layers.
    pub fn jitter<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for v in self.tensors.values_mut() {
            let noise = Mat::randn(v.rows(), v.cols(), std, rng);
            v.add_assign(&noise);
        }
    }

    /// Adds `scale · direction[name]` for every name in `direction`.
    pub fn add_scaled(&mut self, direction: &BTreeMap<String, Mat>, scale: f64) {
        for (k, d) in direction {
            self.tensors.get_mut(k).unwrap_or_else(|| panic!("missing parameter `{k}`")).axpy(scale, d);
        }
    }
}

/// Which parameter collection to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSets {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub momentum: f64,
}

impl ParameterSets {
    /// Builds the pair with the teacher initialized from the student.
    pub fn from_student(student: ParamStore, momentum: f64) -> Self {
        let mut sets = Self { student, teacher: ParamStore::new(false), momentum };
        sets.student.trainable = true;
        init_teacher(&mut sets);
        sets
    }

    pub fn side(&self, side: Side) -> &ParamStore {
        match side {
            Side::Student => &self.student,
            Side::Teacher => &self.teacher,
        }
    }
}

/// Copies every teacher-tracked student parameter into the teacher and
/// clears the teacher's gradient flag.
pub fn init_teacher(params: &mut ParameterSets) {
    params.teacher = params.student.subset(is_teacher_tracked);
    params.teacher.trainable = false;
}

fn check_structure(params: &ParameterSets) -> Result<()> {
    for (name, s) in params.student.iter().filter(|(k, _)| is_teacher_tracked(k)) {
        match params.teacher.get(name) {
            None => return Err(Error::ParamMismatch { name: name.clone(), detail: "absent from teacher".into() }),
            Some(t) if t.shape() != s.shape() => {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    detail: format!("student shape {:?} vs teacher shape {:?}", s.shape(), t.shape()),
                })
            }
            _ => {}
        }
    }
    if let Some(name) = params.teacher.names().find(|n| !params.student.contains(n)) {
        return Err(Error::ParamMismatch { name: name.clone(), detail: "absent from student".into() });
    }
    Ok(())
}

/// `teacher ← momentum·teacher + (1 − momentum)·student`, elementwise.
pub fn ema_update(params: &mut ParameterSets, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::config(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    check_structure(params)?;
    let student = &params.student;
    for (name, t) in params.teacher.iter_mut() {
        let s = student.expect(name);
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    params.momentum = momentum;
    Ok(())
}

/// An autodiff graph with parameters bound lazily by name.
pub struct Session<'p> {
    pub graph: Graph,
    store: &'p ParamStore,
    bound: BTreeMap<&'p str, Var>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// The graph node for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let (key, value) = self
            .store
            .tensors
            .get_key_value(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let var = if self.store.trainable { self.graph.param(value.clone()) } else { self.graph.constant(value.clone()) };
        self.bound.insert(key.as_str(), var);
        var
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.graph.value(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    /// Gradients for every bound parameter. Parameters that were bound but
    /// received no gradient get zeros; unbound parameters are absent.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.bound
            .iter()
            .map(|(k, v)| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.graph.value(*v).shape();
                    Mat::zeros(r, c)
                });
                (k.to_string(), g)
            })
            .collect()
    }
}
