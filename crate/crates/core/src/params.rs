//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type: `Foo<Tensor>` holds
//! values, `Foo<Var>` the same parameters bound to a [`Tape`]. Traversal order
//! is fixed by declaration order, which also fixes checkpoint and optimizer
//! layouts.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

pub trait ParamTree<T> {
    type Of<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Of<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T));
}

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl<T, S: ParamTree<T>> ParamTree<T> for Vec<S> {
    type Of<U> = Vec<S::Of<U>>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Of<U> {
        self.iter().map(|s| s.map_leaves(f)).collect()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, s) in self.iter().enumerate() {
            s.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, s) in self.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T, S: ParamTree<T>> ParamTree<T> for Option<S> {
    type Of<U> = Option<S::Of<U>>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Of<U> {
        self.as_ref().map(|s| s.map_leaves(f))
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        if let Some(s) = self {
            s.visit(prefix, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        if let Some(s) = self {
            s.visit_mut(prefix, f);
        }
    }
}

macro_rules! leaf_tree {
    ($($ty:ty),*) => {$(
        impl ParamTree<$ty> for $ty {
            type Of<U> = U;

            fn map_leaves<U>(&self, f: &mut dyn FnMut(&$ty) -> U) -> U {
                f(self)
            }

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $ty)) {
                f(prefix.to_string(), self)
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut $ty)) {
                f(prefix.to_string(), self)
            }
        }
    )*};
}
leaf_tree!(Tensor, Var);

impl<T, A: ParamTree<T>, B: ParamTree<T>> ParamTree<T> for (A, B) {
    type Of<U> = (A::Of<U>, B::Of<U>);

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Of<U> {
        (self.0.map_leaves(f), self.1.map_leaves(f))
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.0.visit(&join(prefix, "0"), f);
        self.1.visit(&join(prefix, "1"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.0.visit_mut(&join(prefix, "0"), f);
        self.1.visit_mut(&join(prefix, "1"), f);
    }
}

/// Implements [`ParamTree`] for a struct generic over its leaf type.
///
/// `leaves` are fields of type `T`, `nested` are fields that are themselves trees.
macro_rules! param_tree {
    ($ty:ident { leaves: [$($leaf:ident),* $(,)?] $(, nested: [$($sub:ident),* $(,)?])? $(,)? }) => {
        impl<T> $crate::params::ParamTree<T> for $ty<T> {
            type Of<U> = $ty<U>;

            fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $ty<U> {
                $ty {
                    $($leaf: f(&self.$leaf),)*
                    $($($sub: self.$sub.map_leaves(f),)*)?
                }
            }

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f($crate::params::join(prefix, stringify!($leaf)), &self.$leaf);)*
                $($(self.$sub.visit(&$crate::params::join(prefix, stringify!($sub)), f);)*)?
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
                $(f($crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $($(self.$sub.visit_mut(&$crate::params::join(prefix, stringify!($sub)), f);)*)?
            }
        }
    };
}
pub(crate) use param_tree;

/// Registers every tensor of `params` as a trainable leaf on `tape`.
pub fn bind<P: ParamTree<Tensor>>(params: &P, tape: &mut Tape) -> P::Of<Var> {
    params.map_leaves(&mut |t| tape.param(t.clone()))
}

pub fn named<P: ParamTree<Tensor>>(params: &P) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, t| out.push((name, t)));
    out
}

pub fn named_mut<P: ParamTree<Tensor>>(params: &mut P) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    params.visit_mut("", &mut |name, t| out.push((name, t)));
    out
}

/// Leaves of a bound tree in traversal order.
pub fn leaves<P: ParamTree<Var>>(bound: &P) -> Vec<Var> {
    let mut out = Vec::new();
    bound.visit("", &mut |_, v| out.push(*v));
    out
}

/// A weight matrix `[in, out]` with a bias row `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

param_tree!(Dense { leaves: [weight, bias] });

/// Bound for uniform Glorot initialization.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Dense<Tensor> {
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl rand::Rng) -> Self {
        Dense {
            weight: Tensor::uniform([inputs, outputs], glorot_limit(inputs, outputs), rng),
            bias: Tensor::zeros([outputs]),
        }
    }
}

impl Dense<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> crate::Result<Var> {
        let z = tape.matmul(x, self.weight)?;
        tape.add_bias(z, self.bias)
    }
}
