//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type: `Tensor` for stored
//! weights, `Var` once bound into a [`Graph`](crate::graph::Graph). Visiting
//! yields leaves in a fixed order with dotted names, which is the order used
//! by checkpoints and optimizer state.

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_leaves<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q>;
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P));

    fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name, p)));
        out
    }

    fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p));
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, p| out.push(p));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P, X: ParamTree<P>> ParamTree<P> for Vec<X> {
    type Mapped<Q> = Vec<X::Mapped<Q>>;

    fn map_leaves<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q> {
        self.iter().map(|x| x.map_leaves(f)).collect()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (i, x) in self.iter().enumerate() {
            x.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        for (i, x) in self.iter_mut().enumerate() {
            x.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Leaf wrapper so a bare tensor can sit in a tree.
impl<P> ParamTree<P> for Leaf<P> {
    type Mapped<Q> = Leaf<Q>;

    fn map_leaves<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Leaf<Q> {
        Leaf(f(&self.0))
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(prefix.to_string(), &self.0)
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(prefix.to_string(), &mut self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf<P>(pub P);

/// Bind stored tensors into a graph as trainable leaves.
pub fn bind<T: Scalar, X: ParamTree<Tensor>>(g: &mut Graph<T>, tree: &X) -> X::Mapped<Var> {
    tree.map_leaves(&mut |t| g.param(t.cast()))
}

/// Bind stored tensors into a graph as constants.
pub fn bind_frozen<T: Scalar, X: ParamTree<Tensor>>(g: &mut Graph<T>, tree: &X) -> X::Mapped<Var> {
    tree.map_leaves(&mut |t| g.constant(t.cast()))
}

/// Total number of scalar parameters.
pub fn count<X: ParamTree<Tensor>>(tree: &X) -> usize {
    tree.leaves().iter().map(|t| t.numel()).sum()
}

macro_rules! param_tree {
    ($ty:ident { $($field:ident),* $(; opt $ofield:ident)* $(; tree $tfield:ident)* }) => {
        impl<P> $crate::params::ParamTree<P> for $ty<P> {
            type Mapped<Q> = $ty<Q>;

            fn map_leaves<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $ty<Q> {
                $ty {
                    $( $field: f(&self.$field), )*
                    $( $ofield: self.$ofield.as_ref().map(|p| f(p)), )*
                    $( $tfield: $crate::params::ParamTree::map_leaves(&self.$tfield, f), )*
                }
            }

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
                $( f($crate::params::join(prefix, stringify!($field)), &self.$field); )*
                $( if let Some(p) = &self.$ofield { f($crate::params::join(prefix, stringify!($ofield)), p); } )*
                $( $crate::params::ParamTree::visit(&self.$tfield, &$crate::params::join(prefix, stringify!($tfield)), f); )*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
                $( f($crate::params::join(prefix, stringify!($field)), &mut self.$field); )*
                $( if let Some(p) = &mut self.$ofield { f($crate::params::join(prefix, stringify!($ofield)), p); } )*
                $( $crate::params::ParamTree::visit_mut(&mut self.$tfield, &$crate::params::join(prefix, stringify!($tfield)), f); )*
            }
        }
    };
}

pub(crate) use param_tree;
