//! Plain SGD over named parameter collections.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named gradient tensors collected after a backward pass.
///
/// Insertion order is preserved so updates are applied deterministically.
#[derive(Debug, Default)]
pub struct GradMap<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> GradMap<F> {
    pub fn new() -> Self {
        GradMap { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<F>) {
        self.entries.push((name.into(), grad));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// One SGD update `p <- p - lr * g` over every named parameter.
///
/// The gradient map must cover exactly the given parameters; a missing or
/// extra entry is rejected before any update is applied.
pub fn sgd_step<F: Scalar>(
    params: &mut [(String, &mut Tensor<F>)],
    grads: &GradMap<F>,
    lr: F,
) -> Result<()> {
    assert!(lr > F::zero(), "learning rate must be positive");
    for (name, p) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::MissingGradient { name: name.clone() }),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::Shape {
                    op: "sgd_step",
                    detail: format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                })
            }
            Some(_) => {}
        }
    }
    if grads.len() != params.len() {
        let extra: Vec<&str> =
            grads.names().filter(|n| !params.iter().any(|(p, _)| p == n)).collect();
        return Err(Error::StructureMismatch {
            detail: format!("gradients not covered by params: {extra:?}"),
        });
    }
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * *gv;
        }
    }
    Ok(())
}
