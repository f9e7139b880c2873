//! Parametric similarity functions for similarity-based routing.
//!
//! Three families: a positive combination of Gaussian kernels with learnable
//! weights and bandwidths, cosine similarity, and the plain dot product.
//! Poses are compared as flattened vectors; 4x4 pose matrices are flattened
//! row-major with no normalization (the one vectorization choice this module
//! fixes — callers that want something else can pre-transform).

use crate::error::{Error, Result};
use crate::tensor::params::{ParamId, ParamStore, Session};
use crate::tensor::tape::{dot_pairs, sq_dist_pairs, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// sum_q theta1_q * exp(-||x-y||^2 / (2 theta2_q^2))
    GaussianMixture { q: usize },
    Cosine,
    Linear,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::GaussianMixture { .. } => "gaussian_mixture",
            KernelKind::Cosine => "cosine",
            KernelKind::Linear => "linear",
        }
    }
}

/// A kernel with materialized (already positive) parameters, for plain
/// evaluation outside any tape.
#[derive(Clone, Debug)]
pub struct Kernel<T> {
    pub kind: KernelKind,
    /// Mixture weights, length Q (gaussian only).
    pub theta1: Option<Tensor<T>>,
    /// Bandwidths, length Q (gaussian only).
    pub theta2: Option<Tensor<T>>,
}

impl<T: Scalar> Kernel<T> {
    pub fn cosine() -> Self {
        Kernel {
            kind: KernelKind::Cosine,
            theta1: None,
            theta2: None,
        }
    }

    pub fn linear() -> Self {
        Kernel {
            kind: KernelKind::Linear,
            theta1: None,
            theta2: None,
        }
    }

    pub fn gaussian_mixture(theta1: Tensor<T>, theta2: Tensor<T>) -> Result<Self> {
        if theta1.numel() == 0 || theta1.numel() != theta2.numel() {
            return Err(Error::InvalidArgument {
                what: format!(
                    "gaussian mixture needs Q >= 1 matching weights/bandwidths, got {} and {}",
                    theta1.numel(),
                    theta2.numel()
                ),
            });
        }
        if theta1.data().iter().any(|&x| x <= T::zero())
            || theta2.data().iter().any(|&x| x <= T::zero())
        {
            return Err(Error::Domain {
                op: "gaussian_mixture",
                detail: "mixture weights and bandwidths must be positive".into(),
            });
        }
        Ok(Kernel {
            kind: KernelKind::GaussianMixture { q: theta1.numel() },
            theta1: Some(theta1),
            theta2: Some(theta2),
        })
    }

    /// Similarity of two equal-length flattened poses.
    pub fn eval(&self, x: &[T], y: &[T]) -> Result<T> {
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "kernel_eval",
                lhs: vec![x.len()],
                rhs: vec![y.len()],
            });
        }
        match self.kind {
            KernelKind::Linear => Ok(dot(x, y)),
            KernelKind::Cosine => {
                let nx = dot(x, x).sqrt();
                let ny = dot(y, y).sqrt();
                if nx == T::zero() || ny == T::zero() {
                    return Err(Error::Domain {
                        op: "kernel_eval",
                        detail: "cosine similarity of a zero-norm pose".into(),
                    });
                }
                Ok(dot(x, y) / (nx * ny))
            }
            KernelKind::GaussianMixture { q } => {
                let t1 = self.theta1.as_ref().expect("gaussian theta1");
                let t2 = self.theta2.as_ref().expect("gaussian theta2");
                let mut d2 = T::zero();
                for i in 0..x.len() {
                    let d = x[i] - y[i];
                    d2 = d2 + d * d;
                }
                let two = T::of(2.0);
                let mut acc = T::zero();
                for qi in 0..q {
                    let w = t1.data()[qi];
                    let bw = t2.data()[qi];
                    acc = acc + w * (-d2 / (two * bw * bw)).exp();
                }
                Ok(acc)
            }
        }
    }
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for i in 0..x.len() {
        acc = acc + x[i] * y[i];
    }
    acc
}

/// Inverse of softplus: maps a desired positive value to its free parameter.
pub fn softplus_inv(x: f64) -> f64 {
    (x.exp() - 1.0).ln()
}

pub(crate) fn softplus_plain<T: Scalar>(x: T) -> T {
    let m = if x > T::zero() { x } else { T::zero() };
    m + (T::one() + (-x.abs()).exp()).ln()
}

/// Learnable kernel attached to one routing layer. Gaussian parameters are
/// stored as free values and mapped through softplus, keeping weights and
/// bandwidths positive while training them like any other parameter.
#[derive(Clone, Debug)]
pub struct KernelLayer {
    pub kind: KernelKind,
    free_theta1: Option<ParamId>,
    free_theta2: Option<ParamId>,
}

impl KernelLayer {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, kind: KernelKind) -> Self {
        match kind {
            KernelKind::Cosine | KernelKind::Linear => KernelLayer {
                kind,
                free_theta1: None,
                free_theta2: None,
            },
            KernelKind::GaussianMixture { q } => {
                // theta1_q = 1/Q; theta2_q log-spaced over [0.5, 2]
                let t1 = vec![T::of(softplus_inv(1.0 / q as f64)); q];
                let mut t2 = Vec::with_capacity(q);
                for qi in 0..q {
                    let frac = if q == 1 {
                        0.5
                    } else {
                        qi as f64 / (q as f64 - 1.0)
                    };
                    let bw = (0.5f64.ln() + frac * (2.0f64.ln() - 0.5f64.ln())).exp();
                    t2.push(T::of(softplus_inv(bw)));
                }
                let free_theta1 = store.add_param(
                    &format!("{prefix}.kernel.theta1_free"),
                    Tensor::from_vec(vec![q], t1).expect("theta1 shape"),
                );
                let free_theta2 = store.add_param(
                    &format!("{prefix}.kernel.theta2_free"),
                    Tensor::from_vec(vec![q], t2).expect("theta2 shape"),
                );
                KernelLayer {
                    kind,
                    free_theta1: Some(free_theta1),
                    free_theta2: Some(free_theta2),
                }
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.free_theta1, self.free_theta2]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Materialize positive parameter values for plain evaluation.
    pub fn materialize<T: Scalar>(&self, store: &ParamStore<T>) -> Kernel<T> {
        match self.kind {
            KernelKind::Cosine => Kernel::cosine(),
            KernelKind::Linear => Kernel::linear(),
            KernelKind::GaussianMixture { .. } => {
                let t1 = store
                    .value(self.free_theta1.expect("theta1"))
                    .map(softplus_plain);
                let t2 = store
                    .value(self.free_theta2.expect("theta2"))
                    .map(softplus_plain);
                Kernel::gaussian_mixture(t1, t2).expect("softplus keeps parameters positive")
            }
        }
    }

    /// Taped similarities between one pose per group and that group's votes:
    /// mu [G,D], votes [G,S,D] -> [G,S].
    pub fn sims<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        mu: Var<'g, T>,
        votes: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        match self.kind {
            KernelKind::Linear => dot_pairs(votes, mu),
            KernelKind::Cosine => {
                let dots = dot_pairs(votes, mu)?;
                // ||v||^2 per (g,s) via squared distance to the origin
                let vs = votes.shape();
                let zero_mu = sess.constant(Tensor::zeros(&[vs[0], vs[2]]));
                let v_sq = sq_dist_pairs(votes, zero_mu)?;
                let m_sq = mu.mul(mu)?.sum_axis(1)?; // [G]
                let norms = v_sq.mul(m_sq.expand_axis(1, vs[1])?)?.sqrt()?;
                if norms.inspect(|t| t.data().iter().any(|&x| x == T::zero())) {
                    return Err(Error::Domain {
                        op: "kernel_sims",
                        detail: "cosine similarity of a zero-norm pose".into(),
                    });
                }
                dots.div(norms)
            }
            KernelKind::GaussianMixture { q } => {
                let d2 = sq_dist_pairs(votes, mu)?;
                let t1 = sess.param(self.free_theta1.expect("theta1")).softplus();
                let t2 = sess.param(self.free_theta2.expect("theta2")).softplus();
                gaussian_sims_from(d2, t1, t2, q)
            }
        }
    }
}

/// Mixture-of-gaussians similarities from squared distances [G,S] and
/// positive weight/bandwidth vectors [Q].
pub(crate) fn gaussian_sims_from<'g, T: Scalar>(
    d2: Var<'g, T>,
    theta1: Var<'g, T>,
    theta2: Var<'g, T>,
    q: usize,
) -> Result<Var<'g, T>> {
    let mut acc: Option<Var<'g, T>> = None;
    for qi in 0..q {
        let w = theta1.narrow(0, qi, 1)?;
        let bw = theta2.narrow(0, qi, 1)?;
        let denom = bw.mul(bw)?.mul_const(T::of(2.0));
        let term = d2.div(denom)?.neg().exp().mul(w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.expect("Q >= 1"))
}
