//! Two-cluster toy vote clouds.
//!
//! Votes are sampled from two 2-D Gaussians with distinct means and
//! covariances. Each vote's activation is the posterior probability of its
//! own generating cluster after both covariance matrices are inflated by a
//! common factor (> 1), so activations soften with the inflation. They are
//! left unnormalized by default; `normalize` rescales so the largest is 1.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::routing::VoteSet;
use crate::tensor::{Scalar, Tensor};

/// Row-major 2x2 covariance.
pub type Cov2 = [f64; 4];

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub means: [[f64; 2]; 2],
    pub covariances: [Cov2; 2],
    /// Covariance inflation applied before computing activations; must
    /// exceed 1.
    pub scale: f64,
    pub votes_per_cluster: usize,
    pub seed: u64,
    pub normalize_activations: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            means: [[2.0, 0.5], [0.5, 2.0]],
            covariances: [[0.08, 0.02, 0.02, 0.06], [0.05, -0.01, -0.01, 0.09]],
            scale: 4.0,
            votes_per_cluster: 20,
            seed: 7,
            normalize_activations: false,
        }
    }
}

/// Votes plus the generating-cluster labels (kept for auditing).
#[derive(Clone, Debug)]
pub struct ToyVoteCloud<T: Scalar> {
    pub votes: VoteSet<T>,
    pub assignments: Vec<usize>,
}

struct Gaussian2 {
    mean: [f64; 2],
    chol: [f64; 3], // l11, l21, l22
    inv: Cov2,
    det: f64,
}

impl Gaussian2 {
    fn new(mean: [f64; 2], cov: Cov2) -> Result<Self> {
        let [a, b, c, d] = cov;
        if (b - c).abs() > 1e-12 {
            return Err(Error::InvalidArgument {
                what: format!("covariance {cov:?} is not symmetric"),
            });
        }
        let det = a * d - b * c;
        if a <= 0.0 || det <= 0.0 {
            return Err(Error::Domain {
                op: "toy_votes",
                detail: format!("covariance {cov:?} is not positive definite"),
            });
        }
        let l11 = a.sqrt();
        let l21 = b / l11;
        let l22 = (d - l21 * l21).sqrt();
        Ok(Gaussian2 {
            mean,
            chol: [l11, l21, l22],
            inv: [d / det, -b / det, -c / det, a / det],
            det,
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        // Box-Muller pair through the Cholesky factor
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        let z = [r * theta.cos(), r * theta.sin()];
        [
            self.mean[0] + self.chol[0] * z[0],
            self.mean[1] + self.chol[1] * z[0] + self.chol[2] * z[1],
        ]
    }

    fn density(&self, x: [f64; 2]) -> f64 {
        let dx = [x[0] - self.mean[0], x[1] - self.mean[1]];
        let q = dx[0] * (self.inv[0] * dx[0] + self.inv[1] * dx[1])
            + dx[1] * (self.inv[2] * dx[0] + self.inv[3] * dx[1]);
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * self.det.sqrt())
    }
}

fn inflate(cov: Cov2, s: f64) -> Cov2 {
    [cov[0] * s, cov[1] * s, cov[2] * s, cov[3] * s]
}

/// Sample the cloud and assign activations.
pub fn gen_toy_votes<T: Scalar>(spec: &ToySpec) -> Result<ToyVoteCloud<T>> {
    if spec.scale <= 1.0 {
        return Err(Error::InvalidArgument {
            what: format!("covariance scale must exceed 1, got {}", spec.scale),
        });
    }
    if spec.votes_per_cluster == 0 {
        return Err(Error::InvalidArgument {
            what: "votes_per_cluster must be positive".into(),
        });
    }
    let gens = [
        Gaussian2::new(spec.means[0], spec.covariances[0])?,
        Gaussian2::new(spec.means[1], spec.covariances[1])?,
    ];
    let inflated = [
        Gaussian2::new(spec.means[0], inflate(spec.covariances[0], spec.scale))?,
        Gaussian2::new(spec.means[1], inflate(spec.covariances[1], spec.scale))?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = 2 * spec.votes_per_cluster;
    let mut votes = Vec::with_capacity(n * 2);
    let mut acts = Vec::with_capacity(n);
    let mut assignments = Vec::with_capacity(n);
    for cluster in 0..2 {
        for _ in 0..spec.votes_per_cluster {
            let x = gens[cluster].sample(&mut rng);
            let d0 = inflated[0].density(x);
            let d1 = inflated[1].density(x);
            let posterior = if cluster == 0 {
                d0 / (d0 + d1)
            } else {
                d1 / (d0 + d1)
            };
            votes.extend_from_slice(&x);
            acts.push(posterior.clamp(1e-9, 1.0));
            assignments.push(cluster);
        }
    }
    if spec.normalize_activations {
        let max = acts.iter().fold(0.0f64, |a, &b| a.max(b));
        for a in acts.iter_mut() {
            *a /= max;
        }
    }
    let votes = VoteSet::new(
        Tensor::from_vec(vec![n, 2], votes.into_iter().map(T::of).collect())?,
        Tensor::from_vec(vec![n], acts.into_iter().map(T::of).collect())?,
    )?;
    Ok(ToyVoteCloud { votes, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_clusters_give_half_activations() {
        let spec = ToySpec {
            means: [[1.0, 1.0], [1.0, 1.0]],
            covariances: [[0.2, 0.0, 0.0, 0.2], [0.2, 0.0, 0.0, 0.2]],
            scale: 3.0,
            votes_per_cluster: 10,
            seed: 1,
            normalize_activations: false,
        };
        let cloud = gen_toy_votes::<f64>(&spec).unwrap();
        for &a in cloud.votes.activations().data() {
            assert!((a - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn well_separated_clusters_have_confident_activations() {
        let spec = ToySpec {
            means: [[5.0, 0.0], [0.0, 5.0]],
            covariances: [[0.05, 0.0, 0.0, 0.05], [0.05, 0.0, 0.0, 0.05]],
            scale: 2.0,
            votes_per_cluster: 12,
            seed: 2,
            normalize_activations: false,
        };
        let cloud = gen_toy_votes::<f64>(&spec).unwrap();
        // reference: densities computed directly from the Gaussian formula
        for (i, &a) in cloud.votes.activations().data().iter().enumerate() {
            assert!(a > 0.99, "vote {i} activation {a}");
        }
    }

    #[test]
    fn activation_equals_direct_posterior_computation() {
        let spec = ToySpec::default();
        let cloud = gen_toy_votes::<f64>(&spec).unwrap();
        let inf0 = Gaussian2::new(spec.means[0], inflate(spec.covariances[0], spec.scale)).unwrap();
        let inf1 = Gaussian2::new(spec.means[1], inflate(spec.covariances[1], spec.scale)).unwrap();
        for i in 0..cloud.votes.len() {
            let v = cloud.votes.vote(i);
            let x = [v[0], v[1]];
            let (d_own, d_other) = if cloud.assignments[i] == 0 {
                (inf0.density(x), inf1.density(x))
            } else {
                (inf1.density(x), inf0.density(x))
            };
            let want = d_own / (d_own + d_other);
            let got = cloud.votes.activations().data()[i];
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = ToySpec::default();
        let a = gen_toy_votes::<f64>(&spec).unwrap();
        let b = gen_toy_votes::<f64>(&spec).unwrap();
        assert_eq!(a.votes.votes().data(), b.votes.votes().data());
        assert_eq!(a.votes.activations().data(), b.votes.activations().data());
    }

    #[test]
    fn rejects_bad_covariance_and_scale() {
        let mut spec = ToySpec::default();
        spec.covariances[0] = [1.0, 2.0, 2.0, 1.0]; // det < 0
        assert!(matches!(
            gen_toy_votes::<f64>(&spec),
            Err(Error::Domain { .. })
        ));
        let mut spec = ToySpec::default();
        spec.scale = 0.5;
        assert!(matches!(
            gen_toy_votes::<f64>(&spec),
            Err(Error::InvalidArgument { .. })
        ));
    }
}
