//! Generic routing engine.
//!
//! Routing assigns each output capsule a distribution of compatibility
//! weights over the votes in its receptive field, aggregates the weighted
//! votes into the output pose, and derives the output activation. Which
//! compatibility and activation functions run each iteration is pluggable
//! through [`RoutingProcedure`]; this module owns only the iteration loop,
//! the uniform initialization and the weighted-mean pose update
//! (with its explicit sum-of-compatibilities denominator, so procedures are
//! free not to normalize), plus receptive-field geometry for convolutional
//! routing.
//!
//! The engine works over grouped tensors: `G` independent output capsules,
//! each with a fan-in of `S` votes of dimension `D`. The per-capsule
//! convenience wrapper [`route`] is the `G = 1` case.

use crate::error::{Error, Result};
use crate::tensor::params::Session;
use crate::tensor::tape::{weighted_mean, Var};
use crate::tensor::{Scalar, Tensor};

/// Votes and input activations for one output capsule's receptive field.
#[derive(Clone, Debug)]
pub struct VoteSet<T> {
    /// [n, D] flattened vote vectors.
    votes: Tensor<T>,
    /// [n] input activations in [0, 1].
    activations: Tensor<T>,
}

impl<T: Scalar> VoteSet<T> {
    pub fn new(votes: Tensor<T>, activations: Tensor<T>) -> Result<Self> {
        if votes.shape().len() != 2 || votes.shape()[0] == 0 {
            return Err(Error::InvalidArgument {
                what: format!("votes must be [n >= 1, D], got {:?}", votes.shape()),
            });
        }
        if activations.shape() != [votes.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "vote_set",
                lhs: votes.shape().to_vec(),
                rhs: activations.shape().to_vec(),
            });
        }
        if activations
            .data()
            .iter()
            .any(|&a| a < T::zero() || a > T::one())
        {
            return Err(Error::Domain {
                op: "vote_set",
                detail: "activations must lie in [0, 1]".into(),
            });
        }
        Ok(VoteSet { votes, activations })
    }

    pub fn len(&self) -> usize {
        self.votes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.votes.shape()[1]
    }

    pub fn votes(&self) -> &Tensor<T> {
        &self.votes
    }

    pub fn activations(&self) -> &Tensor<T> {
        &self.activations
    }

    pub fn vote(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.votes.data()[i * d..(i + 1) * d]
    }
}

/// Simplex-constrained (for similarity routing) compatibility weights.
#[derive(Clone, Debug)]
pub struct CompatibilityVector<T>(pub Tensor<T>);

impl<T: Scalar> CompatibilityVector<T> {
    pub fn uniform(n: usize) -> Self {
        CompatibilityVector(Tensor::filled(&[n], T::one() / T::of(n as f64)))
    }

    pub fn weights(&self) -> &[T] {
        self.0.data()
    }
}

/// Result of routing one receptive field.
#[derive(Clone, Debug)]
pub struct RoutingOutcome<T> {
    /// Output pose, [D].
    pub pose: Tensor<T>,
    /// Output activation in (0, 1).
    pub activation: T,
    /// Final compatibilities, [n].
    pub compatibilities: CompatibilityVector<T>,
}

/// How grouped tensors map onto output capsules: `outer * channels` groups,
/// laid out outer-major / channel-minor, each with `fan_in` votes.
#[derive(Clone, Copy, Debug)]
pub struct GroupLayout {
    pub outer: usize,
    pub channels: usize,
    pub fan_in: usize,
}

impl GroupLayout {
    pub fn groups(&self) -> usize {
        self.outer * self.channels
    }
}

/// Grouped routing inputs on a tape.
pub struct RoutingInputs<'g, T: Scalar> {
    /// [G, S, D] votes.
    pub votes: Var<'g, T>,
    /// [G, S] input activations.
    pub acts: Var<'g, T>,
    pub layout: GroupLayout,
}

/// Opaque per-iteration state owned by the procedure (e.g. recurrent cell
/// state); the engine threads it through unchanged.
pub struct IterState<'g, T: Scalar> {
    pub vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> IterState<'g, T> {
    pub fn empty() -> Self {
        IterState { vars: Vec::new() }
    }
}

/// A routing procedure: the pair of functions that updates compatibilities
/// and derives the output activation each iteration. The engine passes the
/// full iteration context; implementations consume what they need.
pub trait RoutingProcedure<T: Scalar> {
    fn name(&self) -> &'static str;

    fn init_state<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        inputs: &RoutingInputs<'g, T>,
    ) -> Result<IterState<'g, T>>;

    /// One compatibility update. `c` [G,S], `mu` [G,D], `p` [G].
    /// Returns the new compatibilities and state.
    #[allow(clippy::too_many_arguments)]
    fn compatibility<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        inputs: &RoutingInputs<'g, T>,
        c: Var<'g, T>,
        state: &IterState<'g, T>,
        mu: Var<'g, T>,
        p: Var<'g, T>,
    ) -> Result<(Var<'g, T>, IterState<'g, T>)>;

    /// Output activation for the current iteration, [G] in (0,1).
    fn activation<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        inputs: &RoutingInputs<'g, T>,
        c: Var<'g, T>,
        state: &IterState<'g, T>,
        mu: Var<'g, T>,
    ) -> Result<Var<'g, T>>;
}

/// Grouped routing result.
pub struct RoutedGroups<'g, T: Scalar> {
    /// [G, D] output poses.
    pub poses: Var<'g, T>,
    /// [G] output activations.
    pub activations: Var<'g, T>,
    /// [G, S] final compatibilities.
    pub compatibilities: Var<'g, T>,
}

/// Run the routing iteration loop over grouped votes.
///
/// Compatibilities start uniform at 1/S, state at its procedure-defined
/// initial value; the pose is the compatibility-weighted vote mean with an
/// explicit denominator; then `iterations` rounds of compatibility update,
/// pose update and activation update.
pub fn route_groups<'g, T: Scalar>(
    sess: &Session<'g, '_, T>,
    inputs: &RoutingInputs<'g, T>,
    procedure: &dyn RoutingProcedure<T>,
    iterations: usize,
) -> Result<RoutedGroups<'g, T>> {
    let g = inputs.layout.groups();
    let s = inputs.layout.fan_in;
    let vshape = inputs.votes.shape();
    if vshape.len() != 3 || vshape[0] != g || vshape[1] != s {
        return Err(Error::ShapeMismatch {
            op: "route_groups",
            lhs: vshape,
            rhs: vec![g, s, 0],
        });
    }
    let mut c = sess.constant(Tensor::filled(&[g, s], T::one() / T::of(s as f64)));
    let mut state = procedure.init_state(sess, inputs)?;
    let mut mu = weighted_mean(c, inputs.votes)?;
    let mut p = procedure.activation(sess, inputs, c, &state, mu)?;
    for _ in 0..iterations {
        let (c_new, state_new) = procedure.compatibility(sess, inputs, c, &state, mu, p)?;
        if c_new.inspect(|t| t.data().iter().any(|&x| x < T::zero())) {
            return Err(Error::ContractViolation {
                detail: format!(
                    "procedure {} produced a negative compatibility",
                    procedure.name()
                ),
            });
        }
        if c_new.shape() != vec![g, s] {
            return Err(Error::ContractViolation {
                detail: format!(
                    "procedure {} produced compatibilities of shape {:?}, expected [{g}, {s}]",
                    procedure.name(),
                    c_new.shape()
                ),
            });
        }
        c = c_new;
        state = state_new;
        mu = weighted_mean(c, inputs.votes)?;
        p = procedure.activation(sess, inputs, c, &state, mu)?;
    }
    Ok(RoutedGroups {
        poses: mu,
        activations: p,
        compatibilities: c,
    })
}

/// Route a single receptive field (the spec-level operation).
pub fn route<'g, T: Scalar>(
    sess: &Session<'g, '_, T>,
    votes: &VoteSet<T>,
    procedure: &dyn RoutingProcedure<T>,
    iterations: usize,
) -> Result<RoutingOutcome<T>> {
    let n = votes.len();
    let d = votes.dim();
    let votes_var = sess.constant(
        votes
            .votes()
            .clone()
            .reshaped(vec![1, n, d])
            .expect("vote reshape"),
    );
    let acts_var = sess.constant(
        votes
            .activations()
            .clone()
            .reshaped(vec![1, n])
            .expect("act reshape"),
    );
    let inputs = RoutingInputs {
        votes: votes_var,
        acts: acts_var,
        layout: GroupLayout {
            outer: 1,
            channels: 1,
            fan_in: n,
        },
    };
    let routed = route_groups(sess, &inputs, procedure, iterations)?;
    Ok(RoutingOutcome {
        pose: routed.poses.value().reshaped(vec![d])?,
        activation: routed.activations.value().item(),
        compatibilities: CompatibilityVector(routed.compatibilities.value().reshaped(vec![n])?),
    })
}

/// Capsule indices of one output position's receptive field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub out_y: usize,
    pub out_x: usize,
    /// Flat indices into an (H, W, C) capsule grid, ordered kernel-row,
    /// kernel-column, then channel — the same slot order transform weights
    /// use.
    pub indices: Vec<usize>,
}

/// Output spatial extent of an unpadded sliding window.
pub fn out_extent(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument {
            what: "kernel and stride must be positive".into(),
        });
    }
    if kernel > input {
        return Err(Error::ShapeMismatch {
            op: "receptive_fields",
            lhs: vec![input],
            rhs: vec![kernel],
        });
    }
    Ok((input - kernel) / stride + 1)
}

/// Enumerate valid (unpadded) K x K windows over an (H, W, C) capsule grid,
/// one group per output position, each holding K*K*C capsule indices.
pub fn extract_receptive_fields(
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
) -> Result<Vec<ReceptiveField>> {
    let oh = out_extent(height, kernel, stride)?;
    let ow = out_extent(width, kernel, stride)?;
    let mut fields = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut indices = Vec::with_capacity(kernel * kernel * channels);
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let y = oy * stride + ky;
                    let x = ox * stride + kx;
                    for ci in 0..channels {
                        indices.push((y * width + x) * channels + ci);
                    }
                }
            }
            fields.push(ReceptiveField {
                out_y: oy,
                out_x: ox,
                indices,
            });
        }
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::ParamStore;
    use crate::tensor::tape::Tape;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Test procedure: leaves compatibilities unchanged and reports a fixed
    /// activation.
    struct IdentityProcedure;

    impl RoutingProcedure<f64> for IdentityProcedure {
        fn name(&self) -> &'static str {
            "identity"
        }
        fn init_state<'g>(
            &self,
            _sess: &Session<'g, '_, f64>,
            _inputs: &RoutingInputs<'g, f64>,
        ) -> Result<IterState<'g, f64>> {
            Ok(IterState::empty())
        }
        fn compatibility<'g>(
            &self,
            _sess: &Session<'g, '_, f64>,
            _inputs: &RoutingInputs<'g, f64>,
            c: Var<'g, f64>,
            _state: &IterState<'g, f64>,
            _mu: Var<'g, f64>,
            _p: Var<'g, f64>,
        ) -> Result<(Var<'g, f64>, IterState<'g, f64>)> {
            Ok((c, IterState::empty()))
        }
        fn activation<'g>(
            &self,
            sess: &Session<'g, '_, f64>,
            inputs: &RoutingInputs<'g, f64>,
            _c: Var<'g, f64>,
            _state: &IterState<'g, f64>,
            _mu: Var<'g, f64>,
        ) -> Result<Var<'g, f64>> {
            Ok(sess.constant(Tensor::filled(&[inputs.layout.groups()], 0.5)))
        }
    }

    struct NegativeProcedure;

    impl RoutingProcedure<f64> for NegativeProcedure {
        fn name(&self) -> &'static str {
            "negative"
        }
        fn init_state<'g>(
            &self,
            _sess: &Session<'g, '_, f64>,
            _inputs: &RoutingInputs<'g, f64>,
        ) -> Result<IterState<'g, f64>> {
            Ok(IterState::empty())
        }
        fn compatibility<'g>(
            &self,
            _sess: &Session<'g, '_, f64>,
            _inputs: &RoutingInputs<'g, f64>,
            c: Var<'g, f64>,
            _state: &IterState<'g, f64>,
            _mu: Var<'g, f64>,
            _p: Var<'g, f64>,
        ) -> Result<(Var<'g, f64>, IterState<'g, f64>)> {
            Ok((c.neg(), IterState::empty()))
        }
        fn activation<'g>(
            &self,
            sess: &Session<'g, '_, f64>,
            inputs: &RoutingInputs<'g, f64>,
            _c: Var<'g, f64>,
            _state: &IterState<'g, f64>,
            _mu: Var<'g, f64>,
        ) -> Result<Var<'g, f64>> {
            Ok(sess.constant(Tensor::filled(&[inputs.layout.groups()], 0.5)))
        }
    }

    fn random_votes(n: usize, d: usize, seed: u64) -> VoteSet<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let votes = Tensor::from_vec(
            vec![n, d],
            (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let acts = Tensor::from_vec(vec![n], (0..n).map(|_| r.gen_range(0.05..1.0)).collect())
            .unwrap();
        VoteSet::new(votes, acts).unwrap()
    }

    fn run_identity(votes: &VoteSet<f64>, iterations: usize) -> RoutingOutcome<f64> {
        let store = ParamStore::<f64>::new();
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, false);
        route(&sess, votes, &IdentityProcedure, iterations).unwrap()
    }

    #[test]
    fn single_vote_routes_to_itself() {
        let votes = random_votes(1, 5, 1);
        let out = run_identity(&votes, 3);
        for (a, b) in out.pose.data().iter().zip(votes.vote(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.compatibilities.weights()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_yield_vote_mean_and_uniform_c() {
        let votes = random_votes(7, 4, 2);
        let out = run_identity(&votes, 0);
        for d in 0..4 {
            let mean: f64 = (0..7).map(|i| votes.vote(i)[d]).sum::<f64>() / 7.0;
            assert!((out.pose.data()[d] - mean).abs() < 1e-12);
        }
        for &c in out.compatibilities.weights() {
            assert!((c - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_compatibility_keeps_vote_mean_after_any_iterations() {
        let votes = random_votes(6, 3, 3);
        for iters in [1, 2, 5] {
            let out = run_identity(&votes, iters);
            for d in 0..3 {
                let mean: f64 = (0..6).map(|i| votes.vote(i)[d]).sum::<f64>() / 6.0;
                assert!((out.pose.data()[d] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negative_compatibility_is_a_contract_violation() {
        let votes = random_votes(3, 4, 4);
        let store = ParamStore::<f64>::new();
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, false);
        let err = route(&sess, &votes, &NegativeProcedure, 1).unwrap_err();
        assert!(matches!(err, Error::ContractViolation { .. }));
    }

    #[test]
    fn pose_stays_in_vote_envelope_when_weights_sum_to_one() {
        // uniform weights sum to 1, so each pose component must lie
        // within [min_i v_i, max_i v_i]
        for seed in 0..8 {
            let votes = random_votes(5, 6, 100 + seed);
            let out = run_identity(&votes, 2);
            for d in 0..6 {
                let lo = (0..5).map(|i| votes.vote(i)[d]).fold(f64::INFINITY, f64::min);
                let hi = (0..5)
                    .map(|i| votes.vote(i)[d])
                    .fold(f64::NEG_INFINITY, f64::max);
                let p = out.pose.data()[d];
                assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn vote_set_validates_activation_range() {
        let votes = Tensor::<f64>::zeros(&[2, 3]);
        let acts = Tensor::from_vec(vec![2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(
            VoteSet::new(votes, acts),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn table_extents_match_architecture_rows() {
        // 16 -> 7 at K=3, S=2; 7 -> 5 at K=3, S=1; extent K collapses to 1
        assert_eq!(out_extent(16, 3, 2).unwrap(), 7);
        assert_eq!(out_extent(7, 3, 1).unwrap(), 5);
        assert_eq!(out_extent(9, 9, 4).unwrap(), 1);
        assert!(out_extent(2, 3, 1).is_err());
    }

    #[test]
    fn single_window_covers_all_capsules() {
        let fields = extract_receptive_fields(3, 3, 2, 3, 1).unwrap();
        assert_eq!(fields.len(), 1);
        assert_eq!(fields[0].indices.len(), 18);
        let mut sorted = fields[0].indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn receptive_fields_match_brute_force_enumeration() {
        // every grid with extent <= 8: compare group count and membership
        // against a direct sliding-window enumeration
        for h in 1..=8usize {
            for w in 1..=8usize {
                for c in 1..=2usize {
                    for k in 1..=h.min(w).min(4) {
                        for s in 1..=3usize {
                            let fields = extract_receptive_fields(h, w, c, k, s).unwrap();
                            let mut expected = Vec::new();
                            let mut oy = 0;
                            let mut y = 0;
                            while y + k <= h {
                                let mut ox = 0;
                                let mut x = 0;
                                while x + k <= w {
                                    let mut idx = Vec::new();
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            for ci in 0..c {
                                                idx.push(((y + ky) * w + (x + kx)) * c + ci);
                                            }
                                        }
                                    }
                                    expected.push(ReceptiveField {
                                        out_y: oy,
                                        out_x: ox,
                                        indices: idx,
                                    });
                                    ox += 1;
                                    x += s;
                                }
                                oy += 1;
                                y += s;
                            }
                            assert_eq!(fields, expected, "h={h} w={w} c={c} k={k} s={s}");
                        }
                    }
                }
            }
        }
    }
}
