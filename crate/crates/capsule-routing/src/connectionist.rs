//! Connectionist routing.
//!
//! Compatibility and activation functions are neural networks. An LSTM cell
//! tracks per-input-capsule state across routing iterations: each iteration
//! the cell consumes `concat(mu, c_i, v_i, a_i)` together with its previous
//! state, a network `f` maps the new hidden state to the capsule's
//! compatibility (a per-capsule sigmoid — no normalization across the
//! receptive field; the engine's explicit denominator handles that), and at
//! every iteration a network `g` maps the compatibility-weighted sum of cell
//! states to the output capsule's activation.
//!
//! All weights are shared across input capsules within a layer. State starts
//! at zero, the forget-gate bias at one; other weights are uniform in
//! +-1/sqrt(fan-in). Hidden nonlinearity in `f` and `g` is the rectifier.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::routing::{IterState, RoutingInputs, RoutingProcedure};
use crate::tensor::params::{ParamId, ParamStore, Session};
use crate::tensor::tape::{lstm_cell, Var};
use crate::tensor::{Scalar, Tensor};

fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

/// A small fully connected network: rectifier hidden layers, linear scalar
/// output head (callers apply the sigmoid).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut layers = Vec::new();
        for li in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[li], sizes[li + 1]);
            let w = store.add_param(
                &format!("{prefix}.w{li}"),
                uniform_init(&[fan_in, fan_out], fan_in, rng),
            );
            let b = store.add_param(
                &format!("{prefix}.b{li}"),
                uniform_init(&[fan_out], fan_in, rng),
            );
            layers.push((w, b));
        }
        Mlp { layers, sizes }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// x [N, input] -> [N, 1], pre-sigmoid.
    pub fn forward<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(sess.param(w))?.add(sess.param(b))?;
            if li != last {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// LSTM-driven routing procedure for one layer.
#[derive(Clone, Debug)]
pub struct ConnectionistRouting {
    /// Vote dimensionality D; the cell input is D + 1 + D + 1.
    pub vote_dim: usize,
    /// Hidden/cell state width H.
    pub hidden: usize,
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    f_net: Mlp,
    g_net: Mlp,
}

impl ConnectionistRouting {
    pub fn input_size(&self) -> usize {
        2 * self.vote_dim + 2
    }

    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vote_dim: usize,
        hidden: usize,
        f_hidden: &[usize],
        g_hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input = 2 * vote_dim + 2;
        let wx = store.add_param(
            &format!("{prefix}.lstm.wx"),
            uniform_init(&[input, 4 * hidden], input + hidden, rng),
        );
        let wh = store.add_param(
            &format!("{prefix}.lstm.wh"),
            uniform_init(&[hidden, 4 * hidden], input + hidden, rng),
        );
        // forget-gate bias (second block of H) starts at one
        let mut bias = Tensor::<T>::zeros(&[4 * hidden]);
        for j in 0..hidden {
            bias.data_mut()[hidden + j] = T::one();
        }
        let bias = store.add_param(&format!("{prefix}.lstm.bias"), bias);
        let f_net = Mlp::init(store, &format!("{prefix}.f"), hidden, f_hidden, rng);
        let g_net = Mlp::init(store, &format!("{prefix}.g"), hidden, g_hidden, rng);
        ConnectionistRouting {
            vote_dim,
            hidden,
            wx,
            wh,
            bias,
            f_net,
            g_net,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wx, self.wh, self.bias];
        ids.extend(self.f_net.param_ids());
        ids.extend(self.g_net.param_ids());
        ids
    }
}

impl<T: Scalar> RoutingProcedure<T> for ConnectionistRouting {
    fn name(&self) -> &'static str {
        "connectionist"
    }

    /// State: hidden and cell tensors, both [G*S, H], zero-initialized.
    fn init_state<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        inputs: &RoutingInputs<'g, T>,
    ) -> Result<IterState<'g, T>> {
        let rows = inputs.layout.groups() * inputs.layout.fan_in;
        let h = sess.constant(Tensor::zeros(&[rows, self.hidden]));
        let s = sess.constant(Tensor::zeros(&[rows, self.hidden]));
        Ok(IterState { vars: vec![h, s] })
    }

    fn compatibility<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        inputs: &RoutingInputs<'g, T>,
        c: Var<'g, T>,
        state: &IterState<'g, T>,
        mu: Var<'g, T>,
        _p: Var<'g, T>,
    ) -> Result<(Var<'g, T>, IterState<'g, T>)> {
        let g = inputs.layout.groups();
        let s = inputs.layout.fan_in;
        let d = self.vote_dim;
        let rows = g * s;
        // per-capsule cell input, concatenated in (mu, c, v, a) order
        let mu_rows = mu.expand_axis(1, s)?.reshape(vec![rows, d])?;
        let c_rows = c.reshape(vec![rows, 1])?;
        let v_rows = inputs.votes.reshape(vec![rows, d])?;
        let a_rows = inputs.acts.reshape(vec![rows, 1])?;
        let x = sess
            .tape
            .concat(&[mu_rows, c_rows, v_rows, a_rows], 1)?;
        let out = lstm_cell(
            x,
            state.vars[0],
            state.vars[1],
            sess.param(self.wx),
            sess.param(self.wh),
            sess.param(self.bias),
        )?;
        let h_new = out.narrow(1, 0, self.hidden)?;
        let s_new = out.narrow(1, self.hidden, self.hidden)?;
        let c_new = self
            .f_net
            .forward(sess, h_new)?
            .sigmoid()
            .reshape(vec![g, s])?;
        Ok((
            c_new,
            IterState {
                vars: vec![h_new, s_new],
            },
        ))
    }

    /// p = sigmoid(g(sum_i c_i s_i)) over the current cell states.
    fn activation<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        inputs: &RoutingInputs<'g, T>,
        c: Var<'g, T>,
        state: &IterState<'g, T>,
        _mu: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let g = inputs.layout.groups();
        let s = inputs.layout.fan_in;
        let rows = g * s;
        let cell = state.vars[1]; // [rows, H]
        let weights = c.reshape(vec![rows])?.expand_axis(1, self.hidden)?;
        let weighted = weights
            .mul(cell)?
            .reshape(vec![g, s, self.hidden])?
            .sum_axis(1)?; // [G, H]
        Ok(self
            .g_net
            .forward(sess, weighted)?
            .sigmoid()
            .reshape(vec![g])?)
    }
}
