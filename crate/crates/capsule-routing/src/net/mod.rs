//! Capsule network layers and the assembled classifier.
//!
//! The stack: a strided 5x5 convolution with rectifier and batch
//! normalization, a primary capsule layer (1x1 linear map to 4x4 poses plus
//! a sigmoid activation per capsule), two convolutional capsule layers
//! routed over 3x3 receptive fields with transform weights shared across
//! positions, and a class capsule layer that flattens the final grid into
//! one receptive field per class. Vote transforms divide each 4x4 matrix by
//! its Frobenius norm before multiplying the input pose, so votes are
//! invariant to the scale of the transform weights.

pub mod checkpoint;

use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::connectionist::ConnectionistRouting;
use crate::error::{Error, Result};
use crate::kernels::KernelKind;
use crate::routing::{
    extract_receptive_fields, out_extent, route_groups, GroupLayout, RoutingInputs,
    RoutingProcedure,
};
use crate::similarity::SimilarityRouting;
use crate::tensor::params::{ParamId, ParamStore, Session};
use crate::tensor::tape::{conv2d, vote_transform, Var};
use crate::tensor::{Scalar, Tensor};

pub const POSE_DIM: usize = 16;

/// Zero-mean normal samples (Box-Muller); transform weights only care about
/// direction, so the deviation is simply 1.
fn normal_init<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(T::of(r * theta.cos()));
        if data.len() < n {
            data.push(T::of(r * theta.sin()));
        }
    }
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

fn uniform_fan_in<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

/// Which routing procedure a network uses, with its per-layer
/// hyperparameters (three routed layers: two convolutional, one class).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RoutingSpec {
    Similarity {
        /// Gaussian mixture size per routed layer.
        kernel_q: [usize; 3],
    },
    Connectionist {
        /// LSTM hidden/cell width per routed layer.
        hidden: [usize; 3],
        /// Hidden layer widths of the compatibility network per routed layer.
        f_hidden: [Vec<usize>; 3],
        /// Hidden layer widths of the activation network per routed layer.
        g_hidden: [Vec<usize>; 3],
    },
}

impl RoutingSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RoutingSpec::Similarity { .. } => "similarity",
            RoutingSpec::Connectionist { .. } => "connectionist",
        }
    }

    /// The published similarity configuration: Q = 4, 4, 10.
    pub fn similarity_default() -> Self {
        RoutingSpec::Similarity { kernel_q: [4, 4, 10] }
    }

    /// The published connectionist configuration (H = 16; the 124-wide
    /// activation net is kept as printed).
    pub fn connectionist_default() -> Self {
        RoutingSpec::Connectionist {
            hidden: [16, 16, 16],
            f_hidden: [vec![], vec![32, 32], vec![64, 64]],
            g_hidden: [vec![], vec![64, 64], vec![124, 124]],
        }
    }

    /// Shrunken networks for finite-difference verification.
    pub fn connectionist_tiny() -> Self {
        RoutingSpec::Connectionist {
            hidden: [3, 3, 3],
            f_hidden: [vec![], vec![4], vec![4]],
            g_hidden: [vec![], vec![4], vec![4]],
        }
    }

    pub fn similarity_tiny() -> Self {
        RoutingSpec::Similarity { kernel_q: [2, 2, 2] }
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Square input extent (images are input_hw x input_hw x 1).
    pub input_hw: usize,
    pub classes: usize,
    pub conv_channels: usize,
    pub primary_channels: usize,
    /// Output channels of the two convolutional capsule layers.
    pub caps_channels: [usize; 2],
    /// (kernel, stride) of the two convolutional capsule layers.
    pub caps_kernels: [(usize, usize); 2],
    pub routing: RoutingSpec,
    pub iterations: usize,
}

impl NetworkConfig {
    /// The published smallNORB-scale architecture.
    pub fn canonical(classes: usize, routing: RoutingSpec) -> Self {
        NetworkConfig {
            input_hw: 32,
            classes,
            conv_channels: 64,
            primary_channels: 8,
            caps_channels: [16, 16],
            caps_kernels: [(3, 2), (3, 1)],
            routing,
            iterations: 3,
        }
    }

    /// Desk-scale configuration: conv 32, 4 primary channels, 8 channels in
    /// each convolutional capsule layer.
    pub fn reduced(classes: usize, routing: RoutingSpec) -> Self {
        NetworkConfig {
            conv_channels: 32,
            primary_channels: 4,
            caps_channels: [8, 8],
            ..Self::canonical(classes, routing)
        }
    }

    /// Minimal configuration for 64-bit gradient verification. The class
    /// layer's receptive field keeps three channels so no routed group
    /// degenerates to a symmetric two-vote tie.
    pub fn tiny(routing: RoutingSpec) -> Self {
        NetworkConfig {
            input_hw: 16,
            classes: 2,
            conv_channels: 4,
            primary_channels: 2,
            caps_channels: [3, 3],
            caps_kernels: [(3, 2), (3, 1)],
            routing,
            iterations: 3,
        }
    }
}

/// TensorFlow-style SAME padding for stride-s convolution.
fn same_pad(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (total / 2, total - total / 2)
}

struct ConvBnLayer {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
    stride: usize,
    pad: (usize, usize),
    out_hw: usize,
    channels: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

struct PrimaryLayer {
    w: ParamId,
    b: ParamId,
    channels: usize,
}

struct ConvCapsLayer {
    weights: ParamId,
    kernel: usize,
    stride: usize,
    ch_in: usize,
    ch_out: usize,
    in_hw: usize,
    out_hw: usize,
    router: Router,
}

struct ClassCapsLayer {
    weights: ParamId,
    fan_in: usize,
    classes: usize,
    router: Router,
}

pub enum Router {
    Similarity(SimilarityRouting),
    Connectionist(ConnectionistRouting),
}

impl Router {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &RoutingSpec,
        layer_index: usize,
        channels: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match spec {
            RoutingSpec::Similarity { kernel_q } => Router::Similarity(SimilarityRouting::init(
                store,
                prefix,
                channels,
                fan_in,
                KernelKind::GaussianMixture {
                    q: kernel_q[layer_index],
                },
            )),
            RoutingSpec::Connectionist {
                hidden,
                f_hidden,
                g_hidden,
            } => Router::Connectionist(ConnectionistRouting::init(
                store,
                prefix,
                POSE_DIM,
                hidden[layer_index],
                &f_hidden[layer_index],
                &g_hidden[layer_index],
                rng,
            )),
        }
    }

    fn procedure<T: Scalar>(&self) -> &dyn RoutingProcedure<T> {
        match self {
            Router::Similarity(s) => s,
            Router::Connectionist(c) => c,
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Router::Similarity(s) => s.param_ids(),
            Router::Connectionist(c) => c.param_ids(),
        }
    }
}

/// A capsule grid on the tape: row-major (batch, y, x, channel) rows.
pub struct GridVars<'g, T: Scalar> {
    /// [rows, 16]
    pub poses: Var<'g, T>,
    /// [rows]
    pub acts: Var<'g, T>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Network output for one forward pass.
pub struct NetworkOutput<'g, T: Scalar> {
    /// [B, O] class activations (the classification scores).
    pub class_activations: Var<'g, T>,
    /// [B*O, 16] class poses.
    pub class_poses: Var<'g, T>,
}

/// One row of the architecture trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub layer: String,
    pub details: String,
    pub output_shape: Vec<usize>,
}

pub struct Network<T: Scalar> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    conv: ConvBnLayer,
    primary: PrimaryLayer,
    caps: Vec<ConvCapsLayer>,
    class: ClassCapsLayer,
    routing_param_ids: HashSet<usize>,
}

impl<T: Scalar> Network<T> {
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        use rand_chacha::rand_core::SeedableRng;
        if config.classes < 2 || config.iterations == 0 && false {
            return Err(Error::InvalidArgument {
                what: "network needs at least two classes".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<T>::new();

        // initial convolution: K=5, S=2, SAME padding
        let (k, s) = (5usize, 2usize);
        let conv_out = config.input_hw.div_ceil(s);
        if config.input_hw < k {
            return Err(Error::InvalidArgument {
                what: format!("input extent {} below the 5x5 first kernel", config.input_hw),
            });
        }
        let cc = config.conv_channels;
        let conv = ConvBnLayer {
            w: store.add_param(
                "conv1.weight",
                uniform_fan_in(&[k, k, 1, cc], k * k, &mut rng),
            ),
            b: store.add_param("conv1.bias", Tensor::zeros(&[cc])),
            gamma: store.add_param("bn1.gamma", Tensor::ones(&[cc])),
            beta: store.add_param("bn1.beta", Tensor::zeros(&[cc])),
            run_mean: store.add_buffer("bn1.running_mean", Tensor::zeros(&[cc])),
            run_var: store.add_buffer("bn1.running_var", Tensor::ones(&[cc])),
            stride: s,
            pad: same_pad(config.input_hw, k, s),
            out_hw: conv_out,
            channels: cc,
        };

        let pc = config.primary_channels;
        let primary = PrimaryLayer {
            w: store.add_param(
                "primary.weight",
                uniform_fan_in(&[cc, pc * (POSE_DIM + 1)], cc, &mut rng),
            ),
            b: store.add_param("primary.bias", Tensor::zeros(&[pc * (POSE_DIM + 1)])),
            channels: pc,
        };

        let mut routing_param_ids = HashSet::new();
        let mut caps = Vec::new();
        let mut hw = conv_out;
        let mut ch_in = pc;
        for li in 0..2 {
            let (ck, cs) = config.caps_kernels[li];
            let ch_out = config.caps_channels[li];
            let out_hw = out_extent(hw, ck, cs)?;
            let fan_in = ck * ck * ch_in;
            let name = format!("caps{}", li + 1);
            let weights = store.add_param(
                &format!("{name}.transform"),
                normal_init(&[ch_out, fan_in, POSE_DIM], &mut rng),
            );
            let router = Router::init(
                &mut store,
                &format!("{name}.routing"),
                &config.routing,
                li,
                ch_out,
                fan_in,
                &mut rng,
            );
            for id in router.param_ids() {
                routing_param_ids.insert(id.0);
            }
            caps.push(ConvCapsLayer {
                weights,
                kernel: ck,
                stride: cs,
                ch_in,
                ch_out,
                in_hw: hw,
                out_hw,
                router,
            });
            hw = out_hw;
            ch_in = ch_out;
        }

        let fan_in = hw * hw * ch_in;
        let class_weights = store.add_param(
            "class.transform",
            normal_init(&[config.classes, fan_in, POSE_DIM], &mut rng),
        );
        let class_router = Router::init(
            &mut store,
            "class.routing",
            &config.routing,
            2,
            config.classes,
            fan_in,
            &mut rng,
        );
        for id in class_router.param_ids() {
            routing_param_ids.insert(id.0);
        }
        let class = ClassCapsLayer {
            weights: class_weights,
            fan_in,
            classes: config.classes,
            router: class_router,
        };

        Ok(Network {
            config,
            store,
            conv,
            primary,
            caps,
            class,
            routing_param_ids,
        })
    }

    /// Forward pass over a batch of images [B, H, W, 1].
    pub fn forward<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        images: Var<'g, T>,
    ) -> Result<NetworkOutput<'g, T>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.config.input_hw || shape[2] != self.config.input_hw
        {
            return Err(Error::ShapeMismatch {
                op: "network_forward",
                lhs: shape,
                rhs: vec![0, self.config.input_hw, self.config.input_hw, 1],
            });
        }
        let batch = shape[0];
        let grid = self.primary_forward(sess, images)?;
        let mut grid = grid;
        for layer in &self.caps {
            grid = self.conv_caps_forward(sess, layer, grid)?;
        }
        self.class_forward(sess, grid, batch)
    }

    fn primary_forward<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        images: Var<'g, T>,
    ) -> Result<GridVars<'g, T>> {
        let batch = images.shape()[0];
        let conv = &self.conv;
        let features = conv2d(
            images,
            sess.param(conv.w),
            sess.param(conv.b),
            conv.stride,
            conv.pad,
        )?
        .relu();
        let rows = batch * conv.out_hw * conv.out_hw;
        let flat = features.reshape(vec![rows, conv.channels])?;
        let normed = self.batch_norm(sess, flat)?;

        let pc = self.primary.channels;
        let mapped = normed
            .matmul(sess.param(self.primary.w))?
            .add(sess.param(self.primary.b))?
            .reshape(vec![rows * pc, POSE_DIM + 1])?;
        let poses = mapped.narrow(1, 0, POSE_DIM)?;
        let acts = mapped
            .narrow(1, POSE_DIM, 1)?
            .sigmoid()
            .reshape(vec![rows * pc])?;
        Ok(GridVars {
            poses,
            acts,
            batch,
            height: conv.out_hw,
            width: conv.out_hw,
            channels: pc,
        })
    }

    /// Per-channel batch normalization over [N, C] rows. Training mode uses
    /// batch statistics and records them for the running-average update at
    /// the synchronization point; inference mode is the frozen affine map.
    fn batch_norm<'g>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let conv = &self.conv;
        let eps = T::of(BN_EPS);
        let (mean, var) = if sess.train_mode() {
            let mean = x.mean_axis(0)?;
            let centered = x.sub(mean)?;
            let var = centered.mul(centered)?.mean_axis(0)?;
            sess.record_batch_stat(conv.run_mean, mean.value());
            sess.record_batch_stat(conv.run_var, var.value());
            (mean, var)
        } else {
            (sess.param(conv.run_mean), sess.param(conv.run_var))
        };
        let std = var.add_const(eps).sqrt()?;
        x.sub(mean)?
            .div(std)?
            .mul(sess.param(conv.gamma))?
            .add(sess.param(conv.beta))
    }

    fn conv_caps_forward<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        layer: &ConvCapsLayer,
        grid: GridVars<'g, T>,
    ) -> Result<GridVars<'g, T>> {
        debug_assert_eq!(grid.height, layer.in_hw);
        debug_assert_eq!(grid.channels, layer.ch_in);
        let fields =
            extract_receptive_fields(grid.height, grid.width, grid.channels, layer.kernel, layer.stride)?;
        let positions = fields.len();
        let slots = layer.kernel * layer.kernel * layer.ch_in;
        let per_sample = grid.height * grid.width * grid.channels;
        let mut indices = Vec::with_capacity(grid.batch * positions * slots);
        for b in 0..grid.batch {
            let base = b * per_sample;
            for f in &fields {
                indices.extend(f.indices.iter().map(|&i| base + i));
            }
        }
        let indices = Rc::new(indices);
        let patches = grid
            .poses
            .gather_rows(Rc::clone(&indices))?
            .reshape(vec![grid.batch * positions, slots, POSE_DIM])?;
        let acts = grid
            .acts
            .gather_rows(indices)?
            .reshape(vec![grid.batch * positions, slots])?
            .expand_axis(1, layer.ch_out)?
            .reshape(vec![grid.batch * positions * layer.ch_out, slots])?;
        let votes = vote_transform(sess.param(layer.weights), patches)?.reshape(vec![
            grid.batch * positions * layer.ch_out,
            slots,
            POSE_DIM,
        ])?;
        let inputs = RoutingInputs {
            votes,
            acts,
            layout: GroupLayout {
                outer: grid.batch * positions,
                channels: layer.ch_out,
                fan_in: slots,
            },
        };
        let routed = route_groups(sess, &inputs, layer.router.procedure(), self.config.iterations)?;
        Ok(GridVars {
            poses: routed.poses,
            acts: routed.activations,
            batch: grid.batch,
            height: layer.out_hw,
            width: layer.out_hw,
            channels: layer.ch_out,
        })
    }

    fn class_forward<'g>(
        &self,
        sess: &Session<'g, '_, T>,
        grid: GridVars<'g, T>,
        batch: usize,
    ) -> Result<NetworkOutput<'g, T>> {
        let layer = &self.class;
        let n_in = grid.height * grid.width * grid.channels;
        debug_assert_eq!(n_in, layer.fan_in);
        let patches = grid.poses.reshape(vec![batch, n_in, POSE_DIM])?;
        let acts = grid
            .acts
            .reshape(vec![batch, n_in])?
            .expand_axis(1, layer.classes)?
            .reshape(vec![batch * layer.classes, n_in])?;
        let votes = vote_transform(sess.param(layer.weights), patches)?.reshape(vec![
            batch * layer.classes,
            n_in,
            POSE_DIM,
        ])?;
        let inputs = RoutingInputs {
            votes,
            acts,
            layout: GroupLayout {
                outer: batch,
                channels: layer.classes,
                fan_in: n_in,
            },
        };
        let routed = route_groups(sess, &inputs, layer.router.procedure(), self.config.iterations)?;
        Ok(NetworkOutput {
            class_activations: routed.activations.reshape(vec![batch, layer.classes])?,
            class_poses: routed.poses,
        })
    }

    /// Fold batch statistics observed by one or more sessions into the
    /// running mean/variance buffers.
    pub fn apply_batch_stats(&mut self, stats: &[(ParamId, Tensor<T>)]) {
        // average per buffer first, then one momentum step
        let mut sums: Vec<(ParamId, Tensor<T>, usize)> = Vec::new();
        for (id, value) in stats {
            match sums.iter_mut().find(|(i, _, _)| i == id) {
                Some((_, acc, count)) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(value.data()) {
                        *a = *a + b;
                    }
                    *count += 1;
                }
                None => sums.push((*id, value.clone(), 1)),
            }
        }
        let momentum = T::of(BN_MOMENTUM);
        for (id, sum, count) in sums {
            let scale = T::one() / T::of(count as f64);
            let mut updated = self.store.value(id).clone();
            for (r, &s) in updated.data_mut().iter_mut().zip(sum.data()) {
                *r = momentum * *r + (T::one() - momentum) * s * scale;
            }
            self.store.set_value(id, updated);
        }
    }

    /// Trainable parameter count excluding every routing-procedure
    /// parameter (kernel theta, lambda/beta, LSTM and network weights).
    pub fn non_routing_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(id, e)| {
                e.kind == crate::tensor::params::ParamKind::Param
                    && !self.routing_param_ids.contains(&id.0)
            })
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Per-tensor breakdown of the non-routing parameters.
    pub fn parameter_audit(&self) -> Vec<(String, usize)> {
        self.store
            .iter()
            .filter(|(id, e)| {
                e.kind == crate::tensor::params::ParamKind::Param
                    && !self.routing_param_ids.contains(&id.0)
            })
            .map(|(_, e)| (e.name.clone(), e.value.numel()))
            .collect()
    }

    /// Architecture trace mirroring the model table: one row per layer with
    /// its full output shape for batch size `b`.
    pub fn shape_trace(&self, b: usize) -> Vec<TraceRow> {
        let c = &self.config;
        let mut rows = vec![
            TraceRow {
                layer: "Input".into(),
                details: String::new(),
                output_shape: vec![b, c.input_hw, c.input_hw, 1],
            },
            TraceRow {
                layer: "Convolutional layer + relu + BatchNorm".into(),
                details: format!("K=5, S=2, Ch={}", c.conv_channels),
                output_shape: vec![b, self.conv.out_hw, self.conv.out_hw, c.conv_channels],
            },
            TraceRow {
                layer: "Primary Capsules".into(),
                details: format!("K=1, S=1, Ch={}", c.primary_channels),
                output_shape: vec![
                    b,
                    self.conv.out_hw,
                    self.conv.out_hw,
                    c.primary_channels,
                    POSE_DIM + 1,
                ],
            },
        ];
        for (i, layer) in self.caps.iter().enumerate() {
            rows.push(TraceRow {
                layer: format!("Convolutional Capsule Layer {}", i + 1),
                details: format!(
                    "K={}, S={}, Ch={}",
                    layer.kernel, layer.stride, layer.ch_out
                ),
                output_shape: vec![b, layer.out_hw, layer.out_hw, layer.ch_out, POSE_DIM + 1],
            });
        }
        rows.push(TraceRow {
            layer: "Capsule Class Layer".into(),
            details: format!("flatten, O={}", self.class.classes),
            output_shape: vec![b, 1, 1, self.class.classes, POSE_DIM + 1],
        });
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_images(b: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![b, hw, hw, 1],
            (0..b * hw * hw).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn vote_transform_identity_halves_the_pose() {
        // ||I4||_F = 2, so the identity transform emits P/2
        let tape = Tape::<f64>::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let pose: Vec<f64> = (0..16).map(|_| r.gen_range(-2.0..2.0)).collect();
        let w = tape.leaf(Tensor::from_vec(vec![1, 1, 16], Tensor::<f64>::eye4().into_data()).unwrap());
        let p = tape.leaf(Tensor::from_vec(vec![1, 1, 16], pose.clone()).unwrap());
        let v = vote_transform(w, p).unwrap().value();
        for i in 0..16 {
            assert!((v.data()[i] - pose[i] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vote_transform_is_scale_invariant() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let wdata: Vec<f64> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
        let pdata: Vec<f64> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
        let run = |scale: f64| {
            let tape = Tape::<f64>::new();
            let w = tape.leaf(
                Tensor::from_vec(vec![1, 2, 16], wdata.iter().map(|&x| x * scale).collect())
                    .unwrap(),
            );
            let p = tape.leaf(Tensor::from_vec(vec![1, 2, 16], pdata.clone()).unwrap());
            vote_transform(w, p).unwrap().value()
        };
        let base = run(1.0);
        for scale in [0.1, 3.0, 100.0] {
            let scaled = run(scale);
            for (a, b) in base.data().iter().zip(scaled.data()) {
                assert!((a - b).abs() < 1e-6, "scale {scale}");
            }
        }
    }

    #[test]
    fn vote_transform_matches_plain_normalized_product() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let wdata: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let pdata: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_vec(vec![1, 1, 16], wdata.clone()).unwrap());
        let p = tape.leaf(Tensor::from_vec(vec![1, 1, 16], pdata.clone()).unwrap());
        let got = vote_transform(w, p).unwrap().value();
        // independent high-precision route: normalize then multiply
        let norm: f64 = wdata.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wdata[i * 4 + k] / norm * pdata[k * 4 + j];
                }
                assert!((got.data()[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_reproduces_halving() {
        assert_eq!(same_pad(32, 5, 2), (1, 2));
        assert_eq!(out_extent(32 + 3, 5, 2).unwrap(), 16);
        assert_eq!(same_pad(14, 5, 2), (1, 2));
    }

    #[test]
    fn canonical_shape_trace_matches_model_table() {
        let net =
            Network::<f32>::build(NetworkConfig::canonical(5, RoutingSpec::similarity_default()), 1)
                .unwrap();
        let trace = net.shape_trace(7);
        let shapes: Vec<Vec<usize>> = trace.iter().map(|r| r.output_shape.clone()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![7, 32, 32, 1],
                vec![7, 16, 16, 64],
                vec![7, 16, 16, 8, 17],
                vec![7, 7, 7, 16, 17],
                vec![7, 5, 5, 16, 17],
                vec![7, 1, 1, 5, 17],
            ]
        );
    }

    #[test]
    fn forward_shapes_follow_the_trace() {
        for spec in [RoutingSpec::similarity_tiny(), RoutingSpec::connectionist_tiny()] {
            let net = Network::<f64>::build(NetworkConfig::tiny(spec), 2).unwrap();
            let tape = Tape::new();
            let sess = Session::new(&tape, &net.store, true);
            let images = tape.constant(random_images(2, 16, 3));
            let out = net.forward(&sess, images).unwrap();
            assert_eq!(out.class_activations.shape(), vec![2, 2]);
            assert_eq!(out.class_poses.shape(), vec![4, 16]);
            let acts = out.class_activations.value();
            assert!(acts.data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn parameter_audit_matches_hand_arithmetic() {
        // canonical smallNORB configuration, non-routing parameters:
        //   conv 5*5*1*64 + 64, bn 2*64, primary 64*136 + 136,
        //   caps1 16*72*16, caps2 16*144*16, class 5*400*16
        let net =
            Network::<f32>::build(NetworkConfig::canonical(5, RoutingSpec::similarity_default()), 4)
                .unwrap();
        let want = 1600 + 64 + 128 + (64 * 136 + 136) + 16 * 72 * 16 + 16 * 144 * 16
            + 5 * 400 * 16;
        assert_eq!(net.non_routing_param_count(), want);
        assert_eq!(want, 97_928);
        // primary-layer weight block alone: 64 x 17 x 8 (+ 17 x 8 biases)
        let audit = net.parameter_audit();
        let primary_w = audit.iter().find(|(n, _)| n == "primary.weight").unwrap();
        assert_eq!(primary_w.1, 64 * 17 * 8);
    }

    #[test]
    fn zero_primary_weights_give_half_activations_and_zero_poses() {
        let mut net =
            Network::<f64>::build(NetworkConfig::tiny(RoutingSpec::similarity_tiny()), 5).unwrap();
        let wid = net.store.id_of("primary.weight").unwrap();
        let bid = net.store.id_of("primary.bias").unwrap();
        let wshape = net.store.value(wid).shape().to_vec();
        let bshape = net.store.value(bid).shape().to_vec();
        net.store.set_value(wid, Tensor::zeros(&wshape));
        net.store.set_value(bid, Tensor::zeros(&bshape));
        let tape = Tape::new();
        let sess = Session::new(&tape, &net.store, true);
        let images = tape.constant(random_images(1, 16, 6));
        let grid = net.primary_forward(&sess, images).unwrap();
        let acts = grid.acts.value();
        for &a in acts.data() {
            assert!((a - 0.5).abs() < 1e-12);
        }
        assert!(grid.poses.value().data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn batch_norm_in_inference_mode_is_affine_and_deterministic() {
        let mut net =
            Network::<f64>::build(NetworkConfig::tiny(RoutingSpec::similarity_tiny()), 7).unwrap();
        // give the running stats distinctive values
        let rm = net.store.id_of("bn1.running_mean").unwrap();
        let rv = net.store.id_of("bn1.running_var").unwrap();
        net.store
            .set_value(rm, Tensor::filled(&[4], 0.3));
        net.store
            .set_value(rv, Tensor::filled(&[4], 2.0));
        let run = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let sess = Session::new(&tape, &net.store, false);
            let v = net.batch_norm(&sess, tape.constant(x.clone())).unwrap();
            v.value()
        };
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_vec(vec![6, 4], (0..24).map(|_| r.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let y = Tensor::from_vec(vec![6, 4], (0..24).map(|_| r.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let fx = run(&x);
        let fy = run(&y);
        let fx2 = run(&x);
        // bitwise deterministic
        for (a, b) in fx.data().iter().zip(fx2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // affine: f(x) - f(y) = (x - y) * scale with a per-channel scale
        let scale = 1.0 / (2.0f64 + BN_EPS).sqrt();
        for i in 0..24 {
            let want = (x.data()[i] - y.data()[i]) * scale;
            assert!((fx.data()[i] - fy.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // dead-path audit on a tiny f64 config, one backward pass
        for spec in [RoutingSpec::similarity_tiny(), RoutingSpec::connectionist_tiny()] {
            let net = Network::<f64>::build(NetworkConfig::tiny(spec.clone()), 9).unwrap();
            let tape = Tape::new();
            let sess = Session::new(&tape, &net.store, true);
            let images = tape.constant(random_images(2, 16, 10));
            let out = net.forward(&sess, images).unwrap();
            // pull every output into the loss so class poses matter too
            let loss = out
                .class_activations
                .sum_all()
                .add(out.class_poses.mul(out.class_poses).unwrap().sum_all())
                .unwrap();
            let grads = tape.backward(loss).unwrap();
            let collected = sess.param_grads(&grads);
            let got: std::collections::HashMap<usize, &Tensor<f64>> =
                collected.iter().map(|(id, g)| (id.0, g)).collect();
            for (id, entry) in net.store.iter() {
                if entry.kind != crate::tensor::params::ParamKind::Param {
                    continue;
                }
                let g = got.get(&id.0).unwrap_or_else(|| {
                    panic!("parameter {} missing from gradients ({})", entry.name, spec.name())
                });
                assert!(
                    g.data().iter().any(|&x| x != 0.0),
                    "parameter {} has an all-zero gradient ({})",
                    entry.name,
                    spec.name()
                );
            }
        }
    }

    #[test]
    fn batch_stats_fold_into_running_buffers() {
        let mut net =
            Network::<f64>::build(NetworkConfig::tiny(RoutingSpec::similarity_tiny()), 11).unwrap();
        let rm = net.store.id_of("bn1.running_mean").unwrap();
        let before = net.store.value(rm).clone();
        let stats = vec![
            (rm, Tensor::filled(&[4], 1.0)),
            (rm, Tensor::filled(&[4], 3.0)),
        ];
        net.apply_batch_stats(&stats);
        let after = net.store.value(rm);
        // momentum 0.9 toward the shard average of 2.0
        for (b, a) in before.data().iter().zip(after.data()) {
            assert!((a - (0.9 * b + 0.1 * 2.0)).abs() < 1e-12);
        }
    }
}
