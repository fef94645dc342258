//! Stacked bidirectional LSTM with a linear output layer, its forward pass and
//! exact gradients by backpropagation through time.
//!
//! Each direction uses the standard peephole-free cell with gate order
//! input, forget, cell candidate, output:
//!
//! ```text
//! a_t = W_in x_t + W_rec h_{t-1} + b
//! i, f, o = σ(a_i), σ(a_f), σ(a_o);  g = tanh(a_g)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```
//!
//! The backward direction runs the same recursion from the last frame to the
//! first. Layer `l + 1` sees `[h_f ‖ h_b]` of layer `l`; the top layer feeds a
//! linear projection to one activation per output class.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::ctc::PosteriorGram;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::{sigmoid, Matrix, Rng};

/// Number of gate blocks stacked in each weight matrix.
pub const GATES: usize = 4;

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.1;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn time_index(self, step: usize, len: usize) -> usize {
        match self {
            Direction::Forward => step,
            Direction::Backward => len - 1 - step,
        }
    }
}

/// One direction of one layer: `w_in` is `4H × in`, `w_rec` is `4H × H`,
/// `bias` is `4H × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirectionParams {
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub bias: Matrix,
}

impl LstmDirectionParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmDirectionParams {
            w_in: Matrix::zeros(GATES * hidden, input_dim),
            w_rec: Matrix::zeros(GATES * hidden, hidden),
            bias: Matrix::zeros(GATES * hidden, 1),
        }
    }

    pub fn random(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        LstmDirectionParams {
            w_in: Matrix::random_uniform(GATES * hidden, input_dim, -INIT_RANGE, INIT_RANGE, rng),
            w_rec: Matrix::random_uniform(GATES * hidden, hidden, -INIT_RANGE, INIT_RANGE, rng),
            bias: Matrix::random_uniform(GATES * hidden, 1, -INIT_RANGE, INIT_RANGE, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_rec.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        let rows = GATES * h;
        for (m, cols) in [(&self.w_in, self.input_dim()), (&self.w_rec, h), (&self.bias, 1)] {
            if m.shape() != (rows, cols) {
                return Err(Error::DimensionMismatch {
                    context: "LSTM parameter block",
                    expected: rows * cols,
                    found: m.rows() * m.cols(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    pub forward: LstmDirectionParams,
    pub backward: LstmDirectionParams,
}

impl LstmLayerParams {
    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }
}

/// Parameters of the whole network. Every mutation through this API gives
/// the value a fresh generation so caches from earlier forward passes are
/// recognised as stale.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    layers: Vec<LstmLayerParams>,
    out_w: Matrix,
    out_b: Matrix,
    generation: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.out_w == other.out_w && self.out_b == other.out_b
    }
}

/// Layer sizes of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub classes: usize,
}

impl NetworkParams {
    pub fn new(layers: Vec<LstmLayerParams>, out_w: Matrix, out_b: Matrix) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network has no LSTM layers"));
        }
        let mut expected_in = layers[0].input_dim();
        for layer in &layers {
            layer.forward.check()?;
            layer.backward.check()?;
            if layer.input_dim() != expected_in || layer.backward.input_dim() != expected_in {
                return Err(Error::DimensionMismatch {
                    context: "LSTM layer input",
                    expected: expected_in,
                    found: layer.input_dim(),
                });
            }
            if layer.backward.hidden() != layer.hidden() {
                return Err(Error::DimensionMismatch {
                    context: "backward direction hidden size",
                    expected: layer.hidden(),
                    found: layer.backward.hidden(),
                });
            }
            expected_in = layer.output_dim();
        }
        if out_w.cols() != expected_in || out_b.shape() != (out_w.rows(), 1) {
            return Err(Error::DimensionMismatch {
                context: "output projection",
                expected: expected_in,
                found: out_w.cols(),
            });
        }
        Ok(NetworkParams {
            layers,
            out_w,
            out_b,
            generation: next_generation(),
        })
    }

    /// Every parameter uniform in `[−0.1, 0.1]`.
    pub fn random(topology: Topology, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(topology.layers);
        let mut input = topology.input_dim;
        for _ in 0..topology.layers {
            layers.push(LstmLayerParams {
                forward: LstmDirectionParams::random(input, topology.hidden, rng),
                backward: LstmDirectionParams::random(input, topology.hidden, rng),
            });
            input = 2 * topology.hidden;
        }
        let out_w = Matrix::random_uniform(topology.classes, input, -INIT_RANGE, INIT_RANGE, rng);
        let out_b = Matrix::random_uniform(topology.classes, 1, -INIT_RANGE, INIT_RANGE, rng);
        Self::new(layers, out_w, out_b)
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| LstmLayerParams {
                forward: LstmDirectionParams::zeros(l.input_dim(), l.hidden()),
                backward: LstmDirectionParams::zeros(l.input_dim(), l.hidden()),
            })
            .collect();
        NetworkParams {
            layers,
            out_w: Matrix::zeros(self.out_w.rows(), self.out_w.cols()),
            out_b: Matrix::zeros(self.out_b.rows(), 1),
            generation: next_generation(),
        }
    }

    pub fn topology(&self) -> Topology {
        Topology {
            input_dim: self.input_dim(),
            hidden: self.layers[0].hidden(),
            layers: self.layers.len(),
            classes: self.classes(),
        }
    }

    pub fn layers(&self) -> &[LstmLayerParams] {
        &self.layers
    }

    pub fn output_weights(&self) -> (&Matrix, &Matrix) {
        (&self.out_w, &self.out_b)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn classes(&self) -> usize {
        self.out_w.rows()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (tag, dir) in [("fwd", &layer.forward), ("bwd", &layer.backward)] {
                out.push((format!("lstm{l}.{tag}.w_in"), &dir.w_in));
                out.push((format!("lstm{l}.{tag}.w_rec"), &dir.w_rec));
                out.push((format!("lstm{l}.{tag}.bias"), &dir.bias));
            }
        }
        out.push(("out.w".to_string(), &self.out_w));
        out.push(("out.b".to_string(), &self.out_b));
        out
    }

    /// Mutable blocks in the same order as [`blocks`](Self::blocks).
    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.generation = next_generation();
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for dir in [&mut layer.forward, &mut layer.backward] {
                out.push(&mut dir.w_in);
                out.push(&mut dir.w_rec);
                out.push(&mut dir.bias);
            }
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    /// Rebuilds a network from blocks named as in [`blocks`](Self::blocks).
    pub fn from_blocks(blocks: Vec<(String, Matrix)>) -> Result<Self> {
        let mut map: std::collections::BTreeMap<String, Matrix> = blocks.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::format("MODL", format!("missing block `{name}`")))
        };
        let mut layers = Vec::new();
        let mut l = 0;
        loop {
            let prefix = format!("lstm{l}");
            let Ok(w_in) = take(&format!("{prefix}.fwd.w_in")) else {
                break;
            };
            let forward = LstmDirectionParams {
                w_in,
                w_rec: take(&format!("{prefix}.fwd.w_rec"))?,
                bias: take(&format!("{prefix}.fwd.bias"))?,
            };
            let backward = LstmDirectionParams {
                w_in: take(&format!("{prefix}.bwd.w_in"))?,
                w_rec: take(&format!("{prefix}.bwd.w_rec"))?,
                bias: take(&format!("{prefix}.bwd.bias"))?,
            };
            layers.push(LstmLayerParams { forward, backward });
            l += 1;
        }
        let out_w = take("out.w")?;
        let out_b = take("out.b")?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::format("MODL", format!("unexpected block `{extra}`")));
        }
        Self::new(layers, out_w, out_b)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.blocks().iter().map(|(_, m)| m.sum_squares()).sum()
    }

    /// Swaps the forward and backward parameters of every layer.
    pub fn swap_directions(&mut self) {
        self.generation = next_generation();
        for layer in &mut self.layers {
            std::mem::swap(&mut layer.forward, &mut layer.backward);
        }
    }
}

/// Activations of one direction, stored in processing order.
#[derive(Clone, Debug)]
pub struct DirectionCache {
    direction: Direction,
    /// activated gates `[i, f, g, o]`, one row per step
    gates: Matrix,
    cells: Matrix,
    hidden: Matrix,
}

/// Runs one direction over `inputs` (`T × in`), returning hidden states in
/// time order (`T × H`).
pub fn lstm_direction_forward(
    params: &LstmDirectionParams,
    inputs: &Matrix,
    direction: Direction,
) -> Result<(Matrix, DirectionCache)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "LSTM input",
            expected: params.input_dim(),
            found: inputs.cols(),
        });
    }
    let len = inputs.rows();
    let h = params.hidden();
    let mut gates = Matrix::zeros(len, GATES * h);
    let mut cells = Matrix::zeros(len, h);
    let mut hidden = Matrix::zeros(len, h);
    let mut out = Matrix::zeros(len, h);
    let zeros = vec![0.0; h];
    let mut pre = vec![0.0; GATES * h];

    for step in 0..len {
        let t = direction.time_index(step, len);
        pre.copy_from_slice(params.bias.as_slice());
        params.w_in.matvec_acc(inputs.row(t), &mut pre);
        let (h_prev, c_prev) = if step == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (hidden.row(step - 1), cells.row(step - 1))
        };
        params.w_rec.matvec_acc(h_prev, &mut pre);

        let g_row = gates.row_mut(step);
        for j in 0..h {
            g_row[j] = sigmoid(pre[j]);
            g_row[h + j] = sigmoid(pre[h + j]);
            g_row[2 * h + j] = pre[2 * h + j].tanh();
            g_row[3 * h + j] = sigmoid(pre[3 * h + j]);
        }
        let mut c_new = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for j in 0..h {
            c_new[j] = g_row[h + j] * c_prev[j] + g_row[j] * g_row[2 * h + j];
            h_new[j] = g_row[3 * h + j] * c_new[j].tanh();
        }
        cells.row_mut(step).copy_from_slice(&c_new);
        hidden.row_mut(step).copy_from_slice(&h_new);
        out.row_mut(t).copy_from_slice(&h_new);
    }
    Ok((
        out,
        DirectionCache {
            direction,
            gates,
            cells,
            hidden,
        },
    ))
}

/// BPTT through one direction. `d_out` holds loss gradients of the hidden
/// states in time order; gradients are accumulated into `grads`, and the
/// gradient with respect to the inputs is accumulated into `d_inputs`.
fn lstm_direction_backward(
    params: &LstmDirectionParams,
    cache: &DirectionCache,
    inputs: &Matrix,
    d_out: &Matrix,
    grads: &mut LstmDirectionParams,
    d_inputs: &mut Matrix,
) {
    let len = inputs.rows();
    let h = params.hidden();
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; GATES * h];
    let zeros = vec![0.0; h];

    for step in (0..len).rev() {
        let t = cache.direction.time_index(step, len);
        let g_row = cache.gates.row(step);
        let c = cache.cells.row(step);
        let (h_prev, c_prev) = if step == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (cache.hidden.row(step - 1), cache.cells.row(step - 1))
        };
        let d_ext = d_out.row(t);
        for j in 0..h {
            let (i, f, g, o) = (g_row[j], g_row[h + j], g_row[2 * h + j], g_row[3 * h + j]);
            let tc = c[j].tanh();
            let dh = d_ext[j] + dh_next[j];
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            da[j] = dc * g * i * (1.0 - i);
            da[h + j] = dc * c_prev[j] * f * (1.0 - f);
            da[2 * h + j] = dc * i * (1.0 - g * g);
            da[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        grads.w_in.add_outer(&da, inputs.row(t));
        grads.w_rec.add_outer(&da, h_prev);
        for (b, d) in grads.bias.as_mut_slice().iter_mut().zip(&da) {
            *b += d;
        }
        params.w_in.matvec_t_acc(&da, d_inputs.row_mut(t));
        dh_next.fill(0.0);
        params.w_rec.matvec_t_acc(&da, &mut dh_next);
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    /// input to each layer; the last entry is the input to the output projection
    layer_inputs: Vec<Matrix>,
    directions: Vec<(DirectionCache, DirectionCache)>,
}

/// Activations `y_t^k` of every frame (`T × classes`).
pub fn network_forward(params: &NetworkParams, inputs: &FeatureSequence) -> Result<(Matrix, ForwardCache)> {
    network_forward_matrix(params, inputs.frames())
}

pub fn network_forward_matrix(params: &NetworkParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "network input",
            expected: params.input_dim(),
            found: inputs.cols(),
        });
    }
    let len = inputs.rows();
    let mut layer_inputs = vec![inputs.clone()];
    let mut directions = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let x = layer_inputs.last().expect("non-empty");
        let (hf, cf) = lstm_direction_forward(&layer.forward, x, Direction::Forward)?;
        let (hb, cb) = lstm_direction_forward(&layer.backward, x, Direction::Backward)?;
        let h = layer.hidden();
        let mut joined = Matrix::zeros(len, 2 * h);
        for t in 0..len {
            let row = joined.row_mut(t);
            row[..h].copy_from_slice(hf.row(t));
            row[h..].copy_from_slice(hb.row(t));
        }
        layer_inputs.push(joined);
        directions.push((cf, cb));
    }
    let top = layer_inputs.last().expect("non-empty");
    let mut logits = Matrix::zeros(len, params.classes());
    for t in 0..len {
        let row = logits.row_mut(t);
        row.copy_from_slice(params.out_b.as_slice());
        params.out_w.matvec_acc(top.row(t), row);
    }
    Ok((
        logits,
        ForwardCache {
            generation: params.generation,
            layer_inputs,
            directions,
        },
    ))
}

pub fn posteriors(params: &NetworkParams, inputs: &FeatureSequence) -> Result<PosteriorGram> {
    let (logits, _) = network_forward(params, inputs)?;
    PosteriorGram::from_logits(&logits)
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient `d_logits` with respect to the activations.
pub fn network_backward(params: &NetworkParams, cache: &ForwardCache, d_logits: &Matrix) -> Result<NetworkParams> {
    if cache.generation != params.generation {
        return Err(Error::StaleCache("parameters changed since the forward pass"));
    }
    let len = cache.layer_inputs[0].rows();
    if d_logits.shape() != (len, params.classes()) {
        return Err(Error::DimensionMismatch {
            context: "logit gradient",
            expected: len * params.classes(),
            found: d_logits.rows() * d_logits.cols(),
        });
    }
    let mut grads = params.zeros_like();
    let top = cache.layer_inputs.last().expect("non-empty");
    let mut d_top = Matrix::zeros(len, top.cols());
    for t in 0..len {
        let dy = d_logits.row(t);
        grads.out_w.add_outer(dy, top.row(t));
        for (b, d) in grads.out_b.as_mut_slice().iter_mut().zip(dy) {
            *b += d;
        }
        params.out_w.matvec_t_acc(dy, d_top.row_mut(t));
    }

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let h = layer.hidden();
        let x = &cache.layer_inputs[l];
        let mut d_fwd = Matrix::zeros(len, h);
        let mut d_bwd = Matrix::zeros(len, h);
        for t in 0..len {
            let row = d_top.row(t);
            d_fwd.row_mut(t).copy_from_slice(&row[..h]);
            d_bwd.row_mut(t).copy_from_slice(&row[h..]);
        }
        let mut d_x = Matrix::zeros(len, x.cols());
        let (cf, cb) = &cache.directions[l];
        let gl = &mut grads.layers[l];
        lstm_direction_backward(&layer.forward, cf, x, &d_fwd, &mut gl.forward, &mut d_x);
        lstm_direction_backward(&layer.backward, cb, x, &d_bwd, &mut gl.backward, &mut d_x);
        d_top = d_x;
    }
    Ok(grads)
}

/// `p ← p − lr·g` for every block.
pub fn sgd_step(params: &mut NetworkParams, grads: &NetworkParams, learning_rate: f64) -> Result<()> {
    let grad_blocks: Vec<Matrix> = grads.blocks().into_iter().map(|(_, m)| m.clone()).collect();
    let blocks = params.blocks_mut();
    if blocks.len() != grad_blocks.len() {
        return Err(Error::DimensionMismatch {
            context: "sgd_step block count",
            expected: blocks.len(),
            found: grad_blocks.len(),
        });
    }
    for (p, g) in blocks.into_iter().zip(&grad_blocks) {
        p.add_scaled(g, -learning_rate)?;
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut NetworkParams, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for b in grads.blocks_mut() {
            b.scale(factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{ctc_loss_from_logits, LabelSequence};

    fn topo(input_dim: usize, hidden: usize, layers: usize, classes: usize) -> Topology {
        Topology {
            input_dim,
            hidden,
            layers,
            classes,
        }
    }

    fn random_inputs(len: usize, dim: usize, seed: u64) -> Matrix {
        Matrix::random_uniform(len, dim, -1.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn zero_parameters_give_zero_hidden() {
        let p = LstmDirectionParams::zeros(3, 4);
        let (h, _) = lstm_direction_forward(&p, &random_inputs(5, 3, 1), Direction::Forward).unwrap();
        // with zero weights every gate is 0.5 and the candidate is tanh(0) = 0
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_directions_agree() {
        let p = LstmDirectionParams::random(3, 4, &mut Rng::new(2));
        let x = random_inputs(1, 3, 3);
        let (f, _) = lstm_direction_forward(&p, &x, Direction::Forward).unwrap();
        let (b, _) = lstm_direction_forward(&p, &x, Direction::Backward).unwrap();
        assert_eq!(f, b);
    }

    #[test]
    fn hand_computed_scalar_cell() {
        // one unit, unit input weights on every gate, no recurrence or bias
        let p = LstmDirectionParams {
            w_in: Matrix::from_vec(4, 1, vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
            w_rec: Matrix::zeros(4, 1),
            bias: Matrix::zeros(4, 1),
        };
        let xs = [0.5, -1.0, 2.0];
        let x = Matrix::from_vec(3, 1, xs.to_vec()).unwrap();
        let (h, _) = lstm_direction_forward(&p, &x, Direction::Forward).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut c = 0.0;
        for (t, &xt) in xs.iter().enumerate() {
            c = s(xt) * c + s(xt) * xt.tanh();
            let expect = s(xt) * c.tanh();
            assert!((h.get(t, 0) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn output_shape_and_normalization() {
        let params = NetworkParams::random(topo(5, 6, 2, 28), &mut Rng::new(4)).unwrap();
        let seq = FeatureSequence::new(random_inputs(9, 5, 5)).unwrap();
        let (logits, _) = network_forward(&params, &seq).unwrap();
        assert_eq!(logits.shape(), (9, 28));
        let post = posteriors(&params, &seq).unwrap();
        for t in 0..9 {
            assert!((post.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let bad = FeatureSequence::new(random_inputs(9, 4, 5)).unwrap();
        assert!(network_forward(&params, &bad).is_err());
    }

    #[test]
    fn utterances_are_independent() {
        let params = NetworkParams::random(topo(3, 4, 2, 5), &mut Rng::new(6)).unwrap();
        let a = FeatureSequence::new(random_inputs(6, 3, 7)).unwrap();
        let b = FeatureSequence::new(random_inputs(4, 3, 8)).unwrap();
        let a1 = network_forward(&params, &a).unwrap().0;
        let _ = network_forward(&params, &b).unwrap();
        let a2 = network_forward(&params, &a).unwrap().0;
        assert_eq!(a1, a2);
    }

    #[test]
    fn scaled_projection_keeps_posteriors_normalized() {
        let mut params = NetworkParams::random(topo(3, 4, 2, 6), &mut Rng::new(9)).unwrap();
        let seq = FeatureSequence::new(random_inputs(7, 3, 10)).unwrap();
        let before = network_forward(&params, &seq).unwrap().0;
        // layer 1's input weights act on layer 0's output
        params.blocks_mut()[6].scale(2.0);
        let after = network_forward(&params, &seq).unwrap().0;
        assert_ne!(before, after);
        let post = PosteriorGram::from_logits(&after).unwrap();
        for t in 0..7 {
            assert!((post.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_logit_gradient_gives_zero_gradients() {
        let params = NetworkParams::random(topo(3, 4, 2, 5), &mut Rng::new(11)).unwrap();
        let x = random_inputs(6, 3, 12);
        let (logits, cache) = network_forward_matrix(&params, &x).unwrap();
        let grads = network_backward(&params, &cache, &Matrix::zeros(logits.rows(), logits.cols())).unwrap();
        assert_eq!(grads.squared_norm(), 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut params = NetworkParams::random(topo(3, 4, 1, 5), &mut Rng::new(13)).unwrap();
        let x = random_inputs(6, 3, 14);
        let (logits, cache) = network_forward_matrix(&params, &x).unwrap();
        let grads = params.zeros_like();
        sgd_step(&mut params, &grads, 0.1).unwrap();
        let d = Matrix::zeros(logits.rows(), logits.cols());
        assert!(matches!(network_backward(&params, &cache, &d), Err(Error::StaleCache(_))));
    }

    /// Central-difference check of `loss` against `network_backward` on the
    /// coordinates listed (block index, flat index).
    fn max_relative_error(
        params: &NetworkParams,
        loss_and_dlogits: &dyn Fn(&Matrix) -> (f64, Matrix),
        x: &Matrix,
        coords: &[(usize, usize)],
        eps: f64,
    ) -> f64 {
        let (logits, cache) = network_forward_matrix(params, x).unwrap();
        let (_, d) = loss_and_dlogits(&logits);
        let grads = network_backward(params, &cache, &d).unwrap();
        let grad_blocks = grads.blocks();
        let mut worst: f64 = 0.0;
        for &(b, i) in coords {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.blocks_mut()[b].as_mut_slice()[i] += delta;
                loss_and_dlogits(&network_forward_matrix(&p, x).unwrap().0).0
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = grad_blocks[b].1.as_slice()[i];
            let scale = numeric.abs().max(analytic.abs());
            if scale > 1e-7 {
                worst = worst.max((numeric - analytic).abs() / scale);
            }
        }
        worst
    }

    /// Initial parameters scaled up so gradients sit well above the
    /// finite-difference roundoff floor.
    fn wide_params(t: Topology, rng: &mut Rng) -> NetworkParams {
        let mut p = NetworkParams::random(t, rng).unwrap();
        for b in p.blocks_mut() {
            b.scale(5.0);
        }
        p
    }

    fn sample_coords(params: &NetworkParams, per_block: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
        params
            .blocks()
            .iter()
            .enumerate()
            .flat_map(|(b, (_, m))| {
                let n = m.as_slice().len();
                (0..per_block).map(|_| (b, rng.below(n))).collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn sum_of_logits_gradient() {
        let mut rng = Rng::new(15);
        let params = wide_params(topo(3, 4, 2, 5), &mut rng);
        let x = random_inputs(5, 3, 16);
        let coords = sample_coords(&params, 20, &mut rng);
        let loss = |l: &Matrix| (l.as_slice().iter().sum::<f64>(), Matrix::filled(l.rows(), l.cols(), 1.0));
        let err = max_relative_error(&params, &loss, &x, &coords, 1e-5);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn ctc_gradient_through_network() {
        let mut rng = Rng::new(17);
        let params = wide_params(topo(3, 4, 2, 4), &mut rng);
        let x = random_inputs(6, 3, 18);
        let label = LabelSequence::new(vec![1, 3, 3]).unwrap();
        let coords = sample_coords(&params, 20, &mut rng);
        let loss = |l: &Matrix| ctc_loss_from_logits(l, &label).unwrap();
        let err = max_relative_error(&params, &loss, &x, &coords, 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn sgd_zero_rate_is_identity() {
        let mut rng = Rng::new(19);
        let mut params = NetworkParams::random(topo(3, 4, 1, 5), &mut rng).unwrap();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.blocks_mut()[0].as_mut_slice()[0] = 3.0;
        sgd_step(&mut params, &grads, 0.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_descends_on_quadratic() {
        // loss = ½ Σ logits²  over a fixed input
        let mut rng = Rng::new(20);
        let mut params = NetworkParams::random(topo(3, 4, 1, 5), &mut rng).unwrap();
        let x = random_inputs(6, 3, 21);
        let loss = |p: &NetworkParams| {
            let (l, c) = network_forward_matrix(p, &x).unwrap();
            (0.5 * l.sum_squares(), l, c)
        };
        let (before, logits, cache) = loss(&params);
        let grads = network_backward(&params, &cache, &logits).unwrap();
        sgd_step(&mut params, &grads, 0.05).unwrap();
        assert!(loss(&params).0 < before);
    }

    #[test]
    fn initialization_range() {
        let params = NetworkParams::random(topo(24, 32, 2, 28), &mut Rng::new(22)).unwrap();
        for (_, m) in params.blocks() {
            assert!(m.as_slice().iter().all(|v| v.abs() <= INIT_RANGE));
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let params = NetworkParams::random(topo(3, 4, 1, 5), &mut Rng::new(23)).unwrap();
        let mut grads = params.clone();
        for b in grads.blocks_mut() {
            b.scale(100.0);
        }
        let before = clip_gradients(&mut grads, 5.0);
        assert!(before > 5.0);
        assert!((grads.squared_norm().sqrt() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn block_round_trip() {
        let params = NetworkParams::random(topo(3, 4, 2, 5), &mut Rng::new(24)).unwrap();
        let blocks = params.blocks().into_iter().map(|(n, m)| (n, m.clone())).collect();
        assert_eq!(NetworkParams::from_blocks(blocks).unwrap(), params);
    }

    #[test]
    fn reversed_input_swaps_directions() {
        let mut params = NetworkParams::random(topo(3, 4, 1, 5), &mut Rng::new(25)).unwrap();
        let x = random_inputs(7, 3, 26);
        let mut reversed = Matrix::zeros(7, 3);
        for t in 0..7 {
            reversed.row_mut(t).copy_from_slice(x.row(6 - t));
        }
        let (_, cache) = network_forward_matrix(&params, &x).unwrap();
        let hidden = cache.layer_inputs[1].clone();
        params.swap_directions();
        let (_, cache_rev) = network_forward_matrix(&params, &reversed).unwrap();
        let hidden_rev = &cache_rev.layer_inputs[1];
        for t in 0..7 {
            assert_eq!(&hidden.row(t)[..4], &hidden_rev.row(6 - t)[4..]);
            assert_eq!(&hidden.row(t)[4..], &hidden_rev.row(6 - t)[..4]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = NetworkParams::random(topo(3, 4, 2, 5), &mut Rng::new(27)).unwrap();
        let x = random_inputs(8, 3, 28);
        let a = network_forward_matrix(&params, &x).unwrap().0;
        let b = network_forward_matrix(&params, &x).unwrap().0;
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
