//! Parameter containers and the building blocks of the feed-forward Transformer.
//!
//! Every weight container is generic over its leaf type: `Tensor` for stored
//! weights, `NodeId` once bound into a [`Graph`]. [`ParamTree`] walks the
//! leaves in a fixed order under stable dotted names
//! (`encoder.0.attention.query.weight`), which checkpoints and the optimizer rely on.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub trait ParamTree {
    type Param;
    type With<Q>;

    fn map_named<'s, Q>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Self::Param) -> Q) -> Self::With<Q>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Self::Param));
}

pub fn param_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    type Param = T::Param;
    type With<Q> = Vec<T::With<Q>>;

    fn map_named<'s, Q>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T::Param) -> Q) -> Vec<T::With<Q>> {
        self.iter()
            .enumerate()
            .map(|(i, t)| t.map_named(&param_path(prefix, &i.to_string()), f))
            .collect()
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T::Param)) {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut(&param_path(prefix, &i.to_string()), f);
        }
    }
}

macro_rules! param_tree {
    ($ty:ident { leaves: [$($leaf:ident),*], nodes: [$($node:ident),*] }) => {
        impl<P> $crate::model::layers::ParamTree for $ty<P> {
            type Param = P;
            type With<Q> = $ty<Q>;

            #[allow(unused_variables)]
            fn map_named<'s, Q>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s P) -> Q) -> $ty<Q> {
                use $crate::model::layers::param_path;
                $(let $leaf = f(&param_path(prefix, stringify!($leaf)), &self.$leaf);)*
                $(let $node = self.$node.map_named(&param_path(prefix, stringify!($node)), f);)*
                $ty { $($leaf,)* $($node,)* }
            }

            #[allow(unused_variables)]
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                use $crate::model::layers::param_path;
                $(f(&param_path(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $(self.$node.visit_mut(&param_path(prefix, stringify!($node)), f);)*
            }
        }
    };
}
pub(crate) use param_tree;

/// Binds stored weights into a graph as borrowed, gradient-tracking leaves.
pub fn bind<'a, T>(tree: &'a T, g: &mut Graph<'a>) -> T::With<NodeId>
where
    T: ParamTree<Param = Tensor>,
{
    tree.map_named("", &mut |_, t| g.param_ref(t))
}

/// `(name, tensor)` pairs in canonical order.
pub fn named_params<T: ParamTree<Param = Tensor>>(tree: &T) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    tree.map_named("", &mut |name, t| out.push((name.to_string(), t)));
    out
}

pub fn param_count<T: ParamTree<Param = Tensor>>(tree: &T) -> usize {
    named_params(tree).iter().map(|(_, t)| t.numel()).sum()
}

/// Uniform in ±√(6/(fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P = Tensor> {
    pub weight: P,
    pub bias: P,
}
param_tree!(Linear { leaves: [weight, bias], nodes: [] });

impl Linear {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[d_in, d_out]), bias: Tensor::zeros(&[d_out]) }
    }
}

impl Linear<NodeId> {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dWeights<P = Tensor> {
    /// `k × c_in × c_out`.
    pub weight: P,
    pub bias: P,
}
param_tree!(Conv1dWeights { leaves: [weight, bias], nodes: [] });

impl Conv1dWeights {
    pub fn init(rng: &mut impl Rng, kernel: usize, c_in: usize, c_out: usize) -> Self {
        Conv1dWeights {
            weight: xavier_uniform(rng, &[kernel, c_in, c_out], kernel * c_in, kernel * c_out),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn zeros(kernel: usize, c_in: usize, c_out: usize) -> Self {
        Conv1dWeights { weight: Tensor::zeros(&[kernel, c_in, c_out]), bias: Tensor::zeros(&[c_out]) }
    }
}

impl Conv1dWeights<NodeId> {
    pub fn same(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        g.conv1d_same(x, self.weight, self.bias)
    }

    pub fn causal(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        g.conv1d_causal(x, self.weight, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights<P = Tensor> {
    pub gamma: P,
    pub beta: P,
}
param_tree!(LayerNormWeights { leaves: [gamma, beta], nodes: [] });

impl LayerNormWeights {
    pub fn new(d: usize) -> Self {
        LayerNormWeights { gamma: Tensor::ones(&[d]), beta: Tensor::zeros(&[d]) }
    }
}

impl LayerNormWeights<NodeId> {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

/// Query/key/value/output projections for all heads; head `h` owns columns
/// `h·d_head .. (h+1)·d_head` of the query, key and value projections.
///
/// The key projection has no bias: a key bias shifts every score in a row by
/// the same amount, which softmax cancels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<P = Tensor> {
    pub key: P,
    pub query: Linear<P>,
    pub value: Linear<P>,
    pub output: Linear<P>,
}
param_tree!(AttentionWeights { leaves: [key], nodes: [query, value, output] });

impl AttentionWeights {
    pub fn init(rng: &mut impl Rng, d_model: usize) -> Self {
        AttentionWeights {
            key: xavier_uniform(rng, &[d_model, d_model], d_model, d_model),
            query: Linear::init(rng, d_model, d_model),
            value: Linear::init(rng, d_model, d_model),
            output: Linear::init(rng, d_model, d_model),
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        AttentionWeights {
            key: Tensor::zeros(&[d_model, d_model]),
            query: Linear::zeros(d_model, d_model),
            value: Linear::zeros(d_model, d_model),
            output: Linear::zeros(d_model, d_model),
        }
    }
}

/// Scaled dot-product attention of `queries` over `memory`, per head, with heads
/// concatenated and projected. `mask` is added to every head's scores. Each
/// head's `rows × memory_rows` weight matrix is pushed onto `capture` if given.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    queries: NodeId,
    memory: NodeId,
    w: &AttentionWeights<NodeId>,
    n_heads: usize,
    mask: Option<NodeId>,
    mut capture: Option<&mut Vec<NodeId>>,
) -> Result<NodeId> {
    let (_, d_model) = g.value(queries).dims2()?;
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::config(format!(
            "d_model {d_model} is not divisible into {n_heads} heads"
        )));
    }
    let d_head = d_model / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let q = w.query.forward(g, queries)?;
    let k = g.matmul(memory, w.key)?;
    let v = w.value.forward(g, memory)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * d_head, d_head)?;
        let kh = g.slice_cols(k, h * d_head, d_head)?;
        let vh = g.slice_cols(v, h * d_head, d_head)?;
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax_rows(scores)?;
        if let Some(c) = capture.as_deref_mut() {
            c.push(weights);
        }
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    w.output.forward(g, joined)
}

/// Additive mask blocking attention to later positions.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = -1e9;
        }
    }
    m
}

/// Self-attention and a two-layer convolution, each wrapped in
/// dropout, a residual connection and layer normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct FftBlockWeights<P = Tensor> {
    pub attention: AttentionWeights<P>,
    pub attention_norm: LayerNormWeights<P>,
    pub conv1: Conv1dWeights<P>,
    pub conv2: Conv1dWeights<P>,
    pub conv_norm: LayerNormWeights<P>,
}
param_tree!(FftBlockWeights { leaves: [], nodes: [attention, attention_norm, conv1, conv2, conv_norm] });

impl FftBlockWeights {
    pub fn init(rng: &mut impl Rng, d_model: usize, kernel: usize, filter: usize) -> Self {
        FftBlockWeights {
            attention: AttentionWeights::init(rng, d_model),
            attention_norm: LayerNormWeights::new(d_model),
            conv1: Conv1dWeights::init(rng, kernel, d_model, filter),
            conv2: Conv1dWeights::init(rng, kernel, filter, d_model),
            conv_norm: LayerNormWeights::new(d_model),
        }
    }

    /// Zero attention and convolution weights: only the residual path remains.
    pub fn residual_only(d_model: usize, kernel: usize, filter: usize) -> Self {
        FftBlockWeights {
            attention: AttentionWeights::zeros(d_model),
            attention_norm: LayerNormWeights::new(d_model),
            conv1: Conv1dWeights::zeros(kernel, d_model, filter),
            conv2: Conv1dWeights::zeros(kernel, filter, d_model),
            conv_norm: LayerNormWeights::new(d_model),
        }
    }
}

pub fn fft_block(
    g: &mut Graph<'_>,
    x: NodeId,
    w: &FftBlockWeights<NodeId>,
    n_heads: usize,
    dropout: f64,
) -> Result<NodeId> {
    let a = multi_head_attention(g, x, x, &w.attention, n_heads, None, None)?;
    let a = g.dropout(a, dropout)?;
    let r = g.add(x, a)?;
    let y1 = w.attention_norm.forward(g, r)?;

    let c = w.conv1.same(g, y1)?;
    let c = g.relu(c);
    let c = w.conv2.same(g, c)?;
    let c = g.dropout(c, dropout)?;
    let r = g.add(y1, c)?;
    w.conv_norm.forward(g, r)
}

/// Sinusoidal position table: `sin(t/10000^{2i/d})` in even columns, `cos` in odd.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d_model]);
    let data = pe.data_mut();
    for t in 0..len {
        for c in 0..d_model {
            let pair = (c / 2) * 2;
            let angle = t as f64 / 10000f64.powf(pair as f64 / d_model as f64);
            data[t * d_model + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Tape-free self-attention over stored weights.
pub fn multi_head_attention_tensor(x: &Tensor, w: &AttentionWeights, n_heads: usize) -> Result<Tensor> {
    let mut g = Graph::inference();
    let wb = bind(w, &mut g);
    let xn = g.constant_ref(x);
    let y = multi_head_attention(&mut g, xn, xn, &wb, n_heads, None, None)?;
    Ok(g.value(y).clone())
}

/// Tape-free FFT block with dropout disabled.
pub fn fft_block_tensor(x: &Tensor, w: &FftBlockWeights, n_heads: usize) -> Result<Tensor> {
    let mut g = Graph::inference();
    let wb = bind(w, &mut g);
    let xn = g.constant_ref(x);
    let y = fft_block(&mut g, xn, &wb, n_heads, 0.0)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, kernels, DropoutContext};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn wavy(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.37 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn param_names_are_canonical_and_ordered() {
        let w = FftBlockWeights::init(&mut rng(), 4, 3, 6);
        let names: Vec<String> = named_params(&w).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "attention.key");
        assert_eq!(names[1], "attention.query.weight");
        assert_eq!(names.last().unwrap(), "conv_norm.beta");
        assert_eq!(names.len(), 7 + 2 + 2 + 2 + 2);
        let blocks = vec![w.clone(), w];
        let names = named_params(&blocks);
        assert_eq!(names[15].0, "1.attention.key");
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe = positional_encoding(50, 4);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.get2(1, 0) - 0.841471).abs() < 1e-6);
        assert!((pe.get2(1, 2) - (1.0f64 / 100.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn single_position_attention_is_projection() {
        let w = AttentionWeights::init(&mut rng(), 4);
        let x = Tensor::from_rows(&[[0.5, -1.0, 2.0, 0.25]]).unwrap();
        let y = multi_head_attention_tensor(&x, &w, 2).unwrap();
        let v = kernels::add_bias(&kernels::matmul(&x, &w.value.weight).unwrap(), &w.value.bias).unwrap();
        let expected = kernels::add_bias(&kernels::matmul(&v, &w.output.weight).unwrap(), &w.output.bias).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let w = AttentionWeights::init(&mut rng(), 4);
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4]; 3]).unwrap();
        let y = multi_head_attention_tensor(&x, &w, 2).unwrap();
        assert!(y.row(0) == y.row(1) && y.row(1) == y.row(2));
    }

    #[test]
    fn attention_matches_hand_computation() {
        // L = 2, d = 2, one head, identity-like projections.
        let eye = Tensor::identity(2);
        let zero = Tensor::zeros(&[2]);
        let lin = |w: Tensor| Linear { weight: w, bias: zero.clone() };
        let w = AttentionWeights {
            key: Tensor::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap(),
            query: lin(eye.clone()),
            value: lin(Tensor::from_rows(&[[1.0, 1.0], [0.0, 3.0]]).unwrap()),
            output: lin(eye),
        };
        let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let y = multi_head_attention_tensor(&x, &w, 1).unwrap();

        // keys = [[2,0],[0,1]], values = [[1,1],[0,3]]
        let s = 1.0 / 2f64.sqrt();
        let row = |q: [f64; 2]| {
            let s0 = (q[0] * 2.0) * s;
            let s1 = (q[1] * 1.0) * s;
            let (e0, e1) = (s0.exp(), s1.exp());
            let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            [p0 * 1.0 + p1 * 0.0, p0 * 1.0 + p1 * 3.0]
        };
        let expected = Tensor::from_rows(&[row([1.0, 0.0]), row([0.0, 1.0])]).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-12, "{y:?}");
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let w = AttentionWeights::init(&mut rng(), 4);
        let err = multi_head_attention_tensor(&Tensor::zeros(&[2, 4]), &w, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fft_block_preserves_shape() {
        let w = FftBlockWeights::init(&mut rng(), 8, 3, 16);
        for len in [1, 7, 40] {
            let y = fft_block_tensor(&wavy(&[len, 8], 0.0), &w, 2).unwrap();
            assert_eq!(y.shape(), &[len, 8]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn fft_block_residual_path_only() {
        let w = FftBlockWeights::residual_only(8, 3, 16);
        let x = wavy(&[5, 8], 1.0);
        let y = fft_block_tensor(&x, &w, 2).unwrap();
        let (ones, zeros) = (Tensor::ones(&[8]), Tensor::zeros(&[8]));
        let once = kernels::layer_norm(&x, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        let twice = kernels::layer_norm(&once, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(y.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn fft_block_gradient_check() {
        let w = FftBlockWeights::init(&mut rng(), 8, 3, 12);
        let flat: Vec<Tensor> = named_params(&w).into_iter().map(|(_, t)| t.clone()).collect();
        let x = wavy(&[5, 8], 0.5);
        let target = wavy(&[5, 8], 2.0);
        let mut inputs = vec![x];
        inputs.extend(flat);
        let err = grad_check(
            |g, ids| {
                g.set_dropout(DropoutContext { training: true, seed: 5, stream: 0, step: 0 });
                let mut it = ids[1..].iter().copied();
                let wb = w.map_named("", &mut |_, _| it.next().unwrap());
                let y = fft_block(g, ids[0], &wb, 2, 0.1)?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask(3);
        assert_eq!(m.row(0), &[0.0, -1e9, -1e9]);
        assert_eq!(m.row(2), &[0.0, 0.0, 0.0]);
    }
}
