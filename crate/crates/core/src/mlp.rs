//! Fully connected tanh networks with scalar output, evaluated in batches
//! together with exact input derivatives, and reverse-mode gradients of any
//! linear functional of those derivatives with respect to the weights.
//!
//! A forward pass carries several *channels* per activation: the value, the
//! first derivative along each requested input direction, and optionally the
//! second derivative along input 0. All channels of one layer are stacked
//! side by side so that each layer costs a single matrix product. The
//! backward pass is ordinary backpropagation through that extended forward
//! computation, which yields mixed parameter/input derivatives without any
//! finite differencing.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Layer sizes of a scalar-output tanh network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Self {
        MlpArch { input_dim, hidden }
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Weights from N(0, 1/fan_in), zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_shapes() {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            out.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        out
    }

    /// Every weight and bias iid N(0, sd²).
    pub fn sample_params<R: Rng + ?Sized>(&self, sd: f64, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, sd).unwrap();
        (0..self.param_count()).map(|_| normal.sample(rng)).collect()
    }
}

/// Which derivative channels a forward pass should carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    /// Number of first-derivative channels; channel `i` differentiates along
    /// input coordinate `i`.
    pub first: usize,
    /// Whether to carry the second derivative along input 0.
    pub second: bool,
}

impl Channels {
    pub const VALUE: Channels = Channels {
        first: 0,
        second: false,
    };

    fn count(self) -> usize {
        1 + self.first + usize::from(self.second)
    }

    fn second_index(self) -> usize {
        1 + self.first
    }
}

struct LayerCache {
    /// Stacked input channels of this layer.
    input: DMatrix<f64>,
    /// Post-activation values (hidden layers only).
    tanh: Option<DMatrix<f64>>,
    /// Stacked pre-activation channels (hidden layers only).
    pre: Option<DMatrix<f64>>,
}

/// Forward pass record needed for backpropagation.
pub struct Tape {
    channels: Channels,
    n: usize,
    layers: Vec<LayerCache>,
    output: DMatrix<f64>,
}

impl Tape {
    /// Output channel `c` (0 = value, 1.. = first derivatives, then second).
    pub fn channel(&self, c: usize) -> &[f64] {
        let start = c * self.n;
        &self.output.as_slice()[start..start + self.n]
    }

    pub fn value(&self) -> &[f64] {
        self.channel(0)
    }

    pub fn first(&self, dir: usize) -> &[f64] {
        assert!(dir < self.channels.first);
        self.channel(1 + dir)
    }

    pub fn second(&self) -> &[f64] {
        assert!(self.channels.second);
        self.channel(self.channels.second_index())
    }

    pub fn first_count(&self) -> usize {
        self.channels.first
    }

    pub fn has_second(&self) -> bool {
        self.channels.second
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

fn layer_views(arch: &MlpArch, params: &[f64]) -> Vec<(DMatrix<f64>, Vec<f64>)> {
    assert_eq!(params.len(), arch.param_count(), "parameter length mismatch");
    let mut offset = 0;
    arch.layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w = DMatrix::from_row_slice(fan_out, fan_in, &params[offset..offset + fan_in * fan_out]);
            offset += fan_in * fan_out;
            let b = params[offset..offset + fan_out].to_vec();
            offset += fan_out;
            (w, b)
        })
        .collect()
}

/// Runs the network on `inputs` (one slice per input coordinate, each of
/// length `n`) and records what the backward pass needs.
pub fn forward(arch: &MlpArch, params: &[f64], inputs: &[&[f64]], channels: Channels) -> Tape {
    assert_eq!(inputs.len(), arch.input_dim);
    assert!(channels.first <= arch.input_dim);
    let n = inputs[0].len();
    let nc = channels.count();
    let layers = layer_views(arch, params);

    let mut h = DMatrix::<f64>::zeros(arch.input_dim, nc * n);
    for (d, col) in inputs.iter().enumerate() {
        assert_eq!(col.len(), n);
        for (j, &v) in col.iter().enumerate() {
            h[(d, j)] = v;
        }
    }
    for dir in 0..channels.first {
        for j in 0..n {
            h[(dir, (1 + dir) * n + j)] = 1.0;
        }
    }

    let mut caches = Vec::with_capacity(layers.len());
    let last = layers.len() - 1;
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut z = w * &h;
        for (r, &bias) in b.iter().enumerate() {
            for j in 0..n {
                z[(r, j)] += bias;
            }
        }
        if l == last {
            caches.push(LayerCache {
                input: h,
                tanh: None,
                pre: None,
            });
            return Tape {
                channels,
                n,
                layers: caches,
                output: z,
            };
        }
        let rows = z.nrows();
        let mut a = DMatrix::<f64>::zeros(rows, nc * n);
        let mut t = DMatrix::<f64>::zeros(rows, n);
        for j in 0..n {
            for r in 0..rows {
                let tv = z[(r, j)].tanh();
                let t1 = 1.0 - tv * tv;
                t[(r, j)] = tv;
                a[(r, j)] = tv;
                for dir in 0..channels.first {
                    let c = (1 + dir) * n + j;
                    a[(r, c)] = t1 * z[(r, c)];
                }
                if channels.second {
                    let t2 = -2.0 * tv * t1;
                    let zd = z[(r, n + j)];
                    let c = channels.second_index() * n + j;
                    a[(r, c)] = t2 * zd * zd + t1 * z[(r, c)];
                }
            }
        }
        caches.push(LayerCache {
            input: h,
            tanh: Some(t),
            pre: Some(z),
        });
        h = a;
    }
    unreachable!("network has an output layer")
}

/// Accumulates into `grad` the parameter gradient of
/// `Σ_j Σ_c adjoint[c][j] · output_channel_c[j]`.
///
/// `adjoint` holds one slice per output channel (same order as
/// [`Tape::channel`]); pass an empty slice for channels with zero adjoint.
pub fn backward(arch: &MlpArch, params: &[f64], tape: &Tape, adjoint: &[&[f64]], grad: &mut [f64]) {
    let n = tape.n;
    let ch = tape.channels;
    let nc = ch.count();
    assert_eq!(adjoint.len(), nc);
    assert_eq!(grad.len(), params.len());
    let layers = layer_views(arch, params);

    let mut abar = DMatrix::<f64>::zeros(1, nc * n);
    for (c, adj) in adjoint.iter().enumerate() {
        if adj.is_empty() {
            continue;
        }
        assert_eq!(adj.len(), n);
        for j in 0..n {
            abar[(0, c * n + j)] = adj[j];
        }
    }

    let offsets: Vec<usize> = arch
        .layer_shapes()
        .iter()
        .scan(0, |acc, (i, o)| {
            let start = *acc;
            *acc += i * o + o;
            Some(start)
        })
        .collect();

    let last = layers.len() - 1;
    for l in (0..layers.len()).rev() {
        let (w, _) = &layers[l];
        let cache = &tape.layers[l];
        // Adjoint of this layer's pre-activation channels.
        let zbar = if l == last {
            std::mem::replace(&mut abar, DMatrix::zeros(0, 0))
        } else {
            let t = cache.tanh.as_ref().unwrap();
            let z = cache.pre.as_ref().unwrap();
            let rows = t.nrows();
            let mut zbar = DMatrix::<f64>::zeros(rows, nc * n);
            for j in 0..n {
                for r in 0..rows {
                    let tv = t[(r, j)];
                    let t1 = 1.0 - tv * tv;
                    let t2 = -2.0 * tv * t1;
                    let mut value_bar = abar[(r, j)] * t1;
                    for dir in 0..ch.first {
                        let c = (1 + dir) * n + j;
                        value_bar += abar[(r, c)] * t2 * z[(r, c)];
                        zbar[(r, c)] = abar[(r, c)] * t1;
                    }
                    if ch.second {
                        let c = ch.second_index() * n + j;
                        let add = abar[(r, c)];
                        if add != 0.0 {
                            let t3 = -2.0 * t1 * t1 + 4.0 * tv * tv * t1;
                            let zd = z[(r, n + j)];
                            value_bar += add * (t3 * zd * zd + t2 * z[(r, c)]);
                            zbar[(r, n + j)] += add * 2.0 * t2 * zd;
                            zbar[(r, c)] = add * t1;
                        }
                    }
                    zbar[(r, j)] = value_bar;
                }
            }
            zbar
        };

        let (fan_in, fan_out) = (w.ncols(), w.nrows());
        let wbar = &zbar * cache.input.transpose();
        let off = offsets[l];
        for r in 0..fan_out {
            for c in 0..fan_in {
                grad[off + r * fan_in + c] += wbar[(r, c)];
            }
            let bsum: f64 = (0..n).map(|j| zbar[(r, j)]).sum();
            grad[off + fan_in * fan_out + r] += bsum;
        }
        if l > 0 {
            abar = w.transpose() * &zbar;
        }
    }
}

/// A network bundled with its parameters, for fixed (non-trained) use such
/// as data generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub arch: MlpArch,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new(arch: MlpArch, params: Vec<f64>) -> Self {
        assert_eq!(arch.param_count(), params.len());
        Mlp { arch, params }
    }

    pub fn zeros(arch: MlpArch) -> Self {
        let params = vec![0.0; arch.param_count()];
        Mlp { arch, params }
    }

    pub fn sample<R: Rng + ?Sized>(arch: MlpArch, sd: f64, rng: &mut R) -> Self {
        let params = arch.sample_params(sd, rng);
        Mlp { arch, params }
    }

    /// Values at many 1-D inputs.
    pub fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        forward(&self.arch, &self.params, &[xs], Channels::VALUE)
            .value()
            .to_vec()
    }

    /// `(f, f', f'')` at many 1-D inputs.
    pub fn jet2_many(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let tape = forward(
            &self.arch,
            &self.params,
            &[xs],
            Channels {
                first: 1,
                second: true,
            },
        );
        (
            tape.value().to_vec(),
            tape.first(0).to_vec(),
            tape.second().to_vec(),
        )
    }

    /// `(f, f', f'')` at a single 1-D input.
    pub fn jet2(&self, x: f64) -> (f64, f64, f64) {
        let (v, d, dd) = self.jet2_many(&[x]);
        (v[0], d[0], dd[0])
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_many(&[x])[0]
    }
}
