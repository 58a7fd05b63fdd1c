//! Fully connected network with an optional linear input embedding and an
//! optional residual path from the embedding to the last hidden layer.
//!
//! All parameters live in one flat vector; each weight matrix is stored
//! row-major as `out × in`, followed by its bias.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, h: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if h > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::LeakyRelu => (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt(),
            Activation::Tanh => 5.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input: usize,
    /// Width of the linear input embedding, if any.
    pub embed: Option<usize>,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    /// Add the embedding to the last hidden activation before the head.
    pub residual: bool,
}

impl MlpArch {
    /// Embedding to 512, three 512-wide LeakyReLU layers, residual head.
    pub fn surrogate(input: usize, output: usize) -> Self {
        Self::residual_net(input, output, 512, 3)
    }

    pub fn residual_net(input: usize, output: usize, width: usize, depth: usize) -> Self {
        MlpArch {
            input,
            embed: Some(width),
            hidden: vec![width; depth],
            output,
            activation: Activation::LeakyRelu,
            residual: true,
        }
    }

    /// Two 64-wide tanh layers.
    pub fn small_tanh(input: usize, output: usize) -> Self {
        MlpArch {
            input,
            embed: None,
            hidden: vec![64, 64],
            output,
            activation: Activation::Tanh,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invariant("mlp", "layer widths must be positive"));
        }
        if self.residual {
            let last = self.hidden.last().copied();
            if self.embed.is_none() || last != self.embed {
                return Err(Error::invariant(
                    "mlp.residual",
                    "residual path needs an embedding as wide as the last hidden layer",
                ));
            }
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut width = self.input;
        if let Some(e) = self.embed {
            dims.push((width, e));
            width = e;
        }
        for &h in &self.hidden {
            dims.push((width, h));
            width = h;
        }
        dims.push((width, self.output));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: MlpArch,
    layers: Vec<Dense>,
    params: Vec<f64>,
}

/// Intermediate activations recorded by [`Mlp::forward_train`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Array2<f64>,
    embed: Option<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
    head_in: Option<Array2<f64>>,
}

impl Mlp {
    /// Kaiming-uniform weights, zero biases.
    pub fn new(arch: MlpArch, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = m.arch.activation.gain();
        for l in m.layers.clone() {
            let bound = gain * (3.0 / l.fan_in as f64).sqrt();
            for w in &mut m.params[l.w..l.w + l.fan_in * l.fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn zeros(arch: MlpArch) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in arch.layer_dims() {
            layers.push(Dense {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        Ok(Mlp {
            arch,
            layers,
            params: vec![0.0; off],
        })
    }

    pub fn from_params(arch: MlpArch, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        if params.len() != m.params.len() {
            return Err(Error::Dimension {
                context: "mlp parameters",
                expected: m.params.len(),
                got: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output
    }

    /// Multiply the output layer (weights and bias) by `factor`.
    pub fn scale_head(&mut self, factor: f64) {
        let l = *self.layers.last().unwrap();
        for p in &mut self.params[l.w..l.b + l.fan_out] {
            *p *= factor;
        }
    }

    /// Set the output-layer bias.
    pub fn set_head_bias(&mut self, bias: &[f64]) {
        let l = *self.layers.last().unwrap();
        assert_eq!(bias.len(), l.fan_out);
        self.params[l.b..l.b + l.fan_out].copy_from_slice(bias);
    }

    fn weight(&self, l: &Dense) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.fan_out, l.fan_in), &self.params[l.w..l.w + l.fan_in * l.fan_out]).unwrap()
    }

    fn bias(&self, l: &Dense) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[l.b..l.b + l.fan_out])
    }

    fn affine(&self, l: &Dense, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight(l).t());
        z += &self.bias(l);
        z
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.arch.input {
            return Err(Error::Dimension {
                context: "mlp input",
                expected: self.arch.input,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_train(x)?.0)
    }

    /// Single-sample evaluation through the batch path.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let act = self.arch.activation;
        let mut li = 0;
        let embed = if self.arch.embed.is_some() {
            li += 1;
            Some(self.affine(&self.layers[0], &x))
        } else {
            None
        };
        let mut hidden = Vec::with_capacity(self.arch.hidden.len());
        for _ in 0..self.arch.hidden.len() {
            let prev = hidden.last().or(embed.as_ref()).map(|h: &Array2<f64>| h.view()).unwrap_or(x.view());
            let mut z = self.affine(&self.layers[li], &prev);
            z.mapv_inplace(|v| act.apply(v));
            hidden.push(z);
            li += 1;
        }
        let head_in = if self.arch.residual {
            Some(hidden.last().unwrap() + embed.as_ref().unwrap())
        } else {
            None
        };
        let last = head_in
            .as_ref()
            .or(hidden.last())
            .or(embed.as_ref())
            .map(|h| h.view())
            .unwrap_or(x.view());
        let y = self.affine(&self.layers[li], &last);
        Ok((
            y,
            MlpCache {
                x: x.to_owned(),
                embed,
                hidden,
                head_in,
            },
        ))
    }

    fn grad_view<'a>(l: &Dense, g: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((l.fan_out, l.fan_in), &mut g[l.w..l.w + l.fan_in * l.fan_out]).unwrap()
    }

    /// Accumulate parameter gradients of a loss with output gradient `dy`
    /// into `grads` (same layout as [`Mlp::params`]).
    pub fn backward_into(&self, cache: &MlpCache, dy: ArrayView2<f64>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let act = self.arch.activation;
        let n_hidden = self.arch.hidden.len();
        let has_embed = cache.embed.is_some();
        let head = *self.layers.last().unwrap();

        let head_in = cache
            .head_in
            .as_ref()
            .or(cache.hidden.last())
            .or(cache.embed.as_ref())
            .unwrap_or(&cache.x);
        self.accumulate(&head, dy, head_in.view(), grads);
        let mut dh = dy.dot(&self.weight(&head));
        let d_embed_res = if self.arch.residual { Some(dh.clone()) } else { None };

        for k in (0..n_hidden).rev() {
            let l = self.layers[k + has_embed as usize];
            let h = &cache.hidden[k];
            ndarray::Zip::from(&mut dh).and(h).for_each(|d, &hv| *d *= act.grad_from_output(hv));
            let prev = if k > 0 {
                cache.hidden[k - 1].view()
            } else {
                cache.embed.as_ref().map(|e| e.view()).unwrap_or(cache.x.view())
            };
            self.accumulate(&l, dh.view(), prev, grads);
            if k > 0 || has_embed {
                dh = dh.dot(&self.weight(&l));
            }
        }
        if has_embed {
            if let Some(r) = d_embed_res {
                dh += &r;
            }
            self.accumulate(&self.layers[0], dh.view(), cache.x.view(), grads);
        }
    }

    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<f64>) -> Vec<f64> {
        let mut g = vec![0.0; self.params.len()];
        self.backward_into(cache, dy, &mut g);
        g
    }

    fn accumulate(&self, l: &Dense, dz: ArrayView2<f64>, input: ArrayView2<f64>, grads: &mut [f64]) {
        general_mat_mul(1.0, &dz.t(), &input, 1.0, &mut Self::grad_view(l, grads));
        let db = dz.sum_axis(Axis(0));
        for (g, d) in grads[l.b..l.b + l.fan_out].iter_mut().zip(db.iter()) {
            *g += d;
        }
    }
}
