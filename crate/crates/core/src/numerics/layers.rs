//! Learnable parameters and the small set of layers the model is built from.
//!
//! Every layer exposes an explicit `backward` that accumulates exact
//! gradients into its parameters and returns the gradient w.r.t. its input.
//! Frozen layers use `backward_input` which never touches parameter grads.

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    /// Whether decoupled weight decay applies (weights yes, biases and prompt tokens no).
    pub decay: bool,
    touched: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix, decay: bool) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
            decay,
            touched: false,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<()> {
        self.grad.add_assign(g)?;
        self.touched = true;
        Ok(())
    }

    pub fn accumulate_at(&mut self, r: usize, c: usize, g: f64) {
        let v = self.grad.get(r, c);
        self.grad.set(r, c, v + g);
        self.touched = true;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
        self.touched = false;
    }

    /// True once any backward pass has written into `grad` since the last reset.
    pub fn has_grad(&self) -> bool {
        self.touched
    }

    /// Replaces the value, resizing the gradient buffer to match.
    pub fn reset_value(&mut self, value: Matrix) {
        self.grad = Matrix::zeros(value.rows(), value.cols());
        self.value = value;
        self.touched = false;
    }
}

/// Anything that owns trainable parameters.
pub trait HasParams {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// `y = x·W + b`, with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    /// Xavier-uniform weights and zero bias.
    pub fn xavier<R: Rng + ?Sized>(name: &str, input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let w = Matrix::from_vec(input, output, data).expect("finite init");
        Self::from_parts(name, w, bias.then(|| Matrix::zeros(1, output)))
    }

    pub fn from_parts(name: &str, weight: Matrix, bias: Option<Matrix>) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight, true),
            bias: bias.map(|b| Parameter::new(format!("{name}.bias"), b, false)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn backward(&mut self, x: &Matrix, dout: &Matrix) -> Result<Matrix> {
        self.weight.accumulate(&x.t_matmul(dout)?)?;
        if let Some(b) = self.bias.as_mut() {
            b.accumulate(&dout.sum_rows())?;
        }
        dout.matmul_t(&self.weight.value)
    }

    pub fn backward_input(&self, dout: &Matrix) -> Result<Matrix> {
        dout.matmul_t(&self.weight.value)
    }
}

impl HasParams for Linear {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

/// Affine map with a shape check that names both operands.
pub fn linear(x: &Matrix, w: &Parameter, bias: Option<&Parameter>) -> Result<Matrix> {
    if x.cols() != w.value.rows() {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let mut y = x.matmul(&w.value)?;
    if let Some(b) = bias {
        if b.shape() != (1, w.value.cols()) {
            return Err(Error::dim("linear bias", w.shape(), b.shape()));
        }
        y.add_row_broadcast(&b.value)?;
    }
    Ok(y)
}

pub fn tanh(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    y
}

/// Gradient through `y = tanh(x)` given the forward output `y`.
pub fn tanh_backward(y: &Matrix, dout: &Matrix) -> Matrix {
    let mut dx = dout.clone();
    for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= 1.0 - yv * yv;
    }
    dx
}

/// Two linear layers with a tanh hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub input: Matrix,
    pub hidden: Matrix,
}

impl Mlp {
    pub fn xavier<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::xavier(&format!("{name}.0"), input, hidden, true, rng),
            out: Linear::xavier(&format!("{name}.1"), hidden, output, true, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        let h = tanh(&self.hidden.forward(x)?);
        let y = self.out.forward(&h)?;
        Ok((
            y,
            MlpCache {
                input: x.clone(),
                hidden: h,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, dout: &Matrix) -> Result<Matrix> {
        let dh = self.out.backward(&cache.hidden, dout)?;
        let dpre = tanh_backward(&cache.hidden, &dh);
        self.hidden.backward(&cache.input, &dpre)
    }

    pub fn backward_input(&self, cache: &MlpCache, dout: &Matrix) -> Result<Matrix> {
        let dh = self.out.backward_input(dout)?;
        let dpre = tanh_backward(&cache.hidden, &dh);
        self.hidden.backward_input(&dpre)
    }
}

impl HasParams for Mlp {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.hidden.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}
