//! Parameterized building blocks.
//!
//! Layers only hold [`ParamId`]s; the tensors live in the owning model's
//! [`ParamSet`] so a whole model can be bound, optimized, and serialized
//! as one unit.

use rand::Rng;

use crate::{BatchStats, Bound, Graph, ParamId, ParamSet, Scalar, Tensor, Var};

/// He-style standard deviation for a layer followed by a leaky rectifier.
pub fn he_std(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            Tensor::randn(&[out_c, in_c, k, k], std, rng),
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        Self {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        let y = g.conv2d(x, b[self.weight], self.stride, self.pad);
        match self.bias {
            Some(bias) => g.add_channel(y, b[bias]),
            None => y,
        }
    }
}

/// Affine map on `[n, in]` rows with weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_f: usize,
        out_f: usize,
        std: f64,
        bias_init: f64,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::randn(&[in_f, out_f], std, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::full(&[out_f], T::lit(bias_init)));
        Self {
            weight,
            bias,
            in_f,
            out_f,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        let y = g.matmul(x, b[self.weight]);
        g.add_suffix(y, b[self.bias])
    }
}

/// Whether normalization layers use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, buffers: &mut ParamSet<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::ones(&[c])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        buffers: &ParamSet<T>,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Var {
        let eps = T::lit(BN_EPS);
        match mode {
            Mode::Eval => {
                let rm = buffers.get(self.running_mean).data();
                let rv = buffers.get(self.running_var).data();
                g.batch_norm(x, b[self.gamma], b[self.beta], Some((rm, rv)), eps)
                    .0
            }
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, b[self.gamma], b[self.beta], None, eps);
                if let Some(stats) = stats {
                    updates.push(BnUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        stats,
                    });
                }
                y
            }
        }
    }
}

/// Folds batch statistics into running estimates with exponential averaging.
pub fn apply_bn_updates<T: Scalar>(buffers: &mut ParamSet<T>, updates: Vec<BnUpdate<T>>) {
    let mom = T::lit(BN_MOMENTUM);
    for u in updates {
        for (r, &s) in buffers.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (T::one() - mom) * *r + mom * s;
        }
        for (r, &s) in buffers.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (T::one() - mom) * *r + mom * s;
        }
    }
}

/// Style-modulated convolution with optional weight demodulation.
///
/// Equivalent to convolving each sample with its own weights
/// `W[o, c] * s[n, c]`, rescaled per output channel to unit norm.
#[derive(Clone, Debug)]
pub struct ModulatedConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub affine: Linear,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub demodulate: bool,
    pub upsample: bool,
}

impl ModulatedConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        style_dim: usize,
        in_c: usize,
        out_c: usize,
        k: usize,
        demodulate: bool,
        upsample: bool,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            Tensor::randn(&[out_c, in_c, k, k], 1.0, rng),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        let affine = Linear::new(
            ps,
            &format!("{name}.affine"),
            style_dim,
            in_c,
            1.0 / (style_dim as f64).sqrt(),
            1.0,
            rng,
        );
        Self {
            weight,
            bias,
            affine,
            in_c,
            out_c,
            k,
            demodulate,
            upsample,
        }
    }

    /// `x[n, in_c, h, w]`, `style[n, style_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, style: Var) -> Var {
        let s = self.affine.forward(g, b, style);
        let x = if self.upsample { g.upsample2(x) } else { x };
        let xs = g.mul_prefix(x, s);
        let w = b[self.weight];
        let mut y = g.conv2d(xs, w, 1, self.k / 2);
        if self.demodulate {
            let w2 = g.square(w);
            let w2 = g.sum_last(w2, &[self.out_c, self.in_c]);
            let w2t = g.transpose(w2);
            let s2 = g.square(s);
            let energy = g.matmul(s2, w2t);
            let energy = g.add_scalar(energy, T::lit(1e-8));
            let d = g.powf(energy, T::lit(-0.5));
            y = g.mul_prefix(y, d);
        }
        g.add_channel(y, b[self.bias])
    }
}
