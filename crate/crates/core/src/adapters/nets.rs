//! Encoder, regressor and discriminator networks.

use anchor_nn::layers::he_std;
use anchor_nn::{BatchNorm2d, BnUpdate, Bound, Conv2d, Graph, Linear, Mode, ParamSet, Scalar, Tensor, Var};
use rand::Rng;

use crate::prior::{LatentKind, LatentSpec};

const SLOPE: f64 = 0.2;

/// Hidden widths of the regressor before the width factor is applied.
pub const REGRESSOR_WIDTHS: [usize; 5] = [128, 64, 64, 32, 32];

fn lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::lit(SLOPE))
}

/// Generator resolution fed by each W+ slot of a style prior.
fn slot_resolution(slot: usize) -> usize {
    4 << slot.div_ceil(2)
}

/// Strided pyramid with top-down fusion and per-slot style heads.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    stem: Conv2d,
    stages: Vec<Conv2d>,
    laterals: [Conv2d; 3],
    /// Downsampling convolutions shared by the heads of each pyramid level.
    level_convs: [Vec<Conv2d>; 3],
    /// `(level, head)` per slot.
    heads: Vec<(usize, Linear)>,
    spec: LatentSpec,
    width: usize,
    level_sizes: [usize; 3],
}

impl EncoderNet {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        in_c: usize,
        resolution: usize,
        width: usize,
        spec: LatentSpec,
        rng: &mut R,
    ) -> Self {
        let ws = [2 * width, 4 * width, 4 * width, 4 * width];
        let stem = Conv2d::new(ps, "stem", in_c, width, 3, 1, true, he_std(in_c * 9, SLOPE), rng);
        let mut prev = width;
        let stages = ws
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(
                    ps,
                    &format!("stage.{i}"),
                    prev,
                    c,
                    3,
                    2,
                    true,
                    he_std(prev * 9, SLOPE),
                    rng,
                );
                prev = c;
                conv
            })
            .collect();
        let lat = 2 * width;
        // Pyramid levels come from stages 2, 3 and 4 (fine to coarse).
        let laterals = [1, 2, 3].map(|s| {
            Conv2d::new(
                ps,
                &format!("lateral.{s}"),
                ws[s],
                lat,
                1,
                1,
                true,
                1.0 / (ws[s] as f64).sqrt(),
                rng,
            )
        });
        let level_sizes = [resolution / 4, resolution / 8, resolution / 16];
        let level_convs = [0, 1, 2].map(|l| {
            let mut size = level_sizes[l];
            let mut convs = Vec::new();
            while size > 2 {
                let i = convs.len();
                convs.push(Conv2d::new(
                    ps,
                    &format!("level.{l}.{i}"),
                    lat,
                    lat,
                    3,
                    2,
                    true,
                    he_std(lat * 9, SLOPE),
                    rng,
                ));
                size /= 2;
            }
            convs
        });
        let heads = (0..spec.num_slots)
            .map(|s| {
                let level = match spec.kind {
                    LatentKind::Z => 0,
                    LatentKind::WPlus => match slot_resolution(s) {
                        r if r <= 8 => 2,
                        16 => 1,
                        _ => 0,
                    },
                };
                let flat = lat * level_sizes[level].min(2).pow(2);
                // Small heads so that a fresh encoder starts near the offset latent.
                let head = Linear::new(
                    ps,
                    &format!("head.{s}"),
                    flat,
                    spec.dim,
                    0.1 * he_std(flat, 1.0),
                    0.0,
                    rng,
                );
                (level, head)
            })
            .collect();
        Self {
            stem,
            stages,
            laterals,
            level_convs,
            heads,
            spec,
            width,
            level_sizes,
        }
    }

    /// `x[n, in_c, R, R]` to latents `[n, num_slots, dim]`, before the offset.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        let n = g.shape(x)[0];
        let h = self.stem.forward(g, b, x);
        let mut h = lrelu(g, h);
        let mut taps = Vec::new();
        for conv in &self.stages {
            let y = conv.forward(g, b, h);
            h = lrelu(g, y);
            taps.push(h);
        }
        let p_coarse = self.laterals[2].forward(g, b, taps[3]);
        let up = g.upsample2(p_coarse);
        let l1 = self.laterals[1].forward(g, b, taps[2]);
        let p_mid = g.add(l1, up);
        let up = g.upsample2(p_mid);
        let l0 = self.laterals[0].forward(g, b, taps[1]);
        let p_fine = g.add(l0, up);
        let levels = [p_fine, p_mid, p_coarse];
        let lat = 2 * self.width;
        let mut reduced = [levels[0]; 3];
        for l in 0..3 {
            let mut p = levels[l];
            for conv in &self.level_convs[l] {
                let y = conv.forward(g, b, p);
                p = lrelu(g, y);
            }
            let side = self.level_sizes[l].min(2);
            reduced[l] = g.reshape(p, &[n, lat * side * side]);
        }
        let codes: Vec<Var> = self
            .heads
            .iter()
            .map(|(l, head)| head.forward(g, b, reduced[*l]))
            .collect();
        let flat = g.concat(&codes);
        g.reshape(flat, &[n, self.spec.num_slots, self.spec.dim])
    }
}

/// Fully convolutional regressor: normalization and rectifier after every
/// convolution except the last.
#[derive(Clone, Debug)]
pub struct RegressorNet {
    upsample: usize,
    hidden: Vec<(Conv2d, BatchNorm2d)>,
    out: Conv2d,
}

impl RegressorNet {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        buffers: &mut ParamSet<T>,
        in_c: usize,
        out_c: usize,
        widths: &[usize],
        upsample: usize,
        rng: &mut R,
    ) -> Self {
        let mut prev = in_c;
        let hidden = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(
                    ps,
                    &format!("conv.{i}"),
                    prev,
                    c,
                    3,
                    1,
                    false,
                    he_std(prev * 9, 0.0),
                    rng,
                );
                let bn = BatchNorm2d::new(ps, buffers, &format!("bn.{i}"), c);
                prev = c;
                (conv, bn)
            })
            .collect();
        let out = Conv2d::new(
            ps,
            "out",
            prev,
            out_c,
            3,
            1,
            true,
            1.0 / ((prev * 9) as f64).sqrt(),
            rng,
        );
        Self {
            upsample,
            hidden,
            out,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        buffers: &ParamSet<T>,
        f: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Var {
        let mut h = f;
        let mut factor = self.upsample;
        while factor > 1 {
            h = g.upsample2(h);
            factor /= 2;
        }
        for (conv, bn) in &self.hidden {
            let y = conv.forward(g, b, h);
            let y = bn.forward(g, b, buffers, y, mode, updates);
            h = g.relu(y);
        }
        self.out.forward(g, b, h)
    }
}

/// Strided convolutional realism classifier over RGB images.
#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl DiscriminatorNet {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        resolution: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let widths = [width, 2 * width, 4 * width, 4 * width];
        let mut prev = 3;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(
                    ps,
                    &format!("conv.{i}"),
                    prev,
                    c,
                    3,
                    2,
                    true,
                    he_std(prev * 9, SLOPE),
                    rng,
                );
                prev = c;
                conv
            })
            .collect();
        let side = (resolution / 16).max(1);
        let flat = prev * side * side;
        let head = Linear::new(ps, "head", flat, 1, 1.0 / (flat as f64).sqrt(), 0.0, rng);
        Self { convs, head }
    }

    /// Realism logits `[n]` for `x[n, 3, R, R]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        let n = g.shape(x)[0];
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, b, h);
            h = lrelu(g, y);
        }
        let numel = g.value(h).numel();
        let flat = g.reshape(h, &[n, numel / n]);
        let logits = self.head.forward(g, b, flat);
        g.reshape(logits, &[n])
    }
}

/// Runs a discriminator on a plain tensor.
pub fn score<T: Scalar>(net: &DiscriminatorNet, params: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let xv = g.input(x.clone());
    let s = net.forward(&mut g, &b, xv);
    g.value(s).clone()
}
