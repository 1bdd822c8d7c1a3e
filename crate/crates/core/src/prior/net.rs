//! Generator architectures.

use anchor_nn::layers::he_std;
use anchor_nn::{Bound, Conv2d, Graph, Linear, ModulatedConv2d, ParamId, ParamSet, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LatentKind, LatentSpec, PriorConfig};

const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Mapping head plus per-layer style modulation; W+ latents.
    Style,
    /// A single Gaussian latent through a linear stem and plain convolutions.
    Plain,
}

#[derive(Clone, Debug)]
pub(crate) enum Synthesis {
    Style {
        mapping: Vec<Linear>,
        constant: ParamId,
        convs: Vec<ModulatedConv2d>,
    },
    Plain {
        stem: Linear,
        stem_channels: usize,
        convs: Vec<(Conv2d, bool)>,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Arch {
    synthesis: Synthesis,
    to_rgb: Conv2d,
}

impl Arch {
    pub(crate) fn build<T: Scalar, R: Rng + ?Sized>(
        config: &PriorConfig,
        ps: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Self {
        let dim = config.latent_dim;
        let ch = &config.channels;
        // (in, out, upsample) for every convolution, coarse to fine.
        let mut plan = vec![(ch[0], ch[0], false)];
        for s in 1..ch.len() {
            plan.push((ch[s - 1], ch[s], true));
            plan.push((ch[s], ch[s], false));
        }
        let synthesis = match config.backend {
            Backend::Style => {
                let mapping = (0..config.mapping_layers)
                    .map(|i| {
                        Linear::new(
                            ps,
                            &format!("mapping.{i}"),
                            dim,
                            dim,
                            he_std(dim, SLOPE),
                            0.0,
                            rng,
                        )
                    })
                    .collect();
                let constant = ps.add("const", Tensor::randn(&[1, ch[0], 4, 4], 1.0, rng));
                let convs = plan
                    .iter()
                    .enumerate()
                    .map(|(i, &(ci, co, up))| {
                        ModulatedConv2d::new(ps, &format!("synth.{i}"), dim, ci, co, 3, true, up, rng)
                    })
                    .collect();
                Synthesis::Style {
                    mapping,
                    constant,
                    convs,
                }
            }
            Backend::Plain => {
                let stem = Linear::new(ps, "stem", dim, ch[0] * 16, he_std(dim, SLOPE), 0.0, rng);
                let convs = plan
                    .iter()
                    .enumerate()
                    .map(|(i, &(ci, co, up))| {
                        (
                            Conv2d::new(
                                ps,
                                &format!("synth.{i}"),
                                ci,
                                co,
                                3,
                                1,
                                true,
                                he_std(ci * 9, SLOPE),
                                rng,
                            ),
                            up,
                        )
                    })
                    .collect();
                Synthesis::Plain {
                    stem,
                    stem_channels: ch[0],
                    convs,
                }
            }
        };
        let cf = *ch.last().expect("validated");
        let to_rgb = Conv2d::new(ps, "to_rgb", cf, 3, 1, 1, true, 1.0 / (cf as f64).sqrt(), rng);
        Self { synthesis, to_rgb }
    }

    /// Pixel normalization followed by the mapping layers.
    pub(crate) fn map<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, z: Var) -> Var {
        let Synthesis::Style { mapping, .. } = &self.synthesis else {
            return z;
        };
        let [n, d] = [g.shape(z)[0], g.shape(z)[1]];
        let sq = g.square(z);
        let ms = g.sum_last(sq, &[n]);
        let ms = g.scale(ms, T::lit(1.0 / d as f64));
        let ms = g.add_scalar(ms, T::lit(1e-8));
        let inv = g.powf(ms, T::lit(-0.5));
        let mut w = g.mul_prefix(z, inv);
        for layer in mapping {
            let h = layer.forward(g, b, w);
            w = g.leaky_relu(h, T::lit(SLOPE));
        }
        w
    }

    pub(crate) fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        codes: Var,
        spec: &LatentSpec,
    ) -> Var {
        let n = g.shape(codes)[0];
        let flat = g.reshape(codes, &[n, spec.num_slots * spec.dim]);
        let slope = T::lit(SLOPE);
        match &self.synthesis {
            Synthesis::Style { constant, convs, .. } => {
                debug_assert_eq!(spec.kind, LatentKind::WPlus);
                let mut x = g.repeat_batch(b[*constant], n);
                for (i, conv) in convs.iter().enumerate() {
                    let style = g.narrow(flat, i * spec.dim, spec.dim);
                    let y = conv.forward(g, b, x, style);
                    x = g.leaky_relu(y, slope);
                }
                x
            }
            Synthesis::Plain {
                stem,
                stem_channels,
                convs,
            } => {
                let h = stem.forward(g, b, flat);
                let h = g.reshape(h, &[n, *stem_channels, 4, 4]);
                let mut x = g.leaky_relu(h, slope);
                for (conv, up) in convs {
                    if *up {
                        x = g.upsample2(x);
                    }
                    let y = conv.forward(g, b, x);
                    x = g.leaky_relu(y, slope);
                }
                x
            }
        }
    }

    pub(crate) fn to_rgb<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, f: Var) -> Var {
        let y = self.to_rgb.forward(g, b, f);
        g.tanh(y)
    }
}
