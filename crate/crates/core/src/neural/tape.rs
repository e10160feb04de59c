//! Reverse sweeps through the recorded MLP ops.
//!
//! The tape is generic over the scalar, so running it with `S = Dual`
//! (after a `Dual` forward pass) differentiates the reverse sweep itself and
//! yields Hessian-vector products.

use ndarray::{Array1, Array2, Axis, Zip};

use super::scalar::{lane, Real};
use super::Params;

pub(crate) enum Op<S: Real> {
    Affine { layer: usize, input: Array2<S> },
    /// Stores the local slope (1 or the leak) per element.
    LeakyRelu { slope: Array2<S::Lane> },
    LayerNorm { norm: usize, z: Array2<S>, rstd: Array1<S> },
    Dropout { mask: Array2<S::Lane> },
}

/// Recorded forward pass of one batch.
pub struct Tape<S: Real> {
    pub(crate) ops: Vec<Op<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Tape { ops: Vec::new() }
    }
}

/// Parameter-gradient contribution handed to the sink during a sweep.
pub enum ParamGrad<'a, S> {
    /// `grad` is ∂L/∂(layer output); weight gradient is `gradᵀ · input`.
    Affine {
        layer: usize,
        input: &'a Array2<S>,
        grad: &'a Array2<S>,
    },
    /// `grad` is ∂L/∂(γ z + β).
    Norm {
        norm: usize,
        z: &'a Array2<S>,
        grad: &'a Array2<S>,
    },
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, op: Op<S>) {
        self.ops.push(op);
    }

    /// Propagates the output cotangent `g` back to the network input.
    pub fn backward(
        &self,
        params: &Params<S::Lane>,
        mut g: Array2<S>,
        mut sink: impl FnMut(ParamGrad<'_, S>),
    ) -> Array2<S> {
        for op in self.ops.iter().rev() {
            g = match op {
                Op::Affine { layer, input } => {
                    sink(ParamGrad::Affine {
                        layer: *layer,
                        input,
                        grad: &g,
                    });
                    S::matmul(&g, &params.linears[*layer].w)
                }
                Op::LeakyRelu { slope } => {
                    Zip::from(&mut g).and(slope).for_each(|g, &s| *g = g.scale(s));
                    g
                }
                Op::Dropout { mask } => {
                    Zip::from(&mut g).and(mask).for_each(|g, &m| *g = g.scale(m));
                    g
                }
                Op::LayerNorm { norm, z, rstd } => {
                    sink(ParamGrad::Norm { norm: *norm, z, grad: &g });
                    layer_norm_backward(&params.norms[*norm].gamma, z, rstd, &g)
                }
            };
        }
        g
    }
}

/// dx = rstd · (dz − mean(dz) − z · mean(dz ⊙ z)), with dz = g ⊙ γ.
pub(crate) fn layer_norm_backward<S: Real>(
    gamma: &Array1<S::Lane>,
    z: &Array2<S>,
    rstd: &Array1<S>,
    g: &Array2<S>,
) -> Array2<S> {
    let width = z.ncols();
    let inv_n: S::Lane = lane(1.0 / width as f64);
    let mut out = Array2::from_elem(z.raw_dim(), S::zero());
    for (((mut o, zr), gr), &r) in out
        .axis_iter_mut(Axis(0))
        .zip(z.axis_iter(Axis(0)))
        .zip(g.axis_iter(Axis(0)))
        .zip(rstd.iter())
    {
        let mut mean_dz = S::zero();
        let mut mean_dzz = S::zero();
        for ((&gi, &zi), &ga) in gr.iter().zip(zr.iter()).zip(gamma.iter()) {
            let dz = gi.scale(ga);
            mean_dz += dz;
            mean_dzz += dz * zi;
        }
        mean_dz = mean_dz.scale(inv_n);
        mean_dzz = mean_dzz.scale(inv_n);
        for (((oi, &gi), &zi), &ga) in o.iter_mut().zip(gr.iter()).zip(zr.iter()).zip(gamma.iter()) {
            *oi = r * (gi.scale(ga) - mean_dz - zi * mean_dzz);
        }
    }
    out
}
