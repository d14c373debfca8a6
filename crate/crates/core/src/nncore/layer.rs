use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Elu,
    /// `x + sin²(x)`.
    Snake,
    Identity,
}

impl Activation {
    /// Returns `(act(x), act'(x))`.
    #[inline]
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    let e = x.exp();
                    (e - 1.0, e)
                }
            }
            Activation::Snake => {
                let s = x.sin();
                (x + s * s, 1.0 + (2.0 * x).sin())
            }
            Activation::Identity => (x, 1.0),
        }
    }

    pub fn apply(self, g: &mut Graph, v: Var) -> Var {
        if self == Activation::Identity {
            return v;
        }
        g.map(v, move |x| self.eval(x))
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "snake" => Ok(Activation::Snake),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine layer `act(x·(W ⊙ M) + b)`, with an optional fixed binary mask `M`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub mask: Option<Matrix>,
    in_dim: usize,
    out_dim: usize,
}

impl DenseLayer {
    /// Registers a new layer in `store` with He-uniform weights and zero bias.
    ///
    /// For masked layers the fan-in is counted per output column over the
    /// unmasked entries only.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        mask: Option<Matrix>,
        rng: &mut R,
    ) -> Self {
        if let Some(m) = &mask {
            assert_eq!(m.shape(), (in_dim, out_dim), "mask shape for {name}");
        }
        let gain = match activation {
            Activation::Relu | Activation::Elu => 6.0,
            Activation::Snake | Activation::Identity => 3.0,
        };
        let fan_in: Vec<f64> = (0..out_dim)
            .map(|j| match &mask {
                Some(m) => (0..in_dim).filter(|&i| m.get(i, j) != 0.0).count().max(1) as f64,
                None => in_dim.max(1) as f64,
            })
            .collect();
        let w = Matrix::from_fn(in_dim, out_dim, |i, j| {
            let live = mask.as_ref().map_or(true, |m| m.get(i, j) != 0.0);
            let bound = (gain / fan_in[j]).sqrt();
            let u: f64 = rng.random_range(-bound..bound);
            if live {
                u
            } else {
                0.0
            }
        });
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim));
        DenseLayer {
            weight,
            bias,
            activation,
            mask,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Records the layer on `g`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Var {
        let w = g.param(store, self.weight);
        let w = match &self.mask {
            Some(m) => {
                let mv = g.constant(m.clone());
                g.mul(w, mv)
            }
            None => w,
        };
        let b = g.param(store, self.bias);
        let h = g.matmul(input, w);
        let h = g.add_row(h, b);
        self.activation.apply(g, h)
    }
}

/// Evaluates `layer` on the rows of `input` without recording gradients.
pub fn dense_forward(layer: &DenseLayer, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
    if input.cols() != layer.in_dim {
        return Err(Error::shape("dense_forward", layer.in_dim, input.cols()));
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = layer.forward(&mut g, store, x);
    Ok(g.value(y).clone())
}

/// A stack of dense layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<DenseLayer>,
}

impl Sequential {
    /// Builds `widths.len() - 1` layers; hidden layers use `hidden`, the last one `last`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        masks: Option<Vec<Matrix>>,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "Sequential needs at least in/out widths");
        let n = widths.len() - 1;
        let mut masks = masks.map(|m| m.into_iter());
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { last } else { hidden };
                let mask = masks.as_mut().and_then(|m| m.next());
                DenseLayer::new(
                    store,
                    &format!("{name}.{k}"),
                    widths[k],
                    widths[k + 1],
                    act,
                    mask,
                    rng,
                )
            })
            .collect();
        Sequential { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Var {
        self.layers
            .iter()
            .fold(input, |h, layer| layer.forward(g, store, h))
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }
}
