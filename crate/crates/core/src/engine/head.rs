use crate::diffusion::unet::{ParamBinder, ParamStore};
use crate::error::{DiecError, Result};
use crate::numeric::tape::{Real, Tape, Var};
use crate::numeric::{Matrix, Rng, Tensor};

/// `z = e + W2 relu(W1 e + b1) + b2` with square weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualHead {
    dim: usize,
    params: ParamStore,
}

pub const HEAD_PARAMS: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl ResidualHead {
    /// Random first layer, zero second layer, so the head starts as the identity.
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / dim.max(1) as f64).sqrt();
        let w1: Vec<f32> = (0..dim * dim).map(|_| (rng.normal() * scale) as f32).collect();
        let mut params = ParamStore::default();
        params.insert("w1", Tensor::new(vec![dim, dim], w1).expect("sized"));
        params.insert("b1", Tensor::zeros(vec![dim]));
        params.insert("w2", Tensor::zeros(vec![dim, dim]));
        params.insert("b2", Tensor::zeros(vec![dim]));
        ResidualHead { dim, params }
    }

    pub fn zeros(dim: usize) -> Self {
        let mut params = ParamStore::default();
        params.insert("w1", Tensor::zeros(vec![dim, dim]));
        params.insert("b1", Tensor::zeros(vec![dim]));
        params.insert("w2", Tensor::zeros(vec![dim, dim]));
        params.insert("b2", Tensor::zeros(vec![dim]));
        ResidualHead { dim, params }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let dim = params.get("b1").map(|t| t.numel()).ok_or_else(|| DiecError::param("head lacks b1"))?;
        for (name, shape) in HEAD_PARAMS.iter().zip([vec![dim, dim], vec![dim], vec![dim, dim], vec![dim]]) {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(DiecError::shape(format!("head parameter {name} missing or misshapen"))),
            }
        }
        Ok(ResidualHead { dim, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records `e + g(e)` for `e[N, dim]`.
    pub fn on_tape<F: Real>(&self, tape: &mut Tape<F>, binder: &mut ParamBinder<'_>, e: Var) -> Result<Var> {
        if tape.shape(e).len() != 2 || tape.shape(e)[1] != self.dim {
            return Err(DiecError::shape(format!("head expects [N, {}], got {:?}", self.dim, tape.shape(e))));
        }
        let w1 = binder.var(tape, "w1")?;
        let b1 = binder.var(tape, "b1")?;
        let w2 = binder.var(tape, "w2")?;
        let b2 = binder.var(tape, "b2")?;
        let h = tape.linear(e, w1, b1)?;
        let h = tape.relu(h);
        let g = tape.linear(h, w2, b2)?;
        tape.add(e, g)
    }
}

/// `z = e + g(e)` evaluated in `f64`.
pub fn residual_embed(e: &Matrix, head: &ResidualHead) -> Result<Matrix> {
    let d = head.dim;
    if e.cols() != d {
        return Err(DiecError::shape(format!("embeddings have {} columns, head expects {d}", e.cols())));
    }
    let p = |name: &str| head.params.get(name).expect("validated").data();
    let (w1, b1, w2, b2) = (p("w1"), p("b1"), p("w2"), p("b2"));
    let mut z = e.clone();
    let mut h = vec![0.0f64; d];
    for i in 0..e.rows() {
        let row = e.row(i);
        for o in 0..d {
            let s: f64 = (0..d).map(|j| w1[o * d + j] as f64 * row[j]).sum::<f64>() + b1[o] as f64;
            h[o] = s.max(0.0);
        }
        let zr = z.row_mut(i);
        for o in 0..d {
            zr[o] += (0..d).map(|j| w2[o * d + j] as f64 * h[j]).sum::<f64>() + b2[o] as f64;
        }
    }
    Ok(z)
}
