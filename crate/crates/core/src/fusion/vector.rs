//! Fusion of two pooled vectors, and logit averaging.

use crate::error::{Error, Result};
use crate::nn::{Forward, ParamBuilder, ParamId};
use crate::tensor::{Tape, Tensor, Var};

/// `y = W₂ᵀ σ(W₁ᵀ [x₁ ‖ x₂])` on row vectors: `[x₁ ‖ x₂] · W₁ → σ → · W₂`.
pub fn fuse_concat_mlp(tape: &mut Tape, x1: Var, x2: Var, w1: Var, w2: Var) -> Result<Var> {
    let x = tape.concat_cols(&[x1, x2])?;
    let h = tape.matmul(x, w1)?;
    let h = tape.sigmoid(h)?;
    tape.matmul(h, w2)
}

/// Block-decomposed bilinear map `y = C (𝒟 ×₁ (x₁ᵀA) ×₂ (x₂ᵀB))`.
///
/// `core` is 𝒟 `[L×M×N]` flattened to `[(L·M) × N]` in row-major order, and
/// `c` is `[K × N]`.
pub fn fuse_block(tape: &mut Tape, x1: Var, x2: Var, a: Var, b: Var, core: Var, c: Var) -> Result<Var> {
    let u = tape.matmul(x1, a)?; // 1×L
    let v = tape.matmul(x2, b)?; // 1×M
    let (l, m) = (tape.value(u).cols(), tape.value(v).cols());
    if tape.value(core).rows() != l * m {
        return Err(Error::Shape {
            op: "fuse_block",
            lhs: vec![l, m],
            rhs: tape.shape(core).to_vec(),
        });
    }
    let ut = tape.transpose(u)?;
    let outer = tape.matmul(ut, v)?; // L×M
    let flat = tape.reshape(outer, vec![1, l * m])?;
    let z = tape.matmul(flat, core)?; // 1×N
    let ct = tape.transpose(c)?;
    tape.matmul(z, ct)
}

fn row(x: &[f64]) -> Result<Tensor> {
    Tensor::row_vector(x.to_vec())
}

/// [`fuse_concat_mlp`] on plain values.
pub fn concat_mlp_values(x1: &[f64], x2: &[f64], w1: &Tensor, w2: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = [row(x1)?, row(x2)?, w1.clone(), w2.clone()].map(|t| tape.constant(t));
    let y = fuse_concat_mlp(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok(tape.value(y).data().to_vec())
}

/// [`fuse_block`] on plain values; `core` has shape `[L, M, N]`.
pub fn block_values(
    x1: &[f64],
    x2: &[f64],
    a: &Tensor,
    b: &Tensor,
    core: &Tensor,
    c: &Tensor,
) -> Result<Vec<f64>> {
    let &[l, m, n] = core.shape() else {
        return Err(Error::contract(format!(
            "block core must be 3-D, got {:?}",
            core.shape()
        )));
    };
    let mut tape = Tape::new();
    let flat = core.reshape(vec![l * m, n])?;
    let vars = [row(x1)?, row(x2)?, a.clone(), b.clone(), flat, c.clone()].map(|t| tape.constant(t));
    let y = fuse_block(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?;
    Ok(tape.value(y).data().to_vec())
}

/// Element-wise mean of two logit vectors.
pub fn ensemble_average(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "ensemble_average",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect())
}

#[derive(Clone, Debug)]
pub struct ConcatMlp {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl ConcatMlp {
    pub fn new(pb: &mut ParamBuilder<'_>, i: usize, j: usize, hidden: usize, out: usize) -> Result<Self> {
        let mut sub = pb.sub("concat_mlp");
        Ok(ConcatMlp {
            w1: sub.weight("w1", i + j, hidden)?,
            w2: sub.weight("w2", hidden, out)?,
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x1: Var, x2: Var) -> Result<Var> {
        let (w1, w2) = (fwd.p(self.w1), fwd.p(self.w2));
        fuse_concat_mlp(&mut fwd.tape, x1, x2, w1, w2)
    }
}

#[derive(Clone, Debug)]
pub struct BlockFusion {
    pub a: ParamId,
    pub b: ParamId,
    pub core: ParamId,
    pub c: ParamId,
}

impl BlockFusion {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        i: usize,
        j: usize,
        (l, m, n): (usize, usize, usize),
        k: usize,
    ) -> Result<Self> {
        let mut sub = pb.sub("block");
        Ok(BlockFusion {
            a: sub.weight("a", i, l)?,
            b: sub.weight("b", j, m)?,
            core: sub.weight("core", l * m, n)?,
            c: sub.weight("c", k, n)?,
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x1: Var, x2: Var) -> Result<Var> {
        let [a, b, core, c] = [self.a, self.b, self.core, self.c].map(|id| fwd.p(id));
        fuse_block(&mut fwd.tape, x1, x2, a, b, core, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_mlp_hand_cases() {
        let w1 = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let w2 = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        assert_eq!(concat_mlp_values(&[0.0], &[0.0], &w1, &w2).unwrap(), vec![1.0]);

        let w1 = Tensor::zeros(&[3, 2]);
        let w2 = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            concat_mlp_values(&[0.3, -1.0], &[2.0], &w1, &w2).unwrap(),
            vec![2.0, 3.0]
        );

        let w1 = Tensor::full(&[3, 2], 0.7);
        let w2 = Tensor::zeros(&[2, 2]);
        assert_eq!(
            concat_mlp_values(&[0.3, -1.0], &[2.0], &w1, &w2).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn block_is_bilinear() {
        let a = Tensor::matrix(2, 2, vec![0.5, -1.0, 0.2, 0.3]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1.0, 0.1, -0.4, 0.9]).unwrap();
        let core = Tensor::new(vec![2, 2, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let c = Tensor::matrix(1, 1, vec![1.5]).unwrap();
        let zero = block_values(&[0.0, 0.0], &[1.0, 2.0], &a, &b, &core, &c).unwrap();
        assert_eq!(zero, vec![0.0]);
        let y = block_values(&[1.0, -2.0], &[1.0, 2.0], &a, &b, &core, &c).unwrap();
        let y3 = block_values(&[3.0, -6.0], &[1.0, 2.0], &a, &b, &core, &c).unwrap();
        assert!((y3[0] - 3.0 * y[0]).abs() < 1e-12);
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_average(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), vec![0.3, -2.0]);
        assert_eq!(ensemble_average(&[2.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert!(ensemble_average(&[1.0], &[1.0, 2.0]).is_err());
    }
}
