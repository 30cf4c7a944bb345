//! Finite-difference verification of backward rules.
//!
//! Runs in f64 so the central-difference truncation error (~h²) dominates
//! roundoff. The caller supplies a builder that maps one tracked input to a
//! scalar loss; everything else the builder creates is held fixed.

use super::graph::{Graph, NodeId};
use super::{Precision, Tensor};
use crate::error::TensorError;

const STEP: f64 = 1e-5;

/// Max over elements of `|analytic - numeric| / max(1, |analytic|)`.
pub fn max_rel_err<F>(shape: &[usize], data: &[f64], build: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    let mut g = Graph::new(Precision::F64);
    let x = g.leaf(Tensor::from_vec(shape.to_vec(), data.to_vec())?.tracked());
    let loss = build(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g
        .grad(x)
        .ok_or_else(|| TensorError::ContractViolation("tracked input has no grad".into()))?
        .to_vec();

    let eval = |i: usize, v: f64| -> Result<f64, TensorError> {
        let mut probe = data.to_vec();
        probe[i] = v;
        let mut g = Graph::new(Precision::F64);
        let x = g.leaf(Tensor::from_vec(shape.to_vec(), probe)?);
        let loss = build(&mut g, x)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    for i in 0..data.len() {
        let plus = eval(i, data[i] + STEP)?;
        let minus = eval(i, data[i] - STEP)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    const TOL: f64 = 1e-6;

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        (0..n).map(|_| rng.next_f64() * 1.6 - 0.8).collect()
    }

    fn check<F>(shape: &[usize], seed: u64, build: F)
    where
        F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
    {
        let n: usize = shape.iter().product();
        let data = sample(n, seed);
        let err = max_rel_err(shape, &data, build).unwrap();
        assert!(err < TOL, "max rel err {err:.3e} >= {TOL:.0e}");
    }

    #[test]
    fn matmul_lhs() {
        check(&[3, 4], 1, |g, x| {
            let w = g.input(vec![4, 2], sample(8, 100))?;
            let y = g.matmul(x, w)?;
            g.sum(y)
        });
    }

    #[test]
    fn matmul_rhs() {
        check(&[4, 2], 2, |g, x| {
            let a = g.input(vec![3, 4], sample(12, 101))?;
            let y = g.matmul(a, x)?;
            g.sum(y)
        });
    }

    #[test]
    fn add_sub_mul() {
        check(&[2, 3], 3, |g, x| {
            let other = g.input(vec![2, 3], sample(6, 102))?;
            let a = g.add(x, other)?;
            let s = g.sub(a, x)?;
            let m = g.mul(s, x)?;
            g.sum(m)
        });
    }

    #[test]
    fn mul_self_reuse() {
        check(&[5], 4, |g, x| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        });
    }

    #[test]
    fn add_bias_input_and_bias() {
        check(&[3, 4], 5, |g, x| {
            let b = g.input(vec![4], sample(4, 103))?;
            let y = g.add_bias(x, b)?;
            g.sum(y)
        });
        check(&[4], 6, |g, x| {
            let a = g.input(vec![3, 4], sample(12, 104))?;
            let y = g.add_bias(a, x)?;
            g.sum(y)
        });
    }

    #[test]
    fn scalar_ops() {
        check(&[2, 2], 7, |g, x| {
            let a = g.add_scalar(x, 0.37)?;
            let b = g.mul_scalar(a, -1.9)?;
            g.sum(b)
        });
    }

    #[test]
    fn scale_by_both_sides() {
        check(&[2, 3], 8, |g, x| {
            let s = g.input(vec![1], vec![1.3])?;
            let y = g.scale_by(x, s)?;
            g.sum(y)
        });
        check(&[1], 9, |g, x| {
            let a = g.input(vec![2, 3], sample(6, 105))?;
            let y = g.scale_by(a, x)?;
            g.sum(y)
        });
    }

    #[test]
    fn exp_gelu() {
        check(&[2, 3], 10, |g, x| {
            let e = g.exp(x)?;
            let h = g.gelu(e)?;
            g.sum(h)
        });
    }

    #[test]
    fn clamp_away_from_kinks() {
        // data in (-0.8, 0.8); keep bounds > STEP away from any sample
        let data = vec![-0.75, -0.3, 0.0, 0.31, 0.74, 0.2];
        let err = max_rel_err(&[6], &data, |g, x| {
            let c = g.clamp(x, -0.5, 0.5)?;
            let m = g.mul(c, c)?;
            g.sum(m)
        })
        .unwrap();
        assert!(err < TOL, "{err:.3e}");
    }

    #[test]
    fn softmax_axes() {
        check(&[3, 4], 11, |g, x| {
            let s = g.softmax(x, 1)?;
            let w = g.input(vec![3, 4], sample(12, 106))?;
            let m = g.mul(s, w)?;
            g.sum(m)
        });
        check(&[3, 4], 12, |g, x| {
            let s = g.softmax(x, 0)?;
            let w = g.input(vec![3, 4], sample(12, 107))?;
            let m = g.mul(s, w)?;
            g.sum(m)
        });
    }

    #[test]
    fn log_softmax() {
        check(&[2, 5], 13, |g, x| {
            let s = g.log_softmax(x, 1)?;
            let w = g.input(vec![2, 5], sample(10, 108))?;
            let m = g.mul(s, w)?;
            g.sum(m)
        });
    }

    #[test]
    fn layernorm() {
        check(&[3, 6], 14, |g, x| {
            let y = g.layernorm(x, 1e-5)?;
            let w = g.input(vec![3, 6], sample(18, 109))?;
            let m = g.mul(y, w)?;
            g.sum(m)
        });
    }

    #[test]
    fn l2_normalize_rows() {
        check(&[3, 4], 15, |g, x| {
            let y = g.l2_normalize(x, 1)?;
            let w = g.input(vec![3, 4], sample(12, 110))?;
            let m = g.mul(y, w)?;
            g.sum(m)
        });
    }

    #[test]
    fn structural_ops() {
        check(&[4, 6], 16, |g, x| {
            let t = g.transpose(x)?;
            let r = g.reshape(t, vec![4, 6])?;
            let ga = g.gather_rows(r, &[2, 0, 2])?;
            let sr = g.slice_rows(ga, 1, 2)?;
            let sc = g.slice_cols(sr, 1, 4)?;
            let cat = g.concat_cols(&[sc, sc])?;
            let stk = g.stack_rows(&[cat, cat])?;
            let mr = g.mean_rows(stk)?;
            g.sum(mr)
        });
    }

    #[test]
    fn composite_mlp_chain() {
        check(&[2, 8], 17, |g, x| {
            let w1 = g.input(vec![8, 16], sample(128, 111))?;
            let b1 = g.input(vec![16], sample(16, 112))?;
            let w2 = g.input(vec![16, 4], sample(64, 113))?;
            let h = g.matmul(x, w1)?;
            let h = g.add_bias(h, b1)?;
            let h = g.gelu(h)?;
            let h = g.layernorm(h, 1e-5)?;
            let y = g.matmul(h, w2)?;
            let p = g.log_softmax(y, 1)?;
            let mask = g.input(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])?;
            let picked = g.mul(p, mask)?;
            let s = g.sum(picked)?;
            g.mul_scalar(s, -0.5)
        });
    }
}
