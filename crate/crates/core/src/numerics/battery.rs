//! Finite-difference battery over every differentiable primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, Conv1dAttrs, Graph, Tensor, Var};
use crate::error::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so relu/max kinks are never straddled.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

type Prim = Box<dyn Fn(&mut Graph<f64>, Var, &[Tensor<f64>]) -> Result<Var>>;

/// Name, shape of the differentiated input, constant shapes and the op.
type Case = (&'static str, Vec<usize>, Vec<Vec<usize>>, Prim);

fn primitives() -> Vec<Case> {
    vec![
        (
            "matmul",
            vec![3, 4],
            vec![vec![4, 2]],
            Box::new(|g, x, c| {
                let b = g.constant(c[0].clone());
                let y = g.matmul(x, b)?;
                Ok(g.sum_squares(y))
            }),
        ),
        (
            "matmul_rhs",
            vec![4, 2],
            vec![vec![3, 4]],
            Box::new(|g, x, c| {
                let a = g.constant(c[0].clone());
                let y = g.matmul(a, x)?;
                Ok(g.sum_squares(y))
            }),
        ),
        (
            "add_mul_sub",
            vec![6],
            vec![vec![6]],
            Box::new(|g, x, c| {
                let b = g.constant(c[0].clone());
                let s = g.add(x, b)?;
                let m = g.mul(s, x)?;
                let d = g.sub(m, b)?;
                Ok(g.sum_squares(d))
            }),
        ),
        (
            "scalar_broadcast",
            vec![1],
            vec![vec![5]],
            Box::new(|g, x, c| {
                let b = g.constant(c[0].clone());
                let m = g.mul(b, x)?;
                let a = g.add(m, x)?;
                Ok(g.sum_squares(a))
            }),
        ),
        (
            "add_bias",
            vec![4],
            vec![vec![2, 3, 4]],
            Box::new(|g, x, c| {
                let h = g.constant(c[0].clone());
                let y = g.add_bias(h, x)?;
                let y = g.tanh(y);
                Ok(g.sum_squares(y))
            }),
        ),
        (
            "conv1d_input",
            vec![2, 7, 3],
            vec![vec![3, 3, 2], vec![2]],
            Box::new(|g, x, c| {
                let w = g.constant(c[0].clone());
                let b = g.constant(c[1].clone());
                let attrs = Conv1dAttrs {
                    stride: 2,
                    dilation: 1,
                    pad_left: 1,
                    pad_right: 2,
                };
                let y = g.conv1d(x, w, Some(b), attrs)?;
                Ok(g.sum_squares(y))
            }),
        ),
        (
            "conv1d_filter",
            vec![2, 3, 2],
            vec![vec![2, 9, 3]],
            Box::new(|g, w, c| {
                let x = g.constant(c[0].clone());
                let y = g.conv1d(x, w, None, Conv1dAttrs::causal(2, 3))?;
                Ok(g.sum_squares(y))
            }),
        ),
        (
            "conv1d_bias",
            vec![2],
            vec![vec![1, 5, 3], vec![3, 3, 2]],
            Box::new(|g, b, c| {
                let x = g.constant(c[0].clone());
                let w = g.constant(c[1].clone());
                let y = g.conv1d(x, w, Some(b), Conv1dAttrs::same(3))?;
                let y = g.tanh(y);
                Ok(g.sum_squares(y))
            }),
        ),
        (
            "relu",
            vec![10],
            vec![],
            Box::new(|g, x, _| {
                let y = g.relu(x);
                let y = g.mul(y, x)?;
                g.mean(y)
            }),
        ),
        (
            "tanh_sigmoid_exp",
            vec![8],
            vec![],
            Box::new(|g, x, _| {
                let t = g.tanh(x);
                let s = g.sigmoid(x);
                let e = g.exp(x);
                let a = g.mul(t, s)?;
                let b = g.add(a, e)?;
                Ok(g.sum_squares(b))
            }),
        ),
        (
            "clamp_max_scalar",
            vec![8],
            vec![],
            Box::new(|g, x, _| {
                let c = g.clamp(x, -0.5, 0.5);
                let m = g.max_scalar(x, 0.02);
                let s = g.add(c, m)?;
                Ok(g.sum_squares(s))
            }),
        ),
        (
            "concat_slice",
            vec![3, 4],
            vec![vec![3, 2]],
            Box::new(|g, x, c| {
                let b = g.constant(c[0].clone());
                let cat = g.concat(&[b, x, x])?;
                let s = g.slice_last(cat, 1, 7)?;
                let s = g.tanh(s);
                Ok(g.sum_squares(s))
            }),
        ),
        (
            "mean_last",
            vec![4, 5],
            vec![],
            Box::new(|g, x, _| {
                let m = g.mean_last(x)?;
                let m = g.tanh(m);
                Ok(g.sum_squares(m))
            }),
        ),
        (
            "softmax_cross_entropy",
            vec![4, 6],
            vec![],
            Box::new(|g, x, _| g.softmax_cross_entropy(x, &[0, 5, 2, 2])),
        ),
        (
            "embedding",
            vec![5, 3],
            vec![],
            Box::new(|g, x, _| {
                let e = g.embedding(x, &[4, 0, 4, 2])?;
                let e = g.tanh(e);
                Ok(g.sum_squares(e))
            }),
        ),
        (
            "repeat_time_reshape",
            vec![2, 3, 2],
            vec![],
            Box::new(|g, x, _| {
                let r = g.repeat_time(x, 3)?;
                let r = g.reshape(r, vec![36])?;
                let r = g.sigmoid(r);
                Ok(g.sum_squares(r))
            }),
        ),
            (
                "gated",
                vec![3, 6],
                vec![],
                Box::new(|g, x, _| {
                    let y = g.gated(x)?;
                    Ok(g.sum_squares(y))
                }),
            ),
            (
                "add_upsampled_x",
                vec![2, 6, 3],
                vec![vec![2, 2, 3]],
                Box::new(|g, x, c| {
                    let cv = g.constant(c[0].clone());
                    let y = g.add_upsampled(x, cv, 3)?;
                    let y = g.tanh(y);
                    Ok(g.sum_squares(y))
                }),
            ),
            (
                "add_upsampled_c",
                vec![2, 2, 3],
                vec![vec![2, 6, 3]],
                Box::new(|g, x, c| {
                    let xv = g.constant(c[0].clone());
                    let y = g.add_upsampled(xv, x, 3)?;
                    let y = g.tanh(y);
                    Ok(g.sum_squares(y))
                }),
            ),
        ]
}


/// Worst relative finite-difference error per primitive over `points`
/// random points (64-bit, central differences with eps 1e-5).
pub fn primitive_battery(points: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shape, consts, f) in primitives() {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let point = rand_away_from_zero(&mut rng, &shape);
            let cs: Vec<Tensor<f64>> = consts.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let e = finite_diff_check(|g, x| f(g, x, &cs), &point, 1e-5)?;
            worst = worst.max(e);
        }
        out.push((name, worst));
    }
    Ok(out)
}
