//! Central-difference checks of every differentiable op.

use mmk_core::numerics::{
    finite_diff_check, Bindings, CheckOptions, Graph, NamedTensors, Tensor, Var,
};
use mmk_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.value(out).shape(), seed ^ 0xABCD));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check(params: &[(&str, Tensor)], f: impl Fn(&mut Graph, &Bindings) -> Result<Var>) {
    let params: NamedTensors = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let r = finite_diff_check(f, &params, CheckOptions::default()).unwrap();
    assert!(r.passed, "max rel err {} in {:?}", r.max_rel_err, r.blocks);
}

#[test]
fn matmul_and_transposes() {
    check(
        &[("a", random(&[3, 4], 1)), ("b", random(&[4, 2], 2))],
        |g, b| {
            let y = g.matmul(b.get("a")?, b.get("b")?)?;
            project(g, y, 3)
        },
    );
    check(
        &[("a", random(&[3, 4], 4)), ("b", random(&[5, 4], 5))],
        |g, b| {
            let y = g.matmul_nt(b.get("a")?, b.get("b")?)?;
            project(g, y, 6)
        },
    );
    check(&[("a", random(&[3, 4], 7))], |g, b| {
        let y = g.transpose(b.get("a")?)?;
        project(g, y, 8)
    });
}

#[test]
fn elementwise_ops() {
    let ps = [("a", random(&[2, 5], 10)), ("b", random(&[2, 5], 11))];
    check(&ps, |g, b| {
        let y = g.add(b.get("a")?, b.get("b")?)?;
        project(g, y, 12)
    });
    check(&ps, |g, b| {
        let y = g.sub(b.get("a")?, b.get("b")?)?;
        project(g, y, 13)
    });
    check(&ps, |g, b| {
        let y = g.mul(b.get("a")?, b.get("b")?)?;
        project(g, y, 14)
    });
    check(&ps, |g, b| {
        let y = g.scale(b.get("a")?, -2.5)?;
        project(g, y, 15)
    });
    check(&ps, |g, b| {
        let y = g.sigmoid(b.get("a")?)?;
        project(g, y, 16)
    });
    check(&ps, |g, b| {
        let y = g.relu(b.get("a")?)?;
        project(g, y, 17)
    });
}

#[test]
fn bias_softmax_layer_norm() {
    check(
        &[("x", random(&[3, 4], 20)), ("b", random(&[4], 21))],
        |g, b| {
            let y = g.add_bias(b.get("x")?, b.get("b")?)?;
            project(g, y, 22)
        },
    );
    check(&[("x", random(&[3, 4], 23))], |g, b| {
        let y = g.softmax(b.get("x")?, 1)?;
        project(g, y, 24)
    });
    check(&[("x", random(&[3, 4], 25))], |g, b| {
        let y = g.softmax(b.get("x")?, 0)?;
        project(g, y, 26)
    });
    check(
        &[
            ("x", random(&[3, 5], 27)),
            ("g", random(&[5], 28)),
            ("b", random(&[5], 29)),
        ],
        |g, b| {
            let y = g.layer_norm(b.get("x")?, b.get("g")?, b.get("b")?, 1e-5)?;
            project(g, y, 30)
        },
    );
}

#[test]
fn structural_ops() {
    check(&[("t", random(&[6, 3], 40))], |g, b| {
        let y = g.gather(b.get("t")?, &[4, 0, 4, 2])?;
        project(g, y, 41)
    });
    check(&[("x", random(&[3, 6], 42))], |g, b| {
        let y = g.slice_cols(b.get("x")?, 1, 4)?;
        project(g, y, 43)
    });
    check(
        &[("a", random(&[3, 2], 44)), ("b", random(&[3, 4], 45))],
        |g, b| {
            let y = g.concat_cols(&[b.get("a")?, b.get("b")?])?;
            project(g, y, 46)
        },
    );
    check(
        &[("a", random(&[1, 3], 47)), ("b", random(&[2, 3], 48))],
        |g, b| {
            let y = g.concat_rows(&[b.get("a")?, b.get("b")?])?;
            project(g, y, 49)
        },
    );
    check(&[("a", random(&[1, 3], 50))], |g, b| {
        let y = g.repeat_rows(b.get("a")?, 4)?;
        project(g, y, 51)
    });
    check(&[("a", random(&[4, 3], 52))], |g, b| {
        let y = g.mean_rows(b.get("a")?)?;
        project(g, y, 53)
    });
    check(&[("a", random(&[4, 3], 54))], |g, b| {
        let y = g.mul(b.get("a")?, b.get("a")?)?;
        g.mean(y)
    });
}

#[test]
fn cross_entropy_with_ignored_positions() {
    check(&[("z", random(&[4, 6], 60))], |g, b| {
        g.cross_entropy(b.get("z")?, &[None, Some(3), Some(0), Some(5)])
    });
}
