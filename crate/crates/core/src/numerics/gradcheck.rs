//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Bindings, Graph, NamedTensors, Var};
use crate::error::{Error, Result};

pub const MIN_STEP: f64 = 1e-7;
pub const MAX_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Finite-difference step, within `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Blocks larger than this are checked on a random sample of coordinates.
    pub max_coords_per_block: usize,
    /// Denominator floor in `|a − n| / max(|a|, |n|, floor)`.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords_per_block: 64,
            rel_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub numel: usize,
    /// Flat indices that were checked; the whole block unless `sampled`.
    pub coords: Vec<usize>,
    pub sampled: bool,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub eps: f64,
    pub tol: f64,
    pub sample_seed: u64,
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, params: &NamedTensors) -> Result<f64>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = Bindings::constants(&mut g, params);
    let loss = f(&mut g, &b)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::contract(format!(
            "objective returned shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares `backward()` of the scalar objective `f` against central
/// differences `(f(θ+εe) − f(θ−εe)) / 2ε`, block by block.
pub fn finite_diff_check<F>(f: F, params: &NamedTensors, opts: CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    if !(opts.eps >= MIN_STEP) {
        return Err(Error::StepUnderflow { eps: opts.eps });
    }
    if opts.eps > MAX_STEP {
        return Err(Error::StepTooLarge { eps: opts.eps });
    }

    let first = eval(&f, params)?;
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Reproducibility { first, second });
    }

    let mut g = Graph::new();
    let bound = Bindings::params(&mut g, params);
    let loss = f(&mut g, &bound)?;
    let mut grads = g.backward(loss)?;
    let analytic = bound.collect_grads(&mut grads)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut blocks = Vec::with_capacity(params.len());
    for (name, tensor) in params {
        let numel = tensor.numel();
        let sampled = numel > opts.max_coords_per_block;
        let mut coords = if sampled {
            sample(&mut rng, numel, opts.max_coords_per_block).into_vec()
        } else {
            (0..numel).collect()
        };
        coords.sort_unstable();

        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for &i in &coords {
            let orig = tensor.data()[i];
            set(&mut work, name, i, orig + opts.eps);
            let plus = eval(&f, &work)?;
            set(&mut work, name, i, orig - opts.eps);
            let minus = eval(&f, &work)?;
            set(&mut work, name, i, orig);

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[name].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.rel_floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        blocks.push(BlockReport {
            name: name.clone(),
            numel,
            coords,
            sampled,
            max_abs_err: max_abs,
            max_rel_err: max_rel,
        });
    }

    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(CheckReport {
        eps: opts.eps,
        tol: opts.tol,
        sample_seed: opts.seed,
        blocks,
        max_rel_err,
        passed: max_rel_err < opts.tol,
    })
}

fn set(params: &mut NamedTensors, name: &str, i: usize, v: f64) {
    params
        .get_mut(name)
        .expect("name comes from the same map")
        .data_mut()[i] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use std::cell::Cell;

    fn one_block(name: &str, t: Tensor) -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert(name.to_string(), t);
        p
    }

    #[test]
    fn quadratic_matches_analytic() {
        let theta = Tensor::vector(vec![0.7, -1.3, 2.1, 0.55, -0.9]).unwrap();
        let p = one_block("theta", theta);
        let r = finite_diff_check(
            |g, b| {
                let t = b.get("theta")?;
                let sq = g.mul(t, t)?;
                g.sum(sq)
            },
            &p,
            CheckOptions {
                eps: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn step_bounds() {
        let p = one_block("x", Tensor::vector(vec![1.0]).unwrap());
        let f = |g: &mut Graph, b: &Bindings| g.sum(b.get("x")?);
        let opts = |eps| CheckOptions {
            eps,
            ..Default::default()
        };
        assert!(matches!(
            finite_diff_check(f, &p, opts(1e-20)),
            Err(Error::StepUnderflow { .. })
        ));
        assert!(matches!(
            finite_diff_check(f, &p, opts(0.1)),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn non_deterministic_objective_is_rejected() {
        let p = one_block("x", Tensor::vector(vec![1.0]).unwrap());
        let calls = Cell::new(0.0);
        let f = |g: &mut Graph, b: &Bindings| {
            calls.set(calls.get() + 1.0);
            let s = g.sum(b.get("x")?)?;
            g.scale(s, calls.get())
        };
        assert!(matches!(
            finite_diff_check(f, &p, CheckOptions::default()),
            Err(Error::Reproducibility { .. })
        ));
    }

    #[test]
    fn large_blocks_are_sampled_and_documented() {
        let p = one_block(
            "w",
            Tensor::new(vec![10, 10], (0..100).map(|i| i as f64 / 50.0).collect()).unwrap(),
        );
        let r = finite_diff_check(
            |g, b| {
                let w = b.get("w")?;
                let s = g.sigmoid(w)?;
                g.sum(s)
            },
            &p,
            CheckOptions {
                max_coords_per_block: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.blocks[0].sampled);
        assert_eq!(r.blocks[0].coords.len(), 10);
        assert!(r.passed, "{r:?}");
    }
}
