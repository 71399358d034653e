//! Central finite-difference gradient checking.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    pub tol: f64,
    /// Inputs with at most this many coordinates in total are checked
    /// coordinate by coordinate; larger ones use random directions.
    pub max_coords: usize,
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_coords: 64,
            probes: 64,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checks: usize,
    pub pass: bool,
}

pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

fn value_at<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// differences, either per coordinate or along random unit directions.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, inputs)?;
    let grads = tape.backward(out)?;
    let ad: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let h = opts.h;
    let mut worst: f64 = 0.0;
    let mut checks = 0;

    if total <= opts.max_coords {
        for (k, x) in inputs.iter().enumerate() {
            for i in 0..x.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (value_at(&f, &plus)? - value_at(&f, &minus)?) / (2.0 * h);
                worst = worst.max(rel_err(ad[k].data()[i], fd));
                checks += 1;
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.probes {
            let mut dirs: Vec<Tensor> =
                inputs.iter().map(|x| Tensor::randn(x.shape(), &mut rng)).collect();
            let norm = dirs
                .iter()
                .map(|d| d.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            for d in &mut dirs {
                d.data_mut().iter_mut().for_each(|v| *v /= norm);
            }
            let shifted = |s: f64| -> Vec<Tensor> {
                inputs
                    .iter()
                    .zip(&dirs)
                    .map(|(x, d)| {
                        let mut y = x.clone();
                        y.axpy(s, d);
                        y
                    })
                    .collect()
            };
            let fd = (value_at(&f, &shifted(h))? - value_at(&f, &shifted(-h))?) / (2.0 * h);
            let adv: f64 = ad
                .iter()
                .zip(&dirs)
                .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            worst = worst.max(rel_err(adv, fd));
            checks += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        checks,
        pass: worst <= opts.tol,
    })
}

/// Reduces a tensor output to a scalar with fixed random weights so block
/// Jacobians can be checked through a single number.
pub fn random_projection(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::randn(tape.shape(y), &mut rng);
    let rv = tape.leaf(r);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}
