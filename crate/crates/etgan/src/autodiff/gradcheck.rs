//! Finite-difference validation of analytic gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences at one point. Returns the max over coordinates
/// of `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, data: &[f64], shape: &[usize], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_multi(
        |tape, vars| f(tape, vars[0]),
        &[(data.to_vec(), shape.to_vec())],
        step,
    )
}

/// Multi-input variant of [`grad_check`]; differentiates w.r.t. every input.
pub fn grad_check_multi<F>(f: F, points: &[(Vec<f64>, Vec<usize>)], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check: function output must be scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.check_finite()?;
    let grads = tape.backward(out, false)?;
    tape.check_finite()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, (data, _))| match grads.get(v) {
            Some(g) => tape.value(g).to_vec(),
            None => vec![0.0; data.len()],
        })
        .collect();

    // central differences, one coordinate at a time
    let eval = |points_now: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = points_now
            .iter()
            .map(|(data, shape)| t.leaf(data.clone(), shape.clone(), true))
            .collect::<Result<_>>()?;
        let o = f(&mut t, &vs)?;
        t.check_finite()?;
        Ok(t.scalar_value(o))
    };

    let mut max_err = 0.0f64;
    let mut perturbed: Vec<(Vec<f64>, Vec<usize>)> = points.to_vec();
    for (i, (data, _)) in points.iter().enumerate() {
        for j in 0..data.len() {
            perturbed[i].0[j] = data[j] + step;
            let plus = eval(&perturbed)?;
            perturbed[i].0[j] = data[j] - step;
            let minus = eval(&perturbed)?;
            perturbed[i].0[j] = data[j];
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            let err = (a - fd).abs() / 1.0f64.max(a.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// One row of the op validation table.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

const STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-5;

fn random_point(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<f64>, Vec<usize>) {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    (data, shape.to_vec())
}

/// Resample until every coordinate is at least `margin` away from zero, so
/// finite differences never straddle a kink.
fn random_point_off_kink(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    margin: f64,
) -> (Vec<f64>, Vec<usize>) {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = rng.gen_range(-1.0..1.0);
            if x.abs() > margin {
                break x;
            }
        })
        .collect();
    (data, shape.to_vec())
}

/// Run every registered op through [`grad_check`] at `rounds` random points.
/// The returned table carries the worst relative error per op.
pub fn run_op_suite(seed: u64, rounds: usize) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Vec::new();
    let mut check = |name: &'static str,
                     rng: &mut ChaCha8Rng,
                     run: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..rounds {
            let err = run(rng)?;
            worst = worst.max(err);
        }
        table.push(OpCheck { name, max_rel_err: worst, tolerance: OP_TOL });
        Ok(())
    };

    check("add", &mut rng, &mut |rng| {
        let a = random_point(rng, &[3, 4], -2.0, 2.0);
        let b = random_point(rng, &[3, 4], -2.0, 2.0);
        grad_check_multi(
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let s2 = t.mul(s, s)?;
                Ok(t.sum(s2))
            },
            &[a, b],
            STEP,
        )
    })?;

    check("mul", &mut rng, &mut |rng| {
        let a = random_point(rng, &[3, 4], -2.0, 2.0);
        let b = random_point(rng, &[3, 4], -2.0, 2.0);
        grad_check_multi(
            |t, v| {
                let s = t.mul(v[0], v[1])?;
                Ok(t.sum(s))
            },
            &[a, b],
            STEP,
        )
    })?;

    check("matmul", &mut rng, &mut |rng| {
        let a = random_point(rng, &[3, 4], -1.0, 1.0);
        let b = random_point(rng, &[4, 2], -1.0, 1.0);
        grad_check_multi(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let sq = t.mul(m, m)?;
                Ok(t.sum(sq))
            },
            &[a, b],
            STEP,
        )
    })?;

    check("sigmoid", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[6], -3.0, 3.0);
        grad_check(
            |t, v| {
                let y = t.sigmoid(v);
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("leaky_relu", &mut rng, &mut |rng| {
        let (d, s) = random_point_off_kink(rng, &[8], 1e-3);
        grad_check(
            |t, v| {
                let y = t.leaky_relu(v, 0.2);
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("mean", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[5], -2.0, 2.0);
        grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.mean(sq))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("sum", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[5], -2.0, 2.0);
        grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("abs", &mut rng, &mut |rng| {
        let (d, s) = random_point_off_kink(rng, &[8], 1e-3);
        grad_check(
            |t, v| {
                let y = t.abs(v);
                Ok(t.mean(y))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("l2_norm", &mut rng, &mut |rng| {
        let (d, s) = random_point_off_kink(rng, &[6], 0.1);
        grad_check(|t, v| t.l2_norm(v), &d, &s, STEP)
    })?;

    check("softmax", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[5], -2.0, 2.0);
        grad_check(
            |t, v| {
                let p = t.softmax(v)?;
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("log", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[5], 0.5, 3.0);
        grad_check(
            |t, v| {
                let y = t.log(v);
                Ok(t.sum(y))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("exp", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[5], -1.0, 1.0);
        grad_check(
            |t, v| {
                let y = t.exp(v);
                Ok(t.sum(y))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("sqrt", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[5], 0.5, 3.0);
        grad_check(
            |t, v| {
                let y = t.sqrt(v);
                Ok(t.sum(y))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("div", &mut rng, &mut |rng| {
        let a = random_point(rng, &[5], -2.0, 2.0);
        let b = random_point(rng, &[5], 0.5, 2.0);
        grad_check_multi(
            |t, v| {
                let y = t.div(v[0], v[1])?;
                Ok(t.sum(y))
            },
            &[a, b],
            STEP,
        )
    })?;

    check("conv1d", &mut rng, &mut |rng| {
        let x = random_point(rng, &[3, 10], -1.0, 1.0);
        let w = random_point(rng, &[2, 3, 5], -1.0, 1.0);
        grad_check_multi(
            |t, v| {
                let y = t.conv1d(v[0], v[1], 2, 2)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, w],
            STEP,
        )
    })?;

    check("conv2d", &mut rng, &mut |rng| {
        let x = random_point(rng, &[2, 6, 8], -1.0, 1.0);
        let w = random_point(rng, &[3, 2, 3, 3], -1.0, 1.0);
        grad_check_multi(
            |t, v| {
                let y = t.conv2d(v[0], v[1], (2, 2), (1, 1))?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, w],
            STEP,
        )
    })?;

    check("glu", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[4, 6], -2.0, 2.0);
        grad_check(
            |t, v| {
                let y = t.glu(v)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    check("instance_norm", &mut rng, &mut |rng| {
        let x = random_point(rng, &[2, 7], -2.0, 2.0);
        let gamma = random_point(rng, &[2], 0.5, 1.5);
        let beta = random_point(rng, &[2], -0.5, 0.5);
        grad_check_multi(
            |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], 1e-9)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, gamma, beta],
            STEP,
        )
    })?;

    check("pixel_shuffle_1d", &mut rng, &mut |rng| {
        let (d, s) = random_point(rng, &[4, 6], -2.0, 2.0);
        grad_check(
            |t, v| {
                let y = t.pixel_shuffle_1d(v, 2)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &d,
            &s,
            STEP,
        )
    })?;

    Ok(table)
}
