use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Integrates `dz/dt = f(z, t)` from `t = 0` with classical RK4 at step `h`
/// up to the last of `times` (sorted), recording every stage on `tape`.
///
/// Returns the states at `times` stacked vertically. Between grid points
/// the state is the cubic Hermite interpolant of the two neighbouring
/// states and their slopes; a query on a grid point returns that grid
/// state exactly, so `t = 0` reads back `z0` bit-for-bit.
pub(crate) fn integrate_and_read(
    tape: &mut Tape,
    z0: Var,
    h: f64,
    times: &[f64],
    mut f: impl FnMut(&mut Tape, Var, f64) -> Result<Var>,
) -> Result<Var> {
    let t_last = *times.last().ok_or_else(|| Error::invalid("no query times"))?;
    let num_steps = (t_last / h).ceil() as usize;

    let mut states = vec![z0];
    let mut slopes = Vec::with_capacity(num_steps + 1);
    for k in 0..num_steps {
        let t = k as f64 * h;
        let z = states[k];
        let k1 = f(tape, z, t)?;
        let z2 = tape.lin_comb(&[(z, 1.0), (k1, h / 2.0)])?;
        let k2 = f(tape, z2, t + h / 2.0)?;
        let z3 = tape.lin_comb(&[(z, 1.0), (k2, h / 2.0)])?;
        let k3 = f(tape, z3, t + h / 2.0)?;
        let z4 = tape.lin_comb(&[(z, 1.0), (k3, h)])?;
        let k4 = f(tape, z4, t + h)?;
        let next = tape.lin_comb(&[
            (z, 1.0),
            (k1, h / 6.0),
            (k2, h / 3.0),
            (k3, h / 3.0),
            (k4, h / 6.0),
        ])?;
        slopes.push(k1);
        states.push(next);
    }

    let mut blocks = Vec::with_capacity(times.len());
    for &t in times {
        let pos = t / h;
        let mut k = pos.floor() as usize;
        let mut theta = pos - k as f64;
        if k >= num_steps {
            k = num_steps;
            theta = 0.0;
        }
        if theta == 0.0 {
            blocks.push(vec![(states[k], 1.0)]);
            continue;
        }
        if slopes.len() == k + 1 {
            let end = f(tape, states[k + 1], (k + 1) as f64 * h)?;
            slopes.push(end);
        }
        let (t2, t3) = (theta * theta, theta * theta * theta);
        blocks.push(vec![
            (states[k], 2.0 * t3 - 3.0 * t2 + 1.0),
            (slopes[k], h * (t3 - 2.0 * t2 + theta)),
            (states[k + 1], 3.0 * t2 - 2.0 * t3),
            (slopes[k + 1], h * (t3 - t2)),
        ]);
    }
    tape.stack_lin_comb(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    fn decay(tape: &mut Tape, z: Var, _t: f64) -> Result<Var> {
        Ok(tape.scale(z, -1.0))
    }

    #[test]
    fn readout_tracks_exponential_decay() {
        let mut tape = Tape::new();
        let z0 = tape.constant(DenseMatrix::column(vec![1.0, 2.0]));
        let times = [0.0, 0.013, 0.5, 0.77, 1.0, 1.2345];
        let out = integrate_and_read(&mut tape, z0, 0.025, &times, decay).unwrap();
        let out = tape.value(out);
        for (i, &t) in times.iter().enumerate() {
            for (j, scale) in [1.0, 2.0].into_iter().enumerate() {
                let want = scale * (-t).exp();
                assert!((out[(2 * i + j, 0)] - want).abs() < 1e-7, "t={t}");
            }
        }
        assert_eq!(out[(0, 0)], 1.0);
        assert_eq!(out[(1, 0)], 2.0);
    }

    #[test]
    fn readout_is_continuous_across_grid_points() {
        let mut tape = Tape::new();
        let z0 = tape.constant(DenseMatrix::column(vec![1.0]));
        let h = 0.1;
        let times = [0.3 - 1e-9, 0.3, 0.3 + 1e-9];
        let out = integrate_and_read(&mut tape, z0, h, &times, decay).unwrap();
        let v = tape.value(out).data().to_vec();
        assert!((v[0] - v[1]).abs() < 1e-8 && (v[2] - v[1]).abs() < 1e-8);
    }
}
