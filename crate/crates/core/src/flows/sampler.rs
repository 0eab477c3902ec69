use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

fn check_finite<T: Real>(x: &Tensor<T>, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sampler state at step {step}")))
    }
}

/// Euler integration of `dx/dt = (D(x, t) - x) / (1 - t)` on `t = i / n`.
///
/// The last step lands exactly on `D`, which is what the Euler update gives
/// when `1 - t = dt` and avoids evaluating the velocity at `t = 1`.
pub fn flow_euler<T: Real>(
    mut x: Tensor<T>,
    n_steps: usize,
    mut denoise: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if n_steps == 0 {
        return Err(Error::Config("the sampler needs at least one step".into()));
    }
    let dt = 1.0 / n_steps as f64;
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let d = denoise(&x, t)?;
        x = if i + 1 == n_steps {
            d
        } else {
            let a = T::from_f64(dt / (1.0 - t));
            x.zip_map(&d, |xv, dv| xv + a * (dv - xv))?
        };
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Euler integration of `dx/dsigma = (x - D(x, sigma)) / sigma` along a
/// decreasing grid ending in 0; the step into 0 returns `D`.
pub fn edm_euler<T: Real>(
    mut x: Tensor<T>,
    grid: &[f64],
    mut denoise: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if grid.len() < 2 {
        return Err(Error::Config("the sampler needs at least one step".into()));
    }
    for (i, w) in grid.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        let d = denoise(&x, s)?;
        x = if s_next == 0.0 {
            d
        } else {
            let a = T::from_f64((s_next - s) / s);
            x.zip_map(&d, |xv, dv| xv + a * (xv - dv))?
        };
        check_finite(&x, i)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_denoiser_lands_on_target() {
        let target = Tensor::<f64>::from_f64(&[1, 3], &[0.5, -2.0, 7.0]).unwrap();
        let z = Tensor::<f64>::from_f64(&[1, 3], &[10.0, 3.0, -1.0]).unwrap();
        let out = flow_euler(z.clone(), 50, |_, _| Ok(target.clone())).unwrap();
        assert_eq!(out, target);
        let grid = crate::flows::edm_sigma_grid(800.0, 0.002, 7.0, 50);
        let out = edm_euler(z.scale_each(&[800.0]), &grid, |_, _| Ok(target.clone())).unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn single_step_is_one_shot_denoise() {
        let z = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let mut seen = Vec::new();
        let out = flow_euler(z.clone(), 1, |x, t| {
            seen.push((x.clone(), t));
            Ok(x.map(|v| v * 3.0))
        })
        .unwrap();
        assert_eq!(seen, vec![(z.clone(), 0.0)]);
        assert_eq!(out, z.map(|v| v * 3.0));
    }

    #[test]
    fn non_finite_state_names_step() {
        let z = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
        let err = flow_euler(z, 5, |x, t| Ok(if t > 0.3 { x.map(|_| f64::NAN) } else { x.clone() })).unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
    }
}
