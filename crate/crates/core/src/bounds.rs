//! Closed-form probabilistic safety bounds for stochastic discrete-time CBFs,
//! plus Monte-Carlo checks of the variance and Jensen-gap bounds.
//!
//! The K-step exit probability of a closed loop whose barrier `h` satisfies
//! `E[h(s_{k+1}) | F_k] >= kappa * h(s_k)` is bounded by
//! `T(kappa^K h(s0) / delta, sigma sqrt(K) / delta)` with
//!
//! ```text
//! T(lambda, xi) = (xi^2 / (lambda + xi^2))^(lambda + xi^2) * e^lambda
//! ```

use crate::error::{Error, Result};
use crate::rng::RandomStream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitBoundInputs {
    pub kappa: f64,
    pub horizon: u32,
    pub h0: f64,
    pub delta: f64,
    pub sigma: f64,
}

impl ExitBoundInputs {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.kappa, self.h0, self.delta, self.sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("exit bound inputs"));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidInput(format!(
                "kappa must lie in [0, 1], got {}",
                self.kappa
            )));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidInput("horizon K must be >= 1".into()));
        }
        if self.delta <= 0.0 {
            return Err(Error::InvalidInput("delta must be > 0".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidInput("sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Lipschitz/boundedness constants of a barrier and closed loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropositionConstants {
    /// Lipschitz constant of h.
    pub lipschitz_h: f64,
    /// Bound on |h|.
    pub bound_h: f64,
    /// Lipschitz constant of the closed-loop map in its noise argument.
    pub lipschitz_f: f64,
    /// Bound on the trace of the conditional noise covariance.
    pub noise_trace: f64,
}

impl PropositionConstants {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("lipschitz_h", self.lipschitz_h),
            ("bound_h", self.bound_h),
            ("lipschitz_f", self.lipschitz_f),
            ("noise_trace", self.noise_trace),
        ];
        for (name, v) in vals {
            if !v.is_finite() {
                return Err(Error::NonFinite("proposition constants"));
            }
            if v < 0.0 {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `T(lambda, xi)`, evaluated in log space so large `xi` cannot overflow.
pub fn t_function(lambda: f64, xi: f64) -> Result<f64> {
    if !lambda.is_finite() || !xi.is_finite() {
        return Err(Error::NonFinite("t_function arguments"));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    if xi <= 0.0 {
        return Err(Error::InvalidInput(format!("xi must be > 0, got {xi}")));
    }
    let xi2 = xi * xi;
    let total = lambda + xi2;
    let log_t = total * (xi2.ln() - total.ln()) + lambda;
    Ok(log_t.exp())
}

/// Upper bound on the K-step exit probability, clipped to `[0, 1]`.
pub fn exit_probability_bound(inp: &ExitBoundInputs) -> Result<f64> {
    inp.validate()?;
    if inp.h0 <= 0.0 {
        return Ok(1.0);
    }
    let k = f64::from(inp.horizon);
    let lambda = inp.kappa.powi(inp.horizon as i32) * inp.h0 / inp.delta;
    let xi = inp.sigma * k.sqrt() / inp.delta;
    Ok(t_function(lambda, xi)?.clamp(0.0, 1.0))
}

/// `L_h^2 L_f^2 sigma_d^2`: bound on the conditional variance of `h(s_{k+1})`.
pub fn variance_bound(c: &PropositionConstants) -> Result<f64> {
    c.validate()?;
    Ok(c.lipschitz_h.powi(2) * c.lipschitz_f.powi(2) * c.noise_trace)
}

/// `2 C_h`: bound on the one-step expectation gap of a bounded barrier.
pub fn expectation_gap_bound(c: &PropositionConstants) -> Result<f64> {
    c.validate()?;
    Ok(2.0 * c.bound_h)
}

/// Outcome of a Monte-Carlo check `lhs >= rhs - 3 * stderr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    pub holds: bool,
}

/// Gaussian with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn trace(&self) -> f64 {
        self.var.iter().sum()
    }

    pub fn sample_into(&self, rng: &mut RandomStream, out: &mut [f64]) {
        for ((o, m), v) in out.iter_mut().zip(&self.mean).zip(&self.var) {
            *o = m + v.sqrt() * rng.normal();
        }
    }
}

/// Sample mean and its standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo check of the Jensen-gap lower bound
/// `E[h(s')] >= h(E[s']) - L_h sqrt(tr Cov(s'))` for Gaussian `s'`.
pub fn mc_check_prop2<H>(
    h: H,
    lipschitz_h: f64,
    next: &DiagGaussian,
    rng: &mut RandomStream,
    n_samples: usize,
) -> Result<McCheck>
where
    H: Fn(&[f64]) -> f64,
{
    if n_samples < 1000 {
        return Err(Error::InvalidInput("n_samples must be >= 1000".into()));
    }
    if next.mean.len() != next.var.len() || next.var.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("malformed next-state distribution".into()));
    }
    let trace = next.trace();
    let h_mean = h(&next.mean);
    let rhs = h_mean - lipschitz_h * trace.sqrt();
    if trace == 0.0 {
        return Ok(McCheck {
            lhs: h_mean,
            rhs,
            stderr: 0.0,
            holds: h_mean >= rhs,
        });
    }
    let mut buf = vec![0.0; next.mean.len()];
    let vals: Vec<f64> = (0..n_samples)
        .map(|_| {
            next.sample_into(rng, &mut buf);
            h(&buf)
        })
        .collect();
    let (lhs, stderr) = mean_stderr(&vals);
    Ok(McCheck {
        lhs,
        rhs,
        stderr,
        holds: lhs >= rhs - 3.0 * stderr,
    })
}

/// Monte-Carlo check of the conditional-variance bound: draws noise
/// `d ~ N(0, diag(noise_var))`, pushes it through `closed_loop`, and compares
/// the sample variance of `h` against `L_h^2 L_f^2 tr(Sigma_d)`.
///
/// Here `lhs` is the bound and `rhs` the empirical variance, so `holds` reads
/// `bound >= variance - 3 stderr`.
pub fn mc_check_prop1<H, F>(
    h: H,
    closed_loop: F,
    noise_var: &[f64],
    consts: &PropositionConstants,
    rng: &mut RandomStream,
    n_samples: usize,
) -> Result<McCheck>
where
    H: Fn(&[f64]) -> f64,
    F: Fn(&[f64]) -> Vec<f64>,
{
    if n_samples < 1000 {
        return Err(Error::InvalidInput("n_samples must be >= 1000".into()));
    }
    let bound = variance_bound(consts)?;
    let noise = DiagGaussian {
        mean: vec![0.0; noise_var.len()],
        var: noise_var.to_vec(),
    };
    let mut d = vec![0.0; noise_var.len()];
    let vals: Vec<f64> = (0..n_samples)
        .map(|_| {
            noise.sample_into(rng, &mut d);
            h(&closed_loop(&d))
        })
        .collect();
    let n = n_samples as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Normal-theory standard error of a sample variance.
    let stderr = var * (2.0 / (n - 1.0)).sqrt();
    Ok(McCheck {
        lhs: bound,
        rhs: var,
        stderr,
        holds: bound >= var - 3.0 * stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_at_zero_lambda_is_one() {
        assert_eq!(t_function(0.0, 0.5).unwrap(), 1.0);
        assert_eq!(t_function(0.0, 123.0).unwrap(), 1.0);
    }

    #[test]
    fn t_rejects_bad_input() {
        assert!(t_function(-1.0, 1.0).is_err());
        assert!(t_function(1.0, 0.0).is_err());
        assert!(t_function(f64::NAN, 1.0).is_err());
        assert!(t_function(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn zero_barrier_is_vacuous() {
        let inp = ExitBoundInputs {
            kappa: 0.9,
            horizon: 10,
            h0: 0.0,
            delta: 1.0,
            sigma: 0.1,
        };
        assert_eq!(exit_probability_bound(&inp).unwrap(), 1.0);
        let neg = ExitBoundInputs { h0: -0.3, ..inp };
        assert_eq!(exit_probability_bound(&neg).unwrap(), 1.0);
    }

    #[test]
    fn invalid_bound_inputs() {
        let ok = ExitBoundInputs {
            kappa: 0.9,
            horizon: 10,
            h0: 0.5,
            delta: 1.0,
            sigma: 0.1,
        };
        assert!(exit_probability_bound(&ExitBoundInputs { kappa: 1.2, ..ok }).is_err());
        assert!(exit_probability_bound(&ExitBoundInputs { horizon: 0, ..ok }).is_err());
        assert!(exit_probability_bound(&ExitBoundInputs { delta: 0.0, ..ok }).is_err());
        assert!(exit_probability_bound(&ExitBoundInputs { sigma: -1.0, ..ok }).is_err());
    }

    #[test]
    fn bound_vanishes_as_sigma_shrinks() {
        let mut prev = 1.0;
        for sigma in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02] {
            let v = exit_probability_bound(&ExitBoundInputs {
                kappa: 1.0,
                horizon: 1,
                h0: 2.0,
                delta: 2.0,
                sigma,
            })
            .unwrap();
            assert!(v <= prev);
            prev = v;
        }
        assert!(prev < 1e-3, "{prev}");
    }

    #[test]
    fn proposition_one_constants() {
        let c = |lh, ch, lf, s2| PropositionConstants {
            lipschitz_h: lh,
            bound_h: ch,
            lipschitz_f: lf,
            noise_trace: s2,
        };
        assert_eq!(variance_bound(&c(1.0, 1.0, 1.0, 0.01)).unwrap(), 0.01);
        assert_eq!(variance_bound(&c(0.0, 1.0, 5.0, 9.0)).unwrap(), 0.0);
        assert_eq!(variance_bound(&c(2.0, 1.0, 3.0, 0.25)).unwrap(), 9.0);
        assert_eq!(expectation_gap_bound(&c(1.0, 1.0, 1.0, 1.0)).unwrap(), 2.0);
        assert_eq!(expectation_gap_bound(&c(1.0, 0.0, 1.0, 1.0)).unwrap(), 0.0);
        assert_eq!(expectation_gap_bound(&c(1.0, 0.5, 1.0, 1.0)).unwrap(), 1.0);
        assert!(variance_bound(&c(-1.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn prop2_linear_and_abs() {
        let mut rng = RandomStream::new(3, 0);
        let g = DiagGaussian {
            mean: vec![0.0],
            var: vec![1.0],
        };
        let lin = mc_check_prop2(|x| x[0], 1.0, &g, &mut rng, 100_000).unwrap();
        assert!(lin.holds);
        assert_eq!(lin.rhs, -1.0);
        assert!(lin.lhs.abs() < 0.02);

        let abs = mc_check_prop2(|x| x[0].abs(), 1.0, &g, &mut rng, 100_000).unwrap();
        assert!(abs.holds);
        assert!((abs.lhs - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01);
    }

    #[test]
    fn prop2_deterministic_case() {
        let mut rng = RandomStream::new(3, 1);
        let g = DiagGaussian {
            mean: vec![0.3, -0.2],
            var: vec![0.0, 0.0],
        };
        let c = mc_check_prop2(|x| x[0] * x[1], 1.0, &g, &mut rng, 1000).unwrap();
        assert_eq!(c.lhs, c.rhs);
        assert!(c.holds);
    }
}
