//! Central finite-difference verification of backward rules.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates probed per tensor; smaller tensors are probed exhaustively.
    pub max_coords: usize,
    pub tolerance: f64,
    /// Absolute lower bound on the relative-error denominator.
    pub floor: f64,
    /// Per tensor, the denominator is also at least this fraction of the
    /// tensor's largest analytic gradient magnitude. Components whose true
    /// gradient vanishes by symmetry (a key bias under softmax, a bias in
    /// front of a normalization) are then judged against the tensor's scale
    /// rather than against round-off.
    pub scale_floor: f64,
    /// A coordinate failing at `step` is re-measured at each of these
    /// smaller steps in turn and keeps the lowest error. Central differences straddling a kink of
    /// a piecewise-linear activation are wrong by O(1); a wrong backward
    /// rule is wrong at every step.
    pub refine_steps: &'static [f64],
    /// When set, only this many randomly chosen inputs are checked; the
    /// first input is always kept.
    pub max_tensors: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            max_coords: 200,
            tolerance: 1e-3,
            floor: 1e-6,
            scale_floor: 1e-3,
            refine_steps: &[1e-5, 1e-6, 1e-7],
            max_tensors: None,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckConfig {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    /// Coordinate of the worst error, with both gradients there.
    pub worst: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let verdict = if t.max_rel_error < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<48} coords {:>4}  max rel err {:.3e} (analytic {:.6e}, numeric {:.6e} at {})  {verdict}",
                t.name, t.coords, t.max_rel_error, t.worst_analytic, t.worst_numeric, t.worst
            )?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the gradient of `Σ f()·R` for a fixed random `R` with respect to
/// every tensor in `inputs`, which must be leaves that require gradients.
///
/// `f` is re-run under perturbation and must be a pure function of the
/// current values of `inputs`; a second evaluation that differs bitwise
/// from the first is reported as a contract error.
pub fn grad_check<F>(
    f: F,
    inputs: &[(String, Tensor)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for (name, t) in inputs {
        if !t.requires_grad() || !t.is_leaf() {
            return Err(Error::Contract(format!("{name} is not a trainable leaf")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = f()?;
    let again = no_grad(&f)?;
    if out.shape() != again.shape() || *out.data() != *again.data() {
        return Err(Error::Contract(
            "fragment is not deterministic: two evaluations on identical inputs differ".into(),
        ));
    }
    let weights: Vec<f64> = (0..out.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let r = Tensor::from_vec(weights, out.shape())?;
    let objective = |y: &Tensor| -> Result<f64> {
        Ok(y.data()
            .iter()
            .zip(r.data().iter())
            .map(|(a, b)| a * b)
            .sum())
    };
    for (_, t) in inputs {
        t.zero_grad();
    }
    ops::sum(&ops::mul(&out, &r)?)?.backward()?;
    let mut chosen: Vec<usize> = (0..inputs.len()).collect();
    if let Some(k) = cfg.max_tensors.filter(|&k| k < inputs.len()) {
        let mut rest = index::sample(&mut rng, inputs.len() - 1, k.saturating_sub(1)).into_vec();
        rest.sort_unstable();
        chosen = std::iter::once(0)
            .chain(rest.into_iter().map(|i| i + 1))
            .collect();
    }
    let mut tensors = Vec::with_capacity(chosen.len());
    for (name, t) in chosen.iter().map(|&i| &inputs[i]) {
        let analytic = t.grad().expect("checked requires_grad");
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let floor = cfg.floor.max(cfg.scale_floor * scale);
        let n = t.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut picked = index::sample(&mut rng, n, cfg.max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut check = TensorCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_error: 0.0,
            worst: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &i in &coords {
            let original = t.data()[i];
            let eval_at = |v: f64| -> Result<f64> {
                t.update_data(|d| d[i] = v)?;
                let y = no_grad(&f)?;
                objective(&y)
            };
            let central = |h: f64| -> Result<f64> {
                let plus = eval_at(original + h);
                let minus = eval_at(original - h);
                t.update_data(|d| d[i] = original)?;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let mut numeric = central(cfg.step)?;
            let mut err = relative_error(analytic[i], numeric, floor);
            for &h in cfg.refine_steps {
                if err < cfg.tolerance {
                    break;
                }
                let refined = central(h)?;
                let e = relative_error(analytic[i], refined, floor);
                if e < err {
                    (err, numeric) = (e, refined);
                }
            }
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst = i;
                check.worst_analytic = analytic[i];
                check.worst_numeric = numeric;
            }
        }
        tensors.push(check);
    }
    for (_, t) in inputs {
        t.zero_grad();
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: cfg.tolerance,
    })
}
