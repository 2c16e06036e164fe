//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step, within [1e-6, 1e-4].
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Total coordinates to probe (capped at the parameter count).
    pub samples: usize,
    pub seed: u64,
    /// Every parameter whose name contains one of these substrings
    /// contributes at least one probed coordinate.
    pub must_include: Vec<String>,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples: 200,
            seed: 0,
            must_include: Vec::new(),
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub param: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn covers(&self, name_fragment: &str) -> bool {
        self.probes.iter().any(|p| p.param.contains(name_fragment))
    }
}

/// Compares analytic gradients with central differences.
///
/// `loss` evaluates the objective at the store's current values and adds its
/// analytic gradient into the store's accumulators. Gradients are zeroed
/// before and after the check.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<f64>,
{
    if !(1e-6..=1e-4).contains(&cfg.step) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            cfg.step
        )));
    }
    store.zero_grad();
    let base = loss(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("base loss {base}")));
    }
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();

    let coords = sample_coordinates(store, cfg);
    let mut probes = Vec::with_capacity(coords.len());
    for (pi, ci) in coords {
        let id = store.iter().nth(pi).map(|(id, _)| id).expect("index in range");
        let name = store.get(id).name.clone();
        let orig = store.value(id).data()[ci];
        store.value_mut(id).data_mut()[ci] = orig + cfg.step;
        let lp = loss(store)?;
        store.value_mut(id).data_mut()[ci] = orig - cfg.step;
        let lm = loss(store)?;
        store.value_mut(id).data_mut()[ci] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            store.zero_grad();
            return Err(Error::Probe {
                param: name,
                coordinate: ci,
            });
        }
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let a = analytic[pi][ci];
        let denom = a.abs().max(numeric.abs()).max(cfg.floor);
        probes.push(Probe {
            param: name,
            coordinate: ci,
            analytic: a,
            numeric,
            rel_err: (a - numeric).abs() / denom,
        });
    }
    store.zero_grad();
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        tolerance: cfg.tolerance,
        passed: max_rel_err <= cfg.tolerance,
        probes,
    })
}

fn sample_coordinates(store: &ParamStore<f64>, cfg: &GradCheckConfig) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = Vec::new();
    for (pi, (_, p)) in store.iter().enumerate() {
        if cfg.must_include.iter().any(|f| p.name.contains(f.as_str())) {
            chosen.push((pi, rng.random_range(0..p.value.len())));
        }
    }
    let mut all: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, p))| (0..p.value.len()).map(move |ci| (pi, ci)))
        .collect();
    all.shuffle(&mut rng);
    for c in all {
        if chosen.len() >= cfg.samples {
            break;
        }
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_is_exact() {
        // loss = xᵀ A x with A = [[2,1],[1,3]]
        let mut store = ParamStore::<f64>::new();
        let x = store
            .register("x", Tensor::from_f64(&[2, 1], &[0.7, -1.3]).unwrap())
            .unwrap();
        let a = Tensor::from_f64(&[2, 2], &[2., 1., 1., 3.]).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut tape = Tape::new(s);
                let xv = tape.param(x);
                let av = tape.constant(a.clone());
                let ax = tape.matmul(av, xv)?;
                let q = tape.mul(xv, ax)?;
                let l = tape.sum(q);
                let value = tape.scalar_value(l);
                let g = tape.backward(l)?;
                s.accumulate(&g);
                Ok(value)
            },
            &GradCheckConfig {
                tolerance: 1e-9,
                floor: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.probes.len(), 2);
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut store = ParamStore::<f64>::new();
        let cfg = GradCheckConfig {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&mut store, |_| Ok(0.0), &cfg).is_err());
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let mut store = ParamStore::<f64>::new();
        let x = store.register("x", Tensor::from_f64(&[1], &[0.0]).unwrap()).unwrap();
        let err = grad_check(
            &mut store,
            |s| {
                let v = s.value(x).data()[0];
                Ok(if v > 0.0 { f64::NAN } else { v })
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Probe { coordinate: 0, .. }));
    }
}
