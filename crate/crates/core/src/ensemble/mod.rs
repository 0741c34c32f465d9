//! Perlin-perturbed initial conditions and ensemble-mean forecasts.

mod perlin;

pub use perlin::{perlin2d, perlin2d_stream, Lattice, NoiseConfig};

use std::fs;
use std::path::Path;

use ndarray::{Array3, Axis, Zip};

use crate::error::{Error, Result};
use crate::fields::FieldTensor;
use crate::model::{Forecaster, STEP_HOURS};

const MODULE: &str = "ensemble";

/// `initial` plus independent member-indexed noise on every channel.
pub fn perturb(initial: &FieldTensor, config: &NoiseConfig, member: u64) -> Result<FieldTensor> {
    let (_, h, w) = initial.values().dim();
    let mut values = initial.values().clone();
    if config.amplitude == 0.0 {
        config.validate()?;
        return Ok(initial.clone());
    }
    for (c, mut plane) in values.axis_iter_mut(Axis(0)).enumerate() {
        plane += &perlin2d_stream(h, w, config, member, c as u64)?;
    }
    initial.with_values(values)
}

/// Mean and member trajectories; `mean[k]` and `members[i][k]` are lead `k+1`.
#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub mean: Vec<FieldTensor>,
    pub members: Vec<Vec<FieldTensor>>,
}

/// Pointwise mean, accumulated as offsets from the first member so that
/// identical members give back that member exactly.
pub fn ensemble_mean(states: &[&FieldTensor]) -> Result<FieldTensor> {
    let first = *states.first().ok_or_else(|| Error::invalid(MODULE, "no members"))?;
    let n = states.len() as f64;
    let mut acc = Array3::<f64>::zeros(first.values().dim());
    for s in &states[1..] {
        if s.values().dim() != first.values().dim() {
            return Err(Error::shape(MODULE, "members differ in shape"));
        }
        Zip::from(&mut acc).and(s.values()).and(first.values()).for_each(|a, &x, &x0| *a += x - x0);
    }
    let mean = Zip::from(first.values()).and(&acc).map_collect(|&x0, &a| x0 + a / n);
    first.with_values(mean)
}

/// Rolls out `members` perturbed copies of `initial` for `steps` steps.
/// Members are independent and may run concurrently; results do not depend
/// on scheduling.
pub fn ensemble_forecast(initial: &FieldTensor, model: &Forecaster, members: usize, steps: usize, config: &NoiseConfig) -> Result<EnsembleOutput> {
    if members == 0 {
        return Err(Error::invalid(MODULE, "ensemble needs at least one member"));
    }
    config.validate()?;
    let run = |i: usize| -> Result<Vec<FieldTensor>> {
        let x0 = perturb(initial, config, i as u64)?;
        model.rollout(&x0, steps)
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<Result<Vec<FieldTensor>>> = {
        use rayon::prelude::*;
        (0..members).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<Result<Vec<FieldTensor>>> = (0..members).map(run).collect();
    let members: Vec<Vec<FieldTensor>> = runs.into_iter().collect::<Result<_>>()?;
    let mean = (0..steps)
        .map(|k| ensemble_mean(&members.iter().map(|m| &m[k]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleOutput { mean, members })
}

/// Grid-mean of the per-point population std across members.
pub fn spread(states: &[&FieldTensor]) -> Result<Vec<f64>> {
    let mean = ensemble_mean(states)?;
    let n = states.len() as f64;
    let (c, h, w) = mean.values().dim();
    let mut var = Array3::<f64>::zeros((c, h, w));
    for s in states {
        Zip::from(&mut var).and(s.values()).and(mean.values()).for_each(|v, &x, &m| *v += (x - m).powi(2) / n);
    }
    Ok(var.axis_iter(Axis(0)).map(|p| p.iter().map(|v| v.sqrt()).sum::<f64>() / (h * w) as f64).collect())
}

impl EnsembleOutput {
    /// Mean spread per lead and variable.
    pub fn spread_rows(&self) -> Result<Vec<(i64, String, f64)>> {
        let mut rows = Vec::new();
        for k in 0..self.mean.len() {
            let states: Vec<&FieldTensor> = self.members.iter().map(|m| &m[k]).collect();
            let s = spread(&states)?;
            for (v, name) in s.into_iter().zip(self.mean[k].variables()) {
                rows.push(((k as i64 + 1) * STEP_HOURS, name.clone(), v));
            }
        }
        Ok(rows)
    }

    /// Writes `lead_hours,variable,mean_spread`.
    pub fn write_spread_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("lead_hours,variable,mean_spread\n");
        for (lead, var, v) in self.spread_rows()? {
            s.push_str(&format!("{lead},{var},{v}\n"));
        }
        fs::write(path, s).map_err(|e| Error::io(MODULE, path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::GridSpec;
    use chrono::{TimeZone, Utc};

    fn f(v: f64) -> FieldTensor {
        FieldTensor::new(Array3::from_elem((1, 2, 2), v), vec!["x".into()], GridSpec::global(2, 2).unwrap(), Utc.with_ymd_and_hms(2021, 8, 1, 0, 0, 0).unwrap()).unwrap()
    }

    #[test]
    fn mean_of_identical_members_is_exact() {
        let a = f(0.1);
        let m = ensemble_mean(&[&a, &a, &a]).unwrap();
        assert_eq!(m, a);
        let m = ensemble_mean(&[&f(1.0), &f(3.0)]).unwrap();
        assert!(m.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn spread_of_two_members() {
        assert_eq!(spread(&[&f(1.0), &f(3.0)]).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_amplitude_perturbation_is_identity() {
        let a = f(0.3);
        let cfg = NoiseConfig { amplitude: 0.0, ..Default::default() };
        assert_eq!(perturb(&a, &cfg, 4).unwrap(), a);
    }
}
