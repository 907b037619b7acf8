use super::params::ParamSet;
use super::tape::{ParamRef, Tape, Var};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error so that coordinates with
/// vanishing gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst coordinate: parameter and flat element index.
    pub worst: Option<(ParamRef, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// finite differences for every coordinate of every parameter in `sets`.
pub fn grad_check<F>(sets: &mut [ParamSet<f64>], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let eval = |sets: &[ParamSet<f64>]| -> Result<f64> {
        let refs: Vec<&ParamSet<f64>> = sets.iter().collect();
        let mut tape = Tape::new(&refs);
        let out = f(&mut tape)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::InvalidArgument("grad_check needs a scalar output".into()));
        }
        Ok(v.data()[0])
    };

    let analytic = {
        let refs: Vec<&ParamSet<f64>> = sets.iter().collect();
        let mut tape = Tape::new(&refs);
        let out = f(&mut tape)?;
        let mut grads = tape.backward(out);
        sets.iter()
            .enumerate()
            .map(|(s, p)| grads.take_dense(s, p))
            .collect::<Vec<_>>()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for s in 0..sets.len() {
        for i in 0..sets[s].len() {
            for j in 0..sets[s].tensors()[i].numel() {
                let orig = sets[s].tensors()[i].data()[j];
                sets[s].tensors_mut()[i].data_mut()[j] = orig + h;
                let up = eval(sets)?;
                sets[s].tensors_mut()[i].data_mut()[j] = orig - h;
                let down = eval(sets)?;
                sets[s].tensors_mut()[i].data_mut()[j] = orig;

                let numeric = (up - down) / (2.0 * h);
                let a = analytic[s][i].data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                report.coordinates += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel.max(report.max_rel_error);
                    if rel >= report.max_rel_error {
                        report.worst = Some((ParamRef { set: s, index: i }, j));
                        report.analytic = a;
                        report.numeric = numeric;
                    }
                }
            }
        }
    }
    Ok(report)
}
