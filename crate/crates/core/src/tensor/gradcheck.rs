use super::{Graph, Tensor, Var};
use crate::error::{AsdError, Result};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero entries from
/// dominating.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare the tape gradient of a scalar function of `inputs` against
/// central differences with step `h`, for every input element.
///
/// `f` receives fresh parameter leaves, one per input, and returns the scalar node.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(AsdError::shape("check_gradients", "scalar", g.shape(out).to_vec()));
        }
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let mut report = GradCheck { max_rel_error: 0.0, checked: 0 };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let (gp, _, op) = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - h;
            let (gm, _, om) = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let fd = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
            report.max_rel_error = report.max_rel_error.max(relative_error(fd, analytic[j], 1e-4));
            report.checked += 1;
        }
    }
    Ok(report)
}
