//! Central-difference gradient checking.

use crate::error::Result;
use crate::nn::{Ctx, Mode};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl GradcheckReport {
    fn new(tol: f64) -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            tol,
            pass: true,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
        self.max_abs_err = self.max_abs_err.max(abs);
        // NaN must fail the check rather than vanish in a max().
        if rel.is_nan() || rel > self.max_rel_err {
            self.max_rel_err = rel;
        }
        self.checked += 1;
        self.pass = self.max_rel_err <= self.tol;
    }

    /// Combines two reports, keeping the worst errors.
    pub fn merge(mut self, other: &GradcheckReport) -> Self {
        if other.max_rel_err.is_nan() || other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.tol = self.tol.max(other.tol);
        self.pass = self.pass && other.pass;
        self
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central
/// differences `(f(x + h) - f(x - h)) / 2h` for every input element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let mut report = GradcheckReport::new(tol);
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + h;
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = x - h;
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = x;
            report.record(analytic[i].data()[j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Gradient check on selected parameter elements of a model.
///
/// `f` builds the scalar loss inside a fresh [`Ctx`]; it is evaluated in
/// `mode` for both the analytic and the numeric gradients.
pub fn gradcheck_params<F>(
    store: &mut ParamStore,
    elements: &[(ParamId, usize)],
    mode: Mode,
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let snapshot_buffers = store.buffers().to_vec();
    let eval = |store: &mut ParamStore| -> Result<f64> {
        let mut ctx = Ctx::new(store, mode);
        let out = f(&mut ctx)?;
        ctx.value(out).item()
    };

    store.zero_grads();
    {
        let mut ctx = Ctx::new(store, mode);
        let out = f(&mut ctx)?;
        ctx.backward(out)?;
    }
    let analytic: Vec<f64> = elements.iter().map(|&(id, j)| store.get(id).grad.data()[j]).collect();
    store.zero_grads();

    let mut report = GradcheckReport::new(tol);
    for (&(id, j), a) in elements.iter().zip(analytic) {
        let x = store.get(id).value.data()[j];
        store.get_mut(id).value.data_mut()[j] = x + h;
        let plus = eval(store)?;
        store.get_mut(id).value.data_mut()[j] = x - h;
        let minus = eval(store)?;
        store.get_mut(id).value.data_mut()[j] = x;
        report.record(a, (plus - minus) / (2.0 * h));
    }
    store.buffers_mut().clone_from_slice(&snapshot_buffers);
    Ok(report)
}
