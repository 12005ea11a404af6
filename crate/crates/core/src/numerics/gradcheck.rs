//! Central finite-difference check of analytic gradients.
//!
//! For each checked coordinate the relative error is
//! `|analytic − fd| / max(1, |analytic|, |fd|)`. A coordinate whose `±h`
//! evaluations switch any ReLU to the other side of its kink is excluded:
//! the derivative is undefined there and central differences average the two
//! one-sided slopes.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, SplitRng, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter tensor (chosen at
    /// random); `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    /// Only parameters whose names start with one of these prefixes.
    pub only: Vec<String>,
    pub seed: u64,
    /// Test hook: adds 1.0 to every coordinate of this parameter's analytic
    /// gradient before comparing.
    pub corrupt_param: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords_per_param: None,
            only: Vec::new(),
            seed: 0,
            corrupt_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub excluded: usize,
    pub worst_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.worst_rel_err <= self.tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.worst_rel_err > self.tol)
    }

    pub fn coordinates_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, perturbing `params` in place (restored on return).
pub fn grad_check<F>(params: &mut ParamStore, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, params)?;
    let base_loss = graph.value(loss).item();
    let base_signature = graph.relu_signature();
    let mut grads = graph.backward(loss)?;
    drop(graph);

    if let Some(name) = &opts.corrupt_param {
        if !params.contains(name) {
            return Err(Error::Missing {
                what: "parameter",
                name: name.clone(),
            });
        }
        if let Some(g) = grads.get_mut(name) {
            g.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
    }

    let mut eval = |params: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let v = f(&mut g, params)?;
        Ok((g.value(v).item(), g.relu_signature()))
    };

    let mut rng = SplitRng::new(opts.seed);
    let names: Vec<String> = params
        .names()
        .filter(|n| opts.only.is_empty() || opts.only.iter().any(|p| n.starts_with(p.as_str())))
        .cloned()
        .collect();

    let mut report = GradCheckReport {
        tol: opts.tol,
        params: Vec::with_capacity(names.len()),
        loss: base_loss,
    };
    for name in names {
        let numel = params.get(&name)?.numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if let Some(max) = opts.max_coords_per_param {
            if max < numel {
                rng.shuffle(&mut coords);
                coords.truncate(max);
                coords.sort_unstable();
            }
        }
        let analytic_grad = grads.get(&name).map(|t| t.data().to_vec());

        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            excluded: 0,
            worst_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in coords {
            let original = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = original + opts.step;
            let plus = eval(params);
            params.get_mut(&name)?.data_mut()[i] = original - opts.step;
            let minus = eval(params);
            params.get_mut(&name)?.data_mut()[i] = original;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);

            if sp != base_signature || sm != base_signature {
                check.excluded += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let analytic = analytic_grad.as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(analytic, numeric);
            check.checked += 1;
            if err > check.worst_rel_err || check.checked == 1 {
                check.worst_rel_err = err;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
