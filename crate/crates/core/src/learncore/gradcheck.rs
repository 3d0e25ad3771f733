//! Analytic gradients against f64 central differences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::learncore::graph::{Graph, Var};
use crate::learncore::params::{GroupKind, ParamSet};
use crate::rng::{substream, STREAM_GRADCHECK};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per group (all of them when the group is smaller).
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor so coordinates with vanishing gradient do not
    /// dominate the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            samples: 50,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: BTreeMap<GroupKind, GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .values()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape's gradients for `groups` against central differences
/// of `loss_fn`, which must build a scalar loss from the given parameters.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    groups: &[GroupKind],
    opts: &GradCheckOptions,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, p)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let analytic = g.backward(loss, groups)?;

    let mut rng = substream(opts.seed, STREAM_GRADCHECK);
    let mut report = BTreeMap::new();
    for &kind in groups {
        let group = params.require(kind)?;
        let grads = &analytic[&kind];
        let coords: Vec<(String, usize)> = group
            .iter()
            .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
            .collect();
        let picked: Vec<usize> = if coords.len() <= opts.samples {
            (0..coords.len()).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, coords.len(), opts.samples).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut check = GroupCheck {
            coordinates: picked.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        let mut work = params.clone();
        for ci in picked {
            let (name, i) = &coords[ci];
            let orig = group.get(name)?.data()[*i];
            let set = |w: &mut ParamSet<f64>, v: f64| {
                w.get_mut(kind).unwrap().get_mut(name).unwrap().data_mut()[*i] = v;
            };
            set(&mut work, orig + opts.eps);
            let up = eval(&work)?;
            set(&mut work, orig - opts.eps);
            let down = eval(&work)?;
            set(&mut work, orig);
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = grads[name].data()[*i];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check
                .max_rel_error
                .max(relative_error(a, numeric, opts.floor));
        }
        report.insert(kind, check);
    }
    Ok(GradCheckReport { groups: report })
}
