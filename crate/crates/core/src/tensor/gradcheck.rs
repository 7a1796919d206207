use rand::seq::index::sample;

use super::{Graph, NodeId, ParamStore, Result, TensorError};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Step of the central difference stencil.
    pub epsilon: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-2,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

fn eval<L>(store: &ParamStore<f64>, loss_fn: &L) -> Result<f64>
where
    L: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    Ok(g.scalar(loss))
}

/// Compares analytic gradients of `loss_fn` against the sixth-order central
/// difference `(45 d1 - 9 d2 + d3) / 60h` with `dk = f(x+kh) - f(x-kh)`.
///
/// The relative error of a coordinate is `|ga - gn| / max(1e-8, |ga| + |gn|)`;
/// the report carries the maximum over all checked coordinates.
pub fn finite_diff_check<L>(store: &mut ParamStore<f64>, loss_fn: L, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let first = eval(store, &loss_fn)?;
    let second = eval(store, &loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let grads = g.backward(loss)?;
        store.ids().map(|id| grads.get(id).map(<[f64]>::to_vec)).collect()
    };

    let h = cfg.epsilon;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => {
                let mut rng = stream(cfg.seed, "gradcheck", id.0 as u64);
                let mut picked = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[i] = orig + delta;
                eval(store, &loss_fn)
            };
            let mut d = [0.0; 3];
            for (k, dk) in d.iter_mut().enumerate() {
                let step = (k + 1) as f64 * h;
                // Differences first: equal evaluations must give exactly zero.
                *dk = at(step)? - at(-step)?;
            }
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (45.0 * d[0] - 9.0 * d[1] + d[2]) / (60.0 * h);
            let ga = analytic[id.0].as_ref().map_or(0.0, |g| g[i]);
            let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
