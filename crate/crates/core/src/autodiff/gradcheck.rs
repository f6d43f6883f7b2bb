//! Central finite differences, used as an independent oracle for the tape.

use std::collections::BTreeMap;

use crate::params::Params;
use crate::rng::RngStream;
use crate::Result;

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares analytic parameter gradients with central differences of
/// `loss` at `probes` randomly chosen coordinates.
///
/// `loss` must be a pure function of the parameter values.
pub fn probe_params(
    params: &Params,
    analytic: &BTreeMap<String, crate::Tensor>,
    mut loss: impl FnMut(&Params) -> Result<f64>,
    probes: usize,
    h: f64,
    floor: f64,
    rng: &mut RngStream,
) -> Result<Vec<ProbeResult>> {
    let names: Vec<&String> = params.names().collect();
    let total: usize = names.iter().map(|n| params.get(n).unwrap().len()).sum();
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut flat = rng.below(total as u64) as usize;
        let mut chosen = names[0];
        for n in &names {
            let len = params.get(n).unwrap().len();
            if flat < len {
                chosen = n;
                break;
            }
            flat -= len;
        }
        let x0 = params.get(chosen).unwrap().data()[flat];
        let mut eval = |v: f64| -> Result<f64> {
            let mut p = params.clone();
            p.get_mut(chosen).unwrap().data_mut()[flat] = v;
            loss(&p)
        };
        let numeric = (eval(x0 + h)? - eval(x0 - h)?) / (2.0 * h);
        let a = analytic[chosen.as_str()].data()[flat];
        out.push(ProbeResult {
            name: chosen.clone(),
            index: flat,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric, floor),
        });
    }
    Ok(out)
}
