#![allow(dead_code)]

use chmm::oracle::{joint_forward_filter, DEFAULT_BUDGET};
use chmm::sir::{ModelVariant, SirData, SirFamily, SirObservation};
use chmm::{log_complete_density, CoupledHmm, HiddenTrajectories, ModelFamily};

/// Two birds in one pen over six half-days: the challenge bird dies, the
/// in-contact bird dies at the end.
pub fn two_bird_data() -> SirData {
    use SirObservation::*;
    SirData::new(vec![
        ("a".into(), "1".into(), false, true, vec![Alive, Alive, Alive, Dead, Dead, Dead]),
        ("b".into(), "1".into(), false, false, vec![Alive, Alive, Alive, Alive, Alive, Dead]),
    ])
    .unwrap()
}

pub fn two_bird_family(model: u8) -> SirFamily {
    SirFamily::new(two_bird_data(), ModelVariant::from_model_number(model).unwrap())
}

/// Midpoint rule over the prior CDF cube: probabilities are uniform, rates
/// `Exp(1)`. Returns `(log evidence, posterior mean, posterior sd)`.
pub fn prior_quadrature(family: &SirFamily, n: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let d = family.n_params();
    let variant = family.variant();
    let total = n.pow(d as u32);
    let mut log_l = Vec::with_capacity(total);
    let mut thetas = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let theta: Vec<f64> = (0..d)
            .map(|i| {
                let u = ((rem % n) as f64 + 0.5) / n as f64;
                rem /= n;
                if variant.is_probability(i) {
                    u
                } else {
                    -(-u).ln_1p()
                }
            })
            .collect();
        let model = family.bind(&theta).unwrap();
        log_l.push(joint_forward_filter(&model, DEFAULT_BUDGET).unwrap().0);
        thetas.push(theta);
    }
    let max = log_l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_l.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean: Vec<f64> = (0..d).map(|i| thetas.iter().zip(&w).map(|(t, w)| t[i] * w).sum::<f64>() / z).collect();
    let sd: Vec<f64> = (0..d)
        .map(|i| {
            let m2 = thetas.iter().zip(&w).map(|(t, w)| (t[i] - mean[i]).powi(2) * w).sum::<f64>() / z;
            m2.sqrt()
        })
        .collect();
    (max + (z / total as f64).ln(), mean, sd)
}

/// `log p(Y)` by summing the complete density over every grid; the model
/// must have at most a few thousand grids.
pub fn enumerate_log_likelihood<M: CoupledHmm>(model: &M) -> f64 {
    let (k, t, s) = (model.n_chains(), model.n_steps(), model.n_states());
    let cells = k * t;
    let total = s.pow(cells as u32);
    let mut x = HiddenTrajectories::filled(k, t, 0);
    let mut terms = Vec::new();
    for idx in 0..total {
        let mut rem = idx;
        for c in 0..cells {
            x.set(c / t, c % t, (rem % s) as u8);
            rem /= s;
        }
        let l = log_complete_density(model, &x).unwrap();
        if l.is_finite() {
            terms.push(l);
        }
    }
    chmm::math::log_sum_exp(&terms).unwrap()
}
