use chmm::evidence::{compare_methods, CompareBudget, Method};
use chmm::io::{read_trajectories_csv, write_trajectories_csv};
use chmm::simulate::{preset, simulate_experiment};
use chmm::sir::{ModelVariant, SirData, SirModel, SirParams};
use chmm::CoupledHmm;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn simulated_data_round_trips_through_csv() {
    let params = SirParams::scaling_study();
    let sim = simulate_experiment(&preset("hpai-cross").unwrap(), &params, ModelVariant::from_model_number(16).unwrap(), 8)
        .unwrap();
    let mut buf = Vec::new();
    sim.data.write_csv(&mut buf).unwrap();
    let back = SirData::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, sim.data);

    let model = SirModel::new(&back, params).unwrap();
    let mut buf = Vec::new();
    write_trajectories_csv(&sim.truth, model.state_space(), &mut buf).unwrap();
    let truth = read_trajectories_csv(buf.as_slice(), model.state_space()).unwrap();
    assert_eq!(truth, sim.truth);
}

#[test]
fn small_comparison_covers_the_oracle() {
    let params = SirParams::scaling_study();
    let sim = simulate_experiment(&preset("scaling-4").unwrap(), &params, ModelVariant::from_model_number(16).unwrap(), 2)
        .unwrap();
    let model = SirModel::new(&sim.data, params).unwrap();
    let budget = CompareBudget { n_estimates: 200, n_particles: 1000, ..CompareBudget::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = compare_methods(&model, &[Method::Oracle, Method::Miffbs, Method::Pf], &budget, &mut rng).unwrap();
    let truth = rows[0].log_mean.unwrap();
    assert_eq!(rows[0].se_log, Some(0.0));
    for r in &rows[1..] {
        assert!(r.covers(truth), "{:?} misses {truth}", r);
    }
}
