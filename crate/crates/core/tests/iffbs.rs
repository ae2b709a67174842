use chmm::iffbs::{initialize, IffbsKernel};
use chmm::oracle::{exact_smoothing_marginals, DEFAULT_BUDGET};
use chmm::simulate::{simulate_experiment, ExperimentDesign, PenDesign};
use chmm::sir::{ModelVariant, SirModel, SirParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn long_run_marginals_match_exact_smoothing() {
    let design = ExperimentDesign {
        name: "three".into(),
        pens: (0..2)
            .map(|i| PenDesign {
                size: 3,
                challenge: 1,
                challenge_transgenic: i == 1,
                contact_transgenic: i == 0,
            })
            .collect(),
        n_steps: 10,
        moribund_prob: 0.5,
    };
    let params = SirParams::scaling_study();
    let sim = simulate_experiment(&design, &params, ModelVariant::from_model_number(16).unwrap(), 11).unwrap();
    let model = SirModel::new(&sim.data, params).unwrap();
    let exact = exact_smoothing_marginals(&model, DEFAULT_BUDGET).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut config = initialize(&model, &mut rng).unwrap();
    let mut kernel = IffbsKernel::new(&model);
    let (k, t) = (6, 10);
    let mut counts = vec![0u32; k * t * 3];
    let sweeps = 20_000;
    for _ in 0..200 {
        kernel.sweep(&mut config, &mut rng).unwrap();
    }
    for _ in 0..sweeps {
        kernel.sweep(&mut config, &mut rng).unwrap();
        for c in 0..k {
            for s in 0..t {
                counts[(c * t + s) * 3 + config.trajectories().get(c, s) as usize] += 1;
            }
        }
    }
    let mut worst = 0.0f64;
    for cell in 0..k * t {
        let tv: f64 = (0..3)
            .map(|s| (counts[cell * 3 + s] as f64 / sweeps as f64 - exact[cell * 3 + s]).abs())
            .sum::<f64>()
            / 2.0;
        worst = worst.max(tv);
    }
    assert!(worst <= 0.03, "max TV {worst}");
}
