use mvemu::design::{generate, Criterion, DesignSpec};
use mvemu::meanfn::{MeanFunction, ModelSpace};
use mvemu::modelsel::{mc3_run, Mc3Options};
use mvemu::rdvs::{rdvs_run, RdvsOptions};
use mvemu::rng::Seed;
use mvemu::simbench::SyntheticSimulator;

fn design(sim: &SyntheticSimulator, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let spec = DesignSpec {
        n,
        criterion: Criterion::MaximinLhs,
        budget: None,
        seed: Seed(seed),
    };
    generate(sim.variables(), &spec).unwrap()
}

#[test]
fn linear_truth_terms_recovered() {
    let sim = SyntheticSimulator::by_name("linear-truth").unwrap();
    let data = sim.run(&design(&sim, 40, 1)).unwrap();
    let space = ModelSpace::new(sim.variables()).unwrap();
    let summary = mc3_run(
        &data,
        &space,
        &Mc3Options {
            iters: 20_000,
            seed: Seed(2),
            ..Default::default()
        },
    )
    .unwrap();
    let truth = MeanFunction::from_descriptors(sim.truth.true_terms.as_ref().unwrap(), sim.variables()).unwrap();
    for (t, p) in summary.inclusion_probabilities() {
        if truth.contains(&t) {
            assert!(p > 0.9, "{t:?} {p}");
        }
    }
}

#[test]
fn sine_screen_flags_only_the_active_input() {
    let sim = SyntheticSimulator::by_name("sine-screen").unwrap();
    let data = sim.run(&design(&sim, 40, 3)).unwrap();
    let r = rdvs_run(
        &data,
        &RdvsOptions {
            b_rep: 100,
            seed: Seed(4),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(r.important(), ["x1"]);
}

#[test]
fn pure_noise_flags_nothing() {
    use mvemu::schema::Dataset;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, StandardNormal};
    let sim = SyntheticSimulator::by_name("sine-screen").unwrap();
    let mut clean = 0;
    let seeds = 10;
    for seed in 0..seeds {
        let points = design(&sim, 30, 100 + seed);
        let mut rng = Seed(200 + seed).stream();
        let y = DMatrix::from_fn(30, 1, |_, _| StandardNormal.sample(&mut rng));
        let data = Dataset::new(sim.schema.clone(), points, y).unwrap();
        let r = rdvs_run(
            &data,
            &RdvsOptions {
                b_rep: 40,
                iters: 1000,
                seed: Seed(seed),
                ..Default::default()
            },
        )
        .unwrap();
        clean += usize::from(r.important().is_empty());
    }
    assert!(clean >= 9, "{clean}/{seeds}");
}
