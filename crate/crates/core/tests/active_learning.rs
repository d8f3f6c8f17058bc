use rand::seq::SliceRandom;

use dockmtl::active::{al_run, AlConfig};
use dockmtl::data::{Compound, HitDirection};
use dockmtl::featurize::featurize;
use dockmtl::rng::SeedKey;
use dockmtl::smiles::parse_smiles;
use dockmtl::synth::{random_molecule, write_smiles};
use dockmtl::train::TrainConfig;

/// Pool labelled by a linear function of the heavy-atom count.
fn pool(n: usize, seed: u64) -> (Vec<Compound>, Vec<f64>) {
    let mut rng = SeedKey::new(seed).named("pool").rng();
    (0..n)
        .map(|_| {
            let smiles = write_smiles(&random_molecule(&mut rng));
            let g = parse_smiles(&smiles).unwrap();
            let y = -0.5 * g.num_atoms() as f64 + 2.0;
            (
                Compound {
                    graph: featurize(&g),
                    smiles,
                },
                y,
            )
        })
        .unzip()
}

#[test]
fn greedy_acquisition_beats_random_sampling() {
    for seed in [1, 2, 3] {
        let (compounds, y) = pool(400, seed);
        let al = AlConfig {
            total_budget: 60,
            n_rounds: 2,
            seed,
            ..AlConfig::default()
        };
        let train = TrainConfig {
            dim: 16,
            layers: 2,
            head_hidden: 16,
            batch_size: 16,
            min_epochs: 10,
            patience: 5,
            max_epochs: 15,
            seed,
            ..TrainConfig::default()
        };
        let mut oracle = |i: usize, _: &Compound| Ok(y[i]);
        let out = al_run(&compounds, &mut oracle, HitDirection::LowerIsBetter, &al, &train).unwrap();
        assert_eq!(out.ensemble.len(), 5);
        let acquired = out.labeled.iter().map(|p| p.1).sum::<f64>() / 60.0;

        let mut order: Vec<usize> = (0..compounds.len()).collect();
        order.shuffle(&mut SeedKey::new(seed).named("baseline").rng());
        let random = order[..60].iter().map(|&i| y[i]).sum::<f64>() / 60.0;
        assert!(acquired < random, "seed {seed}: acquired mean {acquired} vs random {random}");
    }
}
