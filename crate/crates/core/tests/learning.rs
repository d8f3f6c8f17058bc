use dockmtl::data::{Compound, HitDirection, TaskDataset};
use dockmtl::featurize::{featurize, FeaturizedGraph};
use dockmtl::metrics::pearson;
use dockmtl::rng::SeedKey;
use dockmtl::smiles::parse_smiles;
use dockmtl::synth::{random_molecule, synth_gen, write_smiles, SynthConfig};
use dockmtl::train::{dataset_loss, predict_graphs, train, TrainConfig};

fn synth(n_compounds: usize, noise: f64, seed: u64) -> TaskDataset {
    synth_gen(&SynthConfig {
        n_tasks: 2,
        n_compounds,
        seed,
        noise,
        identical_tasks: false,
    })
    .unwrap()
    .to_dataset()
    .unwrap()
}

/// Molecules labelled by a noise-free linear function of mean atom features,
/// which mean pooling can represent exactly.
fn linear_target(n: usize, seed: u64) -> TaskDataset {
    let mut rng = SeedKey::new(seed).rng();
    let mut compounds = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let smiles = write_smiles(&random_molecule(&mut rng));
        let g = parse_smiles(&smiles).unwrap();
        let atoms = g.num_atoms() as f64;
        let frac = |z: u8| g.atoms.iter().filter(|a| a.atomic_number == z).count() as f64 / atoms;
        let mean_degree = g.atoms.iter().map(|a| f64::from(a.degree)).sum::<f64>() / atoms;
        labels.push(vec![Some(1.5 * frac(8) - frac(7) + 0.5 * mean_degree)]);
        compounds.push(Compound {
            graph: featurize(&g),
            smiles,
        });
    }
    TaskDataset::new(compounds, vec!["lin".into()], vec![HitDirection::LowerIsBetter], labels).unwrap()
}

#[test]
fn noise_free_target_is_fitted() {
    let ds = linear_target(300, 4);
    let config = TrainConfig {
        dim: 32,
        layers: 3,
        head_hidden: 32,
        batch_size: 32,
        dropout: 0.0,
        lr: 3e-3,
        val_fraction: 0.1,
        min_epochs: 150,
        patience: 150,
        max_epochs: 150,
        seed: 4,
    };
    let outcome = train(&ds, &config).unwrap();
    let loss = dataset_loss(&outcome.params, &ds, 64).unwrap();
    assert!(loss < 1e-2, "train MSE {loss}");
}

#[test]
fn synthetic_oracle_is_learnable() {
    let ds = synth(2500, 0.1, 8);
    let train_ds = ds.subset(&(0..2000).collect::<Vec<_>>()).unwrap().select_tasks(&[0]).unwrap();
    let test = ds.subset(&(2000..2500).collect::<Vec<_>>()).unwrap();
    let config = TrainConfig {
        dim: 32,
        layers: 3,
        head_hidden: 32,
        min_epochs: 30,
        patience: 10,
        max_epochs: 40,
        seed: 8,
        ..TrainConfig::default()
    };
    let outcome = train(&train_ds, &config).unwrap();
    let graphs: Vec<&FeaturizedGraph> = test.compounds().iter().map(|c| &c.graph).collect();
    let y: Vec<f64> = (0..test.len()).map(|i| test.label(i, 0).unwrap()).collect();
    let y_hat = predict_graphs(&outcome.params, &graphs, &[0], 256).unwrap().into_data();
    let r = pearson(&y, &y_hat).unwrap();
    assert!(r >= 0.9, "test pearson {r}");
}
