use proptest::prelude::*;
use rand::seq::SliceRandom;

use dockmtl::active::{al_run, AlConfig};
use dockmtl::data::{Compound, HitDirection};
use dockmtl::featurize::{featurize, FeatureSchema, ATOM_FIELD_WIDTHS, BOND_FIELD_WIDTHS};
use dockmtl::io::{ingest_csv, IngestOptions};
use dockmtl::model::{predict, GraphBatch, ModelConfig, ModelParams};
use dockmtl::rng::SeedKey;
use dockmtl::smiles::{parse_smiles, BondOrder};
use dockmtl::synth::{random_molecule, write_smiles};
use dockmtl::train::TrainConfig;

fn bond_valence(order: BondOrder) -> u32 {
    match order {
        BondOrder::Single | BondOrder::Aromatic => 1,
        BondOrder::Double => 2,
        BondOrder::Triple => 3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn parsing_random_molecules(seed in any::<u64>()) {
        let raw = random_molecule(&mut SeedKey::new(seed).rng());
        let smiles = write_smiles(&raw);
        let g = parse_smiles(&smiles).unwrap();
        prop_assert_eq!(&g, &parse_smiles(&smiles).unwrap());
        prop_assert_eq!(g.num_atoms(), raw.elements.len());
        prop_assert_eq!(g.num_atoms(), smiles.chars().filter(|c| c.is_ascii_uppercase()).count());
        prop_assert_eq!(g.num_bonds(), raw.bonds.len());
        for (i, atom) in g.atoms.iter().enumerate() {
            let used: u32 = g.adjacency[i].iter().map(|&(_, b)| bond_valence(g.bonds[b].order)).sum();
            let full = match atom.atomic_number {
                6 => 4,
                7 => 3,
                8 => 2,
                z => panic!("unexpected element {z}"),
            };
            prop_assert_eq!(used + u32::from(atom.implicit_h), full, "atom {} of {}", i, smiles);
        }
    }

    #[test]
    fn feature_indices_stay_in_range(seed in any::<u64>()) {
        let smiles = write_smiles(&random_molecule(&mut SeedKey::new(seed).rng()));
        let f = featurize(&parse_smiles(&smiles).unwrap());
        for atom in &f.atom_indices {
            for (v, w) in atom.iter().zip(&ATOM_FIELD_WIDTHS) {
                prop_assert!(usize::from(*v) < *w);
            }
        }
        for bond in &f.bond_indices {
            for (v, w) in bond.iter().zip(&BOND_FIELD_WIDTHS) {
                prop_assert!(usize::from(*v) < *w);
            }
        }
    }
}

#[test]
fn schema_totals() {
    assert_eq!(FeatureSchema.atom_width_total(), 166);
    assert_eq!(FeatureSchema.bond_width_total(), 13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn predictions_ignore_atom_order_and_batching(seed in any::<u64>(), split in 1usize..4) {
        let mut rng = SeedKey::new(seed).rng();
        let smiles: Vec<String> = (0..4).map(|_| write_smiles(&random_molecule(&mut rng))).collect();
        let graphs: Vec<_> = smiles.iter().map(|s| featurize(&parse_smiles(s).unwrap())).collect();
        let params = ModelParams::init(
            ModelConfig { dim: 8, layers: 2, head_hidden: 8, dropout: 0.2 },
            1,
            SeedKey::new(seed).named("model"),
        );
        let together = predict(&params, &GraphBatch::new(&graphs.iter().collect::<Vec<_>>()).unwrap(), &[0]).unwrap();

        let mut relabelled = graphs.clone();
        for g in &mut relabelled {
            let mut perm: Vec<usize> = (0..g.num_atoms()).collect();
            perm.shuffle(&mut rng);
            let mut atoms = g.atom_indices.clone();
            for (i, a) in g.atom_indices.iter().enumerate() {
                atoms[perm[i]] = *a;
            }
            g.atom_indices = atoms;
            for b in &mut g.bonds {
                *b = (perm[b.1], perm[b.0]);
            }
        }
        let refs: Vec<_> = relabelled.iter().collect();
        let mut apart = predict(&params, &GraphBatch::new(&refs[..split]).unwrap(), &[0]).unwrap().into_data();
        apart.extend(predict(&params, &GraphBatch::new(&refs[split..]).unwrap(), &[0]).unwrap().into_data());
        for (a, b) in together.data().iter().zip(&apart) {
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }
}

fn csv_row() -> impl Strategy<Value = (String, Option<f64>, Option<f64>)> {
    let smiles = prop_oneof![
        Just("CCO".to_string()),
        Just("c1ccccc1".to_string()),
        Just("C1CC".to_string()),
        Just("CC(C".to_string()),
        Just(String::new()),
        "[CNO]{1,6}",
    ];
    let value = prop_oneof![Just(None), (-12.0f64..0.0).prop_map(Some)];
    let ic50 = prop_oneof![Just(None), (1e-9f64..1e-3).prop_map(Some), Just(Some(-1.0))];
    (smiles, value, ic50)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ingest_accounts_for_every_row(rows in prop::collection::vec(csv_row(), 0..30)) {
        let mut text = String::from("smiles,T0,T1_ic50_molar\n");
        for (s, v, ic) in &rows {
            let cell = |x: &Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!("{s},{},{}\n", cell(v), cell(ic)));
        }
        let report = ingest_csv(text.as_bytes(), &IngestOptions::default()).unwrap();
        prop_assert_eq!(report.rows, rows.len());
        prop_assert_eq!(report.accepted + report.rejected.len(), rows.len());
        for e in &report.rejected {
            prop_assert!(e.line >= 2 && e.line <= rows.len() + 1);
        }
        let labelled = report.dataset.as_ref().map_or(0, |d| d.total_labels());
        prop_assert!(labelled >= report.compounds);
    }
}

fn pool(n: usize, seed: u64) -> (Vec<Compound>, Vec<f64>) {
    let mut rng = SeedKey::new(seed).rng();
    (0..n)
        .map(|_| {
            let smiles = write_smiles(&random_molecule(&mut rng));
            let g = parse_smiles(&smiles).unwrap();
            let y = g.num_atoms() as f64 * -0.3;
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn active_learning_spends_the_exact_budget(seed in any::<u64>(), budget in 10usize..24, rounds in 0usize..4) {
        let (compounds, y) = pool(30, seed);
        let cfg = AlConfig {
            ensemble_size: 2,
            total_budget: budget,
            n_rounds: rounds,
            seed,
            ..AlConfig::default()
        };
        let train = TrainConfig {
            dim: 8,
            layers: 1,
            head_hidden: 8,
            batch_size: 8,
            min_epochs: 1,
            patience: 1,
            max_epochs: 2,
            seed,
            ..TrainConfig::default()
        };
        let mut asked = Vec::new();
        let mut oracle = |i: usize, _: &Compound| {
            asked.push(i);
            Ok(y[i])
        };
        let out = al_run(&compounds, &mut oracle, HitDirection::LowerIsBetter, &cfg, &train).unwrap();
        prop_assert_eq!(out.labeled.len(), budget);
        let mut seen = asked.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), asked.len(), "a compound was labelled twice");
        prop_assert_eq!(asked.len(), budget);
    }
}
