use hiermatch::data::format::{read_dataset, write_dataset};
use hiermatch::data::{generate, SyntheticSpec};
use hiermatch::embedder::embed_pair;
use hiermatch::harness::eval::rank_of;
use hiermatch::harness::trace::{fidelity, random_trace};
use hiermatch::{Branch, Graph, GumbelConfig, HierarchyTrace, Model, ModelConfig, ModeFlags, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Tensor::new(rows, cols, v).unwrap())
}

fn pair_input() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(ns, np)| (matrix(ns, 3), matrix(np, 3)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_mode_reduces_each_branch_to_one_vector(
        (s, p) in pair_input(),
        seed in any::<u64>(),
        no_coattn in any::<bool>(),
        greedy in any::<bool>(),
    ) {
        let cfg = ModelConfig {
            d_raw: 3,
            d: 4,
            d_h: 2,
            modes: ModeFlags { no_coattn, ..ModeFlags::default() },
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone(), seed).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let gumbel = if greedy { GumbelConfig::greedy(1.0) } else { GumbelConfig::sample(1.0, seed) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = embed_pair(&mut g, &vars, &cfg, &s, &p, &gumbel, &mut rng, None).unwrap();
        prop_assert_eq!(e.sketch_trace.len(), s.rows() - 1);
        prop_assert_eq!(e.photo_trace.len(), p.rows() - 1);
        prop_assert_eq!(g.shape(e.sketch_final).rows, 1);
        prop_assert_eq!(g.shape(e.photo_final).cols, 4);
        prop_assert!(e.sketch_trace.validate(s.rows(), true).is_ok());
        prop_assert!(e.photo_trace.validate(p.rows(), true).is_ok());
        prop_assert!(g.value(e.sketch_final).is_finite());
    }

    #[test]
    fn traces_roundtrip_through_text(n in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_trace(n, Branch::Sketch, &mut rng);
        let back = HierarchyTrace::parse(&t.to_text()).unwrap();
        prop_assert_eq!(&back, &t);
        let f = fidelity(&t, &hiermatch::data::MergeTree::parse(&merge_text(&t), n).unwrap());
        prop_assert_eq!(f, 1.0);
    }

    #[test]
    fn ranks_stay_in_gallery(d in prop::collection::vec(0.0f64..4.0, 1..30), pick in any::<prop::sample::Index>()) {
        let truth = pick.index(d.len());
        let r = rank_of(&d, truth);
        prop_assert!(r >= 1 && r <= d.len());
        // strictly closer items always outrank the truth
        prop_assert!(r > d.iter().filter(|&&x| x < d[truth]).count());
    }
}

fn merge_text(t: &HierarchyTrace) -> String {
    if t.is_empty() {
        return "-".into();
    }
    t.entries
        .iter()
        .map(|e| format!("{}-{}>{}", e.a_id, e.b_id, e.new_id))
        .collect::<Vec<_>>()
        .join(";")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_datasets_roundtrip_bit_exactly(
        n_identities in 2usize..8,
        d_raw in 1usize..6,
        seed in any::<u64>(),
    ) {
        let spec = SyntheticSpec {
            n_identities,
            n_train: n_identities / 2,
            d_raw,
            n_regions_photo: 4,
            strokes_min: 1,
            strokes_max: 4,
            seed,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(&ds, tmp.path()).unwrap();
        let back = read_dataset(tmp.path()).unwrap();
        prop_assert_eq!(&back, &ds);
        for (a, b) in back.records.iter().zip(&ds.records) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.regions), bits(&b.regions));
        }
    }
}
