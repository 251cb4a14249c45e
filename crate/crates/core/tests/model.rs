use convrec::arch::{parse_arch, ArchConfig};
use convrec::data::{Batch, Document};
use convrec::head::predict;
use convrec::layers::{conv_stack_out_length, min_input_length};
use convrec::model::{forward, predict_probs, Mode};
use convrec::{count_params, ModelParams, Rng, Vocabulary};
use proptest::prelude::*;

fn random_doc(rng: &mut Rng, len: usize, label: usize) -> Document {
    let vocab = Vocabulary::build();
    let text: String = (0..len).map(|_| vocab.symbol(rng.below(96)).unwrap()).collect();
    Document::new(label, text, &vocab, 4096).unwrap()
}

fn model(name: &str, classes: usize, seed: u64) -> (ArchConfig, ModelParams) {
    let cfg = parse_arch(name, classes).unwrap();
    let p = ModelParams::init(&cfg, &mut Rng::new(seed)).unwrap();
    (cfg, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batching_does_not_change_predictions(seed in 0u64..1000, lens in prop::collection::vec(4usize..90, 1..6)) {
        let (_, p) = model("C2R1D8", 3, seed);
        let mut rng = Rng::new(seed + 1);
        let docs: Vec<Document> = lens.iter().map(|&l| random_doc(&mut rng, l, 0)).collect();
        let batched = predict_probs(&p, &Batch::from_docs(docs.iter().enumerate())).unwrap();
        for (i, d) in docs.iter().enumerate() {
            let single = predict_probs(&p, &Batch::from_docs([(0, d)])).unwrap();
            for (a, b) in single.data().iter().zip(&batched.data()[i * 3..(i + 1) * 3]) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn probabilities_form_a_distribution(seed in 0u64..1000, len in 16usize..200) {
        let (_, p) = model("C4R1D8", 5, seed);
        let d = random_doc(&mut Rng::new(seed), len, 0);
        let probs = predict_probs(&p, &Batch::from_docs([(0, &d)])).unwrap();
        prop_assert!(probs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn count_matches_allocation(depth in 2usize..=5, width in 1usize..40, classes in 2usize..20) {
        let cfg = parse_arch(&format!("C{depth}R1D{width}"), classes).unwrap();
        prop_assert_eq!(ModelParams::<f64>::zeros(&cfg).num_params(), count_params(&cfg).total);
    }

    #[test]
    fn realized_length_matches_formula(depth in 2usize..=5, len in 1usize..300) {
        let (cfg, p) = model(&format!("C{depth}R1D2"), 2, 0);
        let d = random_doc(&mut Rng::new(len as u64), len, 0);
        let batch = Batch::from_docs([(0, &d)]);
        match conv_stack_out_length(len, &cfg.pools()) {
            Ok(n) => {
                let fwd = forward(&p, &batch, Mode::Eval).unwrap();
                prop_assert_eq!(fwd.recurrent_mask().lengths(), vec![n]);
            }
            Err(_) => {
                prop_assert!(len < min_input_length(&cfg.pools()));
                prop_assert!(forward(&p, &batch, Mode::Eval).is_err());
            }
        }
    }
}

#[test]
fn dropout_only_acts_in_training() {
    let (_, p) = model("C2R1D16", 2, 3);
    let d = random_doc(&mut Rng::new(1), 40, 0);
    let batch = Batch::from_docs([(0, &d)]);
    let eval = forward(&p, &batch, Mode::Eval).unwrap().log_probs;
    let again = forward(&p, &batch, Mode::Eval).unwrap().log_probs;
    assert_eq!(eval, again);
    let train = |seed| forward(&p, &batch, Mode::Train { seed, dropout: 0.5 }).unwrap().log_probs;
    assert_eq!(train(1), train(1));
    assert_ne!(train(1), eval);
    assert_ne!(train(1), train(2));
}

#[test]
fn single_precision_agrees_with_double() {
    let (_, p) = model("C3R1D32", 4, 5);
    let p32 = p.cast::<f32>();
    let mut rng = Rng::new(6);
    let docs: Vec<Document> = (0..4).map(|i| random_doc(&mut rng, 30 + 40 * i, 0)).collect();
    let batch = Batch::from_docs(docs.iter().enumerate());
    let a = predict_probs(&p, &batch).unwrap();
    let b = predict_probs(&p32, &batch).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-5);
    }
    assert_eq!(predict(&a), predict(&b.cast::<f64>()));
}
