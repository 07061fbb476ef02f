use ecglab::config::ScoreSource;
use ecglab::data::dataset::{answer_for, InstructionSample};
use ecglab::data::{ClassCatalog, EcgClass, GrayImage, LoadedSample};
use ecglab::eval::{
    evaluate, extract_labels, hamming_loss, macro_f1, roc_auc, word_f1_score, BuiltinJudge, Judge, JudgeRequest,
    ReportModel,
};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn auc_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn f1_oracle(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> f64 {
    let k = truth[0].len();
    let mut sum = 0.0;
    for c in 0..k {
        let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i][c] == 1).collect();
        let t: Vec<usize> = (0..truth.len()).filter(|&i| truth[i][c] == 1).collect();
        let tp = p.iter().filter(|i| t.contains(i)).count() as f64;
        let precision = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
        let recall = if t.is_empty() { 0.0 } else { tp / t.len() as f64 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / k as f64
}

fn hamming_oracle(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> f64 {
    let mut wrong = 0;
    let mut total = 0;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            total += 1;
            if a != b {
                wrong += 1;
            }
        }
    }
    wrong as f64 / total as f64
}

fn random_bits(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<u8>> {
    (0..n)
        .map(|_| (0..k).map(|_| u8::from(rng.random::<f64>() < 0.35)).collect())
        .collect()
}

#[test]
fn auc_matches_pairwise_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(2..40);
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 4.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        let got = roc_auc(&scores, &labels).unwrap();
        let want = auc_oracle(&scores, &labels);
        match (got, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "{g} vs {w}"),
            (None, None) => {}
            other => panic!("definedness differs: {other:?}"),
        }
        checked += 1;
    }
}

#[test]
fn f1_and_hamming_match_oracles_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(1..30);
        let k = rng.random_range(1..8);
        let truth = random_bits(&mut rng, n, k);
        let pred = random_bits(&mut rng, n, k);
        assert!((macro_f1(&pred, &truth).unwrap() - f1_oracle(&pred, &truth)).abs() < 1e-12);
        assert!((hamming_loss(&pred, &truth).unwrap() - hamming_oracle(&pred, &truth)).abs() < 1e-12);
    }
}

#[test]
fn worked_examples() {
    assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), Some(0.75));
    let truth = vec![vec![1, 0, 1], vec![0, 1, 0]];
    let pred = vec![vec![1, 1, 1], vec![0, 1, 0]];
    assert_eq!(hamming_loss(&pred, &truth).unwrap(), 1.0 / 6.0);
    let truth = vec![vec![1, 0], vec![0, 1], vec![0, 1]];
    let pred = vec![vec![1, 0], vec![1, 1], vec![0, 0]];
    assert!((macro_f1(&pred, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    // Six shared words of nine in each report.
    let s = word_f1_score("a b c d e f x y z", "a b c d e f p q r");
    assert!((s - 200.0 / 3.0).abs() < 1e-12, "{s}");
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps(
        raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..30)
    ) {
        let scores: Vec<f64> = raw.iter().map(|r| f64::from(r.0)).collect();
        let labels: Vec<u8> = raw.iter().map(|r| u8::from(r.1)).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&mapped, &labels).unwrap());
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        if let (Some(a), Some(b)) = (roc_auc(&scores, &labels).unwrap(), roc_auc(&scores, &flipped).unwrap()) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hamming_of_complement_sums_to_one(
        rows in proptest::collection::vec(proptest::collection::vec((any::<bool>(), any::<bool>()), 4), 1..12)
    ) {
        let pred: Vec<Vec<u8>> = rows.iter().map(|r| r.iter().map(|c| u8::from(c.0)).collect()).collect();
        let truth: Vec<Vec<u8>> = rows.iter().map(|r| r.iter().map(|c| u8::from(c.1)).collect()).collect();
        let neg: Vec<Vec<u8>> = pred.iter().map(|r| r.iter().map(|b| 1 - b).collect()).collect();
        let sum = hamming_loss(&pred, &truth).unwrap() + hamming_loss(&neg, &truth).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert_eq!(hamming_loss(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn builtin_judge_is_symmetric_and_bounded(a in "[a-e ]{0,20}", b in "[a-e ]{0,20}") {
        let ab = word_f1_score(&a, &b);
        prop_assert_eq!(ab, word_f1_score(&b, &a));
        prop_assert!((0.0..=100.0).contains(&ab));
        let req = JudgeRequest { generated: a.clone(), reference: a.clone(), labels: vec![] };
        prop_assert_eq!(BuiltinJudge.score(&req).unwrap().score, 100.0);
    }
}

#[test]
fn every_answer_round_trips_through_label_extraction() {
    let cat = ClassCatalog::default();
    for set in ecglab::eval::answer_label_sets() {
        assert_eq!(extract_labels(&answer_for(&set), &cat), cat.to_vector(&set), "{set:?}");
    }
    assert_eq!(extract_labels("nothing of note", &cat), vec![0; 6]);
}

/// Echoes a fixed reply per image.
struct Lookup(Vec<(GrayImage, String)>);

impl ReportModel for Lookup {
    fn report(&self, image: &GrayImage, _question: &str) -> ecglab::Result<String> {
        Ok(self
            .0
            .iter()
            .find(|(i, _)| i == image)
            .map(|(_, a)| a.clone())
            .unwrap_or_default())
    }
}

fn samples() -> Vec<LoadedSample> {
    let cat = ClassCatalog::default();
    let sets = ecglab::eval::answer_label_sets();
    (0..24)
        .map(|i| {
            let set = &sets[i % sets.len()];
            LoadedSample {
                record: InstructionSample {
                    image: format!("{i}.pgm"),
                    question: "Interpret this ECG.".into(),
                    answer: answer_for(set),
                    labels: cat.to_vector(set),
                    seed: i as u64,
                },
                image: GrayImage::filled(2, 2, i as u8),
            }
        })
        .collect()
}

#[test]
fn echoing_the_reference_scores_perfectly() {
    let samples = samples();
    let echo = Lookup(
        samples
            .iter()
            .map(|s| (s.image.clone(), s.record.answer.clone()))
            .collect(),
    );
    let cat = ClassCatalog::default();
    let r = evaluate(&echo, &samples, &cat, &BuiltinJudge, ScoreSource::Text, "fp").unwrap();
    assert_eq!(r.macro_f1, 1.0);
    assert_eq!(r.hamming_loss, 0.0);
    assert_eq!(r.macro_auc, 1.0);
    assert_eq!(r.report_score, 100.0);
    assert_eq!(r.n_samples, 24);
}

#[test]
fn silent_model_has_hamming_equal_to_label_density() {
    let samples = samples();
    let silent = Lookup(Vec::new());
    let cat = ClassCatalog::default();
    let r = evaluate(&silent, &samples, &cat, &BuiltinJudge, ScoreSource::Text, "fp").unwrap();
    let ones: usize = samples
        .iter()
        .map(|s| s.record.labels.iter().filter(|&&b| b == 1).count())
        .sum();
    assert!((r.hamming_loss - ones as f64 / (24.0 * 6.0)).abs() < 1e-12);
    assert_eq!(r.macro_f1, 0.0);
    assert_eq!(r.macro_auc, 0.5);
    assert_eq!(r.report_score, 0.0);
    let again = evaluate(&silent, &samples, &cat, &BuiltinJudge, ScoreSource::Text, "fp").unwrap();
    assert_eq!(r.to_json(), again.to_json());
}

#[test]
fn normal_is_a_class_like_any_other() {
    let cat = ClassCatalog::default();
    assert_eq!(cat.classes[0], EcgClass::Normal);
    assert_eq!(extract_labels("Findings: normal.", &cat), vec![1, 0, 0, 0, 0, 0]);
}
