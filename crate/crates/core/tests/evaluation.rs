use std::path::PathBuf;

use afa_core::corpus::{gen_planted, Example, PlantedSpec};
use afa_core::evaluation::{
    accuracy, attention_rows, compute_metrics, deletion_curve, evaluate, predict_all, signal_attention_mass,
    signal_top1_rate, t_interval,
};
use afa_core::target::{TargetDims, TargetModel};
use afa_core::viz::{attention_html, attention_text, curve_svg, Series};
use afa_core::ModelConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-class counts taken straight from the pairs, without a confusion matrix.
fn oracle(preds: &[usize], labels: &[usize], c: usize) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let pairs: Vec<(usize, usize)> = preds.iter().copied().zip(labels.iter().copied()).collect();
    let acc = frac(pairs.iter().filter(|(p, y)| p == y).count(), pairs.len());
    let (mut ps, mut rs, mut fs) = (vec![], vec![], vec![]);
    for k in 0..c {
        let tp = pairs.iter().filter(|&&(p, y)| p == k && y == k).count();
        let fp = pairs.iter().filter(|&&(p, y)| p == k && y != k).count();
        let fnn = pairs.iter().filter(|&&(p, y)| p != k && y == k).count();
        let p = frac(tp, tp + fp);
        let r = frac(tp, tp + fnn);
        ps.push(p);
        rs.push(r);
        fs.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    (acc, ps, rs, fs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_match_brute_force_counts(
        (c, pairs) in (2usize..6).prop_flat_map(|c| (Just(c), prop::collection::vec((0..c, 0..c), 0..60)))
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&preds, &labels, c).unwrap();
        let (acc, p, r, f) = oracle(&preds, &labels, c);
        prop_assert_eq!(m.accuracy, acc);
        prop_assert_eq!(&m.precision, &p);
        prop_assert_eq!(&m.recall, &r);
        prop_assert_eq!(&m.f1, &f);
        prop_assert_eq!(m.macro_p, p.iter().sum::<f64>() / c as f64);
        prop_assert_eq!(m.macro_r, r.iter().sum::<f64>() / c as f64);
        prop_assert_eq!(m.macro_f1, f.iter().sum::<f64>() / c as f64);
        prop_assert_eq!(m.confusion.iter().flatten().sum::<usize>(), preds.len());
    }
}

#[test]
fn t_interval_hand_fixture() {
    let (mean, half) = t_interval(&[0.78, 0.82, 0.80, 0.76, 0.84]).unwrap();
    // s = sqrt(0.004 / 4), t(0.975, 4) = 2.7764451051977987
    let expected = 2.776_445_105_197_798_7 * (0.001f64).sqrt() / 5f64.sqrt();
    assert!((mean - 0.80).abs() < 1e-12);
    assert!((half - expected).abs() < 1e-9, "{half} vs {expected}");
}

fn planted(n: usize, seq_len: usize) -> (Vec<Example>, TargetModel) {
    let spec = PlantedSpec {
        num_examples: n,
        seq_len,
        num_classes: 2,
        signal_per_class: 1,
        distractor_vocab_size: 40,
        seed: 3,
    };
    let data = gen_planted(&spec).unwrap();
    let dims = TargetDims {
        encoder: ModelConfig::planted().encoder(spec.vocab_size()),
        num_classes: 2,
    };
    let model = TargetModel::new(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (data.examples, model)
}

#[test]
fn deletion_at_zero_equals_accuracy() {
    let (data, model) = planted(120, 8);
    let curve = deletion_curve(&model, &data, 3, false, 32).unwrap();
    assert_eq!(curve.points[0], (0, accuracy(&model, &data, 32).unwrap()));
    assert_eq!(curve.points.len(), 4);
    assert_eq!((curve.evaluated, curve.skipped), (120, 0));
    assert_eq!(evaluate(&model, &data, 7).unwrap().accuracy, curve.points[0].1);
}

#[test]
fn deleting_one_token_matches_manual_removal() {
    let (data, model) = planted(60, 8);
    let rows = attention_rows(&model, &data, 16).unwrap();
    let shortened: Vec<Example> = data
        .iter()
        .zip(&rows)
        .map(|(e, a)| {
            let top = (0..a.len()).fold(0, |b, i| if a[i] > a[b] { i } else { b });
            let mut ids = e.token_ids.clone();
            ids.remove(top);
            Example::new(ids, e.label)
        })
        .collect();
    let manual = accuracy(&model, &shortened, 16).unwrap();
    let stat = deletion_curve(&model, &data, 1, false, 16).unwrap();
    let rerank = deletion_curve(&model, &data, 1, true, 16).unwrap();
    assert_eq!(stat.points[1].1, manual);
    assert_eq!(rerank.points[1].1, manual);
}

#[test]
fn short_examples_are_skipped() {
    let (mut data, model) = planted(10, 6);
    data[0].token_ids.truncate(2);
    data[0].signal_positions = None;
    let curve = deletion_curve(&model, &data, 2, false, 4).unwrap();
    assert_eq!((curve.evaluated, curve.skipped), (9, 1));
}

#[test]
fn batch_size_does_not_change_predictions() {
    let (data, model) = planted(50, 10);
    assert_eq!(
        predict_all(&model, &data, 1).unwrap(),
        predict_all(&model, &data, 50).unwrap()
    );
}

#[test]
fn untrained_attention_is_spread_out() {
    let seq_len = 12;
    let (data, model) = planted(400, seq_len);
    let mass = signal_attention_mass(&model, &data, 64).unwrap();
    assert!((mass - 1.0 / seq_len as f64).abs() < 0.05, "{mass}");
    let top1 = signal_top1_rate(&model, &data, 64).unwrap();
    assert!(top1 < 0.3, "{top1}");
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares with the stored file; `UPDATE_GOLDEN=1` rewrites it.
fn assert_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "{name} differs from its golden file");
}

fn sample_tokens() -> Vec<String> {
    ["the", "<b>&", "cat", "\"sat\""]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

const SAMPLE_WEIGHTS: [f64; 4] = [0.1, 0.5, 0.25, 0.15];

#[test]
fn html_heat_map_golden() {
    let html = attention_html(&sample_tokens(), &SAMPLE_WEIGHTS, "pos", "neg & <x>").unwrap();
    let doc = roxmltree::Document::parse(html.trim_start_matches("<!DOCTYPE html>\n")).unwrap();
    let spans: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("span")).collect();
    assert_eq!(spans.len(), 4);
    assert_eq!(spans[1].text(), Some("<b>&"));
    assert!(spans[1].attribute("style").unwrap().contains("1.0000"));
    assert_golden("heatmap.html", &html);
}

#[test]
fn text_heat_map_golden() {
    let text = attention_text(&sample_tokens(), &SAMPLE_WEIGHTS, "pos", "neg").unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_golden("heatmap.txt", &text);
}

#[test]
fn curve_svg_golden() {
    let afa = Series::new("afa", vec![(0.0, 1.0), (1.0, 0.6), (2.0, 0.55)]).with_ci(vec![0.02, 0.05, 0.04]);
    let base = Series::new("baseline", vec![(0.0, 1.0), (1.0, 0.7), (2.0, 0.62)]);
    let svg = curve_svg(&[afa, base], "tokens removed", "accuracy").unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    assert_eq!(root.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
    assert_eq!(root.descendants().filter(|n| n.has_tag_name("polygon")).count(), 1);
    assert_golden("deletion.svg", &svg);
}

#[test]
fn curve_svg_rejects_bad_input() {
    assert!(curve_svg(&[], "x", "y").is_err());
    let backwards = Series::new("s", vec![(1.0, 0.5), (0.0, 0.4)]);
    assert!(curve_svg(&[backwards], "x", "y").is_err());
}
