use std::collections::BTreeMap;

use hdno::eval::{corpus_bleu, inform_rate, judge, success_rate, total_score, Outcome};
use hdno::latent::{kmeans, nmi, pca_2d, permutation_nmi, purity};
use hdno::rng;
use hdno::sim::{Goal, World};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// A restaurant goal whose constraint matches entity 0.
fn goal(world: &World, requests: &[&str]) -> Goal {
    let schema = world.domain("restaurant").unwrap();
    let mut constraints = BTreeMap::new();
    constraints.insert(schema.slots[0].name.to_string(), schema.entity_value(0, 0).to_string());
    Goal { domain: "restaurant".into(), constraints, requests: requests.iter().map(|r| r.to_string()).collect() }
}

fn outcomes(world: &World, cases: &[(&[&str], &[&str])]) -> Vec<Outcome> {
    cases.iter().map(|(req, turns)| judge(world, &goal(world, req), &turns.iter().map(|t| toks(t)).collect::<Vec<_>>()).unwrap()).collect()
}

#[test]
fn inform_fixture_counts_three_of_four() {
    let world = World::standard();
    let o = outcomes(
        &world,
        &[
            (&["phone"], &["how about [restaurant_name] ?"]),
            (&["phone"], &["what area ?", "[restaurant_name] is a good choice ."]),
            (&["phone"], &["i would recommend [restaurant_name] .", "the phone is [value_phone] ."]),
            (&["phone"], &["the phone is [value_phone] ."]),
        ],
    );
    assert_eq!(inform_rate(&o), 75.0);
    // stripped of entity names, nothing requiring an entity is informed
    let stripped = outcomes(&world, &[(&["phone"], &["the phone is [value_phone] ."]), (&["address"], &["goodbye ."])]);
    assert_eq!(inform_rate(&stripped), 0.0);
}

#[test]
fn success_fixture_counts_two_of_five() {
    let world = World::standard();
    let o = outcomes(
        &world,
        &[
            (&["phone"], &["[restaurant_name] 's phone is [value_phone] ."]),
            (&["phone", "postcode"], &["[restaurant_name] .", "[value_postcode] and [value_phone] ."]),
            (&["phone", "postcode"], &["[restaurant_name] .", "[value_postcode] ."]),
            (&["address"], &["the address is [value_address] ."]),
            (&["address"], &["[restaurant_name] is nice ."]),
        ],
    );
    assert_eq!(success_rate(&o), 40.0);
    assert_eq!(inform_rate(&o), 80.0);
}

/// Exact hundredths: 200·total = (I + S) + 2·B with every input in hundredths.
fn exact_total_hundredths_x2(inform: &str, success: &str, bleu: &str) -> i64 {
    let h = |s: &str| -> i64 {
        let (a, b) = s.split_once('.').unwrap();
        a.parse::<i64>().unwrap() * 100 + b.parse::<i64>().unwrap()
    };
    h(inform) + h(success) + 2 * h(bleu)
}

fn to_f(s: &str) -> f64 {
    s.parse().unwrap()
}

/// Rows of the published MultiWOZ 2.0 comparison: inform, success, BLEU and
/// the printed total.
const ROWS_20: [[&str; 4]; 6] = [
    ["90.29", "86.59", "14.08", "102.52"],
    ["93.49", "84.98", "12.01", "101.25"],
    ["88.90", "73.40", "23.15", "104.30"],
    ["69.50", "62.00", "19.10", "84.85"],
    ["83.20", "73.50", "19.82", "98.17"],
    ["96.40", "84.70", "18.85", "109.40"],
];

#[test]
fn published_totals_follow_from_their_inputs() {
    for [i, s, b, printed] in ROWS_20 {
        let twice = exact_total_hundredths_x2(i, s, b);
        // total_score agrees with exact decimal arithmetic
        assert!((total_score(to_f(i), to_f(s), to_f(b)) - twice as f64 / 200.0).abs() < 1e-9);
        // and that value, rounded half-up to the printed precision, is the printed total
        let rounded = (twice + 1) / 2;
        assert!((rounded as f64 / 100.0 - to_f(printed)).abs() < 1e-9, "{i} {s} {b} -> {printed}");
    }
    assert_eq!(total_score(0.0, 0.0, 0.0), 0.0);
}

#[test]
fn bleu_hand_fixture() {
    // p1 = 1/4 (clipped), p2..p4 smoothed to 1/(2·{3, 2, 1}), equal lengths
    let expected = 100.0 * (0.25f64 * (1.0 / 6.0) * (1.0 / 4.0) * (1.0 / 2.0)).powf(0.25);
    let b = corpus_bleu(&[toks("the the the the")], &[toks("the cat sat down")]).unwrap();
    assert!((b - expected).abs() < 1e-9, "{b} vs {expected}");
    // brevity penalty: 3 of 4 reference tokens, everything else matching
    let b = corpus_bleu(&[toks("a b c d e f")], &[toks("a b c d e f g h")]).unwrap();
    assert!((b - 100.0 * (1.0f64 - 8.0 / 6.0).exp()).abs() < 1e-9);
}

fn corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 4..9), 1..6)
        .prop_map(|c| c.into_iter().map(|t| t.into_iter().map(String::from).collect()).collect())
}

proptest! {
    #[test]
    fn bleu_of_a_corpus_against_itself_is_100(x in corpus()) {
        prop_assert!((corpus_bleu(&x, &x).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_ignores_dialogue_order(x in corpus(), y in corpus(), seed in 0u64..1000) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, "shuffle"));
        let xs: Vec<_> = idx.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<_> = idx.iter().map(|&i| y[i].clone()).collect();
        prop_assert!((corpus_bleu(x, y).unwrap() - corpus_bleu(&xs, &ys).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn success_implies_informed(mentions in prop::collection::vec(prop::sample::select(vec![
        "[restaurant_name]", "[value_phone]", "[value_address]", "[value_postcode]", "the",
    ]), 0..6)) {
        let world = World::standard();
        let o = judge(&world, &goal(&world, &["phone", "address"]), &[mentions.iter().map(|s| s.to_string()).collect()]).unwrap();
        prop_assert!(!o.success || o.informed);
    }
}

fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::stream(seed, "blobs");
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let label = i % 2;
        let centre = if label == 0 { -10.0 } else { 10.0 };
        data.push((0..3).map(|_| centre + r.sample::<f64, _>(StandardNormal)).collect());
        labels.push(label);
    }
    (data, labels)
}

#[test]
fn kmeans_recovers_separated_blobs() {
    for seed in 0..20 {
        let (data, labels) = blobs(seed);
        let km = kmeans(&data, 2, seed, 100).unwrap();
        let same = km.assignments.iter().zip(&labels).filter(|(a, b)| a == b).count();
        assert!(same == 0 || same == labels.len(), "seed {seed}: {same}");
        assert!(km.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}

#[test]
fn kmeans_with_one_cluster_is_the_mean() {
    let (data, _) = blobs(1);
    let km = kmeans(&data, 1, 0, 10).unwrap();
    for j in 0..3 {
        let mean = data.iter().map(|x| x[j]).sum::<f64>() / data.len() as f64;
        assert!((km.centroids[0][j] - mean).abs() < 1e-12);
    }
    assert!(kmeans(&data[..3], 4, 0, 10).is_err());
}

#[test]
fn pca_on_a_plane_is_lossless_and_decorrelated() {
    let mut r = rng::stream(4, "plane");
    let (u, v) = ([1.0, 2.0, -1.0], [0.5, -1.0, 3.0]);
    let data: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let (a, b): (f64, f64) = (r.random_range(-3.0..3.0), r.random_range(-1.0..1.0));
            (0..3).map(|j| 2.0 + a * u[j] + b * v[j]).collect()
        })
        .collect();
    let p = pca_2d(&data).unwrap();
    let mut err: f64 = 0.0;
    for (x, c) in data.iter().zip(&p.coords) {
        for j in 0..3 {
            let back = p.mean[j] + c[0] * p.components[0][j] + c[1] * p.components[1][j];
            err = err.max((back - x[j]).abs());
        }
    }
    assert!(err < 1e-9, "{err}");
    let n = p.coords.len() as f64;
    let (m0, m1) = (p.coords.iter().map(|c| c[0]).sum::<f64>() / n, p.coords.iter().map(|c| c[1]).sum::<f64>() / n);
    let cov = p.coords.iter().map(|c| (c[0] - m0) * (c[1] - m1)).sum::<f64>() / (n - 1.0);
    assert!(cov.abs() < 1e-9, "{cov}");
    for comp in &p.components {
        let lead = comp.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(lead > 0.0);
    }
}

#[test]
fn pca_of_centred_planar_data_preserves_distances() {
    let mut r = rng::stream(5, "flat");
    let mut data: Vec<Vec<f64>> = (0..20).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-1.0..1.0)]).collect();
    let mean: Vec<f64> = (0..2).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / 20.0).collect();
    data.iter_mut().for_each(|x| x.iter_mut().zip(&mean).for_each(|(a, m)| *a -= m));
    let p = pca_2d(&data).unwrap();
    for i in 0..20 {
        for j in 0..20 {
            let d0 = ((data[i][0] - data[j][0]).powi(2) + (data[i][1] - data[j][1]).powi(2)).sqrt();
            let c = (&p.coords[i], &p.coords[j]);
            let d1 = ((c.0[0] - c.1[0]).powi(2) + (c.0[1] - c.1[1]).powi(2)).sqrt();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }
}

#[test]
fn cluster_scores_on_fixed_and_random_labelings() {
    let labels: Vec<usize> = (0..40).map(|i| i % 5).collect();
    assert_eq!(purity(&labels, &labels).unwrap(), 1.0);
    assert!((nmi(&labels, &labels).unwrap() - 1.0).abs() < 1e-12);
    let relabeled: Vec<usize> = labels.iter().map(|l| (l + 3) % 5).collect();
    assert!((nmi(&relabeled, &labels).unwrap() - 1.0).abs() < 1e-12);

    let mut r = rng::stream(6, "random-labels");
    let clusters: Vec<usize> = (0..1000).map(|_| r.random_range(0..8)).collect();
    let acts: Vec<usize> = (0..1000).map(|_| r.random_range(0..13)).collect();
    assert!(nmi(&clusters, &acts).unwrap() < 0.05);
    let null = permutation_nmi(&clusters, &acts, 100, 6).unwrap();
    assert_eq!(null.len(), 100);
    assert!(null.iter().all(|&x| x < 0.05));
}
