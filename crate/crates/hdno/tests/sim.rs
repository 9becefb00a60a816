use std::collections::BTreeMap;

use hdno::eval::judge;
use hdno::rng;
use hdno::sim::{
    generate_corpus, oracle_response, validate_dialogue, CorpusConfig, DialogueCorpus, OracleInput, UserAct, World,
    SPLITS,
};
use rand::Rng;

fn config(noise_rate: f64, seed: u64) -> CorpusConfig {
    CorpusConfig { train: 200, valid: 50, test: 50, noise_rate, seed }
}

#[test]
fn fault_fraction_concentrates_at_the_noise_rate() {
    let world = World::standard();
    let mut r = rng::stream(5, "faults");
    let revealed = BTreeMap::new();
    let mut faults = 0;
    for _ in 0..10_000 {
        let schema = &world.domains[r.random_range(0..world.domains.len())];
        let act = match r.random_range(0..3) {
            0 => UserAct::Request(vec![schema.requests[r.random_range(0..schema.requests.len())].name.to_string()]),
            1 => UserAct::Inform(Vec::new()),
            _ => UserAct::Bye,
        };
        let input = OracleInput { schema, revealed: &revealed, user_act: &act, db_count: r.random_range(0..6) };
        faults += usize::from(oracle_response(&input, 0.3, &mut r).unwrap().fault);
    }
    let frac = faults as f64 / 10_000.0;
    assert!((frac - 0.3).abs() <= 0.02, "fault fraction {frac}");
}

#[test]
fn clean_oracle_rules() {
    let world = World::standard();
    let schema = world.domain("restaurant").unwrap();
    let revealed = BTreeMap::new();
    let mut r = rng::stream(1, "rules");
    let ask = UserAct::Request(vec!["phone".into()]);
    for _ in 0..20 {
        let out = oracle_response(&OracleInput { schema, revealed: &revealed, user_act: &ask, db_count: 1 }, 0.0, &mut r)
            .unwrap();
        assert!(out.tokens.iter().any(|t| t == "[value_phone]"), "{:?}", out.tokens);
        assert!(!out.fault);
        let inform = UserAct::Inform(vec!["area".into()]);
        let none = oracle_response(&OracleInput { schema, revealed: &revealed, user_act: &inform, db_count: 0 }, 0.0, &mut r)
            .unwrap();
        assert_eq!(none.act, "not found");
    }
    assert!(oracle_response(&OracleInput { schema, revealed: &revealed, user_act: &ask, db_count: 1 }, 1.0, &mut r).is_err());
}

#[test]
fn noiseless_oracle_always_succeeds() {
    let world = World::standard();
    let c = generate_corpus(&config(0.0, 9)).unwrap();
    for d in c.train.iter().chain(&c.valid).chain(&c.test) {
        let sys: Vec<Vec<String>> = d.turns.iter().map(|t| t.sys.clone()).collect();
        let o = judge(&world, &d.goal, &sys).unwrap();
        assert!(o.success, "{:?}", d.goal);
    }
}

#[test]
fn corpus_files_are_deterministic_and_round_trip() {
    let world = World::standard();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = generate_corpus(&config(0.3, 3)).unwrap();
    c.write(a.path(), false).unwrap();
    generate_corpus(&config(0.3, 3)).unwrap().write(b.path(), false).unwrap();
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert_eq!(x, y, "{f}");
    }
    let counts: Vec<usize> = SPLITS
        .iter()
        .map(|s| std::fs::read_to_string(a.path().join(format!("{s}.jsonl"))).unwrap().lines().count())
        .collect();
    assert_eq!(counts, vec![200, 50, 50]);

    let back = DialogueCorpus::load(a.path()).unwrap();
    assert_eq!((&back.train, &back.valid, &back.test, &back.vocab), (&c.train, &c.valid, &c.test, &c.vocab));
    for d in back.train.iter().chain(&back.valid).chain(&back.test) {
        validate_dialogue(&world, &back.vocab, d).unwrap();
    }
    assert!(c.write(a.path(), false).is_err());
    c.write(a.path(), true).unwrap();
}

#[test]
fn desk_vocabulary_stays_small() {
    let c = generate_corpus(&config(0.3, 42)).unwrap();
    assert!(c.vocab.len() <= 300, "{}", c.vocab.len());
}
