use hdno::decode::{beam, greedy, rank, Hypothesis, StepModel};
use hdno::gradcheck::{tiny_model, TINY};
use hdno::vocab::EOS_ID;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 5;

/// Next-token distribution drawn afresh for every prefix, keyed by a seed.
struct PrefixModel {
    seed: u64,
}

impl StepModel for PrefixModel {
    type State = Vec<usize>;

    fn log_probs(&mut self, prefix: &Vec<usize>) -> hdno::Result<Vec<f64>> {
        let key = prefix.iter().fold(self.seed.wrapping_mul(31) + 7, |k, &t| k.wrapping_mul(1_000_003) ^ (t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..V).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|l| l - lse).collect())
    }

    fn advance(&mut self, prefix: &Vec<usize>, token: usize) -> hdno::Result<Vec<usize>> {
        let mut p = prefix.clone();
        p.push(token);
        Ok(p)
    }
}

/// Every finished sequence shorter than `max_len` and every unterminated
/// sequence of exactly `max_len` tokens, scored directly.
fn exhaustive(model: &mut PrefixModel, max_len: usize) -> Hypothesis {
    let mut all = Vec::new();
    let mut frontier = vec![(Vec::new(), 0.0)];
    for depth in 0..=max_len {
        let mut next = Vec::new();
        for (prefix, lp) in frontier {
            if depth == max_len {
                all.push(Hypothesis { tokens: prefix, logprob: lp, finished: false });
                continue;
            }
            let dist = model.log_probs(&prefix).unwrap();
            all.push(Hypothesis { tokens: prefix.clone(), logprob: lp + dist[EOS_ID], finished: true });
            for w in (0..V).filter(|&w| w != EOS_ID) {
                let mut p = prefix.clone();
                p.push(w);
                next.push((p, lp + dist[w]));
            }
        }
        frontier = next;
    }
    all.sort_by(rank);
    all.swap_remove(0)
}

#[test]
fn unbounded_beam_finds_the_exhaustive_optimum() {
    for seed in 0..50 {
        let max_len = 1 + seed as usize % 4;
        let mut m = PrefixModel { seed };
        let best = exhaustive(&mut m, max_len);
        let found = beam(&mut m, Vec::new(), 10_000, max_len).unwrap();
        assert!((found.normalized() - best.normalized()).abs() < 1e-12, "seed {seed}: {found:?} vs {best:?}");
        assert_eq!(found.tokens, best.tokens, "seed {seed}");
    }
}

#[test]
fn beam_never_scores_below_greedy() {
    for seed in 0..50 {
        let mut m = PrefixModel { seed: 500 + seed };
        let g = greedy(&mut m, Vec::new(), 6).unwrap();
        for width in [1, 2, 5] {
            let b = beam(&mut m, Vec::new(), width, 6).unwrap();
            assert!(b.normalized() >= g.normalized() - 1e-12);
        }
        assert_eq!(beam(&mut m, Vec::new(), 1, 6).unwrap(), g);
    }
}

#[test]
fn width_one_reproduces_greedy_on_the_model() {
    for seed in 0..100 {
        let model = tiny_model(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..TINY.context_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..TINY.latent).map(|_| rng.random_range(-1.0..1.0)).collect();
        let greedy = model.decode_greedy(&c, &z, 8).unwrap();
        assert_eq!(model.decode_beam(&c, &z, 1, 8).unwrap().tokens, greedy);
    }
}
