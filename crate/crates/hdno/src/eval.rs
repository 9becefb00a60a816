//! Dialogue-level inform/success, corpus BLEU-4 and the combined score, plus
//! corpus-driven evaluation of a model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::disc::MarkovScorer;
use crate::error::{invalid, Result};
use crate::model::HdnoModel;
use crate::sim::{db_lookup, Dialogue, Goal, World};
use crate::vocab::{Vocab, BOS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub informed: bool,
    pub success: bool,
}

/// Informed: the domain's entity-name token appears in some system turn,
/// or the goal's lookup is empty so no entity is required. Successful:
/// informed and every requested slot token appears in some system turn.
pub fn judge(world: &World, goal: &Goal, system_turns: &[Vec<String>]) -> Result<Outcome> {
    let schema = world.domain(&goal.domain)?;
    let mentions = |tok: &str| system_turns.iter().any(|t| t.iter().any(|w| w == tok));
    let (matches, _) = db_lookup(schema, &goal.constraints)?;
    let informed = matches.is_empty() || mentions(schema.name_token);
    let mut all_requests = true;
    for r in &goal.requests {
        all_requests &= mentions(schema.request(r)?.token);
    }
    Ok(Outcome { informed, success: informed && all_requests })
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

pub fn inform_rate(outcomes: &[Outcome]) -> f64 {
    percent(outcomes.iter().filter(|o| o.informed).count(), outcomes.len())
}

pub fn success_rate(outcomes: &[Outcome]) -> f64 {
    percent(outcomes.iter().filter(|o| o.success).count(), outcomes.len())
}

pub fn total_score(inform: f64, success: f64, bleu: f64) -> f64 {
    0.5 * (inform + success) + bleu
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 in percent: clipped n-gram precisions pooled over the
/// corpus, uniform weights, brevity penalty exp(1 − r/c) when c ≤ r. An order
/// with zero matches uses precision 1/(2·candidate n-gram count); an order
/// with no candidate n-grams at all makes the score 0.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return invalid("BLEU of an empty corpus");
    }
    if candidates.len() != references.len() {
        return invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        ));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=4 {
            let cc = ngram_counts(cand, n);
            let rc = ngram_counts(reference, n);
            totals[n - 1] += cand.len().saturating_sub(n - 1);
            matches[n - 1] += cc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if totals[n] == 0 {
            return Ok(0.0);
        }
        let p = if matches[n] == 0 {
            1.0 / (2.0 * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += 0.25 * p.ln();
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(100.0 * bp * log_sum.exp())
}

/// A test-split dialogue with its per-turn contexts computed once.
#[derive(Debug, Clone)]
pub struct EncodedDialogue {
    pub goal: Goal,
    pub contexts: Vec<Vec<f64>>,
    pub references: Vec<Vec<String>>,
    pub users: Vec<Vec<String>>,
    pub acts: Vec<String>,
}

/// Truncates to the first `max_len` tokens (the whole utterance if 0).
pub fn clip_tokens(tokens: &[String], max_len: usize) -> &[String] {
    if max_len == 0 || tokens.len() <= max_len {
        tokens
    } else {
        &tokens[..max_len]
    }
}

pub fn encode_dialogues(model: &HdnoModel, vocab: &Vocab, dialogues: &[Dialogue], max_utt_len: usize) -> Result<Vec<EncodedDialogue>> {
    dialogues
        .iter()
        .map(|d| {
            let contexts = d
                .turns
                .iter()
                .map(|t| model.context_values(&vocab.encode(clip_tokens(&t.user, max_utt_len)), &t.state, &t.db))
                .collect::<Result<_>>()?;
            Ok(EncodedDialogue {
                goal: d.goal.clone(),
                contexts,
                references: d.turns.iter().map(|t| t.sys.clone()).collect(),
                users: d.turns.iter().map(|t| t.user.clone()).collect(),
                acts: d.turns.iter().map(|t| t.act.clone()).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub goal: Goal,
    pub generated: Vec<Vec<String>>,
    pub informed: bool,
    pub success: bool,
    /// Σ ln D over the generated words (with `<eos>`), when a scorer is given.
    pub disc_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub total: f64,
    pub dialogues: Vec<DialogueRecord>,
}

impl EvalReport {
    pub fn mean_disc_score(&self) -> Option<f64> {
        let scores: Vec<f64> = self.dialogues.iter().filter_map(|d| d.disc_score).collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }

    pub fn outcomes(&self) -> Vec<Outcome> {
        self.dialogues.iter().map(|d| Outcome { informed: d.informed, success: d.success }).collect()
    }
}

/// Scores generated system turns against the references and goals.
pub fn report_from_generated(
    world: &World,
    dialogues: &[EncodedDialogue],
    generated: Vec<Vec<Vec<String>>>,
    disc_scores: Option<Vec<f64>>,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(dialogues.len());
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (i, (d, gen)) in dialogues.iter().zip(generated).enumerate() {
        let o = judge(world, &d.goal, &gen)?;
        cands.extend(gen.iter().cloned());
        refs.extend(d.references.iter().cloned());
        records.push(DialogueRecord {
            goal: d.goal.clone(),
            generated: gen,
            informed: o.informed,
            success: o.success,
            disc_score: disc_scores.as_ref().map(|s| s[i]),
        });
    }
    let outcomes: Vec<Outcome> = records.iter().map(|r| Outcome { informed: r.informed, success: r.success }).collect();
    let inform = inform_rate(&outcomes);
    let success = success_rate(&outcomes);
    let bleu = corpus_bleu(&cands, &refs)?;
    Ok(EvalReport { inform, success, bleu, total: total_score(inform, success, bleu), dialogues: records })
}

/// Decodes every turn with z = μ(c) and scores the result.
pub fn evaluate_model(
    model: &HdnoModel,
    vocab: &Vocab,
    world: &World,
    dialogues: &[EncodedDialogue],
    decoding: Decoding,
    max_len: usize,
    scorer: Option<&dyn MarkovScorer>,
) -> Result<EvalReport> {
    let mut generated = Vec::with_capacity(dialogues.len());
    let mut scores = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let mut turns = Vec::with_capacity(d.contexts.len());
        let mut score = 0.0;
        for c in &d.contexts {
            let mu = policy_mean(model, c)?;
            let ids = match decoding {
                Decoding::Greedy => model.decode_greedy(c, &mu, max_len)?,
                Decoding::Beam(w) => model.decode_beam(c, &mu, w, max_len)?.tokens,
            };
            if let Some(s) = scorer {
                let eos = (ids.len() < max_len).then_some(EOS_ID);
                score += s.sequence_score(&ids, BOS_ID, eos)?;
            }
            turns.push(vocab.decode(&ids));
        }
        generated.push(turns);
        scores.push(score);
    }
    report_from_generated(world, dialogues, generated, scorer.map(|_| scores))
}

/// μ(c) of the latent-act policy.
pub fn policy_mean(model: &HdnoModel, c: &[f64]) -> Result<Vec<f64>> {
    let mut g = diffcore::Graph::new();
    let cv = g.constant(diffcore::Tensor::vector(c.to_vec()));
    let (mu, _) = model.head.forward(&mut g, &model.store, cv)?;
    Ok(g.value(mu).to_vec())
}
