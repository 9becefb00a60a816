//! Synthetic delexicalized task-oriented dialogue world: schemas and entity
//! tables, goal sampling, a scripted agenda-driven user, a rule-based oracle
//! system with fault injection, and corpus generation.
//!
//! User utterances carry literal constraint values ("cheap", "north"); system
//! utterances are delexicalized (`[restaurant_name]`, `[value_phone]`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HdnoError, Result};
use crate::rng;
use crate::vocab::Vocab;

pub const MAX_TURNS: usize = 10;
pub const DB_BUCKETS: usize = 4;

#[derive(Debug, Clone)]
pub struct ConstraintSlot {
    pub name: &'static str,
    pub values: &'static [&'static str],
    /// Phrase the user says when stating the slot; `{}` is the value.
    pub user_phrase: &'static str,
    /// How the system refers to the slot when asking for it.
    pub label: &'static str,
}

#[derive(Debug, Clone)]
pub struct RequestSlot {
    pub name: &'static str,
    pub phrase: &'static str,
    pub token: &'static str,
}

#[derive(Debug, Clone)]
pub struct DomainSchema {
    pub name: &'static str,
    pub name_token: &'static str,
    pub slots: Vec<ConstraintSlot>,
    pub requests: Vec<RequestSlot>,
    /// Each entity holds one value index per constraint slot.
    pub entities: Vec<Vec<usize>>,
}

impl DomainSchema {
    pub fn slot_index(&self, slot: &str) -> Result<usize> {
        self.slots
            .iter()
            .position(|s| s.name == slot)
            .ok_or_else(|| HdnoError::Unknown { what: "slot", name: slot.to_string() })
    }

    pub fn request(&self, slot: &str) -> Result<&RequestSlot> {
        self.requests
            .iter()
            .find(|r| r.name == slot)
            .ok_or_else(|| HdnoError::Unknown { what: "request slot", name: slot.to_string() })
    }

    fn value_index(&self, slot: usize, value: &str) -> Result<usize> {
        self.slots[slot]
            .values
            .iter()
            .position(|v| *v == value)
            .ok_or_else(|| HdnoError::Unknown { what: "slot value", name: value.to_string() })
    }

    pub fn entity_value(&self, entity: usize, slot: usize) -> &'static str {
        self.slots[slot].values[self.entities[entity][slot]]
    }
}

const AREAS: &[&str] = &["centre", "north", "south", "east", "west"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];
const FOODS: &[&str] = &["italian", "chinese", "indian", "british"];
const HOTEL_AREAS: &[&str] = &["centre", "north", "south"];
const STARS: &[&str] = &["three", "four", "five"];
const STATIONS: &[&str] = &["cambridge", "london", "ely", "norwich"];
const DAYS: &[&str] = &["monday", "friday", "sunday"];

const PLACE_REQUESTS: [RequestSlot; 3] = [
    RequestSlot { name: "phone", phrase: "phone number", token: "[value_phone]" },
    RequestSlot { name: "address", phrase: "address", token: "[value_address]" },
    RequestSlot { name: "postcode", phrase: "postcode", token: "[value_postcode]" },
];

/// The fixed three-domain world. Entity tables come from a constant seed so
/// every corpus shares one database.
#[derive(Debug, Clone)]
pub struct World {
    pub domains: Vec<DomainSchema>,
}

impl World {
    pub fn standard() -> Self {
        let mut rng = rng::stream(0x5eed, "world");
        let restaurant = DomainSchema {
            name: "restaurant",
            name_token: "[restaurant_name]",
            slots: vec![
                ConstraintSlot { name: "area", values: AREAS, user_phrase: "in the {}", label: "area" },
                ConstraintSlot {
                    name: "pricerange",
                    values: PRICES,
                    user_phrase: "in the {} price range",
                    label: "price range",
                },
                ConstraintSlot { name: "food", values: FOODS, user_phrase: "serving {} food", label: "type of food" },
            ],
            requests: PLACE_REQUESTS.to_vec(),
            entities: Vec::new(),
        };
        let hotel = DomainSchema {
            name: "hotel",
            name_token: "[hotel_name]",
            slots: vec![
                ConstraintSlot { name: "area", values: HOTEL_AREAS, user_phrase: "in the {}", label: "area" },
                ConstraintSlot {
                    name: "pricerange",
                    values: PRICES,
                    user_phrase: "in the {} price range",
                    label: "price range",
                },
                ConstraintSlot { name: "stars", values: STARS, user_phrase: "with {} stars", label: "star rating" },
            ],
            requests: PLACE_REQUESTS.to_vec(),
            entities: Vec::new(),
        };
        let train = DomainSchema {
            name: "train",
            name_token: "[train_id]",
            slots: vec![
                ConstraintSlot {
                    name: "departure",
                    values: STATIONS,
                    user_phrase: "leaving from {}",
                    label: "departure station",
                },
                ConstraintSlot {
                    name: "destination",
                    values: STATIONS,
                    user_phrase: "going to {}",
                    label: "destination",
                },
                ConstraintSlot { name: "day", values: DAYS, user_phrase: "on {}", label: "day" },
            ],
            requests: vec![
                RequestSlot { name: "price", phrase: "price", token: "[value_price]" },
                RequestSlot { name: "duration", phrase: "travel time", token: "[value_duration]" },
                RequestSlot { name: "leaveat", phrase: "departure time", token: "[value_time]" },
            ],
            entities: Vec::new(),
        };
        let mut domains = vec![restaurant, hotel, train];
        for d in &mut domains {
            let n = rng.random_range(8..=12);
            while d.entities.len() < n {
                let e: Vec<usize> = d.slots.iter().map(|s| rng.random_range(0..s.values.len())).collect();
                if d.name == "train" && e[0] == e[1] {
                    continue;
                }
                d.entities.push(e);
            }
        }
        Self { domains }
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| HdnoError::Unknown { what: "domain", name: name.to_string() })
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSchema> {
        Ok(&self.domains[self.domain_index(name)?])
    }

    /// Domain one-hot followed by one one-hot block per (domain, slot).
    pub fn state_len(&self) -> usize {
        self.domains.len()
            + self
                .domains
                .iter()
                .flat_map(|d| d.slots.iter())
                .map(|s| s.values.len())
                .sum::<usize>()
    }

    pub fn state_vector(&self, domain: &str, constraints: &BTreeMap<String, String>) -> Result<Vec<f64>> {
        let di = self.domain_index(domain)?;
        let mut v = vec![0.0; self.state_len()];
        v[di] = 1.0;
        let mut offset = self.domains.len();
        for (i, d) in self.domains.iter().enumerate() {
            for (si, s) in d.slots.iter().enumerate() {
                if i == di {
                    if let Some(value) = constraints.get(s.name) {
                        v[offset + d.value_index(si, value)?] = 1.0;
                    }
                }
                offset += s.values.len();
            }
        }
        if let Some(unknown) = constraints.keys().find(|k| self.domains[di].slot_index(k).is_err()) {
            return Err(HdnoError::Unknown { what: "slot", name: unknown.clone() });
        }
        Ok(v)
    }
}

/// One-hot of the match-count bucket {0, 1, 2–3, ≥4}.
pub fn db_bucket(count: usize) -> Vec<f64> {
    let idx = match count {
        0 => 0,
        1 => 1,
        2 | 3 => 2,
        _ => 3,
    };
    let mut v = vec![0.0; DB_BUCKETS];
    v[idx] = 1.0;
    v
}

/// Exact-match filter over the entity table. Returns matching entity
/// indices and the bucket encoding of their count.
pub fn db_lookup(schema: &DomainSchema, constraints: &BTreeMap<String, String>) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut wanted = Vec::with_capacity(constraints.len());
    for (slot, value) in constraints {
        let si = schema.slot_index(slot)?;
        wanted.push((si, schema.value_index(si, value)?));
    }
    let matches: Vec<usize> = (0..schema.entities.len())
        .filter(|&e| wanted.iter().all(|&(si, vi)| schema.entities[e][si] == vi))
        .collect();
    let enc = db_bucket(matches.len());
    Ok((matches, enc))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub domain: String,
    pub constraints: BTreeMap<String, String>,
    pub requests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub user: Vec<String>,
    pub state: Vec<f64>,
    pub db: Vec<f64>,
    pub sys: Vec<String>,
    pub act: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub goal: Goal,
    pub turns: Vec<Turn>,
}

/// Samples a goal from a uniformly chosen domain: 1–2 constraints taken
/// from one entity (so the goal is always satisfiable) and 1–3 requests.
pub fn sample_goal(world: &World, rng: &mut impl Rng) -> Result<Goal> {
    let domain = world
        .domains
        .choose(rng)
        .ok_or_else(|| HdnoError::Invalid("empty schema set".into()))?;
    let entity = rng.random_range(0..domain.entities.len());
    let mut slots: Vec<usize> = (0..domain.slots.len()).collect();
    slots.shuffle(rng);
    slots.truncate(rng.random_range(1..=2));
    let constraints = slots
        .iter()
        .map(|&si| (domain.slots[si].name.to_string(), domain.entity_value(entity, si).to_string()))
        .collect();
    let mut req: Vec<usize> = (0..domain.requests.len()).collect();
    req.shuffle(rng);
    req.truncate(rng.random_range(1..=3));
    req.sort_unstable();
    let requests = req.iter().map(|&r| domain.requests[r].name.to_string()).collect();
    Ok(Goal { domain: domain.name.to_string(), constraints, requests })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UserAct {
    Inform(Vec<String>),
    DontCare,
    Request(Vec<String>),
    Bye,
}

impl UserAct {
    pub fn is_bye(&self) -> bool {
        matches!(self, UserAct::Bye)
    }
}

#[derive(Debug, Clone)]
pub struct UserTurn {
    pub tokens: Vec<String>,
    pub act: UserAct,
    pub done: bool,
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn pick<'a>(rng: &mut impl Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

/// Scripted user: states constraints, answers a system question with
/// "don't care" once everything is stated, asks for unanswered request
/// slots (re-asking ones the system missed), then says goodbye.
#[derive(Debug, Clone)]
pub struct UserSimulator<'w> {
    schema: &'w DomainSchema,
    goal: Goal,
    to_reveal: Vec<String>,
    revealed: BTreeMap<String, String>,
    answered: BTreeSet<String>,
    last_sys_act: Option<String>,
    turns: usize,
    done: bool,
}

impl<'w> UserSimulator<'w> {
    pub fn new(world: &'w World, goal: Goal, rng: &mut impl Rng) -> Result<Self> {
        let schema = world.domain(&goal.domain)?;
        for r in &goal.requests {
            schema.request(r)?;
        }
        if goal.requests.is_empty() {
            return invalid("goal has no requests");
        }
        let mut to_reveal: Vec<String> = goal.constraints.keys().cloned().collect();
        to_reveal.shuffle(rng);
        Ok(Self {
            schema,
            goal,
            to_reveal,
            revealed: BTreeMap::new(),
            answered: BTreeSet::new(),
            last_sys_act: None,
            turns: 0,
            done: false,
        })
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    pub fn revealed(&self) -> &BTreeMap<String, String> {
        &self.revealed
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn user_turn(&mut self, rng: &mut impl Rng) -> Result<UserTurn> {
        if self.done {
            return invalid("user turn requested after goodbye");
        }
        self.turns += 1;
        let unanswered: Vec<String> = self
            .goal
            .requests
            .iter()
            .filter(|r| !self.answered.contains(*r))
            .cloned()
            .collect();

        let act = if self.turns >= MAX_TURNS {
            UserAct::Bye
        } else if !self.to_reveal.is_empty() {
            let n = if self.turns == 1 { rng.random_range(1..=self.to_reveal.len()) } else { 1 };
            UserAct::Inform(self.to_reveal.drain(..n).collect())
        } else if self.last_sys_act.as_deref() == Some("request") {
            UserAct::DontCare
        } else if !unanswered.is_empty() {
            let n = rng.random_range(1..=unanswered.len().min(2));
            UserAct::Request(unanswered[..n].to_vec())
        } else {
            UserAct::Bye
        };

        let text = match &act {
            UserAct::Inform(slots) => {
                let mut phrases = Vec::new();
                for slot in slots {
                    let value = &self.goal.constraints[slot];
                    let si = self.schema.slot_index(slot)?;
                    phrases.push(self.schema.slots[si].user_phrase.replace("{}", value));
                    self.revealed.insert(slot.clone(), value.clone());
                }
                let phrases = phrases.join(" and ");
                if self.turns == 1 {
                    let noun = self.schema.name;
                    match rng.random_range(0..3) {
                        0 => format!("i am looking for a {noun} {phrases} ."),
                        1 => format!("i need a {noun} {phrases} ."),
                        _ => format!("can you help me find a {noun} {phrases} ?"),
                    }
                } else {
                    format!("{} {phrases} .", pick(rng, &["i would like it", "it should be", "i want one"]))
                }
            }
            UserAct::DontCare => pick(rng, &["i do not mind .", "it does not matter .", "no preference ."]).to_string(),
            UserAct::Request(slots) => {
                let phrases: Vec<&str> = slots
                    .iter()
                    .map(|s| self.schema.request(s).map(|r| r.phrase))
                    .collect::<Result<_>>()?;
                let list = phrases.join(" and ");
                match rng.random_range(0..3) {
                    0 => format!("what is the {list} ?"),
                    1 => format!("can i have the {list} ?"),
                    _ => format!("could you tell me the {list} please ?"),
                }
            }
            UserAct::Bye => pick(rng, &["thank you , goodbye .", "that is all i need , thanks .", "thanks , bye ."])
                .to_string(),
        };
        self.done = act.is_bye();
        Ok(UserTurn { tokens: tokens(&text), act, done: self.done })
    }

    /// Records the system's reply: request slots whose token it mentions
    /// count as answered.
    pub fn observe_system(&mut self, sys: &[String], act: &str) {
        for r in &self.goal.requests {
            if let Ok(slot) = self.schema.request(r) {
                if sys.iter().any(|t| t == slot.token) {
                    self.answered.insert(r.clone());
                }
            }
        }
        self.last_sys_act = Some(act.to_string());
    }
}

/// Everything the rule-based system sees for one turn.
#[derive(Debug, Clone)]
pub struct OracleInput<'a> {
    pub schema: &'a DomainSchema,
    pub revealed: &'a BTreeMap<String, String>,
    pub user_act: &'a UserAct,
    pub db_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub tokens: Vec<String>,
    pub act: String,
    pub fault: bool,
}

fn ideal_response(input: &OracleInput<'_>, rng: &mut impl Rng) -> Result<(String, &'static str)> {
    let schema = input.schema;
    let name = schema.name_token;
    let noun = schema.name;
    Ok(match input.user_act {
        UserAct::Bye => (
            pick(rng, &["thank you for using our service . goodbye .", "you are welcome . have a nice day ."])
                .to_string(),
            "bye",
        ),
        UserAct::Request(slots) => {
            let mut parts = Vec::new();
            let style = rng.random_range(0..2);
            for (i, s) in slots.iter().enumerate() {
                let r = schema.request(s)?;
                parts.push(match (i, style) {
                    (0, 0) => format!("the {} of {name} is {}", r.phrase, r.token),
                    (0, _) => format!("{name} 's {} is {}", r.phrase, r.token),
                    _ => format!("the {} is {}", r.phrase, r.token),
                });
            }
            let prefix = pick(rng, &["", "sure , ", "okay , "]);
            let suffix = if rng.random_bool(0.5) { " is there anything else ?" } else { "" };
            (format!("{prefix}{} .{suffix}", parts.join(" and ")), "inform")
        }
        UserAct::Inform(_) | UserAct::DontCare => match input.db_count {
            0 => (
                match rng.random_range(0..2) {
                    0 => format!("sorry , there is no {noun} matching your request ."),
                    _ => format!("i am sorry , i could not find a matching {noun} ."),
                },
                "not found",
            ),
            1 => recommend(name, rng),
            2 | 3 => (
                match rng.random_range(0..2) {
                    0 => format!("there are [value_count] options . would you prefer {name} or {name} ?"),
                    _ => format!("i have {name} and {name} . which one would you like ?"),
                },
                "select",
            ),
            _ => {
                let unstated = schema.slots.iter().find(|s| !input.revealed.contains_key(s.name));
                match (input.user_act, unstated) {
                    (UserAct::Inform(_), Some(slot)) => (
                        match rng.random_range(0..2) {
                            0 => format!("what {} would you like ?", slot.label),
                            _ => format!("do you have a preference for the {} ?", slot.label),
                        },
                        "request",
                    ),
                    _ => recommend(name, rng),
                }
            }
        },
    })
}

fn recommend(name: &str, rng: &mut impl Rng) -> (String, &'static str) {
    let text = match rng.random_range(0..3) {
        0 => format!("i would recommend {name} ."),
        1 => format!("{name} is a good choice ."),
        _ => format!("how about {name} ?"),
    };
    (text, "recommend")
}

/// Rule-based system reply. With probability `noise_rate` one fault is
/// injected: half the time one requested-slot token is dropped (when the
/// reply carries any), otherwise two distinct adjacent tokens are swapped.
pub fn oracle_response(input: &OracleInput<'_>, noise_rate: f64, rng: &mut impl Rng) -> Result<OracleOutput> {
    if !(0.0..1.0).contains(&noise_rate) {
        return invalid(format!("noise_rate must lie in [0, 1), got {noise_rate}"));
    }
    let (text, act) = ideal_response(input, rng)?;
    let mut toks = tokens(&text);
    let fault = rng.random_bool(noise_rate);
    if fault {
        let slot_tokens: Vec<usize> = toks
            .iter()
            .enumerate()
            .filter(|(_, t)| input.schema.requests.iter().any(|r| r.token == t.as_str()))
            .map(|(i, _)| i)
            .collect();
        if !slot_tokens.is_empty() && rng.random_bool(0.5) {
            let i = slot_tokens[rng.random_range(0..slot_tokens.len())];
            toks.remove(i);
        } else {
            let swappable: Vec<usize> = (0..toks.len() - 1).filter(|&i| toks[i] != toks[i + 1]).collect();
            let i = swappable[rng.random_range(0..swappable.len())];
            toks.swap(i, i + 1);
        }
    }
    Ok(OracleOutput { tokens: toks, act: act.to_string(), fault })
}

/// Plays one dialogue between the scripted user and the oracle system.
pub fn generate_dialogue(world: &World, noise_rate: f64, rng: &mut impl Rng) -> Result<Dialogue> {
    let goal = sample_goal(world, rng)?;
    let schema = world.domain(&goal.domain)?;
    let mut user = UserSimulator::new(world, goal.clone(), rng)?;
    let mut turns = Vec::new();
    while !user.is_done() {
        let ut = user.user_turn(rng)?;
        let revealed = user.revealed().clone();
        let state = world.state_vector(&goal.domain, &revealed)?;
        let (matches, db) = db_lookup(schema, &revealed)?;
        let input = OracleInput { schema, revealed: &revealed, user_act: &ut.act, db_count: matches.len() };
        let out = oracle_response(&input, noise_rate, rng)?;
        user.observe_system(&out.tokens, &out.act);
        turns.push(Turn { user: ut.tokens, state, db, sys: out.tokens, act: out.act });
    }
    Ok(Dialogue { goal, turns })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueCorpus {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub vocab: Vocab,
    pub seed: u64,
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Every token the world can emit: slot values, template words and
/// delexicalized placeholders.
fn corpus_tokens(corpus: &[&Dialogue]) -> BTreeSet<String> {
    corpus
        .iter()
        .flat_map(|d| d.turns.iter())
        .flat_map(|t| t.user.iter().chain(t.sys.iter()))
        .cloned()
        .collect()
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<DialogueCorpus> {
    if cfg.train == 0 || cfg.valid == 0 || cfg.test == 0 {
        return invalid("corpus split sizes must be positive");
    }
    let world = World::standard();
    let mut index = 0u64;
    let mut split = |n: usize| -> Result<Vec<Dialogue>> {
        (0..n)
            .map(|_| {
                let mut r = rng::substream(cfg.seed, "corpus", index);
                index += 1;
                generate_dialogue(&world, cfg.noise_rate, &mut r)
            })
            .collect()
    };
    let train = split(cfg.train)?;
    let valid = split(cfg.valid)?;
    let test = split(cfg.test)?;
    let all: Vec<&Dialogue> = train.iter().chain(&valid).chain(&test).collect();
    let vocab = Vocab::from_tokens(corpus_tokens(&all));
    Ok(DialogueCorpus { train, valid, test, vocab, seed: cfg.seed })
}

impl DialogueCorpus {
    pub fn split(&self, name: &str) -> Result<&[Dialogue]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            _ => Err(HdnoError::Unknown { what: "split", name: name.to_string() }),
        }
    }

    /// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `vocab.txt`.
    /// Existing files are only replaced when `force` is set.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files: Vec<String> = SPLITS.iter().map(|s| format!("{s}.jsonl")).collect();
        files.push("vocab.txt".into());
        if !force {
            if let Some(existing) = files.iter().find(|f| dir.join(f).exists()) {
                return invalid(format!(
                    "{} already exists; pass --force to overwrite",
                    dir.join(existing).display()
                ));
            }
        }
        for s in SPLITS {
            let mut out = std::io::BufWriter::new(fs::File::create(dir.join(format!("{s}.jsonl")))?);
            for d in self.split(s)? {
                serde_json::to_writer(&mut out, d)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        self.vocab.write(&dir.join("vocab.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |s: &str| -> Result<Vec<Dialogue>> {
            let f = fs::File::open(dir.join(format!("{s}.jsonl")))?;
            BufReader::new(f)
                .lines()
                .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
                .map(|l| Ok(serde_json::from_str(&l?)?))
                .collect()
        };
        let corpus = Self {
            train: read("train")?,
            valid: read("valid")?,
            test: read("test")?,
            vocab: Vocab::read(&dir.join("vocab.txt"))?,
            seed: 0,
        };
        Ok(corpus)
    }
}

/// Checks the structural invariants of a dialogue against the world.
pub fn validate_dialogue(world: &World, vocab: &Vocab, d: &Dialogue) -> Result<()> {
    let schema = world.domain(&d.goal.domain)?;
    if d.goal.requests.is_empty() {
        return invalid("goal without requests");
    }
    for r in &d.goal.requests {
        schema.request(r)?;
    }
    db_lookup(schema, &d.goal.constraints)?;
    if d.turns.len() < 2 {
        return invalid("dialogue shorter than two turns");
    }
    for t in &d.turns {
        if t.state.len() != world.state_len() || t.db.len() != DB_BUCKETS {
            return invalid("state or db encoding has the wrong width");
        }
        if t.db.iter().sum::<f64>() != 1.0 {
            return invalid("db encoding is not one-hot");
        }
        if !ACT_LABELS.contains(&t.act.as_str()) {
            return invalid(format!("unknown act label `{}`", t.act));
        }
        for tok in t.user.iter().chain(&t.sys) {
            if vocab.get(tok).is_none() {
                return Err(HdnoError::Unknown { what: "token", name: tok.clone() });
            }
        }
    }
    let last = &d.turns[d.turns.len() - 1];
    if last.act != "bye" {
        return invalid("final turn is not a goodbye");
    }
    Ok(())
}

pub const ACT_LABELS: [&str; 13] = [
    "inform",
    "request",
    "select",
    "recommend",
    "not found",
    "request booking info",
    "offer booking",
    "inform booked",
    "decline booking",
    "welcome",
    "greet",
    "bye",
    "reqmore",
];
