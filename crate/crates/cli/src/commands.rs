//! One function per command. Every output lands under the run directory,
//! next to a snapshot of the configuration that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hdno::disc::{DiscConfig, FrozenDisc, MarkovScorer, NeuralDisc};
use hdno::eval::{encode_dialogues, evaluate_model, Decoding, EvalReport};
use hdno::latent::{latent_report, permutation_nmi};
use hdno::model::{HdnoModel, ModelConfig};
use hdno::sim::{db_bucket, generate_corpus, CorpusConfig, DialogueCorpus, World};
use hdno::trainer::{
    pretrain, run_hrl, turn_examples, HrlConfig, PretrainConfig, RewardConfig, ScheduleConfig, TurnExample,
};
use hdno::vocab::{Vocab, EOS_ID};
use optionverify::trace::{check_witness, Decrease, WitnessCheck};
use optionverify::{random_instance, run_update_trace, Mode, Witness};
use serde::{Deserialize, Serialize};

use crate::config::{CorpusSection, RunConfig};
use crate::error::{CliError, Result};

pub const PRETRAIN_STAGE: &str = "pretrain";
const RESERVED_DIRS: [&str; 4] = ["corpus", "eval", "latents", "verify"];

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn model(&self, stage: &str) -> PathBuf {
        self.stage(stage).join("model.bin")
    }

    pub fn disc(&self) -> PathBuf {
        self.stage(PRETRAIN_STAGE).join("disc.bin")
    }

    pub fn eval_stem(&self, stage: &str, beam: usize) -> PathBuf {
        self.root.join("eval").join(format!("{stage}-beam{beam}"))
    }

    pub fn latents(&self, stage: &str) -> PathBuf {
        self.root.join("latents").join(stage)
    }
}

fn snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn check_stage_name(stage: &str) -> Result<()> {
    let ok = !stage.is_empty()
        && stage.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        && !RESERVED_DIRS.contains(&stage);
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation(format!("`{stage}` cannot name a stage directory")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    corpus: CorpusSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub vocab: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub fn gen_corpus(cfg: &RunConfig, run: &RunDir, force: bool) -> Result<CorpusSummary> {
    let c = &cfg.corpus;
    let corpus = generate_corpus(&CorpusConfig {
        train: c.train,
        valid: c.valid,
        test: c.test,
        noise_rate: c.noise_rate,
        seed: cfg.seed,
    })?;
    let dir = run.corpus();
    corpus.write(&dir, force)?;
    write_json(&dir.join("meta.json"), &CorpusMeta { seed: cfg.seed, corpus: c.clone() })?;
    snapshot(cfg, &dir)?;
    Ok(CorpusSummary { vocab: corpus.vocab.len(), train: c.train, valid: c.valid, test: c.test })
}

/// Loads the corpus and checks it was generated for this configuration.
pub fn load_corpus(cfg: &RunConfig, run: &RunDir) -> Result<DialogueCorpus> {
    let dir = run.corpus();
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(CliError::Validation(format!("no corpus under {}; run gen-corpus first", dir.display())));
    }
    let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if meta.seed != cfg.seed || meta.corpus != cfg.corpus {
        return Err(CliError::Validation(format!(
            "corpus under {} was generated with seed {} and {:?}; regenerate with --force",
            dir.display(),
            meta.seed,
            meta.corpus
        )));
    }
    let mut corpus = DialogueCorpus::load(&dir)?;
    corpus.seed = cfg.seed;
    Ok(corpus)
}

pub fn model_config(cfg: &RunConfig, vocab: &Vocab) -> ModelConfig {
    let m = &cfg.model;
    ModelConfig {
        vocab: vocab.len(),
        embed: m.embed_size,
        enc_hidden: m.utt_cell_size,
        dec_hidden: m.dec_cell_size,
        latent: m.y_size,
        state_len: World::standard().state_len(),
        db_len: db_bucket(0).len(),
    }
}

/// The discriminator shares the word embedding and decoder widths.
pub fn disc_config(cfg: &RunConfig, vocab: &Vocab) -> DiscConfig {
    DiscConfig { vocab: vocab.len(), embed: cfg.model.embed_size, hidden: cfg.model.dec_cell_size }
}

/// Add-one unigram model of the system turns (with `<eos>`) of `train`,
/// scored per token on `held_out`.
pub fn unigram_nll_per_token(train: &[TurnExample], held_out: &[TurnExample], vocab: usize) -> f64 {
    let mut counts = vec![1.0; vocab];
    for ex in train {
        for &w in ex.sys.iter().chain(std::iter::once(&EOS_ID)) {
            counts[w] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let (mut nll, mut n) = (0.0, 0usize);
    for ex in held_out {
        for &w in ex.sys.iter().chain(std::iter::once(&EOS_ID)) {
            nll -= (counts[w] / total).ln();
            n += 1;
        }
    }
    nll / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_nll_per_token: f64,
    pub unigram_nll_per_token: f64,
}

pub fn cmd_pretrain(cfg: &RunConfig, run: &RunDir) -> Result<PretrainSummary> {
    let corpus = load_corpus(cfg, run)?;
    let m = &cfg.model;
    let train = turn_examples(&corpus.vocab, &corpus.train, m.max_utt_len, m.max_dec_len);
    let valid = turn_examples(&corpus.vocab, &corpus.valid, m.max_utt_len, m.max_dec_len);
    let mut model = HdnoModel::new(model_config(cfg, &corpus.vocab), &mut hdno::rng::stream(cfg.seed, "init"))?;
    let mut disc = if cfg.pretrain.disc {
        Some(NeuralDisc::new(disc_config(cfg, &corpus.vocab), &mut hdno::rng::stream(cfg.seed, "disc"))?)
    } else {
        None
    };
    let p = &cfg.pretrain;
    let pc = PretrainConfig {
        epochs: p.num_epoch,
        batch_size: p.batch_size,
        lr: p.lr,
        grad_clip: p.grad_clip,
        beta: p.beta,
        dropout: p.dropout,
        eta: if p.gen_guide { p.eta } else { 0.0 },
        max_dec_len: m.max_dec_len,
        seed: cfg.seed,
    };
    let t = Instant::now();
    let out = pretrain(&mut model, disc.as_mut(), &train, &valid, &pc)?;
    log::info!("pretraining took {:.1?}", t.elapsed());

    let dir = run.stage(PRETRAIN_STAGE);
    snapshot(cfg, &dir)?;
    let hash = cfg.config_hash();
    let meta = serde_json::json!({ "stage": PRETRAIN_STAGE, "best_epoch": out.best_epoch });
    model.save(&run.model(PRETRAIN_STAGE), hash, meta.clone())?;
    if let Some(d) = &disc {
        d.save(&run.disc(), hash, meta)?;
    }
    let mut w = csv::Writer::from_path(dir.join("loss_curve.csv"))?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_nll_per_token", "disc_loss"])?;
    for r in &out.curve {
        let disc_loss = if disc.is_some() { r.disc_loss } else { f64::NAN };
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_nll_per_token.to_string(),
            disc_loss.to_string(),
        ])?;
    }
    w.flush()?;
    let best = &out.curve[out.best_epoch];
    let summary = PretrainSummary {
        best_epoch: out.best_epoch,
        best_val_loss: best.val_loss,
        best_val_nll_per_token: best.val_nll_per_token,
        unigram_nll_per_token: unigram_nll_per_token(&train, &valid, corpus.vocab.len()),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn load_model(cfg: &RunConfig, run: &RunDir, stage: &str) -> Result<HdnoModel> {
    let path = run.model(stage);
    if !path.exists() {
        return Err(CliError::Validation(format!("no checkpoint at {}", path.display())));
    }
    Ok(HdnoModel::load(&path, Some(cfg.config_hash()))?.0)
}

/// The frozen pretraining discriminator, when the configuration uses one.
pub fn load_disc(cfg: &RunConfig, run: &RunDir) -> Result<Option<FrozenDisc>> {
    if !cfg.pretrain.disc {
        return Ok(None);
    }
    let path = run.disc();
    if !path.exists() {
        return Err(CliError::Validation(format!("no discriminator checkpoint at {}", path.display())));
    }
    Ok(Some(NeuralDisc::load(&path, Some(cfg.config_hash()))?.freeze()?))
}

pub fn hrl_config(cfg: &RunConfig) -> HrlConfig {
    let r = &cfg.rl;
    HrlConfig {
        reward: RewardConfig {
            alpha: r.alpha,
            gamma: r.gamma,
            gamma_nll: r.gamma_nll,
            success2reward: r.success2reward,
            disc2reward: r.disc2reward,
            nll_normalize: r.nll_normalize,
        },
        schedule: ScheduleConfig {
            high_freq: r.high_freq,
            low_freq: r.low_freq,
            synchron: r.synchron,
            high_lr: r.high_lr,
            low_lr: r.low_lr,
            grad_clip: r.grad_clip,
        },
        epochs: r.num_epoch,
        batch_size: r.batch_size,
        temperature: r.temperature,
        max_dec_len: cfg.model.max_dec_len,
        seed: cfg.seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrlSummary {
    pub best_epoch: usize,
    pub dialogues_seen: usize,
    pub high_updates: usize,
    pub low_updates: usize,
}

pub const TRACE_COLUMNS: [&str; 6] = ["epoch", "inform", "success", "bleu", "total", "mean_reward"];

/// Fine-tunes the pretrained checkpoint and writes it under `stage`.
pub fn cmd_hrl(cfg: &RunConfig, run: &RunDir, stage: &str) -> Result<HrlSummary> {
    check_stage_name(stage)?;
    if stage == PRETRAIN_STAGE {
        return Err(CliError::Validation("the HRL stage cannot overwrite the pretraining stage".into()));
    }
    let corpus = load_corpus(cfg, run)?;
    let mut model = load_model(cfg, run, PRETRAIN_STAGE)?;
    let disc = load_disc(cfg, run)?;
    let scorer = disc.as_ref().map(|d| d as &dyn MarkovScorer);
    let world = World::standard();
    let m = &cfg.model;
    let train = encode_dialogues(&model, &corpus.vocab, &corpus.train, m.max_utt_len)?;
    let valid = encode_dialogues(&model, &corpus.vocab, &corpus.valid, m.max_utt_len)?;
    let t = Instant::now();
    let out = run_hrl(&mut model, scorer, &world, &corpus.vocab, &train, &valid, &hrl_config(cfg))?;
    log::info!("HRL took {:.1?}", t.elapsed());

    let dir = run.stage(stage);
    snapshot(cfg, &dir)?;
    model.save(&run.model(stage), cfg.config_hash(), serde_json::json!({ "stage": stage, "best_epoch": out.best_epoch }))?;
    let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
    w.write_record(TRACE_COLUMNS)?;
    for r in &out.trace {
        w.write_record([
            r.epoch.to_string(),
            r.inform.to_string(),
            r.success.to_string(),
            r.bleu.to_string(),
            r.total.to_string(),
            r.mean_reward.to_string(),
        ])?;
    }
    w.flush()?;
    let summary = HrlSummary {
        best_epoch: out.best_epoch,
        dialogues_seen: out.dialogues_seen,
        high_updates: out.updates.iter().filter(|u| u.0).count(),
        low_updates: out.updates.iter().filter(|u| u.1).count(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Decodes the test split with the `stage` checkpoint (greedy at width 1)
/// and writes the full report as JSON plus a one-row metrics CSV.
pub fn cmd_evaluate(cfg: &RunConfig, run: &RunDir, stage: &str) -> Result<EvalReport> {
    check_stage_name(stage)?;
    let beam = cfg.eval.beam_width;
    let corpus = load_corpus(cfg, run)?;
    let model = load_model(cfg, run, stage)?;
    let disc = load_disc(cfg, run)?;
    let scorer = disc.as_ref().map(|d| d as &dyn MarkovScorer);
    let test = encode_dialogues(&model, &corpus.vocab, &corpus.test, cfg.model.max_utt_len)?;
    let decoding = if beam == 1 { Decoding::Greedy } else { Decoding::Beam(beam) };
    let report = evaluate_model(&model, &corpus.vocab, &World::standard(), &test, decoding, cfg.model.max_dec_len, scorer)?;

    let stem = run.eval_stem(stage, beam);
    let dir = stem.parent().expect("eval stem has a parent");
    snapshot(cfg, dir)?;
    write_json(&stem.with_extension("json"), &report)?;
    let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
    w.write_record(["stage", "beam_width", "inform", "success", "bleu", "total", "mean_disc_score"])?;
    w.write_record([
        stage.to_string(),
        beam.to_string(),
        report.inform.to_string(),
        report.success.to_string(),
        report.bleu.to_string(),
        report.total.to_string(),
        report.mean_disc_score().map_or(String::new(), |s| s.to_string()),
    ])?;
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub k: usize,
    pub turns: usize,
    pub nmi: f64,
    pub purity: f64,
    pub permutation_mean_nmi: f64,
    pub permutation_max_nmi: f64,
}

/// Clusters the policy means of every test turn and scores the clusters
/// against the oracle act labels.
pub fn cmd_latents(cfg: &RunConfig, run: &RunDir, stage: &str) -> Result<LatentSummary> {
    check_stage_name(stage)?;
    let corpus = load_corpus(cfg, run)?;
    let model = load_model(cfg, run, stage)?;
    let test = encode_dialogues(&model, &corpus.vocab, &corpus.test, cfg.model.max_utt_len)?;
    let k = cfg.eval.latent_k;
    let report = latent_report(&model, &test, k, cfg.seed)?;
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    let labels: Vec<usize> = report
        .points
        .iter()
        .map(|p| {
            let next = ids.len();
            *ids.entry(p.act_label.as_str()).or_insert(next)
        })
        .collect();
    let clusters: Vec<usize> = report.points.iter().map(|p| p.cluster).collect();
    let baseline = permutation_nmi(&clusters, &labels, cfg.eval.permutation_trials, cfg.seed)?;

    let dir = run.latents(stage);
    snapshot(cfg, &dir)?;
    let mut w = csv::Writer::from_path(dir.join("latents.csv"))?;
    w.write_record(["turn_id", "cluster", "x", "y", "act_label"])?;
    for p in &report.points {
        w.write_record([p.turn_id.to_string(), p.cluster.to_string(), p.x.to_string(), p.y.to_string(), p.act_label.clone()])?;
    }
    w.flush()?;
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join("samples.txt"))?);
    for (c, samples) in report.samples.iter().enumerate() {
        let size = clusters.iter().filter(|&&x| x == c).count();
        writeln!(out, "cluster {c} ({size} turns)")?;
        for (user, sys) in samples {
            writeln!(out, "  user: {user}\n  sys:  {sys}")?;
        }
    }
    out.flush()?;
    let summary = LatentSummary {
        k,
        turns: clusters.len(),
        nmi: report.nmi,
        purity: report.purity,
        permutation_mean_nmi: baseline.iter().sum::<f64>() / baseline.len() as f64,
        permutation_max_nmi: baseline.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCheck {
    pub seed: u64,
    /// Largest one-update drop of any state value (negative when every
    /// update raised every value).
    pub max_violation: Decrease,
    /// max_s |v_T(s) − v_{T−10}(s)|.
    pub final_change: f64,
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub seeds: Vec<SeedCheck>,
    pub witness: Witness,
    pub witness_check: WitnessCheck,
    pub witness_holds: bool,
}

impl VerifySummary {
    pub fn async_monotone(&self) -> bool {
        self.seeds.iter().all(|s| s.monotone)
    }

    pub fn passed(&self) -> bool {
        self.async_monotone() && self.witness_holds
    }
}

/// Minimum synchronous decrease for the witness to count.
pub const WITNESS_THRESHOLD: f64 = 1e-6;

/// Asynchronous exact-gradient traces on random instances, then a replay of
/// the synchronous-decrease witness.
pub fn verify_props(cfg: &RunConfig) -> Result<VerifySummary> {
    let v = &cfg.verify;
    let seeds = (0..v.instances)
        .map(|seed| {
            let inst = random_instance(seed, None);
            let (trace, _) = run_update_trace(&inst.smdp, &inst.policies, Mode::Async, v.lr, v.steps)?;
            Ok(SeedCheck {
                seed,
                max_violation: trace.max_decrease(),
                final_change: trace.final_change(10),
                monotone: trace.is_monotone(v.tol),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let witness = match &v.witness {
        Some(p) => Witness::read(Path::new(p))?,
        None => Witness::pinned()?,
    };
    let witness_check = check_witness(&witness)?;
    let witness_holds = witness_check.holds(WITNESS_THRESHOLD, v.tol);
    Ok(VerifySummary { seeds, witness, witness_check, witness_holds })
}

/// Writes the per-seed table of a verification run.
pub fn write_verify_csv(summary: &VerifySummary, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "max_violation", "violation_step", "violation_state", "final_change", "monotone"])?;
    for s in &summary.seeds {
        w.write_record([
            s.seed.to_string(),
            s.max_violation.amount.to_string(),
            s.max_violation.step.to_string(),
            s.max_violation.state.to_string(),
            s.final_change.to_string(),
            s.monotone.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
