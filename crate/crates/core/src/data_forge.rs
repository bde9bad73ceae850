//! Training records: construction, confusion negatives, JSONL IO, and a
//! synthetic corpus generator.
//!
//! SFT and RL share one record shape (`instruction`, `context`, `output`);
//! RM records carry `output` as a `[positive, negative]` pair. Readers accept
//! the alternative key spelling `ouput`; writers always emit `output`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decode::{decode, DecodeConfig, DecodeError, LogitSource, Strategy};
use crate::extraction::{Event, Extraction, NerObject, ParseError, Relation};
use crate::grammar::{keys, Schema, Task};
use crate::losses::{Example, RmExample};
use crate::metrics::PredictionSet;
use crate::rng::{mix64, stream, Stream};
use crate::vocab::{Vocab, VocabError, STRUCTURAL_CHARS};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("no confusion applies to this record")]
    NoConfusion,
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// An SFT / RL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub instruction: String,
    pub context: String,
    #[serde(alias = "ouput")]
    pub output: String,
}

/// A ranking record; `outputs[0]` is preferred over `outputs[1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmRecord {
    pub instruction: String,
    pub context: String,
    #[serde(rename = "output", alias = "ouput")]
    pub outputs: [String; 2],
}

impl RmRecord {
    pub fn positive(&self) -> &str {
        &self.outputs[0]
    }

    pub fn negative(&self) -> &str {
        &self.outputs[1]
    }
}

/// Line-level checks run by [`read_jsonl`].
pub trait JsonlRecord: Serialize + DeserializeOwned {
    fn check(&self) -> Result<(), String>;
}

fn check_fields(instruction: &str, context: &str) -> Result<(), String> {
    if instruction.trim().is_empty() {
        return Err("empty instruction".into());
    }
    if context.trim().is_empty() {
        return Err("empty context".into());
    }
    Ok(())
}

impl JsonlRecord for SftRecord {
    fn check(&self) -> Result<(), String> {
        check_fields(&self.instruction, &self.context)?;
        infer_task(&self.output).map(|_| ())
    }
}

impl JsonlRecord for RmRecord {
    /// Only the positive must be well-formed; a negative may be any
    /// non-empty string, including malformed model output.
    fn check(&self) -> Result<(), String> {
        check_fields(&self.instruction, &self.context)?;
        if self.outputs[0] == self.outputs[1] {
            return Err("positive and negative outputs are identical".into());
        }
        if self.outputs[1].is_empty() {
            return Err("empty negative output".into());
        }
        infer_task(&self.outputs[0]).map(|_| ())
    }
}

/// Task implied by an output's JSON shape; `None` for `[]`.
pub fn infer_task(output: &str) -> Result<Option<Task>, String> {
    let v: serde_json::Value = serde_json::from_str(output).map_err(|e| format!("output is not JSON: {e}"))?;
    let items = v.as_array().ok_or("output must be a JSON array")?;
    let Some(first) = items.first() else { return Ok(None) };
    let obj = first.as_object().ok_or("output items must be objects")?;
    let task = if obj.contains_key(keys::RELATION) {
        Task::Re
    } else if obj.contains_key(keys::EVENT_TYPE) {
        Task::Ee
    } else if obj.values().all(|x| x.is_array()) {
        Task::Ner
    } else {
        return Err("unknown task shape".into());
    };
    Ok(Some(task))
}

/// Parses JSONL text; errors carry 1-based line numbers. Blank lines are skipped.
pub fn parse_jsonl<R: JsonlRecord>(text: &str) -> Result<Vec<R>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: R = serde_json::from_str(line).map_err(|e| DataError::Line { line: i + 1, message: e.to_string() })?;
        rec.check().map_err(|message| DataError::Line { line: i + 1, message })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<R: Serialize>(records: &[R]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn read_jsonl<R: JsonlRecord>(path: &Path) -> Result<Vec<R>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_jsonl(&text)
}

pub fn write_jsonl<R: Serialize>(records: &[R], path: &Path) -> Result<(), DataError> {
    std::fs::write(path, to_jsonl(records)).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

const TEMPLATE_HEAD: &str = "Please identify the ";
const TEMPLATE_TAIL: &str = " in the given sentence";

fn template_noun(task: Task) -> &'static str {
    match task {
        Task::Ner => "entities",
        Task::Re => "relation triples",
        Task::Ee => "events",
    }
}

/// The fixed instruction for `label` under the schema's task.
pub fn render_instruction(schema: &Schema, label: &str) -> String {
    format!("{TEMPLATE_HEAD}{} of type {label}{TEMPLATE_TAIL}", template_noun(schema.task))
}

/// Inverse of [`render_instruction`].
pub fn parse_instruction(text: &str) -> Option<(Task, String)> {
    let body = text.strip_prefix(TEMPLATE_HEAD)?.strip_suffix(TEMPLATE_TAIL)?;
    [Task::Ner, Task::Re, Task::Ee].into_iter().find_map(|task| {
        let label = body.strip_prefix(template_noun(task))?.strip_prefix(" of type ")?;
        (!label.is_empty()).then(|| (task, label.to_string()))
    })
}

/// Whitespace-separated words of the context, deduplicated, in first-seen order.
fn context_words(context: &str) -> Vec<&str> {
    let mut seen = BTreeSet::new();
    context.split_whitespace().filter(|w| seen.insert(*w)).collect()
}

/// Where a confusion can be applied.
#[derive(Debug, Clone, Copy)]
enum Site {
    /// NER object index and entry index; RE/EE item index (entry unused).
    Label(usize, usize),
    /// NER (object, entry, span); RE (item, 0=subject 1=object, _);
    /// EE (item, 0=trigger or 1+k=argument k, _).
    Span(usize, usize, usize),
}

fn label_alternatives(x: &Extraction, schema: &Schema, site: Site) -> Vec<String> {
    let Site::Label(i, _) = site else { return Vec::new() };
    match x {
        Extraction::Ner(objs) => {
            let used: BTreeSet<&str> = objs[i].0.iter().map(|(l, _)| l.as_str()).collect();
            schema.labels.iter().filter(|l| !used.contains(l.as_str())).cloned().collect()
        }
        Extraction::Re(rels) => schema.labels.iter().filter(|l| **l != rels[i].relation).cloned().collect(),
        Extraction::Ee(evs) => {
            let ev = &evs[i];
            schema
                .labels
                .iter()
                .filter(|l| **l != ev.event_type)
                .filter(|l| {
                    let roles = schema.roles_of(l);
                    ev.arguments.iter().all(|(r, _)| roles.contains(r))
                })
                .cloned()
                .collect()
        }
    }
}

fn span_at(x: &Extraction, site: Site) -> &str {
    let Site::Span(i, j, k) = site else { unreachable!("span site expected") };
    match x {
        Extraction::Ner(objs) => &objs[i].0[j].1[k],
        Extraction::Re(rels) => {
            if j == 0 {
                &rels[i].subject
            } else {
                &rels[i].object
            }
        }
        Extraction::Ee(evs) => {
            if j == 0 {
                &evs[i].trigger
            } else {
                &evs[i].arguments[j - 1].1
            }
        }
    }
}

fn sites(x: &Extraction) -> (Vec<Site>, Vec<Site>) {
    let (mut labels, mut spans) = (Vec::new(), Vec::new());
    match x {
        Extraction::Ner(objs) => {
            for (i, o) in objs.iter().enumerate() {
                for (j, (_, list)) in o.0.iter().enumerate() {
                    labels.push(Site::Label(i, j));
                    spans.extend((0..list.len()).map(|k| Site::Span(i, j, k)));
                }
            }
        }
        Extraction::Re(rels) => {
            for i in 0..rels.len() {
                labels.push(Site::Label(i, 0));
                spans.push(Site::Span(i, 0, 0));
                spans.push(Site::Span(i, 1, 0));
            }
        }
        Extraction::Ee(evs) => {
            for (i, ev) in evs.iter().enumerate() {
                labels.push(Site::Label(i, 0));
                spans.extend((0..=ev.arguments.len()).map(|j| Site::Span(i, j, 0)));
            }
        }
    }
    (labels, spans)
}

fn apply(x: &mut Extraction, site: Site, value: String) {
    match (x, site) {
        (Extraction::Ner(objs), Site::Label(i, j)) => objs[i].0[j].0 = value,
        (Extraction::Re(rels), Site::Label(i, _)) => rels[i].relation = value,
        (Extraction::Ee(evs), Site::Label(i, _)) => evs[i].event_type = value,
        (Extraction::Ner(objs), Site::Span(i, j, k)) => objs[i].0[j].1[k] = value,
        (Extraction::Re(rels), Site::Span(i, j, _)) => {
            if j == 0 {
                rels[i].subject = value
            } else {
                rels[i].object = value
            }
        }
        (Extraction::Ee(evs), Site::Span(i, j, _)) => {
            if j == 0 {
                evs[i].trigger = value
            } else {
                evs[i].arguments[j - 1].1 = value
            }
        }
    }
}

/// Builds a wrong-but-well-formed output by one confusion: a label swapped
/// for another schema label, or a span replaced by a different context word.
/// The confusion kind is chosen uniformly among the kinds that apply.
pub fn make_negative(record: &SftRecord, schema: &Schema, rng: &mut ChaCha8Rng) -> Result<RmRecord, DataError> {
    let gold = Extraction::parse(&record.output, schema)?;
    let (label_sites, span_sites) = sites(&gold);
    let label_opts: Vec<(Site, Vec<String>)> = label_sites
        .into_iter()
        .map(|s| (s, label_alternatives(&gold, schema, s)))
        .filter(|(_, alts)| !alts.is_empty())
        .collect();
    let words = context_words(&record.context);
    let span_opts: Vec<(Site, Vec<String>)> = span_sites
        .into_iter()
        .map(|s| {
            let cur = span_at(&gold, s);
            (s, words.iter().filter(|w| **w != cur).map(|w| w.to_string()).collect::<Vec<_>>())
        })
        .filter(|(_, alts)| !alts.is_empty())
        .collect();
    let pool = match (label_opts.is_empty(), span_opts.is_empty()) {
        (true, true) => return Err(DataError::NoConfusion),
        (false, true) => &label_opts,
        (true, false) => &span_opts,
        (false, false) => {
            if rng.gen_bool(0.5) {
                &label_opts
            } else {
                &span_opts
            }
        }
    };
    let (site, alts) = pool.choose(rng).expect("pool is non-empty");
    let value = alts.choose(rng).expect("alternatives are non-empty").clone();
    let mut neg = gold.clone();
    apply(&mut neg, *site, value);
    let (positive, negative) = (gold.render(), neg.render());
    debug_assert_ne!(positive, negative);
    Ok(RmRecord {
        instruction: record.instruction.clone(),
        context: record.context.clone(),
        outputs: [positive, negative],
    })
}

/// Model-generated hard negatives: sampled decodes that do not match the
/// gold output. With `constraints` off the negatives may be malformed.
pub fn model_negatives(
    src: &dyn LogitSource,
    vocab: &Vocab,
    schema: &Schema,
    records: &[SftRecord],
    seed: u64,
    temperature: f64,
    constraints: bool,
) -> Result<Vec<RmRecord>, DataError> {
    let mut rng = stream(seed, Stream::Negatives);
    let mut out = Vec::new();
    for rec in records {
        let ex = encode_record(vocab, rec)?;
        let cfg = DecodeConfig {
            strategy: Strategy::Sample { temperature, seed: rng.gen() },
            max_len: 2 * ex.target.len().max(16),
            constraints,
        };
        let tokens = match decode(src, vocab, schema, &ex.prompt, &ex.context, &cfg) {
            Ok(o) => o.tokens,
            Err(DecodeError::Truncated { partial, .. }) => partial,
            Err(e) => return Err(e.into()),
        };
        if tokens.iter().any(|&t| vocab.is_special(t)) {
            continue;
        }
        let text = vocab.decode(&tokens)?;
        let gold = Extraction::parse(&rec.output, schema)?;
        let same = Extraction::parse(&text, schema).is_ok_and(|pred| {
            PredictionSet::from_extraction(&pred).same_multiset(&PredictionSet::from_extraction(&gold))
        });
        if !same && !text.is_empty() {
            out.push(RmRecord {
                instruction: rec.instruction.clone(),
                context: rec.context.clone(),
                outputs: [gold.render(), text],
            });
        }
    }
    Ok(out)
}

/// Unconstrained hard negatives from several checkpoints at several
/// temperatures, `draws` passes each. Each pass gets its own seed derived
/// from `seed` and its position, so the result depends only on the inputs.
pub fn hard_negatives(
    sources: &[&dyn LogitSource],
    vocab: &Vocab,
    schema: &Schema,
    records: &[SftRecord],
    temperatures: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<RmRecord>, DataError> {
    let mut out = Vec::new();
    let mut pass = 0u64;
    for src in sources {
        for &t in temperatures {
            for _ in 0..draws {
                pass += 1;
                out.extend(model_negatives(*src, vocab, schema, records, sub_seed(seed, pass), t, false)?);
            }
        }
    }
    Ok(out)
}

/// Tokenises a record for training. The prompt is instruction, space, context.
pub fn encode_record(vocab: &Vocab, rec: &SftRecord) -> Result<Example, DataError> {
    let prompt = vocab.encode(&format!("{} {}", rec.instruction, rec.context))?;
    let context = vocab.encode(&rec.context)?;
    let mut target = vocab.encode(&rec.output)?;
    target.push(vocab.eos());
    Ok(Example { prompt, context, target, output: rec.output.clone() })
}

pub fn encode_pair(vocab: &Vocab, rec: &RmRecord) -> Result<RmExample, DataError> {
    Ok(RmExample {
        prompt: vocab.encode(&format!("{} {}", rec.instruction, rec.context))?,
        positive: vocab.encode(rec.positive())?,
        negative: vocab.encode(rec.negative())?,
    })
}

/// Knobs for [`gen_synthetic_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// 0 gives uniform labels; towards 1 the last label becomes rare.
    pub skew: f64,
    pub min_filler: usize,
    pub max_filler: usize,
    /// Upper bound on planted mentions of the requested label (NER).
    pub max_mentions: usize,
    /// Upper bound on mentions of other labels.
    pub distractors: usize,
    /// Probability that the requested label has no mention.
    pub empty_rate: f64,
    /// Pseudo-words per label.
    pub lexicon_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            skew: 0.0,
            min_filler: 3,
            max_filler: 7,
            max_mentions: 2,
            distractors: 2,
            empty_rate: 0.1,
            lexicon_size: 6,
        }
    }
}

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "bu", "de", "fi"];

pub const FILLER_WORDS: [&str; 16] = [
    "the", "team", "met", "near", "with", "and", "visited", "from", "today", "said", "at", "later", "over", "by",
    "news", "report",
];

/// Label-specific pseudo-words used as planted spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    words: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new(schema: &Schema, size: usize) -> Self {
        let n = SYLLABLES.len().pow(3);
        assert!(schema.labels.len() * size <= n, "lexicon too large");
        let words = (0..schema.labels.len())
            .map(|li| {
                (0..size)
                    .map(|j| {
                        // 1001 is coprime with 12^3, so this is a permutation
                        let mut k = ((li * size + j) * 1001 + 37) % n;
                        let mut w = String::new();
                        for _ in 0..3 {
                            w.push_str(SYLLABLES[k % 12]);
                            k /= 12;
                        }
                        let mut c = w.chars();
                        let first = c.next().expect("non-empty").to_ascii_uppercase();
                        std::iter::once(first).chain(c).collect()
                    })
                    .collect()
            })
            .collect();
        Self { words }
    }

    pub fn words(&self, label_index: usize) -> &[String] {
        &self.words[label_index]
    }

    pub fn all_words(&self) -> impl Iterator<Item = &String> {
        self.words.iter().flatten()
    }
}

/// Vocabulary covering every string the generator can emit, with whole
/// words, labels, and instruction words as single tokens.
pub fn synthetic_vocab(schema: &Schema, cfg: &SynthConfig) -> Result<Vocab, VocabError> {
    let lex = Lexicon::new(schema, cfg.lexicon_size);
    let mut extras: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut add = |w: &str, extras: &mut Vec<String>| {
        if w.chars().count() > 1 && seen.insert(w.to_string()) {
            extras.push(w.to_string());
        }
    };
    let template = render_instruction(schema, "");
    for w in template.split_whitespace() {
        add(w, &mut extras);
    }
    for l in &schema.labels {
        add(l, &mut extras);
    }
    for roles in schema.roles.values() {
        for r in roles {
            add(r, &mut extras);
        }
    }
    for w in FILLER_WORDS {
        add(w, &mut extras);
    }
    for w in lex.all_words() {
        add(w, &mut extras);
    }
    let mut alphabet: BTreeSet<char> = extras.iter().flat_map(|w| w.chars()).collect();
    alphabet.insert(' ');
    alphabet.extend(keys::ALL.iter().flat_map(|k| k.chars()));
    alphabet.retain(|c| !STRUCTURAL_CHARS.contains(c));
    Vocab::build(&alphabet, &extras)
}

/// Vocabulary for an arbitrary record set: every character seen, plus each
/// multi-character word, label, role and instruction word as one token.
/// Words containing JSON punctuation stay character-level.
pub fn corpus_vocab(schema: &Schema, records: &[SftRecord]) -> Result<Vocab, VocabError> {
    let mut extras: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut alphabet: BTreeSet<char> = keys::ALL.iter().flat_map(|k| k.chars()).collect();
    alphabet.insert(' ');
    let names = schema.labels.iter().chain(schema.roles.values().flatten());
    let words = records.iter().flat_map(|r| {
        r.instruction.split_whitespace().chain(r.context.split_whitespace())
    });
    for w in names.map(String::as_str).chain(words) {
        alphabet.extend(w.chars());
        if w.chars().count() > 1 && !w.contains(STRUCTURAL_CHARS) && seen.insert(w) {
            extras.push(w.to_string());
        }
    }
    for r in records {
        alphabet.extend(r.instruction.chars().chain(r.context.chars()).chain(r.output.chars()));
    }
    alphabet.retain(|c| !STRUCTURAL_CHARS.contains(c));
    Vocab::build(&alphabet, &extras)
}

/// Relative label weights `(1 - skew)^(2i / (L - 1))`.
pub fn label_weights(n_labels: usize, skew: f64) -> Vec<f64> {
    if n_labels <= 1 {
        return vec![1.0; n_labels];
    }
    let base = (1.0 - skew.clamp(0.0, 1.0)).max(1e-12);
    (0..n_labels).map(|i| base.powf(2.0 * i as f64 / (n_labels - 1) as f64)).collect()
}

fn pick_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Inserts `planted` words at random positions among filler words; returns
/// the sentence and the planted words in sentence order.
fn build_sentence(planted: Vec<String>, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    let n_fill = rng.gen_range(cfg.min_filler..=cfg.max_filler.max(cfg.min_filler));
    let mut words: Vec<(bool, String)> =
        (0..n_fill).map(|_| (false, FILLER_WORDS.choose(rng).expect("non-empty").to_string())).collect();
    for p in planted {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, (true, p));
    }
    let order = words.iter().filter(|(p, _)| *p).map(|(_, w)| w.clone()).collect();
    (words.into_iter().map(|(_, w)| w).collect::<Vec<_>>().join(" "), order)
}

fn distractor_words(
    lex: &Lexicon,
    weights: &[f64],
    requested: usize,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    if weights.len() < 2 || cfg.distractors == 0 {
        return Vec::new();
    }
    let mut others = weights.to_vec();
    others[requested] = 0.0;
    let n = rng.gen_range(0..=cfg.distractors);
    (0..n)
        .map(|_| {
            let li = pick_weighted(&others, rng);
            lex.words(li).choose(rng).expect("non-empty").clone()
        })
        .collect()
}

/// `n` records with default generator settings.
pub fn gen_synthetic(schema: &Schema, n: usize, seed: u64) -> Vec<SftRecord> {
    gen_synthetic_with(schema, n, seed, &SynthConfig::default())
}

/// Records with planted mentions; every output is valid by construction.
pub fn gen_synthetic_with(schema: &Schema, n: usize, seed: u64, cfg: &SynthConfig) -> Vec<SftRecord> {
    let lex = Lexicon::new(schema, cfg.lexicon_size);
    let weights = label_weights(schema.labels.len(), cfg.skew);
    let mut rng = stream(seed, Stream::Data);
    (0..n)
        .map(|_| {
            let li = pick_weighted(&weights, &mut rng);
            let label = schema.labels[li].clone();
            let empty = rng.gen_bool(cfg.empty_rate.clamp(0.0, 1.0));
            let mut own: Vec<String> = lex.words(li).to_vec();
            own.shuffle(&mut rng);
            let distract = distractor_words(&lex, &weights, li, cfg, &mut rng);
            let (context, output) = match schema.task {
                Task::Ner => {
                    let m = if empty { 0 } else { rng.gen_range(1..=cfg.max_mentions.max(1)) };
                    own.truncate(m);
                    let own_set: BTreeSet<String> = own.iter().cloned().collect();
                    let (ctx, order) = build_sentence(own.into_iter().chain(distract).collect(), cfg, &mut rng);
                    let spans: Vec<String> = order.into_iter().filter(|w| own_set.contains(w)).collect();
                    let x = if spans.is_empty() {
                        Extraction::Ner(Vec::new())
                    } else {
                        Extraction::Ner(vec![NerObject(vec![(label.clone(), spans)])])
                    };
                    (ctx, x)
                }
                Task::Re => {
                    let pair: Vec<String> = if empty { Vec::new() } else { own[..2.min(own.len())].to_vec() };
                    let (ctx, order) = build_sentence(pair.iter().cloned().chain(distract).collect(), cfg, &mut rng);
                    let x = if pair.len() == 2 {
                        let in_order: Vec<&String> = order.iter().filter(|w| pair.contains(w)).collect();
                        Extraction::Re(vec![Relation {
                            relation: label.clone(),
                            subject: in_order[0].clone(),
                            object: in_order[1].clone(),
                        }])
                    } else {
                        Extraction::Re(Vec::new())
                    };
                    (ctx, x)
                }
                Task::Ee => {
                    let roles = schema.roles_of(&label).to_vec();
                    let mut planted = Vec::new();
                    let mut event = None;
                    if !empty {
                        let trigger = own[0].clone();
                        let mut args = Vec::new();
                        let mut pool = own[1..].iter();
                        for role in roles {
                            if rng.gen_bool(0.7) {
                                if let Some(w) = pool.next() {
                                    args.push((role, w.clone()));
                                }
                            }
                        }
                        planted.push(trigger.clone());
                        planted.extend(args.iter().map(|(_, w)| w.clone()));
                        event = Some(Event { event_type: label.clone(), trigger, arguments: args });
                    }
                    let (ctx, _) = build_sentence(planted.into_iter().chain(distract).collect(), cfg, &mut rng);
                    (ctx, Extraction::Ee(event.into_iter().collect()))
                }
            };
            SftRecord { instruction: render_instruction(schema, &label), context, output: output.render() }
        })
        .collect()
}

/// Confusion negatives for every record that admits one.
pub fn build_rm_records(schema: &Schema, records: &[SftRecord], seed: u64) -> Result<Vec<RmRecord>, DataError> {
    let mut rng = stream(seed, Stream::Negatives);
    let mut out = Vec::new();
    for r in records {
        match make_negative(r, schema, &mut rng) {
            Ok(rm) => out.push(rm),
            Err(DataError::NoConfusion) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Sft,
    Rm,
    Rl,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Sft, Stage::Rm, Stage::Rl];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Rm => "rm",
            Stage::Rl => "rl",
        }
    }
}

/// Seeded shuffle followed by a `train_frac` / `dev_frac` / rest partition.
pub fn split_records<T: Clone>(records: &[T], train_frac: f64, dev_frac: f64, seed: u64) -> BTreeMap<Split, Vec<T>> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut stream(seed, Stream::Split));
    let n = records.len() as f64;
    let n_train = (n * train_frac).round() as usize;
    let n_dev = ((n * dev_frac).round() as usize).min(records.len() - n_train.min(records.len()));
    let n_train = n_train.min(records.len());
    let take = |r: std::ops::Range<usize>| r.map(|i| records[idx[i]].clone()).collect::<Vec<_>>();
    BTreeMap::from([
        (Split::Train, take(0..n_train)),
        (Split::Dev, take(n_train..n_train + n_dev)),
        (Split::Test, take(n_train + n_dev..records.len())),
    ])
}

/// Record counts per split, dataset and stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: BTreeMap<Split, BTreeMap<String, BTreeMap<Stage, usize>>>,
}

impl CorpusStats {
    pub fn add(&mut self, split: Split, dataset: &str, stage: Stage, n: usize) {
        *self.counts.entry(split).or_default().entry(dataset.to_string()).or_default().entry(stage).or_default() += n;
    }

    pub fn get(&self, split: Split, dataset: &str, stage: Stage) -> usize {
        self.counts.get(&split).and_then(|d| d.get(dataset)).and_then(|s| s.get(&stage)).copied().unwrap_or(0)
    }

    /// Sum over datasets for one split and stage.
    pub fn split_total(&self, split: Split, stage: Stage) -> usize {
        self.counts.get(&split).map_or(0, |d| d.values().map(|s| s.get(&stage).copied().unwrap_or(0)).sum())
    }

    pub fn total(&self, stage: Stage) -> usize {
        Split::ALL.iter().map(|s| self.split_total(*s, stage)).sum()
    }

    /// Plain-text table: one block per split, a row per dataset plus a sum row.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:<12} {:>8} {:>8} {:>8}", "split", "dataset", "SFT", "RM", "RL");
        for split in Split::ALL {
            if let Some(ds) = self.counts.get(&split) {
                for (name, stages) in ds {
                    let g = |st| stages.get(&st).copied().unwrap_or(0);
                    let _ = writeln!(
                        s,
                        "{:<6} {:<12} {:>8} {:>8} {:>8}",
                        split.name(),
                        name,
                        g(Stage::Sft),
                        g(Stage::Rm),
                        g(Stage::Rl)
                    );
                }
            }
            let t = |st| self.split_total(split, st);
            let _ = writeln!(
                s,
                "{:<6} {:<12} {:>8} {:>8} {:>8}",
                split.name(),
                "Sum",
                t(Stage::Sft),
                t(Stage::Rm),
                t(Stage::Rl)
            );
        }
        s
    }
}

/// Builds stats from `(split, dataset, stage, count)` entries.
pub fn corpus_stats<'a>(entries: impl IntoIterator<Item = (Split, &'a str, Stage, usize)>) -> CorpusStats {
    let mut st = CorpusStats::default();
    for (split, ds, stage, n) in entries {
        st.add(split, ds, stage, n);
    }
    st
}

/// Seed for a derived sub-task so independent steps never share a stream.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    mix64(seed ^ mix64(salt))
}
