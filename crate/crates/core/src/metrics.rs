//! Span-level micro P/R/F1 for NER, RE and EE, and ROUGE-1.
//!
//! Matching is exact equality on the scored tuple, with multiset semantics:
//! true positives are the size of the multiset intersection of gold and
//! predicted tuples.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::extraction::{Event, Extraction, ParseError, Relation};
use crate::grammar::Schema;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub label: String,
    pub text: String,
}

pub type RelationTriple = Relation;
pub type EventPrediction = Event;

/// Flattened prediction multiset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredictionSet {
    Entities(Vec<EntityMention>),
    Relations(Vec<RelationTriple>),
    Events(Vec<EventPrediction>),
}

impl PredictionSet {
    pub fn from_extraction(x: &Extraction) -> Self {
        match x {
            Extraction::Ner(objects) => PredictionSet::Entities(
                objects
                    .iter()
                    .flat_map(|o| {
                        o.0.iter().flat_map(|(label, spans)| {
                            spans.iter().map(|s| EntityMention { label: label.clone(), text: s.clone() })
                        })
                    })
                    .collect(),
            ),
            Extraction::Re(r) => PredictionSet::Relations(r.clone()),
            Extraction::Ee(e) => PredictionSet::Events(e.clone()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PredictionSet::Entities(v) => v.len(),
            PredictionSet::Relations(v) => v.len(),
            PredictionSet::Events(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same multiset, ignoring order.
    pub fn same_multiset(&self, other: &Self) -> bool {
        fn sorted<T: Ord + Clone>(v: &[T]) -> Vec<T> {
            let mut v = v.to_vec();
            v.sort();
            v
        }
        match (self, other) {
            (PredictionSet::Entities(a), PredictionSet::Entities(b)) => sorted(a) == sorted(b),
            (PredictionSet::Relations(a), PredictionSet::Relations(b)) => sorted(a) == sorted(b),
            (PredictionSet::Events(a), PredictionSet::Events(b)) => sorted(a) == sorted(b),
            _ => false,
        }
    }
}

pub fn parse_prediction(json_text: &str, schema: &Schema) -> Result<PredictionSet, ParseError> {
    Extraction::parse(json_text, schema).map(|x| PredictionSet::from_extraction(&x))
}

/// Pooled match counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

impl Counts {
    pub fn report(self) -> PrfReport {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrfReport { precision, recall, f1, tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrfReport {
    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }
}

/// Serialized as `{task, precision, recall, f1, tp, fp, fn}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    #[serde(flatten)]
    pub report: PrfReport,
}

/// Multiset-intersection counts of two tuple collections.
pub fn match_counts<T: Ord>(gold: &[T], pred: &[T]) -> Counts {
    let mut bag: BTreeMap<&T, isize> = BTreeMap::new();
    for g in gold {
        *bag.entry(g).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(n) = bag.get_mut(p) {
            if *n > 0 {
                *n -= 1;
                tp += 1;
            }
        }
    }
    Counts { tp, fp: pred.len() - tp, fn_: gold.len() - tp }
}

pub fn ner_f1(gold: &[EntityMention], pred: &[EntityMention]) -> PrfReport {
    match_counts(gold, pred).report()
}

pub fn re_f1(gold: &[RelationTriple], pred: &[RelationTriple]) -> PrfReport {
    match_counts(gold, pred).report()
}

pub fn trigger_tuples(events: &[EventPrediction]) -> Vec<(&str, &str)> {
    events.iter().map(|e| (e.event_type.as_str(), e.trigger.as_str())).collect()
}

/// `(event type, role, span)` per argument; the trigger span is not part of
/// the key.
pub fn argument_tuples<'a>(events: &'a [EventPrediction]) -> Vec<(&'a str, &'a str, &'a str)> {
    events
        .iter()
        .flat_map(|e| e.arguments.iter().map(move |(r, s)| (e.event_type.as_str(), r.as_str(), s.as_str())))
        .collect()
}

pub fn ee_trigger_f1(gold: &[EventPrediction], pred: &[EventPrediction]) -> PrfReport {
    match_counts(&trigger_tuples(gold), &trigger_tuples(pred)).report()
}

pub fn ee_argument_f1(gold: &[EventPrediction], pred: &[EventPrediction]) -> PrfReport {
    match_counts(&argument_tuples(gold), &argument_tuples(pred)).report()
}

/// Per-metric counts for one (gold, prediction) pair. Names are `NER`, `RE`,
/// `EE-trigger` and `EE-argument`.
pub fn score_pair(gold: &PredictionSet, pred: &PredictionSet) -> Vec<(&'static str, Counts)> {
    match (gold, pred) {
        (PredictionSet::Entities(g), PredictionSet::Entities(p)) => vec![("NER", match_counts(g, p))],
        (PredictionSet::Relations(g), PredictionSet::Relations(p)) => vec![("RE", match_counts(g, p))],
        (PredictionSet::Events(g), PredictionSet::Events(p)) => vec![
            ("EE-trigger", match_counts(&trigger_tuples(g), &trigger_tuples(p))),
            ("EE-argument", match_counts(&argument_tuples(g), &argument_tuples(p))),
        ],
        _ => panic!("gold and prediction sets belong to different tasks"),
    }
}

/// Micro-averaged reports over a corpus of (gold, prediction) pairs, one
/// per metric name in first-seen order.
pub fn corpus_reports<'a>(pairs: impl IntoIterator<Item = (&'a PredictionSet, &'a PredictionSet)>) -> Vec<TaskReport> {
    let mut totals: Vec<(&'static str, Counts)> = Vec::new();
    for (gold, pred) in pairs {
        for (name, c) in score_pair(gold, pred) {
            match totals.iter_mut().find(|(n, _)| *n == name) {
                Some((_, t)) => *t += c,
                None => totals.push((name, c)),
            }
        }
    }
    totals.into_iter().map(|(name, c)| TaskReport { task: name.to_string(), report: c.report() }).collect()
}

/// Unigram-overlap F-measure over whitespace tokens, with clipped counts.
pub fn rouge1(generated: &str, reference: &str) -> f64 {
    fn count(s: &str) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for w in s.split_whitespace() {
            *m.entry(w).or_default() += 1;
        }
        m
    }
    let gen = count(generated);
    let reference = count(reference);
    let gen_total: usize = gen.values().sum();
    let ref_total: usize = reference.values().sum();
    if gen_total == 0 && ref_total == 0 {
        return 1.0;
    }
    if gen_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let overlap: usize = gen.iter().map(|(w, n)| (*n).min(reference.get(w).copied().unwrap_or(0))).sum();
    let p = overlap as f64 / gen_total as f64;
    let r = overlap as f64 / ref_total as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(label: &str, text: &str) -> EntityMention {
        EntityMention { label: label.into(), text: text.into() }
    }

    fn rel(r: &str, s: &str, o: &str) -> Relation {
        Relation { relation: r.into(), subject: s.into(), object: o.into() }
    }

    fn ev(t: &str, trig: &str, args: &[(&str, &str)]) -> Event {
        Event {
            event_type: t.into(),
            trigger: trig.into(),
            arguments: args.iter().map(|(r, s)| (r.to_string(), s.to_string())).collect(),
        }
    }

    fn assert_prf(r: PrfReport, p: f64, rc: f64, f: f64) {
        assert!((r.precision - p).abs() < 1e-12, "{r:?}");
        assert!((r.recall - rc).abs() < 1e-12, "{r:?}");
        assert!((r.f1 - f).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn parse_prediction_examples() {
        let schema = Schema::ner(&["Person"]).unwrap();
        assert_eq!(
            parse_prediction(r#"[{"Person":["Ekeus"]}]"#, &schema).unwrap(),
            PredictionSet::Entities(vec![m("Person", "Ekeus")])
        );
        assert!(parse_prediction("[]", &schema).unwrap().is_empty());
        let dup = parse_prediction(r#"[{"Person":["Ekeus","Ekeus"]}]"#, &schema).unwrap();
        assert_eq!(dup, PredictionSet::Entities(vec![m("Person", "Ekeus"), m("Person", "Ekeus")]));
    }

    #[test]
    fn ner_examples() {
        let g = vec![m("Person", "Ekeus")];
        assert_prf(ner_f1(&g, &g), 1.0, 1.0, 1.0);
        assert_prf(ner_f1(&g, &[m("Person", "Baghdad")]), 0.0, 0.0, 0.0);
        let g = vec![m("Person", "Ekeus"), m("Location", "Baghdad")];
        let p = vec![m("Person", "Ekeus"), m("Person", "Baghdad")];
        assert_prf(ner_f1(&g, &p), 0.5, 0.5, 0.5);
    }

    #[test]
    fn re_examples() {
        let g = vec![rel("works_for", "A", "B")];
        assert_prf(re_f1(&g, &g), 1.0, 1.0, 1.0);
        assert_prf(re_f1(&g, &[rel("works_for", "B", "A")]), 0.0, 0.0, 0.0);
        let g = vec![rel("r", "A", "B"), rel("r", "C", "D"), rel("r", "E", "F")];
        let p = vec![rel("r", "A", "B"), rel("r", "X", "Y")];
        assert_prf(re_f1(&g, &p), 0.5, 1.0 / 3.0, 0.4);
    }

    #[test]
    fn ee_examples() {
        let g = vec![ev("Attack", "fired", &[("attacker", "rebels"), ("target", "city")])];
        assert_prf(ee_trigger_f1(&g, &g), 1.0, 1.0, 1.0);
        assert_prf(ee_argument_f1(&g, &g), 1.0, 1.0, 1.0);
        // wrong trigger span: trigger miss, arguments still scored
        let p = vec![ev("Attack", "hit", &[("attacker", "rebels"), ("target", "city")])];
        assert_prf(ee_trigger_f1(&g, &p), 0.0, 0.0, 0.0);
        assert_prf(ee_argument_f1(&g, &p), 1.0, 1.0, 1.0);
        let p = vec![ev("Attack", "fired", &[("attacker", "rebels")])];
        let r = ee_argument_f1(&g, &p);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.precision, 1.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge1("a b c", "a b c"), 1.0);
        assert_eq!(rouge1("a b", "c d"), 0.0);
        assert!((rouge1("a b c", "a c d") - 2.0 / 3.0).abs() < 1e-12);
        // clipping: repeated generated unigrams count at most as often as in the reference
        assert!((rouge1("a a a", "a b") - 2.0 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn report_serialization_layout() {
        let r = TaskReport { task: "NER".into(), report: Counts { tp: 1, fp: 1, fn_: 0 }.report() };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["task", "precision", "recall", "f1", "tp", "fp", "fn"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }

    fn small_bag() -> impl Strategy<Value = Vec<EntityMention>> {
        prop::collection::vec((0..2u8, 0..3u8), 0..=6).prop_map(|v| {
            v.into_iter().map(|(l, t)| m(&format!("L{l}"), &format!("t{t}"))).collect()
        })
    }

    proptest! {
        #[test]
        fn swapping_gold_and_pred_swaps_p_and_r(g in small_bag(), p in small_bag()) {
            let a = ner_f1(&g, &p);
            let b = ner_f1(&p, &g);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-15);
        }

        #[test]
        fn f1_identity(g in small_bag(), p in small_bag()) {
            let r = ner_f1(&g, &p);
            let expected = if r.precision + r.recall == 0.0 { 0.0 } else {
                2.0 * r.precision * r.recall / (r.precision + r.recall)
            };
            prop_assert!((r.f1 - expected).abs() <= 1e-12);
            prop_assert!(r.tp <= g.len().min(p.len()));
        }

        #[test]
        fn monotone_in_additions(g in small_bag(), p in small_bag(), extra in 0..3u8) {
            let base = ner_f1(&g, &p);
            if let Some(hit) = g.first() {
                let mut more = p.clone();
                more.push(hit.clone());
                prop_assert!(ner_f1(&g, &more).recall >= base.recall);
            }
            let mut spurious = p.clone();
            spurious.push(m("Nope", &format!("z{extra}")));
            prop_assert!(ner_f1(&g, &spurious).precision <= base.precision);
        }
    }
}
