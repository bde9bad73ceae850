//! Token-level output-format automaton.
//!
//! [`Grammar`] fuses three constraints into one state machine: the canonical
//! JSON shape for the task, the schema's label (and role) set, and the span
//! constraint that every extracted string is a contiguous token run of the
//! context. Canonical shapes, written without whitespace:
//!
//! ```text
//! NER  [{"Person":["Ekeus","Annan"],"Location":["Baghdad"]}, ...]
//! RE   [{"relation":"works_for","subject":"Ekeus","object":"U.N."}, ...]
//! EE   [{"event_type":"Attack","trigger":"fired","arguments":[{"role":"target","span":"Baghdad"}]}, ...]
//! ```
//!
//! `[]` is a valid (empty) result. NER objects carry at least one label, each
//! label at most once, and every span list is non-empty. Spans are non-empty.

mod mask;
mod schema;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::sync::Arc;

pub use mask::TokenMask;
pub use schema::{Schema, SchemaError, Task, MAX_LABELS};

use crate::span_index::{SpanCursor, SpanTrie};
use crate::vocab::{TokenId, TokenSequence, Vocab, VocabError};

pub(crate) use schema::is_safe_name;

/// Object keys of the RE and EE shapes.
pub mod keys {
    pub const RELATION: &str = "relation";
    pub const SUBJECT: &str = "subject";
    pub const OBJECT: &str = "object";
    pub const EVENT_TYPE: &str = "event_type";
    pub const TRIGGER: &str = "trigger";
    pub const ARGUMENTS: &str = "arguments";
    pub const ROLE: &str = "role";
    pub const SPAN: &str = "span";

    pub const ALL: [&str; 8] = [RELATION, SUBJECT, OBJECT, EVENT_TYPE, TRIGGER, ARGUMENTS, ROLE, SPAN];
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("cannot tokenize {what:?}")]
    Untokenizable { what: String, source: VocabError },
    #[error("context has no token usable inside a JSON string")]
    NoSpanTokens,
    #[error("token {token} is not allowed in state {mode}")]
    Disallowed { mode: &'static str, token: TokenId },
    #[error("the automaton has already accepted")]
    AlreadyAccepted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Lit {
    ObjOpen,
    NerKeyQuote,
    NerListOpen,
    NerSpanQuote,
    ReRelationKey,
    ReSubjectKey,
    ReObjectKey,
    ReClose,
    EeTypeKey,
    EeTriggerKey,
    EeArgumentsKey,
    EeArgBrace,
    EeRoleKey,
    EeSpanKey,
    EeArgClose,
    EeClose,
}

const LIT_COUNT: usize = 16;

impl Lit {
    fn text(self) -> String {
        use keys::*;
        match self {
            Lit::ObjOpen | Lit::EeArgBrace => "{".into(),
            Lit::NerKeyQuote | Lit::NerSpanQuote => "\"".into(),
            Lit::NerListOpen => ":[\"".into(),
            Lit::ReRelationKey => format!("\"{RELATION}\":\""),
            Lit::ReSubjectKey => format!(",\"{SUBJECT}\":\""),
            Lit::ReObjectKey => format!(",\"{OBJECT}\":\""),
            Lit::ReClose | Lit::EeArgClose | Lit::EeClose => "}".into(),
            Lit::EeTypeKey => format!("\"{EVENT_TYPE}\":\""),
            Lit::EeTriggerKey => format!(",\"{TRIGGER}\":\""),
            Lit::EeArgumentsKey => format!(",\"{ARGUMENTS}\":["),
            Lit::EeRoleKey => format!("\"{ROLE}\":\""),
            Lit::EeSpanKey => format!(",\"{SPAN}\":\""),
        }
    }

    /// Task whose shape uses this literal; `None` for shared ones.
    fn task(self) -> Option<Task> {
        match self {
            Lit::ObjOpen => None,
            Lit::NerKeyQuote | Lit::NerListOpen | Lit::NerSpanQuote => Some(Task::Ner),
            Lit::ReRelationKey | Lit::ReSubjectKey | Lit::ReObjectKey | Lit::ReClose => Some(Task::Re),
            _ => Some(Task::Ee),
        }
    }

    const ALL: [Lit; LIT_COUNT] = [
        Lit::ObjOpen,
        Lit::NerKeyQuote,
        Lit::NerListOpen,
        Lit::NerSpanQuote,
        Lit::ReRelationKey,
        Lit::ReSubjectKey,
        Lit::ReObjectKey,
        Lit::ReClose,
        Lit::EeTypeKey,
        Lit::EeTriggerKey,
        Lit::EeArgumentsKey,
        Lit::EeArgBrace,
        Lit::EeRoleKey,
        Lit::EeSpanKey,
        Lit::EeArgClose,
        Lit::EeClose,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum LabelSlot {
    NerKey,
    Relation,
    EventType,
    Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum SpanSlot {
    NerItem,
    Subject,
    Object,
    Trigger,
    Argument,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Phase {
    Start,
    /// After the opening `[`: `{` or `]`.
    ArrayOpen,
    /// After a complete object: `,` or `]`.
    AfterObject,
    Lit { lit: Lit, pos: u8 },
    Label { slot: LabelSlot, candidates: Vec<u16>, len: u8 },
    Span { slot: SpanSlot, cursor: SpanCursor },
    /// NER span list: `,` or `]`.
    NerAfterSpan,
    /// NER object after a label's list: `,` (if a label is unused) or `}`.
    NerAfterList,
    /// EE argument list just opened: `{` or `]`.
    EeArgsOpen,
    /// EE argument list after an argument: `,` or `]`.
    EeAfterArg,
    Accept,
}

impl Phase {
    fn name(&self) -> &'static str {
        match self {
            Phase::Start => "Start",
            Phase::ArrayOpen => "ExpectObjectOrEnd",
            Phase::AfterObject => "AfterObject",
            Phase::Lit { .. } => "Literal",
            Phase::Label { .. } => "InLabel",
            Phase::Span { .. } => "InSpan",
            Phase::NerAfterSpan => "AfterSpan",
            Phase::NerAfterList => "AfterSpanList",
            Phase::EeArgsOpen => "ExpectArgumentOrEnd",
            Phase::EeAfterArg => "AfterArgument",
            Phase::Accept => "Accept",
        }
    }
}

/// Decoding position inside the automaton. Cheap to clone; a clone is an
/// independent branch.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GrammarState {
    phase: Phase,
    /// NER: labels already emitted in the current object.
    used_labels: u64,
    /// EE: event type of the current object, selects the role set.
    event: u16,
}

impl GrammarState {
    pub fn mode(&self) -> &'static str {
        self.phase.name()
    }

    pub fn is_accepting(&self) -> bool {
        self.phase == Phase::Accept
    }

    /// True while the automaton is inside an extracted span.
    pub fn in_span(&self) -> bool {
        matches!(self.phase, Phase::Span { .. })
    }
}

impl fmt::Debug for GrammarState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrammarState")
            .field("phase", &self.phase)
            .field("used_labels", &format_args!("{:#b}", self.used_labels))
            .field("event", &self.event)
            .finish()
    }
}

/// Vocabulary- and schema-dependent tables, shared by every context.
#[derive(Debug, Clone)]
pub struct CompiledSchema {
    schema: Schema,
    vocab_size: usize,
    /// Tokens that may appear inside a JSON string without escaping.
    span_safe: Vec<bool>,
    labels: Vec<Vec<TokenId>>,
    /// Per label, the tokenized roles (EE only).
    roles: Vec<Vec<Vec<TokenId>>>,
    literals: Vec<Vec<TokenId>>,
}

fn tokenize(vocab: &Vocab, what: &str) -> Result<Vec<TokenId>, GrammarError> {
    vocab
        .encode(what)
        .map(TokenSequence::into_inner)
        .map_err(|source| GrammarError::Untokenizable { what: what.to_string(), source })
}

impl CompiledSchema {
    pub fn new(vocab: &Vocab, schema: &Schema) -> Result<Self, GrammarError> {
        schema.validate()?;
        let span_safe = (0..vocab.len())
            .map(TokenId::from)
            .map(|id| !vocab.is_special(id) && vocab.token(id).is_some_and(is_safe_name))
            .collect();
        let labels = schema
            .labels
            .iter()
            .map(|l| tokenize(vocab, l))
            .collect::<Result<Vec<_>, _>>()?;
        let roles = schema
            .labels
            .iter()
            .map(|l| schema.roles_of(l).iter().map(|r| tokenize(vocab, r)).collect())
            .collect::<Result<Vec<_>, _>>()?;
        let literals = Lit::ALL
            .iter()
            .map(|lit| match lit.task() {
                Some(t) if t != schema.task => Ok(Vec::new()),
                _ => tokenize(vocab, &lit.text()),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { schema: schema.clone(), vocab_size: vocab.len(), span_safe, labels, roles, literals })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn is_span_safe(&self, id: TokenId) -> bool {
        self.span_safe.get(id.index()).copied().unwrap_or(false)
    }

    fn literal(&self, lit: Lit) -> &[TokenId] {
        &self.literals[lit as usize]
    }
}

/// The constraint automaton for one (vocabulary, schema, context) triple.
#[derive(Debug, Clone)]
pub struct Grammar {
    compiled: Arc<CompiledSchema>,
    trie: SpanTrie,
}

const OPEN_BRACKET: TokenId = TokenId(0);
const CLOSE_BRACKET: TokenId = TokenId(1);
const OPEN_BRACE: TokenId = TokenId(2);
const CLOSE_BRACE: TokenId = TokenId(3);
const QUOTE: TokenId = TokenId(4);
const COMMA: TokenId = TokenId(6);

impl Grammar {
    pub fn build(vocab: &Vocab, schema: &Schema, trie: SpanTrie) -> Result<Self, GrammarError> {
        Self::new(Arc::new(CompiledSchema::new(vocab, schema)?), trie)
    }

    pub fn new(compiled: Arc<CompiledSchema>, trie: SpanTrie) -> Result<Self, GrammarError> {
        if !trie.distinct_tokens().any(|t| compiled.is_span_safe(t)) {
            return Err(GrammarError::NoSpanTokens);
        }
        Ok(Self { compiled, trie })
    }

    pub fn compiled(&self) -> &Arc<CompiledSchema> {
        &self.compiled
    }

    pub fn schema(&self) -> &Schema {
        &self.compiled.schema
    }

    pub fn trie(&self) -> &SpanTrie {
        &self.trie
    }

    pub fn init_state(&self) -> GrammarState {
        GrammarState { phase: Phase::Start, used_labels: 0, event: 0 }
    }

    pub fn is_accepting(&self, state: &GrammarState) -> bool {
        state.is_accepting()
    }

    /// The exact set of tokens that may follow `state`.
    pub fn allowed_tokens(&self, state: &GrammarState) -> Result<TokenMask, GrammarError> {
        let mut mask = TokenMask::empty(self.compiled.vocab_size);
        self.for_each_allowed(state, |t| mask.insert(t))?;
        Ok(mask)
    }

    /// Visits the allowed tokens of `state`; duplicates are possible.
    pub fn for_each_allowed(
        &self,
        state: &GrammarState,
        mut f: impl FnMut(TokenId),
    ) -> Result<(), GrammarError> {
        let c = &*self.compiled;
        match &state.phase {
            Phase::Start => f(OPEN_BRACKET),
            Phase::ArrayOpen => {
                f(OPEN_BRACE);
                f(CLOSE_BRACKET);
            }
            Phase::AfterObject | Phase::NerAfterSpan | Phase::EeAfterArg => {
                f(COMMA);
                f(CLOSE_BRACKET);
            }
            Phase::EeArgsOpen => {
                if !c.roles[state.event as usize].is_empty() {
                    f(OPEN_BRACE);
                }
                f(CLOSE_BRACKET);
            }
            Phase::NerAfterList => {
                if self.unused_label_exists(state.used_labels) {
                    f(COMMA);
                }
                f(CLOSE_BRACE);
            }
            Phase::Lit { lit, pos } => f(c.literal(*lit)[*pos as usize]),
            Phase::Label { slot, candidates, len } => {
                let table = self.label_table(*slot, state.event);
                let len = *len as usize;
                for &i in candidates {
                    let seq = &table[i as usize];
                    match seq.get(len) {
                        Some(&t) => f(t),
                        None => f(QUOTE),
                    }
                }
            }
            Phase::Span { cursor, .. } => {
                self.trie.for_each_continuation(cursor, |t| {
                    if c.is_span_safe(t) {
                        f(t)
                    }
                });
                if cursor.matched_len() >= 1 {
                    f(QUOTE);
                }
            }
            Phase::Accept => return Err(GrammarError::AlreadyAccepted),
        }
        Ok(())
    }

    /// Deterministic successor of `state` on `tok`.
    pub fn advance(&self, state: &GrammarState, tok: TokenId) -> Result<GrammarState, GrammarError> {
        let disallowed = || GrammarError::Disallowed { mode: state.phase.name(), token: tok };
        let c = &*self.compiled;
        let mut next = state.clone();
        next.phase = match &state.phase {
            Phase::Start if tok == OPEN_BRACKET => Phase::ArrayOpen,
            Phase::ArrayOpen | Phase::AfterObject if tok == CLOSE_BRACKET => Phase::Accept,
            Phase::ArrayOpen if tok == OPEN_BRACE => return Ok(self.after_literal(state, Lit::ObjOpen)),
            Phase::AfterObject if tok == COMMA => self.enter_literal(Lit::ObjOpen),
            Phase::NerAfterSpan if tok == COMMA => self.enter_literal(Lit::NerSpanQuote),
            Phase::NerAfterSpan if tok == CLOSE_BRACKET => Phase::NerAfterList,
            Phase::NerAfterList if tok == COMMA && self.unused_label_exists(state.used_labels) => {
                self.enter_literal(Lit::NerKeyQuote)
            }
            Phase::NerAfterList if tok == CLOSE_BRACE => Phase::AfterObject,
            Phase::EeArgsOpen if tok == OPEN_BRACE && !c.roles[state.event as usize].is_empty() => {
                self.enter_literal(Lit::EeRoleKey)
            }
            Phase::EeArgsOpen | Phase::EeAfterArg if tok == CLOSE_BRACKET => self.enter_literal(Lit::EeClose),
            Phase::EeAfterArg if tok == COMMA => self.enter_literal(Lit::EeArgBrace),
            Phase::Lit { lit, pos } => {
                let seq = c.literal(*lit);
                if seq[*pos as usize] != tok {
                    return Err(disallowed());
                }
                if (*pos as usize) + 1 < seq.len() {
                    Phase::Lit { lit: *lit, pos: pos + 1 }
                } else {
                    return Ok(self.after_literal(state, *lit));
                }
            }
            Phase::Label { slot, candidates, len } => {
                let table = self.label_table(*slot, state.event);
                let len = *len as usize;
                if tok == QUOTE {
                    let chosen = candidates
                        .iter()
                        .copied()
                        .find(|&i| table[i as usize].len() == len)
                        .ok_or_else(disallowed)?;
                    return Ok(self.after_label(state, *slot, chosen));
                }
                let kept: Vec<u16> = candidates
                    .iter()
                    .copied()
                    .filter(|&i| table[i as usize].get(len) == Some(&tok))
                    .collect();
                if kept.is_empty() {
                    return Err(disallowed());
                }
                Phase::Label { slot: *slot, candidates: kept, len: (len + 1) as u8 }
            }
            Phase::Span { slot, cursor } => {
                if tok == QUOTE {
                    if cursor.matched_len() == 0 {
                        return Err(disallowed());
                    }
                    return Ok(self.after_span(state, *slot));
                }
                if !c.is_span_safe(tok) {
                    return Err(disallowed());
                }
                let stepped = self.trie.step(cursor, tok).map_err(|_| disallowed())?;
                if stepped.is_dead() {
                    return Err(disallowed());
                }
                Phase::Span { slot: *slot, cursor: stepped }
            }
            Phase::Accept => return Err(GrammarError::AlreadyAccepted),
            _ => return Err(disallowed()),
        };
        Ok(next)
    }

    /// Feeds a whole token sequence from the initial state.
    pub fn run(&self, tokens: &[TokenId]) -> Result<GrammarState, GrammarError> {
        tokens.iter().try_fold(self.init_state(), |s, &t| self.advance(&s, t))
    }

    /// True when `tokens` drives the automaton to Accept.
    pub fn accepts(&self, tokens: &[TokenId]) -> bool {
        self.run(tokens).is_ok_and(|s| s.is_accepting())
    }

    /// Length of the shortest token sequence that drives `state` to Accept.
    ///
    /// Span contents never matter for the remainder: a span with at least
    /// one matched token can close at once, and a fresh span can always take
    /// one token because construction rejects contexts without span-safe
    /// tokens. The search therefore collapses each span to its fixed cost.
    pub fn min_completion(&self, state: &GrammarState) -> usize {
        let mut best: HashMap<GrammarState, usize> = HashMap::from([(state.clone(), 0)]);
        let mut seen = vec![state.clone()];
        let mut heap = BinaryHeap::from([(Reverse(0), 0)]);
        while let Some((Reverse(d), i)) = heap.pop() {
            let s = seen[i].clone();
            if best[&s] < d {
                continue;
            }
            if s.is_accepting() {
                return d;
            }
            let mut edges = Vec::new();
            if let Phase::Span { slot, cursor } = &s.phase {
                let cost = if cursor.matched_len() == 0 { 2 } else { 1 };
                edges.push((self.after_span(&s, *slot), cost));
            } else {
                self.for_each_allowed(&s, |t| {
                    edges.push((self.advance(&s, t).expect("allowed token advances"), 1));
                })
                .expect("live state");
            }
            for (n, cost) in edges {
                let nd = d + cost;
                if best.get(&n).map_or(true, |&old| nd < old) {
                    best.insert(n.clone(), nd);
                    heap.push((Reverse(nd), seen.len()));
                    seen.push(n);
                }
            }
        }
        unreachable!("Accept is reachable from every live state")
    }

    /// Upper bound on [`Grammar::min_completion`] over all states. Any shortest
    /// completion uses each literal at most once, at most one label and one
    /// role, and at most two spans plus a handful of single structural tokens.
    pub fn completion_bound(&self) -> usize {
        let c = &*self.compiled;
        let longest = |t: &[Vec<TokenId>]| t.iter().map(Vec::len).max().unwrap_or(0);
        let role = c.roles.iter().map(|r| longest(r)).max().unwrap_or(0);
        c.literals.iter().map(Vec::len).sum::<usize>() + 2 * (longest(&c.labels) + role) + 16
    }

    fn unused_label_exists(&self, used: u64) -> bool {
        let n = self.compiled.labels.len();
        let all = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        used & all != all
    }

    fn label_table(&self, slot: LabelSlot, event: u16) -> &[Vec<TokenId>] {
        match slot {
            LabelSlot::Role => &self.compiled.roles[event as usize],
            _ => &self.compiled.labels,
        }
    }

    fn enter_literal(&self, lit: Lit) -> Phase {
        Phase::Lit { lit, pos: 0 }
    }

    fn enter_label(&self, state: &GrammarState, slot: LabelSlot) -> Phase {
        let table = self.label_table(slot, state.event);
        let candidates = (0..table.len() as u16)
            .filter(|&i| slot != LabelSlot::NerKey || state.used_labels & (1 << i) == 0)
            .collect();
        Phase::Label { slot, candidates, len: 0 }
    }

    fn enter_span(&self, slot: SpanSlot) -> Phase {
        Phase::Span { slot, cursor: self.trie.start() }
    }

    /// State once the last token of `lit` has been consumed.
    fn after_literal(&self, state: &GrammarState, lit: Lit) -> GrammarState {
        let mut next = state.clone();
        next.phase = match lit {
            Lit::ObjOpen => {
                next.used_labels = 0;
                next.event = 0;
                match self.compiled.schema.task {
                    Task::Ner => self.enter_literal(Lit::NerKeyQuote),
                    Task::Re => self.enter_literal(Lit::ReRelationKey),
                    Task::Ee => self.enter_literal(Lit::EeTypeKey),
                }
            }
            Lit::NerKeyQuote => self.enter_label(&next, LabelSlot::NerKey),
            Lit::NerListOpen | Lit::NerSpanQuote => self.enter_span(SpanSlot::NerItem),
            Lit::ReRelationKey => self.enter_label(&next, LabelSlot::Relation),
            Lit::ReSubjectKey => self.enter_span(SpanSlot::Subject),
            Lit::ReObjectKey => self.enter_span(SpanSlot::Object),
            Lit::ReClose | Lit::EeClose => Phase::AfterObject,
            Lit::EeTypeKey => self.enter_label(&next, LabelSlot::EventType),
            Lit::EeTriggerKey => self.enter_span(SpanSlot::Trigger),
            Lit::EeArgumentsKey => Phase::EeArgsOpen,
            Lit::EeArgBrace => self.enter_literal(Lit::EeRoleKey),
            Lit::EeRoleKey => self.enter_label(&next, LabelSlot::Role),
            Lit::EeSpanKey => self.enter_span(SpanSlot::Argument),
            Lit::EeArgClose => Phase::EeAfterArg,
        };
        next
    }

    fn after_label(&self, state: &GrammarState, slot: LabelSlot, chosen: u16) -> GrammarState {
        let mut next = state.clone();
        let lit = match slot {
            LabelSlot::NerKey => {
                next.used_labels |= 1 << chosen;
                Lit::NerListOpen
            }
            LabelSlot::Relation => Lit::ReSubjectKey,
            LabelSlot::EventType => {
                next.event = chosen;
                Lit::EeTriggerKey
            }
            LabelSlot::Role => Lit::EeSpanKey,
        };
        next.phase = self.enter_literal(lit);
        next
    }

    fn after_span(&self, state: &GrammarState, slot: SpanSlot) -> GrammarState {
        let mut next = state.clone();
        next.phase = match slot {
            SpanSlot::NerItem => Phase::NerAfterSpan,
            SpanSlot::Subject => self.enter_literal(Lit::ReObjectKey),
            SpanSlot::Object => self.enter_literal(Lit::ReClose),
            SpanSlot::Trigger => self.enter_literal(Lit::EeArgumentsKey),
            SpanSlot::Argument => self.enter_literal(Lit::EeArgClose),
        };
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn vocab_for(texts: &[&str]) -> Vocab {
        let mut alphabet: BTreeSet<char> = texts.iter().flat_map(|t| t.chars()).collect();
        for k in keys::ALL {
            alphabet.extend(k.chars());
        }
        Vocab::build(&alphabet, &[]).unwrap()
    }

    fn grammar(v: &Vocab, schema: &Schema, context: &str) -> Grammar {
        let trie = SpanTrie::build(v.encode(context).unwrap()).unwrap();
        Grammar::build(v, schema, trie).unwrap()
    }

    fn walk(g: &Grammar, v: &Vocab, text: &str) -> Result<GrammarState, GrammarError> {
        g.run(&v.encode(text).unwrap())
    }

    fn allowed_strings(g: &Grammar, v: &Vocab, s: &GrammarState) -> BTreeSet<String> {
        g.allowed_tokens(s).unwrap().iter().map(|t| v.token(t).unwrap().to_string()).collect()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    const CONTEXT: &str = "U.N. official Ekeus heads for Baghdad";

    #[test]
    fn start_allows_only_open_bracket() {
        let v = vocab_for(&[CONTEXT, "Person"]);
        let g = grammar(&v, &Schema::ner(&["Person"]).unwrap(), CONTEXT);
        let s = g.init_state();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["["]));
        let s = g.advance(&s, v.structural('[')).unwrap();
        assert_eq!(s.mode(), "ExpectObjectOrEnd");
        assert_eq!(allowed_strings(&g, &v, &s), set(&["{", "]"]));
    }

    #[test]
    fn label_trie_offers_first_label_tokens() {
        let v = vocab_for(&[CONTEXT, "Person", "Location"]);
        let g = grammar(&v, &Schema::ner(&["Person", "Location"]).unwrap(), CONTEXT);
        let s = walk(&g, &v, "[{\"").unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["P", "L"]));
    }

    #[test]
    fn labels_sharing_a_prefix() {
        let v = vocab_for(&["ab", "x"]);
        let g = grammar(&v, &Schema::ner(&["a", "ab"]).unwrap(), "x");
        let s = walk(&g, &v, "[{\"a").unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["\"", "b"]));
        let s = walk(&g, &v, "[{\"a\":[\"x\"],\"").unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["a"]));
        let s = g.advance(&s, v.id("a").unwrap()).unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["b"]));
    }

    #[test]
    fn span_continuation_or_close_quote() {
        let v = vocab_for(&["ABCA", "X"]);
        let g = grammar(&v, &Schema::ner(&["X"]).unwrap(), "ABCA");
        let s = walk(&g, &v, "[{\"X\":[\"").unwrap();
        assert_eq!(s.mode(), "InSpan");
        // zero tokens matched: no closing quote
        assert_eq!(allowed_strings(&g, &v, &s), set(&["A", "B", "C"]));
        let s = g.advance(&s, v.id("A").unwrap()).unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["B", "\""]));
    }

    #[test]
    fn after_object_allows_comma_or_close() {
        let v = vocab_for(&[CONTEXT, "Person"]);
        let g = grammar(&v, &Schema::ner(&["Person"]).unwrap(), CONTEXT);
        let s = walk(&g, &v, "[{\"Person\":[\"Ekeus\"]}").unwrap();
        assert_eq!(s.mode(), "AfterObject");
        assert_eq!(allowed_strings(&g, &v, &s), set(&[",", "]"]));
    }

    #[test]
    fn worked_example_walks_to_accept() {
        let v = vocab_for(&[CONTEXT, "Person"]);
        let g = grammar(&v, &Schema::ner(&["Person"]).unwrap(), CONTEXT);
        let s = walk(&g, &v, "[{\"Person\":[\"Ekeus\"]}]").unwrap();
        assert!(g.is_accepting(&s));
        assert_eq!(g.allowed_tokens(&s).unwrap_err(), GrammarError::AlreadyAccepted);
        assert_eq!(g.advance(&s, v.structural(']')).unwrap_err(), GrammarError::AlreadyAccepted);
    }

    #[test]
    fn miscased_span_is_rejected() {
        let v = vocab_for(&[CONTEXT, "Person", "EK"]);
        let g = grammar(&v, &Schema::ner(&["Person"]).unwrap(), CONTEXT);
        let err = walk(&g, &v, "[{\"Person\":[\"EKeus\"]}]").unwrap_err();
        assert_eq!(err, GrammarError::Disallowed { mode: "InSpan", token: v.id("K").unwrap() });
    }

    #[test]
    fn span_token_absent_from_context_is_rejected() {
        let v = vocab_for(&[CONTEXT, "Person", "Z"]);
        let g = grammar(&v, &Schema::ner(&["Person"]).unwrap(), CONTEXT);
        assert!(matches!(
            walk(&g, &v, "[{\"Person\":[\"Z"),
            Err(GrammarError::Disallowed { mode: "InSpan", .. })
        ));
        assert!(matches!(
            walk(&g, &v, "[{\"Person\":[\"\""),
            Err(GrammarError::Disallowed { mode: "InSpan", .. })
        ));
    }

    #[test]
    fn accepting_examples() {
        let v = vocab_for(&["ab", "X"]);
        let g = grammar(&v, &Schema::ner(&["X"]).unwrap(), "ab");
        assert!(g.is_accepting(&walk(&g, &v, "[]").unwrap()));
        assert!(!g.is_accepting(&walk(&g, &v, "[{\"X\":[\"a").unwrap()));
    }

    #[test]
    fn duplicate_labels_in_object_are_blocked() {
        let v = vocab_for(&["ab", "XY"]);
        let g = grammar(&v, &Schema::ner(&["X", "Y"]).unwrap(), "ab");
        let s = walk(&g, &v, "[{\"X\":[\"a\"],\"").unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["Y"]));
        let s = walk(&g, &v, "[{\"X\":[\"a\"],\"Y\":[\"b\",\"b\"]").unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["}"]));
        // a new object resets the used set
        let s = walk(&g, &v, "[{\"X\":[\"a\"]},{\"").unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["X", "Y"]));
    }

    #[test]
    fn relation_shape() {
        let ctx = "Ekeus works for UN";
        let v = vocab_for(&[ctx, "works_for"]);
        let g = grammar(&v, &Schema::re(&["works_for"]).unwrap(), ctx);
        let out = r#"[{"relation":"works_for","subject":"Ekeus","object":"UN"}]"#;
        assert!(g.accepts(&v.encode(out).unwrap()));
        let swapped_keys = r#"[{"subject":"Ekeus","relation":"works_for","object":"UN"}]"#;
        assert!(!g.accepts(&v.encode(swapped_keys).unwrap()));
    }

    #[test]
    fn event_shape_and_roles() {
        let ctx = "rebels attacked the city";
        let v = vocab_for(&[ctx, "Attack", "Meet", "attacker", "target"]);
        let schema = Schema::ee(&[("Attack", &["attacker", "target"]), ("Meet", &[])]).unwrap();
        let g = grammar(&v, &schema, ctx);
        let out = r#"[{"event_type":"Attack","trigger":"attacked","arguments":[{"role":"attacker","span":"rebels"},{"role":"target","span":"the city"}]}]"#;
        assert!(g.accepts(&v.encode(out).unwrap()));
        let no_args = r#"[{"event_type":"Meet","trigger":"the","arguments":[]}]"#;
        assert!(g.accepts(&v.encode(no_args).unwrap()));
        // Meet declares no roles: only the closing bracket after "arguments":[
        let s = walk(&g, &v, r#"[{"event_type":"Meet","trigger":"the","arguments":["#).unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["]"]));
        let s = walk(&g, &v, r#"[{"event_type":"Attack","trigger":"the","arguments":[{"role":""#).unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["a", "t"]));
    }

    #[test]
    fn untokenizable_label_is_reported() {
        let v = vocab_for(&["ab"]);
        let schema = Schema::ner(&["Q"]).unwrap();
        let err = CompiledSchema::new(&v, &schema).unwrap_err();
        assert!(matches!(err, GrammarError::Untokenizable { ref what, .. } if what == "Q"));
    }

    #[test]
    fn context_without_span_tokens_is_rejected() {
        let v = vocab_for(&["a", "X"]);
        let trie = SpanTrie::build(v.encode("\"\"").unwrap()).unwrap();
        let err = Grammar::build(&v, &Schema::ner(&["X"]).unwrap(), trie).unwrap_err();
        assert_eq!(err, GrammarError::NoSpanTokens);
    }

    #[test]
    fn quotes_in_context_never_enter_spans() {
        let v = vocab_for(&["a\"b", "X"]);
        let g = grammar(&v, &Schema::ner(&["X"]).unwrap(), "a\"b");
        let s = walk(&g, &v, "[{\"X\":[\"a").unwrap();
        assert_eq!(allowed_strings(&g, &v, &s), set(&["\""]));
    }

    /// Plain breadth-first search over real tokens.
    fn shortest_by_bfs(g: &Grammar, start: &GrammarState) -> usize {
        let mut frontier = vec![start.clone()];
        let mut seen = std::collections::HashSet::new();
        for depth in 0.. {
            let mut next = Vec::new();
            for s in frontier {
                if s.is_accepting() {
                    return depth;
                }
                for t in g.allowed_tokens(&s).unwrap().iter() {
                    let n = g.advance(&s, t).unwrap();
                    if seen.insert(n.clone()) {
                        next.push(n);
                    }
                }
            }
            frontier = next;
        }
        unreachable!()
    }

    #[test]
    fn min_completion_matches_breadth_first_search() {
        let ctx = "rebels attacked the city";
        let v = vocab_for(&[ctx, "Attack", "Meet", "attacker", "target", "Person", "Place", "works_for"]);
        let cases = [
            (Schema::ner(&["Person", "Place"]).unwrap(), r#"[{"Person":["rebels","the"],"Place":["city"]},{"Place":["the city"]}]"#),
            (Schema::re(&["works_for"]).unwrap(), r#"[{"relation":"works_for","subject":"rebels","object":"city"}]"#),
            (
                Schema::ee(&[("Attack", &["attacker", "target"]), ("Meet", &[])]).unwrap(),
                r#"[{"event_type":"Attack","trigger":"attacked","arguments":[{"role":"target","span":"the city"}]}]"#,
            ),
        ];
        for (schema, out) in cases {
            let g = grammar(&v, &schema, ctx);
            let tokens = v.encode(out).unwrap();
            let mut s = g.init_state();
            assert_eq!(g.min_completion(&s), 2);
            for (i, &t) in tokens.iter().enumerate() {
                let d = g.min_completion(&s);
                assert_eq!(d, shortest_by_bfs(&g, &s), "{out} after {i} tokens");
                assert!(d <= g.completion_bound());
                s = g.advance(&s, t).unwrap();
            }
            assert_eq!(g.min_completion(&s), 0);
        }
    }
}
