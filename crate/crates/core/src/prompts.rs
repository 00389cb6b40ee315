//! Class prompt grammar.
//!
//! Every prompt follows
//!
//! ```text
//! a photo of a|an [adjective] TOKEN [preposition [article] [weather] [location]] [time-of-day phrase]
//! ```
//!
//! where every bracketed part is optional and a preposition is always followed
//! by a weather word, a location, or both. A weather word without a location
//! may be followed by the literal word `weather` ("in foggy weather").
//!
//! Prompts come from two sources: an external text-to-text model answering
//! the instruction built by [`build_llm_instruction`], and the deterministic
//! generator [`generate_prompts_fallback`] which realizes the same grammar from
//! a fixed lexicon.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Optional parts of the prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Adjective,
    Preposition,
    Weather,
    Location,
    TimeOfDay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub id: String,
    pub class_label: String,
    pub text: String,
    pub slots_used: BTreeSet<Slot>,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidationMode {
    /// Slot words must come from the lexicon.
    Strict,
    /// Structure only; open vocabulary.
    #[default]
    Lenient,
}

/// Why a prompt failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Defect {
    MissingPrefix,
    MissingToken,
    DuplicateToken,
    /// Bracketed template placeholder or stray angle-bracket token.
    Placeholder(String),
    UnknownAdjective(String),
    /// Text after the token that does not parse as the optional tail.
    UnknownTail(String),
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defect::MissingPrefix => f.write_str("missing `a photo of a|an` prefix"),
            Defect::MissingToken => f.write_str("class token missing"),
            Defect::DuplicateToken => f.write_str("class token occurs more than once"),
            Defect::Placeholder(w) => write!(f, "unfilled placeholder `{w}`"),
            Defect::UnknownAdjective(w) => write!(f, "`{w}` is not a lexicon adjective"),
            Defect::UnknownTail(w) => write!(f, "`{w}` does not match the optional tail"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("class label must not be empty")]
    EmptyClass,
    #[error("number of prompts must be positive")]
    ZeroPrompts,
    #[error("lexicon can produce only {capacity} distinct prompts, {requested} requested")]
    LexiconTooSmall { capacity: usize, requested: usize },
    #[error("text-to-text backend failed: {0}")]
    Transport(String),
    #[error("only {got} of {wanted} valid prompts received and fallback is disabled")]
    Insufficient { got: usize, wanted: usize },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed prompt file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Word lists for each optional slot. Entries are lowercase and may span
/// several words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGrammar {
    pub adjectives: Vec<String>,
    pub prepositions: Vec<String>,
    pub weathers: Vec<String>,
    pub locations: Vec<String>,
    pub times_of_day: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for PromptGrammar {
    /// Shipped lexicon. Adjectives are visual only.
    fn default() -> Self {
        Self {
            adjectives: owned(&[
                "red", "green", "blue", "yellow", "black", "white", "silver", "golden", "orange",
                "purple", "brown", "pink", "huge", "tiny", "small", "large", "old", "antique",
                "modern", "vintage", "colorful", "wooden", "metallic", "striped", "fluffy",
                "rusty", "shiny", "dusty", "glossy", "dark",
            ]),
            prepositions: owned(&[
                "on", "in", "near", "under", "beside", "behind", "next to", "in front of", "by",
                "inside", "outside", "across", "along", "at", "above", "below",
            ]),
            weathers: owned(&[
                "foggy", "snowy", "rainy", "sunny", "misty", "stormy", "cloudy", "windy", "hazy",
                "frosty", "icy", "overcast", "drizzly", "wet", "sunlit", "moonlit",
            ]),
            locations: owned(&[
                "road", "tunnel", "bridge", "beach", "street", "field", "forest", "lake",
                "mountain", "parking lot", "city square", "harbor", "desert", "garden",
                "train station", "rooftop", "meadow", "kitchen table", "shelf", "backyard",
            ]),
            times_of_day: owned(&[
                "at night", "at dawn", "at dusk", "at daytime", "at sunset", "at sunrise",
                "at noon", "at midnight", "in the morning", "in the evening", "in the afternoon",
                "at twilight", "during the day", "during golden hour", "at first light",
                "during blue hour",
            ]),
        }
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Longest lexicon entry that is a prefix of `words`; returns its word count.
fn match_prefix(entries: &[String], words: &[&str]) -> Option<usize> {
    entries
        .iter()
        .filter_map(|e| {
            let ew: Vec<&str> = e.split_whitespace().collect();
            (!ew.is_empty() && words.starts_with(&ew)).then_some(ew.len())
        })
        .max()
}

/// Longest lexicon entry that is a suffix of `words`; returns its word count.
fn match_suffix(entries: &[String], words: &[&str]) -> Option<usize> {
    entries
        .iter()
        .filter_map(|e| {
            let ew: Vec<&str> = e.split_whitespace().collect();
            (!ew.is_empty() && words.ends_with(&ew)).then_some(ew.len())
        })
        .max()
}

fn matches_entry(entries: &[String], words: &[&str]) -> bool {
    !words.is_empty() && entries.iter().any(|e| e.split_whitespace().eq(words.iter().copied()))
}

impl PromptGrammar {
    /// Strict parse of the words after the token.
    fn parse_tail_strict(&self, tail: &[&str]) -> Option<BTreeSet<Slot>> {
        let mut time_options = Vec::new();
        if let Some(n) = match_suffix(&self.times_of_day, tail) {
            time_options.push((&tail[..tail.len() - n], true));
        }
        time_options.push((tail, false));

        for (rest, has_time) in time_options {
            if let Some(mut slots) = self.parse_place_strict(rest) {
                if has_time {
                    slots.insert(Slot::TimeOfDay);
                }
                return Some(slots);
            }
        }
        None
    }

    fn parse_place_strict(&self, words: &[&str]) -> Option<BTreeSet<Slot>> {
        let mut slots = BTreeSet::new();
        if words.is_empty() {
            return Some(slots);
        }
        let n = match_prefix(&self.prepositions, words)?;
        slots.insert(Slot::Preposition);
        let mut rest = &words[n..];
        if rest.first().is_some_and(|w| ARTICLES.contains(w)) {
            rest = &rest[1..];
        }
        if let Some(n) = match_prefix(&self.weathers, rest) {
            let after = &rest[n..];
            if after.is_empty() || after == ["weather"] {
                slots.insert(Slot::Weather);
                return Some(slots);
            }
            if matches_entry(&self.locations, after) {
                slots.insert(Slot::Weather);
                slots.insert(Slot::Location);
                return Some(slots);
            }
        }
        if matches_entry(&self.locations, rest) {
            slots.insert(Slot::Location);
            return Some(slots);
        }
        None
    }

    /// Best-effort slot attribution for open-vocabulary tails.
    fn classify_tail_lenient(&self, tail: &[&str]) -> BTreeSet<Slot> {
        let mut slots = BTreeSet::new();
        let mut rest = tail;
        if let Some(n) = match_suffix(&self.times_of_day, tail) {
            slots.insert(Slot::TimeOfDay);
            rest = &tail[..tail.len() - n];
        }
        if rest.is_empty() {
            return slots;
        }
        slots.insert(Slot::Preposition);
        let skip = match_prefix(&self.prepositions, rest).unwrap_or(1);
        let mut has_location = false;
        for (i, w) in rest.iter().enumerate().skip(skip) {
            if ARTICLES.contains(w) || *w == "weather" {
                continue;
            }
            let is_weather = match_prefix(&self.weathers, &rest[i..]) == Some(1)
                || WEATHER_NOUNS.contains(w);
            if is_weather {
                slots.insert(Slot::Weather);
            } else {
                has_location = true;
            }
        }
        if has_location {
            slots.insert(Slot::Location);
        }
        slots
    }

    /// Number of distinct prompts the grammar can produce for one token.
    pub fn capacity(&self) -> usize {
        let a = self.adjectives.len();
        let t = self.times_of_day.len();
        let p = self.prepositions.len();
        let w = self.weathers.len();
        let l = self.locations.len();
        (1 + a) * (1 + t) * (1 + p * (w + l + w * l))
    }
}

const WEATHER_NOUNS: [&str; 12] = [
    "snow", "rain", "fog", "mist", "storm", "sunshine", "hail", "drizzle", "sleet",
    "thunderstorm", "haze", "wind",
];

/// Checks `text` against the prompt template.
///
/// On success returns the optional slots the prompt fills.
pub fn validate_prompt(
    text: &str,
    token: &str,
    grammar: &PromptGrammar,
    mode: ValidationMode,
) -> Result<BTreeSet<Slot>, Vec<Defect>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut defects = Vec::new();

    let prefix_ok = words.len() >= 4
        && words[..3] == ["a", "photo", "of"]
        && (words[3] == "a" || words[3] == "an");
    if !prefix_ok {
        defects.push(Defect::MissingPrefix);
    }

    let exact = words.iter().filter(|w| **w == token).count();
    let substr = text.matches(token).count();
    if exact == 0 {
        defects.push(Defect::MissingToken);
    } else if exact > 1 || substr > 1 {
        defects.push(Defect::DuplicateToken);
    } else if substr != exact {
        defects.push(Defect::Placeholder(token.to_string()));
    }

    for w in &words {
        if *w != token && w.contains(['[', ']', '<', '>', '{', '}']) {
            defects.push(Defect::Placeholder(w.to_string()));
        }
    }
    if !defects.is_empty() {
        return Err(defects);
    }

    let rest = &words[4..];
    let pos = rest.iter().position(|w| *w == token).expect("token present");
    let adjective = &rest[..pos];
    let tail = &rest[pos + 1..];

    match mode {
        ValidationMode::Lenient => {
            let mut slots = grammar.classify_tail_lenient(tail);
            if !adjective.is_empty() {
                slots.insert(Slot::Adjective);
            }
            Ok(slots)
        }
        ValidationMode::Strict => {
            if !adjective.is_empty() && !matches_entry(&grammar.adjectives, adjective) {
                defects.push(Defect::UnknownAdjective(adjective.join(" ")));
            }
            let slots = grammar.parse_tail_strict(tail);
            if slots.is_none() {
                defects.push(Defect::UnknownTail(tail.join(" ")));
            }
            if !defects.is_empty() {
                return Err(defects);
            }
            let mut slots = slots.expect("checked above");
            if !adjective.is_empty() {
                slots.insert(Slot::Adjective);
            }
            Ok(slots)
        }
    }
}

/// Instruction sent to the text-to-text model.
pub fn build_llm_instruction(class_label: &str, num_prompts: usize) -> Result<String, PromptError> {
    if class_label.trim().is_empty() {
        return Err(PromptError::EmptyClass);
    }
    if num_prompts == 0 {
        return Err(PromptError::ZeroPrompts);
    }
    Ok(format!(
        "Create prompts for me that have the following structure:\n\
         \"a photo of a [adjective] <classname> [location and/or weather preposition] [weather] [location] [time of day with preposition]\"\n\
         The <classname> is replaced with the actual classname, e.g. 'car'\n\
         All the attributes in [..] are optionals. This means example prompts for car could be:\n\
         'a photo of a red car' (adjective optional)\n\
         'a photo of a car on a road' (location optional)\n\
         'a photo of a car in snow' (weather optional)\n\
         'a photo of a car at night' (time of day optional)\n\
         'a photo of a huge car in a tunnel' (adjective and location optionals)\n\
         'a photo of a green car on a foggy bridge at daytime' (all optionals)\n\
         'a photo of a car' (no optional)\n\
         If you use adjectives, they should be visual. So don't use something like 'interesting'.\n\
         Also vary the number of optionals that you use.\n\
         Can you give me {num_prompts} prompts of this structure for class {class_label} please."
    ))
}

fn article_for(word: &str) -> &'static str {
    match word.chars().next() {
        Some(c) if "aeiouAEIOU".contains(c) => "an",
        _ => "a",
    }
}

/// Slot combination: adjective?, time?, and the place group.
#[derive(Debug, Clone, Copy)]
struct Shape {
    adjective: bool,
    time: bool,
    weather: bool,
    location: bool,
}

impl Shape {
    fn count(&self) -> usize {
        let place = match (self.weather, self.location) {
            (false, false) => 0,
            (true, true) => 3,
            _ => 2,
        };
        self.adjective as usize + self.time as usize + place
    }

    fn all() -> Vec<Shape> {
        let mut out = Vec::with_capacity(16);
        for bits in 0..16u8 {
            out.push(Shape {
                adjective: bits & 1 != 0,
                time: bits & 2 != 0,
                weather: bits & 4 != 0,
                location: bits & 8 != 0,
            });
        }
        out
    }

    fn usable(&self, g: &PromptGrammar) -> bool {
        (!self.adjective || !g.adjectives.is_empty())
            && (!self.time || !g.times_of_day.is_empty())
            && (!self.weather || !g.weathers.is_empty())
            && (!self.location || !g.locations.is_empty())
            && (!(self.weather || self.location) || !g.prepositions.is_empty())
    }
}

/// Word choices for one prompt; `None` where the slot is unused.
struct Choice<'g> {
    adjective: Option<&'g str>,
    preposition: Option<&'g str>,
    weather: Option<&'g str>,
    location: Option<&'g str>,
    time: Option<&'g str>,
}

impl Choice<'_> {
    fn render(&self, class_label: &str, token: &str) -> (String, BTreeSet<Slot>) {
        let mut slots = BTreeSet::new();
        let head = self.adjective.unwrap_or(class_label);
        let mut parts = vec![format!("a photo of {}", article_for(head))];
        if let Some(a) = self.adjective {
            parts.push(a.to_string());
            slots.insert(Slot::Adjective);
        }
        parts.push(token.to_string());
        if let Some(p) = self.preposition {
            parts.push(p.to_string());
            slots.insert(Slot::Preposition);
            match (self.weather, self.location) {
                (Some(w), Some(l)) => {
                    parts.push(format!("{} {w} {l}", article_for(w)));
                    slots.extend([Slot::Weather, Slot::Location]);
                }
                (Some(w), None) => {
                    parts.push(format!("{w} weather"));
                    slots.insert(Slot::Weather);
                }
                (None, Some(l)) => {
                    parts.push(format!("{} {l}", article_for(l)));
                    slots.insert(Slot::Location);
                }
                (None, None) => unreachable!("preposition without place"),
            }
        }
        if let Some(t) = self.time {
            parts.push(t.to_string());
            slots.insert(Slot::TimeOfDay);
        }
        (parts.join(" "), slots)
    }
}

fn draw<'g, R: Rng>(shape: Shape, g: &'g PromptGrammar, rng: &mut R) -> Choice<'g> {
    let pick = |list: &'g [String], on: bool, rng: &mut R| -> Option<&'g str> {
        if on {
            list.choose(rng).map(String::as_str)
        } else {
            None
        }
    };
    let adjective = pick(&g.adjectives, shape.adjective, rng);
    let place = shape.weather || shape.location;
    let preposition = pick(&g.prepositions, place, rng);
    let weather = pick(&g.weathers, shape.weather, rng);
    let location = pick(&g.locations, shape.location, rng);
    let time = pick(&g.times_of_day, shape.time, rng);
    Choice {
        adjective,
        preposition,
        weather,
        location,
        time,
    }
}

/// Optional-slot counts for the i-th generated prompt: the bare skeleton once,
/// then 1, 2, 3, 4, 5 repeating.
fn scheduled_count(i: usize) -> usize {
    if i == 0 {
        0
    } else {
        (i - 1) % 5 + 1
    }
}

/// Grammar-based prompt generator that needs no language model.
///
/// Produces exactly `num_prompts` distinct prompts, each valid in strict mode.
/// The number of optional slots follows 0, 1, 2, 3, 4, 5, 1, 2, ... so short
/// and long prompts are mixed. Output depends only on the arguments.
pub fn generate_prompts_fallback(
    class_label: &str,
    token: &str,
    num_prompts: usize,
    seed: u64,
) -> Result<Vec<ClassPrompt>, PromptError> {
    generate_with_grammar(class_label, token, num_prompts, seed, &PromptGrammar::default())
}

pub fn generate_with_grammar(
    class_label: &str,
    token: &str,
    num_prompts: usize,
    seed: u64,
    grammar: &PromptGrammar,
) -> Result<Vec<ClassPrompt>, PromptError> {
    if class_label.trim().is_empty() {
        return Err(PromptError::EmptyClass);
    }
    if num_prompts == 0 {
        return Err(PromptError::ZeroPrompts);
    }
    let capacity = grammar.capacity();
    if num_prompts > capacity {
        return Err(PromptError::LexiconTooSmall {
            capacity,
            requested: num_prompts,
        });
    }

    const ATTEMPTS: usize = 64;
    let shapes: Vec<Shape> = Shape::all().into_iter().filter(|s| s.usable(grammar)).collect();
    let mut rng = seed::rng(seed::stable_hash(&[
        seed::SeedPart::Str("prompts"),
        seed::SeedPart::Int(seed),
        seed::SeedPart::Str(class_label),
    ]));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(num_prompts);

    for i in 0..num_prompts {
        let target = scheduled_count(i);
        let mut order: Vec<usize> = vec![target];
        order.extend((0..=5).filter(|c| *c != target));

        let mut produced = None;
        'counts: for count in order {
            let candidates: Vec<Shape> =
                shapes.iter().copied().filter(|s| s.count() == count).collect();
            if candidates.is_empty() {
                continue;
            }
            for _ in 0..ATTEMPTS {
                let shape = *candidates.choose(&mut rng).expect("nonempty");
                let (text, slots) = draw(shape, grammar, &mut rng).render(class_label, token);
                if seen.insert(text.clone()) {
                    produced = Some((text, slots));
                    break 'counts;
                }
            }
        }
        let (text, slots) = match produced {
            Some(p) => p,
            None => first_unused(grammar, class_label, token, &seen).ok_or(
                PromptError::LexiconTooSmall {
                    capacity,
                    requested: num_prompts,
                },
            )?,
        };
        seen.insert(text.clone());
        out.push(ClassPrompt {
            id: prompt_id(class_label, i),
            class_label: class_label.to_string(),
            text,
            slots_used: slots,
            origin: Origin::Fallback,
        });
    }
    Ok(out)
}

/// Exhaustive scan for an unused prompt; only reached with tiny lexicons.
fn first_unused(
    g: &PromptGrammar,
    class_label: &str,
    token: &str,
    seen: &HashSet<String>,
) -> Option<(String, BTreeSet<Slot>)> {
    let opt = |list: &[String]| -> Vec<Option<String>> {
        std::iter::once(None).chain(list.iter().cloned().map(Some)).collect()
    };
    for adjective in opt(&g.adjectives) {
        for time in opt(&g.times_of_day) {
            for weather in opt(&g.weathers) {
                for location in opt(&g.locations) {
                    let preps = if weather.is_some() || location.is_some() {
                        g.prepositions.iter().cloned().map(Some).collect()
                    } else {
                        vec![None]
                    };
                    for preposition in preps {
                        let choice = Choice {
                            adjective: adjective.as_deref(),
                            preposition: preposition.as_deref(),
                            weather: weather.as_deref(),
                            location: location.as_deref(),
                            time: time.as_deref(),
                        };
                        let (text, slots) = choice.render(class_label, token);
                        if !seen.contains(&text) {
                            return Some((text, slots));
                        }
                    }
                }
            }
        }
    }
    None
}

pub fn prompt_id(class_label: &str, index: usize) -> String {
    format!("{class_label}-{index:02}")
}

/// Extracts the prompt candidate from one response line, or `None` when the
/// line holds no `a photo of` phrase.
fn clean_line(line: &str) -> Option<String> {
    let lower = line.to_lowercase();
    let start = lower.find("a photo of")?;
    let mut s = &lower[start..];
    if let Some(end) = s.find(['"', '\'', '\u{201c}', '\u{201d}', '\u{2019}', '`']) {
        s = &s[..end];
    }
    if let Some(paren) = s.find('(') {
        s = &s[..paren];
    }
    let s = s.trim().trim_end_matches(['.', ',', ';', '!', ':']).trim();
    Some(s.split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Replaces whole-word occurrences of `class_label` by `token`.
fn substitute_class(text: &str, class_label: &str, token: &str) -> String {
    let class_lower = class_label.to_lowercase();
    let class_words: Vec<&str> = class_lower.split_whitespace().collect();
    let words: Vec<&str> = text.split_whitespace().collect();
    if class_words.is_empty() {
        return text.to_string();
    }
    let mut out: Vec<&str> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        if words[i..].starts_with(&class_words) {
            out.push(token);
            i += class_words.len();
        } else {
            out.push(words[i]);
            i += 1;
        }
    }
    out.join(" ")
}

/// Lenient parse with the shipped lexicon.
pub fn parse_llm_response(raw: &str, class_label: &str, token: &str) -> Vec<ClassPrompt> {
    parse_llm_response_with(
        raw,
        class_label,
        token,
        &PromptGrammar::default(),
        ValidationMode::Lenient,
    )
}

/// Pulls prompts out of a free-text model answer.
///
/// Each line containing `a photo of` is stripped of list markers, quotes,
/// trailing annotations and punctuation, lowercased, and has the class name
/// replaced by `token`. Lines that then validate under `mode` are kept, first
/// occurrence wins.
pub fn parse_llm_response_with(
    raw: &str,
    class_label: &str,
    token: &str,
    grammar: &PromptGrammar,
    mode: ValidationMode,
) -> Vec<ClassPrompt> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in raw.lines() {
        let Some(cleaned) = clean_line(line) else {
            continue;
        };
        let text = substitute_class(&cleaned, class_label, token);
        let Ok(slots) = validate_prompt(&text, token, grammar, mode) else {
            continue;
        };
        if seen.insert(text.clone()) {
            out.push(ClassPrompt {
                id: prompt_id(class_label, out.len()),
                class_label: class_label.to_string(),
                text,
                slots_used: slots,
                origin: Origin::Llm,
            });
        }
    }
    out
}

/// A text-to-text completion service.
pub trait TextClient: Send + Sync {
    fn complete(&self, instruction: &str, seed: u64) -> Result<String, String>;
}

#[derive(Debug, Clone, Copy)]
pub struct RequestOptions {
    /// Extra attempts after the first one.
    pub retries: u32,
    pub fallback: bool,
}

impl Default for RequestOptions {
    fn default() -> Self {
        Self {
            retries: 3,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PromptRequestOutcome {
    pub prompts: Vec<ClassPrompt>,
    /// Transport errors seen along the way, including ones recovered from.
    pub transport_errors: Vec<String>,
}

impl PromptRequestOutcome {
    pub fn fallback_count(&self) -> usize {
        self.prompts
            .iter()
            .filter(|p| p.origin == Origin::Fallback)
            .count()
    }
}

/// Asks `client` for prompts and tops up from the grammar generator.
///
/// The model is queried up to `1 + retries` times (attempt `i` uses seed
/// `seed + i`) until `num_prompts` distinct valid prompts are collected. Any
/// shortfall is filled with fallback prompts when enabled. With no client the
/// result is purely fallback.
pub fn request_prompts(
    client: Option<&dyn TextClient>,
    class_label: &str,
    token: &str,
    num_prompts: usize,
    seed: u64,
    options: RequestOptions,
) -> Result<PromptRequestOutcome, PromptError> {
    let instruction = build_llm_instruction(class_label, num_prompts)?;
    let grammar = PromptGrammar::default();
    let mut outcome = PromptRequestOutcome::default();
    let mut seen = HashSet::new();

    if let Some(client) = client {
        for attempt in 0..=options.retries {
            if outcome.prompts.len() >= num_prompts {
                break;
            }
            match client.complete(&instruction, seed.wrapping_add(attempt as u64)) {
                Ok(raw) => {
                    let parsed = parse_llm_response_with(
                        &raw,
                        class_label,
                        token,
                        &grammar,
                        ValidationMode::Lenient,
                    );
                    for p in parsed {
                        if seen.insert(p.text.clone()) {
                            outcome.prompts.push(p);
                        }
                    }
                }
                Err(e) => outcome.transport_errors.push(e),
            }
        }
        outcome.prompts.truncate(num_prompts);
    }

    let missing = num_prompts - outcome.prompts.len();
    if missing > 0 {
        if !options.fallback {
            return Err(match (outcome.prompts.is_empty(), outcome.transport_errors.last()) {
                (true, Some(e)) => PromptError::Transport(e.clone()),
                _ => PromptError::Insufficient {
                    got: outcome.prompts.len(),
                    wanted: num_prompts,
                },
            });
        }
        let pool = generate_with_grammar(
            class_label,
            token,
            num_prompts + seen.len(),
            seed,
            &grammar,
        )?;
        outcome
            .prompts
            .extend(pool.into_iter().filter(|p| !seen.contains(&p.text)).take(missing));
    }

    for (i, p) in outcome.prompts.iter_mut().enumerate() {
        p.id = prompt_id(class_label, i);
    }
    Ok(outcome)
}

/// Prompts of a run grouped by class, each group in generation order.
pub fn group_by_class(prompts: &[ClassPrompt]) -> BTreeMap<String, Vec<ClassPrompt>> {
    let mut map: BTreeMap<String, Vec<ClassPrompt>> = BTreeMap::new();
    for p in prompts {
        map.entry(p.class_label.clone()).or_default().push(p.clone());
    }
    map
}

pub fn save_prompts(prompts: &[ClassPrompt], path: &Path) -> Result<(), PromptError> {
    let mut text = serde_json::to_string_pretty(prompts)?;
    text.push('\n');
    seed::atomic_write(path, text.as_bytes()).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_prompts(path: &Path) -> Result<Vec<ClassPrompt>, PromptError> {
    let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
