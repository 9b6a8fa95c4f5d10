//! Hashtag grammar for regulated LLM responses and the validity filter that
//! turns raw responses into [`ParsedSemantics`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on words kept for type and visual answers.
pub const DEFAULT_WORD_CAP: usize = 12;

const DEFAULT_SPATIAL_TERMS: &str = include_str!("spatial_terms.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    #[serde(rename = "type")]
    ObjectType,
    #[serde(rename = "location")]
    SpatialLocation,
    #[serde(rename = "visual")]
    VisualPattern,
    #[serde(rename = "relation")]
    ObjectRelation,
}

impl FieldKind {
    /// Fixed order in which the fields are requested from the LLM.
    pub const ALL: [FieldKind; 4] =
        [FieldKind::ObjectType, FieldKind::SpatialLocation, FieldKind::VisualPattern, FieldKind::ObjectRelation];

    pub fn key(self) -> &'static str {
        match self {
            FieldKind::ObjectType => "type",
            FieldKind::SpatialLocation => "location",
            FieldKind::VisualPattern => "visual",
            FieldKind::ObjectRelation => "relation",
        }
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for FieldKind {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "type" => Ok(FieldKind::ObjectType),
            "location" => Ok(FieldKind::SpatialLocation),
            "visual" => Ok(FieldKind::VisualPattern),
            "relation" => Ok(FieldKind::ObjectRelation),
            other => Err(GrammarError::UnknownField(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("unknown field kind {0:?}")]
    UnknownField(String),
    #[error("line {line}: expected `surface=canonical`, got {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("line {line}: {target:?} is not a canonical spatial term")]
    UnknownCanonical { line: usize, target: String },
    #[error("reading dictionary: {0}")]
    Io(#[from] std::io::Error),
}

/// The four raw LLM responses, one per field.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructuredDescription {
    object_type: String,
    location: String,
    visual: String,
    relation: String,
}

impl StructuredDescription {
    pub fn new(
        object_type: impl Into<String>,
        location: impl Into<String>,
        visual: impl Into<String>,
        relation: impl Into<String>,
    ) -> Self {
        Self {
            object_type: object_type.into(),
            location: location.into(),
            visual: visual.into(),
            relation: relation.into(),
        }
    }

    pub fn get(&self, kind: FieldKind) -> &str {
        match kind {
            FieldKind::ObjectType => &self.object_type,
            FieldKind::SpatialLocation => &self.location,
            FieldKind::VisualPattern => &self.visual,
            FieldKind::ObjectRelation => &self.relation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
    Size,
    /// Closeness to the image center; horizontal only unless `vertical` is set.
    Center {
        vertical: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    /// Relevance grows with the coordinate (right, bottom, large).
    Positive,
    /// Relevance grows as the coordinate shrinks (left, top, small).
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialSense {
    pub axis: Axis,
    pub polarity: Polarity,
}

const CANONICAL_TERMS: [(&str, SpatialSense); 9] = [
    ("left", SpatialSense { axis: Axis::Horizontal, polarity: Polarity::Negative }),
    ("right", SpatialSense { axis: Axis::Horizontal, polarity: Polarity::Positive }),
    ("top", SpatialSense { axis: Axis::Vertical, polarity: Polarity::Negative }),
    ("bottom", SpatialSense { axis: Axis::Vertical, polarity: Polarity::Positive }),
    ("center", SpatialSense { axis: Axis::Center { vertical: false }, polarity: Polarity::Positive }),
    ("middle", SpatialSense { axis: Axis::Center { vertical: true }, polarity: Polarity::Positive }),
    ("close", SpatialSense { axis: Axis::Size, polarity: Polarity::Positive }),
    ("near", SpatialSense { axis: Axis::Size, polarity: Polarity::Positive }),
    ("far", SpatialSense { axis: Axis::Size, polarity: Polarity::Negative }),
];

/// Closed dictionary of spatial terms. Lookups of unknown surface forms fail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialTermDict {
    entries: BTreeMap<String, SpatialSense>,
    synonyms: BTreeMap<String, String>,
}

impl Default for SpatialTermDict {
    fn default() -> Self {
        Self::parse(DEFAULT_SPATIAL_TERMS).expect("embedded spatial dictionary is valid")
    }
}

impl SpatialTermDict {
    /// Parses `surface=canonical` lines on top of the built-in canonical terms.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, GrammarError> {
        let entries: BTreeMap<String, SpatialSense> =
            CANONICAL_TERMS.iter().map(|(t, s)| (t.to_string(), *s)).collect();
        let mut synonyms = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((surface, target)) = line.split_once('=') else {
                return Err(GrammarError::MalformedLine { line: i + 1, text: raw.to_string() });
            };
            let surface = normalize_words(surface);
            let target = target.trim().to_lowercase();
            if surface.is_empty() {
                return Err(GrammarError::MalformedLine { line: i + 1, text: raw.to_string() });
            }
            if !entries.contains_key(&target) {
                return Err(GrammarError::UnknownCanonical { line: i + 1, target });
            }
            if surface != target {
                synonyms.insert(surface, target);
            }
        }
        Ok(Self { entries, synonyms })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GrammarError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Resolves a surface form to its canonical term.
    pub fn canonical(&self, surface: &str) -> Option<&str> {
        let key = normalize_words(surface);
        if let Some((term, _)) = self.entries.get_key_value(&key) {
            return Some(term.as_str());
        }
        self.synonyms.get(&key).map(String::as_str)
    }

    /// Axis and polarity of a canonical term.
    pub fn sense(&self, canonical: &str) -> Option<SpatialSense> {
        self.entries.get(canonical).copied()
    }

    pub fn canonical_terms(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn synonyms(&self) -> impl Iterator<Item = (&str, &str)> {
        self.synonyms.iter().map(|(s, c)| (s.as_str(), c.as_str()))
    }
}

/// Validated object semantics. Absent fields mean the factor is skipped.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedSemantics {
    #[serde(rename = "type")]
    pub object_type: Option<String>,
    pub location: Option<Vec<String>>,
    pub visual: Option<String>,
    pub relation: Option<String>,
}

impl ParsedSemantics {
    pub fn is_field_present(&self, kind: FieldKind) -> bool {
        match kind {
            FieldKind::ObjectType => self.object_type.is_some(),
            FieldKind::SpatialLocation => self.location.is_some(),
            FieldKind::VisualPattern => self.visual.is_some(),
            FieldKind::ObjectRelation => self.relation.is_some(),
        }
    }

    /// Re-serializes into single-segment responses (`#value`, or empty when absent).
    pub fn to_responses(&self) -> StructuredDescription {
        let tag = |v: Option<&String>| v.map(|s| format!("#{s}")).unwrap_or_default();
        StructuredDescription::new(
            tag(self.object_type.as_ref()),
            self.location.as_ref().map(|t| format!("#{}", t.join(" "))).unwrap_or_default(),
            tag(self.visual.as_ref()),
            tag(self.relation.as_ref()),
        )
    }
}

/// Returns the trimmed, non-empty segments that follow each `#`.
/// Text before the first `#` is discarded.
pub fn split_hashtag(raw: &str) -> Vec<&str> {
    raw.split('#').skip(1).map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn normalize_words(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn is_none_marker(s: &str) -> bool {
    s.eq_ignore_ascii_case("none")
}

/// Strips wrapping quotes/markdown and cuts at the first sentence terminator,
/// comma, or line break.
fn cut_explanation(segment: &str) -> &str {
    let s = segment.trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*') || c.is_whitespace());
    let end = s.find(['.', ',', '\n']).unwrap_or(s.len());
    s[..end].trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*') || c.is_whitespace())
}

/// Validity filter over parsed segments.
#[derive(Debug, Clone)]
pub struct FlmParser {
    dict: SpatialTermDict,
    word_cap: usize,
}

impl Default for FlmParser {
    fn default() -> Self {
        Self::new(SpatialTermDict::default(), DEFAULT_WORD_CAP)
    }
}

impl FlmParser {
    pub fn new(dict: SpatialTermDict, word_cap: usize) -> Self {
        Self { dict, word_cap }
    }

    pub fn dict(&self) -> &SpatialTermDict {
        &self.dict
    }

    pub fn word_cap(&self) -> usize {
        self.word_cap
    }

    /// Canonical spatial terms found in a location segment, in order, deduplicated.
    pub fn spatial_terms(&self, segment: &str) -> Vec<String> {
        let cut = cut_explanation(segment);
        if is_none_marker(cut) {
            return Vec::new();
        }
        if let Some(term) = self.dict.canonical(cut) {
            return vec![term.to_string()];
        }
        let mut terms: Vec<String> = Vec::new();
        for token in cut.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            if let Some(term) = self.dict.canonical(token) {
                if !terms.iter().any(|t| t == term) {
                    terms.push(term.to_string());
                }
            }
        }
        terms
    }

    /// Applies the validity filter to one segment.
    ///
    /// Location segments yield their canonical terms joined by single spaces.
    pub fn filter_segment(&self, segment: &str, kind: FieldKind) -> Option<String> {
        if is_none_marker(segment.trim()) {
            return None;
        }
        if kind == FieldKind::SpatialLocation {
            let terms = self.spatial_terms(segment);
            return (!terms.is_empty()).then(|| terms.join(" "));
        }
        let text = normalize_words(cut_explanation(segment));
        if text.is_empty() || is_none_marker(&text) || text.contains('#') {
            return None;
        }
        // Relations are legitimately phrases, so only type and visual are capped.
        if kind != FieldKind::ObjectRelation && text.split(' ').count() > self.word_cap {
            return None;
        }
        Some(text)
    }

    /// A field with any "none" segment is absent as a whole, whatever else it says.
    pub fn parse(&self, s: &StructuredDescription) -> ParsedSemantics {
        let segments = |kind: FieldKind| {
            let segs = split_hashtag(s.get(kind));
            if segs.iter().any(|seg| is_none_marker(cut_explanation(seg))) {
                Vec::new()
            } else {
                segs
            }
        };
        let first_valid = |kind: FieldKind| segments(kind).into_iter().find_map(|seg| self.filter_segment(seg, kind));
        let mut location: Vec<String> = Vec::new();
        for seg in segments(FieldKind::SpatialLocation) {
            for term in self.spatial_terms(seg) {
                if !location.contains(&term) {
                    location.push(term);
                }
            }
        }
        ParsedSemantics {
            object_type: first_valid(FieldKind::ObjectType),
            location: (!location.is_empty()).then_some(location),
            visual: first_valid(FieldKind::VisualPattern),
            relation: first_valid(FieldKind::ObjectRelation),
        }
    }
}

/// Filters one segment with the default word cap.
pub fn filter_segment(segment: &str, kind: FieldKind, dict: &SpatialTermDict) -> Option<String> {
    FlmParser::new(dict.clone(), DEFAULT_WORD_CAP).filter_segment(segment, kind)
}

/// Parses four raw responses with the default word cap.
pub fn parse_structured(s: &StructuredDescription, dict: &SpatialTermDict) -> ParsedSemantics {
    FlmParser::new(dict.clone(), DEFAULT_WORD_CAP).parse(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict() -> SpatialTermDict {
        SpatialTermDict::default()
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_hashtag("# Person"), vec!["Person"]);
        assert!(split_hashtag("the object is a dog").is_empty());
        assert_eq!(split_hashtag("#bottom #left extra"), vec!["bottom", "left extra"]);
        assert_eq!(split_hashtag("preamble #a ## #  #b"), vec!["a", "b"]);
    }

    #[test]
    fn filter_examples() {
        let d = dict();
        assert_eq!(filter_segment("Person", FieldKind::ObjectType, &d).as_deref(), Some("person"));
        assert_eq!(filter_segment("xyzzy", FieldKind::SpatialLocation, &d), None);
        assert_eq!(filter_segment("None", FieldKind::VisualPattern, &d), None);
        assert_eq!(filter_segment("  NONE ", FieldKind::ObjectRelation, &d), None);
        assert_eq!(filter_segment("None.", FieldKind::ObjectType, &d), None);
    }

    #[test]
    fn verbose_tails_are_cut() {
        let d = dict();
        assert_eq!(
            filter_segment("Car. It is a vehicle commonly seen on roads", FieldKind::ObjectType, &d).as_deref(),
            Some("car")
        );
        assert_eq!(filter_segment("Red, and also quite shiny", FieldKind::VisualPattern, &d).as_deref(), Some("red"));
        assert_eq!(
            filter_segment("under the tree\nbecause it is shaded", FieldKind::ObjectRelation, &d).as_deref(),
            Some("under the tree")
        );
        assert_eq!(filter_segment("Left. Not the right one", FieldKind::SpatialLocation, &d).as_deref(), Some("left"));
    }

    #[test]
    fn word_cap_spares_relations() {
        let d = dict();
        let long = "one two three four five six seven eight nine ten eleven twelve thirteen";
        assert_eq!(filter_segment(long, FieldKind::ObjectType, &d), None);
        assert_eq!(filter_segment(long, FieldKind::VisualPattern, &d), None);
        assert_eq!(filter_segment(long, FieldKind::ObjectRelation, &d).as_deref(), Some(long));
        let twelve = "one two three four five six seven eight nine ten eleven twelve";
        assert!(filter_segment(twelve, FieldKind::VisualPattern, &d).is_some());
    }

    #[test]
    fn spatial_synonyms_and_tokens() {
        let p = FlmParser::default();
        assert_eq!(p.spatial_terms("bottom-left"), vec!["bottom", "left"]);
        assert_eq!(p.spatial_terms("Upper Leftmost"), vec!["top", "left"]);
        assert_eq!(p.spatial_terms("in the front"), vec!["close"]);
        assert_eq!(p.spatial_terms("left left"), vec!["left"]);
        assert!(p.spatial_terms("somewhere").is_empty());
    }

    #[test]
    fn parse_examples() {
        let d = dict();
        let got = parse_structured(&StructuredDescription::new("#Car", "#Left", "#Black", "#None"), &d);
        assert_eq!(
            got,
            ParsedSemantics {
                object_type: Some("car".into()),
                location: Some(vec!["left".into()]),
                visual: Some("black".into()),
                relation: None,
            }
        );
        assert_eq!(parse_structured(&StructuredDescription::default(), &d), ParsedSemantics::default());
        let got = parse_structured(
            &StructuredDescription::new("#woman", "#bottom left", "#wearing a red shirt", "#sitting on the bench"),
            &d,
        );
        assert_eq!(got.object_type.as_deref(), Some("woman"));
        assert_eq!(got.location, Some(vec!["bottom".to_string(), "left".to_string()]));
        assert_eq!(got.visual.as_deref(), Some("wearing a red shirt"));
        assert_eq!(got.relation.as_deref(), Some("sitting on the bench"));
    }

    #[test]
    fn multi_segment_fields() {
        let d = dict();
        let got = parse_structured(
            &StructuredDescription::new(
                "#it is probably some kind of animal that I cannot name with any certainty #dog #cat",
                "#bottom #xyz #left",
                "#",
                "#None #red",
            ),
            &d,
        );
        assert_eq!(got.object_type.as_deref(), Some("dog"));
        assert_eq!(got.relation, None);
        assert_eq!(got.location, Some(vec!["bottom".to_string(), "left".to_string()]));
        assert_eq!(got.visual, None);
    }

    #[test]
    fn dictionary_file_format() {
        let d = SpatialTermDict::parse("# comment\nport = left\n\nstarboard=right\n").unwrap();
        assert_eq!(d.canonical("Port"), Some("left"));
        assert_eq!(d.canonical("left"), Some("left"));
        assert_eq!(d.canonical("leftmost"), None);
        assert!(matches!(SpatialTermDict::parse("up=skyward"), Err(GrammarError::UnknownCanonical { line: 1, .. })));
        assert!(matches!(SpatialTermDict::parse("no equals"), Err(GrammarError::MalformedLine { .. })));
    }

    #[test]
    fn default_dict_is_closed() {
        let d = dict();
        for (surface, canonical) in d.synonyms() {
            assert!(d.sense(canonical).is_some(), "{surface} -> {canonical}");
        }
        assert_eq!(d.canonical_terms().count(), 9);
    }

    fn valid_text() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-z]{1,8}", 1..5).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn no_hashtags_and_closed_locations(
            t in ".{0,60}", l in ".{0,60}", v in ".{0,60}", r in ".{0,60}"
        ) {
            let d = dict();
            let p = parse_structured(&StructuredDescription::new(t, l, v, r), &d);
            for f in [&p.object_type, &p.visual, &p.relation].into_iter().flatten() {
                prop_assert!(!f.contains('#'));
                prop_assert!(!f.trim().is_empty());
            }
            if let Some(terms) = &p.location {
                prop_assert!(!terms.is_empty());
                for term in terms {
                    prop_assert!(d.sense(term).is_some());
                }
            }
        }

        #[test]
        fn none_absorbs(pad_l in "[ \t]{0,3}", pad_r in "[ \t]{0,3}", upper in proptest::bool::ANY) {
            let word = if upper { "NoNe" } else { "none" };
            let seg = format!("{pad_l}{word}{pad_r}");
            let d = dict();
            for kind in FieldKind::ALL {
                prop_assert_eq!(filter_segment(&seg, kind, &d), None);
            }
        }

        #[test]
        fn none_segment_absorbs_whole_field(other in "[a-z]{1,8}( [a-z]{1,8}){0,2}", before in proptest::bool::ANY) {
            let raw = if before { format!("#None #{other}") } else { format!("#{other} # none") };
            let parsed = parse_structured(&StructuredDescription::new(raw.clone(), raw.clone(), raw.clone(), raw), &dict());
            prop_assert_eq!(parsed, ParsedSemantics::default());
        }

        #[test]
        fn reserialized_semantics_reparse(
            t in valid_text(), v in valid_text(), r in valid_text(),
            loc in proptest::sample::subsequence(vec!["left", "right", "top", "bottom", "center", "far"], 0..3)
        ) {
            let d = dict();
            let s = StructuredDescription::new(
                format!("#{t}"),
                if loc.is_empty() { String::new() } else { format!("#{}", loc.join(" ")) },
                format!("#{v}"),
                format!("#{r}"),
            );
            let once = parse_structured(&s, &d);
            let twice = parse_structured(&once.to_responses(), &d);
            prop_assert_eq!(once, twice);
        }
    }
}
