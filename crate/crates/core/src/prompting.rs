//! System and instance prompts that steer the LLM into the hashtag grammar,
//! plus composition of region-text scoring prompts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::grammar::FieldKind;

pub const SYSTEM_PROMPT: &str = "You are an assistant that helps formulate a formal language model. \
This model describes a referred object based on textual descriptions and a given image. \
In this model, a referred object is characterized by its object type, spatial location, visual patterns, \
and its relationships with other objects in the scene. \
For example, for a description like 'a woman with a red shirt sitting on the bench bottom left,' \
your responses should be '#woman' for the object type, '#bottom left' for the spatial location, \
'#wearing a red shirt' for visual patterns, and '#sitting on the bench' for its relation with other objects.";

const PHRASE_SLOT: &str = "{phrase}";
const ANSWER_RULE: &str = "The answer must start with a #.";

const TYPE_TEMPLATE: &str = "The description of an object in an image is '{phrase}'. \
Tell me the type of the object described. The answer must start with a #.";
const LOCATION_TEMPLATE: &str = "The description of an object in an image is '{phrase}'. \
Tell me the spatial location of the object described. If it is not mentioned, answer None. \
The answer must start with a #.";
const VISUAL_TEMPLATE: &str = "The description of an object in an image is '{phrase}'. \
Tell me the visual patterns of the object described. If they are not mentioned, answer None. \
The answer must start with a #.";
const RELATION_TEMPLATE: &str = "The description of an object in an image is '{phrase}'. \
Tell me its relation to surrounding objects. If it is not mentioned, answer None. \
The answer must start with a #.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("referring phrase is empty")]
    EmptyPhrase,
    #[error("referring phrase must not contain '#': {0:?}")]
    HashInPhrase(String),
    #[error("scoring prompt needs a non-empty component")]
    EmptyComponent,
    #[error("template for {kind}: {reason}")]
    BadTemplate { kind: FieldKind, reason: String },
    #[error("template file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("reading template file: {0}")]
    Io(#[from] std::io::Error),
}

/// System prompt plus one instance prompt per requested field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub system: String,
    pub instance: BTreeMap<FieldKind, String>,
}

/// Instance-prompt templates keyed by field; `{phrase}` marks the slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<FieldKind, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let templates = [
            (FieldKind::ObjectType, TYPE_TEMPLATE),
            (FieldKind::SpatialLocation, LOCATION_TEMPLATE),
            (FieldKind::VisualPattern, VISUAL_TEMPLATE),
            (FieldKind::ObjectRelation, RELATION_TEMPLATE),
        ]
        .into_iter()
        .map(|(k, t)| (k, t.to_string()))
        .collect();
        Self { templates }
    }
}

impl PromptTemplates {
    /// Parses `kind=template` lines (`type`, `location`, `visual`, `relation`).
    /// Kinds not listed keep their default template.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut out = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            let (key, template) = line
                .split_once('=')
                .ok_or_else(|| PromptError::Malformed { line: i + 1, reason: "expected `kind=template`".into() })?;
            let kind: FieldKind = key.parse().map_err(|_| PromptError::Malformed {
                line: i + 1,
                reason: format!("unknown field kind {:?}", key.trim()),
            })?;
            out.set(kind, template.trim())?;
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, kind: FieldKind, template: &str) -> Result<(), PromptError> {
        let bad = |reason: &str| PromptError::BadTemplate { kind, reason: reason.to_string() };
        if template.matches(PHRASE_SLOT).count() != 1 {
            return Err(bad("must contain exactly one {phrase} slot"));
        }
        if template.matches('#').count() != 1 || !template.ends_with(ANSWER_RULE) {
            return Err(bad("must end with the answer rule and contain no other '#'"));
        }
        self.templates.insert(kind, template.to_string());
        Ok(())
    }

    pub fn instance(&self, kind: FieldKind, phrase: &str) -> Result<String, PromptError> {
        let phrase = phrase.trim();
        if phrase.is_empty() {
            return Err(PromptError::EmptyPhrase);
        }
        if phrase.contains('#') {
            return Err(PromptError::HashInPhrase(phrase.to_string()));
        }
        Ok(self.templates[&kind].replace(PHRASE_SLOT, phrase))
    }

    pub fn bundle(&self, phrase: &str, kinds: &[FieldKind]) -> Result<PromptBundle, PromptError> {
        let instance = kinds.iter().map(|&k| Ok((k, self.instance(k, phrase)?))).collect::<Result<_, PromptError>>()?;
        Ok(PromptBundle { system: build_system_prompt(), instance })
    }
}

pub fn build_system_prompt() -> String {
    SYSTEM_PROMPT.to_string()
}

pub fn build_instance_prompt(kind: FieldKind, phrase: &str) -> Result<String, PromptError> {
    PromptTemplates::default().instance(kind, phrase)
}

/// Which text-scored factor a scoring prompt is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TextFactor {
    Visual,
    Relation,
}

impl TextFactor {
    pub fn field(self) -> FieldKind {
        match self {
            TextFactor::Visual => FieldKind::VisualPattern,
            TextFactor::Relation => FieldKind::ObjectRelation,
        }
    }
}

/// Stacks the object type and one component into a scoring sentence:
/// `a {visual} {type}` for visual patterns, `a {type} {relation}` for relations.
pub fn compose_scoring_prompt(
    object_type: Option<&str>,
    component: &str,
    kind: TextFactor,
) -> Result<String, PromptError> {
    let words = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let component = words(component);
    if component.is_empty() {
        return Err(PromptError::EmptyComponent);
    }
    let object_type = object_type.map(words).filter(|t| !t.is_empty());
    Ok(match (object_type, kind) {
        (None, _) => component,
        (Some(t), TextFactor::Visual) => format!("a {component} {t}"),
        (Some(t), TextFactor::Relation) => format!("a {t} {component}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_prompt_is_stable() {
        let s = build_system_prompt();
        assert!(s.starts_with("You are an assistant that helps formulate a formal language model."));
        assert!(s.contains("'#bottom left' for the spatial location"));
        assert!(s.contains("'#woman' for the object type"));
        assert_eq!(s, build_system_prompt());
    }

    #[test]
    fn type_prompt_matches_printed_form() {
        assert_eq!(
            build_instance_prompt(FieldKind::ObjectType, "person bottom-left").unwrap(),
            "The description of an object in an image is 'person bottom-left'. \
             Tell me the type of the object described. The answer must start with a #."
        );
    }

    #[test]
    fn every_instance_prompt_has_one_hash_and_the_phrase() {
        for kind in FieldKind::ALL {
            let p = build_instance_prompt(kind, "black car on the left").unwrap();
            assert!(p.contains("'black car on the left'"));
            assert!(p.ends_with("The answer must start with a #."));
            assert_eq!(p.matches('#').count(), 1, "{kind}");
        }
        let loc = build_instance_prompt(FieldKind::SpatialLocation, "x").unwrap();
        assert!(loc.contains("Tell me the spatial location"));
        let rel = build_instance_prompt(FieldKind::ObjectRelation, "x").unwrap();
        assert!(rel.contains("Tell me its relation to surrounding objects"));
    }

    #[test]
    fn bad_phrases_rejected() {
        assert!(matches!(build_instance_prompt(FieldKind::ObjectRelation, ""), Err(PromptError::EmptyPhrase)));
        assert!(matches!(build_instance_prompt(FieldKind::ObjectType, "   "), Err(PromptError::EmptyPhrase)));
        assert!(matches!(build_instance_prompt(FieldKind::ObjectType, "#car"), Err(PromptError::HashInPhrase(_))));
    }

    #[test]
    fn template_overrides() {
        let t =
            PromptTemplates::parse("type=Phrase: '{phrase}'. What is it? The answer must start with a #.\n").unwrap();
        assert_eq!(
            t.instance(FieldKind::ObjectType, "dog").unwrap(),
            "Phrase: 'dog'. What is it? The answer must start with a #."
        );
        assert_eq!(
            t.instance(FieldKind::VisualPattern, "dog").unwrap(),
            build_instance_prompt(FieldKind::VisualPattern, "dog").unwrap()
        );
        assert!(PromptTemplates::parse("visual=no slot here. The answer must start with a #.").is_err());
        assert!(PromptTemplates::parse("color={phrase} The answer must start with a #.").is_err());
        assert!(PromptTemplates::parse("type={phrase} #extra The answer must start with a #.").is_err());
    }

    #[test]
    fn scoring_prompts() {
        assert_eq!(compose_scoring_prompt(Some("car"), "black", TextFactor::Visual).unwrap(), "a black car");
        assert_eq!(
            compose_scoring_prompt(Some("woman"), "sitting on the bench", TextFactor::Relation).unwrap(),
            "a woman sitting on the bench"
        );
        assert_eq!(compose_scoring_prompt(None, "black", TextFactor::Visual).unwrap(), "black");
        assert_eq!(compose_scoring_prompt(Some("Car"), "  Black  ", TextFactor::Visual).unwrap(), "a black car");
        assert!(matches!(
            compose_scoring_prompt(Some("car"), " ", TextFactor::Relation),
            Err(PromptError::EmptyComponent)
        ));
    }

    #[test]
    fn visual_and_relation_prompts_differ() {
        let v = compose_scoring_prompt(Some("dog"), "brown", TextFactor::Visual).unwrap();
        let r = compose_scoring_prompt(Some("dog"), "under the table", TextFactor::Relation).unwrap();
        assert_ne!(v, r);
    }
}
