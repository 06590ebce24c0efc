//! Per-class attribute phrase sets, their on-disk format, LLM prompt
//! templates, and deliberate corruption for attribute-quality ablations.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CLASS_PLACEHOLDER: &str = "{class_name}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    #[serde(default)]
    pub prompt_template: String,
    #[serde(default)]
    pub source_model: String,
    #[serde(default = "epoch")]
    pub created_at: DateTime<Utc>,
}

fn epoch() -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH
}

impl Default for BankMeta {
    fn default() -> Self {
        Self { prompt_template: String::new(), source_model: String::new(), created_at: epoch() }
    }
}

/// Ordered classes with their attribute phrases. The position of a class in
/// `classes` is its class index everywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBank {
    classes: Vec<String>,
    attributes: Vec<Vec<String>>,
    pub meta: BankMeta,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    #[serde(default)]
    meta: BankMeta,
    classes: Vec<String>,
    attributes: Map<String, Value>,
}

impl AttributeBank {
    /// Normalizes phrases (surrounding whitespace trimmed, case kept) and
    /// validates the bank invariants.
    pub fn new(classes: Vec<String>, attributes: Vec<Vec<String>>, meta: BankMeta) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::validation("attribute bank has no classes"));
        }
        if classes.len() != attributes.len() {
            return Err(Error::validation(format!(
                "{} classes but {} attribute lists",
                classes.len(),
                attributes.len()
            )));
        }
        let mut seen_classes = HashSet::new();
        let mut normalized = Vec::with_capacity(attributes.len());
        for (class, phrases) in classes.iter().zip(attributes) {
            if class.trim().is_empty() {
                return Err(Error::validation("empty class name"));
            }
            if !seen_classes.insert(class.as_str()) {
                return Err(Error::validation(format!("duplicate class '{class}'")));
            }
            if phrases.is_empty() {
                return Err(Error::validation(format!("class '{class}' has no attributes")));
            }
            let mut seen = HashSet::new();
            let mut list = Vec::with_capacity(phrases.len());
            for phrase in phrases {
                let p = phrase.trim().to_string();
                if p.is_empty() {
                    return Err(Error::validation(format!("class '{class}' has an empty attribute phrase")));
                }
                if !seen.insert(p.clone()) {
                    return Err(Error::validation(format!("class '{class}' lists attribute '{p}' more than once")));
                }
                list.push(p);
            }
            normalized.push(list);
        }
        Ok(Self { classes, attributes: normalized, meta })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn attributes(&self, class_idx: usize) -> &[String] {
        &self.attributes[class_idx]
    }

    pub fn all_attributes(&self) -> &[Vec<String>] {
        &self.attributes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn min_attributes(&self) -> usize {
        self.attributes.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut attributes = Map::new();
        for (c, phrases) in self.classes.iter().zip(&self.attributes) {
            attributes.insert(c.clone(), Value::from(phrases.clone()));
        }
        let file = BankFile { meta: self.meta.clone(), classes: self.classes.clone(), attributes };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let file: BankFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        let mut attributes = Vec::with_capacity(file.classes.len());
        for class in &file.classes {
            let value = file
                .attributes
                .get(class)
                .ok_or_else(|| Error::validation(format!("class '{class}' has no attribute list")))?;
            let list = value
                .as_array()
                .ok_or_else(|| Error::validation(format!("attributes of '{class}' must be an array")))?
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::validation(format!("non-string attribute in class '{class}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            attributes.push(list);
        }
        if let Some(extra) = file.attributes.keys().find(|k| !file.classes.contains(k)) {
            return Err(Error::validation(format!("attribute list for unknown class '{extra}'")));
        }
        Self::new(file.classes, attributes, file.meta)
    }

    /// Content hash of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let text = self.to_json_string().expect("bank serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

pub fn load_bank(path: &Path) -> Result<AttributeBank> {
    let text = fs::read_to_string(path)?;
    AttributeBank::from_json_str(&text, path)
}

pub fn save_bank(bank: &AttributeBank, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bank.to_json_string()?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    template: String,
    pub dataset_tag: String,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>, dataset_tag: impl Into<String>) -> Result<Self> {
        let template = template.into();
        match template.matches(CLASS_PLACEHOLDER).count() {
            1 => Ok(Self { template, dataset_tag: dataset_tag.into() }),
            0 => Err(Error::validation(format!("prompt template lacks the {CLASS_PLACEHOLDER} placeholder"))),
            n => Err(Error::validation(format!("prompt template contains {CLASS_PLACEHOLDER} {n} times"))),
        }
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// Generic attribute-listing prompt.
    pub fn generic() -> Self {
        Self::new("List visually descriptive attributes of {class_name}.", "generic").unwrap()
    }

    /// Dataset-specific prompts that request short two-word phrases.
    pub fn preset(dataset_tag: &str) -> Option<Self> {
        const SUFFIX: &str = "Make sure the phrases are not long descriptions.";
        let body = match dataset_tag {
            "waterbirds" => "List 100 distinct two-word phrases that uniquely describe the visual characteristics (like type of feet, beak, wings, plumage, feathers, feather texture, body shape, body type etc) of {class_name}.".to_string(),
            "cifar100" => "List 50 distinct two-word phrases that uniquely describe the visual characteristics (like shape, color, texture) of {class_name}.".to_string(),
            "pacs" => "List 30 distinct two-word phrases that uniquely describe the visual characteristics of {class_name}. Do not describe their colors.".to_string(),
            "celeba" => "List 25 distinct two-word phrases that uniquely describe the visual characteristics of {class_name} hair person.".to_string(),
            "cats_dogs" => "List 50 distinct two-word phrases that uniquely describe the visual characteristics of {class_name}.".to_string(),
            "domainnet" | "imagenet" => "List 100 distinct two-word phrases that uniquely describe the visual characteristics of {class_name}.".to_string(),
            "generic" => return Some(Self::generic()),
            _ => return None,
        };
        Some(Self::new(format!("{body} {SUFFIX}"), dataset_tag).unwrap())
    }
}

pub fn render_prompt(tpl: &PromptTemplate, class_name: &str) -> String {
    tpl.template.replacen(CLASS_PLACEHOLDER, class_name, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Each class receives phrases borrowed from other classes.
    Irrelevant,
    /// Each class loses phrases.
    Insufficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub count: usize,
    pub seed: u64,
}

/// Returns a corrupted copy; the input bank is left untouched.
pub fn corrupt_bank(bank: &AttributeBank, spec: &CorruptionSpec) -> Result<AttributeBank> {
    if spec.count == 0 {
        return Err(Error::validation("corruption count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(bank.num_classes());
    match spec.mode {
        CorruptionMode::Irrelevant => {
            if bank.num_classes() < 2 {
                return Err(Error::validation("irrelevant corruption needs at least two classes"));
            }
            for (c, own) in bank.attributes.iter().enumerate() {
                let own_set: HashSet<&str> = own.iter().map(String::as_str).collect();
                let mut seen = HashSet::new();
                let pool: Vec<&String> = bank
                    .attributes
                    .iter()
                    .enumerate()
                    .filter(|(o, _)| *o != c)
                    .flat_map(|(_, p)| p)
                    .filter(|p| !own_set.contains(p.as_str()) && seen.insert(p.as_str()))
                    .collect();
                if pool.len() < spec.count {
                    return Err(Error::validation(format!(
                        "class '{}' has only {} donor phrases, {} requested",
                        bank.classes[c],
                        pool.len(),
                        spec.count
                    )));
                }
                let mut list = own.clone();
                list.extend(pool.choose_multiple(&mut rng, spec.count).map(|p| (*p).clone()));
                out.push(list);
            }
        }
        CorruptionMode::Insufficient => {
            for (c, own) in bank.attributes.iter().enumerate() {
                if spec.count >= own.len() {
                    return Err(Error::validation(format!(
                        "cannot remove {} of {} attributes from class '{}'",
                        spec.count,
                        own.len(),
                        bank.classes[c]
                    )));
                }
                let mut idx: Vec<usize> = (0..own.len()).collect();
                idx.shuffle(&mut rng);
                let mut keep: Vec<usize> = idx[spec.count..].to_vec();
                keep.sort_unstable();
                out.push(keep.into_iter().map(|i| own[i].clone()).collect());
            }
        }
    }
    AttributeBank::new(bank.classes.clone(), out, bank.meta.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(k: usize) -> AttributeBank {
        let classes = vec!["landbird".to_string(), "waterbird".to_string()];
        let attrs = classes.iter().map(|c| (0..k).map(|i| format!("{c} trait {i}")).collect()).collect();
        AttributeBank::new(classes, attrs, BankMeta::default()).unwrap()
    }

    #[test]
    fn load_bank_preserves_class_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.json");
        let land: Vec<String> = (0..10).map(|i| format!("thin whiskers {i}")).collect();
        let water: Vec<String> = (0..10).map(|i| format!("webbed feet {i}")).collect();
        let text = serde_json::json!({
            "meta": {"prompt_template": "", "source_model": "gpt-3", "created_at": "2024-01-01T00:00:00Z"},
            "classes": ["waterbird", "landbird"],
            "attributes": {"landbird": land, "waterbird": water}
        });
        fs::write(&p, text.to_string()).unwrap();
        let b = load_bank(&p).unwrap();
        assert_eq!(b.classes(), &["waterbird", "landbird"]);
        assert_eq!(b.num_classes(), 2);
        assert!(b.all_attributes().iter().all(|a| a.len() == 10));
        assert_eq!(b.attributes(0)[0], "webbed feet 0");
    }

    #[test]
    fn duplicate_phrase_is_rejected() {
        let err = AttributeBank::new(vec!["a".into()], vec![vec!["x y".into(), " x y ".into()]], BankMeta::default())
            .unwrap_err();
        assert!(err.to_string().contains("'a'"), "{err}");
    }

    #[test]
    fn empty_class_list_is_rejected() {
        let p = Path::new("mem");
        let text = r#"{"classes":["a","b"],"attributes":{"a":["x"],"b":[]}}"#;
        let err = AttributeBank::from_json_str(text, p).unwrap_err();
        assert!(err.to_string().contains("'b'"));
        assert!(AttributeBank::from_json_str(r#"{"classes":["a"],"attributes":{"a":["  "]}}"#, p).is_err());
        assert!(AttributeBank::from_json_str("not json", p).is_err());
    }

    #[test]
    fn phrases_are_trimmed_and_case_preserved() {
        let b = AttributeBank::new(vec!["c".into()], vec![vec!["  Red Beak ".into()]], BankMeta::default()).unwrap();
        assert_eq!(b.attributes(0), &["Red Beak"]);
    }

    #[test]
    fn shared_phrases_across_classes_are_allowed() {
        let b = AttributeBank::new(
            vec!["cat".into(), "dog".into()],
            vec![vec!["pointy ears".into()], vec!["pointy ears".into()]],
            BankMeta::default(),
        );
        assert!(b.is_ok());
    }

    #[test]
    fn render_prompt_substitutes_placeholder() {
        let t = PromptTemplate::new("List visually descriptive attributes of {class_name}.", "x").unwrap();
        assert_eq!(render_prompt(&t, "dog"), "List visually descriptive attributes of dog.");
        assert_eq!(render_prompt(&t, ""), "List visually descriptive attributes of .");
        let wb = PromptTemplate::preset("waterbirds").unwrap();
        let s = render_prompt(&wb, "waterbird");
        assert!(s.starts_with("List 100 distinct two-word phrases"));
        assert!(s.contains("of waterbird."));
    }

    #[test]
    fn template_needs_exactly_one_placeholder() {
        assert!(PromptTemplate::new("no slot", "x").is_err());
        assert!(PromptTemplate::new("{class_name} {class_name}", "x").is_err());
    }

    #[test]
    fn corruption_counts() {
        let b = bank(10);
        let irr = corrupt_bank(&b, &CorruptionSpec { mode: CorruptionMode::Irrelevant, count: 5, seed: 1 }).unwrap();
        assert!(irr.all_attributes().iter().all(|a| a.len() == 15));
        let ins = corrupt_bank(&b, &CorruptionSpec { mode: CorruptionMode::Insufficient, count: 5, seed: 1 }).unwrap();
        assert!(ins.all_attributes().iter().all(|a| a.len() == 5));
        assert_eq!(b, bank(10));
    }

    #[test]
    fn corruption_errors() {
        let b = bank(3);
        let over = CorruptionSpec { mode: CorruptionMode::Irrelevant, count: 4, seed: 0 };
        assert!(corrupt_bank(&b, &over).is_err());
        let all = CorruptionSpec { mode: CorruptionMode::Insufficient, count: 3, seed: 0 };
        assert!(corrupt_bank(&b, &all).is_err());
        let single = AttributeBank::new(vec!["a".into()], vec![vec!["x".into()]], BankMeta::default()).unwrap();
        let irr = CorruptionSpec { mode: CorruptionMode::Irrelevant, count: 1, seed: 0 };
        assert!(corrupt_bank(&single, &irr).is_err());
    }

    proptest! {
        #[test]
        fn irrelevant_additions_come_from_other_classes(seed in any::<u64>(), count in 1usize..=6) {
            let b = bank(6);
            let spec = CorruptionSpec { mode: CorruptionMode::Irrelevant, count, seed };
            let out = corrupt_bank(&b, &spec).unwrap();
            for c in 0..b.num_classes() {
                let added = &out.attributes(c)[b.attributes(c).len()..];
                prop_assert_eq!(&out.attributes(c)[..b.attributes(c).len()], b.attributes(c));
                for p in added {
                    let donor = (0..b.num_classes()).any(|o| o != c && b.attributes(o).contains(p));
                    prop_assert!(donor);
                }
            }
            prop_assert_eq!(out.to_json_string().unwrap(), corrupt_bank(&b, &spec).unwrap().to_json_string().unwrap());
        }

        #[test]
        fn save_then_load_is_identity(k in 1usize..8, n in 1usize..5, seed in any::<u64>()) {
            let classes: Vec<String> = (0..n).map(|i| format!("class{}", (i as u64 ^ seed) % 1000 + i as u64 * 1000)).collect();
            let attrs = classes.iter().map(|c| (0..k).map(|i| format!("{c} Attr {i}")).collect()).collect();
            let b = AttributeBank::new(classes, attrs, BankMeta { source_model: "m".into(), ..BankMeta::default() }).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("b.json");
            save_bank(&b, &p).unwrap();
            let loaded = load_bank(&p).unwrap();
            prop_assert_eq!(&loaded, &b);
            prop_assert_eq!(loaded.fingerprint(), b.fingerprint());
        }
    }
}
