//! Tabular attributes to text, and a deterministic closed-vocabulary
//! word tokenizer feeding the text encoder.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TOKEN_LEN: usize = 16;
pub const PAD_ID: u32 = 0;
pub const END_ID: u32 = 1;

/// The synthetic attribute set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    DiseaseA,
    DiseaseB,
    Device,
}

/// Canonical caption order.
pub const CANONICAL_ORDER: [Attribute; 3] = [Attribute::DiseaseA, Attribute::DiseaseB, Attribute::Device];

impl Attribute {
    pub fn word(&self) -> &'static str {
        match self {
            Attribute::DiseaseA => "disease_a",
            Attribute::DiseaseB => "disease_b",
            Attribute::Device => "device",
        }
    }
}

/// Binary labels per attribute. `no_finding` must be consistent: it is set
/// exactly when no positive attribute is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AttributeRecord {
    pub disease_a: bool,
    pub disease_b: bool,
    pub device: bool,
    pub no_finding: bool,
}

impl AttributeRecord {
    pub fn new(disease_a: bool, disease_b: bool, device: bool) -> Self {
        AttributeRecord {
            disease_a,
            disease_b,
            device,
            no_finding: !(disease_a || disease_b || device),
        }
    }

    pub fn has(&self, a: Attribute) -> bool {
        match a {
            Attribute::DiseaseA => self.disease_a,
            Attribute::DiseaseB => self.disease_b,
            Attribute::Device => self.device,
        }
    }

    pub fn set(&mut self, a: Attribute, value: bool) {
        match a {
            Attribute::DiseaseA => self.disease_a = value,
            Attribute::DiseaseB => self.disease_b = value,
            Attribute::Device => self.device = value,
        }
        self.no_finding = !(self.disease_a || self.disease_b || self.device);
    }

    pub fn positives(&self) -> Vec<Attribute> {
        CANONICAL_ORDER.iter().copied().filter(|&a| self.has(a)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_finding && (self.disease_a || self.disease_b || self.device) {
            return Err(Error::Caption(
                "contradictory record: no_finding set alongside a positive attribute".into(),
            ));
        }
        if !self.no_finding && !(self.disease_a || self.disease_b || self.device) {
            return Err(Error::Caption(
                "contradictory record: nothing positive but no_finding unset".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Findings,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source_record: AttributeRecord,
    pub template_id: TemplateId,
}

const NORMAL_TEMPLATE: &str = "normal scan of a subject with no significant findings";

fn findings_text(positives: &[Attribute], negated: &[Attribute]) -> String {
    let mut text = String::from("scan of a subject");
    if !positives.is_empty() {
        text.push_str(" showing ");
        let words: Vec<&str> = positives.iter().map(|a| a.word()).collect();
        text.push_str(&words.join(", "));
    }
    for a in negated {
        text.push_str(" without ");
        text.push_str(a.word());
    }
    text
}

/// Positive attributes joined in canonical order into the findings template;
/// a fully negative record yields the normal template.
pub fn caption_from_record(r: &AttributeRecord) -> Result<Caption> {
    r.validate()?;
    if r.no_finding {
        return Ok(Caption {
            text: NORMAL_TEMPLATE.to_string(),
            source_record: *r,
            template_id: TemplateId::Normal,
        });
    }
    Ok(Caption {
        text: findings_text(&r.positives(), &[]),
        source_record: *r,
        template_id: TemplateId::Findings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAction {
    Add,
    Remove,
}

/// How removed attributes appear in the edit prompt: an explicit
/// "without X" clause, or plain omission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalStyle {
    Negation,
    Omission,
}

/// Build the (P_orig, P_edit) prompt pair for an intervention. Untouched
/// attributes read identically in both prompts.
pub fn make_edit_prompts(
    r: &AttributeRecord,
    interventions: &[(Attribute, EditAction)],
    style: RemovalStyle,
) -> Result<(Caption, Caption)> {
    r.validate()?;
    let p_orig = caption_from_record(r)?;
    let mut edited = *r;
    let mut negated = Vec::new();
    for &(attr, action) in interventions {
        match action {
            EditAction::Add => {
                if r.has(attr) {
                    return Err(Error::Caption(format!(
                        "inconsistent intervention: cannot add present attribute {:?}",
                        attr
                    )));
                }
                edited.set(attr, true);
            }
            EditAction::Remove => {
                if !r.has(attr) {
                    return Err(Error::Caption(format!(
                        "inconsistent intervention: cannot remove absent attribute {:?}",
                        attr
                    )));
                }
                edited.set(attr, false);
                if style == RemovalStyle::Negation {
                    negated.push(attr);
                }
            }
        }
    }
    let p_edit = if edited.no_finding && negated.is_empty() {
        caption_from_record(&edited)?
    } else {
        Caption {
            text: findings_text(&edited.positives(), &negated),
            source_record: edited,
            template_id: TemplateId::Findings,
        }
    };
    Ok((p_orig, p_edit))
}

/// Fixed-length token id sequence; padding only after the end token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    /// The null (empty-caption) sequence used for the unconditional branch.
    pub fn null() -> Self {
        let mut ids = vec![PAD_ID; TOKEN_LEN];
        ids[0] = END_ID;
        TokenSequence { ids }
    }

    /// Indices of content tokens (everything before the end token).
    pub fn content_len(&self) -> usize {
        self.ids.iter().position(|&i| i == END_ID).unwrap_or(self.ids.len())
    }
}

/// Closed vocabulary built once from every template word and attribute name.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn closed() -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "<end>".into()];
        for w in [
            "scan", "of", "a", "subject", "showing", "without", "normal", "with", "no",
            "significant", "findings", "disease_a", "disease_b", "device",
        ] {
            words.push(w.into());
        }
        Vocabulary { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    fn id_of(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    fn normalize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .replace([',', '.'], " ")
            .split_whitespace()
            .map(String::from)
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let words = Self::normalize(text);
        if words.is_empty() {
            return Err(Error::Caption("tokenize: empty text".into()));
        }
        if words.len() + 1 > TOKEN_LEN {
            return Err(Error::Caption(format!(
                "tokenize: caption longer than {} tokens",
                TOKEN_LEN - 1
            )));
        }
        let mut ids = Vec::with_capacity(TOKEN_LEN);
        for w in &words {
            ids.push(self.id_of(w).ok_or_else(|| Error::OutOfVocab(w.clone()))?);
        }
        ids.push(END_ID);
        ids.resize(TOKEN_LEN, PAD_ID);
        Ok(TokenSequence { ids })
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .take_while(|&&i| i != END_ID)
            .map(|&i| self.words[i as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_disease_caption_matches_template() {
        let r = AttributeRecord::new(true, true, false);
        let c = caption_from_record(&r).unwrap();
        assert_eq!(c.text, "scan of a subject showing disease_a, disease_b");
        assert_eq!(c.template_id, TemplateId::Findings);
    }

    #[test]
    fn no_finding_uses_normal_template() {
        let r = AttributeRecord::new(false, false, false);
        let c = caption_from_record(&r).unwrap();
        assert_eq!(c.text, NORMAL_TEMPLATE);
        assert_eq!(c.template_id, TemplateId::Normal);
    }

    #[test]
    fn device_only_caption() {
        let r = AttributeRecord::new(false, false, true);
        let c = caption_from_record(&r).unwrap();
        assert_eq!(c.text, "scan of a subject showing device");
    }

    #[test]
    fn contradictory_record_rejected() {
        let mut r = AttributeRecord::new(true, false, false);
        r.no_finding = true;
        assert!(caption_from_record(&r).is_err());
    }

    #[test]
    fn remove_device_uses_without_clause() {
        let r = AttributeRecord::new(true, false, true);
        let (p_orig, p_edit) =
            make_edit_prompts(&r, &[(Attribute::Device, EditAction::Remove)], RemovalStyle::Negation)
                .unwrap();
        assert_eq!(p_orig.text, "scan of a subject showing disease_a, device");
        assert_eq!(p_edit.text, "scan of a subject showing disease_a without device");
    }

    #[test]
    fn empty_intervention_is_identity() {
        let r = AttributeRecord::new(false, true, true);
        let (p_orig, p_edit) = make_edit_prompts(&r, &[], RemovalStyle::Negation).unwrap();
        assert_eq!(p_orig, p_edit);
    }

    #[test]
    fn removing_last_disease_yields_normal_template() {
        let r = AttributeRecord::new(false, true, false);
        let (_, p_edit) =
            make_edit_prompts(&r, &[(Attribute::DiseaseB, EditAction::Remove)], RemovalStyle::Omission)
                .unwrap();
        assert_eq!(p_edit.text, NORMAL_TEMPLATE);
    }

    #[test]
    fn inconsistent_interventions_rejected() {
        let r = AttributeRecord::new(true, false, false);
        assert!(make_edit_prompts(&r, &[(Attribute::Device, EditAction::Remove)], RemovalStyle::Negation)
            .is_err());
        assert!(make_edit_prompts(&r, &[(Attribute::DiseaseA, EditAction::Add)], RemovalStyle::Negation)
            .is_err());
    }

    #[test]
    fn untouched_attributes_identical_across_prompt_pair() {
        let r = AttributeRecord::new(true, true, true);
        let (p_orig, p_edit) =
            make_edit_prompts(&r, &[(Attribute::Device, EditAction::Remove)], RemovalStyle::Negation)
                .unwrap();
        for word in ["disease_a", "disease_b"] {
            assert!(p_orig.text.contains(word));
            assert!(p_edit.text.contains(word));
        }
    }

    #[test]
    fn tokenize_round_trip() {
        let v = Vocabulary::closed();
        let text = "scan of a subject showing disease_a, device";
        let seq = v.tokenize(text).unwrap();
        assert_eq!(seq.ids.len(), TOKEN_LEN);
        assert_eq!(v.detokenize(&seq), "scan of a subject showing disease_a device");
    }

    #[test]
    fn tokenize_rejects_empty_and_oov() {
        let v = Vocabulary::closed();
        assert!(v.tokenize("").is_err());
        assert!(matches!(v.tokenize("scan of a zebra"), Err(Error::OutOfVocab(w)) if w == "zebra"));
    }

    #[test]
    fn padding_only_after_end_token() {
        let v = Vocabulary::closed();
        let seq = v.tokenize("scan of a subject").unwrap();
        let end = seq.ids.iter().position(|&i| i == END_ID).unwrap();
        assert!(seq.ids[..end].iter().all(|&i| i != PAD_ID));
        assert!(seq.ids[end + 1..].iter().all(|&i| i == PAD_ID));
    }

    fn all_records() -> Vec<AttributeRecord> {
        let mut out = Vec::new();
        for a in [false, true] {
            for b in [false, true] {
                for d in [false, true] {
                    out.push(AttributeRecord::new(a, b, d));
                }
            }
        }
        out
    }

    #[test]
    fn tokenizer_injective_over_caption_space() {
        let v = Vocabulary::closed();
        let mut seen = std::collections::HashMap::new();
        for r in all_records() {
            let c = caption_from_record(&r).unwrap();
            let seq = v.tokenize(&c.text).unwrap();
            if let Some(prev) = seen.insert(seq.ids.clone(), c.text.clone()) {
                panic!("collision between {:?} and {:?}", prev, c.text);
            }
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn caption_regeneration_is_deterministic() {
        for r in all_records() {
            let a = caption_from_record(&r).unwrap();
            let b = caption_from_record(&r).unwrap();
            assert_eq!(a.text, b.text);
        }
    }

    use crate::Error;
}
