//! Schema-driven input composition.
//!
//! Turns a task instance and its schema into one sequence of segments:
//!
//! ```text
//! [KEY:format][FORMAT:f] [KEY:task][TASK:t]
//! ([KEY:k_1] text_1) ... ([KEY:k_n] text_n)
//! [KEY:output][OUTPUT:o]
//! ```
//!
//! Slots reference whole prompt groups; text segments carry token ids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{GroupId, InitConfig, PromptTable, Role};
use crate::schema::{TaskSchema, ValueKind};
use crate::tokenizer::{Tokenizer, ENUM_MARKERS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentValue {
    Text(String),
    List(Vec<String>),
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaInstance {
    pub task_name: String,
    pub values: BTreeMap<String, ComponentValue>,
    pub target: String,
    /// Candidate answers for option ranking, when they are not already a
    /// list component of the schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

impl SchemaInstance {
    /// Candidate answers: explicit `choices`, else the first list component.
    pub fn options(&self, schema: &TaskSchema) -> Option<Vec<String>> {
        if let Some(c) = &self.choices {
            return Some(c.clone());
        }
        schema
            .components
            .iter()
            .filter(|c| c.value_kind == ValueKind::TextList)
            .find_map(|c| match self.values.get(&c.key) {
                Some(ComponentValue::List(items)) => Some(items.clone()),
                _ => None,
            })
    }

    /// Checks the instance against its schema.
    pub fn check(&self, schema: &TaskSchema) -> Result<()> {
        for key in self.values.keys() {
            if schema.component(key).is_none() {
                return Err(Error::UndeclaredComponent {
                    task: self.task_name.clone(),
                    key: key.clone(),
                });
            }
        }
        for decl in &schema.components {
            match (decl.value_kind, self.values.get(&decl.key)) {
                (_, None) => {
                    return Err(Error::MissingComponent {
                        task: self.task_name.clone(),
                        key: decl.key.clone(),
                    })
                }
                (ValueKind::SingleText, Some(ComponentValue::Text(_))) => {}
                (ValueKind::TextList, Some(ComponentValue::List(items))) if !items.is_empty() => {}
                _ => {
                    return Err(Error::ValueKindMismatch {
                        key: decl.key.clone(),
                    })
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Slot { group: GroupId, length: usize },
    Text { ids: Vec<u32> },
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Slot { length, .. } => *length,
            Segment::Text { ids } => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_slot(&self) -> bool {
        matches!(self, Segment::Slot { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedInput {
    pub segments: Vec<Segment>,
    /// Component key or attribute name each segment belongs to.
    pub alignment: Vec<String>,
}

impl ComposedInput {
    /// Plain text input with no prompt slots (natural-language baselines).
    pub fn from_text(ids: Vec<u32>) -> Self {
        Self {
            segments: vec![Segment::Text { ids }],
            alignment: vec!["text".into()],
        }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn slot_len(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.is_slot())
            .map(Segment::len)
            .sum()
    }

    pub fn slot_groups(&self) -> impl Iterator<Item = &GroupId> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot { group, .. } => Some(group),
            Segment::Text { .. } => None,
        })
    }

    /// Flattened id stream: token ids for text, `base..base+len` for each
    /// slot where `base` comes from `resolve`.
    pub fn flatten(&self, resolve: impl Fn(&GroupId) -> Option<u32>) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(self.total_len());
        for seg in &self.segments {
            match seg {
                Segment::Slot { group, length } => {
                    let base = resolve(group).ok_or_else(|| Error::UnknownGroup(group.clone()))?;
                    out.extend(base..base + *length as u32);
                }
                Segment::Text { ids } => out.extend_from_slice(ids),
            }
        }
        Ok(out)
    }
}

/// Which parts of the schema prompt are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub include_format: bool,
    pub include_task: bool,
    pub include_keys: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationConfig {
    pub const FULL: Self = Self {
        include_format: true,
        include_task: true,
        include_keys: true,
    };
    pub const WITHOUT_FORMAT: Self = Self {
        include_format: false,
        ..Self::FULL
    };
    pub const WITHOUT_TASK: Self = Self {
        include_task: false,
        ..Self::FULL
    };
    pub const WITHOUT_KEYS: Self = Self {
        include_keys: false,
        ..Self::FULL
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if !self.include_format {
            parts.push("F");
        }
        if !self.include_task {
            parts.push("T");
        }
        if !self.include_keys {
            parts.push("K");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", parts.join(","))
        }
    }
}

/// Source of slot lengths for composition.
pub trait SlotLayout {
    fn slot_length(&self, id: &GroupId) -> usize;
}

impl SlotLayout for PromptTable {
    fn slot_length(&self, id: &GroupId) -> usize {
        PromptTable::slot_length(self, id)
    }
}

impl SlotLayout for InitConfig {
    fn slot_length(&self, id: &GroupId) -> usize {
        self.length_for(id.role)
    }
}

fn slot(layout: &dyn SlotLayout, group: GroupId) -> Segment {
    let length = layout.slot_length(&group);
    Segment::Slot { group, length }
}

fn encode_list(items: &[String], tokenizer: &dyn Tokenizer) -> Vec<u32> {
    let mut ids = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            ids.push(tokenizer.sep_id());
        }
        ids.extend(tokenizer.encode(ENUM_MARKERS[i % ENUM_MARKERS.len()]));
        ids.extend(tokenizer.encode(item));
    }
    ids
}

/// Builds the schema-prompted input for one instance and truncates it to
/// `max_len` positions.
pub fn compose(
    instance: &SchemaInstance,
    schema: &TaskSchema,
    ablation: AblationConfig,
    tokenizer: &dyn Tokenizer,
    layout: &dyn SlotLayout,
    max_len: usize,
) -> Result<ComposedInput> {
    instance.check(schema)?;
    let mut segments = Vec::with_capacity(2 * schema.components.len() + 6);
    let mut alignment = Vec::with_capacity(segments.capacity());
    let mut attribute = |segments: &mut Vec<Segment>, attr: &str, role: Role, name: &str| {
        segments.push(slot(layout, GroupId::key(attr)));
        segments.push(slot(layout, GroupId::new(role, name)));
        alignment.push(attr.to_string());
        alignment.push(attr.to_string());
    };
    if ablation.include_format {
        attribute(&mut segments, "format", Role::FormatValue, &schema.format_name);
    }
    if ablation.include_task {
        attribute(&mut segments, "task", Role::TaskValue, &schema.task_name);
    }
    let attrs_so_far = segments.len();
    let mut general = Vec::new();
    let mut general_align = Vec::new();
    for decl in &schema.components {
        if ablation.include_keys {
            general.push(slot(layout, GroupId::key(&decl.key)));
            general_align.push(decl.key.clone());
        }
        let ids = match &instance.values[&decl.key] {
            ComponentValue::Text(text) => tokenizer.encode(text),
            ComponentValue::List(items) => encode_list(items, tokenizer),
        };
        general.push(Segment::Text { ids });
        general_align.push(decl.key.clone());
    }
    attribute(&mut segments, "output", Role::OutputValue, &schema.output_name);
    let tail = segments.split_off(attrs_so_far);
    let attr_len: usize = segments.iter().chain(&tail).map(Segment::len).sum();
    if attr_len > max_len {
        return Err(Error::TokenBudgetExceeded {
            needed: attr_len,
            max_len,
        });
    }
    segments.extend(general);
    segments.extend(tail);
    let mut align_all = alignment[..attrs_so_far].to_vec();
    align_all.extend(general_align);
    align_all.extend_from_slice(&alignment[attrs_so_far..]);
    let composed = ComposedInput {
        segments,
        alignment: align_all,
    };
    truncate(&composed, max_len)
}

/// Shortens text so that `total_len ≤ max_len`, always cutting the tail of
/// the currently longest text segment (earliest on ties). Slots are never
/// touched.
pub fn truncate(composed: &ComposedInput, max_len: usize) -> Result<ComposedInput> {
    let total = composed.total_len();
    if total <= max_len {
        return Ok(composed.clone());
    }
    let slots = composed.slot_len();
    if slots > max_len {
        return Err(Error::TokenBudgetExceeded {
            needed: slots,
            max_len,
        });
    }
    let mut out = composed.clone();
    let mut excess = total - max_len;
    while excess > 0 {
        let mut longest: Option<(usize, usize)> = None;
        let mut second = 0;
        for (i, seg) in out.segments.iter().enumerate() {
            if let Segment::Text { ids } = seg {
                match longest {
                    Some((_, len)) if ids.len() <= len => second = second.max(ids.len()),
                    _ => {
                        if let Some((_, len)) = longest {
                            second = second.max(len);
                        }
                        longest = Some((i, ids.len()));
                    }
                }
            }
        }
        let (idx, len) = longest.expect("text remains while excess > 0");
        let cut = excess.min((len - second).max(1));
        if let Segment::Text { ids } = &mut out.segments[idx] {
            ids.truncate(len - cut);
        }
        excess -= cut;
    }
    Ok(out)
}

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Human-readable rendering: attribute pairs as `[FORMAT:name]`, general
/// keys as `[KEY:name]`, text quoted.
pub fn render_debug(composed: &ComposedInput, tokenizer: &dyn Tokenizer) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < composed.segments.len() {
        match &composed.segments[i] {
            Segment::Slot { group, .. } => {
                let attribute_pair = group.role == Role::Key
                    && matches!(
                        composed.segments.get(i + 1),
                        Some(Segment::Slot { group: next, .. })
                            if next.role != Role::Key && composed.alignment.get(i + 1) == composed.alignment.get(i)
                    );
                if attribute_pair {
                    let Segment::Slot { group: value, .. } = &composed.segments[i + 1] else {
                        unreachable!()
                    };
                    parts.push(format!("[{}:{}]", value.role.label(), value.name));
                    i += 2;
                    continue;
                }
                parts.push(format!("[{}:{}]", group.role.label(), group.name));
            }
            Segment::Text { ids } => parts.push(format!("\"{}\"", escape(&tokenizer.decode(ids)))),
        }
        i += 1;
    }
    parts.join(" ")
}
