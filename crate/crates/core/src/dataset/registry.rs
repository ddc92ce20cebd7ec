use serde::{Deserialize, Serialize};

use crate::error::DatasetError;

/// What kind of target an action entry expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    None,
    Object,
    Instrument,
}

impl Role {
    pub fn has_target(self) -> bool {
        self != Role::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::None => "none",
            Role::Object => "object",
            Role::Instrument => "instrument",
        }
    }
}

/// A verb as written in annotation files. A verb with no roles takes no
/// target; a verb with two roles (object and instrument) expands into two
/// role entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerbDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roles: Vec<Role>,
    /// Other people may be the target of this verb.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub person_targets: bool,
}

/// One (verb, role) entry: the unit of role AP and of target estimation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    pub verb: usize,
    pub role: Role,
    pub person_targets: bool,
    /// Index among the entries that take a target; `None` for no-target verbs.
    pub slot: Option<usize>,
}

/// Closed set of verbs and their role entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionRegistry {
    verbs: Vec<VerbDef>,
    entries: Vec<ActionSpec>,
    slots: Vec<usize>,
}

const VCOCO_OBJECT_VERBS: [&str; 18] = [
    "carry",
    "catch",
    "drink",
    "hold",
    "jump",
    "kick",
    "lay",
    "look",
    "read",
    "ride",
    "sit",
    "skateboard",
    "ski",
    "snowboard",
    "surf",
    "talk-on-phone",
    "throw",
    "work-on-computer",
];
const VCOCO_DUAL_VERBS: [&str; 3] = ["cut", "eat", "hit"];
const VCOCO_AGENT_VERBS: [&str; 5] = ["point", "run", "smile", "stand", "walk"];

impl ActionRegistry {
    pub fn new(verbs: Vec<VerbDef>) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        let mut slots = Vec::new();
        for (vi, v) in verbs.iter().enumerate() {
            if v.name.is_empty() {
                return Err(DatasetError::Registry("empty verb name".into()));
            }
            if verbs[..vi].iter().any(|o| o.name == v.name) {
                return Err(DatasetError::Registry(format!("duplicate verb `{}`", v.name)));
            }
            if v.roles.contains(&Role::None) {
                return Err(DatasetError::Registry(format!(
                    "verb `{}`: list no roles instead of `none`",
                    v.name
                )));
            }
            let mut roles = v.roles.clone();
            roles.sort();
            roles.dedup();
            if roles.len() != v.roles.len() {
                return Err(DatasetError::Registry(format!("verb `{}` repeats a role", v.name)));
            }
            if v.roles.is_empty() {
                entries.push(ActionSpec {
                    name: v.name.clone(),
                    verb: vi,
                    role: Role::None,
                    person_targets: false,
                    slot: None,
                });
            }
            for &role in &v.roles {
                slots.push(entries.len());
                entries.push(ActionSpec {
                    name: v.name.clone(),
                    verb: vi,
                    role,
                    person_targets: v.person_targets,
                    slot: Some(slots.len() - 1),
                });
            }
        }
        Ok(Self {
            verbs,
            entries,
            slots,
        })
    }

    /// The 26 V-COCO verbs: 18 single-target, 3 with object and instrument
    /// targets, 5 without a target (29 role entries).
    pub fn vcoco() -> Self {
        let mut verbs = Vec::new();
        let mut push = |name: &str, roles: Vec<Role>, person_targets: bool| {
            verbs.push(VerbDef {
                name: name.to_string(),
                roles,
                person_targets,
            })
        };
        for v in VCOCO_OBJECT_VERBS {
            push(v, vec![Role::Object], v == "look");
        }
        for v in VCOCO_DUAL_VERBS {
            push(v, vec![Role::Object, Role::Instrument], v == "hit");
        }
        for v in VCOCO_AGENT_VERBS {
            push(v, vec![], false);
        }
        Self::new(verbs).expect("built-in registry is valid")
    }

    pub fn verbs(&self) -> &[VerbDef] {
        &self.verbs
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn entries(&self) -> &[ActionSpec] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ActionSpec {
        &self.entries[i]
    }

    /// Number of entries that carry a target (and hence a density slot).
    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Entry index of density slot `s`.
    pub fn slot_entry(&self, s: usize) -> usize {
        self.slots[s]
    }

    pub fn verb_index(&self, name: &str) -> Option<usize> {
        self.verbs.iter().position(|v| v.name == name)
    }

    pub fn entry_index(&self, name: &str, role: Role) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.name == name && e.role == role)
    }

    /// Short label used in reports, e.g. `cut (instrument)`.
    pub fn entry_label(&self, i: usize) -> String {
        let e = &self.entries[i];
        let v = &self.verbs[e.verb];
        if v.roles.len() > 1 {
            format!("{} ({})", e.name, e.role.as_str())
        } else {
            e.name.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vcoco_has_26_verbs_and_29_entries() {
        let r = ActionRegistry::vcoco();
        assert_eq!(r.num_verbs(), 26);
        assert_eq!(r.entries().len(), 29);
        assert_eq!(r.num_slots(), 24);
        let none = r.entries().iter().filter(|e| e.role == Role::None).count();
        assert_eq!(none, 5);
        for v in ["cut", "hit", "eat"] {
            assert!(r.entry_index(v, Role::Object).is_some());
            assert!(r.entry_index(v, Role::Instrument).is_some());
        }
        assert_eq!(r.entry_label(r.entry_index("cut", Role::Instrument).unwrap()), "cut (instrument)");
    }

    #[test]
    fn every_entry_resolves_uniquely() {
        let r = ActionRegistry::vcoco();
        for (i, e) in r.entries().iter().enumerate() {
            assert_eq!(r.entry_index(&e.name, e.role), Some(i));
            assert_eq!(e.slot.is_some(), e.role.has_target());
            if let Some(s) = e.slot {
                assert_eq!(r.slot_entry(s), i);
            }
        }
    }

    #[test]
    fn rejects_bad_registries() {
        let v = |name: &str, roles: Vec<Role>| VerbDef {
            name: name.into(),
            roles,
            person_targets: false,
        };
        assert!(ActionRegistry::new(vec![v("a", vec![]), v("a", vec![])]).is_err());
        assert!(ActionRegistry::new(vec![v("a", vec![Role::None])]).is_err());
        assert!(ActionRegistry::new(vec![v("a", vec![Role::Object, Role::Object])]).is_err());
    }
}
