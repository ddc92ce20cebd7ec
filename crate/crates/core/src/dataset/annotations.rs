//! The neutral annotation schema shared by V-COCO-style and HICO-style data.
//!
//! ```json
//! {
//!   "version": 1,
//!   "categories": ["person", "cup", "knife"],
//!   "actions": [{"name": "drink", "roles": ["object"]},
//!               {"name": "cut", "roles": ["object", "instrument"]},
//!               {"name": "smile"}],
//!   "scenes": [{
//!     "image_id": 7, "width": 640, "height": 480,
//!     "persons": [[10, 20, 110, 300]],
//!     "objects": [{"box": [90, 100, 130, 140], "category": "cup"}],
//!     "interactions": [{"person": 0, "action": "drink", "role": "object", "object": 0},
//!                      {"person": 0, "action": "smile", "role": "none"}]
//!   }]
//! }
//! ```
//!
//! `object` is an index into `objects` (or into `persons` when
//! `object_is_person` is set). It may be `null` for a targeted role whose
//! target was not annotated; any negative index is rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::registry::{ActionRegistry, Role, VerbDef};
use crate::error::DatasetError;
use crate::geometry::BBox;

pub const ANNOTATION_VERSION: u32 = 1;
pub const PERSON: &str = "person";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// Objects are exhaustively annotated.
    VcocoLike,
    /// Objects not referenced by any interaction default to `ignore`.
    HicoLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ignore: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub person: i64,
    pub action: String,
    #[serde(default = "role_none")]
    pub role: Role,
    #[serde(default)]
    pub object: Option<i64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub object_is_person: bool,
}

fn role_none() -> Role {
    Role::None
}

/// Per-person latent pose codes of a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Latent {
    pub poses: Vec<[f64; 2]>,
    pub feature_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub persons: Vec<BBox>,
    #[serde(default)]
    pub objects: Vec<ObjectRecord>,
    #[serde(default)]
    pub interactions: Vec<InteractionRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proposals: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Latent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub version: u32,
    pub categories: Vec<String>,
    pub actions: Vec<VerbDef>,
    pub scenes: Vec<SceneRecord>,
    /// Free-form provenance, e.g. the generator config of a synthetic set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Object(usize),
    Person(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub person: usize,
    /// Registry entry index.
    pub entry: usize,
    pub target: Option<Target>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    /// Index into the dataset's categories; 0 is always `person`.
    pub category: usize,
    pub ignore: bool,
}

/// A validated scene with resolved indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub persons: Vec<BBox>,
    pub objects: Vec<SceneObject>,
    pub interactions: Vec<Interaction>,
    pub proposals: Vec<BBox>,
    pub latent: Option<Latent>,
}

/// A ground-truth instance: persons first, then objects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    pub category: usize,
    pub ignore: bool,
    pub target: Target,
}

impl Scene {
    pub fn instances(&self) -> Vec<Instance> {
        let persons = self.persons.iter().enumerate().map(|(i, b)| Instance {
            bbox: *b,
            category: 0,
            ignore: false,
            target: Target::Person(i),
        });
        let objects = self.objects.iter().enumerate().map(|(i, o)| Instance {
            bbox: o.bbox,
            category: o.category,
            ignore: o.ignore,
            target: Target::Object(i),
        });
        persons.chain(objects).collect()
    }

    pub fn target_box(&self, t: Target) -> BBox {
        match t {
            Target::Object(i) => self.objects[i].bbox,
            Target::Person(i) => self.persons[i],
        }
    }

    pub fn target_category(&self, t: Target) -> usize {
        match t {
            Target::Object(i) => self.objects[i].category,
            Target::Person(_) => 0,
        }
    }

    /// Verb indices performed by `person`.
    pub fn person_verbs(&self, person: usize, registry: &ActionRegistry) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .interactions
            .iter()
            .filter(|r| r.person == person)
            .map(|r| registry.entry(r.entry).verb)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Categories, registry and scenes loaded from one annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub registry: ActionRegistry,
    pub scenes: Vec<Scene>,
    pub generator: Option<serde_json::Value>,
}

fn record_err(image_id: u64, message: impl Into<String>) -> DatasetError {
    DatasetError::Record {
        image_id,
        message: message.into(),
    }
}

fn resolve_scene(
    rec: &SceneRecord,
    categories: &[String],
    registry: &ActionRegistry,
    schema: Schema,
) -> Result<Scene, DatasetError> {
    let id = rec.image_id;
    if !(rec.width > 0.0 && rec.height > 0.0) {
        return Err(record_err(id, "image width and height must be positive"));
    }
    let mut objects = Vec::with_capacity(rec.objects.len());
    for (i, o) in rec.objects.iter().enumerate() {
        let category = categories
            .iter()
            .position(|c| *c == o.category)
            .ok_or_else(|| record_err(id, format!("object {i}: unknown category `{}`", o.category)))?;
        objects.push(SceneObject {
            bbox: o.bbox,
            category,
            ignore: o.ignore.unwrap_or(false),
        });
    }

    let mut interactions = Vec::with_capacity(rec.interactions.len());
    for (k, r) in rec.interactions.iter().enumerate() {
        let ctx = |m: String| record_err(id, format!("interaction {k}: {m}"));
        if r.person < 0 || r.person as usize >= rec.persons.len() {
            return Err(ctx(format!("dangling person index {}", r.person)));
        }
        let entry = registry
            .entry_index(&r.action, r.role)
            .ok_or_else(|| ctx(format!("unknown action `{}` with role `{}`", r.action, r.role.as_str())))?;
        let target = match (r.role.has_target(), r.object) {
            (false, None) => None,
            (false, Some(_)) => return Err(ctx("a role-less action cannot name an object".into())),
            (true, None) => None,
            (true, Some(idx)) => {
                let limit = if r.object_is_person {
                    rec.persons.len()
                } else {
                    rec.objects.len()
                };
                if idx < 0 || idx as usize >= limit {
                    return Err(ctx(format!("dangling object index {idx}")));
                }
                let idx = idx as usize;
                if r.object_is_person {
                    if idx == r.person as usize {
                        return Err(ctx("a person cannot be their own target".into()));
                    }
                    Some(Target::Person(idx))
                } else {
                    Some(Target::Object(idx))
                }
            }
        };
        interactions.push(Interaction {
            person: r.person as usize,
            entry,
            target,
        });
    }

    if schema == Schema::HicoLike {
        for (i, o) in objects.iter_mut().enumerate() {
            let referenced = interactions
                .iter()
                .any(|r| r.target == Some(Target::Object(i)));
            if rec.objects[i].ignore.is_none() && !referenced {
                o.ignore = true;
            }
        }
    }

    if let Some(lat) = &rec.latent {
        if lat.poses.len() != rec.persons.len() {
            return Err(record_err(id, "latent poses must match the person count"));
        }
    }

    Ok(Scene {
        image_id: id,
        width: rec.width,
        height: rec.height,
        persons: rec.persons.clone(),
        objects,
        interactions,
        proposals: rec.proposals.clone(),
        latent: rec.latent.clone(),
    })
}

impl Dataset {
    pub fn from_file(file: &AnnotationFile, schema: Schema) -> Result<Self, DatasetError> {
        if file.version != ANNOTATION_VERSION {
            return Err(DatasetError::Registry(format!(
                "unsupported annotation version {}",
                file.version
            )));
        }
        if file.categories.first().map(String::as_str) != Some(PERSON) {
            return Err(DatasetError::Registry(
                "categories must start with `person`".into(),
            ));
        }
        let registry = ActionRegistry::new(file.actions.clone())?;
        let mut seen = std::collections::HashSet::new();
        let mut scenes = Vec::with_capacity(file.scenes.len());
        for rec in &file.scenes {
            if !seen.insert(rec.image_id) {
                return Err(record_err(rec.image_id, "duplicate image id"));
            }
            scenes.push(resolve_scene(rec, &file.categories, &registry, schema)?);
        }
        Ok(Self {
            categories: file.categories.clone(),
            registry,
            scenes,
            generator: file.generator.clone(),
        })
    }

    pub fn to_file(&self) -> AnnotationFile {
        let scenes = self
            .scenes
            .iter()
            .map(|s| SceneRecord {
                image_id: s.image_id,
                width: s.width,
                height: s.height,
                persons: s.persons.clone(),
                objects: s
                    .objects
                    .iter()
                    .map(|o| ObjectRecord {
                        bbox: o.bbox,
                        category: self.categories[o.category].clone(),
                        ignore: o.ignore.then_some(true),
                    })
                    .collect(),
                interactions: s
                    .interactions
                    .iter()
                    .map(|r| {
                        let e = self.registry.entry(r.entry);
                        let (object, object_is_person) = match r.target {
                            None => (None, false),
                            Some(Target::Object(i)) => (Some(i as i64), false),
                            Some(Target::Person(i)) => (Some(i as i64), true),
                        };
                        InteractionRecord {
                            person: r.person as i64,
                            action: e.name.clone(),
                            role: e.role,
                            object,
                            object_is_person,
                        }
                    })
                    .collect(),
                proposals: s.proposals.clone(),
                latent: s.latent.clone(),
            })
            .collect();
        AnnotationFile {
            version: ANNOTATION_VERSION,
            categories: self.categories.clone(),
            actions: self.registry.verbs().to_vec(),
            scenes,
            generator: self.generator.clone(),
        }
    }

    pub fn scene(&self, image_id: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.image_id == image_id)
    }
}

/// Parse annotations from a JSON string.
pub fn parse_annotations(text: &str, schema: Schema) -> Result<Dataset, DatasetError> {
    let file: AnnotationFile = serde_json::from_str(text)?;
    Dataset::from_file(&file, schema)
}

pub fn load_annotations(path: &Path, schema: Schema) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_annotations(&text, schema)
}

pub fn save_annotations(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let text = serde_json::to_string(&dataset.to_file())?;
    fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{
      "version": 1,
      "categories": ["person", "cup", "knife", "cake"],
      "actions": [{"name": "drink", "roles": ["object"]},
                  {"name": "cut", "roles": ["object", "instrument"]},
                  {"name": "look", "roles": ["object"], "person_targets": true},
                  {"name": "smile"}],
      "scenes": [{
        "image_id": 7, "width": 640, "height": 480,
        "persons": [[10, 20, 110, 300], [300, 20, 380, 260]],
        "objects": [{"box": [90, 100, 130, 140], "category": "cup"},
                    {"box": [150, 200, 170, 260], "category": "knife"},
                    {"box": [150, 260, 260, 300], "category": "cake", "ignore": true}],
        "interactions": [{"person": 0, "action": "drink", "role": "object", "object": 0},
                         {"person": 0, "action": "smile", "role": "none"},
                         {"person": 1, "action": "cut", "role": "instrument", "object": 1},
                         {"person": 1, "action": "cut", "role": "object", "object": 2},
                         {"person": 1, "action": "look", "role": "object", "object": 0, "object_is_person": true},
                         {"person": 0, "action": "look", "role": "object", "object": null}]
      }]
    }"#;

    #[test]
    fn parses_fixture() {
        let ds = parse_annotations(FIXTURE, Schema::VcocoLike).unwrap();
        assert_eq!(ds.scenes.len(), 1);
        let s = &ds.scenes[0];
        assert_eq!(s.interactions.len(), 6);
        assert_eq!(s.interactions[4].target, Some(Target::Person(0)));
        assert_eq!(s.interactions[5].target, None);
        assert!(s.objects[2].ignore);
        assert_eq!(s.person_verbs(1, &ds.registry).len(), 2);
    }

    #[test]
    fn empty_scene_list() {
        let text = r#"{"version": 1, "categories": ["person"], "actions": [], "scenes": []}"#;
        assert!(parse_annotations(text, Schema::VcocoLike).unwrap().scenes.is_empty());
    }

    #[test]
    fn round_trip_field_for_field() {
        let ds = parse_annotations(FIXTURE, Schema::VcocoLike).unwrap();
        let original: AnnotationFile = serde_json::from_str(FIXTURE).unwrap();
        assert_eq!(ds.to_file(), original);
        let again = Dataset::from_file(&ds.to_file(), Schema::VcocoLike).unwrap();
        assert_eq!(again, ds);
    }

    fn with_interaction(rec: &str) -> String {
        FIXTURE.replace(
            r#"{"person": 0, "action": "smile", "role": "none"}"#,
            rec,
        )
    }

    #[test]
    fn negative_object_index_is_rejected() {
        let text = with_interaction(r#"{"person": 0, "action": "drink", "role": "object", "object": -1}"#);
        let err = parse_annotations(&text, Schema::VcocoLike).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("scene 7") && msg.contains("interaction 1"), "{msg}");
    }

    #[test]
    fn other_record_errors() {
        for (rec, needle) in [
            (r#"{"person": 0, "action": "fly", "role": "object", "object": 0}"#, "unknown action"),
            (r#"{"person": 0, "action": "drink", "role": "object", "object": 9}"#, "dangling object"),
            (r#"{"person": 5, "action": "smile", "role": "none"}"#, "dangling person"),
            (r#"{"person": 0, "action": "smile", "role": "none", "object": 0}"#, "role-less"),
            (r#"{"person": 0, "action": "drink", "role": "instrument", "object": 0}"#, "unknown action"),
        ] {
            let err = parse_annotations(&with_interaction(rec), Schema::VcocoLike).unwrap_err();
            assert!(err.to_string().contains(needle), "{err}");
        }
        let bad_box = FIXTURE.replace("[90, 100, 130, 140]", "[90, 100, 80, 140]");
        let err = parse_annotations(&bad_box, Schema::VcocoLike).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
        let unknown_key = FIXTURE.replace(r#""width": 640"#, r#""width": 640, "depth": 3"#);
        assert!(parse_annotations(&unknown_key, Schema::VcocoLike).is_err());
    }

    #[test]
    fn hico_schema_ignores_unreferenced_objects() {
        let text = FIXTURE.replace(
            r#"{"box": [150, 260, 260, 300], "category": "cake", "ignore": true}"#,
            r#"{"box": [150, 260, 260, 300], "category": "cake"}, {"box": [500, 400, 520, 420], "category": "cup"}"#,
        );
        let v = parse_annotations(&text, Schema::VcocoLike).unwrap();
        let h = parse_annotations(&text, Schema::HicoLike).unwrap();
        assert!(!v.scenes[0].objects[3].ignore);
        assert!(h.scenes[0].objects[3].ignore);
        assert!(!h.scenes[0].objects[2].ignore);
    }
}
