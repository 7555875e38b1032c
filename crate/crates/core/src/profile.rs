//! Canonical resource bundles and a minimal profile schema to validate them.
//!
//! Resources are FHIR-shaped JSON objects (`resourceType`, `id`, `subject`
//! plus body fields). Observations and Conditions are told apart by their
//! `code`, which selects the profile they are validated against.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdf::{CohortDataset, ParticipantRecord, Value};
use crate::pairing::{Coding, MappedValue, RuleCatalog};

pub const DEFAULT_SCHEMA_JSON: &str = include_str!("../assets/profile-schema.json");

pub const RESOURCE_TYPES: [&str; 3] = ["Patient", "Observation", "Condition"];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("malformed resource: {0}")]
    Malformed(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A node in a resource body.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Scalar(Value),
    Coded(Coding),
    Quantity { value: f64, unit: Option<String> },
    Tree(BTreeMap<String, Node>),
    List(Vec<Node>),
}

impl Node {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Node::Scalar(v) => v.to_json(),
            Node::Coded(c) => serde_json::json!({"system": c.system, "code": c.code}),
            Node::Quantity { value, unit } => {
                let mut m = serde_json::Map::new();
                m.insert("value".into(), Value::Decimal(*value).to_json());
                if let Some(u) = unit {
                    m.insert("unit".into(), u.clone().into());
                }
                serde_json::Value::Object(m)
            }
            Node::Tree(t) => serde_json::Value::Object(t.iter().map(|(k, v)| (k.clone(), v.to_json())).collect()),
            Node::List(items) => serde_json::Value::Array(items.iter().map(Node::to_json).collect()),
        }
    }

    /// Objects shaped `{system, code}` become codings, `{value[, unit]}`
    /// with a numeric value become quantities.
    pub fn from_json(json: &serde_json::Value) -> Result<Node, ProfileError> {
        use serde_json::Value as J;
        Ok(match json {
            J::Array(items) => Node::List(items.iter().map(Node::from_json).collect::<Result<_, _>>()?),
            J::Object(map) => {
                let keys: Vec<&str> = map.keys().map(String::as_str).collect();
                match (map.get("system"), map.get("code"), map.get("value"), map.get("unit")) {
                    (Some(J::String(s)), Some(J::String(c)), None, None) if keys.len() == 2 => {
                        Node::Coded(Coding::new(s, c))
                    }
                    (None, None, Some(J::Number(n)), unit) if keys.len() == 1 + unit.is_some() as usize => {
                        let unit = match unit {
                            None => None,
                            Some(J::String(u)) => Some(u.clone()),
                            Some(other) => return Err(ProfileError::Malformed(format!("unit {other}"))),
                        };
                        Node::Quantity {
                            value: n.as_f64().unwrap_or(f64::NAN),
                            unit,
                        }
                    }
                    _ => Node::Tree(
                        map.iter()
                            .map(|(k, v)| Ok((k.clone(), Node::from_json(v)?)))
                            .collect::<Result<_, ProfileError>>()?,
                    ),
                }
            }
            scalar => Node::Scalar(Value::from_json(scalar).map_err(ProfileError::Malformed)?),
        })
    }

    pub fn flatten_list(&self) -> Vec<&Node> {
        match self {
            Node::List(items) => items.iter().flat_map(Node::flatten_list).collect(),
            other => vec![other],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resource {
    pub resource_type: String,
    pub id: String,
    pub subject: Option<String>,
    pub body: BTreeMap<String, Node>,
}

impl Resource {
    pub fn new(resource_type: &str, id: &str) -> Self {
        Self {
            resource_type: resource_type.to_string(),
            id: id.to_string(),
            subject: None,
            body: BTreeMap::new(),
        }
    }

    /// The code selecting this resource's profile.
    pub fn profile_code(&self) -> Option<&str> {
        match self.body.get("code") {
            Some(Node::Coded(c)) => Some(&c.code),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m: serde_json::Map<String, serde_json::Value> =
            self.body.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
        m.insert("resourceType".into(), self.resource_type.clone().into());
        m.insert("id".into(), self.id.clone().into());
        if let Some(s) = &self.subject {
            m.insert("subject".into(), s.clone().into());
        }
        serde_json::Value::Object(m)
    }

    pub fn from_json(json: &serde_json::Value) -> Result<Resource, ProfileError> {
        let map = json
            .as_object()
            .ok_or_else(|| ProfileError::Malformed("resource must be an object".into()))?;
        let text = |k: &str| map.get(k).and_then(|v| v.as_str()).map(str::to_string);
        let resource_type = text("resourceType").filter(|s| !s.is_empty());
        let id = text("id").filter(|s| !s.is_empty());
        let (Some(resource_type), Some(id)) = (resource_type, id) else {
            return Err(ProfileError::Malformed("resourceType and id are required".into()));
        };
        let mut body = BTreeMap::new();
        for (k, v) in map {
            if !matches!(k.as_str(), "resourceType" | "id" | "subject") {
                body.insert(k.clone(), Node::from_json(v)?);
            }
        }
        Ok(Resource {
            resource_type,
            id,
            subject: text("subject"),
            body,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceBundle {
    pub subject: String,
    pub resources: Vec<Resource>,
}

impl ResourceBundle {
    pub fn patient(&self) -> Option<&Resource> {
        self.resources.iter().find(|r| r.resource_type == "Patient")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "subject": self.subject,
            "resources": self.resources.iter().map(Resource::to_json).collect::<Vec<_>>(),
        })
    }

    /// Single-line JSON with sorted keys.
    pub fn to_json_line(&self) -> String {
        self.to_json().to_string()
    }

    pub fn from_json(json: &serde_json::Value) -> Result<ResourceBundle, ProfileError> {
        let subject = json["subject"]
            .as_str()
            .ok_or_else(|| ProfileError::Malformed("bundle subject missing".into()))?
            .to_string();
        let resources = json["resources"]
            .as_array()
            .ok_or_else(|| ProfileError::Malformed("bundle resources missing".into()))?
            .iter()
            .map(Resource::from_json)
            .collect::<Result<_, _>>()?;
        Ok(ResourceBundle { subject, resources })
    }

    pub fn from_json_line(line: &str) -> Result<ResourceBundle, ProfileError> {
        ResourceBundle::from_json(&serde_json::from_str(line)?)
    }
}

impl Serialize for ResourceBundle {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResourceBundle {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = serde_json::Value::deserialize(d)?;
        ResourceBundle::from_json(&json).map_err(serde::de::Error::custom)
    }
}

// --- Schema -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    Text,
    Integer,
    Decimal,
    Date,
    Coded,
    Quantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSet {
    pub system: String,
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    #[serde(default)]
    pub required: bool,
    pub min: u32,
    pub max: u32,
    #[serde(rename = "type")]
    pub field_type: FieldType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes: Option<CodeSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub resource_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    pub fields: BTreeMap<String, FieldSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSchema {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub version: String,
    pub profiles: Vec<Profile>,
}

impl ProfileSchema {
    pub fn from_json_str(text: &str) -> Result<ProfileSchema, ProfileError> {
        let schema: ProfileSchema = serde_json::from_str(text)?;
        schema.check()?;
        Ok(schema)
    }

    pub fn default_schema() -> ProfileSchema {
        ProfileSchema::from_json_str(DEFAULT_SCHEMA_JSON).expect("bundled schema is valid")
    }

    pub fn check(&self) -> Result<(), ProfileError> {
        for p in &self.profiles {
            if !RESOURCE_TYPES.contains(&p.resource_type.as_str()) {
                return Err(ProfileError::Schema(format!("unknown resource type {}", p.resource_type)));
            }
            for (name, f) in &p.fields {
                if f.required && f.min < 1 {
                    return Err(ProfileError::Schema(format!("{}.{name}: required field needs min >= 1", p.resource_type)));
                }
                if f.min > f.max {
                    return Err(ProfileError::Schema(format!("{}.{name}: min > max", p.resource_type)));
                }
            }
        }
        Ok(())
    }

    /// Profile keyed by resource type and (for coded resources) code.
    pub fn profile(&self, resource_type: &str, code: Option<&str>) -> Option<&Profile> {
        self.profiles
            .iter()
            .find(|p| p.resource_type == resource_type && p.code.as_deref() == code)
    }

    pub fn profile_for_target(&self, resource_type: &str, profile: &str) -> Option<&Profile> {
        self.profile(resource_type, (!profile.is_empty()).then_some(profile))
    }
}

// --- Validation ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    MissingRequired,
    Cardinality,
    Type,
    Unit,
    Code,
    /// Bundle linkage: the subject reference of a resource.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub resource_id: String,
    pub field: String,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {:?}: {}", self.resource_id, self.field, self.kind, self.message)
    }
}

fn type_matches(node: &Node, ty: FieldType) -> bool {
    match (node, ty) {
        (Node::Scalar(Value::Text(_)), FieldType::Text) => true,
        (Node::Scalar(Value::Integer(_)), FieldType::Integer | FieldType::Decimal) => true,
        (Node::Scalar(Value::Decimal(_)), FieldType::Decimal) => true,
        (Node::Scalar(Value::Date(_)), FieldType::Date) => true,
        (Node::Coded(_), FieldType::Coded) => true,
        (Node::Quantity { .. }, FieldType::Quantity) => true,
        _ => false,
    }
}

fn check_field(resource: &Resource, name: &str, spec: &FieldSpec, out: &mut Vec<Violation>) {
    let mut push = |kind, message: String| {
        out.push(Violation {
            resource_id: resource.id.clone(),
            field: name.to_string(),
            kind,
            message,
        })
    };
    let elements: Vec<&Node> = resource.body.get(name).map(Node::flatten_list).unwrap_or_default();
    let count = elements.len() as u32;
    if count == 0 && spec.min >= 1 {
        return push(ViolationKind::MissingRequired, "required field is missing".into());
    }
    if count < spec.min || count > spec.max {
        return push(
            ViolationKind::Cardinality,
            format!("{count} values, allowed {}..{}", spec.min, spec.max),
        );
    }
    for node in elements {
        if !type_matches(node, spec.field_type) {
            return push(ViolationKind::Type, format!("expected {:?}", spec.field_type));
        }
        match node {
            Node::Quantity { value, unit } => {
                if !value.is_finite() {
                    return push(ViolationKind::Type, "quantity value is not a finite number".into());
                }
                if unit.is_none() || (spec.unit.is_some() && unit != &spec.unit) {
                    return push(
                        ViolationKind::Unit,
                        format!("unit {:?}, expected {:?}", unit, spec.unit),
                    );
                }
            }
            Node::Coded(c) => {
                if let Some(set) = &spec.codes {
                    if c.system != set.system || !set.codes.contains(&c.code) {
                        return push(ViolationKind::Code, format!("{}|{} not in value set", c.system, c.code));
                    }
                }
            }
            _ => {}
        }
    }
}

pub fn validate_resource(resource: &Resource, schema: &ProfileSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    let code = resource.profile_code();
    let profile = match resource.resource_type.as_str() {
        "Patient" => schema.profile("Patient", None),
        other => match code {
            Some(c) => schema.profile(other, Some(c)),
            None => None,
        },
    };
    let Some(profile) = profile else {
        out.push(Violation {
            resource_id: resource.id.clone(),
            field: "code".into(),
            kind: ViolationKind::Code,
            message: format!("no {} profile for code {:?}", resource.resource_type, code),
        });
        return out;
    };
    for name in resource.body.keys() {
        if !profile.fields.contains_key(name) {
            out.push(Violation {
                resource_id: resource.id.clone(),
                field: name.clone(),
                kind: ViolationKind::Cardinality,
                message: "field not allowed by profile".into(),
            });
        }
    }
    for (name, spec) in &profile.fields {
        check_field(resource, name, spec, &mut out);
    }
    out
}

/// Conformance check; an empty result means the bundle conforms.
pub fn validate(bundle: &ResourceBundle, schema: &ProfileSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    let patients = bundle.resources.iter().filter(|r| r.resource_type == "Patient").count();
    if patients != 1 {
        out.push(Violation {
            resource_id: bundle.subject.clone(),
            field: "Patient".into(),
            kind: ViolationKind::Cardinality,
            message: format!("{patients} Patient resources, expected exactly 1"),
        });
    }
    for r in &bundle.resources {
        let subject = if r.resource_type == "Patient" {
            Some(&r.id)
        } else {
            r.subject.as_ref()
        };
        if subject != Some(&bundle.subject) {
            out.push(Violation {
                resource_id: r.id.clone(),
                field: "subject".into(),
                kind: ViolationKind::Reference,
                message: format!("references {:?}, bundle subject {:?}", subject, bundle.subject),
            });
        }
        out.extend(validate_resource(r, schema));
    }
    out
}

// --- Building -----------------------------------------------------------------

/// Turns participants into bundles with a fixed rule catalog and schema.
/// Construction fails fast when a rule targets a field the schema lacks.
#[derive(Debug, Clone)]
pub struct BundleBuilder {
    catalog: RuleCatalog,
    schema: ProfileSchema,
    /// (resource type, profile code) in first-seen catalog order, Patient first.
    groups: Vec<(String, String)>,
}

impl BundleBuilder {
    pub fn new(catalog: RuleCatalog, schema: ProfileSchema) -> Result<BundleBuilder, ProfileError> {
        let mut groups = vec![("Patient".to_string(), String::new())];
        for rule in catalog.rules() {
            let t = &rule.target;
            let profile = schema
                .profile_for_target(&t.resource_type, &t.profile)
                .ok_or_else(|| ProfileError::Config(format!("rule {}: no profile for {t}", rule.name)))?;
            if !profile.fields.contains_key(&t.field) {
                return Err(ProfileError::Config(format!("rule {}: field {t} not in schema", rule.name)));
            }
            let key = (t.resource_type.clone(), t.profile.clone());
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        if schema.profile("Patient", None).is_none() {
            return Err(ProfileError::Config("schema has no Patient profile".into()));
        }
        Ok(BundleBuilder { catalog, schema, groups })
    }

    pub fn schema(&self) -> &ProfileSchema {
        &self.schema
    }

    pub fn catalog(&self) -> &RuleCatalog {
        &self.catalog
    }

    fn to_node(value: MappedValue, spec: &FieldSpec) -> Node {
        match spec.field_type {
            FieldType::Coded => match value.code {
                Some(c) => Node::Coded(c),
                None => Node::Scalar(value.value),
            },
            FieldType::Quantity => match value.value.as_f64() {
                Some(v) => Node::Quantity { value: v, unit: value.unit },
                None => Node::Scalar(value.value),
            },
            _ => Node::Scalar(value.value),
        }
    }

    pub fn build(&self, p: &ParticipantRecord) -> ResourceBundle {
        let mut bodies: Vec<BTreeMap<String, Node>> = vec![BTreeMap::new(); self.groups.len()];
        for rule in self.catalog.rules() {
            let Some(value) = rule.evaluate(p) else { continue };
            let t = &rule.target;
            let group = self
                .groups
                .iter()
                .position(|(rt, pr)| rt == &t.resource_type && pr == &t.profile)
                .expect("grouped at construction");
            let spec = &self
                .schema
                .profile_for_target(&t.resource_type, &t.profile)
                .expect("checked at construction")
                .fields[&t.field];
            bodies[group].insert(t.field.clone(), Self::to_node(value, spec));
        }
        let mut resources = Vec::new();
        for ((resource_type, profile), mut body) in self.groups.iter().zip(bodies) {
            if resource_type == "Patient" {
                let mut r = Resource::new("Patient", &p.id);
                r.body = body;
                resources.insert(0, r);
                continue;
            }
            if body.is_empty() {
                continue;
            }
            if !body.contains_key("code") {
                let spec = self.schema.profile_for_target(resource_type, profile).and_then(|pr| pr.fields.get("code"));
                let system = spec.and_then(|s| s.codes.as_ref()).map(|c| c.system.clone()).unwrap_or_default();
                body.insert("code".into(), Node::Coded(Coding { system, code: profile.clone() }));
            }
            resources.push(Resource {
                resource_type: resource_type.clone(),
                id: format!("{}-{profile}", p.id),
                subject: Some(p.id.clone()),
                body,
            });
        }
        ResourceBundle {
            subject: p.id.clone(),
            resources,
        }
    }

    /// Builds every participant's bundle in parallel, preserving input order.
    pub fn build_all(&self, dataset: &CohortDataset) -> Vec<ResourceBundle> {
        dataset.participants().par_iter().map(|p| self.build(p)).collect()
    }
}

/// One bundle per line, in input order.
pub fn write_bundles(bundles: &[ResourceBundle]) -> String {
    let lines: Vec<String> = bundles.par_iter().map(ResourceBundle::to_json_line).collect();
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn read_bundles(text: &str) -> Result<Vec<ResourceBundle>, ProfileError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ResourceBundle::from_json_line)
        .collect()
}
