//! Interface documents generated from `api` signatures.
//!
//! Both flavors describe the canonical value text, not an idealized JSON
//! mapping: an `Int` parameter is an object `{"$int": "<decimal>"}` on the
//! wire, and the schema says exactly that. A client validated against the
//! generated document therefore produces bytes the runtime decodes.

use serde_json::{json, Map, Value as Json};

use super::escape_key;
use crate::canon;
use crate::heap::API_RESULT;
use crate::lang::{program_hash, EnumDecl, FnKind, FunctionDecl, Program, TypeExpr};

const INT_SCHEMA: &str = "edgekernel.Int";
const BYTES_SCHEMA: &str = "edgekernel.ByteBuffer";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// OpenAPI 3.0.3: one `POST /<api>` per entry point.
    OpenApi,
    /// OpenRPC 1.2.6: one by-name method per entry point.
    JsonRpc,
}

impl Flavor {
    pub fn parse(s: &str) -> Option<Flavor> {
        match s {
            "openapi" => Some(Flavor::OpenApi),
            "jsonrpc" | "openrpc" => Some(Flavor::JsonRpc),
            _ => None,
        }
    }
}

/// The interface document for every `api` in `program`.
pub fn emit_bindings(program: &Program, title: &str, flavor: Flavor) -> Json {
    let version = format!("0.0.0+{}", &program_hash(program)[..12]);
    let gen = SchemaGen { flavor };
    let apis: Vec<&FunctionDecl> = program.functions.iter().filter(|f| f.kind == FnKind::Api).collect();
    let mut schemas = Map::new();
    schemas.insert(INT_SCHEMA.into(), int_schema());
    schemas.insert(BYTES_SCHEMA.into(), bytes_schema());
    for e in &program.enums {
        schemas.insert(e.name.clone(), gen.enum_schema(e));
    }
    match flavor {
        Flavor::OpenApi => {
            let mut paths = Map::new();
            for f in apis {
                let params: Vec<(String, TypeExpr)> = f.params.iter().map(|p| (p.name.clone(), p.ty.clone())).collect();
                paths.insert(
                    format!("/{}", f.name),
                    json!({
                        "post": {
                            "operationId": f.name,
                            "requestBody": {
                                "required": true,
                                "content": {"application/json": {"schema": gen.record(&params)}}
                            },
                            "responses": {
                                "200": {
                                    "description": "the api's result",
                                    "content": {"application/json": {"schema": gen.schema(&f.ret)}}
                                },
                                "500": {
                                    "description": "a typed failure object",
                                    "content": {"application/json": {"schema": failure_schema()}}
                                }
                            }
                        }
                    }),
                );
            }
            json!({
                "openapi": "3.0.3",
                "info": {"title": title, "version": version},
                "paths": paths,
                "components": {"schemas": schemas}
            })
        }
        Flavor::JsonRpc => {
            let methods: Vec<Json> = apis
                .iter()
                .map(|f| {
                    let params: Vec<Json> = f
                        .params
                        .iter()
                        .map(|p| json!({"name": p.name, "required": true, "schema": gen.schema(&p.ty)}))
                        .collect();
                    json!({
                        "name": f.name,
                        "paramStructure": "by-name",
                        "params": params,
                        "result": {"name": "result", "schema": gen.schema(&f.ret)}
                    })
                })
                .collect();
            json!({
                "openrpc": "1.2.6",
                "info": {"title": title, "version": version},
                "methods": methods,
                "components": {"schemas": schemas}
            })
        }
    }
}

/// Pretty, key-sorted document text.
pub fn render_bindings(program: &Program, title: &str, flavor: Flavor) -> String {
    canon::to_pretty(&emit_bindings(program, title, flavor))
}

struct SchemaGen {
    flavor: Flavor,
}

fn reference(name: &str) -> Json {
    json!({"$ref": format!("#/components/schemas/{name}")})
}

fn int_schema() -> Json {
    json!({
        "type": "object",
        "required": ["$int"],
        "additionalProperties": false,
        "properties": {"$int": {"type": "string", "pattern": "^-?(0|[1-9][0-9]*)$"}}
    })
}

fn bytes_schema() -> Json {
    json!({
        "type": "object",
        "required": ["$bytes"],
        "additionalProperties": false,
        "properties": {"$bytes": {"type": "string", "format": "byte"}}
    })
}

fn failure_schema() -> Json {
    json!({
        "type": "object",
        "required": ["kind", "message"],
        "properties": {"kind": {"type": "string"}, "message": {"type": "string"}}
    })
}

impl SchemaGen {
    fn schema(&self, t: &TypeExpr) -> Json {
        match t {
            TypeExpr::Unit => match self.flavor {
                // 3.0 has no null type; a nullable schema admitting only null.
                Flavor::OpenApi => json!({"nullable": true, "enum": [null]}),
                Flavor::JsonRpc => json!({"type": "null"}),
            },
            TypeExpr::Bool => json!({"type": "boolean"}),
            TypeExpr::Int => reference(INT_SCHEMA),
            TypeExpr::String => json!({"type": "string"}),
            TypeExpr::Bytes => reference(BYTES_SCHEMA),
            TypeExpr::Any => json!({}),
            TypeExpr::List(inner) => json!({"type": "array", "items": self.schema(inner)}),
            TypeExpr::Record(fields) => self.record(fields),
            TypeExpr::ApiResult(ok, err) => json!({
                "oneOf": [
                    self.variant(API_RESULT, "Success", &[("value".into(), (**ok).clone())]),
                    self.variant(API_RESULT, "Error", &[("info".into(), (**err).clone())]),
                ]
            }),
            TypeExpr::Named(n) => reference(n),
        }
    }

    fn record(&self, fields: &[(String, TypeExpr)]) -> Json {
        let mut props = Map::new();
        let mut required = Vec::new();
        for (k, t) in fields {
            let key = escape_key(k);
            props.insert(key.clone(), self.schema(t));
            required.push(Json::String(key));
        }
        let mut out = json!({"type": "object", "additionalProperties": false, "properties": props});
        if !required.is_empty() {
            out["required"] = Json::Array(required);
        }
        out
    }

    fn variant(&self, enum_name: &str, variant: &str, fields: &[(String, TypeExpr)]) -> Json {
        let mut out = self.record(fields);
        out["properties"]["$enum"] = json!({"type": "string", "enum": [enum_name]});
        out["properties"]["$variant"] = json!({"type": "string", "enum": [variant]});
        let mut required = vec![json!("$enum"), json!("$variant")];
        if let Some(Json::Array(r)) = out.get("required") {
            required.extend(r.iter().cloned());
        }
        out["required"] = Json::Array(required);
        out
    }

    fn enum_schema(&self, e: &EnumDecl) -> Json {
        let variants: Vec<Json> = e.variants.iter().map(|v| self.variant(&e.name, &v.name, &v.fields)).collect();
        json!({"oneOf": variants})
    }
}
