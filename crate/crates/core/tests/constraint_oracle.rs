//! The reply validator must accept exactly the instances a standard JSON
//! Schema validator accepts under the rendered constraint document.

use ctxpipe::decomp::{build_level_constraint, render_constraint_document, validate_output};
use ctxpipe::schema::load_schema;
use ctxpipe::{CategoryId, FieldSpec, LevelConstraint};
use jsonschema::JSONSchema;
use proptest::prelude::*;
use serde_json::{Map, Value};

fn constraint(n_categories: usize, fields: &[bool]) -> LevelConstraint {
    let allowed: Vec<(CategoryId, String)> =
        (0..n_categories).map(|i| (CategoryId::new(format!("cat_{i}")).unwrap(), format!("Category {i}."))).collect();
    LevelConstraint {
        fallback: allowed.last().unwrap().0.clone(),
        allowed_categories: allowed,
        fields: fields
            .iter()
            .enumerate()
            .map(|(i, r)| FieldSpec { name: format!("field_{i}"), description: "A detail.".into(), required: *r })
            .collect(),
    }
}

fn value_strategy(n_categories: usize) -> impl Strategy<Value = Value> {
    prop_oneof![
        (0..n_categories + 2).prop_map(|i| Value::from(format!("cat_{i}"))),
        Just(Value::Null),
        any::<i32>().prop_map(Value::from),
        "[a-z ]{0,12}".prop_map(Value::from),
        Just(Value::Bool(true)),
        Just(serde_json::json!(["cat_0"])),
    ]
}

fn instance_strategy(n_categories: usize, n_fields: usize) -> impl Strategy<Value = Value> {
    let mut keys = vec!["input_type".to_string(), "extra".to_string()];
    keys.extend((0..n_fields + 1).map(|i| format!("field_{i}")));
    prop_oneof![
        9 => prop::collection::btree_map(prop::sample::select(keys), value_strategy(n_categories), 0..6)
            .prop_map(|m| Value::Object(m.into_iter().collect::<Map<String, Value>>())),
        1 => value_strategy(n_categories),
    ]
}

fn case_strategy() -> impl Strategy<Value = (usize, Vec<bool>, Value)> {
    (2usize..5, prop::collection::vec(any::<bool>(), 0..4))
        .prop_flat_map(|(n, fields)| {
            let nf = fields.len();
            (Just(n), Just(fields), instance_strategy(n, nf))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn validator_agrees_with_json_schema((n, fields, instance) in case_strategy()) {
        let c = constraint(n, &fields);
        let doc = render_constraint_document(&c);
        let compiled = JSONSchema::compile(&doc.schema).unwrap();
        let expected = compiled.is_valid(&instance);
        let got = validate_output(&instance.to_string(), &c);
        prop_assert_eq!(got.is_ok(), expected, "instance {} -> {:?}", instance, got);

        // Complete instances valid here are also valid on the wire.
        let strict = JSONSchema::compile(&doc.strict_schema()).unwrap();
        let complete = instance.as_object().is_some_and(|o| o.len() == 1 + fields.len());
        if expected && complete {
            prop_assert!(strict.is_valid(&instance));
        }
    }
}

#[test]
fn shipped_schema_levels_render_valid_documents() {
    for doc in [include_str!("../../../schemas/fig2.json"), include_str!("../../../schemas/fig4.json")] {
        let schema = load_schema(doc).unwrap();
        let mut prefixes: Vec<Vec<CategoryId>> = vec![vec![]];
        for path in schema.enumerate_paths() {
            for i in 1..path.len() {
                prefixes.push(path[..i].to_vec());
            }
        }
        for prefix in prefixes {
            let c = build_level_constraint(&schema, &prefix).unwrap();
            let rendered = render_constraint_document(&c);
            JSONSchema::compile(&rendered.schema).unwrap();
            JSONSchema::compile(&rendered.strict_schema()).unwrap();
            let minimal = serde_json::json!({"input_type": c.fallback.as_str()});
            assert!(validate_output(&minimal.to_string(), &c).is_ok());
        }
    }
}
