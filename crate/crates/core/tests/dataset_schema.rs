//! Table-driven checks of the dataset loader: every documented violation is
//! rejected with its own kind and line, and nothing else is.

use mmk_core::corpus::{parse_dataset, LoadOptions, SchemaViolation};
use mmk_core::Error;

const GOOD: &str = r#"{"id":"r1","utterances":[{"speaker":"patient","text":"i have a fever"},{"speaker":"doctor","text":"rest well"}],"visual":[0.1,0.2],"mcs":"fever","di":"flu","summary":"fever and flu"}"#;

fn second() -> String {
    GOOD.replace("\"r1\"", "\"r2\"")
}

fn opts() -> LoadOptions {
    LoadOptions {
        d_vis: Some(2),
        require_targets: true,
    }
}

fn rejected(bad: &str) -> (usize, String, SchemaViolation) {
    let text = format!("{GOOD}\n{bad}\n");
    match parse_dataset(&text, opts()) {
        Err(Error::Schema {
            line, field, kind, ..
        }) => (line, field, kind),
        other => panic!("`{bad}` not rejected: {other:?}"),
    }
}

#[test]
fn each_violation_is_reported_with_kind_line_and_field() {
    use SchemaViolation::*;
    let g = second();
    let table: Vec<(String, SchemaViolation, &str)> = vec![
        (g[..g.len() - 1].to_string(), MalformedJson, "$"),
        ("\"just a string\"".into(), NotAnObject, "$"),
        (g.replace(r#","mcs":"fever""#, ""), MissingField, "mcs"),
        (
            g.replace(
                r#"{"speaker":"doctor","text":"rest well"}"#,
                r#"{"text":"rest well"}"#,
            ),
            MissingField,
            "utterances[1].speaker",
        ),
        (
            g.replace(r#""di":"flu""#, r#""di":["flu"]"#),
            WrongType,
            "di",
        ),
        (
            g.replace(r#""utterances":["#, r#""utterances":{"x":["#)
                .replace(r#"}],"visual""#, r#"}]},"visual""#),
            WrongType,
            "utterances",
        ),
        (
            g.replace("[0.1,0.2]", r#"[0.1,"a"]"#),
            WrongType,
            "visual[1]",
        ),
        (g.replace("\"r2\"", "\"\""), EmptyId, "id"),
        (GOOD.to_string(), DuplicateId, "id"),
        (
            g.replace(r#",{"speaker":"doctor","text":"rest well"}"#, ""),
            TooFewUtterances,
            "utterances",
        ),
        (
            g.replace(r#""speaker":"patient""#, r#""speaker":"doctor""#),
            FirstSpeakerNotPatient,
            "utterances[0].speaker",
        ),
        (
            g.replace(r#""speaker":"doctor""#, r#""speaker":"Nurse""#),
            UnknownSpeaker,
            "utterances[1].speaker",
        ),
        (
            g.replace("rest well", r" \t "),
            EmptyUtterance,
            "utterances[1].text",
        ),
        (g.replace("[0.1,0.2]", "[0.1]"), VisualDimension, "visual"),
        (
            g.replace(r#""summary":"fever and flu""#, r#""summary":"  ""#),
            EmptyTarget,
            "summary",
        ),
    ];
    for (bad, kind, field) in &table {
        let (line, got_field, got_kind) = rejected(bad);
        assert_eq!((line, got_kind), (2, *kind), "{bad}");
        assert_eq!(got_field, *field, "{bad}");
    }
}

#[test]
fn valid_variations_are_accepted() {
    let g = second();
    for ok in [
        g.replace(r#","visual":[0.1,0.2]"#, ""),
        g.replace("[0.1,0.2]", "null"),
        g.replace(
            r#""id":"r2""#,
            r#""id":"r2","source":"extra fields are ignored""#,
        ),
        g.replace("rest well", "répondez s'il vous plaît"),
    ] {
        let text = format!("{GOOD}\n{ok}\n");
        let d = parse_dataset(&text, opts()).unwrap_or_else(|e| panic!("{ok}: {e}"));
        assert_eq!(d.len(), 2);
    }
}

#[test]
fn blank_lines_keep_line_numbers() {
    let text = format!(
        "\n{GOOD}\n\n   \n{}\n",
        second().replace("[0.1,0.2]", "[1.0]")
    );
    match parse_dataset(&text, opts()).unwrap_err() {
        Error::Schema { line, .. } => assert_eq!(line, 5),
        e => panic!("{e}"),
    }
}

#[test]
fn visual_width_defaults_to_first_record() {
    let o = LoadOptions {
        d_vis: None,
        require_targets: true,
    };
    let text = format!(
        "{GOOD}\n{}\n",
        second().replace("[0.1,0.2]", "[0.1,0.2,0.3]")
    );
    match parse_dataset(&text, o).unwrap_err() {
        Error::Schema { line, kind, .. } => {
            assert_eq!((line, kind), (2, SchemaViolation::VisualDimension))
        }
        e => panic!("{e}"),
    }
}
