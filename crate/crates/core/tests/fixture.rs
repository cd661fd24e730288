//! The worked example plan linearizes to its published token sequence.

use std::time::Instant;

use qplan_core::linearize::{delinearize, linearize, TokenSequence};
use qplan_core::parse_plan_document;

const FIG1: &str = include_str!("fixtures/fig1.json");

/// The published sequence, verbatim.
const PUBLISHED: &str = "(Filter--, (Sort--, (Aggregate--, (Join-Hash-, (Loop--Nested, (Join-Hash-, (Hash--, (Loop--Nested, (Loop--Nested, Scan-Index-, Scan-Seq-) Scan-Heap-Bitmap) ) Scan-Index-Bitmap) Scan-Index-) Scan-Seq-))))";

/// The published sequence with its one irregular space (between two closing
/// brackets) removed; every other separator follows the rendering rule.
const RENDERED: &str = "(Filter--, (Sort--, (Aggregate--, (Join-Hash-, (Loop--Nested, (Join-Hash-, (Hash--, (Loop--Nested, (Loop--Nested, Scan-Index-, Scan-Seq-) Scan-Heap-Bitmap)) Scan-Index-Bitmap) Scan-Index-) Scan-Seq-))))";

#[test]
fn worked_plan_renders_published_sequence() {
    let start = Instant::now();
    let tree = parse_plan_document(FIG1).unwrap();
    assert_eq!(tree.node_count, 15);
    let seq = linearize(&tree).unwrap();
    assert_eq!(seq.render(), RENDERED);
    assert_eq!(seq, TokenSequence::parse(PUBLISHED).unwrap());
    assert_eq!(PUBLISHED.replace(") )", "))"), RENDERED);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn worked_plan_token_counts() {
    let seq = linearize(&parse_plan_document(FIG1).unwrap()).unwrap();
    let opens = seq.tokens.iter().filter(|t| t.is_open()).count();
    let closes = seq.tokens.iter().filter(|t| t.is_close()).count();
    assert_eq!((opens, closes), (9, 9));
    assert_eq!(seq.len(), 15 + 18);
    assert_eq!(seq.with_specials().len(), seq.len() + 2);
}

#[test]
fn worked_plan_round_trips() {
    let tree = parse_plan_document(FIG1).unwrap();
    let back = delinearize(&linearize(&tree).unwrap()).unwrap();
    let shape = |t: &qplan_core::PlanTree| t.nodes().iter().map(|n| n.triple.clone()).collect::<Vec<_>>();
    assert_eq!(shape(&back), shape(&tree.normalized()));
    let again = qplan_core::plan::parse_plan_value(tree.to_canonical_value()).unwrap();
    assert_eq!(again, tree);
}
