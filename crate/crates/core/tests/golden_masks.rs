//! Golden mask vectors generated by the reference implementation in
//! tools/golden_masks.py. A mismatch means the two implementations of the
//! documented RNG or of a mask construction have diverged.

use serde::Deserialize;

use miniclip_core::mask::{make_block_mask, make_grid_mask, make_random_mask};

#[derive(Deserialize)]
struct GoldenRow {
    strategy: String,
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    seed: u64,
    sample_index: u64,
    kept: Vec<usize>,
}

#[test]
fn masks_match_reference_implementation() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/masks.jsonl");
    let text = std::fs::read_to_string(path).expect("golden vectors present");
    let mut checked = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: GoldenRow = serde_json::from_str(line).expect("valid golden row");
        let mask = match row.strategy.as_str() {
            "random" => {
                make_random_mask(row.grid_h, row.grid_w, row.ratio, row.seed, row.sample_index)
            }
            "grid" => make_grid_mask(row.grid_h, row.grid_w, row.ratio),
            "block" => {
                make_block_mask(row.grid_h, row.grid_w, row.ratio, row.seed, row.sample_index)
            }
            other => panic!("unknown strategy {other}"),
        }
        .unwrap_or_else(|e| {
            panic!(
                "{} {}x{} r={} failed: {e}",
                row.strategy, row.grid_h, row.grid_w, row.ratio
            )
        });
        assert_eq!(
            mask.kept, row.kept,
            "{} {}x{} r={} seed={} idx={} diverged",
            row.strategy, row.grid_h, row.grid_w, row.ratio, row.seed, row.sample_index
        );
        checked += 1;
    }
    assert!(checked >= 15, "golden file unexpectedly short: {checked} rows");
}
