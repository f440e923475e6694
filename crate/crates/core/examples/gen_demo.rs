//! Regenerates `fixtures/demo/` (demo corpus plus recorded transcripts).
//!
//! cargo run -p forumint-core --example gen_demo [-- <out-dir>]

use std::path::PathBuf;

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo"));
    let scratch = tempfile::tempdir().expect("scratch dir");
    let fixtures = forumint_core::demo::render_fixtures(scratch.path()).expect("render fixtures");
    std::fs::create_dir_all(&out).expect("create output dir");
    std::fs::write(out.join("corpus.jsonl"), fixtures.corpus_jsonl).expect("write corpus");
    std::fs::write(out.join("transcripts.jsonl"), fixtures.transcripts_jsonl)
        .expect("write transcripts");
    println!("wrote {}", out.display());
}
