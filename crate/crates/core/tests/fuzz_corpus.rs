use std::path::{Path, PathBuf};

use pgcam_core::cam::decode_pgsm;
use pgcam_core::localizer::parse_boxes;
use pgcam_core::models::Checkpoint;
use pgcam_core::phantom::{decode_pgm, parse_manifest};
use pgcam_core::report::RunReport;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(p: &Path, b: &[u8]) -> String {
    String::from_utf8(b.to_vec()).unwrap_or_else(|_| panic!("{} is not UTF-8", p.display()))
}

#[test]
fn every_seed_is_accepted_by_its_decoder() {
    for (p, b) in seeds("checkpoint") {
        Checkpoint::decode(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("pgsm") {
        decode_pgsm(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("pgm") {
        decode_pgm(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("manifest") {
        parse_manifest(&text(&p, &b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("boxfile") {
        parse_boxes(&text(&p, &b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("report") {
        RunReport::parse(&text(&p, &b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
