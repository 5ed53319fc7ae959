//! Replays the checked-in fuzz seeds through the decoders so that the
//! corpus stays valid as the formats evolve.

use std::path::{Path, PathBuf};

use uapath::data::{decode_manifest, decode_png};
use uapath::mil::decode_bag;
use uapath::model::decode_checkpoint;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let b = std::fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn binary_seeds_decode() {
    for (p, b) in seeds("checkpoint") {
        decode_checkpoint(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("bag_cache") {
        decode_bag(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("png") {
        decode_png(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn manifest_seeds_parse_or_fail_cleanly() {
    let mut parsed = 0;
    for (p, b) in seeds("manifest_csv") {
        if decode_manifest(&b, &p).is_ok() {
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}

#[test]
fn truncated_seeds_are_rejected() {
    for target in ["checkpoint", "bag_cache", "png"] {
        for (_, b) in seeds(target) {
            // the png crate stops at the image data, so a clipped IEND
            // chunk is not an error
            let cuts = if target == "png" { vec![0, 1, b.len() / 2] } else { vec![0, 1, b.len() / 2, b.len() - 1] };
            for cut in cuts {
                let t = &b[..cut];
                let ok = match target {
                    "checkpoint" => decode_checkpoint(t).is_ok(),
                    "bag_cache" => decode_bag(t).is_ok(),
                    _ => decode_png(t).is_ok(),
                };
                assert!(!ok, "{target} accepted {cut} of {} bytes", b.len());
            }
        }
    }
}
