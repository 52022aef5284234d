use std::path::{Path, PathBuf};

use anseg::dataset::{build_splits, generate_scene, read_manifest, scene_from_str, scene_to_string, write_manifest, write_scene, GeneratorConfig, SplitConfig};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against the golden file, rewriting it first under `ANSEG_BLESS`.
fn check_golden(name: &str, text: &str) {
    let path = golden(name);
    if std::env::var_os("ANSEG_BLESS").is_some() {
        std::fs::write(&path, text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&path).unwrap(), "{name} differs from its golden file");
}

fn small() -> GeneratorConfig {
    GeneratorConfig {
        points: 24,
        min_points_per_part: 2,
    }
}

#[test]
fn scene_file_matches_golden_sample() {
    let scene = generate_scene("mug", 7, &small()).unwrap();
    let text = scene_to_string(&scene).unwrap();
    check_golden("scene.json", &text);
    let back = scene_from_str(&std::fs::read_to_string(golden("scene.json")).unwrap(), "golden").unwrap();
    assert_eq!(back, scene);
}

#[test]
fn manifest_matches_golden_sample() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    std::fs::create_dir(&scenes).unwrap();
    for (cat, seed) in [("chair", 1), ("chair", 2), ("chair", 3), ("chair", 4), ("mug", 5), ("bed", 6)] {
        let s = generate_scene(cat, seed, &small()).unwrap();
        write_scene(&s, &scenes.join(format!("{}.json", s.scene_id))).unwrap();
    }
    let manifest = build_splits(dir.path(), &SplitConfig::default()).unwrap();
    let path = dir.path().join("manifest.json");
    write_manifest(&manifest, &path).unwrap();
    check_golden("manifest.json", &std::fs::read_to_string(&path).unwrap());
    assert_eq!(read_manifest(&golden("manifest.json")).unwrap(), manifest);
}
