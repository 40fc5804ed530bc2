//! End-to-end run of the binary: synthetic data through evaluation.

use std::path::Path;
use std::process::Command;

fn facetalk(args: &[&str], dir: &Path) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_facetalk"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.success(), text)
}

#[test]
fn full_pipeline_via_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("tiny.toml"),
        "[dataset]\nmin_duration_s = 0.8\n\n[train]\nstage1_steps = 2\nstage2_steps = 2\na2m_steps = 2\nbatch_size = 1\n",
    )
    .unwrap();
    let cfg = &["--config", "tiny.toml"];

    let (ok, text) = facetalk(
        &[&["synth-data", "--clips", "2", "--seed", "5", "--duration", "1.2", "--out", "raw"], cfg as &[_]].concat(),
        dir,
    );
    assert!(ok, "{text}");

    let (ok, text) = facetalk(
        &[&["ingest", "--in", "raw", "--out", "data"], cfg as &[_]].concat(),
        dir,
    );
    assert!(ok, "{text}");
    assert!(text.contains("accepted 2 clips"), "{text}");

    let (ok, text) = facetalk(
        &[&["train", "--stage", "1", "--data", "data", "--out", "run"], cfg as &[_]].concat(),
        dir,
    );
    assert!(ok, "{text}");
    assert!(text.contains("stage 1 done"), "{text}");

    let (ok, text) = facetalk(
        &[&["train", "--stage", "2", "--data", "data", "--out", "run"], cfg as &[_]].concat(),
        dir,
    );
    assert!(ok, "{text}");
    assert!(text.contains("stage 2 done"), "{text}");

    // Use one ingested clip's first frame and audio as the driving inputs.
    let first_id = std::fs::read_dir(dir.join("data"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .min()
        .unwrap();
    let ref_image = format!("data/{first_id}/frames/000000.png");
    let audio = format!("data/{first_id}/audio.wav");

    let (ok, text) = facetalk(
        &[
            &[
                "infer",
                "--checkpoint",
                "run/stage2",
                "--ref-image",
                &ref_image,
                "--audio",
                &audio,
                "--caption",
                "a calm face",
                "--seed",
                "9",
                "--ddim-steps",
                "3",
                "--out",
                "gen",
            ],
            cfg as &[_],
        ]
        .concat(),
        dir,
    );
    assert!(ok, "{text}");
    assert!(text.contains("generated 30 frames"), "{text}");

    let (ok, text) = facetalk(
        &[
            &[
                "evaluate",
                "--pred",
                "gen",
                "--gt",
                &format!("data/{first_id}/frames"),
                "--audio",
                &audio,
                "--report",
                "report.json",
            ],
            cfg as &[_],
        ]
        .concat(),
        dir,
    );
    assert!(ok, "{text}");
    assert!(text.contains("psnr"), "{text}");
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(report.contains("config_hash"), "{report}");

    // A bad invocation fails with a readable error, not a panic.
    let (ok, text) = facetalk(&["train", "--stage", "3"], dir);
    assert!(!ok);
    assert!(text.contains("error:"), "{text}");
}
