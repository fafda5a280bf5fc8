//! The command line end to end: train, synthesize, interpolate, evaluate.

use std::fs;
use std::path::Path;

use monoview::cli;
use monoview::datapipe::synthetic_pair;
use monoview::imageio::{load_image, read_pfm, save_image};
use monoview::tensor::{Shape, Tensor};

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["monoview"];
    full.extend_from_slice(args);
    let code = cli::run(full, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_dataset(root: &Path, n: u64) {
    fs::create_dir_all(root.join("left")).unwrap();
    fs::create_dir_all(root.join("right")).unwrap();
    for i in 0..n {
        let pair = synthetic_pair(64, 64, 2.0, i);
        save_image(&root.join("left").join(format!("{i:03}.png")), &pair.left).unwrap();
        save_image(&root.join("right").join(format!("{i:03}.png")), &pair.right).unwrap();
    }
}

fn train_checkpoint(tmp: &Path) -> std::path::PathBuf {
    let data = tmp.join("data");
    write_dataset(&data, 3);
    let out = tmp.join("run");
    let (code, stdout, stderr) = run(&[
        "train",
        "--data-root",
        s(&data),
        "--out",
        s(&out),
        "--phase",
        "1",
        "--deterministic",
        "--set",
        "patch=64x64",
        "--set",
        "batch_size=2",
        "--set",
        "val_count=1",
        "--set",
        "max_epochs=1",
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("2 train / 1 val"), "{stdout}");
    assert!(out.join("train.txt").exists() && out.join("val.txt").exists());
    out.join("final")
}

#[test]
fn train_then_synthesize_interpolate_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train_checkpoint(tmp.path());

    // odd-sized input: padded internally, cropped back on output
    let input = tmp.path().join("scene.png");
    let img = Tensor::from_fn(Shape::new(3, 50, 70), |c, y, x| {
        ((c * 3 + y + 2 * x) % 23) as f32 / 11.5 - 1.0
    });
    save_image(&input, &img).unwrap();

    let only_disp = tmp.path().join("disp");
    let (code, _, err) = run(&[
        "synthesize",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&input),
        "--outputs",
        "disparity",
        "--out",
        s(&only_disp),
    ]);
    assert_eq!(code, 0, "{err}");
    let files: Vec<_> = fs::read_dir(&only_disp)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(files.len(), 1);
    assert_eq!(files[0].extension().unwrap(), "pfm");
    assert_eq!(read_pfm(&files[0]).unwrap().shape(), Shape::new(1, 50, 70));

    let all = tmp.path().join("all");
    let (code, stdout, _) = run(&[
        "synthesize",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&input),
        "--direction",
        "rl",
        "--outputs",
        "view,disparity,confidence,dbp,ref",
        "--out",
        s(&all),
    ]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 5);
    assert!(all.join("scene_rl_view.png").exists());
    assert_eq!(
        load_image(&all.join("scene_rl_view.png")).unwrap().shape(),
        img.shape()
    );

    let frames = tmp.path().join("frames");
    let (code, stdout, _) = run(&[
        "interpolate",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&input),
        "--alphas",
        "0,0.5,1",
        "--out",
        s(&frames),
    ]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 3);
    assert_eq!(fs::read_dir(&frames).unwrap().count(), 3);

    // a folder compared with itself
    let (code, table, _) = run(&[
        "evaluate",
        "--pred",
        s(&frames),
        "--gt",
        s(&frames),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(code, 0);
    assert!(table.contains("inf"), "{table}");
    let jsonl = fs::read_to_string(tmp.path().join("m").join("metrics.jsonl")).unwrap();
    assert_eq!(
        jsonl.lines().filter(|l| l.contains("\"ssim\":1.0")).count(),
        3,
        "{jsonl}"
    );

    let (code, report, _) = run(&["inspect", "--checkpoint", s(&ck)]);
    assert_eq!(code, 0);
    assert!(report.contains("decoder_rl"));
}

#[test]
fn evaluation_frames_are_center_cropped() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("weights");
    monoview::build_model(0, None)
        .unwrap()
        .params
        .save(&ck)
        .unwrap();
    let frame = Tensor::from_fn(Shape::new(3, 300, 600), |c, y, x| {
        ((c + y / 7 + x / 5) % 9) as f32 / 4.5 - 1.0
    });
    let (gt, pred) = (tmp.path().join("gt"), tmp.path().join("pred"));
    fs::create_dir_all(&gt).unwrap();
    save_image(&gt.join("f.png"), &frame).unwrap();

    let (code, stdout, err) = run(&[
        "synthesize",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&gt.join("f.png")),
        "--outputs",
        "dbp",
        "--eval-crop",
        "--out",
        s(&pred),
    ]);
    assert_eq!(code, 0, "{err}");
    let out = Path::new(stdout.trim());
    assert_eq!(load_image(out).unwrap().shape(), Shape::new(3, 256, 512));
    fs::rename(out, pred.join("f.png")).unwrap();

    // sizes differ until the ground truth is cropped the same way
    assert_eq!(run(&["evaluate", "--pred", s(&pred), "--gt", s(&gt)]).0, 1);
    let (code, table, err) = run(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--gt",
        s(&gt),
        "--eval-crop",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(table.contains("f "), "{table}");
}

#[test]
fn failures_report_one_line_and_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "synthesize",
        "--checkpoint",
        "/nonexistent",
        "--input",
        "x.png",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code, 1);
    assert!(
        err.starts_with("error:") && err.lines().count() == 1,
        "{err}"
    );

    let (code, _, err) = run(&[
        "train",
        "--data-root",
        s(&tmp.path().join("empty")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code, 1, "{err}");

    let (code, _, _) = run(&["train", "--out", "x", "--set", "lr"]);
    assert_eq!(code, 1);
    let (code, _, _) = run(&["interpolate"]);
    assert_eq!(code, 2);
}
