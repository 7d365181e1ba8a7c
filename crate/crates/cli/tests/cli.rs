use std::path::Path;
use std::process::{Command, Output};

use svgs::relevance::{write_latent, LatentGrid};

fn svgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svgs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 6] = [
    "--set",
    "scene.width=32",
    "--set",
    "scene.height=32",
    "--set",
    "scene.supersample=1",
];

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("svgs.toml");
    std::fs::write(&cfg, "[init]\nsamples = 50000\nmax_gaussians = 800\n[train]\niterations = 30\nlog_interval = 10\n[mesh]\nresolution = 32\n").unwrap();
    let mut args = vec!["synth", "-o", p(&data)];
    args.extend(SMALL);
    ok(svgs(&args));
    assert!(data.join("transforms.json").exists());

    let hull = dir.path().join("hull.ply");
    let out = ok(svgs(&["carve", p(&data), "-o", p(&hull), "--config", p(&cfg)]));
    assert!(out.contains("initialized 800 gaussians"), "{out}");

    let cloud = dir.path().join("cloud.ply");
    let log = dir.path().join("train.log");
    let ck = dir.path().join("ck");
    ok(svgs(&[
        "reconstruct", p(&data), "-o", p(&cloud), "--config", p(&cfg), "--log", p(&log), "--checkpoints", p(&ck),
    ]));
    assert!(cloud.exists());
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);
    assert_eq!(std::fs::read_dir(&ck).unwrap().count(), 3);

    let renders = dir.path().join("renders");
    let out = ok(svgs(&["render", p(&cloud), "--data", p(&data), "--split", "heldout", "-o", p(&renders)]));
    assert_eq!(out.lines().count(), 2);
    assert!(renders.join("heldout_r_0.png").exists() && renders.join("heldout_r_0.dpth").exists());

    let table = ok(svgs(&["eval", p(&cloud), "--data", p(&data)]));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "method\tview\tpsnr\tssim");
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("svgs\tmean\t"));
    let psnr: f64 = rows[3].split('\t').nth(2).unwrap().parse().unwrap();
    assert!(psnr > 15.0, "{table}");

    let mesh = dir.path().join("mesh.obj");
    ok(svgs(&["export-mesh", p(&cloud), "-o", p(&mesh), "--config", p(&cfg)]));
    assert!(std::fs::read_to_string(&mesh).unwrap().contains("\nf "));
}

#[test]
fn mask_and_blend() {
    let dir = tempfile::tempdir().unwrap();
    let grid = |f: &dyn Fn(usize, usize) -> f64| {
        let mut v = Vec::new();
        for _ in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    v.push(f(x, y));
                }
            }
        }
        LatentGrid::new(4, 8, 8, v).unwrap()
    };
    let text = dir.path().join("text.ltnt");
    let null = dir.path().join("null.ltnt");
    let edit = dir.path().join("edit.ltnt");
    let orig = dir.path().join("orig.ltnt");
    let blend = dir.path().join("blend.ltnt");
    write_latent(&text, &grid(&|x, y| if x < 4 && y < 2 { 1.0 } else { 0.0 })).unwrap();
    write_latent(&null, &grid(&|_, _| 0.0)).unwrap();
    write_latent(&edit, &grid(&|_, _| 5.0)).unwrap();
    write_latent(&orig, &grid(&|_, _| -1.0)).unwrap();
    let png = dir.path().join("mask.png");
    let out = ok(svgs(&[
        "mask", "--text-pred", p(&text), "--null-pred", p(&null), "--size", "32x32", "-o", p(&png),
        "--edit", p(&edit), "--orig", p(&orig), "--blend-out", p(&blend),
    ]));
    assert!(out.contains("8 of 64"), "{out}");
    let b = svgs::relevance::read_latent(&blend).unwrap();
    assert_eq!(b.get(2, 1, 3), 5.0);
    assert_eq!(b.get(2, 5, 5), -1.0);
    let (w, h, img) = svgs::imaging::load_gray_png(&png).unwrap();
    assert_eq!((w, h), (32, 32));
    assert_eq!(img.iter().filter(|v| **v == 255).count(), 8 * 16);
}

#[test]
fn exit_codes() {
    assert_eq!(svgs(&[]).status.code(), Some(1));
    assert_eq!(svgs(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(svgs(&["--help"]).status.code(), Some(0));
    assert_eq!(svgs(&["config", "--set", "train.iterations"]).status.code(), Some(1));
    assert_eq!(svgs(&["eval", "/no/such.ply", "--data", "/no/such"]).status.code(), Some(2));
    assert_eq!(svgs(&["export-mesh", "x.ply", "-o", "mesh.stl"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\niterations = \"many\"\n").unwrap();
    assert_eq!(svgs(&["config", "--config", p(&bad)]).status.code(), Some(2));
    let out = ok(svgs(&["config", "--set", "train.iterations=5"]));
    assert!(out.contains("iterations = 5"), "{out}");
}
