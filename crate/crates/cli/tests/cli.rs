use std::path::Path;
use std::process::{Command, Output};

use ynet_core::audio::{read_wav, write_wav, AudioClip, WavEncoding};
use ynet_core::train::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_ynet");

fn ynet(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn ynet")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tone(n: usize, rate: u32) -> AudioClip {
    AudioClip::new(
        (0..n)
            .map(|i| 0.3 * (i as f32 * 440.0 * std::f32::consts::TAU / rate as f32).sin())
            .collect(),
        rate,
    )
    .unwrap()
}

fn train_small(dir: &Path, arch: &str) -> std::path::PathBuf {
    let ckpt = dir.join(format!("{arch}.ckpt"));
    let out = ynet(&[
        "train",
        "--synth-pairs",
        "2",
        "--arch",
        arch,
        "--base-channels",
        "2",
        "--epochs",
        "1",
        "--batch",
        "2",
        "--ckpt",
        s(&ckpt),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    ckpt
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(ynet(&["--help"]).status.code(), Some(0));
    assert_eq!(ynet(&["--version"]).status.code(), Some(0));
    assert_eq!(ynet(&[]).status.code(), Some(1));
    assert_eq!(ynet(&["train", "--bogus"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = ynet(&["synth-data", "--out", s(dir.path()), "--pairs", "0"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    // training without a checkpoint path is a usage error
    assert_eq!(ynet(&["train", "--synth-pairs", "1"]).status.code(), Some(1));
}

#[test]
fn synth_data_writes_stem_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = ynet(&["synth-data", "--out", s(dir.path()), "--pairs", "2", "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for i in 0..2 {
        let mix = read_wav(dir.path().join(format!("{i}/mixture.wav"))).unwrap();
        let voc = read_wav(dir.path().join(format!("{i}/vocals.wav"))).unwrap();
        assert_eq!(mix.sample_rate, 44_100);
        assert_eq!(mix.len(), voc.len());
    }
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), "ynet");
    let log = std::fs::read_to_string(dir.path().join("ynet.ckpt.loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,step,train_loss");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,1,"));
    assert_eq!(Checkpoint::load(&ckpt).unwrap().step, 1);
}

#[test]
fn spectral_ablation_checkpoint_has_no_waveform_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::load(&train_small(dir.path(), "unet-spec")).unwrap();
    for (name, _) in &ckpt.tensors {
        assert!(!name.starts_with("wave.") && !name.starts_with("fb."), "{name}");
    }
    assert!(ckpt.tensors.iter().any(|(n, _)| n.starts_with("spec.")));
}

#[test]
fn missing_dataset_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ynet(&[
        "train",
        "--data",
        s(&dir.path().join("absent")),
        "--ckpt",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent"));
}

#[test]
fn separate_keeps_duration_and_writes_mask() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), "ynet");
    // 3 s at 22.05 kHz goes through the canonical rate and back
    let input = dir.path().join("in.wav");
    write_wav(&tone(66_150, 22_050), &input, WavEncoding::Pcm16).unwrap();
    let vocal = dir.path().join("vocal.wav");
    let mask = dir.path().join("mask.pgm");
    let out = ynet(&[
        "separate",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&input),
        "--out",
        s(&vocal),
        "--mask-out",
        s(&mask),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = read_wav(&vocal).unwrap();
    assert_eq!((v.len(), v.sample_rate), (66_150, 22_050));
    let pgm = std::fs::read_to_string(&mask).unwrap();
    let header: Vec<&str> = pgm.split_whitespace().take(3).collect();
    // 132300 samples at 44.1 kHz fill two blocks of 128 frames
    assert_eq!(header, ["P2", "256", "1024"]);
}

#[test]
fn evaluate_scores_matching_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (r, e) = (dir.path().join("ref"), dir.path().join("est"));
    std::fs::create_dir_all(&r).unwrap();
    std::fs::create_dir_all(&e).unwrap();
    for name in ["a.wav", "b.wav"] {
        write_wav(&tone(44_100, 44_100), r.join(name), WavEncoding::Float32).unwrap();
        write_wav(&tone(44_100, 44_100), e.join(name), WavEncoding::Float32).unwrap();
    }
    write_wav(&tone(44_100, 44_100), r.join("only_ref.wav"), WavEncoding::Float32).unwrap();
    let report = dir.path().join("report.csv");
    let out = ynet(&["evaluate", "--ref", s(&r), "--est", s(&e), "--out", s(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "clip,sdr_db,si_snr_db,stoi");
    assert!(lines[1].starts_with("a.wav,100.0000,100.0000,"));
    assert!(lines.iter().any(|l| l.starts_with("mean,")));
    assert!(lines.iter().any(|l| l.starts_with("median,")));
    assert!(!csv.contains("only_ref"));
}

#[test]
fn render_shapes_and_silence() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("silence.wav");
    write_wav(&AudioClip::new(vec![0.0; 67_072], 44_100).unwrap(), &input, WavEncoding::Float32).unwrap();
    let img = dir.path().join("mel.pgm");
    let out = ynet(&["render", "--in", s(&input), "--out", s(&img), "--mel", "64"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&img).unwrap();
    let mut tokens = text.split_whitespace();
    assert_eq!(tokens.next(), Some("P2"));
    assert_eq!(tokens.next(), Some("128"));
    assert_eq!(tokens.next(), Some("64"));
    assert_eq!(ynet(&["render", "--in", s(&dir.path().join("nope.wav")), "--out", s(&img)]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_detects_a_broken_op() {
    let out = ynet(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ynet_miniature"));
    let out = ynet(&["gradcheck", "--break-op", "conv2d_1x1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("conv2d_1x1"));
}
