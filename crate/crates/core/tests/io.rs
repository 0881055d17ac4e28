use std::path::Path;

use titanet::diarize::Segment;
use titanet::encoder::EncoderConfig;
use titanet::features::{load_wav, write_wav, AudioSignal, FrameConfig, MelFrontend};
use titanet::io::{
    decode_checkpoint, decode_embeddings, encode_checkpoint, encode_embeddings, load_checkpoint, parse_config_str,
    parse_manifest_str, parse_rttm_str, parse_trials_str, read_embeddings, read_manifest, read_trials,
    save_checkpoint, segments_to_rttm, utterance_id, write_embeddings, write_manifest, write_rttm, write_trials,
    parse_rttm, Checkpoint, ManifestEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
use titanet::pooldec::{SpeakerEmbedding, EMBEDDING_DIM};
use titanet::verify::Trial;
use titanet::{Error, ModelConfig, TitaNet};

#[test]
fn rttm_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let segs = vec![
        Segment::new(0.1, 1.7, "spk_a"),
        Segment::new(1.7, 2.0000000000000004, "spk_b"),
        Segment::new(3.0, 3.0, "empty"),
    ];
    let rttm = segments_to_rttm("sess", &segs);
    assert_eq!(rttm.len(), 2);
    let path = dir.path().join("nested/out.rttm");
    write_rttm(&path, &rttm).unwrap();
    let back = parse_rttm(&path).unwrap();
    assert_eq!(back["sess"], rttm);
    let recovered: Vec<Segment> = back["sess"].iter().map(|r| r.to_segment()).collect();
    assert_eq!(recovered[0], segs[0]);
}

#[test]
fn rttm_parser_groups_sessions_and_validates_fields() {
    let text = "# comment\n\
        SPEAKER b 1 0.5 1.0 <NA> <NA> x <NA> <NA>\n\
        SPKR-INFO b 1 <NA> <NA> <NA> unknown x <NA> <NA>\n\
        SPEAKER a 1 0 2 <NA> <NA> y <NA> <NA>\n";
    let map = parse_rttm_str(text, "t").unwrap();
    assert_eq!(map.keys().collect::<Vec<_>>(), ["a", "b"]);
    assert_eq!(map["b"][0].end(), 1.5);

    for bad in [
        "SPEAKER a 1 0 2 <NA>",
        "SPEAKER a 1 -1 2 <NA> <NA> y",
        "SPEAKER a 1 0 0 <NA> <NA> y",
        "SPEAKER a 1 zero 2 <NA> <NA> y",
    ] {
        match parse_rttm_str(bad, "bad.rttm") {
            Err(Error::Parse { source_name, line, .. }) => assert_eq!((source_name.as_str(), line), ("bad.rttm", 1)),
            other => panic!("{bad}: {other:?}"),
        }
    }
}

#[test]
fn manifests_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.tsv");
    let entries = vec![
        ManifestEntry { path: dir.path().join("wav/u1.wav"), duration: 2.5, speaker: "s0".into() },
        ManifestEntry { path: "/abs/u2.wav".into(), duration: 3.0, speaker: "s1".into() },
    ];
    write_manifest(&path, &entries).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("wav/u1.wav\t2.5\ts0\n"), "{text}");
    assert_eq!(read_manifest(&path).unwrap(), entries);
    assert_eq!(utterance_id(&entries[0].path), "u1");

    let err = parse_manifest_str("a.wav\t1.0\n", "m", Path::new("")).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
    let err = parse_manifest_str("\n\na.wav\tNaN\ts\n", "m", Path::new("")).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }));
}

#[test]
fn trial_lists_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trials.txt");
    let trials = vec![
        Trial { enroll: "u1".into(), test: "u2".into(), target: true },
        Trial { enroll: "u1".into(), test: "u9".into(), target: false },
    ];
    write_trials(&path, &trials).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "1 u1 u2\n0 u1 u9\n");
    assert_eq!(read_trials(&path).unwrap(), trials);
    assert!(matches!(parse_trials_str("2 a b", "t"), Err(Error::Parse { .. })));
    assert!(matches!(parse_trials_str("1 a", "t"), Err(Error::Parse { .. })));
}

fn embedding(seed: usize) -> SpeakerEmbedding {
    SpeakerEmbedding::new((0..EMBEDDING_DIM).map(|i| ((i * 31 + seed * 7) % 17) as f64 - 8.0).collect()).unwrap()
}

#[test]
fn embedding_stores_are_bit_exact_and_detect_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let entries = vec![("utt-α".to_string(), embedding(1)), ("u2".to_string(), embedding(2))];
    write_embeddings(&path, &entries).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back.len(), 2);
    for ((a, ea), (b, eb)) in entries.iter().zip(&back) {
        assert_eq!(a, b);
        assert_eq!(ea.as_slice(), eb.as_slice());
    }

    let bytes = encode_embeddings(&entries).unwrap();
    for cut in [1, 5, bytes.len() - 1] {
        assert!(matches!(decode_embeddings(&bytes[..cut], "e"), Err(Error::Parse { .. })), "cut {cut}");
    }
    let short = SpeakerEmbedding::new(vec![1.0, 0.0]).unwrap();
    assert!(matches!(encode_embeddings(&[("x".into(), short)]), Err(Error::Shape(_))));
}

#[test]
fn config_files_expand_to_flags() {
    let args = parse_config_str("# defaults\nepochs = 3\nbatch_size=16\n\nverbose\n", "c").unwrap();
    assert_eq!(args, ["--epochs", "3", "--batch-size", "16", "--verbose"]);
    assert!(matches!(parse_config_str("bad key=1", "c"), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(parse_config_str("=1", "c"), Err(Error::Parse { .. })));
}

fn toy_model(seed: u64) -> TitaNet {
    TitaNet::new(ModelConfig::new(EncoderConfig::toy(), 3), seed).unwrap()
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(4);
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.speakers = vec!["a".into(), "b".into(), "c".into()];
    ckpt.metrics = vec![("val_acc".into(), 0.75)];
    let path = dir.path().join("m/model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let (back, restored) = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    for ((_, a), (_, b)) in model.params.iter().zip(restored.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.values(), b.tensor.values());
    }
    assert_eq!(restored.stats, model.stats);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&Checkpoint::from_model(&toy_model(0))).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));

    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match decode_checkpoint(&newer) {
        Err(Error::CheckpointVersion { found, expected }) => assert_eq!((found, expected), (2, 1)),
        other => panic!("{other:?}"),
    }

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode_checkpoint(&trailing), Err(Error::Checkpoint(_))));
    for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
}

#[test]
fn checkpoint_of_another_layout_is_a_shape_error() {
    let ckpt = Checkpoint::from_model(&toy_model(0));
    let wider = EncoderConfig { channels: 16, ..EncoderConfig::toy() };
    let mut other = TitaNet::new(ModelConfig::new(wider, 3), 0).unwrap();
    assert!(matches!(ckpt.apply_to(&mut other), Err(Error::Shape(_))));
}

#[test]
fn wav_round_trip_quantizes_to_sixteen_bits() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<f64> = (0..1600).map(|i| 0.5 * (i as f64 * 0.05).sin()).collect();
    let sig = AudioSignal::new(samples.clone(), 16_000).unwrap();
    let path = dir.path().join("a/b.wav");
    write_wav(&path, &sig).unwrap();
    let back = load_wav(&path).unwrap();
    assert_eq!(back.sample_rate, 16_000);
    assert_eq!(back.samples.len(), samples.len());
    for (a, b) in samples.iter().zip(&back.samples) {
        assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-15);
    }
    assert!(matches!(load_wav(dir.path().join("missing.wav")), Err(Error::Io { .. })));
}

#[test]
fn eight_kilohertz_audio_is_unsupported() {
    let sig = AudioSignal::new(vec![0.0; 8000], 8000).unwrap();
    let frontend = MelFrontend::new(FrameConfig::default()).unwrap();
    assert!(matches!(frontend.compute(&sig), Err(Error::UnsupportedFormat(_))));
}
