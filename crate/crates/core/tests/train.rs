use titanet::encoder::EncoderConfig;
use titanet::features::{FrameConfig, MelFrontend};
use titanet::layers::{ParamStore, Tape, Tensor};
use titanet::train::{
    aam_loss, cosine_annealing_lr, split_validation, synth_conversation, train, utterance_features, AAMConfig,
    Example, Sgd, SyntheticCorpus, TrainConfig,
};
use titanet::{Error, ModelConfig, TitaNet};

fn loss_and_grad(cos: &[f64], classes: usize, labels: &[usize], cfg: &AAMConfig) -> (f64, Vec<f64>) {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::new(vec![labels.len(), classes], cos.to_vec()).unwrap());
    let loss = aam_loss(&mut tape, x, labels, cfg).unwrap();
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss).unwrap();
    (value, grads.input(x).unwrap().to_vec())
}

#[test]
fn margin_loss_matches_closed_form() {
    let cfg = AAMConfig { margin: 0.2, scale: 30.0 };
    let cos = [0.5, 0.2, -0.1];
    let (loss, _) = loss_and_grad(&cos, 3, &[0], &cfg);
    let target = 30.0 * (0.5f64.acos() + 0.2).cos();
    let logits = [target, 30.0 * 0.2, 30.0 * -0.1];
    let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
    assert!((loss - (lse - target)).abs() < 1e-12, "{loss}");
}

#[test]
fn one_class_has_zero_loss() {
    let (loss, grad) = loss_and_grad(&[0.3, -0.7], 1, &[0, 0], &AAMConfig::default());
    assert!(loss.abs() < 1e-15);
    assert!(grad.iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn gradient_stays_finite_at_the_clamp() {
    let (loss, grad) = loss_and_grad(&[1.0, 0.0, -1.0, 0.0], 2, &[0, 0], &AAMConfig::default());
    assert!(loss.is_finite());
    assert!(grad.iter().all(|g| g.is_finite()), "{grad:?}");
}

#[test]
fn invalid_loss_settings_are_rejected() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
    let literal = AAMConfig { margin: 30.0, scale: 0.2 };
    assert!(matches!(aam_loss(&mut tape, x, &[0], &literal), Err(Error::Config(_))));
    assert!(matches!(aam_loss(&mut tape, x, &[0, 1], &AAMConfig::default()), Err(Error::Shape(_))));
}

fn single_param(values: Vec<f64>) -> ParamStore {
    let mut store = ParamStore::new();
    let n = values.len();
    store.add("w", Tensor::new(vec![n], values).unwrap()).unwrap();
    store
}

fn set_grad(store: &mut ParamStore, g: &[f64]) {
    let id = store.id("w").unwrap();
    store.get_mut(id).tensor.grad_mut().unwrap().copy_from_slice(g);
}

#[test]
fn sgd_with_zero_rate_is_a_no_op() {
    let mut store = single_param(vec![1.0, -2.0]);
    let mut sgd = Sgd::new(0.9).unwrap();
    set_grad(&mut store, &[3.0, 4.0]);
    sgd.step(&mut store, 0.0);
    let id = store.id("w").unwrap();
    assert_eq!(store.get(id).tensor.values(), &[1.0, -2.0]);
    assert!(store.get(id).tensor.grad().unwrap().iter().all(|g| *g == 0.0));
}

#[test]
fn momentum_accumulates_velocity() {
    let mut store = single_param(vec![1.0]);
    let mut sgd = Sgd::new(0.9).unwrap();
    for _ in 0..2 {
        set_grad(&mut store, &[0.5]);
        sgd.step(&mut store, 0.1);
    }
    // v₁ = g, v₂ = 0.9g + g.
    let expected = 1.0 - 0.1 * 0.5 * (1.0 + 1.9);
    let id = store.id("w").unwrap();
    assert!((store.get(id).tensor.values()[0] - expected).abs() < 1e-15);
    assert!(matches!(Sgd::new(1.0), Err(Error::Config(_))));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_annealing_lr(0, 100, 0.08, 1e-4), 0.08);
    assert!((cosine_annealing_lr(50, 100, 0.08, 1e-4) - (0.08 + 1e-4) / 2.0).abs() < 1e-15);
    assert_eq!(cosine_annealing_lr(100, 100, 0.08, 1e-4), 1e-4);
    assert_eq!(cosine_annealing_lr(250, 100, 0.08, 1e-4), 1e-4);
    let lrs: Vec<f64> = (0..=100).map(|s| cosine_annealing_lr(s, 100, 0.08, 1e-4)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn corpus_is_deterministic_in_its_seed() {
    let corpus = SyntheticCorpus { n_speakers: 3, utterances_per_speaker: 2, ..SyntheticCorpus::default() };
    let a = corpus.generate().unwrap();
    let b = corpus.generate().unwrap();
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.id.as_str(), x.speaker), (y.id.as_str(), y.speaker));
        assert_eq!(x.signal, y.signal);
    }
    let other = SyntheticCorpus { seed: 1, ..corpus.clone() }.generate().unwrap();
    assert_ne!(a[0].signal, other[0].signal);
    let later = SyntheticCorpus { first_utterance: 2, ..corpus.clone() }.generate().unwrap();
    assert_eq!(corpus.speakers(), SyntheticCorpus { first_utterance: 2, ..corpus }.speakers());
    assert_ne!(a[0].id, later[0].id);
}

#[test]
fn utterances_resemble_their_own_speaker() {
    // Nearest neighbour on time-averaged log-mel spectra.
    let corpus = SyntheticCorpus { n_speakers: 8, utterances_per_speaker: 3, ..SyntheticCorpus::default() };
    let frontend = MelFrontend::new(FrameConfig::default()).unwrap();
    let profiles: Vec<(usize, Vec<f64>)> = corpus
        .generate()
        .unwrap()
        .iter()
        .map(|u| {
            let mel = frontend.compute(&u.signal).unwrap();
            let t = mel.num_frames();
            let mean = (0..mel.n_mels()).map(|m| (0..t).map(|i| mel.get(i, m)).sum::<f64>() / t as f64).collect();
            (u.speaker, mean)
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    for (i, (spk, p)) in profiles.iter().enumerate() {
        let nearest = profiles
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .min_by(|a, b| dist(p, &a.1 .1).total_cmp(&dist(p, &b.1 .1)))
            .unwrap();
        assert_eq!(nearest.1 .0, *spk, "utterance {i}");
    }
}

#[test]
fn conversations_alternate_speakers() {
    let corpus = SyntheticCorpus { n_speakers: 4, ..SyntheticCorpus::default() };
    let profiles = corpus.speakers();
    let conv = synth_conversation(&[&profiles[0], &profiles[2]], 20.0, 3).unwrap();
    assert!(conv.reference.len() >= 4);
    for w in conv.reference.windows(2) {
        assert_ne!(w[0].speaker, w[1].speaker);
        assert!(w[1].start > w[0].end);
    }
    assert!(conv.signal.duration() >= conv.reference.last().unwrap().end);
    assert!(matches!(synth_conversation(&[&profiles[0]], 5.0, 0), Err(Error::Config(_))));
}

#[test]
fn validation_split_is_per_speaker_and_disjoint() {
    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let (tr, val) = split_validation(&labels, 0.1, 7);
    assert_eq!((tr.len(), val.len()), (45, 5));
    let mut held: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    held.sort_unstable();
    assert_eq!(held, vec![0, 1, 2, 3, 4]);
    let mut all: Vec<usize> = tr.iter().chain(&val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    assert_eq!((tr, val), split_validation(&labels, 0.1, 7));
}

fn toy_examples(n_speakers: usize, per: usize) -> Vec<Example> {
    let corpus = SyntheticCorpus { n_speakers, utterances_per_speaker: per, ..SyntheticCorpus::default() };
    let frontend = MelFrontend::new(FrameConfig::default()).unwrap();
    corpus
        .generate()
        .unwrap()
        .into_iter()
        .map(|u| Example {
            features: utterance_features(&frontend, &u.signal).unwrap(),
            id: u.id,
            label: u.speaker,
        })
        .collect()
}

#[test]
fn toy_training_lowers_the_loss() {
    let examples = toy_examples(20, 4);
    let mut model = TitaNet::new(ModelConfig::new(EncoderConfig::toy(), 20), 0).unwrap();
    let cfg = TrainConfig { epochs: 5, batch_size: 16, val_fraction: 0.0, max_frames: 150, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let report = train(&mut model, &examples, &[], &cfg, &AAMConfig::default(), |m| seen.push(m.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4, 5]);
    let losses: Vec<f64> = report.epochs.iter().map(|m| m.train_loss).collect();
    assert!(losses[..3].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert_eq!(report.best_epoch, 5);
    assert!(report.to_csv().starts_with("epoch,lr,train_loss,train_acc,val_acc\n1,"));
}

#[test]
fn out_of_range_labels_are_reported() {
    let mut examples = toy_examples(2, 2);
    examples[3].label = 7;
    let mut model = TitaNet::new(ModelConfig::new(EncoderConfig::toy(), 2), 0).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, val_fraction: 0.0, ..TrainConfig::default() };
    let err = train(&mut model, &examples, &[], &cfg, &AAMConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Label { label: 7, classes: 2 }), "{err}");
    let bad = TrainConfig { batch_size: 1, ..cfg };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
