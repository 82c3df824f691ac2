use asdkit::datamodel::{Bundle, ClipMeta, FaceEmbeddingTrack, Utterance, UtteranceEmbedding};
use asdkit::fva::{
    gradient_check, match_probs, prepare_frames, aggregate_faces, train_head, HeadConfig, HeadParams, MatchBatch,
    Tensor, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> HeadConfig {
    HeadConfig {
        d_speaker: 5,
        d_face: 6,
        d_model: 8,
        heads: 4,
        ff_mult: 4,
        max_frames: None,
        layer_norm_eps: 1e-5,
    }
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn jittered_params(cfg: HeadConfig, seed: u64) -> HeadParams {
    let mut p = HeadParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in Tensor::ALL {
        for v in p.tensor_mut(t) {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    p
}

fn faces(rng: &mut ChaCha8Rng, lens: &[usize], d: usize) -> Vec<FaceEmbeddingTrack> {
    lens.iter()
        .enumerate()
        .map(|(i, &t)| FaceEmbeddingTrack {
            clip_id: "c".into(),
            person_id: format!("p{i}"),
            frames: rows(rng, t, d),
        })
        .collect()
}

fn batch(cfg: &HeadConfig, audio: &[Vec<f64>], faces: &[FaceEmbeddingTrack]) -> MatchBatch {
    let a: Vec<&[f64]> = audio.iter().map(Vec::as_slice).collect();
    let f: Vec<&FaceEmbeddingTrack> = faces.iter().collect();
    MatchBatch::new(cfg, "c", &a, &f).unwrap()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let cfg = small_config();
    let p = jittered_params(cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = faces(&mut rng, &[4, 1, 5], cfg.d_face);
    let audio = rows(&mut rng, 3, cfg.d_speaker);
    let b = batch(&cfg, &audio, &f);
    let report = gradient_check(&p, &b, &[0, 2, 1], 1e-4).unwrap();
    assert_eq!(report.len(), Tensor::ALL.len());
    for r in report {
        assert!(r.analytic_norm > 0.0, "{} has zero gradient", r.tensor.name());
        assert!(r.relative_error <= 1e-5, "{}: {:e}", r.tensor.name(), r.relative_error);
    }
}

#[test]
fn gradient_check_with_frame_cap() {
    let mut cfg = small_config();
    cfg.max_frames = Some(3);
    cfg.heads = 2;
    let p = jittered_params(cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = faces(&mut rng, &[7, 2], cfg.d_face);
    let audio = rows(&mut rng, 2, cfg.d_speaker);
    let b = batch(&cfg, &audio, &f);
    for r in gradient_check(&p, &b, &[1, 1], 1e-4).unwrap() {
        assert!(r.relative_error <= 1e-5, "{}: {:e}", r.tensor.name(), r.relative_error);
    }
}

/// Orthogonal identities, noiseless frames, voices equal to their faces.
fn separable_bundle(n_clips: usize, n_people: usize, d: usize) -> Bundle {
    let basis = |i: usize| {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    };
    let mut b = Bundle::default();
    for c in 0..n_clips {
        let clip_id = format!("clip{c:02}");
        b.clips.push(ClipMeta::new(&clip_id, 25.0, 10.0));
        // every clip shows a rotating pair of people
        let people = [c % n_people, (c + 1) % n_people];
        for &person in &people {
            b.face_embeddings.push(FaceEmbeddingTrack {
                clip_id: clip_id.clone(),
                person_id: format!("id{person}"),
                frames: vec![basis(person); 3],
            });
        }
        for (k, &person) in people.iter().enumerate() {
            let utt_id = format!("{clip_id}_u{k}");
            b.utterances.push(Utterance {
                clip_id: clip_id.clone(),
                utt_id: utt_id.clone(),
                start_s: k as f64,
                end_s: k as f64 + 0.5,
                speaker_hint: Some(format!("id{person}")),
            });
            b.utt_embeddings.push(UtteranceEmbedding {
                utt_id,
                vector: basis(person),
            });
        }
    }
    b
}

#[test]
fn separable_toy_set_trains_to_full_accuracy() {
    let d = 6;
    let bundle = separable_bundle(12, d, d);
    let cfg = HeadConfig {
        d_speaker: d,
        d_face: d,
        d_model: 16,
        heads: 4,
        ff_mult: 4,
        max_frames: None,
        layer_norm_eps: 1e-5,
    };
    let p0 = HeadParams::init(cfg, 2).unwrap();
    let tc = TrainConfig {
        epochs: 40,
        learning_rate: 1e-2,
        decay_every: 20,
        decay_factor: 0.5,
        seed: 3,
        ..TrainConfig::default()
    };
    let (p, trace) = train_head(&p0, &bundle, &tc).unwrap();
    assert_eq!(trace.len(), 40);
    assert!(trace.iter().all(|e| e.loss.is_finite()));
    assert_eq!(trace.last().unwrap().accuracy, 1.0, "{:?}", trace.last());
    assert!(trace.last().unwrap().loss < trace[0].loss);
    assert!(p.is_finite());

    let scored = asdkit::fva::score_bundle(&p, &bundle).unwrap();
    for u in &bundle.utterances {
        let best = scored
            .iter()
            .filter(|m| m.utt_id == u.utt_id)
            .max_by(|a, b| a.probability.total_cmp(&b.probability))
            .unwrap();
        assert_eq!(Some(&best.person_id), u.speaker_hint.as_ref());
    }
}

#[test]
fn zero_epochs_is_identity() {
    let bundle = separable_bundle(2, 3, 3);
    let cfg = HeadConfig::new(3, 3);
    let p0 = HeadParams::init(cfg, 0).unwrap();
    let tc = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (p, trace) = train_head(&p0, &bundle, &tc).unwrap();
    assert_eq!(p, p0);
    assert!(trace.is_empty());
}

#[test]
fn missing_speaker_hint_is_rejected() {
    let mut bundle = separable_bundle(2, 3, 3);
    bundle.utterances[1].speaker_hint = None;
    let p0 = HeadParams::init(HeadConfig::new(3, 3), 0).unwrap();
    let err = train_head(&p0, &bundle, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, asdkit::fva::FvaError::MissingLabel(_)), "{err}");
}

#[test]
fn invisible_speaker_is_rejected() {
    let mut bundle = separable_bundle(2, 3, 3);
    bundle.utterances[0].speaker_hint = Some("nobody".into());
    let p0 = HeadParams::init(HeadConfig::new(3, 3), 0).unwrap();
    let err = train_head(&p0, &bundle, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, asdkit::fva::FvaError::NoVisibleIdentity(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rows_are_distributions_and_identity_order_is_equivariant(
        seed in any::<u64>(),
        n_ids in 1usize..5,
        n_u in 1usize..4,
        perm_seed in any::<u64>(),
    ) {
        let cfg = small_config();
        let p = jittered_params(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let lens: Vec<usize> = (0..n_ids).map(|_| rng.random_range(1..6)).collect();
        let f = faces(&mut rng, &lens, cfg.d_face);
        let audio = rows(&mut rng, n_u, cfg.d_speaker);
        let probs = match_probs(&p, &batch(&cfg, &audio, &f)).unwrap();
        for row in probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        let mut perm: Vec<usize> = (0..n_ids).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted: Vec<FaceEmbeddingTrack> = perm.iter().map(|&i| f[i].clone()).collect();
        let probs_p = match_probs(&p, &batch(&cfg, &audio, &permuted)).unwrap();
        for n in 0..n_u {
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(probs_p[[n, j]].to_bits(), probs[[n, i]].to_bits());
            }
        }
    }

    #[test]
    fn frame_order_does_not_change_aggregate(seed in any::<u64>(), t in 1usize..9, perm_seed in any::<u64>()) {
        let cfg = small_config();
        let p = jittered_params(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        let frames = rows(&mut rng, t, cfg.d_face);
        let mut shuffled = frames.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let a = aggregate_faces(&p, &[prepare_frames(&cfg, &frames).unwrap()]).unwrap();
        let b = aggregate_faces(&p, &[prepare_frames(&cfg, &shuffled).unwrap()]).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
