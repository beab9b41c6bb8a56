use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::distributions::log_prob_unit;

fn small_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        modalities: vec![
            ModalitySpec::dense("vel", 1, 1.0),
            ModalitySpec::dense("gyro", 1, 1.0),
            ModalitySpec::image("img", 3, 16, 16, 0.05),
        ],
        deter_dim: 8,
        stoch_dim: 4,
        embed_dim: 8,
        hidden_dim: 8,
        conv_channels: [2, 3, 2],
        fusion,
        ..ModelConfig::default()
    }
}

fn model(fusion: Fusion, seed: u64) -> Mrssm<f64> {
    Mrssm::new(small_config(fusion), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_obs(m: &Mrssm<f64>, rng: &mut impl Rng, present: Subset) -> ObservationSet<f64> {
    let values = m
        .modalities()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            present.contains(i).then(|| {
                let data = (0..spec.numel()).map(|_| rng.gen_range(0.0..1.0)).collect();
                Tensor::new(spec.shape.clone(), data).unwrap()
            })
        })
        .collect();
    ObservationSet::new(m.modalities(), values).unwrap()
}

fn random_state(m: &Mrssm<f64>, rng: &mut impl Rng) -> LatentState<f64> {
    let mut st = m.initial_state(&normal_vec(rng, 4)).unwrap();
    st.h = Tensor::from_vec((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
    st
}

#[test]
fn zero_weight_gru_halves_h() {
    let mut m = model(Fusion::Poe, 1);
    for (name, t) in m.params_mut().iter_mut() {
        if name.starts_with("transition.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let h: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let out = m
        .deterministic_step(&Tensor::from_vec(h.clone()), &Tensor::from_vec(vec![0.3; 4]), Action::new(1.0, -0.5))
        .unwrap();
    for (o, hp) in out.data().iter().zip(&h) {
        assert_eq!(*o, 0.5 * hp);
    }
}

#[test]
fn deterministic_step_contract() {
    let m = model(Fusion::Poe, 2);
    let h = Tensor::from_vec(vec![0.1; 8]);
    let s = Tensor::from_vec(vec![-0.2; 4]);
    let a = m.deterministic_step(&h, &s, Action::new(0.5, 0.1)).unwrap();
    let b = m.deterministic_step(&h, &s, Action::new(0.5, 0.1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), [8]);
    assert!(matches!(
        m.deterministic_step(&Tensor::from_vec(vec![0.0; 7]), &s, Action::default()),
        Err(Error::Dimension { .. })
    ));
    assert!(m.deterministic_step(&h, &Tensor::from_vec(vec![0.0; 5]), Action::default()).is_err());
}

#[test]
fn prior_head_fuzz_finite_and_floored() {
    let m: Mrssm<f32> = model(Fusion::Poe, 3).cast();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sess = m.session(false);
    // 10^4 inputs, batched.
    let data: Vec<f32> = (0..10_000 * 8).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
    let h = sess.constant(Tensor::new(vec![10_000, 8], data).unwrap());
    let g = sess.prior_head(h).unwrap();
    let d = DiagGaussian::read(&sess.tape, &g);
    assert!(d.mean().is_finite() && d.stddev().is_finite());
    assert!(d.stddev().data().iter().all(|&s| s >= 1e-4));
    // Value API agrees with the batched path.
    let first = Tensor::from_vec(sess.tape.value(h).data()[..8].to_vec());
    let single = m.prior_head(&first).unwrap();
    assert_eq!(single.mean().data(), &d.mean().data()[..4]);
}

#[test]
fn encode_expert_shapes_and_purity() {
    let m = model(Fusion::Poe, 5);
    let img = Tensor::full(&[3, 16, 16], 0.25);
    let a = m.encode_expert("img", &img).unwrap();
    assert_eq!(a.dim(), 4);
    assert_eq!(a, m.encode_expert("img", &img).unwrap());
    assert!(m.encode_expert("img", &Tensor::full(&[3, 8, 16], 0.25)).is_err());
    assert!(matches!(m.encode_expert("lidar", &img), Err(Error::UnknownModality(_))));
    assert_eq!(m.encode_expert("vel", &Tensor::from_vec(vec![0.3])).unwrap().dim(), 4);
}

#[test]
fn decode_shape_and_unit_log_prob() {
    let m = model(Fusion::Poe, 6);
    let h = Tensor::from_vec(vec![0.2; 8]);
    let s = Tensor::from_vec(vec![0.1; 4]);
    let g = m.decode("img", &h, &s).unwrap();
    assert_eq!(g.mean().shape(), [3, 16, 16]);
    assert!(g.stddev().data().iter().all(|&v| v == 1.0));
    let x: Vec<f64> = (0..768).map(|i| (i as f64 * 0.01).sin()).collect();
    let sq: f64 = x.iter().zip(g.mean().data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let expected = -0.5 * sq - 384.0 * (2.0 * std::f64::consts::PI).ln();
    assert!((g.log_prob(&x).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn encoder_and_decoder_gradients_match_finite_differences() {
    let m = model(Fusion::Poe, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = random_obs(&m, &mut rng, Subset::full(3));
    let h0 = Tensor::new(vec![1, 8], normal_vec(&mut rng, 8)).unwrap();
    let s0 = Tensor::new(vec![1, 4], normal_vec(&mut rng, 4)).unwrap();
    let loss = |sess: &mut Session<'_, f64>| -> Result<Var> {
        let mut terms = Vec::new();
        for i in 0..3 {
            let o = sess.constant(batch1(obs.get(i).unwrap()));
            let e = sess.encode_expert(i, o)?;
            let mean_sq = sess.tape.square(e.mean);
            terms.push(sess.tape.sum(mean_sq));
            let l = sess.tape.log(e.stddev);
            terms.push(sess.tape.sum(l));
            let (h, s) = (sess.constant(h0.clone()), sess.constant(s0.clone()));
            let d = sess.decode(i, h, s)?;
            let target = sess.constant(batch1(obs.get(i).unwrap()));
            let lp = log_prob_unit(&mut sess.tape, d, target)?;
            terms.push(sess.tape.sum(lp));
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = sess.tape.add(total, *t)?;
        }
        Ok(total)
    };
    let report = param_grad_check(&m, loss, &["enc.", "dec."], 12, 1e-5, &mut rng).unwrap();
    assert_eq!(report.len(), 2 * (2 * 6 + 8));
    for r in &report {
        assert!(r.worst.error < 1e-4, "{}: {:?}", r.name, r.worst);
    }
}

#[test]
fn empty_observations_give_prior_exactly() {
    let m = model(Fusion::Poe, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let st = random_state(&m, &mut rng);
    let next = m.filter_step(&st, Action::new(0.4, 0.2), &ObservationSet::empty(3), &normal_vec(&mut rng, 4)).unwrap();
    assert_eq!(next.posterior, next.prior);
}

#[test]
fn uninformative_expert_leaves_prior() {
    let mut m = model(Fusion::Poe, 11);
    // The velocity expert's output layer emits mean 0 and raw stddev 1e6,
    // i.e. stddev softplus(1e6) + 1e-4 ≈ 1e6 regardless of the input.
    let w = m.params().get("enc.vel.out.w").unwrap().shape().to_vec();
    *m.params_mut().get_mut("enc.vel.out.w").unwrap() = Tensor::zeros(&w);
    let b = Tensor::from_vec([vec![0.0; 4], vec![1e6; 4]].concat());
    *m.params_mut().get_mut("enc.vel.out.b").unwrap() = b;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let st = random_state(&m, &mut rng);
    let obs = random_obs(&m, &mut rng, Subset::singleton(0));
    let next = m.filter_step(&st, Action::new(0.4, 0.2), &obs, &normal_vec(&mut rng, 4)).unwrap();
    for (q, p) in next.posterior.mean().data().iter().zip(next.prior.mean().data()) {
        assert!((q - p).abs() < 1e-5);
    }
    for (q, p) in next.posterior.stddev().data().iter().zip(next.prior.stddev().data()) {
        assert!((q - p).abs() < 1e-5);
    }
}

#[test]
fn posterior_contracts_and_more_modalities_never_widen() {
    let m = model(Fusion::Poe, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..200 {
        let st = random_state(&m, &mut rng);
        let a = Action::new(rng.gen_range(0.0..2.0), rng.gen_range(-1.0..1.0));
        let noise = normal_vec(&mut rng, 4);
        let full = random_obs(&m, &mut rng, Subset::full(3));
        let subset = Subset::from_bits(trial % 8);
        let one = m.filter_step(&st, a, &full.masked(subset), &noise).unwrap();
        for (q, p) in one.posterior.stddev().data().iter().zip(one.prior.stddev().data()) {
            if subset.is_empty() {
                assert_eq!(q, p);
            } else {
                assert!(q < p);
            }
        }
        for extra in (0..3).filter(|&i| !subset.contains(i)) {
            let two = m.filter_step(&st, a, &full.masked(subset.with(extra)), &noise).unwrap();
            for (wide, narrow) in one.posterior.stddev().data().iter().zip(two.posterior.stddev().data()) {
                assert!(narrow <= wide);
            }
        }
    }
}

#[test]
fn filter_step_invariant_to_modality_order() {
    let m = model(Fusion::Poe, 15);
    let mut config = m.config().clone();
    config.modalities.reverse();
    let reversed = Mrssm::from_parts(config, m.params().clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let st = random_state(&m, &mut rng);
    let obs = random_obs(&m, &mut rng, Subset::full(3));
    let rev_values = (0..3).rev().map(|i| obs.get(i).cloned()).collect();
    let rev_obs = ObservationSet::new(reversed.modalities(), rev_values).unwrap();
    let noise = normal_vec(&mut rng, 4);
    let a = m.filter_step(&st, Action::new(1.0, 0.0), &obs, &noise).unwrap();
    let b = reversed.filter_step(&st, Action::new(1.0, 0.0), &rev_obs, &noise).unwrap();
    for (x, y) in a.posterior.mean().data().iter().zip(b.posterior.mean().data()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.posterior.stddev().data().iter().zip(b.posterior.stddev().data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn rollout_filter_contract() {
    let m = model(Fusion::Poe, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let init = m.initial_state(&normal_vec(&mut rng, 4)).unwrap();
    assert!(m.rollout_filter(&init, &[], &[], &[]).unwrap().is_empty());
    let actions = vec![Action::new(0.5, 0.1); 5];
    let obs: Vec<_> = (0..5).map(|_| ObservationSet::empty(3)).collect();
    let noises: Vec<_> = (0..5).map(|_| normal_vec(&mut rng, 4)).collect();
    assert!(m.rollout_filter(&init, &actions[..4], &obs, &noises).is_err());
    let states = m.rollout_filter(&init, &actions, &obs, &noises).unwrap();
    assert_eq!(states.len(), 5);
    // All-absent rollout equals iterated prior sampling.
    let (mut h, mut s) = (init.h.clone(), init.s.clone());
    for (t, st) in states.iter().enumerate() {
        h = m.deterministic_step(&h, &s, actions[t]).unwrap();
        let prior = m.prior_head(&h).unwrap();
        s = prior.rsample(&noises[t]).unwrap();
        assert_eq!(st.h, h);
        assert_eq!(st.prior, prior);
        assert_eq!(st.s, s);
    }
}

#[test]
fn predict_open_loop_contract() {
    let m = model(Fusion::Poe, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let st = random_state(&m, &mut rng);
    let dec = Subset::from_indices([0, 1]);
    assert!(m.predict_open_loop(&st, &[], &Propagation::Mean, dec).is_err());
    let a = Action::new(1.0, 0.3);
    // H = 1 matches one empty filter step's prior (and its mean latent).
    let p = m.predict_open_loop(&st, &[a], &Propagation::Mean, dec).unwrap();
    let f = m.filter_step(&st, a, &ObservationSet::empty(3), &[0.0; 4]).unwrap();
    assert_eq!(p[0].prior, f.prior);
    let direct = m.decode("vel", &f.h, f.prior.mean()).unwrap();
    assert_eq!(p[0].decoded[0].as_ref().unwrap(), direct.mean());
    assert!(p[0].decoded[2].is_none());
    // Deterministic in mean mode, finite for H = 30.
    let actions = vec![a; 30];
    let x = m.predict_open_loop(&st, &actions, &Propagation::Mean, dec).unwrap();
    assert_eq!(x, m.predict_open_loop(&st, &actions, &Propagation::Mean, dec).unwrap());
    assert!(x.iter().all(|p| p.decoded[0].as_ref().unwrap().is_finite()));
    let noises = (0..30).map(|_| normal_vec(&mut rng, 4)).collect();
    let y = m.predict_open_loop(&st, &actions, &Propagation::Sampled(noises), dec).unwrap();
    assert!(y.iter().all(|p| p.decoded[1].as_ref().unwrap().is_finite()));
    assert!(m.predict_open_loop(&st, &actions, &Propagation::Sampled(vec![]), dec).is_err());
}

#[test]
fn predictions_are_in_raw_units() {
    let mut config = small_config(Fusion::Poe);
    config.modalities[0].offset = 1.0;
    config.modalities[0].scale = 0.5;
    let m: Mrssm<f64> = Mrssm::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let mut plain = config;
    plain.modalities[0].offset = 0.0;
    plain.modalities[0].scale = 1.0;
    let p = Mrssm::from_parts(plain, m.params().clone()).unwrap();
    let st = random_state(&m, &mut ChaCha8Rng::seed_from_u64(22));
    let a = [Action::new(1.0, 0.0)];
    let raw = m.predict_open_loop(&st, &a, &Propagation::Mean, Subset::singleton(0)).unwrap();
    let std = p.predict_open_loop(&st, &a, &Propagation::Mean, Subset::singleton(0)).unwrap();
    let (r, s) = (raw[0].decoded[0].as_ref().unwrap().item(), std[0].decoded[0].as_ref().unwrap().item());
    assert!((r - (s * 0.5 + 1.0)).abs() < 1e-12);
    // Encoders see standardized inputs: raw 3.0 is (3 - 1) / 0.5 = 4.0.
    let e1 = m.encode_expert("vel", &Tensor::from_vec(vec![3.0])).unwrap();
    let e2 = p.encode_expert("vel", &Tensor::from_vec(vec![4.0])).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn concat_baseline_requires_every_modality() {
    let m = model(Fusion::Concat, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let h = Tensor::from_vec(vec![0.1; 8]);
    let full = random_obs(&m, &mut rng, Subset::full(3));
    let g = m.encode_concat(&full, &h).unwrap();
    assert_eq!(g.dim(), 4);
    assert_eq!(g, m.encode_concat(&full, &h).unwrap());
    let partial = full.masked(Subset::from_indices([0, 2]));
    assert!(matches!(m.encode_concat(&partial, &h), Err(Error::MissingModality(name)) if name == "gyro"));
    let st = random_state(&m, &mut rng);
    assert!(m.filter_step(&st, Action::default(), &partial, &[0.0; 4]).is_err());
    assert!(m.filter_step(&st, Action::default(), &full, &[0.0; 4]).is_ok());
    assert!(m.encode_expert("vel", &Tensor::from_vec(vec![0.0])).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m: Mrssm<f32> = Mrssm::new(small_config(Fusion::Poe), &mut ChaCha8Rng::seed_from_u64(25)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    m.save(&path).unwrap();
    let loaded = Mrssm::load(&path).unwrap();
    assert_eq!(loaded, m);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let st: LatentState<f32> = m.initial_state(&normal_vec(&mut rng, 4)).unwrap();
    let mf: Mrssm<f64> = m.cast();
    let obs: ObservationSet<f32> = {
        let o = random_obs(&mf, &mut rng, Subset::full(3));
        ObservationSet::new(m.modalities(), (0..3).map(|i| o.get(i).map(Tensor::cast)).collect()).unwrap()
    };
    let noise = normal_vec(&mut rng, 4);
    let a = m.filter_step(&st, Action::new(1.0, 0.2), &obs, &noise).unwrap();
    let b = loaded.filter_step(&st, Action::new(1.0, 0.2), &obs, &noise).unwrap();
    assert_eq!(a, b);

    // Corruption is reported, not panicked on.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Mrssm::load(&path), Err(Error::Format { .. })));
    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(Mrssm::load(&path), Err(Error::Format { .. })));
}

#[test]
fn subset_parse_and_label() {
    let specs = small_config(Fusion::Poe).modalities;
    let s = Subset::parse("vel+img", &specs).unwrap();
    assert_eq!(s, Subset::from_indices([0, 2]));
    assert_eq!(s.label(&specs), "vel+img");
    assert_eq!(Subset::parse("all", &specs).unwrap().label(&specs), "all");
    assert_eq!(Subset::parse("none", &specs).unwrap(), Subset::EMPTY);
    assert!(Subset::parse("lidar", &specs).is_err());
    assert_eq!(Subset::all_subsets(3).count(), 8);
}

#[test]
fn observation_set_validates() {
    let specs = small_config(Fusion::Poe).modalities;
    assert!(ObservationSet::<f64>::new(&specs, vec![None, None]).is_err());
    assert!(ObservationSet::new(&specs, vec![Some(Tensor::from_vec(vec![0.0, 1.0])), None, None]).is_err());
    assert!(matches!(
        ObservationSet::new(&specs, vec![Some(Tensor::from_vec(vec![f64::NAN])), None, None]),
        Err(Error::NonFinite(_))
    ));
    let o = ObservationSet::from_named(&specs, vec![("gyro", Tensor::from_vec(vec![0.5f64]))]).unwrap();
    assert_eq!(o.mask(), vec![false, true, false]);
    assert_eq!(o.present(), Subset::singleton(1));
}
