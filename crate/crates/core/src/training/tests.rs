use rand::SeedableRng;

use super::*;
use crate::distributions::{rsample, HALF_LN_TWO_PI};
use crate::model::param_grad_check;
use crate::simulator::{generate_dataset, SimConfig};

fn tiny_dataset() -> Dataset {
    let sim = SimConfig { world_size_m: 30.0, region_spacing_m: 2.0, ..SimConfig::default() };
    generate_dataset(&sim, 4, 16, 3).unwrap()
}

fn tiny_config(fusion: Fusion, dataset: &Dataset) -> ModelConfig {
    let mut c = ModelConfig {
        modalities: dataset.specs().to_vec(),
        deter_dim: 8,
        stoch_dim: 4,
        embed_dim: 8,
        hidden_dim: 8,
        conv_channels: [2, 3, 2],
        fusion,
        ..ModelConfig::default()
    };
    fit_normalization(dataset, &mut c.modalities).unwrap();
    c
}

fn tiny_train_config(elbo: ElboVariant) -> TrainingConfig {
    TrainingConfig { sequence_length: 6, batch_size: 3, epochs: 2, seed: 5, elbo, ..TrainingConfig::default() }
}

fn windows() -> Vec<Window> {
    vec![Window { traj: 0, start: 0 }, Window { traj: 1, start: 4 }, Window { traj: 3, start: 7 }]
}

#[test]
fn subset_schedule_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sample_subsets(3, 0, &mut rng).unwrap();
    let expect: Vec<Subset> =
        vec![Subset::full(3), Subset::singleton(0), Subset::singleton(1), Subset::singleton(2)];
    assert_eq!(s.subsets(), expect.as_slice());
    let one = sample_subsets(1, 0, &mut rng).unwrap();
    assert_eq!(one.subsets(), [Subset::singleton(0), Subset::singleton(0)]);
    assert!(sample_subsets(0, 1, &mut rng).is_err());
    assert_eq!(sample_subsets(1, 2, &mut rng).unwrap().subsets().len(), 4);
}

#[test]
fn subset_schedules_are_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = std::collections::BTreeSet::new();
    for draw in 0..1000 {
        let n = 2 + draw % 4;
        let s = sample_subsets(n, 3, &mut rng).unwrap();
        let full = Subset::full(n);
        assert_eq!(s.full(), full);
        assert_eq!(s.subsets().len(), 1 + n + 3);
        for x in &s.subsets()[1..] {
            assert!(x.is_subset_of(full) && !x.is_empty() && *x != full);
        }
        if n == 3 {
            seen.extend(s.subsets()[4..].iter().copied());
        }
    }
    // Every nonempty proper subset of three modalities gets drawn.
    assert_eq!(seen.len(), 6);
}

fn hand_parts(tape: &mut crate::diffmath::Tape<f64>, q_mean: f64, beta: f64) -> ElboParts {
    let c = |tape: &mut crate::diffmath::Tape<f64>, v: f64| tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap());
    let prior = GaussianVar { mean: c(tape, 0.0), stddev: c(tape, 1.0) };
    let posterior = GaussianVar { mean: c(tape, q_mean), stddev: c(tape, 1.0) };
    let noise = c(tape, 0.0);
    let s = rsample(tape, &posterior, noise).unwrap();
    // The decoded mean equals the observation exactly.
    let obs = c(tape, tape.value(s).item());
    ElboParts { recon: vec![Some((1.0, s, obs))], kl_pairs: vec![(posterior, prior)], beta, batch_size: 1 }
}

#[test]
fn elbo_mvae_hand_oracle() {
    for beta in [0.0, 1.0, 2.5] {
        let mut tape = crate::diffmath::Tape::<f64>::new();
        let parts = hand_parts(&mut tape, 0.5, beta);
        let terms = assemble_elbo(&mut tape, &parts).unwrap();
        let loss = tape.value(terms.loss).item();
        assert!((loss - (0.918_938_533_204_672_8 + beta * 0.125)).abs() < 1e-12);
        assert!((tape.value(terms.kl).item() - 0.125).abs() < 1e-15);
    }
}

#[test]
fn perfect_reconstruction_with_zero_beta() {
    for d in [1usize, 3, 7] {
        let mut tape = crate::diffmath::Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, d], (0..2 * d).map(|i| i as f64).collect()).unwrap());
        let g = GaussianVar {
            mean: tape.constant(Tensor::zeros(&[2, 1])),
            stddev: tape.constant(Tensor::full(&[2, 1], 0.5)),
        };
        let parts = ElboParts { recon: vec![Some((1.0, x, x))], kl_pairs: vec![(g, g)], beta: 0.0, batch_size: 2 };
        let terms = assemble_elbo(&mut tape, &parts).unwrap();
        // Two rows per sequence-batch of 2 → one row per sequence.
        assert!((tape.value(terms.loss).item() - d as f64 * HALF_LN_TWO_PI).abs() < 1e-12);
    }
}

#[test]
fn elbo_new_hand_oracle() {
    // Subset {}: the subset posterior is the prior N(0, 1); with zero noise
    // the reconstruction sample is s = 0 and the decoded mean matches the
    // observation. KL is taken from the full posterior N(0.5, 1).
    let mut tape = crate::diffmath::Tape::<f64>::new();
    let c = |tape: &mut crate::diffmath::Tape<f64>, v: f64| tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap());
    let prior = GaussianVar { mean: c(&mut tape, 0.0), stddev: c(&mut tape, 1.0) };
    let full_posterior = GaussianVar { mean: c(&mut tape, 0.5), stddev: c(&mut tape, 1.0) };
    let zero = c(&mut tape, 0.0);
    let s = rsample(&mut tape, &prior, zero).unwrap();
    assert_eq!(tape.value(s).item(), 0.0);
    let obs = c(&mut tape, 0.0);
    let parts = ElboParts {
        recon: vec![Some((1.0, s, obs))],
        kl_pairs: vec![(full_posterior, prior)],
        beta: 1.0,
        batch_size: 1,
    };
    let terms = assemble_elbo(&mut tape, &parts).unwrap();
    assert!((tape.value(terms.loss).item() - (HALF_LN_TWO_PI + 0.125)).abs() < 1e-12);
}

fn f64_model(fusion: Fusion, ds: &Dataset, seed: u64) -> Mrssm<f64> {
    Mrssm::new(tiny_config(fusion, ds), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn full_subset_elbo_new_matches_mvae() {
    let ds = tiny_dataset();
    let m = f64_model(Fusion::Poe, &ds, 6);
    let batch: Batch<f64> =
        Batch::from_windows(&ds, m.config(), &windows(), 6, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let full = Subset::full(4);
    let mut sess = m.session(false);
    let mut bv = BatchVars::record(&mut sess, &batch).unwrap();
    let (mvae, cache) = elbo_mvae(&mut sess, &mut bv, full, 1.0).unwrap();
    let new = elbo_new(&mut sess, &mut bv, full, Some(&cache), 1.0).unwrap();
    let (a, b) = (sess.tape.value(mvae.loss).item(), sess.tape.value(new.loss).item());
    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    assert!(elbo_new(&mut sess, &mut bv, full, None, 1.0).is_err());
}

#[test]
fn elbo_new_reconstructs_everything_for_every_subset() {
    let ds = tiny_dataset();
    let m = f64_model(Fusion::Poe, &ds, 8);
    let batch: Batch<f64> =
        Batch::from_windows(&ds, m.config(), &windows(), 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut sess = m.session(false);
    let mut bv = BatchVars::record(&mut sess, &batch).unwrap();
    let (_, cache) = elbo_mvae(&mut sess, &mut bv, Subset::full(4), 1.0).unwrap();
    for subset in Subset::all_subsets(4) {
        let t = elbo_new(&mut sess, &mut bv, subset, Some(&cache), 1.0).unwrap();
        assert!(t.recon.iter().all(Option::is_some));
        assert!(sess.tape.value(t.loss).item().is_finite());
        for k in &t.kl_steps {
            assert!(sess.tape.value(*k).data().iter().all(|&v| v >= -1e-12));
        }
        let (mv, _) = elbo_mvae(&mut sess, &mut bv, subset, 1.0).unwrap();
        for (i, r) in mv.recon.iter().enumerate() {
            assert_eq!(r.is_some(), subset.contains(i));
        }
        for k in &mv.kl_steps {
            assert!(sess.tape.value(*k).data().iter().all(|&v| v >= -1e-12));
        }
    }
}

#[test]
fn untrained_losses_are_finite() {
    let ds = tiny_dataset();
    let m: Mrssm<f32> = f64_model(Fusion::Poe, &ds, 10).cast();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let w: Vec<Window> = (0..2).map(|_| Window { traj: rng.gen_range(0..4), start: rng.gen_range(0..10) }).collect();
        let batch: Batch<f32> = Batch::from_windows(&ds, m.config(), &w, 6, &mut rng).unwrap();
        let schedule = sample_subsets(4, 1, &mut rng).unwrap();
        let mut sess = m.session(false);
        let mut bv = BatchVars::record(&mut sess, &batch).unwrap();
        for variant in [ElboVariant::Mvae, ElboVariant::New] {
            let obj = batch_objective(&mut sess, &mut bv, variant, &schedule, 1.0).unwrap();
            assert!(sess.tape.value(obj.loss).item().is_finite());
        }
    }
}

#[test]
fn elbo_new_gradients_match_finite_differences() {
    let ds = tiny_dataset();
    let mut config = tiny_config(Fusion::Poe, &ds);
    config.modalities.truncate(2);
    let m: Mrssm<f64> = Mrssm::new(config, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let w = [Window { traj: 0, start: 2 }, Window { traj: 2, start: 5 }];
    let batch: Batch<f64> = Batch::from_windows(&ds, m.config(), &w, 3, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let loss = |sess: &mut Session<'_, f64>| -> Result<Var> {
        let mut bv = BatchVars::record(sess, &batch)?;
        let (_, cache) = elbo_mvae(sess, &mut bv, Subset::full(2), 1.0)?;
        Ok(elbo_new(sess, &mut bv, Subset::singleton(1), Some(&cache), 1.0)?.loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let report = param_grad_check(&m, loss, &[], 1, 1e-5, &mut rng).unwrap();
    assert!(report.len() >= 20);
    for r in &report {
        assert!(r.worst.error < 1e-3, "{}: {:?}", r.name, r.worst);
    }
}

#[test]
fn clipping_and_adam() {
    let mut p = ModelParams::<f32>::default();
    p.insert("a".into(), Tensor::from_vec(vec![1.0, -2.0]));
    let mut g = ModelParams::<f32>::default();
    g.insert("a".into(), Tensor::from_vec(vec![3.0, 4.0]));
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g.get("a").unwrap().data(), [3.0, 4.0]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert_eq!(g.get("a").unwrap().data(), [0.6, 0.8]);
    // First Adam step moves each coordinate by lr·sign(g) (up to eps).
    let mut adam = Adam::new(&p, 0.1);
    adam.update(&mut p, &g);
    let d = p.get("a").unwrap().data();
    assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 2.1).abs() < 1e-6);
}

#[test]
fn training_is_deterministic_and_logs() {
    let ds = tiny_dataset();
    let base = tiny_config(Fusion::Poe, &ds);
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let cfg = tiny_train_config(ElboVariant::New);
    let a = train_run(&base, &ds, &cfg, Some(&p1), |_| {}).unwrap();
    let b = train_run(&base, &ds, &cfg, Some(&p2), |_| {}).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&p1)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "loss", "kl", "recon_lin_vel", "recon_image"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
    let mvae = train_run(&base, &ds, &tiny_train_config(ElboVariant::Mvae), None, |_| {}).unwrap();
    assert_ne!(mvae.model, a.model);
}

#[test]
fn concat_variant_trains_only_with_concat_fusion() {
    let ds = tiny_dataset();
    let cfg = tiny_train_config(ElboVariant::Concat);
    let out = train_run(&tiny_config(Fusion::Concat, &ds), &ds, &cfg, None, |_| {}).unwrap();
    assert!(out.model.params().names().any(|n| n.starts_with("concat.head")));
    assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    assert!(train_run(&tiny_config(Fusion::Poe, &ds), &ds, &cfg, None, |_| {}).is_err());
    let new = tiny_train_config(ElboVariant::New);
    assert!(train_run(&tiny_config(Fusion::Concat, &ds), &ds, &new, None, |_| {}).is_err());
}

#[test]
fn nan_parameters_abort_with_the_tensor_named() {
    let ds = tiny_dataset();
    let mut m: Mrssm<f32> = Mrssm::new(tiny_config(Fusion::Poe, &ds), &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    m.params_mut().get_mut("prior.l2.b").unwrap().data_mut()[0] = f32::NAN;
    let err = train_from(m, &ds, &tiny_train_config(ElboVariant::New), None, |_| {}).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(msg.contains("prior.l2.b"), "{msg}");
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = tiny_dataset();
    let base = tiny_config(Fusion::Poe, &ds);
    for cfg in [
        TrainingConfig { beta: -1.0, ..tiny_train_config(ElboVariant::New) },
        TrainingConfig { sequence_length: 1, ..tiny_train_config(ElboVariant::New) },
        TrainingConfig { batch_size: 0, ..tiny_train_config(ElboVariant::New) },
        TrainingConfig { min_learning_rate: 1.0, ..tiny_train_config(ElboVariant::New) },
    ] {
        assert!(matches!(train_run(&base, &ds, &cfg, None, |_| {}), Err(Error::Config(_))));
    }
    let long = TrainingConfig { sequence_length: 100, ..tiny_train_config(ElboVariant::New) };
    assert!(matches!(train_run(&base, &ds, &long, None, |_| {}), Err(Error::EmptyDataset(_))));
    assert!("bogus".parse::<ElboVariant>().is_err());
    assert_eq!("new".parse::<ElboVariant>().unwrap(), ElboVariant::New);
}

#[test]
fn learning_rate_schedules() {
    let constant = TrainingConfig { learning_rate: 3e-3, epochs: 5, ..TrainingConfig::default() };
    assert!((1..=5).all(|e| constant.learning_rate_at(e) == 3e-3));

    let cosine = TrainingConfig { lr_schedule: LrSchedule::Cosine, min_learning_rate: 1e-4, ..constant.clone() };
    let rates: Vec<f64> = (1..=5).map(|e| cosine.learning_rate_at(e)).collect();
    assert!((rates[0] - 3e-3).abs() < 1e-15 && (rates[4] - 1e-4).abs() < 1e-15);
    // Midpoint of the half-cosine is the mean of the endpoints.
    assert!((rates[2] - 1.55e-3).abs() < 1e-15);
    assert!(rates.windows(2).all(|w| w[1] < w[0]));

    let single = TrainingConfig { epochs: 1, ..cosine };
    assert_eq!(single.learning_rate_at(1), 3e-3);
}
